//! Forward-only dense linear algebra (no gradients), backed by `nalgebra`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn square(op: &'static str, data: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if data.len() != n * n {
        return Err(Error::shape(op, format!("{} elements is not {n}x{n}", data.len())));
    }
    Ok(DMatrix::from_row_slice(n, n, data))
}

/// Eigenvalues of a symmetric `n×n` row-major matrix, sorted descending.
pub fn symmetric_eigenvalues(data: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = square("symmetric_eigenvalues", data, n)?;
    let mut values: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Singular values of a `rows×cols` row-major matrix, sorted descending.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if data.len() != rows * cols {
        return Err(Error::shape("singular_values", format!("{} elements is not {rows}x{cols}", data.len())));
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut values: Vec<f64> = m.singular_values().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
