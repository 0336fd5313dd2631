//! Differentiable operations on [`Var`](super::Var). Each forward computes a fresh
//! tensor and records a backward rule returning per-input gradient contributions.

mod conv;
mod elementwise;
pub(crate) mod fft;
mod matmul;
mod nn;
mod reduce;
mod shape;

pub use conv::ConvOptions;

use super::{Real, Var};
use crate::error::{Error, Result};

pub(crate) fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("shapes differ: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

pub(crate) fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}
