//! Real-input 2-D DFT as a pair of linear maps, evaluated separably with
//! precomputed cosine/sine tables.

use crate::error::{Error, Result};
use crate::tensor::kernels::gemm;
use crate::tensor::{Real, Tensor, Var};

/// `cos(2π·r·c/n)` and `sin(2π·r·c/n)` for `r < rows`, `c < n`, row-major `[rows, n]`.
pub(crate) fn dft_tables<T: Real>(n: usize, rows: usize) -> (Vec<T>, Vec<T>) {
    let mut cos = Vec::with_capacity(rows * n);
    let mut sin = Vec::with_capacity(rows * n);
    for r in 0..rows {
        for c in 0..n {
            // reduce the product mod n first to keep the angle small and exact
            let angle = 2.0 * std::f64::consts::PI * ((r * c) % n) as f64 / n as f64;
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Real,
    Imag,
}

struct Tables<T> {
    h: usize,
    w: usize,
    wf: usize,
    ch: Vec<T>,
    sh: Vec<T>,
    cw_t: Vec<T>,
    sw_t: Vec<T>,
    cw: Vec<T>,
    sw: Vec<T>,
}

impl<T: Real> Tables<T> {
    fn new(h: usize, w: usize) -> Self {
        let wf = w / 2 + 1;
        let (ch, sh) = dft_tables(h, h);
        let (cw, sw) = dft_tables(w, wf);
        let cw_t = crate::tensor::kernels::transpose(&cw, wf, w);
        let sw_t = crate::tensor::kernels::transpose(&sw, wf, w);
        Self { h, w, wf, ch, sh, cw_t, sw_t, cw, sw }
    }

    /// Forward map of one `[h, w]` plane to one `[h, wf]` spectrum part.
    fn forward(&self, x: &[T], part: Part, out: &mut [T]) {
        let (h, w, wf) = (self.h, self.w, self.wf);
        let mut p1 = vec![T::ZERO; h * wf];
        let mut p2 = vec![T::ZERO; h * wf];
        gemm(x, &self.cw_t, &mut p1, h, w, wf, false);
        gemm(x, &self.sw_t, &mut p2, h, w, wf, false);
        let mut a = vec![T::ZERO; h * wf];
        let mut b = vec![T::ZERO; h * wf];
        match part {
            // Re = C_H·P1 − S_H·P2
            Part::Real => {
                gemm(&self.ch, &p1, &mut a, h, h, wf, false);
                gemm(&self.sh, &p2, &mut b, h, h, wf, false);
                out.iter_mut().zip(a.iter().zip(&b)).for_each(|(o, (&x, &y))| *o = x - y);
            }
            // Im = −(S_H·P1 + C_H·P2)
            Part::Imag => {
                gemm(&self.sh, &p1, &mut a, h, h, wf, false);
                gemm(&self.ch, &p2, &mut b, h, h, wf, false);
                out.iter_mut().zip(a.iter().zip(&b)).for_each(|(o, (&x, &y))| *o = -(x + y));
            }
        }
    }

    /// Adjoint of [`Tables::forward`] (the tables are symmetric in the square factor).
    fn adjoint(&self, g: &[T], part: Part, dx: &mut [T]) {
        let (h, w, wf) = (self.h, self.w, self.wf);
        let mut q1 = vec![T::ZERO; h * w];
        let mut q2 = vec![T::ZERO; h * w];
        gemm(g, &self.cw, &mut q1, h, wf, w, false);
        gemm(g, &self.sw, &mut q2, h, wf, w, false);
        let mut a = vec![T::ZERO; h * w];
        let mut b = vec![T::ZERO; h * w];
        match part {
            Part::Real => {
                gemm(&self.ch, &q1, &mut a, h, h, w, false);
                gemm(&self.sh, &q2, &mut b, h, h, w, false);
                dx.iter_mut().zip(a.iter().zip(&b)).for_each(|(o, (&x, &y))| *o = x - y);
            }
            Part::Imag => {
                gemm(&self.sh, &q1, &mut a, h, h, w, false);
                gemm(&self.ch, &q2, &mut b, h, h, w, false);
                dx.iter_mut().zip(a.iter().zip(&b)).for_each(|(o, (&x, &y))| *o = -(x + y));
            }
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    fn rfft2_part(self, part: Part) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape("rfft2", format!("need at least [H, W], got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let tables = Tables::<T>::new(h, w);
        let wf = tables.wf;
        let planes = self.len() / (h * w);
        let x = self.value();
        let mut out = vec![T::ZERO; planes * h * wf];
        for p in 0..planes {
            tables.forward(&x.data()[p * h * w..(p + 1) * h * w], part, &mut out[p * h * wf..(p + 1) * h * wf]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank checked") = wf;
        let op = match part {
            Part::Real => "rfft2_real",
            Part::Imag => "rfft2_imag",
        };
        self.graph().record(op, Tensor::new(out_shape, out)?, &[self], move |a| {
            let mut dx = vec![T::ZERO; planes * h * w];
            for p in 0..planes {
                tables.adjoint(&a.grad[p * h * wf..(p + 1) * h * wf], part, &mut dx[p * h * w..(p + 1) * h * w]);
            }
            vec![Some(dx)]
        })
    }

    /// Unnormalised 2-D DFT of a real `[..., H, W]` input over the half spectrum,
    /// returned as `(real, imag)`, each `[..., H, W/2 + 1]`.
    pub fn rfft2(self) -> Result<(Var<'g, T>, Var<'g, T>)> {
        Ok((self.rfft2_part(Part::Real)?, self.rfft2_part(Part::Imag)?))
    }
}
