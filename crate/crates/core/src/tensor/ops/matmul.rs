use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm, transpose};
use crate::tensor::{Real, Tensor, Var};

impl<'g, T: Real> Var<'g, T> {
    /// Matrix product of `[m, k]·[k, n]`, or batched `[b, m, k]·[b, k, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("incompatible operands {sa:?} and {sb:?}"))),
        };
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let (av, bv) = (self.value(), other.value());
        let mut out = vec![T::ZERO; batch * m * n];
        for b in 0..batch {
            gemm(
                &av.data()[b * m * k..(b + 1) * m * k],
                &bv.data()[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        self.graph().record("matmul", Tensor::new(out_shape, out)?, &[self, other], move |a| {
            let (x, y) = (a.input(0).data(), a.input(1).data());
            let mut dx = vec![T::ZERO; batch * m * k];
            let mut dy = vec![T::ZERO; batch * k * n];
            for b in 0..batch {
                let g = &a.grad[b * m * n..(b + 1) * m * n];
                let y_t = transpose(&y[b * k * n..(b + 1) * k * n], k, n);
                gemm(g, &y_t, &mut dx[b * m * k..(b + 1) * m * k], m, n, k, false);
                let x_t = transpose(&x[b * m * k..(b + 1) * m * k], m, k);
                gemm(&x_t, g, &mut dy[b * k * n..(b + 1) * k * n], k, m, n, false);
            }
            vec![Some(dx), Some(dy)]
        })
    }
}
