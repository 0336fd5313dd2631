use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

impl<'g, T: Real> Var<'g, T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'g, T>> {
        let total: T = self.value().data().iter().copied().sum();
        let n = self.len();
        self.graph().record("sum", Tensor::scalar(total), &[self], move |a| vec![Some(vec![a.grad[0]; n])])
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = self.len();
        let nt = T::from_f64(n as f64);
        let total: T = self.value().data().iter().copied().sum();
        self.graph().record("mean", Tensor::scalar(total / nt), &[self], move |a| {
            vec![Some(vec![a.grad[0] / nt; n])]
        })
    }

    /// Adaptive average pooling of `[B, C, H, W]` to `[B, C, 1, 1]`.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::shape("global_avg_pool", format!("expected [B,C,H,W], got {shape:?}")));
        };
        let plane = h * w;
        let pt = T::from_f64(plane as f64);
        let out: Vec<T> = self
            .value()
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / pt)
            .collect();
        self.graph().record("global_avg_pool", Tensor::new(vec![b, c, 1, 1], out)?, &[self], move |a| {
            vec![Some(a.grad.iter().flat_map(|&g| std::iter::repeat_n(g / pt, plane)).collect())]
        })
    }

    /// Subtracts from every lane along the last axis its own mean.
    pub fn center_last(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("center_last", "rank-0 input"))?;
        let nt = T::from_f64(n as f64);
        let out: Vec<T> = self
            .value()
            .data()
            .chunks(n)
            .flat_map(|row| {
                let m = row.iter().copied().sum::<T>() / nt;
                row.iter().map(move |&v| v - m)
            })
            .collect();
        self.graph().record("center_last", Tensor::new(shape, out)?, &[self], move |a| {
            vec![Some(
                a.grad
                    .chunks(n)
                    .flat_map(|row| {
                        let m = row.iter().copied().sum::<T>() / nt;
                        row.iter().map(move |&g| g - m)
                    })
                    .collect(),
            )]
        })
    }
}
