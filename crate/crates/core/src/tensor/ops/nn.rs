use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Applies `f` to every 1-D lane along an axis, handing it strided index lists.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            f(&mut (0..len).map(move |i| base + i * inner));
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Max-stabilised softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        check_axis("softmax", &shape, axis)?;
        let x = self.value();
        let mut out = vec![T::ZERO; x.len()];
        for_each_lane(&shape, axis, |lane| {
            let idx: Vec<usize> = lane.collect();
            let m = idx.iter().map(|&i| x.data()[i]).fold(x.data()[idx[0]], T::max);
            let mut total = T::ZERO;
            for &i in &idx {
                let e = (x.data()[i] - m).exp();
                out[i] = e;
                total += e;
            }
            for &i in &idx {
                out[i] /= total;
            }
        });
        let bshape = shape.clone();
        self.graph().record("softmax", Tensor::new(shape, out)?, &[self], move |a| {
            let y = a.out.data();
            let mut dx = vec![T::ZERO; y.len()];
            for_each_lane(&bshape, axis, |lane| {
                let idx: Vec<usize> = lane.collect();
                let dot: T = idx.iter().map(|&i| a.grad[i] * y[i]).sum();
                for &i in &idx {
                    dx[i] = y[i] * (a.grad[i] - dot);
                }
            });
            vec![Some(dx)]
        })
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        check_axis("log_softmax", &shape, axis)?;
        let x = self.value();
        let mut out = vec![T::ZERO; x.len()];
        for_each_lane(&shape, axis, |lane| {
            let idx: Vec<usize> = lane.collect();
            let m = idx.iter().map(|&i| x.data()[i]).fold(x.data()[idx[0]], T::max);
            let total: T = idx.iter().map(|&i| (x.data()[i] - m).exp()).sum();
            let lse = m + total.ln();
            for &i in &idx {
                out[i] = x.data()[i] - lse;
            }
        });
        let bshape = shape.clone();
        self.graph().record("log_softmax", Tensor::new(shape, out)?, &[self], move |a| {
            let y = a.out.data();
            let mut dx = vec![T::ZERO; y.len()];
            for_each_lane(&bshape, axis, |lane| {
                let idx: Vec<usize> = lane.collect();
                let gsum: T = idx.iter().map(|&i| a.grad[i]).sum();
                for &i in &idx {
                    dx[i] = a.grad[i] - y[i].exp() * gsum;
                }
            });
            vec![Some(dx)]
        })
    }

    /// Layer normalisation over the trailing extent `n` with affine `gamma[n]`, `beta[n]`.
    /// Variance is the biased (population) estimate; `eps` is added before the root.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        const OP: &str = "layer_norm";
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape(OP, "rank-0 input"))?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape(OP, format!("affine {:?}/{:?} vs trailing extent {n}", gamma.shape(), beta.shape())));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(OP, format!("eps must be positive, got {eps}")));
        }
        let eps_t = T::from_f64(eps);
        let nt = T::from_f64(n as f64);
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let rows = x.len() / n;
        let mut out = vec![T::ZERO; x.len()];
        let mut xhat = vec![T::ZERO; x.len()];
        let mut rstd = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::ONE / (var + eps_t).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        self.graph().record(OP, Tensor::new(shape, out)?, &[self, gamma, beta], move |a| {
            let g = a.input(1).data();
            let mut dx = vec![T::ZERO; xhat.len()];
            let mut dgamma = vec![T::ZERO; n];
            let mut dbeta = vec![T::ZERO; n];
            for r in 0..rows {
                let dy = &a.grad[r * n..(r + 1) * n];
                let xh = &xhat[r * n..(r + 1) * n];
                let mut sum_dxh = T::ZERO;
                let mut sum_dxh_xh = T::ZERO;
                for j in 0..n {
                    let dxh = dy[j] * g[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[j];
                    dgamma[j] += dy[j] * xh[j];
                    dbeta[j] += dy[j];
                }
                for j in 0..n {
                    let dxh = dy[j] * g[j];
                    dx[r * n + j] = rstd[r] / nt * (nt * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        })
    }

    /// Rows along the last axis divided by `norm + floor`.
    pub fn l2_normalize(self, floor: f64) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("l2_normalize", "rank-0 input"))?;
        let floor_t = T::from_f64(floor);
        let x = self.value();
        let norms: Vec<T> = x
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let out: Vec<T> = x
            .data()
            .chunks(n)
            .zip(&norms)
            .flat_map(|(row, &nm)| row.iter().map(move |&v| v / (nm + floor_t)))
            .collect();
        self.graph().record("l2_normalize", Tensor::new(shape, out)?, &[self], move |a| {
            let x = a.input(0).data();
            let mut dx = vec![T::ZERO; x.len()];
            for (r, &nm) in norms.iter().enumerate() {
                let d = nm + floor_t;
                let xr = &x[r * n..(r + 1) * n];
                let gr = &a.grad[r * n..(r + 1) * n];
                let dot: T = xr.iter().zip(gr).map(|(&xv, &g)| xv * g).sum();
                let coef = if nm > T::ZERO { dot / (d * d * nm) } else { T::ZERO };
                for j in 0..n {
                    dx[r * n + j] = gr[j] / d - xr[j] * coef;
                }
            }
            vec![Some(dx)]
        })
    }
}
