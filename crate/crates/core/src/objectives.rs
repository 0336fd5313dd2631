//! Training objective (pixel L1, Fourier L1, weighted contrastive term), the Adam
//! optimiser and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub fourier: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fourier: 0.1,
            contrastive: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.fourier >= 0.0 && self.contrastive >= 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss<'g, T: Real>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    pred.sub(target)?.abs()?.mean()
}

/// L1 distance between the half spectra of `pred` and `target`, real and imaginary
/// parts together, averaged over all `2 * ... * H * (W/2 + 1)` spectral values.
pub fn fourier_loss<'g, T: Real>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    let (re, im) = pred.sub(target)?.rfft2()?;
    re.abs()?.mean()?.add(im.abs()?.mean()?)?.mul_scalar(0.5)
}

/// Loss components of one step, all as graph values.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g, T: Real> {
    pub total: Var<'g, T>,
    pub l1: Var<'g, T>,
    pub fourier: Option<Var<'g, T>>,
    pub contrastive: Option<Var<'g, T>>,
}

/// `L1 + w_fre * Fourier + w_ctrs * contrastive`. A `None` component, or a component
/// whose weight is zero, contributes nothing.
pub fn total_loss<'g, T: Real>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    contrastive: Option<Var<'g, T>>,
    weights: LossWeights,
    use_fourier: bool,
) -> Result<LossTerms<'g, T>> {
    weights.validate()?;
    let l1 = l1_loss(pred, target)?;
    let mut total = l1;
    let fourier = if use_fourier {
        let f = fourier_loss(pred, target)?;
        if weights.fourier != 0.0 {
            total = total.add(f.mul_scalar(weights.fourier)?)?;
        }
        Some(f)
    } else {
        None
    };
    if let Some(c) = contrastive {
        if weights.contrastive != 0.0 {
            total = total.add(c.mul_scalar(weights.contrastive)?)?;
        }
    }
    Ok(LossTerms {
        total,
        l1,
        fourier,
        contrastive,
    })
}

/// `lr_min + (lr0 - lr_min)(1 + cos(pi * step / total)) / 2`; steps past the end give `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    if step >= total_steps {
        return lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |id| vec![T::ZERO; params.get(id).len()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// Applies one update. `grads` holds one tensor per parameter in store order.
    /// Non-finite gradients abort the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("adam", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} for parameter {} of shape {:?}", g.shape(), params.name(id), params.get(id).shape()),
                ));
            }
            if let Some(index) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("adam gradient of {}", params.name(id)),
                    index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in params.ids().zip(grads) {
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j].to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                p[j] = T::from_f64(p[j].to_f64() - update);
            }
        }
        Ok(())
    }
}
