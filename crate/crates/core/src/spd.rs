//! Shallow/latent contrastive alignment on regularised channel covariances.
//!
//! Both feature taps are reduced to a common channel width with 1×1 convolutions,
//! summarised by an ε-regularised spatial covariance (a symmetric positive definite
//! matrix), vectorised, projected to a shared embedding space, L2-normalised and
//! aligned with InfoNCE using in-batch negatives.

use crate::error::{Error, Result};
use crate::params::{Builder, Conv, ParamId, Session};
use crate::tensor::{Real, Tensor, Var};

/// Floor added to embedding norms before normalisation.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpdConfig {
    /// Common reduced channel width of both taps.
    pub channels: usize,
    /// Embedding width after projection.
    pub embed: usize,
    pub eps: f64,
    /// Channel fraction kept by the latent projection that precedes the reduction.
    pub latent_projection_ratio: f64,
}

impl Default for SpdConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            embed: 192,
            eps: 1e-5,
            latent_projection_ratio: 0.5,
        }
    }
}

impl SpdConfig {
    pub fn projected_width(&self, latent_width: usize) -> usize {
        (latent_width as f64 * self.latent_projection_ratio).round() as usize
    }

    pub fn validate(&self, latent_width: usize) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("spd eps must be > 0, got {}", self.eps)));
        }
        if self.channels == 0 || self.embed == 0 {
            return Err(Error::Config("spd channels and embed width must be positive".into()));
        }
        let r = self.latent_projection_ratio;
        if !(r > 0.0 && r <= 1.0) || self.projected_width(latent_width) == 0 {
            return Err(Error::Config(format!("latent projection ratio {r} must be in (0, 1]")));
        }
        Ok(())
    }
}

/// Affine map on the last axis: `[B, in] -> [B, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = b.truncated_normal(&[inputs, outputs], 1.0 / (inputs as f64).sqrt());
        Ok(Self {
            weight: b.add(format!("{name}.weight"), weight)?,
            bias: b.filled(format!("{name}.bias"), &[outputs], 0.0)?,
            inputs,
            outputs,
        })
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(s.var(self.weight))?.add_trailing(s.var(self.bias))
    }
}

/// Training-only contrastive head.
#[derive(Debug, Clone)]
pub struct SpdHead {
    pub config: SpdConfig,
    pub latent_proj: Conv,
    pub reduce_shallow: Conv,
    pub reduce_latent: Conv,
    pub proj_shallow: Linear,
    pub proj_latent: Linear,
}

impl SpdHead {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        shallow_width: usize,
        latent_width: usize,
        config: &SpdConfig,
    ) -> Result<Self> {
        config.validate(latent_width)?;
        let projected = config.projected_width(latent_width);
        let c = config.channels;
        Ok(Self {
            config: config.clone(),
            latent_proj: Conv::pointwise(b, &format!("{name}.latent_proj"), latent_width, projected)?,
            reduce_shallow: Conv::pointwise(b, &format!("{name}.reduce_shallow"), shallow_width, c)?,
            reduce_latent: Conv::pointwise(b, &format!("{name}.reduce_latent"), projected, c)?,
            proj_shallow: Linear::new(b, &format!("{name}.proj_shallow"), c * c, config.embed)?,
            proj_latent: Linear::new(b, &format!("{name}.proj_latent"), c * c, config.embed)?,
        })
    }

    /// The channel-projected latent feature.
    pub fn project_latent<'g, T: Real>(&self, s: &Session<'g, T>, latent: Var<'g, T>) -> Result<Var<'g, T>> {
        self.latent_proj.forward(s, latent)
    }

    /// Unit-norm embeddings `(z_shallow, z_latent)`, each `[B, E]`.
    pub fn embeddings<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        shallow: Var<'g, T>,
        latent: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let eps = self.config.eps;
        let cov_s = spd_covariance(self.reduce_shallow.forward(s, shallow)?, eps)?;
        let reduced_l = self.reduce_latent.forward(s, self.project_latent(s, latent)?)?;
        let cov_l = spd_covariance(reduced_l, eps)?;
        Ok((
            project_embed(cov_s, |v| self.proj_shallow.forward(s, v))?,
            project_embed(cov_l, |v| self.proj_latent.forward(s, v))?,
        ))
    }

    /// Full contrastive loss for one batch of taps.
    pub fn loss<'g, T: Real>(
        &self,
        s: &Session<'g, T>,
        shallow: Var<'g, T>,
        latent: Var<'g, T>,
        tau: f64,
        symmetric: bool,
    ) -> Result<Var<'g, T>> {
        let (zs, zl) = self.embeddings(s, shallow, latent)?;
        info_nce(zs, zl, tau, symmetric)
    }
}

/// `[B, C, H, W] -> [B, C, C]`: per-item `(X - mu)(X - mu)^T / (N - 1) + eps I` over
/// the `N = H*W` positions.
pub fn spd_covariance<'g, T: Real>(f: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
    const OP: &str = "spd_covariance";
    let shape = f.shape();
    let [batch, c, h, w] = shape[..] else {
        return Err(Error::shape(OP, format!("expected [B,C,H,W], got {shape:?}")));
    };
    let n = h * w;
    if n < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 positions, got {n}")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(OP, format!("eps must be > 0, got {eps}")));
    }
    let centered = f.reshape(&[batch, c, n])?.center_last()?;
    let cov = centered
        .matmul(centered.transpose_last()?)?
        .mul_scalar(1.0 / (n - 1) as f64)?;
    let ridge = Tensor::from_fn(vec![batch, c, c], |i| {
        let (r, col) = ((i / c) % c, i % c);
        if r == col {
            T::from_f64(eps)
        } else {
            T::ZERO
        }
    });
    cov.add(f.graph().constant(ridge))
}

/// `z = normalize(proj(vec(C)))` for a `[B, C, C]` batch of matrices.
pub fn project_embed<'g, T: Real>(
    cov: Var<'g, T>,
    proj: impl FnOnce(Var<'g, T>) -> Result<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let shape = cov.shape();
    let [batch, c, c2] = shape[..] else {
        return Err(Error::shape("project_embed", format!("expected [B,C,C], got {shape:?}")));
    };
    proj(cov.reshape(&[batch, c * c2])?)?.l2_normalize(NORM_FLOOR)
}

/// InfoNCE with in-batch negatives. Row `i` of `z_s` is the anchor, row `i` of `z_l`
/// its positive and every other row of `z_l` a negative; the denominator includes
/// the positive. With `symmetric`, the loss anchored on `z_l` is averaged in.
pub fn info_nce<'g, T: Real>(z_s: Var<'g, T>, z_l: Var<'g, T>, tau: f64, symmetric: bool) -> Result<Var<'g, T>> {
    const OP: &str = "info_nce";
    let shape = z_s.shape();
    if shape.len() != 2 || z_l.shape() != shape {
        return Err(Error::shape(OP, format!("embeddings {shape:?} and {:?}", z_l.shape())));
    }
    let batch = shape[0];
    if batch < 2 {
        return Err(Error::invalid(OP, "batch of 1 has no negatives"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(OP, format!("temperature must be > 0, got {tau}")));
    }
    let g = z_s.graph();
    let logits = z_s.matmul(z_l.transpose_last()?)?.mul_scalar(1.0 / tau)?;
    let eye = g.constant(Tensor::from_fn(vec![batch, batch], |i| {
        if i / batch == i % batch {
            T::ONE
        } else {
            T::ZERO
        }
    }));
    let scale = -1.0 / batch as f64;
    let forward = logits.log_softmax(1)?.mul(eye)?.sum()?.mul_scalar(scale)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = logits.log_softmax(0)?.mul(eye)?.sum()?.mul_scalar(scale)?;
    forward.add(backward)?.mul_scalar(0.5)
}
