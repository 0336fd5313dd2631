//! The mixed degradation adaptation block: the input channels are split three ways
//! and sent through self-attention, a dynamically-filtered gated convolution and a
//! channel MLP; the branch outputs are cross-gated, concatenated, projected and
//! passed through a normalised feed-forward residual.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Builder, ChannelNorm, Conv, FlopCounter, ParamId, Session};
use crate::tensor::{ConvOptions, Real, Var};

/// Which branches of the block exist. Disabled branches hand their channels to the
/// enabled ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchToggles {
    pub att: bool,
    pub conv: bool,
    pub mlp: bool,
    pub fusion: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self {
            att: true,
            conv: true,
            mlp: true,
            fusion: true,
        }
    }
}

impl BranchToggles {
    pub fn att_only() -> Self {
        Self {
            att: true,
            conv: false,
            mlp: false,
            fusion: false,
        }
    }

    pub fn enabled_count(&self) -> usize {
        [self.att, self.conv, self.mlp].iter().filter(|&&b| b).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_count() == 0 {
            return Err(Error::Config("at least one of att/conv/mlp must be enabled".into()));
        }
        Ok(())
    }
}

/// Token layout of the attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Tokens are pixels; the score matrix is `N x N` per head.
    Spatial,
    /// Tokens are channels; the score matrix is `d x d` per head, keys summed over pixels.
    #[default]
    Channel,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Spatial => "spatial",
            AttentionMode::Channel => "channel",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(AttentionMode::Spatial),
            "channel" => Ok(AttentionMode::Channel),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Static configuration of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct MdabConfig {
    pub channels: usize,
    pub toggles: BranchToggles,
    pub attention: AttentionMode,
    /// Overrides the default head count of `max(1, width/8)`.
    pub heads: Option<usize>,
    pub kernel_size: usize,
    pub mlp_ratio: usize,
    pub ffn_expansion: usize,
}

impl MdabConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            toggles: BranchToggles::default(),
            attention: AttentionMode::default(),
            heads: None,
            kernel_size: 3,
            mlp_ratio: 4,
            ffn_expansion: 2,
        }
    }
}

/// Channel widths of the (att, conv, mlp) branches; zero for disabled branches.
///
/// With all three branches enabled the split must be exact. Otherwise the channels are
/// shared by largest remainder, which for equal shares means the first enabled
/// branches receive the leftover channels.
pub fn branch_widths(channels: usize, toggles: BranchToggles) -> Result<[usize; 3]> {
    toggles.validate()?;
    let enabled = [toggles.att, toggles.conv, toggles.mlp];
    let n = toggles.enabled_count();
    if n == 3 && !channels.is_multiple_of(3) {
        return Err(Error::Config(format!(
            "block width {channels} is not divisible by 3 for the three-way channel split"
        )));
    }
    if channels < n {
        return Err(Error::Config(format!("block width {channels} too small for {n} branches")));
    }
    let (base, mut extra) = (channels / n, channels % n);
    let mut widths = [0; 3];
    for (w, &on) in widths.iter_mut().zip(&enabled) {
        if on {
            *w = base + usize::from(extra > 0);
            extra = extra.saturating_sub(1);
        }
    }
    Ok(widths)
}

/// Splits `[B, C, H, W]` into contiguous channel ranges of the given widths.
/// Zero widths yield `None`.
pub fn split_channels<'g, T: Real>(f: Var<'g, T>, widths: [usize; 3]) -> Result<[Option<Var<'g, T>>; 3]> {
    let sizes: Vec<usize> = widths.iter().copied().filter(|&w| w > 0).collect();
    let mut parts = f.split(1, &sizes)?.into_iter();
    Ok(widths.map(|w| if w > 0 { parts.next() } else { None }))
}

/// `out_i = f_i + lambda_i * sigmoid(sum of the other branches)`, all from the
/// pre-fusion values.
pub fn mutual_fusion<'g, T: Real>(branches: &[Var<'g, T>], lambdas: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
    if branches.len() != lambdas.len() {
        return Err(Error::invalid("mutual_fusion", "one coefficient per branch required"));
    }
    if branches.len() < 2 {
        return Ok(branches.to_vec());
    }
    let shape = branches[0].shape();
    if branches.iter().any(|b| b.shape() != shape) {
        return Err(Error::shape("mutual_fusion", "branch shapes differ"));
    }
    let mut out = Vec::with_capacity(branches.len());
    for (i, (&f, &lambda)) in branches.iter().zip(lambdas).enumerate() {
        let mut others = branches.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v);
        let first = others.next().expect("at least two branches");
        let context = others.try_fold(first, |acc, v| acc.add(v))?;
        out.push(f.add(context.sigmoid()?.scale_by(lambda)?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AttentionBranch {
    pub width: usize,
    pub heads: usize,
    pub mode: AttentionMode,
    pub norm: ChannelNorm,
    pub qkv: Conv,
    pub proj: Conv,
}

impl AttentionBranch {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        heads: Option<usize>,
        mode: AttentionMode,
    ) -> Result<Self> {
        let heads = heads.unwrap_or_else(|| default_heads(width));
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: head count {heads} does not divide attention width {width}"
            )));
        }
        Ok(Self {
            width,
            heads,
            mode,
            norm: ChannelNorm::new(b, &format!("{name}.norm"), width)?,
            qkv: Conv::pointwise(b, &format!("{name}.qkv"), width, 3 * width)?,
            proj: Conv::pointwise(b, &format!("{name}.proj"), width, width)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = f.shape();
        let [batch, c, h, w] = shape[..] else {
            return Err(Error::shape("attention", format!("expected [B,C,H,W], got {shape:?}")));
        };
        let (n, heads, d) = (h * w, self.heads, c / self.heads);
        let qkv = self.qkv.forward(s, self.norm.forward(s, f)?)?;
        let parts = qkv.split(1, &[c, c, c])?;
        let heads_view = |v: Var<'g, T>| v.reshape(&[batch * heads, d, n]);
        let (q, k, v) = (heads_view(parts[0])?, heads_view(parts[1])?, heads_view(parts[2])?);
        let mixed = match self.mode {
            AttentionMode::Channel => {
                // [Bh, d, N] x [Bh, N, d] -> [Bh, d, d]
                let scores = q.matmul(k.transpose_last()?)?.mul_scalar(1.0 / (n as f64).sqrt())?;
                scores.softmax(2)?.matmul(v)?
            }
            AttentionMode::Spatial => {
                let (q, k, v) = (q.transpose_last()?, k.transpose_last()?, v.transpose_last()?);
                // [Bh, N, d] x [Bh, d, N] -> [Bh, N, N]
                let scores = q.matmul(k.transpose_last()?)?.mul_scalar(1.0 / (d as f64).sqrt())?;
                scores.softmax(2)?.matmul(v)?.transpose_last()?
            }
        };
        self.proj.forward(s, mixed.reshape(&[batch, c, h, w])?)
    }

    fn count(&self, batch: usize, h: usize, w: usize, fc: &mut FlopCounter, group: &str) {
        let n = h * w;
        let d = self.width / self.heads;
        let mixing = match self.mode {
            AttentionMode::Channel => 2 * batch * self.width * d * n,
            AttentionMode::Spatial => 2 * batch * self.width * n * n,
        };
        fc.add_macs(group, self.qkv.macs(batch, h, w) + mixing as u64 + self.proj.macs(batch, h, w));
    }
}

fn default_heads(width: usize) -> usize {
    (width / 8).max(1)
}

#[derive(Debug, Clone)]
pub struct ConvBranch {
    pub width: usize,
    /// Channels of the β and α partitions; γ gates their concatenation and is `width` wide.
    pub beta_width: usize,
    pub alpha_width: usize,
    pub kernel_size: usize,
    pub norm: ChannelNorm,
    pub expand: Conv,
    pub kernel_hidden: Conv,
    pub kernel_out: Conv,
    pub gate_temperature: ParamId,
    pub out: Conv,
}

impl ConvBranch {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: dynamic kernel size {kernel_size} must be odd")));
        }
        if width < 2 {
            return Err(Error::Config(format!(
                "{name}: conv branch width {width} cannot be partitioned into beta/alpha"
            )));
        }
        let beta_width = width / 2;
        let alpha_width = width - beta_width;
        let k2 = kernel_size * kernel_size;
        Ok(Self {
            width,
            beta_width,
            alpha_width,
            kernel_size,
            norm: ChannelNorm::new(b, &format!("{name}.norm"), width)?,
            expand: Conv::pointwise(b, &format!("{name}.expand"), width, 2 * width)?,
            kernel_hidden: Conv::pointwise(b, &format!("{name}.kernel_hidden"), alpha_width, alpha_width)?,
            kernel_out: Conv::pointwise(b, &format!("{name}.kernel_out"), alpha_width, alpha_width * k2)?,
            gate_temperature: b.scalar(format!("{name}.gate_temperature"), 1.0)?,
            out: Conv::pointwise(b, &format!("{name}.out"), width, width)?,
        })
    }

    /// Per-sample, per-channel depthwise kernels `[B*C, 1, k, k]` generated from the
    /// pooled content of `alpha`.
    pub fn dynamic_kernel<'g, T: Real>(&self, s: &Session<'g, T>, alpha: Var<'g, T>) -> Result<Var<'g, T>> {
        let batch = alpha.shape()[0];
        let pooled = alpha.global_avg_pool()?;
        let hidden = self.kernel_hidden.forward(s, pooled)?.gelu()?;
        let k = self.kernel_size;
        self.kernel_out
            .forward(s, hidden)?
            .reshape(&[batch * self.alpha_width, 1, k, k])
    }

    /// Depthwise correlation of each sample's `alpha` channels with its own kernels.
    pub fn apply_dynamic<'g, T: Real>(&self, alpha: Var<'g, T>, kernel: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = alpha.shape();
        let [batch, c, h, w] = shape[..] else {
            return Err(Error::shape("dynamic_conv", format!("expected [B,C,H,W], got {shape:?}")));
        };
        let opts = ConvOptions::same(self.kernel_size).with_groups(batch * c);
        alpha
            .reshape(&[1, batch * c, h, w])?
            .conv2d(kernel, None, opts)?
            .reshape(&[batch, c, h, w])
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let expanded = self.expand.forward(s, self.norm.forward(s, f)?)?;
        let parts = expanded.split(1, &[self.width, self.beta_width, self.alpha_width])?;
        let (gamma, beta, alpha) = (parts[0], parts[1], parts[2]);
        let kernel = self.dynamic_kernel(s, alpha)?;
        let filtered = self.apply_dynamic(alpha, kernel)?;
        let gate = gamma.div_by(s.var(self.gate_temperature))?.sigmoid()?;
        let gated = gate.mul(Var::concat(&[beta, filtered], 1)?)?;
        self.out.forward(s, gated)?.add(f)
    }

    fn count(&self, batch: usize, h: usize, w: usize, fc: &mut FlopCounter, group: &str) {
        let k2 = self.kernel_size * self.kernel_size;
        let depthwise = (batch * self.alpha_width * k2 * h * w) as u64;
        fc.add_macs(
            group,
            self.expand.macs(batch, h, w)
                + self.kernel_hidden.macs(batch, 1, 1)
                + self.kernel_out.macs(batch, 1, 1)
                + depthwise
                + self.out.macs(batch, h, w),
        );
    }
}

/// Channel MLP: two pointwise (length-1 1-D) convolutions over the flattened pixels
/// with GELU between, plus a residual.
#[derive(Debug, Clone)]
pub struct MlpBranch {
    pub width: usize,
    pub fc1: Conv,
    pub fc2: Conv,
}

impl MlpBranch {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config(format!("{name}: mlp ratio must be positive")));
        }
        Ok(Self {
            width,
            fc1: Conv::pointwise(b, &format!("{name}.fc1"), width, ratio * width)?,
            fc2: Conv::pointwise(b, &format!("{name}.fc2"), ratio * width, width)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let hidden = self.fc1.forward(s, f)?.gelu()?;
        self.fc2.forward(s, hidden)?.add(f)
    }

    fn count(&self, batch: usize, h: usize, w: usize, fc: &mut FlopCounter, group: &str) {
        fc.add_macs(group, self.fc1.macs(batch, h, w) + self.fc2.macs(batch, h, w));
    }
}

#[derive(Debug, Clone)]
pub struct Mdab {
    pub config: MdabConfig,
    pub widths: [usize; 3],
    pub att: Option<AttentionBranch>,
    pub conv: Option<ConvBranch>,
    pub mlp: Option<MlpBranch>,
    /// One coefficient per enabled branch, present only when fusion is on and at
    /// least two branches exist.
    pub fusion: Option<Vec<ParamId>>,
    pub proj: Conv,
    pub ffn_norm: ChannelNorm,
    pub ffn_in: Conv,
    pub ffn_out: Conv,
}

pub const FUSION_INIT: f64 = 0.1;

impl Mdab {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, config: &MdabConfig) -> Result<Self> {
        let c = config.channels;
        let t = config.toggles;
        let widths = branch_widths(c, t).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        let att = t
            .att
            .then(|| AttentionBranch::new(b, &format!("{name}.att"), widths[0], config.heads, config.attention))
            .transpose()?;
        let conv = t
            .conv
            .then(|| ConvBranch::new(b, &format!("{name}.conv"), widths[1], config.kernel_size))
            .transpose()?;
        let mlp = t
            .mlp
            .then(|| MlpBranch::new(b, &format!("{name}.mlp"), widths[2], config.mlp_ratio))
            .transpose()?;
        let fusion = if t.fusion && t.enabled_count() >= 2 {
            let mut ids = Vec::new();
            for (branch, on) in ["att", "conv", "mlp"].iter().zip([t.att, t.conv, t.mlp]) {
                if on {
                    ids.push(b.scalar(format!("{name}.fusion.{branch}"), FUSION_INIT)?);
                }
            }
            Some(ids)
        } else {
            None
        };
        let hidden = config.ffn_expansion * c;
        Ok(Self {
            config: config.clone(),
            widths,
            att,
            conv,
            mlp,
            fusion,
            proj: Conv::pointwise(b, &format!("{name}.proj"), c, c)?,
            ffn_norm: ChannelNorm::new(b, &format!("{name}.ffn_norm"), c)?,
            ffn_in: Conv::pointwise(b, &format!("{name}.ffn_in"), c, hidden)?,
            ffn_out: Conv::pointwise(b, &format!("{name}.ffn_out"), hidden, c)?,
        })
    }

    /// Branch outputs after fusion, concatenated in (att, conv, mlp) order; this is
    /// the input of the output projection.
    pub fn mixed_features<'g, T: Real>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let [fa, fc, fm] = split_channels(f, self.widths)?;
        let mut outs = Vec::with_capacity(3);
        if let (Some(branch), Some(x)) = (&self.att, fa) {
            outs.push(branch.forward(s, x)?);
        }
        if let (Some(branch), Some(x)) = (&self.conv, fc) {
            outs.push(branch.forward(s, x)?);
        }
        if let (Some(branch), Some(x)) = (&self.mlp, fm) {
            outs.push(branch.forward(s, x)?);
        }
        if let Some(ids) = &self.fusion {
            let lambdas: Vec<_> = ids.iter().map(|&id| s.var(id)).collect();
            outs = mutual_fusion(&outs, &lambdas)?;
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        Var::concat(&outs, 1)
    }

    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let fused = self.proj.forward(s, self.mixed_features(s, f)?)?;
        let hidden = self.ffn_in.forward(s, self.ffn_norm.forward(s, fused)?)?.gelu()?;
        self.ffn_out.forward(s, hidden)?.add(fused)
    }

    pub fn count_flops(&self, batch: usize, h: usize, w: usize, fc: &mut FlopCounter, group: &str) {
        if let Some(a) = &self.att {
            a.count(batch, h, w, fc, group);
        }
        if let Some(c) = &self.conv {
            c.count(batch, h, w, fc, group);
        }
        if let Some(m) = &self.mlp {
            m.count(batch, h, w, fc, group);
        }
        fc.add_macs(
            group,
            self.proj.macs(batch, h, w) + self.ffn_in.macs(batch, h, w) + self.ffn_out.macs(batch, h, w),
        );
    }
}
