//! The full restoration network: a convolutional patch embedding, a four-scale
//! encoder/decoder of mixed blocks with skip connections, a refinement stack and a
//! zero-initialised output head added back onto the input.

use crate::error::{Error, Result};
use crate::mdab::{AttentionMode, BranchToggles, Mdab, MdabConfig};
use crate::params::{Binding, Builder, Conv, ConvTranspose, FlopCounter, Init, ParamStore, Session};
use crate::spd::{SpdConfig, SpdHead};
use crate::tensor::{ConvOptions, Graph, Real, Tensor, Var};

/// Number of encoder scales; the deepest runs at 1/8 resolution.
pub const SCALES: usize = 4;
const ALIGN: usize = 1 << (SCALES - 1);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Blocks per encoder scale; decoder scales 3..1 reuse the counts of the
    /// encoder scale at the same resolution.
    pub blocks: [usize; SCALES],
    pub refinement_blocks: usize,
    pub ffn_expansion: usize,
    pub mlp_ratio: usize,
    pub kernel_size: usize,
    pub attention: AttentionMode,
    pub toggles: BranchToggles,
    pub enable_spd: bool,
    pub spd: SpdConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            embed_dim: 24,
            blocks: [3, 5, 5, 7],
            refinement_blocks: 2,
            ffn_expansion: 2,
            mlp_ratio: 4,
            kernel_size: 3,
            attention: AttentionMode::Channel,
            toggles: BranchToggles::default(),
            enable_spd: true,
            spd: SpdConfig::default(),
        }
    }

    pub fn small() -> Self {
        Self {
            embed_dim: 30,
            refinement_blocks: 3,
            ..Self::tiny()
        }
    }

    /// Desk-scale model used for smoke training.
    pub fn micro() -> Self {
        Self {
            embed_dim: 12,
            blocks: [1, 2, 2, 2],
            refinement_blocks: 1,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown model preset {other:?} (tiny, small, micro)"))),
        }
    }

    pub fn width(&self, scale: usize) -> usize {
        self.embed_dim << (scale - 1)
    }

    pub fn latent_width(&self) -> usize {
        self.width(SCALES)
    }

    pub fn block_config(&self, channels: usize) -> MdabConfig {
        MdabConfig {
            channels,
            toggles: self.toggles,
            attention: self.attention,
            heads: None,
            kernel_size: self.kernel_size,
            mlp_ratio: self.mlp_ratio,
            ffn_expansion: self.ffn_expansion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut failed = Vec::new();
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            failed.push(format!("embed_dim {} must be a positive even number", self.embed_dim));
        }
        if self.toggles.enabled_count() == 3 && !self.embed_dim.is_multiple_of(3) {
            failed.push(format!("embed_dim {} must be divisible by 3", self.embed_dim));
        }
        if self.toggles.enabled_count() == 0 {
            failed.push("at least one branch must be enabled".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            failed.push(format!("dynamic_kernel_size {} must be odd", self.kernel_size));
        }
        if self.ffn_expansion == 0 || self.mlp_ratio == 0 {
            failed.push("ffn_expansion and mlp_ratio must be positive".into());
        }
        if self.enable_spd {
            if let Err(e) = self.spd.validate(self.latent_width()) {
                failed.push(e.to_string());
            }
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(failed.join("; ")))
        }
    }
}

/// Inference network; the contrastive head lives beside it in [`Model`].
#[derive(Debug, Clone)]
pub struct Network {
    pub embed: Conv,
    pub encoders: Vec<Vec<Mdab>>,
    pub downs: Vec<Conv>,
    pub ups: Vec<ConvTranspose>,
    pub merges: Vec<Conv>,
    /// Decoder stacks, deepest first (scale 3, 2, 1).
    pub decoders: Vec<Vec<Mdab>>,
    pub refine: Vec<Mdab>,
    pub head: Conv,
}

fn stack<T: Real>(b: &mut Builder<'_, T>, name: &str, count: usize, cfg: &MdabConfig) -> Result<Vec<Mdab>> {
    (0..count).map(|i| Mdab::new(b, &format!("{name}.{i}"), cfg)).collect()
}

impl Network {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let embed = Conv::new(b, "embed", 3, c, 3, ConvOptions::same(3), Init::FanIn)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for s in 1..=SCALES {
            let w = cfg.width(s);
            encoders.push(stack(b, &format!("enc{s}"), cfg.blocks[s - 1], &cfg.block_config(w))?);
            if s < SCALES {
                let opts = ConvOptions::same(3).with_stride(2);
                downs.push(Conv::new(b, &format!("down{s}"), w, 2 * w, 3, opts, Init::FanIn)?);
            }
        }
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        let mut decoders = Vec::new();
        for s in (1..SCALES).rev() {
            let w = cfg.width(s);
            ups.push(ConvTranspose::new(b, &format!("up{s}"), 2 * w, w, 2)?);
            merges.push(Conv::pointwise(b, &format!("merge{s}"), 2 * w, w)?);
            decoders.push(stack(b, &format!("dec{s}"), cfg.blocks[s - 1], &cfg.block_config(w))?);
        }
        let refine = stack(b, "refine", cfg.refinement_blocks, &cfg.block_config(c))?;
        let head = Conv::new(b, "head", c, 3, 3, ConvOptions::same(3), Init::Zero)?;
        Ok(Self {
            embed,
            encoders,
            downs,
            ups,
            merges,
            decoders,
            refine,
            head,
        })
    }

    /// Runs the network on an input whose extents are multiples of 8.
    fn forward_aligned<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Forward<'g, T>> {
        let shallow = self.embed.forward(s, x)?;
        let mut h = shallow;
        let mut scales = Vec::with_capacity(SCALES);
        for (i, blocks) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = self.downs[i - 1].forward(s, h)?;
            }
            for block in blocks {
                h = block.forward(s, h)?;
            }
            scales.push(h);
        }
        let latent = h;
        for (i, blocks) in self.decoders.iter().enumerate() {
            let skip = scales[SCALES - 2 - i];
            let up = self.ups[i].forward(s, h)?;
            h = self.merges[i].forward(s, Var::concat(&[up, skip], 1)?)?;
            for block in blocks {
                h = block.forward(s, h)?;
            }
        }
        for block in &self.refine {
            h = block.forward(s, h)?;
        }
        let restored = x.add(self.head.forward(s, h)?)?;
        Ok(Forward {
            restored,
            shallow,
            latent,
            scales,
        })
    }

    /// Restores `[B, 3, H, W]`. Inputs whose extents are not multiples of 8 are
    /// reflect-padded on the bottom/right and the output is cropped back.
    pub fn forward<'g, T: Real>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Forward<'g, T>> {
        let shape = x.shape();
        let [_, 3, h, w] = shape[..] else {
            return Err(Error::shape("restore", format!("expected [B,3,H,W], got {shape:?}")));
        };
        let (ph, pw) = ((ALIGN - h % ALIGN) % ALIGN, (ALIGN - w % ALIGN) % ALIGN);
        if ph == 0 && pw == 0 {
            return self.forward_aligned(s, x);
        }
        let mut out = self.forward_aligned(s, x.pad_reflect(ph, pw)?)?;
        out.restored = out.restored.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok(out)
    }

    pub fn count_flops(&self, batch: usize, h: usize, w: usize, fc: &mut FlopCounter) {
        fc.add_macs("embed", self.embed.macs(batch, h, w));
        let (mut sh, mut sw) = (h, w);
        for (i, blocks) in self.encoders.iter().enumerate() {
            let group = format!("enc{}", i + 1);
            if i > 0 {
                fc.add_macs(&format!("down{i}"), self.downs[i - 1].macs(batch, sh, sw));
                (sh, sw) = (sh.div_ceil(2), sw.div_ceil(2));
            }
            for block in blocks {
                block.count_flops(batch, sh, sw, fc, &group);
            }
        }
        for (i, blocks) in self.decoders.iter().enumerate() {
            let s = SCALES - 1 - i;
            fc.add_macs(&format!("up{s}"), self.ups[i].macs(batch, sh, sw));
            (sh, sw) = (sh * 2, sw * 2);
            fc.add_macs(&format!("merge{s}"), self.merges[i].macs(batch, sh, sw));
            for block in blocks {
                block.count_flops(batch, sh, sw, fc, &format!("dec{s}"));
            }
        }
        for block in &self.refine {
            block.count_flops(batch, sh, sw, fc, "refine");
        }
        fc.add_macs("head", self.head.macs(batch, sh, sw));
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<'g, T: Real> {
    pub restored: Var<'g, T>,
    /// Patch-embedding output: `embed_dim` channels at full resolution.
    pub shallow: Var<'g, T>,
    /// Deepest encoder output: `8·embed_dim` channels at 1/8 resolution.
    pub latent: Var<'g, T>,
    /// Encoder outputs of scales 1..4 (the last equals `latent`).
    pub scales: Vec<Var<'g, T>>,
}

/// Parameter counts per top-level submodule.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    /// `(group, parameters, training_only)`.
    pub groups: Vec<(String, usize, bool)>,
}

impl Census {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }

    pub fn inference_total(&self) -> usize {
        self.groups.iter().filter(|g| !g.2).map(|g| g.1).sum()
    }
}

/// A network, its optional contrastive head and their parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub net: Network,
    pub spd: Option<SpdHead>,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds the model with every parameter drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, seed);
        let net = Network::new(&mut b, config)?;
        let spd = config
            .enable_spd
            .then(|| SpdHead::new(&mut b, "spd", config.embed_dim, config.latent_width(), &config.spd))
            .transpose()?;
        Ok(Self {
            config: config.clone(),
            net,
            spd,
            params,
        })
    }

    pub fn census(&self) -> Census {
        let mut groups: Vec<(String, usize, bool)> = Vec::new();
        for (name, t) in self.params.iter() {
            let group = name.split('.').next().unwrap_or(name);
            match groups.iter_mut().find(|g| g.0 == group) {
                Some(g) => g.1 += t.len(),
                None => groups.push((group.to_string(), t.len(), group == "spd")),
            }
        }
        Census { groups }
    }

    pub fn count_flops(&self, h: usize, w: usize) -> FlopCounter {
        let mut fc = FlopCounter::new();
        self.net.count_flops(1, h, w, &mut fc);
        fc
    }

    pub fn forward<'g>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Forward<'g, T>> {
        self.net.forward(s, x)
    }

    /// Inference-only restoration of a `[B, 3, H, W]` batch.
    pub fn restore(&self, degraded: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let s = Session::bind(&g, &self.params, Binding::Frozen);
        let out = self.forward(&s, g.constant(degraded.clone()))?;
        Ok(out.restored.to_tensor())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            net: self.net.clone(),
            spd: self.spd.clone(),
            params: self.params.cast(),
        }
    }
}
