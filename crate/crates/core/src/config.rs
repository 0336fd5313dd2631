//! Flat `section.key = value` run configuration.
//!
//! Every key has a default; unknown or repeated keys are errors. Presets
//! (`model.preset`, `train.preset`) are applied first, then the explicit keys in
//! any order. [`RunConfig::to_text`] renders the canonical sorted form that run logs
//! and checkpoints embed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::degrade::{DegradationSpec, DegradationStage};
use crate::error::{Error, Result};
use crate::mdab::AttentionMode;
use crate::network::ModelConfig;
use crate::objectives::LossWeights;
use crate::tensor::DType;

/// Where clean training images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Procedural,
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weights: LossWeights,
    pub tau: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub symmetric_nce: bool,
    pub enable_fourier: bool,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            patch: 32,
            lr0: 2e-4,
            lr_min: 1e-6,
            weights: LossWeights::default(),
            tau: 0.1,
            seed: 0,
            checkpoint_every: 100,
            symmetric_nce: false,
            enable_fourier: true,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    /// The full recipe of the reference training run; far beyond desk scale.
    pub fn full() -> Self {
        Self {
            steps: 120 * 1000,
            batch: 32,
            patch: 128,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: Source,
    /// Number of clean images (procedural or the first `count` files of a directory).
    pub count: usize,
    /// Side length of procedural images.
    pub source_size: usize,
    pub spec: DegradationSpec,
    pub flips: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Procedural,
            count: 16,
            source_size: 32,
            spec: DegradationSpec {
                stages: Vec::new(),
                final_noise_sigma: 25.0 / 255.0,
            },
            flips: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {k:?} given twice", n + 1)));
        }
    }
    Ok(out)
}

/// Parses a real, also accepting a `num/den` fraction such as `25/255`.
pub fn parse_real(key: &str, v: &str) -> Result<f64> {
    let bad = || Error::Config(format!("{key}: expected a number, got {v:?}"));
    let value = match v.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if !value.is_finite() {
        return Err(bad());
    }
    Ok(value)
}

fn parse_uint<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_blocks(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|p| parse_uint(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| Error::Config(format!("{key}: expected 4 block counts, got {}", p.len())))
}

/// Applies one `model.*` key (without the section prefix).
fn apply_model_key(m: &mut ModelConfig, key: &str, full: &str, v: &str) -> Result<()> {
    match key {
        "embed_dim" => m.embed_dim = parse_uint(full, v)?,
        "blocks" => m.blocks = parse_blocks(full, v)?,
        "refinement_blocks" => m.refinement_blocks = parse_uint(full, v)?,
        "ffn_expansion" => m.ffn_expansion = parse_uint(full, v)?,
        "mlp_ratio" => m.mlp_ratio = parse_uint(full, v)?,
        "dynamic_kernel_size" => m.kernel_size = parse_uint(full, v)?,
        "attention" => m.attention = v.parse::<AttentionMode>()?,
        "enable_att" => m.toggles.att = parse_bool(full, v)?,
        "enable_conv" => m.toggles.conv = parse_bool(full, v)?,
        "enable_mlp" => m.toggles.mlp = parse_bool(full, v)?,
        "enable_fusion" => m.toggles.fusion = parse_bool(full, v)?,
        "enable_spd" => m.enable_spd = parse_bool(full, v)?,
        "spd_channels" => m.spd.channels = parse_uint(full, v)?,
        "spd_embed" => m.spd.embed = parse_uint(full, v)?,
        "spd_eps" => m.spd.eps = parse_real(full, v)?,
        "latent_projection_ratio" => m.spd.latent_projection_ratio = parse_real(full, v)?,
        _ => return Err(Error::Config(format!("unknown key {full:?}"))),
    }
    Ok(())
}

/// Canonical `model.*` pairs, sorted by key.
pub fn model_pairs(m: &ModelConfig) -> BTreeMap<String, String> {
    let b = &m.blocks;
    [
        ("embed_dim", m.embed_dim.to_string()),
        ("blocks", format!("{},{},{},{}", b[0], b[1], b[2], b[3])),
        ("refinement_blocks", m.refinement_blocks.to_string()),
        ("ffn_expansion", m.ffn_expansion.to_string()),
        ("mlp_ratio", m.mlp_ratio.to_string()),
        ("dynamic_kernel_size", m.kernel_size.to_string()),
        ("attention", m.attention.to_string()),
        ("enable_att", m.toggles.att.to_string()),
        ("enable_conv", m.toggles.conv.to_string()),
        ("enable_mlp", m.toggles.mlp.to_string()),
        ("enable_fusion", m.toggles.fusion.to_string()),
        ("enable_spd", m.enable_spd.to_string()),
        ("spd_channels", m.spd.channels.to_string()),
        ("spd_embed", m.spd.embed.to_string()),
        ("spd_eps", m.spd.eps.to_string()),
        ("latent_projection_ratio", m.spd.latent_projection_ratio.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("model.{k}"), v))
    .collect()
}

fn pairs_text(pairs: &BTreeMap<String, String>) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// `model.*` section text as embedded in checkpoints.
pub fn model_to_text(m: &ModelConfig) -> String {
    pairs_text(&model_pairs(m))
}

/// Inverse of [`model_to_text`]; keys other than `model.*` are rejected.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let pairs = parse_pairs(text)?;
    let mut m = match pairs.get("model.preset") {
        Some(p) => ModelConfig::preset(p)?,
        None => ModelConfig::tiny(),
    };
    for (k, v) in &pairs {
        match k.strip_prefix("model.") {
            Some("preset") => {}
            Some(key) => apply_model_key(&mut m, key, k, v)?,
            None => return Err(Error::Config(format!("unexpected key {k:?} in model config"))),
        }
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        if let Some(p) = pairs.get("model.preset") {
            cfg.model = ModelConfig::preset(p)?;
        }
        if let Some(p) = pairs.get("train.preset") {
            cfg.train = match p.as_str() {
                "desk" => TrainConfig::default(),
                "full" => TrainConfig::full(),
                other => return Err(Error::Config(format!("unknown train preset {other:?} (desk, full)"))),
            };
        }
        let mut stages = None;
        for (k, v) in &pairs {
            let (section, key) = k.split_once('.').unwrap_or(("", k));
            let t = &mut cfg.train;
            let d = &mut cfg.data;
            match (section, key) {
                ("model", "preset") | ("train", "preset") => {}
                ("model", key) => apply_model_key(&mut cfg.model, key, k, v)?,
                ("train", "steps") => t.steps = parse_uint(k, v)?,
                ("train", "batch") => t.batch = parse_uint(k, v)?,
                ("train", "patch") => t.patch = parse_uint(k, v)?,
                ("train", "lr0") => t.lr0 = parse_real(k, v)?,
                ("train", "lr_min") => t.lr_min = parse_real(k, v)?,
                ("train", "lambda_fre") => t.weights.fourier = parse_real(k, v)?,
                ("train", "lambda_ctrs") => t.weights.contrastive = parse_real(k, v)?,
                ("train", "tau") => t.tau = parse_real(k, v)?,
                ("train", "seed") => t.seed = parse_uint(k, v)?,
                ("train", "checkpoint_every") => t.checkpoint_every = parse_uint(k, v)?,
                ("train", "symmetric_nce") => t.symmetric_nce = parse_bool(k, v)?,
                ("train", "enable_fourier") => t.enable_fourier = parse_bool(k, v)?,
                ("train", "dtype") => t.dtype = v.parse()?,
                ("data", "source") => {
                    d.source = match v.as_str() {
                        "procedural" => Source::Procedural,
                        dir => Source::Dir(PathBuf::from(dir)),
                    }
                }
                ("data", "count") => d.count = parse_uint(k, v)?,
                ("data", "source_size") => d.source_size = parse_uint(k, v)?,
                ("data", "stages") => stages = Some(v.clone()),
                ("data", "final_noise_sigma") => d.spec.final_noise_sigma = parse_real(k, v)?,
                ("data", "flips") => d.flips = parse_bool(k, v)?,
                ("output", "dir") => cfg.output_dir = PathBuf::from(v),
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        if let Some(s) = stages {
            cfg.data.spec.stages = DegradationStage::parse_list(&s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        t.weights.validate()?;
        if t.batch == 0 || t.patch == 0 {
            return Err(Error::Config("train.batch and train.patch must be positive".into()));
        }
        if !(t.lr0 > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr0) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr0 and lr0 > 0, got {} / {}", t.lr_min, t.lr0)));
        }
        if !(t.tau > 0.0) {
            return Err(Error::Config(format!("train.tau must be > 0, got {}", t.tau)));
        }
        if self.model.enable_spd && t.batch < 2 {
            return Err(Error::Config("the contrastive loss needs train.batch >= 2".into()));
        }
        self.data.spec.validate()?;
        if self.data.source == Source::Procedural && self.data.source_size < t.patch {
            return Err(Error::Config(format!(
                "data.source_size {} is smaller than train.patch {}",
                self.data.source_size, t.patch
            )));
        }
        Ok(())
    }

    /// Names of the disabled components, in a fixed order.
    pub fn ablations(&self) -> Vec<&'static str> {
        let m = &self.model;
        [
            (!m.toggles.att, "att"),
            (!m.toggles.conv, "conv"),
            (!m.toggles.mlp, "mlp"),
            (!m.toggles.fusion, "fusion"),
            (!m.enable_spd, "spd"),
            (!self.train.enable_fourier, "fourier"),
        ]
        .into_iter()
        .filter_map(|(off, name)| off.then_some(name))
        .collect()
    }

    /// Canonical text: every key with its effective value, sorted.
    pub fn to_text(&self) -> String {
        let mut pairs = model_pairs(&self.model);
        let t = &self.train;
        let d = &self.data;
        let mut put = |k: &str, v: String| {
            pairs.insert(k.to_string(), v);
        };
        put("train.steps", t.steps.to_string());
        put("train.batch", t.batch.to_string());
        put("train.patch", t.patch.to_string());
        put("train.lr0", t.lr0.to_string());
        put("train.lr_min", t.lr_min.to_string());
        put("train.lambda_fre", t.weights.fourier.to_string());
        put("train.lambda_ctrs", t.weights.contrastive.to_string());
        put("train.tau", t.tau.to_string());
        put("train.seed", t.seed.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.symmetric_nce", t.symmetric_nce.to_string());
        put("train.enable_fourier", t.enable_fourier.to_string());
        put("train.dtype", t.dtype.name().to_string());
        put(
            "data.source",
            match &d.source {
                Source::Procedural => "procedural".to_string(),
                Source::Dir(p) => p.display().to_string(),
            },
        );
        put("data.count", d.count.to_string());
        put("data.source_size", d.source_size.to_string());
        put("data.stages", DegradationStage::format_list(&d.spec.stages));
        put("data.final_noise_sigma", d.spec.final_noise_sigma.to_string());
        put("data.flips", d.flips.to_string());
        put("output.dir", self.output_dir.display().to_string());
        pairs_text(&pairs)
    }
}
