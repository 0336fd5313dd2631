//! Synthetic degradations: additive noise, multiplicative attenuation fields and
//! blur kernels, composed into seeded pipelines, plus a procedural clean-image
//! generator and paired-patch dataset construction.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{ConvOptions, Graph, Tensor};

/// SplitMix64 finaliser; derives independent child seeds from one master seed.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of child `index` of `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Gaussian { size: usize, sigma: f64 },
    /// A line through the centre at `angle` degrees from the horizontal.
    MotionLine { size: usize, angle: f64 },
    /// Row-major `size x size` weights.
    Explicit { size: usize, weights: Vec<f64> },
}

impl KernelSpec {
    pub fn size(&self) -> usize {
        match self {
            KernelSpec::Gaussian { size, .. } | KernelSpec::MotionLine { size, .. } | KernelSpec::Explicit { size, .. } => {
                *size
            }
        }
    }

    /// Normalised weights; validates oddness, non-negativity and unit sum.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let size = self.size();
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("blur kernel size {size} must be odd")));
        }
        let c = (size / 2) as f64;
        let raw: Vec<f64> = match self {
            KernelSpec::Gaussian { sigma, .. } => {
                if !(*sigma > 0.0) {
                    return Err(Error::Config(format!("gaussian sigma must be > 0, got {sigma}")));
                }
                (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
            KernelSpec::MotionLine { angle, .. } => {
                let mut k = vec![0.0; size * size];
                let (dy, dx) = angle.to_radians().sin_cos();
                let samples = 8 * size;
                for s in 0..=samples {
                    let t = -c + 2.0 * c * s as f64 / samples as f64;
                    let (y, x) = ((c - t * dy).round() as usize, (c + t * dx).round() as usize);
                    k[y * size + x] += 1.0;
                }
                k
            }
            KernelSpec::Explicit { weights, .. } => {
                if weights.len() != size * size {
                    return Err(Error::Config(format!("explicit kernel needs {} weights", size * size)));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::Config("blur kernel weights must be finite and non-negative".into()));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("blur kernel must sum to 1, sums to {s}")));
                }
                return Ok(weights.clone());
            }
        };
        let s: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|v| v / s).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    /// Gaussian noise with this standard deviation (image values in `[0, 1]`).
    Additive { sigma: f64 },
    /// Per-pixel attenuation: uniform samples in `[min, 1]` on a grid with `scale`
    /// pixels per cell, bilinearly upsampled.
    Multiplicative { min: f64, scale: usize },
    Convolutional { kernel: KernelSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationStage {
    pub kind: StageKind,
    pub seed: u64,
}

impl DegradationStage {
    pub fn new(kind: StageKind) -> Self {
        Self { kind, seed: 0 }
    }

    pub fn additive(sigma: f64) -> Self {
        Self::new(StageKind::Additive { sigma })
    }

    pub fn blur(size: usize, sigma: f64) -> Self {
        Self::new(StageKind::Convolutional {
            kernel: KernelSpec::Gaussian { size, sigma },
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            StageKind::Additive { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")))
            }
            StageKind::Multiplicative { min, scale } => {
                if !(*min > 0.0 && *min <= 1.0) {
                    return Err(Error::Config(format!("attenuation minimum must be in (0, 1], got {min}")));
                }
                if *scale == 0 {
                    return Err(Error::Config("attenuation scale must be positive".into()));
                }
                Ok(())
            }
            StageKind::Convolutional { kernel } => kernel.weights().map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Parses one stage: `additive:SIGMA`, `multiplicative:MIN:SCALE`,
    /// `blur:SIZE:SIGMA` or `motion:SIZE:ANGLE`.
    pub fn parse(text: &str) -> Result<Self> {
        let fields: Vec<&str> = text.split(':').map(str::trim).collect();
        let bad = || Error::Config(format!("malformed degradation stage {text:?}"));
        let real = |s: &str| crate::config::parse_real("data.stages", s);
        let uint = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let kind = match fields[..] {
            ["additive", s] => StageKind::Additive { sigma: real(s)? },
            ["multiplicative", m, s] => StageKind::Multiplicative {
                min: real(m)?,
                scale: uint(s)?,
            },
            ["blur", k, s] => StageKind::Convolutional {
                kernel: KernelSpec::Gaussian {
                    size: uint(k)?,
                    sigma: real(s)?,
                },
            },
            ["motion", k, a] => StageKind::Convolutional {
                kernel: KernelSpec::MotionLine {
                    size: uint(k)?,
                    angle: real(a)?,
                },
            },
            _ => return Err(bad()),
        };
        let stage = Self::new(kind);
        stage.validate()?;
        Ok(stage)
    }

    /// Comma-separated list; empty text gives no stages.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty() && *s != "none")
            .map(Self::parse)
            .collect()
    }

    pub fn format_list(stages: &[Self]) -> String {
        if stages.is_empty() {
            return "none".into();
        }
        stages.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for DegradationStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            StageKind::Additive { sigma } => write!(f, "additive:{sigma}"),
            StageKind::Multiplicative { min, scale } => write!(f, "multiplicative:{min}:{scale}"),
            StageKind::Convolutional { kernel } => match kernel {
                KernelSpec::Gaussian { size, sigma } => write!(f, "blur:{size}:{sigma}"),
                KernelSpec::MotionLine { size, angle } => write!(f, "motion:{size}:{angle}"),
                KernelSpec::Explicit { size, weights } => write!(f, "explicit:{size}:{weights:?}"),
            },
        }
    }
}

/// Ordered stages, innermost first, followed by additive noise and a clamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DegradationSpec {
    pub stages: Vec<DegradationStage>,
    pub final_noise_sigma: f64,
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            s.validate()?;
        }
        DegradationStage::additive(self.final_noise_sigma).validate()
    }

    /// Canonical text, independent of seeds.
    pub fn canonical(&self) -> String {
        format!(
            "stages={};final_noise_sigma={}",
            DegradationStage::format_list(&self.stages),
            self.final_noise_sigma
        )
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn clamp01(t: &mut Tensor<f64>) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn image_dims(image: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref other => Err(Error::shape("degrade", format!("expected [C,H,W], got {other:?}"))),
    }
}

fn add_noise(image: &Tensor<f64>, sigma: f64, seed: u64) -> Tensor<f64> {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = Tensor::from_fn(image.shape().to_vec(), |i| image.data()[i] + normal.sample(&mut rng));
    clamp01(&mut out);
    out
}

fn attenuation_field(h: usize, w: usize, min: f64, scale: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = (h.div_ceil(scale) + 1, w.div_ceil(scale) + 1);
    let grid: Vec<f64> = (0..gh * gw)
        .map(|_| min + (1.0 - min) * rng.random::<f64>())
        .collect();
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / scale as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / scale as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            field[y * w + x] = (top * (1.0 - ty) + bottom * ty).min(1.0);
        }
    }
    field
}

/// Applies one stage to a `[C, H, W]` image in `[0, 1]`, clamping the result.
pub fn apply_stage(image: &Tensor<f64>, stage: &DegradationStage) -> Result<Tensor<f64>> {
    stage.validate()?;
    let (c, h, w) = image_dims(image)?;
    match &stage.kind {
        StageKind::Additive { sigma } => Ok(add_noise(image, *sigma, stage.seed)),
        StageKind::Multiplicative { min, scale } => {
            let field = attenuation_field(h, w, *min, *scale, stage.seed);
            let plane = h * w;
            let mut out = Tensor::from_fn(vec![c, h, w], |i| image.data()[i] * field[i % plane]);
            clamp01(&mut out);
            Ok(out)
        }
        StageKind::Convolutional { kernel } => {
            let weights = kernel.weights()?;
            let k = kernel.size();
            let kern = Tensor::from_fn(vec![c, 1, k, k], |i| weights[i % (k * k)]);
            let g = Graph::<f64>::new();
            let x = g.constant(image.clone().reshape(vec![1, c, h, w])?);
            let y = x.conv2d(g.constant(kern), None, ConvOptions::same(k).with_groups(c))?;
            let mut out = y.to_tensor().reshape(vec![c, h, w])?;
            clamp01(&mut out);
            Ok(out)
        }
    }
}

/// Applies the stages in order, then the final additive noise drawn from `noise_seed`.
pub fn apply_spec(image: &Tensor<f64>, spec: &DegradationSpec, noise_seed: u64) -> Result<Tensor<f64>> {
    spec.validate()?;
    let mut x = image.clone();
    for stage in &spec.stages {
        x = apply_stage(&x, stage)?;
    }
    let mut out = add_noise(&x, spec.final_noise_sigma, noise_seed);
    clamp01(&mut out);
    Ok(out)
}

/// A copy of `spec` whose stage seeds are derived from `seed`; also returns the
/// seed of the final noise.
pub fn seeded(spec: &DegradationSpec, seed: u64) -> (DegradationSpec, u64) {
    let stages = spec
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| s.clone().with_seed(child_seed(seed, i as u64)))
        .collect();
    let noise_seed = child_seed(seed, spec.stages.len() as u64);
    (
        DegradationSpec {
            stages,
            final_noise_sigma: spec.final_noise_sigma,
        },
        noise_seed,
    )
}

/// Seeded smooth clean image `[3, h, w]`: a colour gradient, a few soft-edged
/// half-plane shapes and low-frequency sinusoidal texture.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.15..0.85)))
        .collect();
    let edges: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = rng.random_range(-0.3..0.3);
            let softness = rng.random_range(0.01..0.05);
            (angle, offset, softness, std::array::from_fn(|_| rng.random_range(-0.25..0.25)))
        })
        .collect();
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fy = rng.random_range(0.5..4.0);
            let fx = rng.random_range(0.5..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fy, fx, phase, std::array::from_fn(|_| rng.random_range(-0.08..0.08)))
        })
        .collect();
    let plane = h * w;
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, y, x) = (i / plane, (i % plane) / w, i % w);
        let v = y as f64 / (h.max(2) - 1) as f64;
        let u = x as f64 / (w.max(2) - 1) as f64;
        let mut val = corners[0][c] * (1.0 - u) * (1.0 - v)
            + corners[1][c] * u * (1.0 - v)
            + corners[2][c] * (1.0 - u) * v
            + corners[3][c] * u * v;
        for (angle, offset, softness, color) in &edges {
            let d = (u - 0.5) * angle.cos() + (v - 0.5) * angle.sin() - offset;
            val += color[c] / (1.0 + (-d / softness).exp());
        }
        for (fy, fx, phase, amp) in &waves {
            val += amp[c] * (std::f64::consts::TAU * (fy * v + fx * u) + phase).sin();
        }
        val.clamp(0.0, 1.0)
    })
}

/// One aligned training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub degraded: Tensor<f64>,
    pub clean: Tensor<f64>,
}

fn crop_flip(image: &Tensor<f64>, patch: usize, flips: bool, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    let (flip_h, flip_v) = if flips { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
    Tensor::from_fn(vec![c, patch, patch], |i| {
        let (ch, y, x) = (i / (patch * patch), (i / patch) % patch, i % patch);
        let sy = if flip_v { patch - 1 - y } else { y };
        let sx = if flip_h { patch - 1 - x } else { x };
        image.at(&[ch, y0 + sy, x0 + sx])
    })
}

/// Builds `count` degraded/clean patch pairs. Item `i` picks its source image, crop,
/// flips and degradation seeds from `child_seed(seed, i)`, so the result does not
/// depend on how items are scheduled across threads.
pub fn make_dataset(
    sources: &[Tensor<f64>],
    spec: &DegradationSpec,
    count: usize,
    patch: usize,
    flips: bool,
    seed: u64,
) -> Result<Vec<Pair>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if sources.is_empty() {
        return Err(Error::invalid("make_dataset", "empty clean-image source"));
    }
    spec.validate()?;
    for (i, s) in sources.iter().enumerate() {
        let (c, h, w) = image_dims(s)?;
        if c != 3 || patch == 0 || patch > h || patch > w {
            return Err(Error::invalid(
                "make_dataset",
                format!("patch {patch} does not fit source image {i} of shape {:?}", s.shape()),
            ));
        }
    }
    parallel::map_indexed(count, |i| {
        let item_seed = child_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let source = &sources[rng.random_range(0..sources.len())];
        let clean = crop_flip(source, patch, flips, &mut rng);
        let (item_spec, noise_seed) = seeded(spec, rng.random());
        let degraded = apply_spec(&clean, &item_spec, noise_seed)?;
        Ok(Pair { degraded, clean })
    })
    .into_iter()
    .collect()
}
