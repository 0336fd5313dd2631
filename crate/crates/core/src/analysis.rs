//! Channel-redundancy diagnostics of feature maps: PCA cumulative explained
//! variance, normalised singular-value spectra, channel cosine similarity and
//! effective rank, with CSV writers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::linalg::{singular_values, symmetric_eigenvalues};
use crate::tensor::{Real, Tensor};

/// Default energy threshold of [`RankMethod::Threshold`].
pub const DEFAULT_THRESHOLD: f64 = 0.99;

/// A `[C, N]` matrix of channels by positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub tag: String,
    pub data: Tensor<f64>,
}

impl FeatureSample {
    pub fn new(tag: impl Into<String>, data: Tensor<f64>) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::shape("feature_sample", format!("expected [C,N], got {:?}", data.shape())));
        }
        let (c, n) = (data.shape()[0], data.shape()[1]);
        if n < c {
            log::warn!("feature sample {c} channels x {n} positions: spectra beyond rank {n} are zero");
        }
        Ok(Self { tag: tag.into(), data })
    }

    /// Gathers the positions of every batch item of a `[B, C, H, W]` map.
    pub fn from_maps<T: Real>(tag: impl Into<String>, maps: &Tensor<T>) -> Result<Self> {
        let &[b, c, h, w] = maps.shape() else {
            return Err(Error::shape("feature_sample", format!("expected [B,C,H,W], got {:?}", maps.shape())));
        };
        let hw = h * w;
        let n = b * hw;
        let data = Tensor::from_fn(vec![c, n], |i| {
            let (ch, p) = (i / n, i % n);
            maps.data()[(p / hw) * c * hw + ch * hw + p % hw].to_f64()
        });
        Self::new(tag, data)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.data.shape()[1]
    }

    fn centered(&self) -> Vec<f64> {
        let (c, n) = (self.channels(), self.positions());
        let mut x = self.data.data().to_vec();
        for row in x.chunks_mut(n).take(c) {
            let mean = row.iter().sum::<f64>() / n as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        x
    }
}

/// Cumulative fraction of variance explained by the top `k` principal components,
/// for `k = 1..=C`. All-zero input gives all ones.
pub fn pca_cumvar(f: &FeatureSample) -> Result<Vec<f64>> {
    let (c, n) = (f.channels(), f.positions());
    if n < 2 {
        return Err(Error::invalid("pca_cumvar", format!("need at least 2 positions, got {n}")));
    }
    let x = f.centered();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let v: f64 = x[i * n..(i + 1) * n].iter().zip(&x[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum();
            cov[i * c + j] = v / (n - 1) as f64;
            cov[j * c + i] = v / (n - 1) as f64;
        }
    }
    let eig: Vec<f64> = symmetric_eigenvalues(&cov, c)?.into_iter().map(|e| e.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    if total == 0.0 {
        log::warn!("pca_cumvar on constant features ({}): reporting all ones", f.tag);
        return Ok(vec![1.0; c]);
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = eig
        .iter()
        .map(|e| {
            acc += e;
            (acc / total).min(1.0)
        })
        .collect();
    *out.last_mut().expect("at least one channel") = 1.0;
    Ok(out)
}

fn centered_singular_values(f: &FeatureSample) -> Result<Vec<f64>> {
    singular_values(&f.centered(), f.channels(), f.positions())
}

/// Singular values of the channel-centred matrix divided by the largest; length
/// `min(C, N)`. All-zero input gives all zeros.
pub fn svd_spectrum(f: &FeatureSample) -> Result<Vec<f64>> {
    let s = centered_singular_values(f)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        log::warn!("svd_spectrum on constant features ({}): reporting zeros", f.tag);
        return Ok(vec![0.0; s.len()]);
    }
    Ok(s.iter().map(|v| (v / top).clamp(0.0, 1.0)).collect())
}

/// Cosine similarity between channel rows; zero-norm rows are similar only to
/// themselves.
pub fn channel_similarity(f: &FeatureSample) -> Vec<f64> {
    let (c, n) = (f.channels(), f.positions());
    let x = f.data.data();
    let norms: Vec<f64> = (0..c)
        .map(|i| x[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        out[i * c + i] = 1.0;
        for j in i + 1..c {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = x[i * n..(i + 1) * n].iter().zip(&x[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            out[i * c + j] = s;
            out[j * c + i] = s;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankMethod {
    /// `exp` of the Shannon entropy of the singular values normalised to sum 1.
    Entropy,
    /// Smallest `k` whose top-`k` squared singular values hold at least this
    /// fraction of the total energy.
    Threshold(f64),
}

/// Effective rank of the channel-centred features; 0 for constant input.
pub fn effective_rank(f: &FeatureSample, method: RankMethod) -> Result<f64> {
    let s = centered_singular_values(f)?;
    Ok(rank_from_spectrum(&s, method))
}

/// Effective rank of a descending singular-value spectrum.
pub fn rank_from_spectrum(s: &[f64], method: RankMethod) -> f64 {
    match method {
        RankMethod::Entropy => {
            let total: f64 = s.iter().sum();
            if total == 0.0 {
                return 0.0;
            }
            let h: f64 = s
                .iter()
                .map(|v| v / total)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            h.exp()
        }
        RankMethod::Threshold(theta) => {
            let energy: Vec<f64> = s.iter().map(|v| v * v).collect();
            let total: f64 = energy.iter().sum();
            if total == 0.0 {
                return 0.0;
            }
            let mut acc = 0.0;
            for (k, e) in energy.iter().enumerate() {
                acc += e;
                // relative slack absorbs rounding in the running sum
                if acc >= theta * total * (1.0 - 1e-12) {
                    return (k + 1) as f64;
                }
            }
            s.len() as f64
        }
    }
}

/// Both effective-rank estimates of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub tag: String,
    pub channels: usize,
    pub positions: usize,
    pub entropy: f64,
    pub threshold: f64,
}

impl RankReport {
    pub fn of(f: &FeatureSample, theta: f64) -> Result<Self> {
        let s = centered_singular_values(f)?;
        Ok(Self {
            tag: f.tag.clone(),
            channels: f.channels(),
            positions: f.positions(),
            entropy: rank_from_spectrum(&s, RankMethod::Entropy),
            threshold: rank_from_spectrum(&s, RankMethod::Threshold(theta)),
        })
    }

    /// Entropy effective rank as a fraction of the channel count.
    pub fn entropy_ratio(&self) -> f64 {
        self.entropy / self.channels as f64
    }

    pub fn threshold_ratio(&self) -> f64 {
        self.threshold / self.channels as f64
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `component,cumulative_variance`.
pub fn write_cumvar_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::from("component,cumulative_variance\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{},{v}", i + 1).expect("string write");
    }
    write_file(path, &s)
}

/// `component,normalized_singular_value`.
pub fn write_spectrum_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::from("component,normalized_singular_value\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{},{v}", i + 1).expect("string write");
    }
    write_file(path, &s)
}

/// One row per channel: `channel,c0,c1,...`.
pub fn write_similarity_csv(path: &Path, sim: &[f64], channels: usize) -> Result<()> {
    let mut s = String::from("channel");
    for j in 0..channels {
        write!(s, ",c{j}").expect("string write");
    }
    s.push('\n');
    for i in 0..channels {
        write!(s, "{i}").expect("string write");
        for j in 0..channels {
            write!(s, ",{}", sim[i * channels + j]).expect("string write");
        }
        s.push('\n');
    }
    write_file(path, &s)
}

/// `tag,channels,positions,entropy_rank,threshold_rank,entropy_ratio,threshold_ratio`.
pub fn write_effrank_csv(path: &Path, reports: &[RankReport]) -> Result<()> {
    let mut s = String::from("tag,channels,positions,entropy_rank,threshold_rank,entropy_ratio,threshold_ratio\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.tag,
            r.channels,
            r.positions,
            r.entropy,
            r.threshold,
            r.entropy_ratio(),
            r.threshold_ratio()
        )
        .expect("string write");
    }
    write_file(path, &s)
}
