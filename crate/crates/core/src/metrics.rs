//! Restoration quality metrics on images with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM of two `[C, H, W]` images (or `[H, W]` planes), averaged
/// over the valid window positions and the channels.
pub fn ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, p: SsimParams) -> Result<f64> {
    const OP: &str = "ssim";
    if pred.shape() != target.shape() {
        return Err(Error::shape(OP, format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (c, h, w) = match pred.shape() {
        &[h, w] => (1, h, w),
        &[c, h, w] => (c, h, w),
        other => return Err(Error::shape(OP, format!("expected [C,H,W], got {other:?}"))),
    };
    if h < p.window || w < p.window {
        return Err(Error::invalid(OP, format!("image {h}x{w} smaller than the {} window", p.window)));
    }
    let taps = gaussian_taps(p.window, p.sigma);
    let (c1, c2) = ((p.k1).powi(2), (p.k2).powi(2));
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x: Vec<f64> = pred.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let y: Vec<f64> = target.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let syy = filter_valid(&prod(&y, &y), h, w, &taps);
        let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
