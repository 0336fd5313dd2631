#![allow(dead_code)]

use mirage_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Direct cross-correlation with zero padding: one loop per output/kernel axis.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let [b, c_in, h, wd] = x.shape()[..] else { panic!() };
    let [c_out, cin_g, k, _] = w.shape()[..] else { panic!() };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cout_g = c_out / groups;
    let mut out = Tensor::zeros(vec![b, c_out, oh, ow]);
    for n in 0..b {
        for co in 0..c_out {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, grp * cin_g + ci, iy as usize, ix as usize])
                                    * w.at(&[co, ci, ki, kj]);
                            }
                        }
                    }
                    out.set(&[n, co, oy, ox], acc);
                }
            }
        }
    }
    let _ = c_in;
    out
}

/// Naive double-sum DFT of a single `[h, w]` plane over the half spectrum.
pub fn naive_rdft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let wf = w / 2 + 1;
    let mut re = vec![0.0; h * wf];
    let mut im = vec![0.0; h * wf];
    for u in 0..h {
        for v in 0..wf {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let angle = -2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    sr += x[y * w + xx] * angle.cos();
                    si += x[y * w + xx] * angle.sin();
                }
            }
            re[u * wf + v] = sr;
            im[u * wf + v] = si;
        }
    }
    (re, im)
}

/// Direct SSIM: every valid window, 2-D Gaussian weights, no separable filtering.
pub fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let [c, h, w] = x.shape()[..] else { panic!() };
    let (k, sigma) = (11usize, 1.5);
    let centre = 5.0;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = (-((i as f64 - centre).powi(2) + (j as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut n = 0;
    for ch in 0..c {
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += g[i * k + j] * x.at(&[ch, oy + i, ox + j]);
                        my += g[i * k + j] * y.at(&[ch, oy + i, ox + j]);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let dx = x.at(&[ch, oy + i, ox + j]) - mx;
                        let dy = y.at(&[ch, oy + i, ox + j]) - my;
                        vx += g[i * k + j] * dx * dx;
                        vy += g[i * k + j] * dy * dy;
                        cov += g[i * k + j] * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    acc / n as f64
}

/// Succeeds iff the symmetric matrix is positive definite.
pub fn cholesky_ok(a: &[f64], n: usize) -> bool {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return false;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    true
}

/// `r` mutually orthogonal, zero-mean, equal-power signals of length `n`, mixed into
/// `c` channels through an orthonormal-column map.
pub fn rank_r(c: usize, n: usize, r: usize, seed: u64) -> mirage_core::analysis::FeatureSample {
    let signal = |k: usize, p: usize| (std::f64::consts::TAU * (k + 1) as f64 * p as f64 / n as f64).cos();
    // Gram-Schmidt on random columns gives a c x r orthonormal map
    let mut rr = rng(seed);
    let raw = random_tensor(&mut rr, &[r, c]);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for k in 0..r {
        let mut v = raw.data()[k * c..(k + 1) * c].to_vec();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    mirage_core::analysis::FeatureSample::new("rank", Tensor::from_fn(vec![c, n], |i| {
        let (ch, p) = (i / n, i % n);
        (0..r).map(|k| basis[k][ch] * signal(k, p)).sum()
    }))
    .unwrap()
}
