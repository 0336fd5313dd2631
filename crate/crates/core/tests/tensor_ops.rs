mod common;

use common::{conv2d_oracle, naive_rdft2, random_tensor, rng};
use mirage_core::tensor::gradcheck::gradcheck;
use mirage_core::tensor::{ConvOptions, Graph, Tensor, Var};
use mirage_core::{Error, Result};
use proptest::prelude::*;

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, opts: ConvOptions) -> Result<Tensor<f64>> {
    let g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    Ok(xv.conv2d(wv, None, opts)?.to_tensor())
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 3, 5, 6]);
    let mut w = Tensor::zeros(vec![3, 1, 3, 3]);
    for c in 0..3 {
        w.set(&[c, 0, 1, 1], 1.0);
    }
    let y = conv(&x, &w, ConvOptions::same(3).with_groups(3)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn depthwise_box_kernel_on_constant_image() {
    let c = 0.37;
    let x = Tensor::full(vec![1, 2, 5, 5], c);
    let w = Tensor::full(vec![2, 1, 3, 3], 1.0);
    let y = conv(&x, &w, ConvOptions::same(3).with_groups(2)).unwrap();
    for ch in 0..2 {
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.at(&[0, ch, i, j]) - 9.0 * c).abs() < 1e-15);
            }
        }
    }
    // corners only see four in-bounds taps
    assert!((y.at(&[0, 0, 0, 0]) - 4.0 * c).abs() < 1e-15);
}

#[test]
fn random_depthwise_matches_loop_oracle() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[1, 2, 4, 4]);
    let w = random_tensor(&mut r, &[2, 1, 3, 3]);
    let y = conv(&x, &w, ConvOptions::same(3).with_groups(2)).unwrap();
    assert!(y.max_abs_diff(&conv2d_oracle(&x, &w, 1, 1, 2)) <= 1e-12);
}

#[test]
fn conv_matches_oracle_over_groups_and_kernel_sizes() {
    let mut r = rng(3);
    for &(b, c, h, w) in &[(1, 2, 5, 7), (2, 4, 8, 8), (2, 8, 8, 8), (1, 6, 3, 4)] {
        for groups in [1, c] {
            for k in [1, 3, 5] {
                let x = random_tensor(&mut r, &[b, c, h, w]);
                let kernel = random_tensor(&mut r, &[c, c / groups, k, k]);
                let y = conv(&x, &kernel, ConvOptions::same(k).with_groups(groups)).unwrap();
                let oracle = conv2d_oracle(&x, &kernel, 1, k / 2, groups);
                let err = y.max_abs_diff(&oracle);
                assert!(err <= 1e-12, "b{b} c{c} {h}x{w} g{groups} k{k}: {err}");
            }
        }
    }
}

#[test]
fn strided_conv_matches_oracle() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[2, 3, 8, 6]);
    let w = random_tensor(&mut r, &[5, 3, 3, 3]);
    let opts = ConvOptions::same(3).with_stride(2);
    let y = conv(&x, &w, opts).unwrap();
    assert_eq!(y.shape(), &[2, 5, 4, 3]);
    assert!(y.max_abs_diff(&conv2d_oracle(&x, &w, 2, 1, 1)) <= 1e-12);
}

#[test]
fn conv_rejects_even_kernels_and_bad_groups() {
    let x = Tensor::<f64>::zeros(vec![1, 4, 4, 4]);
    let even = Tensor::zeros(vec![4, 4, 2, 2]);
    assert!(matches!(conv(&x, &even, ConvOptions::same(2)), Err(Error::InvalidArgument { .. })));
    let w = Tensor::zeros(vec![4, 1, 3, 3]);
    assert!(matches!(conv(&x, &w, ConvOptions::same(3).with_groups(3)), Err(Error::Shape { .. })));
    // kernel declares 2 input channels per group but groups=4 gives 1
    let w = Tensor::zeros(vec![4, 2, 3, 3]);
    assert!(matches!(conv(&x, &w, ConvOptions::same(3).with_groups(4)), Err(Error::Shape { .. })));
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same kernel
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 6, 6]);
    let y = random_tensor(&mut r, &[2, 4, 3, 3]);
    // stride-2 correlation with k=2, no padding: kernel [4, 3, 2, 2]
    let w = random_tensor(&mut r, &[4, 3, 2, 2]);
    let cx = conv2d_oracle(&x, &w, 2, 0, 1);
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let g = Graph::new();
    // conv_transpose kernel layout is [C_in, C_out, k, k] with C_in = 4 here
    let wt = g.constant(w.clone());
    let ty = g.constant(y.clone()).conv_transpose2d(wt, None, 2).unwrap().to_tensor();
    assert_eq!(ty.shape(), x.shape());
    let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

fn softmax_of(values: &[f64], shape: &[usize], axis: usize) -> Tensor<f64> {
    let g = Graph::new();
    g.constant(Tensor::from_f64(shape.to_vec(), values).unwrap())
        .softmax(axis)
        .unwrap()
        .to_tensor()
}

#[test]
fn softmax_uniform_and_closed_form() {
    let y = softmax_of(&[0.3; 5], &[5], 0);
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let y = softmax_of(&[0.0, 2f64.ln()], &[2], 0);
    assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariant_and_normalised() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[3, 4, 5]);
    for axis in 0..3 {
        let y = softmax_of(x.data(), x.shape(), axis);
        let shifted: Vec<f64> = x.data().iter().map(|v| v + 123.25).collect();
        let ys = softmax_of(&shifted, x.shape(), axis);
        assert!(y.max_abs_diff(&ys) < 1e-12);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let y = softmax_of(x.data(), x.shape(), 1);
    for a in 0..3 {
        for c in 0..5 {
            let s: f64 = (0..4).map(|b| y.at(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

fn rfft(x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let g = Graph::new();
    let (re, im) = g.constant(x.clone()).rfft2().unwrap();
    (re.to_tensor(), im.to_tensor())
}

#[test]
fn rfft2_of_constant_and_impulse() {
    let c = 0.75;
    let (re, im) = rfft(&Tensor::full(vec![3, 5], c));
    assert_eq!(re.shape(), &[3, 3]);
    assert!((re.data()[0] - c * 15.0).abs() < 1e-12);
    assert!(re.data()[1..].iter().all(|v| v.abs() < 1e-12));
    assert!(im.data().iter().all(|v| v.abs() < 1e-12));

    let mut delta = Tensor::zeros(vec![4, 6]);
    delta.set(&[0, 0], 1.0);
    let (re, im) = rfft(&delta);
    assert!(re.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    assert!(im.data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn rfft2_matches_naive_dft() {
    let mut r = rng(7);
    for &(h, w) in &[(4, 4), (3, 5), (8, 6), (1, 7)] {
        let x = random_tensor(&mut r, &[2, h, w]);
        let (re, im) = rfft(&x);
        for p in 0..2 {
            let (ore, oim) = naive_rdft2(&x.data()[p * h * w..(p + 1) * h * w], h, w);
            let wf = w / 2 + 1;
            for i in 0..h * wf {
                assert!((re.data()[p * h * wf + i] - ore[i]).abs() <= 1e-10);
                assert!((im.data()[p * h * wf + i] - oim[i]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn rfft2_is_linear() {
    let mut r = rng(8);
    let x = random_tensor(&mut r, &[5, 6]);
    let y = random_tensor(&mut r, &[5, 6]);
    let (a, b) = (1.7, -0.4);
    let mix = Tensor::from_fn(vec![5, 6], |i| a * x.data()[i] + b * y.data()[i]);
    let (mr, mi) = rfft(&mix);
    let (xr, xi) = rfft(&x);
    let (yr, yi) = rfft(&y);
    for i in 0..mr.len() {
        assert!((mr.data()[i] - (a * xr.data()[i] + b * yr.data()[i])).abs() <= 1e-10);
        assert!((mi.data()[i] - (a * xi.data()[i] + b * yi.data()[i])).abs() <= 1e-10);
    }
}

fn layer_norm_of(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let n = gamma.len();
    let g = Graph::new();
    let gv = g.constant(Tensor::from_f64(vec![n], gamma).unwrap());
    let bv = g.constant(Tensor::from_f64(vec![n], beta).unwrap());
    g.constant(x.clone()).layer_norm(gv, bv, eps).unwrap().to_tensor()
}

#[test]
fn layer_norm_constant_and_fixed_point() {
    let ones = [1.0; 4];
    let zeros = [0.0; 4];
    let y = layer_norm_of(&Tensor::full(vec![2, 4], 3.3), &ones, &zeros, 1e-5);
    assert!(y.data().iter().all(|&v| v == 0.0));

    // zero-mean vector with variance + eps = 1 maps to itself
    let eps = 1e-5;
    let s = (1.0f64 - eps).sqrt();
    let x = Tensor::from_f64(vec![4], &[s, -s, s, -s]).unwrap();
    let y = layer_norm_of(&x, &ones, &zeros, eps);
    assert!(y.max_abs_diff(&x) < 1e-12);
}

#[test]
fn layer_norm_matches_formula() {
    let mut r = rng(9);
    let x = random_tensor(&mut r, &[8]);
    let gamma = random_tensor(&mut r, &[8]);
    let beta = random_tensor(&mut r, &[8]);
    let eps = 1e-5;
    let y = layer_norm_of(&x, gamma.data(), beta.data(), eps);
    let mean = x.data().iter().sum::<f64>() / 8.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    for i in 0..8 {
        let expect = (x.data()[i] - mean) / (var + eps).sqrt() * gamma.data()[i] + beta.data()[i];
        assert!((y.data()[i] - expect).abs() <= 1e-12);
    }
}

#[test]
fn gradcheck_quadratic_reports_exact_gradient() {
    let x = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
    let g = Graph::new();
    let v = g.param(x.clone());
    let loss = v.mul(v).unwrap().sum().unwrap();
    let grad = g.backward(loss).unwrap().wrt(v).unwrap();
    assert_eq!(grad.data(), &[2.0, 4.0, 6.0]);
    let report = gradcheck(|_, v| v[0].mul(v[0])?.sum(), &[x], 1e-5, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_error <= 1e-6);
}

#[test]
fn gradcheck_matmul_sum() {
    let mut r = rng(10);
    let a = random_tensor(&mut r, &[3, 3]);
    let b = random_tensor(&mut r, &[3, 3]);
    let report = gradcheck(|_, v| v[0].matmul(v[1])?.sum(), &[a, b], 1e-5, 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn gradcheck_rejects_bad_step() {
    let x = Tensor::from_f64(vec![1], &[1.0]).unwrap();
    assert!(gradcheck(|_, v| v[0].sum(), &[x], 1e-2, 1e-5).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![2], &[1.0, f64::MAX]).unwrap());
    let err = x.mul_scalar(10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[2, 4, 6, 6]);
    let w = random_tensor(&mut r, &[4, 1, 3, 3]);
    let run = || {
        let g = Graph::new();
        let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
        let y = xv.conv2d(wv, None, ConvOptions::same(3).with_groups(4)).unwrap();
        let loss = y.gelu().unwrap().softmax(3).unwrap().mul(y).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        (loss.item(), grads.wrt(xv).unwrap(), grads.wrt(wv).unwrap())
    };
    let (l1, gx1, gw1) = run();
    let (l2, gx2, gw2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[4, 16, 16, 16]);
    let w = random_tensor(&mut r, &[32, 16, 3, 3]);
    let run = || {
        let g = Graph::new();
        let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
        let y = xv.conv2d(wv, None, ConvOptions::same(3)).unwrap();
        let loss = y.mul(y).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        (y.to_tensor(), grads.wrt(wv).unwrap())
    };
    mirage_core::parallel::set_parallel(false);
    let seq = run();
    mirage_core::parallel::set_parallel(true);
    let par = run();
    assert_eq!(seq, par);
}

proptest! {
    #[test]
    fn concat_of_split_roundtrips(
        dims in prop::collection::vec(1usize..5, 1..4),
        axis_seed in 0usize..8,
        cut_seed in 0usize..16,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &dims);
        let axis = axis_seed % dims.len();
        let n = dims[axis];
        let g = Graph::new();
        let v = g.constant(x.clone());
        let parts = if n == 1 {
            vec![v]
        } else {
            let cut = 1 + cut_seed % (n - 1);
            v.split(axis, &[cut, n - cut]).unwrap()
        };
        let back = Var::concat(&parts, axis).unwrap().to_tensor();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn permute_then_inverse_roundtrips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 3, 4, 5]);
        let g = Graph::new();
        let y = g.constant(x.clone()).permute(&[2, 0, 3, 1]).unwrap();
        prop_assert_eq!(y.shape(), vec![4, 2, 5, 3]);
        let back = y.permute(&[1, 3, 0, 2]).unwrap().to_tensor();
        prop_assert_eq!(back, x);
    }
}
