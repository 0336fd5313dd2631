use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Conv2dSpec, ConvTransposeSpec};
use crate::tensor::{Real, Tensor, Var};

/// Stride, zero padding and group count of a 2-D correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvOptions {
    /// Stride 1 with `floor(k/2)` padding, so spatial extents are preserved.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Var<'_, T>>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c_out] => Err(Error::shape(op, format!("bias {:?} for {c_out} output channels", b.shape()))),
        _ => Ok(()),
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Grouped 2-D cross-correlation (no kernel flip) of `[B, C_in, H, W]` with a
    /// `[C_out, C_in/groups, k, k]` kernel and zero padding.
    pub fn conv2d(self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>, opts: ConvOptions) -> Result<Var<'g, T>> {
        const OP: &str = "conv2d";
        let (xs, ks) = (self.shape(), kernel.shape());
        let [batch, c_in, h, w] = xs[..] else {
            return Err(Error::shape(OP, format!("input must be [B,C,H,W], got {xs:?}")));
        };
        let [c_out, cin_g, k, k2] = ks[..] else {
            return Err(Error::shape(OP, format!("kernel must be [C_out,C_in/g,k,k], got {ks:?}")));
        };
        let groups = opts.groups;
        if k != k2 {
            return Err(Error::shape(OP, format!("kernel must be square, got {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel size must be odd, got {k}")));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(OP, format!("channels {c_in}->{c_out} not divisible by groups {groups}")));
        }
        if cin_g != c_in / groups {
            return Err(Error::shape(OP, format!("kernel expects {cin_g} input channels per group, input has {}", c_in / groups)));
        }
        if opts.stride == 0 || h + 2 * opts.padding < k || w + 2 * opts.padding < k {
            return Err(Error::shape(OP, format!("kernel {k} with padding {} does not fit {h}x{w}", opts.padding)));
        }
        check_bias(OP, bias.as_ref(), c_out)?;
        let spec = Conv2dSpec {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            stride: opts.stride,
            pad: opts.padding,
            groups,
        };
        let (oh, ow) = spec.out_hw();
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(
            &spec,
            self.value().data(),
            kernel.value().data(),
            bias_val.as_ref().map(|b| b.data()),
        );
        let value = Tensor::new(vec![batch, c_out, oh, ow], out)?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph().record(OP, value, &parents, move |a| {
            let (x, wt) = (a.input(0).data(), a.input(1).data());
            let mut grads = vec![
                Some(kernels::conv2d_backward_input(&spec, wt, a.grad)),
                Some(kernels::conv2d_backward_weight(&spec, x, a.grad)),
            ];
            if has_bias {
                grads.push(Some(kernels::conv2d_backward_bias(&spec, a.grad)));
            }
            grads
        })
    }

    /// Transposed convolution (fractionally strided, the adjoint of a stride-`stride`
    /// correlation) with a `[C_in, C_out, k, k]` kernel and no padding.
    pub fn conv_transpose2d(self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize) -> Result<Var<'g, T>> {
        const OP: &str = "conv_transpose2d";
        let (xs, ks) = (self.shape(), kernel.shape());
        let [batch, c_in, h, w] = xs[..] else {
            return Err(Error::shape(OP, format!("input must be [B,C,H,W], got {xs:?}")));
        };
        let [kc_in, c_out, k, k2] = ks[..] else {
            return Err(Error::shape(OP, format!("kernel must be [C_in,C_out,k,k], got {ks:?}")));
        };
        if kc_in != c_in || k != k2 || stride == 0 {
            return Err(Error::shape(OP, format!("kernel {ks:?} incompatible with input {xs:?} (stride {stride})")));
        }
        check_bias(OP, bias.as_ref(), c_out)?;
        let spec = ConvTransposeSpec {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
        };
        let (oh, ow) = spec.out_hw();
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv_transpose_forward(
            &spec,
            self.value().data(),
            kernel.value().data(),
            bias_val.as_ref().map(|b| b.data()),
        );
        let value = Tensor::new(vec![batch, c_out, oh, ow], out)?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph().record(OP, value, &parents, move |a| {
            let (x, wt) = (a.input(0).data(), a.input(1).data());
            let mut grads = vec![
                Some(kernels::conv_transpose_backward_input(&spec, wt, a.grad)),
                Some(kernels::conv_transpose_backward_weight(&spec, x, a.grad)),
            ];
            if has_bias {
                grads.push(Some(kernels::conv_transpose_backward_bias(&spec, a.grad)));
            }
            grads
        })
    }
}
