use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor, Var};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (of `shape`) into the order given by `axes`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Reflect index into `0..n` (edge sample not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl<'g, T: Real> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape())));
        }
        let value = (*self.value()).clone().reshape(shape.to_vec())?;
        self.graph().record("reshape", value, &[self], |a| vec![Some(a.grad.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{axes:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(self.value().data(), &shape, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        self.graph().record("permute", Tensor::new(out_shape, out)?, &[self], move |a| {
            vec![Some(permute_data(a.grad, &grad_shape, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::shape("transpose_last", "rank below 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("range {start}+{len} on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let total = x.len();
        self.graph().record("narrow", Tensor::new(out_shape, out)?, &[self], move |a| {
            let mut dx = vec![T::ZERO; total];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&a.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let shape = self.shape();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", format!("sizes {sizes:?} do not cover axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.narrow(axis, start, len);
                start += len;
                part
            })
            .collect()
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let shape = first.shape();
        if axis >= shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != shape.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != shape[d]) {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {shape:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total_w: usize = widths.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total_w * inner);
        for o in 0..outer {
            for (v, &wd) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * wd * inner..(o + 1) * wd * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = total_w;
        first.graph().record("concat", Tensor::new(out_shape, out)?, parts, move |a| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(outer * wd * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (g, &wd) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&a.grad[offset..offset + wd * inner]);
                    offset += wd * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Reflect-pads the last two axes by `bottom` rows and `right` columns.
    pub fn pad_reflect(self, bottom: usize, right: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let rank = shape.len();
        if rank < 2 {
            return Err(Error::shape("pad_reflect", "rank below 2"));
        }
        let (h, w) = (shape[rank - 2], shape[rank - 1]);
        if bottom >= h || right >= w {
            return Err(Error::shape("pad_reflect", format!("padding ({bottom},{right}) too large for {h}x{w}")));
        }
        let (oh, ow) = (h + bottom, w + right);
        let planes = self.len() / (h * w);
        let src_index: Vec<usize> = (0..oh * ow)
            .map(|i| reflect((i / ow) as isize, h) * w + reflect((i % ow) as isize, w))
            .collect();
        let x = self.value();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            out.extend(src_index.iter().map(|&s| plane[s]));
        }
        let mut out_shape = shape.clone();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        self.graph().record("pad_reflect", Tensor::new(out_shape, out)?, &[self], move |a| {
            let mut dx = vec![T::ZERO; planes * h * w];
            for p in 0..planes {
                for (i, &s) in src_index.iter().enumerate() {
                    dx[p * h * w + s] += a.grad[p * oh * ow + i];
                }
            }
            vec![Some(dx)]
        })
    }
}
