//! Raw buffer kernels shared by the differentiable operations.

use super::Real;
use crate::parallel::for_each_chunk;

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major. Rows of `c` are computed
/// independently, which is what makes the parallel split deterministic.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for_each_chunk(c, n, k * n, |i, row| gemm_row(&a[i * k..(i + 1) * k], b, row, n, accumulate));
}

/// Sequential variant used inside already-parallel loops.
pub(crate) fn gemm_seq<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    for i in 0..m {
        gemm_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n, accumulate);
    }
}

#[inline]
fn gemm_row<T: Real>(a_row: &[T], b: &[T], c_row: &mut [T], n: usize, accumulate: bool) {
    if !accumulate {
        c_row.iter_mut().for_each(|v| *v = T::ZERO);
    }
    for (p, &aip) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
            *cv += aip * bv;
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dst = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// Geometry of a 2-D correlation on a single image plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// True when im2col would be an identity copy.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `[channels, h, w]` into `[channels·k·k, out_h·out_w]` with zero padding.
pub(crate) fn im2col<T: Real>(x: &[T], g: ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[channels, h, w]`.
pub(crate) fn col2im<T: Real>(col: &[T], g: ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Static description of a grouped convolution over `[batch, c_in, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dSpec {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    fn geom(&self) -> ConvGeom {
        ConvGeom {
            channels: self.c_in / self.groups,
            h: self.h,
            w: self.w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let g = self.geom();
        (g.out_h(), g.out_w())
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn columns<'a, T: Real>(&self, x_g: &'a [T], scratch: &'a mut Vec<T>) -> &'a [T] {
        let g = self.geom();
        if g.is_pointwise() {
            x_g
        } else {
            let (oh, ow) = self.out_hw();
            scratch.resize(self.patch() * oh * ow, T::ZERO);
            im2col(x_g, g, scratch);
            scratch
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(s: &Conv2dSpec, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane = oh * ow;
    let (cin_g, cout_g, patch) = (s.cin_g(), s.cout_g(), s.patch());
    let mut out = vec![T::ZERO; s.batch * s.c_out * plane];
    for_each_chunk(&mut out, cout_g * plane, cout_g * patch * plane, |idx, chunk| {
        let (b, grp) = (idx / s.groups, idx % s.groups);
        let x_off = (b * s.c_in + grp * cin_g) * s.h * s.w;
        let x_g = &x[x_off..x_off + cin_g * s.h * s.w];
        let mut scratch = Vec::new();
        let col = s.columns(x_g, &mut scratch);
        let w_g = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
        gemm_seq(w_g, col, chunk, cout_g, patch, plane, false);
        if let Some(bias) = bias {
            for (co, row) in chunk.chunks_mut(plane).enumerate() {
                let bv = bias[grp * cout_g + co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(s: &Conv2dSpec, w: &[T], dy: &[T]) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane = oh * ow;
    let (cin_g, cout_g, patch) = (s.cin_g(), s.cout_g(), s.patch());
    let geom = s.geom();
    let mut dx = vec![T::ZERO; s.batch * s.c_in * s.h * s.w];
    for_each_chunk(&mut dx, cin_g * s.h * s.w, cout_g * patch * plane, |idx, chunk| {
        let (b, grp) = (idx / s.groups, idx % s.groups);
        let w_g = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
        let w_t = transpose(w_g, cout_g, patch);
        let dy_off = (b * s.c_out + grp * cout_g) * plane;
        let dy_g = &dy[dy_off..dy_off + cout_g * plane];
        if geom.is_pointwise() {
            gemm_seq(&w_t, dy_g, chunk, patch, cout_g, plane, false);
        } else {
            let mut dcol = vec![T::ZERO; patch * plane];
            gemm_seq(&w_t, dy_g, &mut dcol, patch, cout_g, plane, false);
            col2im(&dcol, geom, chunk);
        }
    });
    dx
}

pub(crate) fn conv2d_backward_weight<T: Real>(s: &Conv2dSpec, x: &[T], dy: &[T]) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane = oh * ow;
    let (cin_g, cout_g, patch) = (s.cin_g(), s.cout_g(), s.patch());
    let mut dw = vec![T::ZERO; s.c_out * patch];
    for_each_chunk(&mut dw, cout_g * patch, s.batch * cout_g * patch * plane, |grp, chunk| {
        let mut scratch = Vec::new();
        for b in 0..s.batch {
            let x_off = (b * s.c_in + grp * cin_g) * s.h * s.w;
            let col = s.columns(&x[x_off..x_off + cin_g * s.h * s.w], &mut scratch);
            let col_t = transpose(col, patch, plane);
            let dy_off = (b * s.c_out + grp * cout_g) * plane;
            gemm_seq(&dy[dy_off..dy_off + cout_g * plane], &col_t, chunk, cout_g, plane, patch, true);
        }
    });
    dw
}

pub(crate) fn conv2d_backward_bias<T: Real>(s: &Conv2dSpec, dy: &[T]) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane = oh * ow;
    let mut db = vec![T::ZERO; s.c_out];
    for b in 0..s.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let off = (b * s.c_out + co) * plane;
            *acc += dy[off..off + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Transposed convolution (the adjoint of a stride-`stride` correlation), groups = 1,
/// kernel laid out `[c_in, c_out, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvTransposeSpec {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTransposeSpec {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h - 1) * self.stride + self.k, (self.w - 1) * self.stride + self.k)
    }

    /// The correlation geometry on the output whose adjoint this operation is.
    fn out_geom(&self) -> ConvGeom {
        let (oh, ow) = self.out_hw();
        ConvGeom {
            channels: self.c_out,
            h: oh,
            w: ow,
            k: self.k,
            stride: self.stride,
            pad: 0,
        }
    }
}

pub(crate) fn conv_transpose_forward<T: Real>(s: &ConvTransposeSpec, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane_in = s.h * s.w;
    let rows = s.c_out * s.k * s.k;
    let w_t = transpose(w, s.c_in, rows);
    let mut out = vec![T::ZERO; s.batch * s.c_out * oh * ow];
    let geom = s.out_geom();
    for_each_chunk(&mut out, s.c_out * oh * ow, rows * s.c_in * plane_in, |b, chunk| {
        let mut col = vec![T::ZERO; rows * plane_in];
        gemm_seq(&w_t, &x[b * s.c_in * plane_in..(b + 1) * s.c_in * plane_in], &mut col, rows, s.c_in, plane_in, false);
        col2im(&col, geom, chunk);
        if let Some(bias) = bias {
            for (co, p) in chunk.chunks_mut(oh * ow).enumerate() {
                p.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    });
    out
}

pub(crate) fn conv_transpose_backward_input<T: Real>(s: &ConvTransposeSpec, w: &[T], dy: &[T]) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane_in = s.h * s.w;
    let rows = s.c_out * s.k * s.k;
    let geom = s.out_geom();
    let mut dx = vec![T::ZERO; s.batch * s.c_in * plane_in];
    for_each_chunk(&mut dx, s.c_in * plane_in, rows * s.c_in * plane_in, |b, chunk| {
        let mut col = vec![T::ZERO; rows * plane_in];
        im2col(&dy[b * s.c_out * oh * ow..(b + 1) * s.c_out * oh * ow], geom, &mut col);
        gemm_seq(w, &col, chunk, s.c_in, rows, plane_in, false);
    });
    dx
}

pub(crate) fn conv_transpose_backward_weight<T: Real>(s: &ConvTransposeSpec, x: &[T], dy: &[T]) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane_in = s.h * s.w;
    let rows = s.c_out * s.k * s.k;
    let geom = s.out_geom();
    let mut dw = vec![T::ZERO; s.c_in * rows];
    let mut col = vec![T::ZERO; rows * plane_in];
    for b in 0..s.batch {
        im2col(&dy[b * s.c_out * oh * ow..(b + 1) * s.c_out * oh * ow], geom, &mut col);
        let col_t = transpose(&col, rows, plane_in);
        gemm(&x[b * s.c_in * plane_in..(b + 1) * s.c_in * plane_in], &col_t, &mut dw, s.c_in, plane_in, rows, true);
    }
    dw
}

pub(crate) fn conv_transpose_backward_bias<T: Real>(s: &ConvTransposeSpec, dy: &[T]) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let plane = oh * ow;
    let mut db = vec![T::ZERO; s.c_out];
    for b in 0..s.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let off = (b * s.c_out + co) * plane;
            *acc += dy[off..off + plane].iter().copied().sum::<T>();
        }
    }
    db
}
