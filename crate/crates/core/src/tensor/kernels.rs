//! Raw loops shared by the tape operations and the image code.

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders `data` laid out as `shape` so that output axis `i` is input axis `axes[i]`.
pub fn permute_data<E: Copy>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    // the innermost output axis is walked as a strided run
    let inner = if rank == 0 { 1 } else { out_shape[rank - 1] };
    let inner_stride = if rank == 0 { 0 } else { src_strides[rank - 1] };
    let outer = n / inner.max(1);
    for _ in 0..outer {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        // advance the outer multi-index (all axes but the last)
        let mut ax = rank.saturating_sub(1);
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[C,H,W]` into a `[C·kh·kw, OH·OW]` column matrix.
pub(crate) fn im2col<E: Scalar>(img: &[E], g: &ConvGeom, cols: &mut [E]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] =
                            if y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w {
                                img[(c * g.h + y as usize) * g.w + x as usize]
                            } else {
                                E::zero()
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im<E: Scalar>(cols: &[E], g: &ConvGeom, img: &mut [E]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < g.w {
                            img[(c * g.h + y as usize) * g.w + x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resampling of the two trailing axes (half-pixel centers, edge clamped).
pub fn bilinear_resize<E: Scalar>(t: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let shape = t.shape();
    if shape.len() < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "bilinear_resize needs a [.., H, W] tensor and a non-empty target, got {shape:?}"
        )));
    }
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize of an empty plane"));
    }
    let planes = numel(&shape[..r - 2]);
    let src = t.data();
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v00 = plane[y0 * w + x0].to_f64().unwrap_or(0.0);
                let v01 = plane[y0 * w + x1].to_f64().unwrap_or(0.0);
                let v10 = plane[y1 * w + x0].to_f64().unwrap_or(0.0);
                let v11 = plane[y1 * w + x1].to_f64().unwrap_or(0.0);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(E::c(top + (bot - top) * fy));
            }
        }
    }
    let mut out_shape = shape[..r - 2].to_vec();
    out_shape.extend_from_slice(&[out_h, out_w]);
    Tensor::new(out_shape, out)
}
