//! im2col / col2im kernels for `[C, B, H, W]` tensors.

use crate::Float;
use ndarray::{ArrayD, IxDyn};

/// Geometry of a strided, zero-padded 2D correlation.
///
/// `in_*` is the spatial size of the image side and `out_*` the size of the
/// column side. For a transposed convolution the roles are swapped: the
/// image side is the transposed-conv *output*.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an image of `in_h x in_w`.
    pub fn forward(channels: usize, batch: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel, "kernel larger than padded input");
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Self { channels, batch, in_h, in_w, kernel, stride, pad, out_h, out_w }
    }

    /// Geometry of a transposed convolution mapping `h x w` up to
    /// `(h - 1) * stride - 2 * pad + kernel`.
    pub fn transposed(channels: usize, batch: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let in_h = (h - 1) * stride + kernel - 2 * pad;
        let in_w = (w - 1) * stride + kernel - 2 * pad;
        let g = Self::forward(channels, batch, in_h, in_w, kernel, stride, pad);
        assert_eq!((g.out_h, g.out_w), (h, w), "transposed geometry does not invert");
        g
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.channels, self.batch, self.in_h, self.in_w]
    }

    pub fn cols_shape(&self) -> [usize; 2] {
        [self.channels * self.kernel * self.kernel, self.batch * self.out_h * self.out_w]
    }

    /// Valid output-column range for kernel offset `kj` along an axis of
    /// length `len` with `n_out` outputs.
    #[inline]
    fn valid_range(&self, koff: usize, len: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = koff as isize;
        // first o with o*s + k - p >= 0
        let lo = if p - k <= 0 { 0 } else { ((p - k) + s - 1) / s };
        // last o with o*s + k - p <= len - 1
        let hi_num = len as isize - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(n_out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// `[C, B, H, W]` image to `[C*k*k, B*Ho*Wo]` columns.
pub fn unfold<F: Float>(x: &ArrayD<F>, g: &ConvGeom) -> ArrayD<F> {
    assert_eq!(x.shape(), &g.image_shape()[..], "unfold: image shape mismatch");
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let [rows, ncol] = g.cols_shape();
    let mut cols = vec![F::zero(); rows * ncol];
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let plane = g.in_h * g.in_w;
    for c in 0..g.channels {
        for ki in 0..k {
            let (oi_lo, oi_hi) = g.valid_range(ki, g.in_h, g.out_h);
            for kj in 0..k {
                let (oj_lo, oj_hi) = g.valid_range(kj, g.in_w, g.out_w);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let src = &xs[(c * g.batch + b) * plane..(c * g.batch + b + 1) * plane];
                    for oi in oi_lo..oi_hi {
                        let ii = oi * s + ki - p;
                        let srow = &src[ii * g.in_w..(ii + 1) * g.in_w];
                        let drow = &mut dst[(b * g.out_h + oi) * g.out_w..(b * g.out_h + oi + 1) * g.out_w];
                        if s == 1 {
                            let j0 = oj_lo + kj - p;
                            drow[oj_lo..oj_hi].copy_from_slice(&srow[j0..j0 + (oj_hi - oj_lo)]);
                        } else {
                            for oj in oj_lo..oj_hi {
                                drow[oj] = srow[oj * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[rows, ncol]), cols).expect("unfold shape")
}

/// Adjoint of [`unfold`]: scatter-add columns back onto a `[C, B, H, W]` image.
pub fn fold<F: Float>(cols: &ArrayD<F>, g: &ConvGeom) -> ArrayD<F> {
    assert_eq!(cols.shape(), &g.cols_shape()[..], "fold: column shape mismatch");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let ncol = g.cols_shape()[1];
    let plane = g.in_h * g.in_w;
    let mut out = vec![F::zero(); g.channels * g.batch * plane];
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    for c in 0..g.channels {
        for ki in 0..k {
            let (oi_lo, oi_hi) = g.valid_range(ki, g.in_h, g.out_h);
            for kj in 0..k {
                let (oj_lo, oj_hi) = g.valid_range(kj, g.in_w, g.out_w);
                let row = (c * k + ki) * k + kj;
                let src = &cs[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let dst = &mut out[(c * g.batch + b) * plane..(c * g.batch + b + 1) * plane];
                    for oi in oi_lo..oi_hi {
                        let ii = oi * s + ki - p;
                        let drow = &mut dst[ii * g.in_w..(ii + 1) * g.in_w];
                        let srow = &src[(b * g.out_h + oi) * g.out_w..(b * g.out_h + oi + 1) * g.out_w];
                        for oj in oj_lo..oj_hi {
                            drow[oj * s + kj - p] += srow[oj];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&g.image_shape()), out).expect("fold shape")
}
