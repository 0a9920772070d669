//! im2col / col2im lowering shared by the convolution ops.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Geometry of a 2D cross-correlation from an `in_h×in_w` map to an
/// `out_h×out_w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

fn conv_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    /// Geometry of a forward convolution; fails unless the output extent is
    /// a positive integer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (out_h, out_w) = match (
            conv_extent(in_h, kh, stride, pad),
            conv_extent(in_w, kw, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d: input {in_h}x{in_w} with kernel {kh}x{kw}, stride {stride}, \
                     padding {pad} has no integral output extent"
                )))
            }
        };
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad,
        })
    }

    /// Geometry of the convolution whose adjoint maps a `h×w` map with
    /// `t_in_c` channels to the transposed-convolution output.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed(
        t_in_c: usize,
        h: usize,
        w: usize,
        t_out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let extent = |n: usize, k: usize| -> Option<usize> {
            if n == 0 || stride == 0 {
                return None;
            }
            ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&e| e > 0)
        };
        let (oh, ow) = match (extent(h, kh), extent(w, kw)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(
                    "conv_transpose2d",
                    &[t_in_c, h, w],
                    &[t_in_c, t_out_c, kh, kw],
                ))
            }
        };
        let g = Self::forward(t_out_c, oh, ow, t_in_c, kh, kw, stride, pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

/// Unfolds one image `[in_c, in_h, in_w]` into `[in_c·kh·kw, out_h·out_w]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        let g = ConvGeom::forward(3, 64, 64, 16, 3, 3, 2, 1);
        assert!(g.is_err(), "65/2 is not integral");
        let g = ConvGeom::forward(3, 63, 63, 16, 3, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (32, 32));
        let t = ConvGeom::transposed(8, 4, 4, 2, 4, 4, 2, 1).unwrap();
        assert_eq!((t.in_h, t.in_w, t.out_h, t.out_w), (8, 8, 4, 4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::forward(2, 5, 4, 1, 3, 2, 1, 1).unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cx = vec![0.0; y.len()];
        im2col(&g, &x, &mut cx);
        let mut ty = vec![0.0; x.len()];
        col2im(&g, &y, &mut ty);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
