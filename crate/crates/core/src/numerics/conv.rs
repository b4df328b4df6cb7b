//! im2col-based 2-D convolution kernels shared by the graph primitives.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input index for output index `o` at kernel offset `kk`, if inside
    /// the unpadded extent `limit`.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output columns `lo..hi` whose input column at kernel offset `kx`
    /// lies inside the image; input column of `lo` is `first`.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(s) } else { 0 };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / s + 1).min(self.w_out)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo, hi, (lo * s + kx).saturating_sub(self.pad))
    }
}

/// Unfolds one `c_in×h×w` image into a `(c_in·k·k) × (h_out·w_out)` matrix.
/// Every entry of `col` is written.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi, first) = g.valid_cols(kx);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into the image.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi, first) = g.valid_cols(kx);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let line = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    let dst_row = &mut plane[iy * g.w + first..(iy + 1) * g.w];
                    for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
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
    fn geometry_of_strided_conv() {
        let g = ConvGeometry::new(3, 32, 32, 3, 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (16, 16));
        let g = ConvGeometry::new(1, 3, 3, 3, 1, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (3, 3));
        assert!(ConvGeometry::new(1, 2, 2, 5, 1, 0).is_none());
    }

    /// Direct per-entry unfold.
    fn reference_im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut col = Vec::with_capacity(g.col_rows() * g.col_cols());
        for c in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    for oy in 0..g.h_out {
                        for ox in 0..g.w_out {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                            col.push(if inside {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        col
    }

    #[test]
    fn unfold_matches_reference_over_geometries() {
        for (h, w) in [(5, 4), (7, 7), (8, 6), (1, 3)] {
            for k in [1, 3, 5] {
                for stride in 1..=3 {
                    for pad in 0..=2 {
                        let Some(g) = ConvGeometry::new(2, h, w, k, stride, pad) else {
                            continue;
                        };
                        let x: Vec<f64> = (0..2 * h * w).map(|v| (v as f64 * 0.71).sin()).collect();
                        let mut col = vec![f64::NAN; g.col_rows() * g.col_cols()];
                        im2col(&x, &g, &mut col);
                        assert_eq!(col, reference_im2col(&x, &g), "{h}x{w} k{k} s{stride} p{pad}");
                        let c: Vec<f64> = (0..col.len()).map(|v| (v as f64 * 0.13).cos()).collect();
                        let mut back = vec![0.0; x.len()];
                        col2im(&c, &g, &mut back);
                        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
                        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
                        assert!((lhs - rhs).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| (v as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
