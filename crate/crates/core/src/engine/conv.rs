//! im2col/col2im lowering of 2-D convolutions onto GEMM.
//!
//! Column buffers are laid out `[channels * k * k, grid_h * grid_w]`; grid cell
//! `(gy, gx)` with kernel tap `(ky, kx)` touches image pixel
//! `(gy * stride + ky - pad, gx * stride + kx - pad)`. The same mapping serves
//! the forward convolution (grid = output) and the transposed convolution
//! (grid = input, image = output).

use crate::tensor::Float;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Range of grid columns `gx` whose tap `kx` lands inside the image, for stride 1.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.grid_w);
        let hi = (self.img_w + self.pad).saturating_sub(kx).min(self.grid_w);
        (lo, hi.max(lo))
    }

    fn src_row(&self, gy: usize, ky: usize) -> Option<usize> {
        let iy = (gy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.img_h).then_some(iy as usize)
    }
}

pub(crate) fn im2col<F: Float>(img: &[F], g: &Geometry, cols: &mut [F]) {
    let cells = g.cells();
    debug_assert_eq!(img.len(), g.channels * g.img_h * g.img_w);
    debug_assert_eq!(cols.len(), g.rows() * cells);
    for ch in 0..g.channels {
        let plane = &img[ch * g.img_h * g.img_w..(ch + 1) * g.img_h * g.img_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ch * g.k + ky) * g.k + kx) * cells;
                for gy in 0..g.grid_h {
                    let dst = &mut cols[row + gy * g.grid_w..row + (gy + 1) * g.grid_w];
                    let Some(iy) = g.src_row(gy, ky) else {
                        dst.fill(F::zero());
                        continue;
                    };
                    let src = &plane[iy * g.img_w..(iy + 1) * g.img_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kx);
                        dst[..lo].fill(F::zero());
                        dst[hi..].fill(F::zero());
                        if hi > lo {
                            let off = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                    } else {
                        for (gx, d) in dst.iter_mut().enumerate() {
                            let ix = (gx * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && (ix as usize) < g.img_w {
                                src[ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into `img` (which is not cleared).
pub(crate) fn col2im<F: Float>(cols: &[F], g: &Geometry, img: &mut [F]) {
    let cells = g.cells();
    debug_assert_eq!(img.len(), g.channels * g.img_h * g.img_w);
    debug_assert_eq!(cols.len(), g.rows() * cells);
    for ch in 0..g.channels {
        let plane = &mut img[ch * g.img_h * g.img_w..(ch + 1) * g.img_h * g.img_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ch * g.k + ky) * g.k + kx) * cells;
                for gy in 0..g.grid_h {
                    let Some(iy) = g.src_row(gy, ky) else {
                        continue;
                    };
                    let src = &cols[row + gy * g.grid_w..row + (gy + 1) * g.grid_w];
                    let dst = &mut plane[iy * g.img_w..(iy + 1) * g.img_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kx);
                        if hi > lo {
                            let off = lo + kx - g.pad;
                            for (d, &s) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (gx, &s) in src.iter().enumerate() {
                            let ix = (gx * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.img_w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1 "same" convolution over an `h x w` image.
pub(crate) fn same_geometry(channels: usize, h: usize, w: usize, k: usize) -> Geometry {
    let pad = k / 2;
    Geometry {
        channels,
        img_h: h,
        img_w: w,
        k,
        stride: 1,
        pad,
        grid_h: h + 2 * pad + 1 - k,
        grid_w: w + 2 * pad + 1 - k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(img: &[f64], g: &Geometry) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * g.cells()];
        for ch in 0..g.channels {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    for gy in 0..g.grid_h {
                        for gx in 0..g.grid_w {
                            let iy = (gy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (gx * g.stride + kx) as isize - g.pad as isize;
                            let v = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < g.img_h
                                && (ix as usize) < g.img_w
                            {
                                img[(ch * g.img_h + iy as usize) * g.img_w + ix as usize]
                            } else {
                                0.0
                            };
                            out[((ch * g.k + ky) * g.k + kx) * g.cells() + gy * g.grid_w + gx] = v;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_for_stride_one_and_two() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 5, 4), (9, 1, 4, 6, 6), (3, 2, 1, 7, 6), (1, 1, 0, 3, 3)] {
            let grid_h = (h + 2 * pad - k) / stride + 1;
            let grid_w = (w + 2 * pad - k) / stride + 1;
            let g = Geometry { channels: 2, img_h: h, img_w: w, k, stride, pad, grid_h, grid_w };
            let img: Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.rows() * g.cells()];
            im2col(&img, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&img, &g), "k={k} stride={stride}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geometry { channels: 3, img_h: 6, img_w: 5, k: 3, stride: 2, pad: 1, grid_h: 3, grid_w: 3 };
        let x: Vec<f64> = (0..90).map(|v| ((v * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.cells()).map(|v| ((v * 13) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
