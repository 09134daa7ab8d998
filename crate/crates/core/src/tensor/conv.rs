//! im2col / col2im kernels for 2-D convolution on a single `C×H×W` sample.
//!
//! Column layout: row `(c·k + ky)·k + kx`, column `oy·W_out + ox`, which makes the
//! weight tensor `C_out×C_in×k×k` a plain `C_out×K` matrix.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
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

    /// Stride 1 with output size equal to input size.
    pub fn same_size(&self) -> bool {
        self.stride == 1 && self.h_out == self.h && self.w_out == self.w
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox·stride + kx − pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Destination range `d0..d1` of `0..n` whose source `j + shift` is in `0..n`.
fn shifted_range(shift: isize, n: usize) -> (usize, usize) {
    let d0 = (-shift).clamp(0, n as isize) as usize;
    let d1 = (n as isize - shift).clamp(0, n as isize) as usize;
    (d0.min(d1), d1)
}

/// Padding strips are at most `pad` wide; a loop beats a `memset` call here.
#[inline(always)]
fn zero_small<T: Real>(xs: &mut [T]) {
    for x in xs {
        *x = T::zero();
    }
}

/// Writes the columns of one sample; row `r` of the column matrix starts at
/// `cols[r * ld]`, so several samples can share one matrix side by side.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize) {
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ld..row * ld + n_out];
                let (lo, hi) = g.valid_cols(kx);
                if g.same_size() {
                    // The tap is the input plane shifted by one offset; copy it whole,
                    // then clear the columns that wrapped across rows.
                    let shift = (ky as isize - g.pad as isize) * g.w as isize + kx as isize - g.pad as isize;
                    let (d0, d1) = shifted_range(shift, n_out);
                    zero_small(&mut dst[..d0]);
                    zero_small(&mut dst[d1..]);
                    if d0 < d1 {
                        let s0 = (d0 as isize + shift) as usize;
                        dst[d0..d1].copy_from_slice(&plane[s0..s0 + d1 - d0]);
                    }
                    for r in dst.chunks_exact_mut(g.w) {
                        zero_small(&mut r[..lo]);
                        zero_small(&mut r[hi..]);
                    }
                    continue;
                }
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    zero_small(&mut dst_row[..lo]);
                    zero_small(&mut dst_row[hi..]);
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, s) in dst_row[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`. Entries of `cols`
/// that fall into the padding are overwritten with zeros.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &mut [T], ld: usize, dx: &mut [T]) {
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                if g.same_size() {
                    // Clear the columns that would wrap across rows, then add the
                    // whole tap as one shifted plane.
                    let src = &mut cols[row * ld..row * ld + n_out];
                    for r in src.chunks_exact_mut(g.w) {
                        zero_small(&mut r[..lo]);
                        zero_small(&mut r[hi..]);
                    }
                    let shift = (ky as isize - g.pad as isize) * g.w as isize + kx as isize - g.pad as isize;
                    let (d0, d1) = shifted_range(shift, n_out);
                    if d0 == d1 {
                        continue;
                    }
                    let t = (d0 as isize + shift) as usize;
                    for (d, &v) in plane[t..t + d1 - d0].iter_mut().zip(&src[d0..d1]) {
                        *d += v;
                    }
                    continue;
                }
                let src = &cols[row * ld..row * ld + n_out];
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
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
    fn output_geometry() {
        let g = ConvGeom::new(3, 32, 32, 3, 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (16, 16));
        let g = ConvGeom::new(1, 3, 3, 3, 1, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (3, 3));
        assert!(ConvGeom::new(1, 1, 1, 3, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        for &(h, w, stride, pad) in &[(5, 4, 2, 1), (6, 7, 1, 1), (4, 4, 1, 0), (3, 3, 1, 1), (1, 1, 1, 1)] {
            let g = ConvGeom::new(2, h, w, 3, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
                .map(|i| ((i * 5) % 13) as f64 - 6.0)
                .collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&g, &x, &mut cols, g.col_cols());
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im(&g, &mut y.clone(), g.col_cols(), &mut dx);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs, "{h}x{w} stride {stride} pad {pad}");
        }
    }

    fn naive_im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.col_rows() * g.col_cols()];
        for c in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    for oy in 0..g.h_out {
                        for ox in 0..g.w_out {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                let row = (c * g.k + ky) * g.k + kx;
                                out[row * g.col_cols() + oy * g.w_out + ox] =
                                    x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_gather_with_row_stride() {
        for &(h, w, k, stride, pad) in &[(5, 4, 3, 2, 1), (6, 7, 3, 1, 1), (4, 4, 3, 1, 0), (7, 5, 3, 2, 0), (2, 2, 3, 1, 1), (1, 1, 3, 1, 1), (8, 8, 3, 1, 1)] {
            let g = ConvGeom::new(2, h, w, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let want = naive_im2col(&g, &x);
            let ld = g.col_cols() * 2 + 1;
            let mut cols = vec![-1.0; g.col_rows() * ld];
            im2col(&g, &x, &mut cols[g.col_cols()..], ld);
            for r in 0..g.col_rows() {
                assert_eq!(&cols[r * ld + g.col_cols()..][..g.col_cols()], &want[r * g.col_cols()..][..g.col_cols()]);
            }
        }
    }
}
