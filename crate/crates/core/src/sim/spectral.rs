//! In-place 2D complex FFT on row-major grids, backed by rustfft.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Planned forward/inverse 2D transforms for a fixed (ny, nx) grid.
///
/// Arrays are indexed `[row, col]` with `row in 0..ny`, `col in 0..nx`.
/// The inverse transform includes the 1/(nx*ny) normalization, so
/// `inverse(forward(u)) == u` up to rounding.
pub struct Spectral2d {
    nx: usize,
    ny: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    col_buf: Vec<Complex64>,
}

impl Spectral2d {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd_row = planner.plan_fft_forward(nx);
        let inv_row = planner.plan_fft_inverse(nx);
        let fwd_col = planner.plan_fft_forward(ny);
        let inv_col = planner.plan_fft_inverse(ny);
        let scratch_len = fwd_row
            .get_inplace_scratch_len()
            .max(inv_row.get_inplace_scratch_len())
            .max(fwd_col.get_inplace_scratch_len())
            .max(inv_col.get_inplace_scratch_len());
        Spectral2d {
            nx,
            ny,
            fwd_row,
            inv_row,
            fwd_col,
            inv_col,
            scratch: vec![Complex64::default(); scratch_len],
            col_buf: vec![Complex64::default(); ny],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    fn transform(&mut self, data: &mut Array2<Complex64>, forward: bool) {
        assert_eq!(data.dim(), (self.ny, self.nx), "grid shape mismatch");
        let (row_fft, col_fft) = if forward {
            (&self.fwd_row, &self.fwd_col)
        } else {
            (&self.inv_row, &self.inv_col)
        };
        let slice = data.as_slice_mut().expect("contiguous row-major grid");
        for row in slice.chunks_exact_mut(self.nx) {
            row_fft.process_with_scratch(row, &mut self.scratch);
        }
        for col in 0..self.nx {
            for row in 0..self.ny {
                self.col_buf[row] = slice[row * self.nx + col];
            }
            col_fft.process_with_scratch(&mut self.col_buf, &mut self.scratch);
            for row in 0..self.ny {
                slice[row * self.nx + col] = self.col_buf[row];
            }
        }
        if !forward {
            let norm = 1.0 / (self.nx * self.ny) as f64;
            for v in slice.iter_mut() {
                *v *= norm;
            }
        }
    }

    pub fn forward(&mut self, data: &mut Array2<Complex64>) {
        self.transform(data, true);
    }

    pub fn inverse(&mut self, data: &mut Array2<Complex64>) {
        self.transform(data, false);
    }
}

/// Angular wavenumber for FFT bin `m` of `n` points on a periodic box of
/// length `l`: k = 2*pi*m'/l with m' in [-n/2, n/2).
pub fn wavenumber(m: usize, n: usize, l: f64) -> f64 {
    let m_signed = if m < n.div_ceil(2) {
        m as i64
    } else {
        m as i64 - n as i64
    };
    2.0 * std::f64::consts::PI * m_signed as f64 / l
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn roundtrip_identity() {
        let mut fft = Spectral2d::new(12, 8);
        let orig = Array2::from_shape_fn((8, 12), |(r, c)| {
            Complex64::new((r * 13 + c) as f64 * 0.1, (c * 7) as f64 - 3.0)
        });
        let mut data = orig.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(orig.iter()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-12);
            assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_mode_lands_in_one_bin() {
        let (nx, ny) = (16, 16);
        let l = 2.0 * std::f64::consts::PI;
        let mut fft = Spectral2d::new(nx, ny);
        // u = exp(i*3x), x_j = j*l/nx
        let mut data = Array2::from_shape_fn((ny, nx), |(_, c)| {
            let x = c as f64 * l / nx as f64;
            Complex64::from_polar(1.0, 3.0 * x)
        });
        fft.forward(&mut data);
        let peak = data[[0, 3]].norm();
        assert_abs_diff_eq!(peak, (nx * ny) as f64, epsilon = 1e-9);
        let rest: f64 = data
            .indexed_iter()
            .filter(|((r, c), _)| !(*r == 0 && *c == 3))
            .map(|(_, v)| v.norm())
            .sum();
        assert!(rest < 1e-8, "leakage {rest}");
    }

    #[test]
    fn wavenumber_convention() {
        let l = 10.0;
        assert_abs_diff_eq!(wavenumber(0, 8, l), 0.0);
        assert_abs_diff_eq!(wavenumber(1, 8, l), 2.0 * std::f64::consts::PI / l);
        assert_abs_diff_eq!(wavenumber(7, 8, l), -2.0 * std::f64::consts::PI / l);
        assert_abs_diff_eq!(wavenumber(4, 8, l), -8.0 * std::f64::consts::PI / l);
    }
}
