//! Dynamical diagnostics: spatiotemporal correlation time, mean temporal and
//! spatial periods, and the largest Lyapunov exponent (two-trajectory
//! Benettin method).

use super::{CgleSolver, Field2D, FrameSet, SimError, SimParams};
use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("correlation fit needs at least 3 usable lags, found {0}")]
    TooFewLags(usize),
    #[error("series too short: {len} samples for max_lag {max_lag}")]
    SeriesTooShort { len: usize, max_lag: usize },
}

/// Result of fitting C_st(tau) ~ a * exp(-tau / tau_c).
#[derive(Debug, Clone)]
pub struct CorrelationFit {
    /// Lag in sampling steps, 0..=max_lag.
    pub lags: Vec<usize>,
    /// C_st at each lag.
    pub values: Vec<f64>,
    /// Decay constant in sampling steps.
    pub tau_c: f64,
    /// Fitted prefactor a.
    pub amplitude: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r_squared: f64,
}

/// Spatiotemporal correlation of a complex field series.
///
/// Per grid point x the phase-coherent time correlation
/// |<u(x,t) u*(x,t+tau)>_t| / <|u(x,t)|^2>_t is computed, then averaged over
/// space; C_st(0) = 1 exactly by construction. An exponential decay is fitted
/// by least squares on log-values over lags where C_st > 0.05.
pub fn temporal_correlation(
    fields: &[Field2D],
    max_lag: usize,
) -> Result<CorrelationFit, FitError> {
    let n = fields.len();
    if n <= max_lag || n < 2 {
        return Err(FitError::SeriesTooShort {
            len: n,
            max_lag,
        });
    }
    let (ny, nx) = fields[0].data.dim();
    // Cap spatial work; the space average converges long before every
    // grid point is used.
    let stride = (((nx * ny) as f64 / 2500.0).sqrt().ceil() as usize).max(1);

    let mut points = Vec::new();
    for row in (0..ny).step_by(stride) {
        for col in (0..nx).step_by(stride) {
            points.push((row, col));
        }
    }
    // Per-point series, contiguous in time.
    let series: Vec<Vec<Complex64>> = points
        .iter()
        .map(|&(r, c)| fields.iter().map(|f| f.data[[r, c]]).collect())
        .collect();

    let mut values = Vec::with_capacity(max_lag + 1);
    let mut lags = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let mut space_sum = 0.0;
        for s in &series {
            let m = n - lag;
            let mut num = Complex64::default();
            for t in 0..m {
                num += s[t] * s[t + lag].conj();
            }
            let den: f64 = s.iter().map(|u| u.norm_sqr()).sum::<f64>() / n as f64;
            space_sum += (num / m as f64).norm() / den;
        }
        values.push(space_sum / series.len() as f64);
        lags.push(lag);
    }

    let usable: Vec<(f64, f64)> = lags
        .iter()
        .zip(&values)
        .filter(|(_, &c)| c > 0.05)
        .map(|(&l, &c)| (l as f64, c.ln()))
        .collect();
    if usable.len() < 3 {
        return Err(FitError::TooFewLags(usable.len()));
    }
    let (slope, intercept, r_squared) = linear_fit(&usable);
    Ok(CorrelationFit {
        lags,
        values,
        tau_c: -1.0 / slope,
        amplitude: intercept.exp(),
        r_squared,
    })
}

/// Ordinary least squares y = slope*x + intercept; returns (slope, intercept, R^2).
fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r_squared)
}

/// Power-weighted mean temporal and spatial periods of a complex field
/// series: 2*pi over the power-weighted mean |omega| of per-point time
/// spectra, and 2*pi over the power-weighted mean radial wavenumber of the
/// spatial power spectrum.
pub fn mean_periods(frames: &FrameSet, fields: &[Field2D], side_length: f64) -> (f64, f64) {
    assert!(fields.len() >= 8, "need at least 8 sampled fields");
    let n_t = fields.len();
    let (ny, nx) = fields[0].data.dim();
    let sample_dt = frames.sample_dt;

    // Temporal: accumulate |u_hat(omega)|^2 over a spatial subset.
    let stride = (((nx * ny) as f64 / 64.0).sqrt().ceil() as usize).max(1);
    let fft_t = FftPlanner::new().plan_fft_forward(n_t);
    let mut power_t = vec![0.0f64; n_t];
    let mut buf = vec![Complex64::default(); n_t];
    for row in (0..ny).step_by(stride) {
        for col in (0..nx).step_by(stride) {
            for (t, f) in fields.iter().enumerate() {
                buf[t] = f.data[[row, col]];
            }
            fft_t.process(&mut buf);
            for (m, v) in buf.iter().enumerate() {
                power_t[m] += v.norm_sqr();
            }
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, &p) in power_t.iter().enumerate() {
        let omega = super::wavenumber(m, n_t, n_t as f64 * sample_dt).abs();
        num += omega * p;
        den += p;
    }
    let temporal_period = 2.0 * std::f64::consts::PI / (num / den);

    // Spatial: average the 2D power spectrum over a subset of the series.
    let t_stride = (n_t / 32).max(1);
    let mut fft2 = super::Spectral2d::new(nx, ny);
    let mut power_s: Array2<f64> = Array2::zeros((ny, nx));
    for f in fields.iter().step_by(t_stride) {
        let mut u = f.data.clone();
        fft2.forward(&mut u);
        power_s.zip_mut_with(&u, |p, v| *p += v.norm_sqr());
    }
    let mut num_k = 0.0;
    let mut den_k = 0.0;
    for row in 0..ny {
        let ky = super::wavenumber(row, ny, side_length);
        for col in 0..nx {
            let kx = super::wavenumber(col, nx, side_length);
            let k = (kx * kx + ky * ky).sqrt();
            let p = power_s[[row, col]];
            num_k += k * p;
            den_k += p;
        }
    }
    let spatial_period = 2.0 * std::f64::consts::PI / (num_k / den_k);
    (temporal_period, spatial_period)
}

/// 2-norm of the difference between two complex fields.
fn field_distance(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Largest Lyapunov exponent via the two-trajectory Benettin method with
/// the default perturbation norm 1e-8.
pub fn lyapunov_max(
    params: &SimParams,
    renorm_interval: usize,
    n_renorms: usize,
) -> Result<f64, SimError> {
    lyapunov_max_with_delta(params, renorm_interval, n_renorms, 1e-8)
}

/// Benettin estimate with a caller-chosen initial perturbation 2-norm.
pub fn lyapunov_max_with_delta(
    params: &SimParams,
    renorm_interval: usize,
    n_renorms: usize,
    delta0: f64,
) -> Result<f64, SimError> {
    if renorm_interval == 0 || n_renorms == 0 {
        return Err(SimError::InvalidParams(
            "renorm_interval and n_renorms must be positive".to_string(),
        ));
    }
    let mut solver = CgleSolver::new(params)?;
    let mut reference = super::init_field(params)?;
    let warmup_steps = (params.warmup_time / params.dt).round() as usize;
    solver.advance(&mut reference, warmup_steps)?;

    // Deterministic random perturbation direction, scaled to delta0.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(0x9e3779b9));
    let normal = StandardNormal;
    let mut direction: Array2<Complex64> =
        Array2::from_shape_fn(reference.data.dim(), |_| {
            let re: f64 = normal.sample(&mut rng);
            let im: f64 = normal.sample(&mut rng);
            Complex64::new(re, im)
        });
    let norm = field_distance(&direction, &Array2::default(direction.dim()));
    direction.mapv_inplace(|v| v * (delta0 / norm));

    let mut perturbed = Field2D {
        data: &reference.data + &direction,
        t: reference.t,
    };

    let mut log_sum = 0.0;
    for _ in 0..n_renorms {
        solver.advance(&mut reference, renorm_interval)?;
        solver.advance(&mut perturbed, renorm_interval)?;
        let d = field_distance(&perturbed.data, &reference.data);
        if d == 0.0 {
            return Err(SimError::InvalidParams(
                "trajectories collapsed; perturbation too small".to_string(),
            ));
        }
        log_sum += (d / delta0).ln();
        let scale = delta0 / d;
        perturbed.data = &reference.data + &(&perturbed.data - &reference.data) * scale;
    }
    let total_time = (n_renorms * renorm_interval) as f64 * params.dt;
    Ok(log_sum / total_time)
}
