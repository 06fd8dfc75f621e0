//! Pseudospectral exponential-time-differencing integration of the 2D
//! complex Ginzburg-Landau equation on a periodic square domain.
//!
//! The evolved field is u(x,y,t) with per-Fourier-mode linear operator
//! L_k = eps + sign_lap*(mu + i*beta)*(-k^2) applied exactly, and the cubic
//! nonlinearity N(u) = sign_nl*(gamma + i*alpha)*|u|^2*u handled by a
//! second-order ETD Runge-Kutta correction (Cox-Matthews ETD2RK).

mod diagnostics;
mod spectral;

pub use diagnostics::{
    lyapunov_max, lyapunov_max_with_delta, mean_periods, temporal_correlation, CorrelationFit,
    FitError,
};
pub use spectral::{wavenumber, Spectral2d};

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Amplitude ceiling past which the integration is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("field diverged at t = {t}: max|u| = {max_abs}")]
    Divergence { t: f64, max_abs: f64 },
}

/// Parameters of the CGLE integration.
///
/// Defaults follow the chaotic bursting regime: eps = gamma = mu = 1,
/// alpha = -30, beta = 30 on a (10*pi)^2 box with a 100x100 grid.
/// `sign_nl = -1` and `sign_lap = +1` select the saturating nonlinearity
/// and diffusive Laplacian; flipping them recovers the literal
/// non-saturating form for experimentation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub eps: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub beta: f64,
    pub sign_nl: f64,
    pub sign_lap: f64,
    pub side_length: f64,
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub sample_dt: f64,
    pub seed: u64,
    pub warmup_time: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            eps: 1.0,
            gamma: 1.0,
            alpha: -30.0,
            mu: 1.0,
            beta: 30.0,
            sign_nl: -1.0,
            sign_lap: 1.0,
            side_length: 10.0 * std::f64::consts::PI,
            nx: 100,
            ny: 100,
            dt: 1e-4,
            sample_dt: 0.01,
            seed: 0,
            warmup_time: 10.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: &str| Err(SimError::InvalidParams(msg.to_string()));
        if self.nx < 8 || self.ny < 8 {
            return fail("nx and ny must be >= 8");
        }
        if self.nx % 2 != 0 || self.ny % 2 != 0 {
            return fail("nx and ny must be even");
        }
        if !(self.dt > 0.0) {
            return fail("dt must be > 0");
        }
        if !(self.side_length > 0.0) {
            return fail("side_length must be > 0");
        }
        if self.sign_nl.abs() != 1.0 || self.sign_lap.abs() != 1.0 {
            return fail("sign_nl and sign_lap must be +1 or -1");
        }
        let ratio = self.sample_dt / self.dt;
        if !(self.sample_dt > 0.0) || (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            return fail("sample_dt must be a positive integer multiple of dt");
        }
        if self.warmup_time < 0.0 {
            return fail("warmup_time must be >= 0");
        }
        Ok(())
    }

    pub fn steps_per_sample(&self) -> usize {
        (self.sample_dt / self.dt).round() as usize
    }
}

/// Complex field state u(x,y,t) on the periodic grid, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub data: Array2<Complex64>,
    pub t: f64,
}

impl Field2D {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    pub fn magnitude_frame(&self) -> Array2<f32> {
        self.data.mapv(|u| u.norm() as f32)
    }

    fn check_finite(&self) -> Result<(), SimError> {
        // NaN-propagating fold: f64::max would silently skip NaN entries,
        // letting a blown-up (all-NaN) field pass as max_abs = 0.
        let max_abs = self
            .data
            .iter()
            .map(|v| v.norm())
            .fold(0.0f64, |acc, v| if v.is_nan() { f64::NAN } else { acc.max(v) });
        if !max_abs.is_finite() || max_abs > DIVERGENCE_LIMIT {
            return Err(SimError::Divergence { t: self.t, max_abs });
        }
        Ok(())
    }
}

/// Ordered sequence of non-negative scalar frames (|u| or wind speed) with
/// timestep metadata; the dataset currency shared by the whole pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub frames: Vec<Array2<f32>>,
    pub sample_dt: f64,
    pub t0: f64,
    pub source_tag: String,
}

impl FrameSet {
    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    /// Spatial maximum of each frame, in frame order.
    pub fn frame_maxima(&self) -> Vec<f32> {
        self.frames
            .iter()
            .map(|f| f.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect()
    }
}

/// Draws the initial condition: complex Gaussian noise with per-component
/// standard deviation 0.1, deterministic for a fixed seed.
pub fn init_field(params: &SimParams) -> Result<Field2D, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = StandardNormal;
    let data = Array2::from_shape_fn((params.ny, params.nx), |_| {
        let re: f64 = normal.sample(&mut rng);
        let im: f64 = normal.sample(&mut rng);
        Complex64::new(0.1 * re, 0.1 * im)
    });
    Ok(Field2D { data, t: 0.0 })
}

/// phi1(z) = (e^z - 1)/z with a Taylor fallback near zero.
fn phi1(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// phi2(z) = (e^z - 1 - z)/z^2 with a Taylor fallback near zero.
fn phi2(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        Complex64::new(0.5, 0.0) + z / 6.0 + z * z / 24.0 + z * z * z / 120.0
    } else {
        (z.exp() - 1.0 - z) / (z * z)
    }
}

/// Precomputed per-mode ETD2RK coefficients plus FFT plans for one
/// parameter set. One step costs four 2D transforms.
pub struct CgleSolver {
    params: SimParams,
    fft: Spectral2d,
    exp_l: Array2<Complex64>,
    phi1_dt: Array2<Complex64>,
    phi2_dt: Array2<Complex64>,
    c_nl: Complex64,
}

impl CgleSolver {
    pub fn new(params: &SimParams) -> Result<Self, SimError> {
        params.validate()?;
        let (nx, ny, l, dt) = (params.nx, params.ny, params.side_length, params.dt);
        let lap_coeff = params.sign_lap * Complex64::new(params.mu, params.beta);
        let mut exp_l = Array2::default((ny, nx));
        let mut phi1_dt = Array2::default((ny, nx));
        let mut phi2_dt = Array2::default((ny, nx));
        for row in 0..ny {
            let ky = wavenumber(row, ny, l);
            for col in 0..nx {
                let kx = wavenumber(col, nx, l);
                let k2 = kx * kx + ky * ky;
                let lk = Complex64::new(params.eps, 0.0) - lap_coeff * k2;
                let z = lk * dt;
                exp_l[[row, col]] = z.exp();
                phi1_dt[[row, col]] = phi1(z) * dt;
                phi2_dt[[row, col]] = phi2(z) * dt;
            }
        }
        Ok(CgleSolver {
            params: params.clone(),
            fft: Spectral2d::new(nx, ny),
            exp_l,
            phi1_dt,
            phi2_dt,
            c_nl: params.sign_nl * Complex64::new(params.gamma, params.alpha),
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    /// N(u) = c_nl * |u|^2 * u, evaluated pointwise in physical space.
    fn nonlinear(&self, u: &Array2<Complex64>) -> Array2<Complex64> {
        u.mapv(|v| self.c_nl * v.norm_sqr() * v)
    }

    /// One ETD2RK step in spectral space. `u_hat` is the Fourier transform
    /// of the state; `u_phys` must be its current physical-space image.
    fn step_spectral(
        &mut self,
        u_hat: &mut Array2<Complex64>,
        u_phys: &mut Array2<Complex64>,
    ) -> Result<(), SimError> {
        let n_hat = {
            let mut n = self.nonlinear(u_phys);
            self.fft.forward(&mut n);
            n
        };
        // Predictor: a = E*u + dt*phi1*N(u)
        let mut a_hat = &self.exp_l * &*u_hat + &self.phi1_dt * &n_hat;
        let mut a_phys = a_hat.clone();
        self.fft.inverse(&mut a_phys);
        // Corrector: u' = a + dt*phi2*(N(a) - N(u))
        let mut na_hat = self.nonlinear(&a_phys);
        self.fft.forward(&mut na_hat);
        a_hat = a_hat + &self.phi2_dt * (&na_hat - &n_hat);
        *u_phys = a_hat.clone();
        self.fft.inverse(u_phys);
        *u_hat = a_hat;
        Ok(())
    }

    /// Advances the state by one dt. Physical-space in, physical-space out.
    pub fn etd_step(&mut self, state: &Field2D) -> Result<Field2D, SimError> {
        state.check_finite()?;
        let mut u_phys = state.data.clone();
        let mut u_hat = state.data.clone();
        self.fft.forward(&mut u_hat);
        self.step_spectral(&mut u_hat, &mut u_phys)?;
        let next = Field2D {
            data: u_phys,
            t: state.t + self.params.dt,
        };
        next.check_finite()?;
        Ok(next)
    }

    /// Advances `state` in place by `n_steps` without per-step transforms
    /// back and forth (one forward at entry, inverses as needed internally).
    pub fn advance(&mut self, state: &mut Field2D, n_steps: usize) -> Result<(), SimError> {
        state.check_finite()?;
        let mut u_hat = state.data.clone();
        self.fft.forward(&mut u_hat);
        for step in 0..n_steps {
            self.step_spectral(&mut u_hat, &mut state.data)?;
            state.t += self.params.dt;
            // Guard every few steps; a blow-up grows fast enough to catch.
            if step % 16 == 15 {
                state.check_finite()?;
            }
        }
        state.check_finite()
    }
}

/// Runs warmup, then emits |u| frames every `sample_dt` until `duration`
/// (inclusive endpoints: `duration = warmup + k*sample_dt` gives k+1 frames).
pub fn integrate_and_sample(params: &SimParams, duration: f64) -> Result<FrameSet, SimError> {
    let (frames, _) = integrate_and_sample_with_fields(params, duration, 0)?;
    Ok(frames)
}

/// Like [`integrate_and_sample`] but also retains up to `keep_fields` of the
/// sampled complex field states (from the front), for diagnostics that need
/// phase information.
pub fn integrate_and_sample_with_fields(
    params: &SimParams,
    duration: f64,
    keep_fields: usize,
) -> Result<(FrameSet, Vec<Field2D>), SimError> {
    if duration <= params.warmup_time {
        return Err(SimError::InvalidParams(
            "duration must exceed warmup_time".to_string(),
        ));
    }
    let mut solver = CgleSolver::new(params)?;
    let mut state = init_field(params)?;
    let warmup_steps = (params.warmup_time / params.dt).round() as usize;
    solver.advance(&mut state, warmup_steps)?;

    let steps_per_sample = params.steps_per_sample();
    let n_samples = ((duration - params.warmup_time) / params.sample_dt).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_samples);
    let mut fields = Vec::new();
    frames.push(state.magnitude_frame());
    if keep_fields > 0 {
        fields.push(state.clone());
    }
    for _ in 1..n_samples {
        solver.advance(&mut state, steps_per_sample)?;
        frames.push(state.magnitude_frame());
        if fields.len() < keep_fields {
            fields.push(state.clone());
        }
    }
    Ok((
        FrameSet {
            frames,
            sample_dt: params.sample_dt,
            t0: params.warmup_time,
            source_tag: format!("cgle seed={}", params.seed),
        },
        fields,
    ))
}

#[cfg(test)]
mod tests;
