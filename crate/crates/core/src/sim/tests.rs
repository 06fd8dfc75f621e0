use super::*;
use approx::assert_abs_diff_eq;
use ndarray::Array2;

fn small_params() -> SimParams {
    SimParams {
        nx: 16,
        ny: 16,
        side_length: 2.0 * std::f64::consts::PI,
        dt: 1e-4,
        sample_dt: 1e-3,
        warmup_time: 0.0,
        ..SimParams::default()
    }
}

fn plane_wave(params: &SimParams, amplitude: f64, mode: usize) -> Field2D {
    let k = 2.0 * std::f64::consts::PI * mode as f64 / params.side_length;
    let data = Array2::from_shape_fn((params.ny, params.nx), |(_, c)| {
        let x = c as f64 * params.side_length / params.nx as f64;
        Complex64::from_polar(amplitude, k * x)
    });
    Field2D { data, t: 0.0 }
}

#[test]
fn init_field_deterministic_per_seed() {
    let params = SimParams {
        seed: 7,
        ..small_params()
    };
    let a = init_field(&params).unwrap();
    let b = init_field(&params).unwrap();
    assert_eq!(a, b);
    let c = init_field(&SimParams {
        seed: 8,
        ..params
    })
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_field_gaussian_scale() {
    // |u| is Rayleigh with per-component sigma = 0.1, so E|u| = 0.1*sqrt(pi/2).
    let params = SimParams {
        nx: 100,
        ny: 100,
        ..small_params()
    };
    let field = init_field(&params).unwrap();
    let mean_abs: f64 =
        field.data.iter().map(|u| u.norm()).sum::<f64>() / (100.0 * 100.0);
    let expected = 0.1 * (std::f64::consts::PI / 2.0).sqrt();
    assert!(
        (mean_abs - expected).abs() / expected < 0.1,
        "mean |u| = {mean_abs}, expected ~{expected}"
    );
}

#[test]
fn rejects_invalid_params() {
    let mut p = small_params();
    p.dt = 0.0;
    assert!(matches!(p.validate(), Err(SimError::InvalidParams(_))));
    let mut p = small_params();
    p.nx = 15;
    assert!(p.validate().is_err());
    let mut p = small_params();
    p.sample_dt = 2.5e-4 * 1.3;
    assert!(p.validate().is_err());
}

#[test]
fn linear_step_matches_analytic_propagator_per_mode() {
    // With gamma = alpha = 0 the nonlinearity vanishes and the ETD step is
    // the exact per-mode propagator exp(L_k dt).
    let params = SimParams {
        gamma: 0.0,
        alpha: 0.0,
        ..small_params()
    };
    let mut solver = CgleSolver::new(&params).unwrap();
    for mode in [0usize, 1, 3, 7] {
        let state = plane_wave(&params, 0.5, mode);
        let next = solver.etd_step(&state).unwrap();
        let k = 2.0 * std::f64::consts::PI * mode as f64 / params.side_length;
        let lk = Complex64::new(params.eps, 0.0)
            - params.sign_lap * Complex64::new(params.mu, params.beta) * k * k;
        let factor = (lk * params.dt).exp();
        for (got, init) in next.data.iter().zip(state.data.iter()) {
            let want = init * factor;
            assert_abs_diff_eq!(got.re, want.re, epsilon = 1e-13);
            assert_abs_diff_eq!(got.im, want.im, epsilon = 1e-13);
        }
    }
}

#[test]
fn nlse_plane_wave_dispersion() {
    // NLSE limit: eps = gamma = mu = 0. A plane wave A*exp(i(kx - w t))
    // satisfies the mode equation du/dt = (L_k + sign_nl*i*alpha*|A|^2) u,
    // giving w = sign_lap*beta*k^2 - sign_nl*alpha*|A|^2.
    let params = SimParams {
        eps: 0.0,
        gamma: 0.0,
        mu: 0.0,
        ..small_params()
    };
    let amplitude = 0.5;
    let mode = 2;
    let k = 2.0 * std::f64::consts::PI * mode as f64 / params.side_length;
    let omega =
        params.sign_lap * params.beta * k * k - params.sign_nl * params.alpha * amplitude * amplitude;

    let mut solver = CgleSolver::new(&params).unwrap();
    let state = plane_wave(&params, amplitude, mode);
    let next = solver.etd_step(&state).unwrap();
    let phase_step = (next.data[[0, 0]] / state.data[[0, 0]]).arg();
    let expected = -omega * params.dt;
    assert!(
        (phase_step - expected).abs() < 1e-6,
        "phase step {phase_step} vs {expected}"
    );
    // Amplitude must stay on the circle.
    assert_abs_diff_eq!(next.data[[0, 0]].norm(), amplitude, epsilon = 1e-9);
}

#[test]
fn nlse_phase_error_stays_small_over_1000_steps() {
    let params = SimParams {
        eps: 0.0,
        gamma: 0.0,
        mu: 0.0,
        ..small_params()
    };
    let amplitude = 0.4;
    let mode = 1;
    let k = 2.0 * std::f64::consts::PI * mode as f64 / params.side_length;
    let omega =
        params.sign_lap * params.beta * k * k - params.sign_nl * params.alpha * amplitude * amplitude;

    let mut solver = CgleSolver::new(&params).unwrap();
    let mut state = plane_wave(&params, amplitude, mode);
    let initial = state.data[[0, 0]];
    let n_steps = 1000;
    solver.advance(&mut state, n_steps).unwrap();
    let total_phase = -omega * params.dt * n_steps as f64;
    // Unwrapped comparison via the rotated reference.
    let reference = initial * Complex64::from_polar(1.0, total_phase);
    let err = (state.data[[0, 0]] / reference).arg().abs();
    assert!(
        err / total_phase.abs() < 1e-6,
        "relative phase error {} over total phase {}",
        err / total_phase.abs(),
        total_phase
    );
}

#[test]
fn self_convergence_is_second_order() {
    // Richardson: with a fixed horizon, err(dt) / err(dt/2) ~ 4 for an
    // order-2 scheme, where err is measured against the dt/4 solution.
    let base = SimParams {
        dt: 2e-4,
        sample_dt: 2e-4,
        ..small_params()
    };
    let horizon_steps = 50usize;
    let mut initial = plane_wave(&base, 0.8, 1);
    // Smooth multi-mode initial data.
    let second = plane_wave(&base, 0.3, 2);
    initial.data = &initial.data + &second.data;

    let run = |dt: f64, steps: usize| -> Array2<Complex64> {
        let params = SimParams {
            dt,
            sample_dt: dt,
            ..base.clone()
        };
        let mut solver = CgleSolver::new(&params).unwrap();
        let mut state = initial.clone();
        solver.advance(&mut state, steps).unwrap();
        state.data
    };
    let coarse = run(base.dt, horizon_steps);
    let medium = run(base.dt / 2.0, horizon_steps * 2);
    let fine = run(base.dt / 4.0, horizon_steps * 4);

    let norm = |a: &Array2<Complex64>, b: &Array2<Complex64>| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    // Successive-difference ratio: ||u_dt - u_dt/2|| / ||u_dt/2 - u_dt/4||
    // converges to 2^order without reference-solution bias.
    let ratio = norm(&coarse, &medium) / norm(&medium, &fine);
    assert!(
        (3.2..=4.8).contains(&ratio),
        "self-convergence ratio {ratio}"
    );
}

#[test]
fn sample_count_contract_and_determinism() {
    let params = SimParams {
        warmup_time: 0.01,
        ..small_params()
    };
    let duration = params.warmup_time + 10.0 * params.sample_dt;
    let frames = integrate_and_sample(&params, duration).unwrap();
    assert_eq!(frames.frames.len(), 11);
    assert_eq!(frames.sample_dt, params.sample_dt);
    let again = integrate_and_sample(&params, duration).unwrap();
    assert_eq!(frames, again);
}

#[test]
fn duration_must_exceed_warmup() {
    let params = small_params();
    let err = integrate_and_sample(&params, params.warmup_time).unwrap_err();
    assert!(matches!(err, SimError::InvalidParams(_)));
}

#[test]
fn nan_field_is_caught_by_divergence_guard() {
    // A NaN anywhere must trip the guard; a max() fold would skip it.
    let params = small_params();
    let mut solver = CgleSolver::new(&params).unwrap();
    let mut state = plane_wave(&params, 1.0, 1);
    state.data[[3, 4]] = Complex64::new(f64::NAN, 0.0);
    assert!(matches!(
        solver.etd_step(&state),
        Err(SimError::Divergence { .. })
    ));
}

#[test]
fn literal_signs_diverge_with_context() {
    // The literal form is non-saturating; a large-amplitude state blows up
    // and the failing time is attached.
    let params = SimParams {
        sign_nl: 1.0,
        sign_lap: -1.0,
        ..small_params()
    };
    let mut solver = CgleSolver::new(&params).unwrap();
    let mut state = plane_wave(&params, 50.0, 1);
    let mut diverged = false;
    for _ in 0..2000 {
        match solver.etd_step(&state) {
            Ok(next) => state = next,
            Err(SimError::Divergence { t, max_abs }) => {
                assert!(t >= 0.0);
                assert!(max_abs > DIVERGENCE_LIMIT || !max_abs.is_finite());
                diverged = true;
                break;
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    assert!(diverged, "expected divergence under literal signs");
}

#[test]
fn correlation_of_constant_field_is_one() {
    let data = Array2::from_elem((8, 8), Complex64::new(0.3, 0.7));
    let fields: Vec<Field2D> = (0..50)
        .map(|t| Field2D {
            data: data.clone(),
            t: t as f64,
        })
        .collect();
    let fit = temporal_correlation(&fields, 10).unwrap();
    for v in &fit.values {
        assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn correlation_recovers_known_decay() {
    // Phase-diffusion series: theta steps by N(0, 2/tau0), so the coherent
    // correlation decays as exp(-tau/tau0).
    use rand::Rng;
    let tau0 = 12.0;
    let n_t = 6000;
    let (ny, nx) = (10, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let sigma = (2.0 / tau0 as f64).sqrt();
    let mut phases = Array2::<f64>::zeros((ny, nx));
    let mut fields = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let data = phases.mapv(|p| Complex64::from_polar(1.0, p));
        fields.push(Field2D {
            data,
            t: t as f64,
        });
        phases.mapv_inplace(|p| {
            let step: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            p + sigma * step
        });
    }
    let fit = temporal_correlation(&fields, 40).unwrap();
    assert!(
        (fit.tau_c - tau0).abs() / tau0 < 0.1,
        "tau_c {} vs {}",
        fit.tau_c,
        tau0
    );
    assert!(fit.r_squared > 0.9);
}

#[test]
fn correlation_too_few_lags() {
    let data = Array2::from_elem((8, 8), Complex64::new(1.0, 0.0));
    let fields: Vec<Field2D> = (0..5)
        .map(|t| Field2D {
            data: data.clone(),
            t: t as f64,
        })
        .collect();
    assert!(matches!(
        temporal_correlation(&fields, 10),
        Err(FitError::SeriesTooShort { .. })
    ));
}

#[test]
fn mean_periods_of_plane_wave_are_exact() {
    let params = small_params();
    let mode = 2;
    let k = 2.0 * std::f64::consts::PI * mode as f64 / params.side_length;
    let omega = 1.5;
    let n_t = 64;
    let sample_dt = 2.0 * std::f64::consts::PI / (omega * 16.0);
    let fields: Vec<Field2D> = (0..n_t)
        .map(|t| {
            let time = t as f64 * sample_dt;
            let data = Array2::from_shape_fn((params.ny, params.nx), |(_, c)| {
                let x = c as f64 * params.side_length / params.nx as f64;
                Complex64::from_polar(1.0, k * x - omega * time)
            });
            Field2D { data, t: time }
        })
        .collect();
    let frames = FrameSet {
        frames: fields.iter().map(|f| f.magnitude_frame()).collect(),
        sample_dt,
        t0: 0.0,
        source_tag: "plane-wave".to_string(),
    };
    let (t_period, s_period) = mean_periods(&frames, &fields, params.side_length);
    assert_abs_diff_eq!(t_period, 2.0 * std::f64::consts::PI / omega, epsilon = 1e-9);
    assert_abs_diff_eq!(s_period, 2.0 * std::f64::consts::PI / k, epsilon = 1e-9);
}

#[test]
fn lyapunov_linear_growth_equals_eps() {
    // gamma = alpha = mu = 0: every mode grows at exactly eps, so the
    // Benettin estimate equals eps to machine precision.
    let params = SimParams {
        gamma: 0.0,
        alpha: 0.0,
        mu: 0.0,
        eps: 0.7,
        dt: 1e-3,
        sample_dt: 1e-3,
        ..small_params()
    };
    let lambda = lyapunov_max(&params, 10, 100).unwrap();
    // Rounding in the O(1e-8) trajectory difference limits the agreement.
    assert!(
        (lambda - params.eps).abs() / params.eps < 1e-4,
        "lambda {lambda}"
    );
}

#[test]
fn lyapunov_insensitive_to_delta0() {
    let params = SimParams {
        side_length: 4.0 * std::f64::consts::PI,
        dt: 2e-4,
        sample_dt: 2e-3,
        warmup_time: 0.5,
        ..small_params()
    };
    let estimates: Vec<f64> = [1e-6, 1e-8, 1e-10]
        .iter()
        .map(|&d| lyapunov_max_with_delta(&params, 20, 150, d).unwrap())
        .collect();
    let reference = estimates[1];
    for e in &estimates {
        assert!(
            (e - reference).abs() / reference.abs() < 0.1,
            "estimates {estimates:?}"
        );
    }
}
