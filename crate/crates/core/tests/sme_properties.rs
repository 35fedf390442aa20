use doublewell_core::control::{NullController, ObservationOptions};
use doublewell_core::env::InitialStateSpec;
use doublewell_core::hilbert::{x_squared, CMatrix, DensityMatrix, FockSpace, Operator, Parity, C64};
use doublewell_core::sme::{
    evolve_trajectory, lindblad_rhs, markovian_steady_state, weak_measure, Integrator, SmeConfig, SmeStepper,
};
use doublewell_core::{stream_rng, DoubleWellSystem, SimRng, SystemConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn system(dim: usize) -> DoubleWellSystem {
    DoubleWellSystem::new(&SystemConfig {
        dim,
        ..Default::default()
    })
    .unwrap()
}

fn random_density(n: usize, rng: &mut SimRng) -> DensityMatrix {
    let g = CMatrix::from_fn(n, n, |_, _| {
        C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrix::from_matrix(m / tr).unwrap()
}

/// Classical RK4 on the Lindblad generator with a fine fixed step.
fn lindblad_reference(rho0: &DensityMatrix, h: &Operator, collapse: &[Operator], t: f64, n: usize) -> CMatrix {
    let dt = t / n as f64;
    let rhs = |m: &CMatrix| lindblad_rhs_raw(m, h, collapse);
    let mut m = rho0.matrix().clone();
    for _ in 0..n {
        let k1 = rhs(&m);
        let k2 = rhs(&(&m + &k1 * C64::new(0.5 * dt, 0.0)));
        let k3 = rhs(&(&m + &k2 * C64::new(0.5 * dt, 0.0)));
        let k4 = rhs(&(&m + &k3 * C64::new(dt, 0.0)));
        m += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
    }
    m
}

fn lindblad_rhs_raw(m: &CMatrix, h: &Operator, collapse: &[Operator]) -> CMatrix {
    let hm = h.matrix();
    let mut out = (hm * m - m * hm) * C64::new(0.0, -1.0);
    for l in collapse {
        let lm = l.matrix();
        let ld = lm.adjoint();
        let ldl = &ld * lm;
        out += lm * m * &ld - (&ldl * m + m * &ldl) * C64::new(0.5, 0.0);
    }
    out
}

fn trace_norm_distance(a: &CMatrix, b: &CMatrix) -> f64 {
    let d = a - b;
    let h = (&d + d.adjoint()) * C64::new(0.5, 0.0);
    0.5 * h.symmetric_eigenvalues().iter().map(|v| v.abs()).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn state_stays_normalized_and_hermitian(
        seed in any::<u64>(),
        actions in proptest::collection::vec(-5.0f64..5.0, 1..25),
    ) {
        let sys = system(16);
        let cfg = SmeConfig::default();
        let mut stepper = SmeStepper::for_system(&sys, &cfg).unwrap();
        let mut rng = stream_rng(seed, 0);
        let mut rho = random_density(16, &mut rng);
        for a in actions {
            let out = stepper.step(&mut rho, a, &mut rng).unwrap();
            prop_assert!(out.current.is_finite());
            prop_assert!((rho.trace().re - 1.0).abs() <= 1e-9);
            prop_assert!(rho.trace().im.abs() <= 1e-9);
            prop_assert!(rho.hermitian_defect() <= 1e-9);
        }
    }
}

#[test]
fn parity_sectors_decouple() {
    let sys = system(60);
    let cfg = SmeConfig::default();
    let mut stepper = SmeStepper::for_system(&sys, &cfg).unwrap();
    let mut rho = InitialStateSpec::EvenThermal { nbar: 1.0 }.build(&sys).unwrap();
    let mut rng = stream_rng(11, 0);
    let mut actions = stream_rng(11, 1);
    for _ in 0..1000 {
        let a = actions.random_range(-5.0..5.0);
        stepper.step(&mut rho, a, &mut rng).unwrap();
    }
    assert!(rho.sector_population(Parity::Odd) <= 1e-8);
}

#[test]
fn trajectory_average_tracks_lindblad() {
    let sys = system(24);
    let cfg = SmeConfig::default();
    let rho0 = InitialStateSpec::EvenThermal { nbar: 1.0 }.build(&sys).unwrap();
    let steps = 200;
    let c = x_squared(&sys.space).scaled(cfg.measurement.gamma_meas.sqrt());
    let reference = lindblad_reference(&rho0, &sys.hamiltonian, &[c], 2.0, 4000);

    let mut stepper = SmeStepper::for_system(&sys, &cfg).unwrap();
    let mut sum = CMatrix::zeros(24, 24);
    let mut err_50 = 0.0;
    for k in 0..200u64 {
        let mut rng = stream_rng(2024, k);
        let mut rho = rho0.clone();
        for _ in 0..steps {
            stepper.step(&mut rho, 0.0, &mut rng).unwrap();
        }
        sum += rho.matrix();
        if k == 49 {
            err_50 = trace_norm_distance(&(&sum / C64::new(50.0, 0.0)), &reference);
        }
    }
    let err_200 = trace_norm_distance(&(&sum / C64::new(200.0, 0.0)), &reference);
    // Monte-Carlo spread alone is about 0.07 at M = 200 for this state
    assert!(err_200 <= 0.1, "M=200 trace distance {err_200}");
    assert!(err_200 < err_50, "M=50 {err_50}, M=200 {err_200}");
}

#[test]
fn record_noise_is_a_martingale() {
    let sys = system(20);
    let cfg = SmeConfig {
        n_substeps: 10,
        ..Default::default()
    };
    let mut stepper = SmeStepper::for_system(&sys, &cfg).unwrap();
    let ground = sys.ground.to_density();
    let target = ground.expect(&sys.x2).unwrap();
    let mut rng = stream_rng(5, 0);
    let n = 10_000;
    let (mut s, mut s2, mut si) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let mut rho = ground.clone();
        let out = stepper.step(&mut rho, 0.0, &mut rng).unwrap();
        let innovation = out.current - cfg.measurement.gain * out.expect_x2;
        s += innovation;
        s2 += innovation * innovation;
        si += out.current;
    }
    let mean = s / n as f64;
    let sd = (s2 / n as f64 - mean * mean).sqrt();
    let se = sd / (n as f64).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
    // analytic record noise: 1 / (sqrt(4ηΓ) sqrt(δt))
    let expected_sd = 1.0 / ((4.0 * cfg.measurement.gamma_meas).sqrt() * cfg.dt_control.sqrt());
    assert!((sd / expected_sd - 1.0).abs() < 0.05);
    assert!((si / n as f64 - target).abs() <= 3.0 * se);
}

#[test]
fn zero_noise_euler_step_is_second_order_locally() {
    let space = FockSpace::with_dim(12).unwrap();
    let sys = system(12);
    let mut rng = stream_rng(8, 0);
    let rho0 = random_density(12, &mut rng);
    let c = x_squared(&space).scaled(0.1f64.sqrt());
    let zero = Operator::zeros(12);
    let local_error = |integrator: Integrator, h: f64| {
        let cfg = SmeConfig {
            dt_control: h,
            n_substeps: 1,
            integrator,
            ..Default::default()
        };
        let mut stepper = SmeStepper::new(&space, &sys.hamiltonian, &zero, &sys.x2, &cfg).unwrap();
        let mut rho = rho0.clone();
        stepper.step_with_increments(&mut rho, 0.0, &[0.0]).unwrap();
        let exact = lindblad_reference(&rho0, &sys.hamiltonian, std::slice::from_ref(&c), h, 400);
        (rho.matrix() - exact).norm()
    };
    let ratio = local_error(Integrator::EulerMaruyama, 0.01) / local_error(Integrator::EulerMaruyama, 0.005);
    assert!((3.5..4.5).contains(&ratio), "euler ratio {ratio}");
    let ratio = local_error(Integrator::Rk4Drift, 0.01) / local_error(Integrator::Rk4Drift, 0.005);
    assert!(ratio > 20.0, "rk4 ratio {ratio}");
}

#[test]
fn lindblad_rhs_agrees_with_reference_form() {
    let sys = system(10);
    let mut rng = stream_rng(3, 0);
    let rho = random_density(10, &mut rng);
    let c = sys.x2.scaled(0.3);
    let a = lindblad_rhs(&rho, &sys.hamiltonian, std::slice::from_ref(&c)).unwrap();
    let b = lindblad_rhs_raw(rho.matrix(), &sys.hamiltonian, &[c]);
    assert!((a - b).norm() < 1e-10);
}

#[test]
fn weak_measurement_moments() {
    let mut rng = stream_rng(77, 0);
    let rho = random_density(4, &mut rng);
    let a = Operator::new(CMatrix::from_fn(4, 4, |i, j| {
        if i == j {
            C64::new([0.3, -1.2, 2.0, 0.7][i], 0.0)
        } else if i < j {
            C64::new(0.2 * (i + j) as f64, 0.1)
        } else {
            C64::new(0.2 * (i + j) as f64, -0.1)
        }
    }))
    .unwrap();
    let (g, sigma) = (1.5, 0.4);
    let mean_a = a.expectation(&rho).unwrap().re;
    let a2 = a.try_mul(&a).unwrap().expectation(&rho).unwrap().re;
    let want_mean = g * mean_a;
    let want_var = g * g * (a2 - mean_a * mean_a) + sigma;

    let n = 10_000;
    let samples: Vec<f64> = (0..n).map(|_| weak_measure(&rho, &a, g, sigma, &mut rng).unwrap().0).collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m4 = samples.iter().map(|z| (z - mean).powi(4)).sum::<f64>() / n as f64;
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = ((m4 - var * var) / n as f64).sqrt();
    assert!((mean - want_mean).abs() <= 3.0 * se_mean, "{mean} vs {want_mean}");
    assert!((var - want_var).abs() <= 3.0 * se_var, "{var} vs {want_var}");
}

#[test]
fn markovian_purity_peaks_inside_the_grid() {
    let sys = system(40);
    let grid = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];
    let purities: Vec<f64> = grid
        .iter()
        .map(|&g| markovian_steady_state(&sys, 0.05, g).unwrap().purity)
        .collect();
    let best = purities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(best > 0 && best < grid.len() - 1, "{purities:?}");
}

#[test]
fn zero_feedback_baseline_fixture() {
    let sys = system(30);
    let cfg = SmeConfig::default();
    let rho0 = sys.ground.to_density();
    let mut ctl = NullController;
    let mut rng = stream_rng(42, 0);
    let run = evolve_trajectory(&rho0, &mut ctl, &sys, &cfg, 100, &ObservationOptions::default(), &mut rng).unwrap();
    assert!(run.actions.iter().all(|&a| a == 0.0));
    assert!((run.mean_fidelity() - BASELINE_FIDELITY).abs() < 1e-9, "{}", run.mean_fidelity());
}

const BASELINE_FIDELITY: f64 = 0.8279394923437207;
