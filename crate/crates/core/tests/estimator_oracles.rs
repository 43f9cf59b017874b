//! Oracle checks for the entropy estimators: closed-form angular
//! quadrature for the sphere identity, scalar recursions for linear flows,
//! deterministic trace quadrature for the divergence route, and the
//! inter-step covariance mechanism that separates the whole-flow and
//! per-step sphere estimators.

mod common;

use common::{assert_within_se, cov_se, mean_se};
use nalgebra::{DMatrix, DVector};

use fpsmc::estimators::{
    bruteforce_entropy, estimate_entropy, estimator_stats, fppp_entropy, hutchinson_entropy,
    sample_unit_sphere, single_step_fp_factor, EstimatorConfig, EstimatorKind, ProbeDist,
    TangentMode,
};
use fpsmc::flow::{DiffusionSchedule, Flow, Integrator, PassCounter, TimeGrid};
use fpsmc::gmm::{benchmark_gmm, GmmSpec};
use fpsmc::seed;

const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 20.0;

fn beta(t: f64) -> f64 {
    BETA_MIN + t * (BETA_MAX - BETA_MIN)
}

fn alpha_sq(t: f64) -> f64 {
    (-(BETA_MIN * t + (BETA_MAX - BETA_MIN) * t * t / 2.0)).exp()
}

fn linear_gain(t: f64, c: f64) -> f64 {
    let var_t = alpha_sq(t) * c * c + (1.0 - alpha_sq(t));
    -0.5 * beta(t) * (1.0 - 1.0 / var_t)
}

fn heun_gain(t_from: f64, t_to: f64, c: f64) -> f64 {
    let h = t_to - t_from;
    let g1 = linear_gain(t_from, c);
    let g2 = linear_gain(t_to, c);
    1.0 + 0.5 * h * (g1 + g2 * (1.0 + h * g1))
}

/// Product of one-step gains over the whole grid, generative (`down = true`)
/// or inverse direction.
fn composed_gain(times: &[f64], c: f64, down: bool) -> f64 {
    let mut m = 1.0;
    for w in times.windows(2) {
        m *= if down { heun_gain(w[0], w[1], c) } else { heun_gain(w[1], w[0], c) };
    }
    m
}

fn diagonal_flow(cs: &[f64], steps: usize) -> Flow {
    let dim = cs.len();
    let mut cov = DMatrix::zeros(dim, dim);
    for (i, c) in cs.iter().enumerate() {
        cov[(i, i)] = c * c;
    }
    let gmm = GmmSpec::single_gaussian(cov).unwrap();
    let sched = DiffusionSchedule::default_vp();
    let grid = TimeGrid::uniform(sched.t_max, steps).unwrap();
    Flow::new(gmm, sched, grid, Integrator::Heun).unwrap()
}

fn benchmark_flow(dim: usize, steps: usize) -> Flow {
    let sched = DiffusionSchedule::default_vp();
    let grid = TimeGrid::uniform(sched.t_max, steps).unwrap();
    Flow::new(benchmark_gmm(dim, 7).unwrap(), sched, grid, Integrator::Heun).unwrap()
}

/// The sphere identity in 2D, twice over: the angular integral of
/// `||A eps||^-2` for A = diag(1, 2) evaluated by trapezoid quadrature must
/// equal `1/|det A|`, and the Monte-Carlo mean over sphere draws must agree.
#[test]
fn sphere_identity_closed_form_and_monte_carlo_2d() {
    let n = 200_000usize;
    let mut quad = 0.0;
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let (s, c) = theta.sin_cos();
        quad += 1.0 / (c * c + 4.0 * s * s);
    }
    quad /= n as f64;
    assert!((quad - 0.5).abs() < 1e-9, "angular quadrature gives {quad}");

    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let mut rng = seed::rng_from(301);
    let draws: Vec<f64> = (0..200_000)
        .map(|_| {
            let eps = sample_unit_sphere(2, &mut rng);
            (&a * eps).norm().powi(-2)
        })
        .collect();
    let (mean, se) = mean_se(&draws);
    assert_within_se(mean, 0.5, se, 4.0, "sphere identity MC");
}

#[test]
fn single_step_factor_is_unbiased_for_a_triangular_inverse_map() {
    let a_inv = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
    let mut rng = seed::rng_from(302);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| {
            let eps = sample_unit_sphere(2, &mut rng);
            single_step_fp_factor(|e| &a_inv * e, &eps).unwrap()
        })
        .collect();
    let (mean, se) = mean_se(&draws);
    assert_within_se(mean, 1.0 / 6.0, se, 4.0, "det 6 inverse map");
}

#[test]
fn bruteforce_equals_the_axiswise_scalar_recursion() {
    let cs = [0.5, 1.3, 2.0];
    let steps = 24;
    let flow = diagonal_flow(&cs, steps);
    let times = flow.grid().times().to_vec();
    let want: f64 = cs.iter().map(|c| composed_gain(&times, *c, true).ln()).sum();

    let mut counter = PassCounter::new();
    let z = DVector::from_vec(vec![0.4, -1.0, 0.7]);
    let traj = flow.push_forward(&z, &mut counter).unwrap();
    let est = bruteforce_entropy(&flow, &traj, &mut counter).unwrap();
    assert!(
        (est.delta_s - want).abs() < 1e-12,
        "bruteforce {} vs scalar recursion {}",
        est.delta_s,
        want
    );
}

/// On an isotropic linear flow the whole-flow sphere estimate is
/// deterministic: the inverse tangent map is a scalar, so the direction
/// norm carries no randomness at all.
#[test]
fn fp_is_deterministic_on_an_isotropic_linear_flow() {
    let c = 1.4;
    let steps = 16;
    let flow = diagonal_flow(&[c, c, c, c], steps);
    let times = flow.grid().times().to_vec();
    let want = -4.0 * composed_gain(&times, c, false).ln();

    let z = DVector::from_vec(vec![0.3, 0.9, -0.2, 0.5]);
    let mut counter = PassCounter::new();
    let traj = flow.push_forward(&z, &mut counter).unwrap();
    for seed_ in 0..5u64 {
        let est = estimate_entropy(
            &flow,
            &traj,
            &EstimatorConfig::exact(EstimatorKind::Fp),
            seed_,
            &mut counter,
        )
        .unwrap();
        assert!(
            (est.delta_s - want).abs() < 1e-12,
            "draw {seed_}: {} vs scalar {}",
            est.delta_s,
            want
        );
    }
}

/// Anisotropic linear flow: `E[exp dS]` of the whole-flow estimator must
/// converge to the product of axiswise inverse gains.
#[test]
fn fp_exp_mean_matches_the_anisotropic_determinant() {
    let cs = [0.7, 1.0, 1.8];
    let flow = diagonal_flow(&cs, 12);
    let times = flow.grid().times().to_vec();
    let log_det_inv: f64 = cs.iter().map(|c| composed_gain(&times, *c, false).ln()).sum();

    let z = DVector::from_vec(vec![0.2, -0.5, 0.9]);
    let cfg = EstimatorConfig::exact(EstimatorKind::Fp);
    let stats = estimator_stats(&flow, &cfg, &z, 40_000, 303).unwrap();
    let rel_dev = (stats.log_mean_exp - (-log_det_inv)).exp_m1().abs();
    let rel_se = stats.se_mean_exp / stats.mean_exp;
    assert!(
        rel_dev <= 4.0 * rel_se,
        "relative deviation {rel_dev:.3e} vs 4 x se {rel_se:.3e}"
    );
}

/// The Hutchinson route estimates the trapezoid quadrature of the exact
/// velocity divergence along the trajectory; its probe mean must match that
/// deterministic value.
#[test]
fn hutchinson_mean_matches_deterministic_trace_quadrature() {
    let flow = benchmark_flow(3, 20);
    let times = flow.grid().times().to_vec();
    let z = DVector::from_vec(vec![0.6, -0.3, 0.8]);
    let mut counter = PassCounter::new();
    let traj = flow.push_forward(&z, &mut counter).unwrap();

    let mut quad = 0.0;
    for (i, w) in times.windows(2).enumerate() {
        let h = w[1] - w[0];
        let tr_hi = flow.velocity_jacobian_node(&traj.states()[i], i).trace();
        let tr_lo = flow.velocity_jacobian_node(&traj.states()[i + 1], i + 1).trace();
        quad += 0.5 * h * (tr_hi + tr_lo);
    }

    let draws: Vec<f64> = (0..3000)
        .map(|s| {
            hutchinson_entropy(&flow, &traj, 1, ProbeDist::Gaussian, 1000 + s, &mut counter)
                .unwrap()
                .delta_s
        })
        .collect();
    let (mean, se) = mean_se(&draws);
    assert_within_se(mean, quad, se, 4.0, "Hutchinson probe mean");
}

/// Both the trace quadrature and the exact step-Jacobian log-determinant
/// discretize the same continuous-time divergence integral with
/// second-order error, so their gap must shrink ~4x when steps double.
#[test]
fn trace_quadrature_and_bruteforce_converge_together()  {
    let z = DVector::from_vec(vec![0.6, -0.3, 0.8]);
    let gap = |steps: usize| {
        let flow = benchmark_flow(3, steps);
        let times = flow.grid().times().to_vec();
        let mut counter = PassCounter::new();
        let traj = flow.push_forward(&z, &mut counter).unwrap();
        let mut quad = 0.0;
        for (i, w) in times.windows(2).enumerate() {
            let h = w[1] - w[0];
            let tr_hi = flow.velocity_jacobian_node(&traj.states()[i], i).trace();
            let tr_lo = flow.velocity_jacobian_node(&traj.states()[i + 1], i + 1).trace();
            quad += 0.5 * h * (tr_hi + tr_lo);
        }
        let bf = bruteforce_entropy(&flow, &traj, &mut counter).unwrap().delta_s;
        (quad - bf).abs()
    };
    // The schedule's stiff end (beta up to 20) keeps coarse grids out of
    // the asymptotic regime; second-order scaling is clean from ~80 steps.
    let ratio = gap(160) / gap(320);
    assert!(
        (2.8..5.2).contains(&ratio),
        "gap ratio {ratio} not ~4 (gaps {} / {})",
        gap(160),
        gap(320)
    );
}

/// Finite-difference tangents approach the analytic ones as the probe
/// radius shrinks, holding the perturbation draw fixed.
#[test]
fn fd_tangent_converges_to_the_exact_tangent() {
    let flow = benchmark_flow(5, 16);
    let z = DVector::from_vec(vec![0.3, -0.6, 0.2, 1.0, -0.4]);
    let mut counter = PassCounter::new();
    let traj = flow.push_forward(&z, &mut counter).unwrap();
    let draw_seed = 304;

    let exact = fppp_entropy(
        &flow,
        &traj,
        &EstimatorConfig::exact(EstimatorKind::FpPlusPlus),
        draw_seed,
        &mut counter,
    )
    .unwrap()
    .delta_s;

    let fd_gap = |delta: f64| {
        let cfg =
            EstimatorConfig::new(EstimatorKind::FpPlusPlus, TangentMode::FiniteDifference, delta)
                .unwrap();
        let mut local = PassCounter::new();
        let fd = fppp_entropy(&flow, &traj, &cfg, draw_seed, &mut local).unwrap().delta_s;
        (fd - exact).abs()
    };
    assert!(fd_gap(1e-3) < 1e-3, "gap at delta 1e-3 is {}", fd_gap(1e-3));
    assert!(fd_gap(1e-4) < 1e-5, "gap at delta 1e-4 is {}", fd_gap(1e-4));
    assert!(fd_gap(1e-5) < 1e-6, "gap at delta 1e-5 is {}", fd_gap(1e-5));
}

/// The mechanism behind the variance ordering: under one shared direction
/// the per-step log factors of neighbouring steps are positively
/// correlated, so the whole-flow estimator accumulates their covariance
/// while per-step redraws cancel it.
#[test]
fn adjacent_step_factors_share_nonnegative_covariance_under_one_probe() {
    let flow = benchmark_flow(5, 10);
    let z = DVector::from_vec(vec![0.8, -0.2, 0.4, -0.9, 0.3]);
    let mut counter = PassCounter::new();
    let traj = flow.push_forward(&z, &mut counter).unwrap();
    let delta = 1e-4;
    let dim = flow.dim() as f64;

    let factor = |k: usize, eps: &DVector<f64>| {
        let xk = traj.x_k(k);
        let plus = flow.step_inverse(&(xk + delta * eps), k, &mut PassCounter::new()).unwrap();
        let minus = flow.step_inverse(&(xk - delta * eps), k, &mut PassCounter::new()).unwrap();
        -dim * (((plus - minus) / (2.0 * delta)).norm()).ln()
    };

    let mut rng = seed::rng_from(305);
    let mut c5 = Vec::with_capacity(4000);
    let mut c6 = Vec::with_capacity(4000);
    for _ in 0..4000 {
        let eps = sample_unit_sphere(5, &mut rng);
        c5.push(factor(5, &eps));
        c6.push(factor(6, &eps));
    }
    let (cov, se) = cov_se(&c5, &c6);
    assert!(
        cov >= -3.0 * se,
        "adjacent-step covariance {cov:.3e} is negative beyond 3 x se {se:.3e}"
    );
}

/// Rerunning any estimator with the same draw seed reproduces the estimate
/// bit for bit; distinct seeds decorrelate the sphere estimators.
#[test]
fn draw_seeds_reproduce_and_decorrelate() {
    let flow = benchmark_flow(4, 8);
    let z = DVector::from_vec(vec![0.1, 0.7, -0.5, 0.2]);
    let mut counter = PassCounter::new();
    let traj = flow.push_forward(&z, &mut counter).unwrap();
    for cfg in [
        EstimatorConfig::fd(EstimatorKind::Fp),
        EstimatorConfig::fd(EstimatorKind::FpPlusPlus),
        EstimatorConfig::fd(EstimatorKind::HutchGaussian(2)),
        EstimatorConfig::fd(EstimatorKind::HutchRademacher(2)),
    ] {
        let a = estimate_entropy(&flow, &traj, &cfg, 42, &mut counter).unwrap();
        let b = estimate_entropy(&flow, &traj, &cfg, 42, &mut counter).unwrap();
        assert_eq!(a.delta_s, b.delta_s, "{:?} must be seed-reproducible", cfg.kind);
        let c = estimate_entropy(&flow, &traj, &cfg, 43, &mut counter).unwrap();
        assert_ne!(a.delta_s, c.delta_s, "{:?} must vary across seeds", cfg.kind);
    }
}
