//! Stochastic estimators for the trajectory entropy
//! `dS = log |det df/dz|` of the discretized generative flow.
//!
//! All of them rest on one identity: for an invertible `A` and `eps`
//! uniform on the unit sphere `S^{D-1}`,
//!
//! ```text
//! E[ ||A eps||^(-D) ] = |det A|^(-1).
//! ```
//!
//! * **fp** applies it once to the whole inverse flow: with one sphere
//!   direction `eps`, `dS = -D log || (df^{-1}/dx) eps ||`, the action
//!   obtained either by central finite differences of two full inverse
//!   integrations (`x +- delta eps`) or by one exact tangent sweep. Then
//!   `E[exp dS] = |det d(f^{-1})/dx|^{-1}`, one number for the composition.
//! * **fppp** applies it per step with an independent `eps_k` each:
//!   `dS = -D sum_k log || J_k^{-1} eps_k ||` where `J_k^{-1}` is the
//!   Jacobian of the one-step inverse map at the trajectory state `x_k`.
//!   Independence across steps removes the nonnegative inter-step
//!   covariances that the single-direction estimator pays for, so its
//!   variance is never larger; unbiasedness is per-step exact:
//!   `E[exp dS] = prod_k |det J_k^{-1}|^{-1}`.
//! * **hutchinson** integrates the velocity divergence along the trajectory
//!   with probe vectors: each of the n probes is drawn once and carried
//!   through one full sweep, `div v ~ (1/n) sum_i u_i^T (J_v u_i)` at every
//!   node, then the quadrature matching the integrator applies (trapezoid
//!   for Heun, left rectangle for Euler). One probe per sweep keeps the cost
//!   at one JVP pass per probe; the node errors stay coherent within a
//!   sweep, so the variance sits on the whole integrated Jacobian rather
//!   than the per-node pieces. The trace estimate is unbiased, but
//!   `exp(dS)` is biased upward by Jensen.
//! * **bruteforce** propagates the full identity tangent basis through every
//!   generative step and takes `log |det|` of the composed matrix: exact for
//!   the discrete map, at a cost of D tangent passes.
//!
//! Cost accounting (in ODE passes, excluding the one generation pass): the
//! finite-difference fp/fppp modes consume exactly 2, the exact-tangent
//! modes 1, hutchinson with n probes n, bruteforce D. All counts are
//! measured by [`PassCounter`], not asserted by contract.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::Error;
use crate::flow::{Direction, Flow, FlowScratch, FlowTrajectory, Integrator, PassCounter};
use crate::seed;
use crate::Result;

/// Default finite-difference perturbation radius.
pub const DEFAULT_DELTA: f64 = 1e-4;

/// Probe law for the Hutchinson divergence estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDist {
    Gaussian,
    Rademacher,
}

/// How fp/fppp obtain the inverse-Jacobian action on a sphere direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TangentMode {
    /// Central finite difference of the inverse map, radius `delta`.
    FiniteDifference,
    /// Analytic tangent propagation through the inverse integrator step.
    Exact,
}

/// Estimator family tag carried on every estimate and in output records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Fp,
    FpPlusPlus,
    HutchGaussian(usize),
    HutchRademacher(usize),
    BruteForce,
}

impl EstimatorKind {
    /// Stable string form used in config files, JSONL records, and CSV.
    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Fp => "fp".to_string(),
            EstimatorKind::FpPlusPlus => "fppp".to_string(),
            EstimatorKind::HutchGaussian(n) => format!("hutch-g{n}"),
            EstimatorKind::HutchRademacher(n) => format!("hutch-r{n}"),
            EstimatorKind::BruteForce => "bruteforce".to_string(),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Full estimator selection: family plus the fp/fppp differentiation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mode: TangentMode,
    pub delta: f64,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, mode: TangentMode, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("delta {delta} must be positive and finite")));
        }
        if let EstimatorKind::HutchGaussian(0) | EstimatorKind::HutchRademacher(0) = kind {
            return Err(Error::invalid("hutchinson needs at least one probe"));
        }
        Ok(EstimatorConfig { kind, mode, delta })
    }

    pub fn fd(kind: EstimatorKind) -> Self {
        EstimatorConfig { kind, mode: TangentMode::FiniteDifference, delta: DEFAULT_DELTA }
    }

    pub fn exact(kind: EstimatorKind) -> Self {
        EstimatorConfig { kind, mode: TangentMode::Exact, delta: DEFAULT_DELTA }
    }
}

/// Record of the noise stream an estimate consumed. The stream is fully
/// determined by `seed`, so the perturbation directions can be regenerated
/// bit-exactly; `count` is the number of sphere directions (fp family) or
/// probe vectors (hutchinson) drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbationDraw {
    pub seed: u64,
    pub dim: usize,
    pub count: usize,
}

impl PerturbationDraw {
    /// Regenerates the sphere directions of an fp/fppp draw, in order.
    pub fn unit_vectors(&self) -> Vec<DVector<f64>> {
        let mut rng = seed::rng_from(self.seed);
        (0..self.count).map(|_| sample_unit_sphere(self.dim, &mut rng)).collect()
    }
}

/// One entropy estimate: the value, which estimator produced it, the number
/// of whole ODE passes it consumed (measured, generation excluded), and the
/// reproducible noise record for stochastic kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEstimate {
    pub delta_s: f64,
    pub kind: EstimatorKind,
    pub ode_passes: u64,
    pub draw: Option<PerturbationDraw>,
}

/// Uniform draw from the unit sphere `S^{dim-1}`: normalized standard
/// normal vector. `dim = 1` yields exactly +1 or -1. Deterministic given the
/// generator state.
pub fn sample_unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    loop {
        for i in 0..dim {
            v[i] = rng.sample::<f64, _>(StandardNormal);
        }
        let n = v.norm();
        if n > 0.0 && n.is_finite() {
            v /= n;
            return v;
        }
    }
}

fn sphere_into<R: Rng + ?Sized>(out: &mut DVector<f64>, rng: &mut R) {
    loop {
        for i in 0..out.len() {
            out[i] = rng.sample::<f64, _>(StandardNormal);
        }
        let n = out.norm();
        if n > 0.0 && n.is_finite() {
            *out /= n;
            return;
        }
    }
}

/// Single-step sphere-perturbation factor `||A^{-1} eps||^(-D)` given the
/// inverse action as a black box. Averaged over sphere draws this is an
/// unbiased estimate of `|det A|`.
pub fn single_step_fp_factor<F>(inverse_action: F, epsilon: &DVector<f64>) -> Result<f64>
where
    F: FnOnce(&DVector<f64>) -> DVector<f64>,
{
    let dim = epsilon.len();
    let y = inverse_action(epsilon);
    if y.len() != dim {
        return Err(Error::invalid("inverse action changed the dimension"));
    }
    let n = y.norm();
    if !n.is_finite() {
        return Err(Error::numerical("inverse action produced a non-finite vector"));
    }
    if n == 0.0 {
        return Err(Error::SingularJacobian("inverse action annihilated the direction".into()));
    }
    Ok(n.powi(-(dim as i32)))
}

/// `-D log ||y||` with the same guards as [`single_step_fp_factor`], used by
/// the estimators to accumulate in log space.
fn neg_d_log_norm(y: &DVector<f64>, what: &str) -> Result<f64> {
    let n = y.norm();
    if !n.is_finite() {
        return Err(Error::numerical(format!("{what}: non-finite Jacobian action")));
    }
    if n == 0.0 {
        return Err(Error::SingularJacobian(format!("{what}: zero-norm Jacobian action")));
    }
    Ok(-(y.len() as f64) * n.ln())
}

/// Whole-flow sphere-perturbation estimate at the data-side point `x`.
///
/// Finite-difference mode pulls `x + delta eps` and `x - delta eps` back
/// through the full inverse flow and uses only the two latent endpoints;
/// exact mode propagates `eps` jointly with the state through the analytic
/// tangent of each inverse step. `E[exp dS]` equals the inverse of the
/// composed inverse-map Jacobian determinant at `x`.
pub fn fp_entropy(
    flow: &Flow,
    x: &DVector<f64>,
    cfg: &EstimatorConfig,
    draw_seed: u64,
    counter: &mut PassCounter,
) -> Result<EntropyEstimate> {
    let dim = flow.dim();
    if x.len() != dim {
        return Err(Error::invalid("fp_entropy: point dimension mismatch"));
    }
    let steps = flow.grid().steps();
    let mut rng = seed::rng_from(draw_seed);
    let eps = sample_unit_sphere(dim, &mut rng);
    let mut local = PassCounter::new();
    let delta_s = match cfg.mode {
        TangentMode::FiniteDifference => {
            let delta = cfg.delta;
            let plus = flow.pull_back(&(x + &eps * delta), &mut local)?;
            let minus = flow.pull_back(&(x - &eps * delta), &mut local)?;
            let d = (plus.latent() - minus.latent()) / (2.0 * delta);
            neg_d_log_norm(&d, "fp fd")?
        }
        TangentMode::Exact => {
            let mut xc = x.clone_owned();
            let mut wc = eps.clone_owned();
            let mut xn = DVector::zeros(dim);
            let mut wn = DVector::zeros(dim);
            let mut scratch = FlowScratch::for_flow(flow);
            for k in 1..=steps {
                flow.step_inverse_tangent(&xc, &wc, k, &mut xn, &mut wn, &mut scratch, &mut local)?;
                std::mem::swap(&mut xc, &mut xn);
                std::mem::swap(&mut wc, &mut wn);
            }
            neg_d_log_norm(&wc, "fp exact")?
        }
    };
    let ode_passes = local.passes(steps);
    counter.merge(&local);
    Ok(EntropyEstimate {
        delta_s,
        kind: EstimatorKind::Fp,
        ode_passes,
        draw: Some(PerturbationDraw { seed: draw_seed, dim, count: 1 }),
    })
}

/// Per-step sphere-perturbation estimate along a generative trajectory.
///
/// Step `k` perturbs the stored state `x_k` with its own direction
/// `eps_k` (drawn in order `k = 1..=T` from the seed stream) and applies
/// the one-step inverse map, by central differences or by the analytic
/// step tangent. Contributions `-D log ||J_k^{-1} eps_k||` add up.
pub fn fppp_entropy(
    flow: &Flow,
    traj: &FlowTrajectory,
    cfg: &EstimatorConfig,
    draw_seed: u64,
    counter: &mut PassCounter,
) -> Result<EntropyEstimate> {
    let dim = flow.dim();
    let steps = flow.grid().steps();
    if traj.steps() != steps {
        return Err(Error::invalid("fppp_entropy: trajectory does not match the flow grid"));
    }
    let mut rng = seed::rng_from(draw_seed);
    let mut local = PassCounter::new();
    let mut scratch = FlowScratch::for_flow(flow);
    let mut eps = DVector::zeros(dim);
    let mut delta_s = 0.0;
    match cfg.mode {
        TangentMode::FiniteDifference => {
            let delta = cfg.delta;
            let mut plus = DVector::zeros(dim);
            let mut minus = DVector::zeros(dim);
            let mut probe = DVector::zeros(dim);
            for k in 1..=steps {
                sphere_into(&mut eps, &mut rng);
                let xk = traj.x_k(k);
                probe.copy_from(xk);
                probe.axpy(delta, &eps, 1.0);
                flow.step_inverse_into(&probe, k, &mut plus, &mut scratch, &mut local)?;
                probe.copy_from(xk);
                probe.axpy(-delta, &eps, 1.0);
                flow.step_inverse_into(&probe, k, &mut minus, &mut scratch, &mut local)?;
                plus -= &minus;
                plus /= 2.0 * delta;
                delta_s += neg_d_log_norm(&plus, "fppp fd")?;
            }
        }
        TangentMode::Exact => {
            let mut xn = DVector::zeros(dim);
            let mut wn = DVector::zeros(dim);
            for k in 1..=steps {
                sphere_into(&mut eps, &mut rng);
                flow.step_inverse_tangent(
                    traj.x_k(k),
                    &eps,
                    k,
                    &mut xn,
                    &mut wn,
                    &mut scratch,
                    &mut local,
                )?;
                delta_s += neg_d_log_norm(&wn, "fppp exact")?;
            }
        }
    }
    let ode_passes = local.passes(steps);
    counter.merge(&local);
    Ok(EntropyEstimate {
        delta_s,
        kind: EstimatorKind::FpPlusPlus,
        ode_passes,
        draw: Some(PerturbationDraw { seed: draw_seed, dim, count: steps }),
    })
}

/// Hutchinson divergence quadrature along the trajectory.
///
/// Node `i` carries the state `states[i]` at time `tau_i`; its divergence is
/// estimated with `n` fresh probes, and nodes combine with the quadrature
/// induced by the integrator: trapezoid on each interval for Heun, left
/// (higher-time) rectangle for Euler, integrating from `t_max` down to 0.
/// Probes are drawn probe-sweep-major: sweep 0 visits every node once, then
/// sweep 1, and so on, each sweep counting one ODE pass.
pub fn hutchinson_entropy(
    flow: &Flow,
    traj: &FlowTrajectory,
    n_probes: usize,
    dist: ProbeDist,
    draw_seed: u64,
    counter: &mut PassCounter,
) -> Result<EntropyEstimate> {
    let dim = flow.dim();
    let steps = flow.grid().steps();
    if traj.steps() != steps {
        return Err(Error::invalid("hutchinson_entropy: trajectory does not match the flow grid"));
    }
    if n_probes == 0 {
        return Err(Error::invalid("hutchinson_entropy: need at least one probe"));
    }
    let mut rng = seed::rng_from(draw_seed);
    let mut local = PassCounter::new();
    // Euler never evaluates the final (t = 0) node, so its sweep skips it.
    let nodes_used = match flow.integrator() {
        Integrator::Heun => steps + 1,
        Integrator::Euler => steps,
    };
    let mut div = vec![0.0; nodes_used];
    let mut u = DVector::zeros(dim);
    let mut jv = DVector::zeros(dim);
    let mut scratch = FlowScratch::for_flow(flow);
    let mut drawn = 0usize;
    for _sweep in 0..n_probes {
        // One probe per sweep, reused at every node: a sweep is a single JVP
        // pass along the trajectory with a fixed direction.
        match dist {
            ProbeDist::Gaussian => {
                for c in 0..dim {
                    u[c] = rng.sample::<f64, _>(StandardNormal);
                }
            }
            ProbeDist::Rademacher => {
                for c in 0..dim {
                    u[c] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                }
            }
        }
        drawn += 1;
        for (i, d) in div.iter_mut().enumerate() {
            flow.velocity_jvp_node(&traj.states()[i], &u, i, &mut jv, &mut scratch.gmm);
            *d += u.dot(&jv);
        }
        local.probe_sweeps += 1;
    }
    for d in div.iter_mut() {
        *d /= n_probes as f64;
    }
    let times = flow.grid().times();
    let mut delta_s = 0.0;
    match flow.integrator() {
        Integrator::Heun => {
            for i in 0..steps {
                delta_s += 0.5 * (times[i + 1] - times[i]) * (div[i] + div[i + 1]);
            }
        }
        Integrator::Euler => {
            for i in 0..steps {
                delta_s += (times[i + 1] - times[i]) * div[i];
            }
        }
    }
    if !delta_s.is_finite() {
        return Err(Error::numerical("hutchinson: non-finite divergence integral"));
    }
    let kind = match dist {
        ProbeDist::Gaussian => EstimatorKind::HutchGaussian(n_probes),
        ProbeDist::Rademacher => EstimatorKind::HutchRademacher(n_probes),
    };
    let ode_passes = local.passes(steps);
    counter.merge(&local);
    Ok(EntropyEstimate {
        delta_s,
        kind,
        ode_passes,
        draw: Some(PerturbationDraw { seed: draw_seed, dim, count: drawn }),
    })
}

/// Exact log-determinant of the composed generative map along `traj`:
/// propagates the identity tangent basis through every step's analytic
/// Jacobian and takes `log |det|` of the product. Deterministic.
pub fn bruteforce_entropy(
    flow: &Flow,
    traj: &FlowTrajectory,
    counter: &mut PassCounter,
) -> Result<EntropyEstimate> {
    let dim = flow.dim();
    let steps = flow.grid().steps();
    if traj.steps() != steps {
        return Err(Error::invalid("bruteforce_entropy: trajectory does not match the flow grid"));
    }
    let mut local = PassCounter::new();
    let mut m = nalgebra::DMatrix::<f64>::identity(dim, dim);
    // Generative order: step T first (latent side), step 1 last.
    for k in (1..=steps).rev() {
        let jk = flow.step_jacobian_exact(k, traj.x_k(k + 1), Direction::Generative)?;
        m = jk * m;
        local.tangent_steps += dim as u64;
    }
    let delta_s = log_abs_det(&m).ok_or_else(|| {
        Error::SingularJacobian("composed flow Jacobian is singular".into())
    })?;
    if !delta_s.is_finite() {
        return Err(Error::numerical("bruteforce: non-finite log-determinant"));
    }
    let ode_passes = local.passes(steps);
    counter.merge(&local);
    Ok(EntropyEstimate { delta_s, kind: EstimatorKind::BruteForce, ode_passes, draw: None })
}

/// `log |det M|` through an LU factorization; `None` if `M` is singular.
pub fn log_abs_det(m: &nalgebra::DMatrix<f64>) -> Option<f64> {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows().min(u.ncols()) {
        let d = u[(i, i)].abs();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(acc)
}

/// Sum over steps of `log |det J_k|` for the exact one-step Jacobians in the
/// given direction, evaluated at each step's input state along `traj`. For
/// [`Direction::Inverse`] the negated sum is the exact log-mean target of
/// the fppp estimator: `E[exp dS_fppp] = exp(-sum)`.
pub fn step_logdet_sum(flow: &Flow, traj: &FlowTrajectory, direction: Direction) -> Result<f64> {
    let steps = flow.grid().steps();
    if traj.steps() != steps {
        return Err(Error::invalid("step_logdet_sum: trajectory does not match the flow grid"));
    }
    let mut acc = 0.0;
    for k in 1..=steps {
        let x_in = match direction {
            Direction::Generative => traj.x_k(k + 1),
            Direction::Inverse => traj.x_k(k),
        };
        let j = flow.step_jacobian_exact(k, x_in, direction)?;
        acc += log_abs_det(&j).ok_or_else(|| {
            Error::SingularJacobian(format!("step {k} Jacobian is singular"))
        })?;
    }
    Ok(acc)
}

/// Dispatch an estimate for any kind on a prepared trajectory.
pub fn estimate_entropy(
    flow: &Flow,
    traj: &FlowTrajectory,
    cfg: &EstimatorConfig,
    draw_seed: u64,
    counter: &mut PassCounter,
) -> Result<EntropyEstimate> {
    match cfg.kind {
        EstimatorKind::Fp => fp_entropy(flow, traj.sample(), cfg, draw_seed, counter),
        EstimatorKind::FpPlusPlus => fppp_entropy(flow, traj, cfg, draw_seed, counter),
        EstimatorKind::HutchGaussian(n) => {
            hutchinson_entropy(flow, traj, n, ProbeDist::Gaussian, draw_seed, counter)
        }
        EstimatorKind::HutchRademacher(n) => {
            hutchinson_entropy(flow, traj, n, ProbeDist::Rademacher, draw_seed, counter)
        }
        EstimatorKind::BruteForce => bruteforce_entropy(flow, traj, counter),
    }
}

/// Step-halving diagnostic for the finite-difference tangent: the same
/// estimate recomputed at `delta` and `delta/2` under the identical noise
/// stream, so the gap isolates the truncation error of the difference
/// quotient. Central differences shrink the gap by ~4x per halving; a gap
/// that refuses to shrink means roundoff has taken over and `delta` is
/// already too small.
pub fn delta_halving_gap(
    flow: &Flow,
    traj: &FlowTrajectory,
    cfg: &EstimatorConfig,
    draw_seed: u64,
) -> Result<f64> {
    if cfg.mode != TangentMode::FiniteDifference {
        return Err(Error::invalid("delta_halving_gap applies to finite-difference mode only"));
    }
    let mut counter = PassCounter::new();
    let full = estimate_entropy(flow, traj, cfg, draw_seed, &mut counter)?;
    let half = EstimatorConfig { delta: cfg.delta / 2.0, ..*cfg };
    let halved = estimate_entropy(flow, traj, &half, draw_seed, &mut counter)?;
    Ok((full.delta_s - halved.delta_s).abs())
}

/// Moment summary of repeated estimates at a fixed latent point.
#[derive(Debug, Clone)]
pub struct EstimatorStats {
    pub n: usize,
    pub mean_delta_s: f64,
    /// Unbiased sample variance of the dS draws.
    pub var_delta_s: f64,
    /// Plain central fourth moment of the dS draws.
    pub fourth_central: f64,
    /// `ln( (1/n) sum_i exp(dS_i) )`, accumulated by log-sum-exp.
    pub log_mean_exp: f64,
    /// `ln( (1/n) sum_i exp(2 dS_i) )`.
    pub log_mean_exp_sq: f64,
    pub mean_exp: f64,
    /// Standard error of `mean_exp`.
    pub se_mean_exp: f64,
    /// Whole ODE passes consumed, generation included.
    pub total_passes: u64,
    /// The raw draws, in draw-index order.
    pub delta_s: Vec<f64>,
}

/// Relative standard error of the exp-mean, computed in log space:
/// `se_mean_exp / mean_exp`. Stable even when `mean_exp` over/underflows.
pub fn rel_se_of_exp_mean(log_mean_exp: f64, log_mean_exp_sq: f64, n: usize) -> f64 {
    // var(exp dS) = m2 - m1^2 = exp(l2) (1 - exp(2 l1 - l2)).
    let ratio = -(2.0 * log_mean_exp - log_mean_exp_sq).exp_m1();
    let var_over_m1sq = ratio.max(0.0) * (log_mean_exp_sq - 2.0 * log_mean_exp).exp();
    (var_over_m1sq * n as f64 / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Repeated independent estimates at a fixed latent point `z`: generates the
/// trajectory once, then runs `n_draws` draws with seeds chained from
/// `master_seed` by draw index. Draw-order stable, so results do not depend
/// on the parallel schedule.
pub fn estimator_stats(
    flow: &Flow,
    cfg: &EstimatorConfig,
    z: &DVector<f64>,
    n_draws: usize,
    master_seed: u64,
) -> Result<EstimatorStats> {
    if n_draws < 2 {
        return Err(Error::invalid("estimator_stats needs at least two draws"));
    }
    let mut counter = PassCounter::new();
    let traj = flow.push_forward(z, &mut counter)?;
    let results: Vec<Result<(f64, PassCounter)>> = (0..n_draws)
        .into_par_iter()
        .map(|i| {
            let mut local = PassCounter::new();
            let est =
                estimate_entropy(flow, &traj, cfg, seed::chain(master_seed, &[i as u64]), &mut local)?;
            Ok((est.delta_s, local))
        })
        .collect();
    let mut delta_s = Vec::with_capacity(n_draws);
    for r in results {
        let (ds, local) = r?;
        delta_s.push(ds);
        counter.merge(&local);
    }
    let n = n_draws as f64;
    let mean = delta_s.iter().sum::<f64>() / n;
    let var = delta_s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let m4 = delta_s.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let log_mean_exp = log_sum_exp(delta_s.iter().copied()) - n.ln();
    let log_mean_exp_sq = log_sum_exp(delta_s.iter().map(|v| 2.0 * v)) - n.ln();
    let mean_exp = log_mean_exp.exp();
    let se_mean_exp = rel_se_of_exp_mean(log_mean_exp, log_mean_exp_sq, n_draws) * mean_exp;
    Ok(EstimatorStats {
        n: n_draws,
        mean_delta_s: mean,
        var_delta_s: var,
        fourth_central: m4,
        log_mean_exp,
        log_mean_exp_sq,
        mean_exp,
        se_mean_exp,
        total_passes: counter.passes(flow.grid().steps()),
        delta_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{DiffusionSchedule, TimeGrid};
    use crate::gmm::{benchmark_gmm, GmmSpec};

    fn flow_with(gmm: GmmSpec, steps: usize, integrator: Integrator) -> Flow {
        let sched = DiffusionSchedule::default_vp();
        let grid = TimeGrid::uniform(sched.t_max, steps).unwrap();
        Flow::new(gmm, sched, grid, integrator).unwrap()
    }

    #[test]
    fn unit_sphere_has_unit_norm_and_dim_one_is_sign() {
        let mut rng = seed::rng_from(1);
        for dim in [1usize, 2, 7].iter().copied() {
            for _ in 0..20 {
                let v = sample_unit_sphere(dim, &mut rng);
                assert!((v.norm() - 1.0).abs() < 1e-14);
                if dim == 1 {
                    assert!(v[0] == 1.0 || v[0] == -1.0, "dim-1 sphere draw must be +-1");
                }
            }
        }
    }

    #[test]
    fn single_step_factor_on_identity_and_scaled_identity() {
        let mut rng = seed::rng_from(2);
        let eps = sample_unit_sphere(2, &mut rng);
        let f = single_step_fp_factor(|e| e.clone_owned(), &eps).unwrap();
        assert!((f - 1.0).abs() < 1e-14, "identity map factor must be 1, got {f}");
        // A = 2 I, so A^{-1} eps has norm 1/2 and the factor is 2^D = 4.
        let f = single_step_fp_factor(|e| e * 0.5, &eps).unwrap();
        assert!((f - 4.0).abs() < 1e-12, "got {f}");
        let err = single_step_fp_factor(|e| e * 0.0, &eps);
        assert!(matches!(err, Err(Error::SingularJacobian(_))));
    }

    #[test]
    fn stationary_flow_gives_exactly_zero_entropy_for_all_kinds() {
        let flow = flow_with(GmmSpec::standard_normal(3), 4, Integrator::Heun);
        let mut counter = PassCounter::new();
        let z = DVector::from_vec(vec![0.4, -0.6, 1.0]);
        let traj = flow.push_forward(&z, &mut counter).unwrap();
        for cfg in [
            EstimatorConfig::fd(EstimatorKind::Fp),
            EstimatorConfig::exact(EstimatorKind::Fp),
            EstimatorConfig::fd(EstimatorKind::FpPlusPlus),
            EstimatorConfig::exact(EstimatorKind::FpPlusPlus),
            EstimatorConfig::fd(EstimatorKind::HutchGaussian(2)),
            EstimatorConfig::fd(EstimatorKind::BruteForce),
        ] {
            let est = estimate_entropy(&flow, &traj, &cfg, 11, &mut counter).unwrap();
            assert!(
                est.delta_s.abs() < 1e-12,
                "{}: stationary entropy should vanish, got {}",
                est.kind,
                est.delta_s
            );
        }
    }

    #[test]
    fn pass_counts_match_contract() {
        let flow = flow_with(benchmark_gmm(4, 5).unwrap(), 6, Integrator::Heun);
        let mut counter = PassCounter::new();
        let z = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let traj = flow.push_forward(&z, &mut counter).unwrap();
        assert_eq!(counter.passes(6), 1, "generation is one pass");
        let cases = [
            (EstimatorConfig::fd(EstimatorKind::Fp), 2),
            (EstimatorConfig::exact(EstimatorKind::Fp), 1),
            (EstimatorConfig::fd(EstimatorKind::FpPlusPlus), 2),
            (EstimatorConfig::exact(EstimatorKind::FpPlusPlus), 1),
            (EstimatorConfig::fd(EstimatorKind::HutchGaussian(1)), 1),
            (EstimatorConfig::fd(EstimatorKind::HutchRademacher(3)), 3),
            (EstimatorConfig::fd(EstimatorKind::BruteForce), 4),
        ];
        for (cfg, expect) in cases {
            let mut local = PassCounter::new();
            let est = estimate_entropy(&flow, &traj, &cfg, 7, &mut local).unwrap();
            assert_eq!(
                est.ode_passes, expect,
                "{} should consume {expect} passes, measured {}",
                est.kind, est.ode_passes
            );
            assert_eq!(local.passes(6), expect, "caller counter must agree");
        }
    }

    #[test]
    fn same_seed_reproduces_bit_exactly() {
        let flow = flow_with(benchmark_gmm(3, 8).unwrap(), 5, Integrator::Heun);
        let mut counter = PassCounter::new();
        let z = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let traj = flow.push_forward(&z, &mut counter).unwrap();
        let cfg = EstimatorConfig::fd(EstimatorKind::FpPlusPlus);
        let a = fppp_entropy(&flow, &traj, &cfg, 99, &mut counter).unwrap();
        let b = fppp_entropy(&flow, &traj, &cfg, 99, &mut counter).unwrap();
        assert_eq!(a.delta_s, b.delta_s, "same draw seed must give identical estimates");
        let c = fppp_entropy(&flow, &traj, &cfg, 100, &mut counter).unwrap();
        assert_ne!(a.delta_s, c.delta_s);

        let d1 = bruteforce_entropy(&flow, &traj, &mut counter).unwrap();
        let d2 = bruteforce_entropy(&flow, &traj, &mut counter).unwrap();
        assert_eq!(d1.delta_s, d2.delta_s, "bruteforce is deterministic");
    }

    #[test]
    fn fppp_on_single_step_grid_equals_fp_bit_for_bit() {
        let flow = flow_with(benchmark_gmm(3, 13).unwrap(), 1, Integrator::Heun);
        let mut counter = PassCounter::new();
        let z = DVector::from_vec(vec![0.2, 0.8, -1.1]);
        let traj = flow.push_forward(&z, &mut counter).unwrap();
        let cfg = EstimatorConfig::fd(EstimatorKind::Fp);
        let fp = fp_entropy(&flow, traj.sample(), &cfg, 4242, &mut counter).unwrap();
        let cfg2 = EstimatorConfig::fd(EstimatorKind::FpPlusPlus);
        let pp = fppp_entropy(&flow, &traj, &cfg2, 4242, &mut counter).unwrap();
        assert_eq!(
            fp.delta_s, pp.delta_s,
            "with T = 1 and a shared seed the two estimators are the same computation"
        );
    }

    #[test]
    fn draw_record_regenerates_directions() {
        let d = PerturbationDraw { seed: 31, dim: 4, count: 3 };
        let a = d.unit_vectors();
        let b = d.unit_vectors();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for v in &a {
            assert!((v.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rademacher_probes_are_exact_for_axis_aligned_gaussian_euler() {
        // Diagonal target covariance keeps every velocity Jacobian diagonal,
        // and for diagonal J the Rademacher quadratic form u^T J u equals
        // tr J for every draw: the estimator has zero variance and matches
        // the deterministic trace quadrature.
        let cov = nalgebra::DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0, 1.3]));
        let gmm = GmmSpec::single_gaussian(cov).unwrap();
        let flow = flow_with(gmm, 12, Integrator::Euler);
        let mut counter = PassCounter::new();
        let z = DVector::from_vec(vec![0.3, -0.9, 0.4]);
        let traj = flow.push_forward(&z, &mut counter).unwrap();
        let a = hutchinson_entropy(&flow, &traj, 1, ProbeDist::Rademacher, 1, &mut counter)
            .unwrap()
            .delta_s;
        let b = hutchinson_entropy(&flow, &traj, 1, ProbeDist::Rademacher, 2, &mut counter)
            .unwrap()
            .delta_s;
        // Off-diagonal cancellation is algebraically exact; floating point
        // leaves sign-pattern-dependent residue at the last-bit level.
        assert!(
            (a - b).abs() < 1e-12,
            "zero-variance case: seeds must agree to rounding, got {a} vs {b}"
        );
        // Independent deterministic trace quadrature.
        let times = flow.grid().times();
        let mut expect = 0.0;
        for i in 0..12 {
            let j = flow.velocity_jacobian_node(&traj.states()[i], i);
            expect += (times[i + 1] - times[i]) * j.trace();
        }
        assert!(
            (a - expect).abs() < 1e-12,
            "rademacher estimate {a} vs deterministic trace quadrature {expect}"
        );
    }

    #[test]
    fn estimator_stats_reports_passes_and_moments() {
        let flow = flow_with(benchmark_gmm(3, 2).unwrap(), 4, Integrator::Heun);
        let z = DVector::from_vec(vec![0.5, 0.1, -0.2]);
        let cfg = EstimatorConfig::fd(EstimatorKind::FpPlusPlus);
        let stats = estimator_stats(&flow, &cfg, &z, 64, 10).unwrap();
        assert_eq!(stats.n, 64);
        assert_eq!(stats.delta_s.len(), 64);
        // 1 generation pass + 2 per draw.
        assert_eq!(stats.total_passes, 1 + 2 * 64);
        assert!(stats.var_delta_s >= 0.0);
        assert!(stats.mean_exp > 0.0);
        let repeat = estimator_stats(&flow, &cfg, &z, 64, 10).unwrap();
        assert_eq!(stats.delta_s, repeat.delta_s, "stats runs are seed-reproducible");
    }

    #[test]
    fn delta_halving_gap_shrinks_quadratically() {
        let flow = flow_with(benchmark_gmm(4, 3).unwrap(), 8, Integrator::Heun);
        let z = DVector::from_vec(vec![0.4, -0.3, 0.8, 0.1]);
        let traj = flow.push_forward(&z, &mut PassCounter::new()).unwrap();
        let at = |delta: f64| {
            let cfg =
                EstimatorConfig::new(EstimatorKind::FpPlusPlus, TangentMode::FiniteDifference, delta)
                    .unwrap();
            delta_halving_gap(&flow, &traj, &cfg, 7).unwrap()
        };
        let coarse = at(1e-2);
        let fine = at(5e-3);
        assert!(coarse > 0.0 && fine > 0.0);
        // Central differences: gap(delta) ~ c delta^2, so halving divides by ~4.
        let ratio = coarse / fine;
        assert!((2.5..6.0).contains(&ratio), "halving ratio {ratio} not ~4");
        assert!(at(DEFAULT_DELTA) < 1e-6, "default delta gap should be negligible");

        let exact = EstimatorConfig::exact(EstimatorKind::FpPlusPlus);
        assert!(delta_halving_gap(&flow, &traj, &exact, 7).is_err());
    }
}
