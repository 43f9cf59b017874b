//! Annealed sequential Monte Carlo between the latent prior and the
//! Boltzmann target, with the flow as the transport.
//!
//! A particle is a latent point `z` with cached image `x = f(z)` and a
//! generalized-work record
//!
//! ```text
//! W(z) = u_X(f(z)) - u_Z(z) - dS(z),
//! ```
//!
//! where `u_X` is the target energy, `u_Z(z) = ||z||^2/2 + (D/2) log 2pi`
//! the latent prior energy, and `dS` the entropy estimate for the flow at
//! `z`. The annealed family interpolates geometrically,
//! `pi_beta(z) = exp(-u_Z(z) - beta W(z))`, from the prior (`beta = 0`) to
//! the pushforward target (`beta = 1`).
//!
//! Each level runs, in order: MCMC propagation at the arrival temperature
//! `beta_{n-1}` (so the kernel leaves the distribution the particles
//! currently follow invariant), the incremental reweighting
//! `omega *= exp(-(beta_n - beta_{n-1}) W)`, and a conditional resample when
//! the effective sample size drops below the threshold. Perturbation noise
//! is frozen per particle (`draw_seed`) so MCMC targets a fixed
//! noise-conditional density within a level, and redrawn for everyone after
//! each resampling event; redrawing changes only `delta_s`, never the
//! `u_x`/`u_z` parts, since `f(z)` is deterministic.
//!
//! Every per-particle random stream is keyed by (master seed, role, level,
//! particle), and cross-particle reductions are exact integer or fixed-order
//! float sums, so a run is bit-reproducible at any worker count.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::Error;
use crate::estimators::{estimate_entropy, EstimatorConfig};
use crate::flow::{DiffusionSchedule, Flow, Integrator, PassCounter, TimeGrid};
use crate::gmm::{GmmSpec, LN_2PI};
use crate::seed;
use crate::Result;

const TAG_INIT: u64 = 0x01;
const TAG_DRAW: u64 = 0x02;
const TAG_MCMC: u64 = 0x03;
const TAG_RESAMPLE: u64 = 0x04;

/// Tempering ladder plus the per-level kernel and resampling knobs that
/// belong to the schedule rather than the kernel shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingSchedule {
    betas: Vec<f64>,
    pub mcmc_steps_per_level: usize,
    pub ess_threshold_fraction: f64,
}

impl AnnealingSchedule {
    pub fn new(
        betas: Vec<f64>,
        mcmc_steps_per_level: usize,
        ess_threshold_fraction: f64,
    ) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("annealing schedule needs at least two beta values"));
        }
        if betas[0] != 0.0 {
            return Err(Error::invalid(format!("beta_0 must be exactly 0, got {}", betas[0])));
        }
        if *betas.last().unwrap() != 1.0 {
            return Err(Error::invalid(format!(
                "beta_N must be exactly 1, got {}",
                betas.last().unwrap()
            )));
        }
        if betas.windows(2).any(|w| !(w[1] > w[0])) || betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("betas must be finite and strictly ascending"));
        }
        if mcmc_steps_per_level == 0 {
            return Err(Error::invalid("mcmc_steps_per_level must be positive"));
        }
        if !(ess_threshold_fraction > 0.0 && ess_threshold_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "ess_threshold_fraction {ess_threshold_fraction} must lie in (0, 1]"
            )));
        }
        Ok(AnnealingSchedule { betas, mcmc_steps_per_level, ess_threshold_fraction })
    }

    /// Linear ladder `beta_n = n/N` with exact endpoints.
    pub fn uniform(
        levels: usize,
        mcmc_steps_per_level: usize,
        ess_threshold_fraction: f64,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("need at least one annealing level"));
        }
        let betas = (0..=levels).map(|n| n as f64 / levels as f64).collect();
        Self::new(betas, mcmc_steps_per_level, ess_threshold_fraction)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of levels N (transitions, one fewer than ladder entries).
    pub fn levels(&self) -> usize {
        self.betas.len() - 1
    }
}

/// Decomposed generalized work for one particle. `w` is redundant with the
/// parts and kept so the decomposition is checkable after the fact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkRecord {
    pub u_x: f64,
    pub u_z: f64,
    pub delta_s: f64,
    pub w: f64,
}

impl WorkRecord {
    pub fn new(u_x: f64, u_z: f64, delta_s: f64) -> Result<Self> {
        let w = u_x - u_z - delta_s;
        let rec = WorkRecord { u_x, u_z, delta_s, w };
        rec.check()?;
        Ok(rec)
    }

    /// All parts finite and `w` consistent with them within 1e-12.
    pub fn check(&self) -> Result<()> {
        for (name, v) in
            [("u_x", self.u_x), ("u_z", self.u_z), ("delta_s", self.delta_s), ("w", self.w)]
        {
            if !v.is_finite() {
                return Err(Error::numerical(format!("work record has non-finite {name}: {v}")));
            }
        }
        let resid = (self.w - (self.u_x - self.u_z - self.delta_s)).abs();
        let scale = 1.0_f64.max(self.w.abs());
        if resid > 1e-12 * scale {
            return Err(Error::numerical(format!("work record inconsistent by {resid}")));
        }
        Ok(())
    }
}

/// One SMC particle. `log_weight` is kept normalized across the ensemble
/// after every update. `ancestor` is the root index at initialization and is
/// only ever copied by resampling, never reassigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub z: DVector<f64>,
    pub x: DVector<f64>,
    pub work: WorkRecord,
    pub log_weight: f64,
    pub ancestor: usize,
    pub draw_seed: u64,
}

/// Offspring selection rule for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    /// One uniform shift, stratified positions. Lower variance; on exactly
    /// uniform weights every particle gets exactly one offspring.
    Systematic,
    Multinomial,
}

/// Block random-walk Metropolis kernel shape. The proposal perturbs a
/// contiguous (cyclically wrapped) coordinate block of `block_size` latent
/// coordinates with i.i.d. N(0, sigma_prop^2) increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcKernel {
    pub block_size: usize,
    pub sigma_prop: f64,
}

impl McmcKernel {
    /// Default block size `max(1, D/10)` and step 0.1.
    pub fn default_for_dim(dim: usize) -> Self {
        McmcKernel { block_size: (dim / 10).max(1), sigma_prop: 0.1 }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.block_size == 0 || self.block_size > dim {
            return Err(Error::invalid(format!(
                "block size {} must lie in 1..={dim}",
                self.block_size
            )));
        }
        if !(self.sigma_prop > 0.0) || !self.sigma_prop.is_finite() {
            return Err(Error::invalid("sigma_prop must be positive and finite"));
        }
        Ok(())
    }
}

/// Full sampler configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub schedule: AnnealingSchedule,
    pub estimator: EstimatorConfig,
    pub kernel: McmcKernel,
    pub resample: ResampleMethod,
    pub master_seed: u64,
}

/// Per-level diagnostic row. `ess` and `resampled` describe the state right
/// after the weight update; `distinct_ancestors` is counted after the
/// conditional resample so the row reflects what the next level starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    pub level: usize,
    pub beta: f64,
    pub ess: f64,
    pub resampled: bool,
    pub acceptance_rate: f64,
    /// Weighted mean target energy `sum_i omega_i u_x_i` after the update.
    pub mean_energy: f64,
    pub distinct_ancestors: usize,
    pub proposal_failures: u64,
}

/// Trace of a whole run.
#[derive(Debug, Clone, Default)]
pub struct SmcDiagnostics {
    pub levels: Vec<LevelRecord>,
    pub counter: PassCounter,
    /// Whole ODE passes consumed by the run, generation included.
    pub total_passes: u64,
    pub warnings: Vec<String>,
}

/// A completed run: the final weighted ensemble at `beta = 1` plus the trace.
#[derive(Debug, Clone)]
pub struct SmcRun {
    pub particles: Vec<Particle>,
    pub diagnostics: SmcDiagnostics,
}

/// The sampling problem: a flow proposal and the target density it is
/// annealed against. Usually the target is the flow's own mixture; keeping
/// the two separate admits exactly-solvable systems where the target is the
/// true pushforward of the prior under the discretized map.
pub struct SmcSystem {
    flow: Flow,
    target: GmmSpec,
}

impl SmcSystem {
    /// The ordinary setup: anneal toward the mixture the flow was built for.
    pub fn self_targeted(flow: Flow) -> Self {
        let target = flow.gmm().clone();
        SmcSystem { flow, target }
    }

    /// Explicit target, dimension-checked against the flow.
    pub fn with_target(flow: Flow, target: GmmSpec) -> Result<Self> {
        if target.dim() != flow.dim() {
            return Err(Error::invalid(format!(
                "target dimension {} does not match flow dimension {}",
                target.dim(),
                flow.dim()
            )));
        }
        Ok(SmcSystem { flow, target })
    }

    /// Exactly-solvable system: an isotropic Gaussian anchor makes every
    /// velocity field linear, so the discretized generative map is the exact
    /// scalar multiple `m = prod_k a_k` of the identity, with `a_k` the
    /// integrator's one-step amplification. Setting the target to
    /// `N(0, m^2 I)`, the true pushforward of the latent prior, makes
    /// `W = 0` identically: perfect transport for the discrete map itself,
    /// not just in the continuum limit.
    pub fn perfect_transport(
        dim: usize,
        anchor_std: f64,
        sched: DiffusionSchedule,
        grid: TimeGrid,
        integrator: Integrator,
    ) -> Result<Self> {
        if !(anchor_std > 0.0) || !anchor_std.is_finite() {
            return Err(Error::invalid("anchor_std must be positive and finite"));
        }
        let c2 = anchor_std * anchor_std;
        // g(t) such that v(x, t) = g(t) x for the diffused isotropic anchor.
        let g = |t: f64| {
            let a = sched.alpha(t);
            let s = sched.sigma(t);
            let var = a * a * c2 + s * s;
            -0.5 * sched.beta(t) * (1.0 - 1.0 / var)
        };
        let times = grid.times().to_vec();
        let steps = grid.steps();
        let mut m = 1.0_f64;
        // Generative order (latent side first); scalars commute so the
        // order only matters for matching the flow's rounding, not the value.
        for k in (1..=steps).rev() {
            let from = steps - k;
            let to = steps - k + 1;
            let h = times[to] - times[from];
            let gf = g(times[from]);
            let a_k = match integrator {
                Integrator::Euler => 1.0 + h * gf,
                Integrator::Heun => {
                    let gt = g(times[to]);
                    1.0 + 0.5 * h * (gf + gt * (1.0 + h * gf))
                }
            };
            m *= a_k;
        }
        if !(m != 0.0) || !m.is_finite() {
            return Err(Error::numerical(format!("degenerate transport scalar m = {m}")));
        }
        let anchor = GmmSpec::single_gaussian(DMatrix::identity(dim, dim) * c2)?;
        let flow = Flow::new(anchor, sched, grid, integrator)?;
        let target = GmmSpec::single_gaussian(DMatrix::identity(dim, dim) * (m * m))?;
        Ok(SmcSystem { flow, target })
    }

    pub fn flow(&self) -> &Flow {
        &self.flow
    }

    pub fn target(&self) -> &GmmSpec {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Target energy `u_X(x) = -log p(x)` (normalized density).
    pub fn u_x(&self, x: &DVector<f64>) -> f64 {
        -self.target.log_density(x)
    }

    /// Latent prior energy `u_Z(z) = ||z||^2/2 + (D/2) log 2pi`.
    pub fn u_z(z: &DVector<f64>) -> f64 {
        0.5 * z.norm_squared() + 0.5 * z.len() as f64 * LN_2PI
    }

    /// Pushes `z` through the flow, runs the entropy estimator with the
    /// given frozen noise seed, and assembles the work record. Returns the
    /// cached image `x = f(z)` alongside.
    pub fn generalized_work(
        &self,
        z: &DVector<f64>,
        estimator: &EstimatorConfig,
        draw_seed: u64,
        counter: &mut PassCounter,
    ) -> Result<(WorkRecord, DVector<f64>)> {
        let traj = self.flow.push_forward(z, counter)?;
        let est = estimate_entropy(&self.flow, &traj, estimator, draw_seed, counter)?;
        let x = traj.sample().clone_owned();
        let work = WorkRecord::new(self.u_x(&x), Self::u_z(z), est.delta_s)?;
        Ok((work, x))
    }
}

/// Annealed log-density `log pi_beta(z) = -u_Z(z) - beta W(z)`, the
/// geometric bridge restated through the work record. At `beta = 0` this is
/// the prior; at `beta = 1` it equals `-u_X(f(z)) + dS(z)`.
pub fn log_target_density_annealed(beta: f64, work: &WorkRecord) -> f64 {
    -work.u_z - beta * work.w
}

/// Normalizes log-weights in place (log-sum-exp). The error carries the
/// level for run context.
fn normalize_log_weights(log_weights: &mut [f64], level: usize) -> Result<()> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateEnsemble {
            level,
            detail: format!("max log-weight {max} after update"),
        });
    }
    let sum: f64 = log_weights.iter().map(|lw| (lw - max).exp()).sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::DegenerateEnsemble {
            level,
            detail: format!("log-weight normalizer sum {sum}"),
        });
    }
    let log_z = max + sum.ln();
    for lw in log_weights.iter_mut() {
        *lw -= log_z;
    }
    Ok(())
}

/// Incremental reweighting `log omega += -(beta_next - beta_prev) W`,
/// renormalized in log space.
pub fn weight_update(
    particles: &mut [Particle],
    beta_prev: f64,
    beta_next: f64,
    level: usize,
) -> Result<()> {
    if beta_next < beta_prev {
        return Err(Error::invalid(format!(
            "weight update must not cool: {beta_prev} -> {beta_next}"
        )));
    }
    let delta = beta_next - beta_prev;
    let mut lw: Vec<f64> = particles.iter().map(|p| p.log_weight - delta * p.work.w).collect();
    normalize_log_weights(&mut lw, level)?;
    for (p, w) in particles.iter_mut().zip(lw) {
        p.log_weight = w;
    }
    Ok(())
}

/// The ensemble's normalized weights (log-weights are kept normalized, so
/// this is just the exponential).
pub fn normalized_weights(particles: &[Particle]) -> Vec<f64> {
    particles.iter().map(|p| p.log_weight.exp()).collect()
}

/// Effective sample size `1 / sum omega^2` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    debug_assert!(
        (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
        "ess expects normalized weights"
    );
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    method: ResampleMethod,
    rng: &mut R,
) -> Vec<usize> {
    let m = weights.len();
    let mut idx = Vec::with_capacity(m);
    match method {
        ResampleMethod::Systematic => {
            let u0: f64 = rng.gen();
            let mut cum = 0.0;
            let mut j = 0usize;
            for (k, w) in weights.iter().enumerate() {
                cum += w;
                while j < m && (j as f64 + u0) / (m as f64) < cum {
                    idx.push(k);
                    j += 1;
                }
            }
            // Float shortfall in the cumulative sum can strand trailing
            // positions; they belong to the last positive-weight index.
            while idx.len() < m {
                idx.push(m - 1);
            }
        }
        ResampleMethod::Multinomial => {
            let mut cum = Vec::with_capacity(m);
            let mut acc = 0.0;
            for w in weights {
                acc += w;
                cum.push(acc);
            }
            let total = *cum.last().unwrap();
            for _ in 0..m {
                let u: f64 = rng.gen::<f64>() * total;
                let k = cum.partition_point(|c| *c <= u).min(m - 1);
                idx.push(k);
            }
        }
    }
    idx
}

/// Draws M offspring per the method, resets weights to uniform. Ancestor ids
/// ride along with the clones and are never reassigned.
pub fn resample<R: Rng + ?Sized>(
    particles: &mut Vec<Particle>,
    method: ResampleMethod,
    rng: &mut R,
) {
    let weights = normalized_weights(particles);
    let idx = resample_indices(&weights, method, rng);
    let uniform = -(particles.len() as f64).ln();
    let new: Vec<Particle> = idx
        .into_iter()
        .map(|k| {
            let mut p = particles[k].clone();
            p.log_weight = uniform;
            p
        })
        .collect();
    *particles = new;
}

/// Number of distinct root ancestors with surviving descendants.
pub fn distinct_ancestors(particles: &[Particle]) -> usize {
    particles.iter().map(|p| p.ancestor).collect::<HashSet<_>>().len()
}

/// Outcome of one level of MCMC propagation.
#[derive(Debug, Clone, Copy)]
pub struct PropagateStats {
    pub acceptance_rate: f64,
    pub proposal_failures: u64,
    pub counter: PassCounter,
}

/// `mcmc_steps` block random-walk Metropolis updates per particle, all
/// targeting the annealed density at the fixed `beta`, with each particle's
/// frozen `draw_seed` used for every work recomputation. Estimator failures
/// reject the proposal and are counted rather than aborting the level.
/// Particles run concurrently on streams keyed by (master seed, level,
/// particle); tallies are exact integers, so the reduction order is
/// irrelevant and results are reproducible at any worker count.
pub fn mcmc_propagate(
    system: &SmcSystem,
    particles: &mut [Particle],
    beta: f64,
    mcmc_steps: usize,
    kernel: &McmcKernel,
    estimator: &EstimatorConfig,
    master_seed: u64,
    level: usize,
) -> Result<PropagateStats> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} out of [0, 1]")));
    }
    let dim = system.dim();
    kernel.validate(dim)?;
    let n = particles.len();
    let results: Vec<Result<(u64, u64, PassCounter)>> = particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = seed::stream(master_seed, &[TAG_MCMC, level as u64, i as u64]);
            let mut local = PassCounter::new();
            let mut accepted = 0u64;
            let mut failures = 0u64;
            let mut z_prop = p.z.clone_owned();
            for _ in 0..mcmc_steps {
                z_prop.copy_from(&p.z);
                let start = rng.gen_range(0..dim);
                for j in 0..kernel.block_size {
                    let c = (start + j) % dim;
                    z_prop[c] += kernel.sigma_prop * rng.sample::<f64, _>(StandardNormal);
                }
                match system.generalized_work(&z_prop, estimator, p.draw_seed, &mut local) {
                    Ok((work, x)) => {
                        let log_acc = log_target_density_annealed(beta, &work)
                            - log_target_density_annealed(beta, &p.work);
                        let u: f64 = rng.gen();
                        if u.ln() < log_acc {
                            p.z.copy_from(&z_prop);
                            p.x = x;
                            p.work = work;
                            accepted += 1;
                        }
                    }
                    Err(_) => failures += 1,
                }
            }
            Ok((accepted, failures, local))
        })
        .collect();
    let mut accepted = 0u64;
    let mut failures = 0u64;
    let mut counter = PassCounter::new();
    for r in results {
        let (a, f, c) = r?;
        accepted += a;
        failures += f;
        counter.merge(&c);
    }
    let total = (n * mcmc_steps) as f64;
    Ok(PropagateStats {
        acceptance_rate: if total > 0.0 { accepted as f64 / total } else { 1.0 },
        proposal_failures: failures,
        counter,
    })
}

fn refresh_draws(
    system: &SmcSystem,
    particles: &mut [Particle],
    estimator: &EstimatorConfig,
    master_seed: u64,
    epoch: u64,
) -> Result<PassCounter> {
    let results: Vec<Result<PassCounter>> = particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let mut local = PassCounter::new();
            p.draw_seed = seed::chain(master_seed, &[TAG_DRAW, epoch, i as u64]);
            let (work, x) = system.generalized_work(&p.z, estimator, p.draw_seed, &mut local)?;
            p.work = work;
            p.x = x;
            Ok(local)
        })
        .collect();
    let mut counter = PassCounter::new();
    for r in results {
        counter.merge(&r?);
    }
    Ok(counter)
}

/// Full annealed run: initialize from the prior, then per level propagate,
/// reweight, and conditionally resample; returns the final weighted ensemble
/// and the per-level trace. Deterministic given `config.master_seed`.
pub fn run_smc(system: &SmcSystem, config: &SmcConfig) -> Result<SmcRun> {
    let m = config.n_particles;
    if m < 2 {
        return Err(Error::invalid("need at least two particles"));
    }
    let dim = system.dim();
    config.kernel.validate(dim)?;
    let master = config.master_seed;
    let uniform_lw = -(m as f64).ln();

    let init: Vec<Result<(Particle, PassCounter)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(master, &[TAG_INIT, i as u64]);
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw_seed = seed::chain(master, &[TAG_DRAW, 0, i as u64]);
            let mut local = PassCounter::new();
            let (work, x) = system.generalized_work(&z, &config.estimator, draw_seed, &mut local)?;
            Ok((
                Particle { z, x, work, log_weight: uniform_lw, ancestor: i, draw_seed },
                local,
            ))
        })
        .collect();
    let mut particles = Vec::with_capacity(m);
    let mut counter = PassCounter::new();
    for r in init {
        let (p, c) = r?;
        particles.push(p);
        counter.merge(&c);
    }

    let mut diagnostics = SmcDiagnostics::default();
    let betas = config.schedule.betas();
    for n in 1..=config.schedule.levels() {
        let beta_prev = betas[n - 1];
        let beta = betas[n];

        let stats = mcmc_propagate(
            system,
            &mut particles,
            beta_prev,
            config.schedule.mcmc_steps_per_level,
            &config.kernel,
            &config.estimator,
            master,
            n,
        )?;
        counter.merge(&stats.counter);
        if stats.proposal_failures > 0 {
            diagnostics.warnings.push(format!(
                "level {n}: {} proposal evaluations failed and were rejected",
                stats.proposal_failures
            ));
        }

        weight_update(&mut particles, beta_prev, beta, n)?;
        let weights = normalized_weights(&particles);
        let level_ess = ess(&weights);
        let mean_energy =
            particles.iter().zip(&weights).map(|(p, w)| w * p.work.u_x).sum::<f64>();

        let resampled = level_ess < config.schedule.ess_threshold_fraction * m as f64;
        if resampled {
            let mut rng = seed::stream(master, &[TAG_RESAMPLE, n as u64]);
            resample(&mut particles, config.resample, &mut rng);
            counter.merge(&refresh_draws(
                system,
                &mut particles,
                &config.estimator,
                master,
                n as u64,
            )?);
        }

        diagnostics.levels.push(LevelRecord {
            level: n,
            beta,
            ess: level_ess,
            resampled,
            acceptance_rate: stats.acceptance_rate,
            mean_energy,
            distinct_ancestors: distinct_ancestors(&particles),
            proposal_failures: stats.proposal_failures,
        });
    }

    diagnostics.counter = counter;
    diagnostics.total_passes = counter.passes(system.flow.grid().steps());
    Ok(SmcRun { particles, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::EstimatorKind;
    use crate::flow::{DiffusionSchedule, TimeGrid};

    fn stationary_system(dim: usize, steps: usize) -> SmcSystem {
        let sched = DiffusionSchedule::default_vp();
        let grid = TimeGrid::uniform(sched.t_max, steps).unwrap();
        let flow = Flow::new(GmmSpec::standard_normal(dim), sched, grid, Integrator::Heun).unwrap();
        SmcSystem::self_targeted(flow)
    }

    fn particle_with(w: f64, log_weight: f64, ancestor: usize) -> Particle {
        Particle {
            z: DVector::zeros(1),
            x: DVector::zeros(1),
            work: WorkRecord::new(w, 0.0, 0.0).unwrap(),
            log_weight,
            ancestor,
            draw_seed: 0,
        }
    }

    #[test]
    fn schedule_validation_and_uniform_ladder() {
        let s = AnnealingSchedule::uniform(4, 2, 0.5).unwrap();
        assert_eq!(s.levels(), 4);
        assert_eq!(s.betas()[0], 0.0);
        assert_eq!(*s.betas().last().unwrap(), 1.0);
        assert!(AnnealingSchedule::new(vec![0.0, 0.5], 1, 0.5).is_err(), "must end at 1");
        assert!(AnnealingSchedule::new(vec![0.1, 1.0], 1, 0.5).is_err(), "must start at 0");
        assert!(AnnealingSchedule::new(vec![0.0, 0.6, 0.4, 1.0], 1, 0.5).is_err());
        assert!(AnnealingSchedule::new(vec![0.0, 1.0], 0, 0.5).is_err(), "zero mcmc steps");
        assert!(AnnealingSchedule::new(vec![0.0, 1.0], 1, 0.0).is_err(), "zero threshold");
    }

    #[test]
    fn work_record_consistency_is_enforced() {
        let rec = WorkRecord::new(3.0, 1.0, 0.5).unwrap();
        assert_eq!(rec.w, 1.5);
        rec.check().unwrap();
        assert!(WorkRecord::new(f64::INFINITY, 0.0, 0.0).is_err());
        let bad = WorkRecord { w: 0.0, ..rec };
        assert!(bad.check().is_err());
    }

    #[test]
    fn all_underflowed_weights_are_degenerate_with_level_context() {
        let mut lw = vec![f64::NEG_INFINITY; 3];
        match normalize_log_weights(&mut lw, 7).unwrap_err() {
            Error::DegenerateEnsemble { level, .. } => assert_eq!(level, 7),
            other => panic!("expected degenerate ensemble, got {other}"),
        }
    }

    #[test]
    fn annealed_density_endpoints() {
        let work = WorkRecord::new(5.0, 2.0, 0.5).unwrap();
        assert_eq!(log_target_density_annealed(0.0, &work), -2.0);
        let at_one = log_target_density_annealed(1.0, &work);
        assert!((at_one - (-work.u_x + work.delta_s)).abs() < 1e-12);
        // More annealing never raises the density of a positive-work point.
        assert!(log_target_density_annealed(0.7, &work) < log_target_density_annealed(0.3, &work));
    }

    #[test]
    fn weight_update_examples() {
        // Zero increment leaves weights alone.
        let mut ps = vec![particle_with(1.0, (0.7f64).ln(), 0), particle_with(9.0, (0.3f64).ln(), 1)];
        weight_update(&mut ps, 0.4, 0.4, 1).unwrap();
        assert!((ps[0].log_weight.exp() - 0.7).abs() < 1e-12);

        // Common work cancels under normalization.
        let mut ps = vec![particle_with(7.0, (0.7f64).ln(), 0), particle_with(7.0, (0.3f64).ln(), 1)];
        weight_update(&mut ps, 0.0, 0.5, 1).unwrap();
        assert!((ps[0].log_weight.exp() - 0.7).abs() < 1e-12);

        // W = (0, log 4), uniform start, delta beta one half -> (2/3, 1/3).
        let lw = -(2f64).ln();
        let mut ps =
            vec![particle_with(0.0, lw, 0), particle_with((4f64).ln(), lw, 1)];
        weight_update(&mut ps, 0.25, 0.75, 1).unwrap();
        assert!((ps[0].log_weight.exp() - 2.0 / 3.0).abs() < 1e-12);
        assert!((ps[1].log_weight.exp() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ess_examples() {
        let m = 8;
        let uniform = vec![1.0 / m as f64; m];
        assert!((ess(&uniform) - m as f64).abs() < 1e-9);
        let mut point = vec![0.0; m];
        point[3] = 1.0;
        assert_eq!(ess(&point), 1.0);
        assert!((ess(&[0.5, 0.5, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_resample_on_uniform_weights_is_identity() {
        let m = 16;
        let lw = -(m as f64).ln();
        let mut ps: Vec<Particle> = (0..m).map(|i| particle_with(i as f64, lw, i)).collect();
        let mut rng = seed::rng_from(5);
        resample(&mut ps, ResampleMethod::Systematic, &mut rng);
        let ancestors: Vec<usize> = ps.iter().map(|p| p.ancestor).collect();
        assert_eq!(ancestors, (0..m).collect::<Vec<_>>(), "every parent exactly once, in order");
        assert!(ps.iter().all(|p| (p.log_weight - lw).abs() < 1e-15));
    }

    #[test]
    fn degenerate_weights_collapse_to_single_ancestor() {
        let m = 10;
        let mut ps: Vec<Particle> =
            (0..m).map(|i| particle_with(0.0, f64::NEG_INFINITY, i)).collect();
        ps[0].log_weight = 0.0;
        assert_eq!(distinct_ancestors(&ps), m, "before resampling all roots are present");
        for method in [ResampleMethod::Systematic, ResampleMethod::Multinomial] {
            let mut clone = ps.clone();
            let mut rng = seed::rng_from(6);
            resample(&mut clone, method, &mut rng);
            assert!(clone.iter().all(|p| p.ancestor == 0));
            assert_eq!(distinct_ancestors(&clone), 1);
        }
    }

    #[test]
    fn multinomial_counts_match_binomial_moments() {
        let weights = [0.5, 0.3, 0.15, 0.05];
        let m = weights.len();
        let trials = 10_000usize;
        let mut rng = seed::rng_from(7);
        let mut counts = vec![0u64; m];
        for _ in 0..trials {
            for k in resample_indices(&weights, ResampleMethod::Multinomial, &mut rng) {
                counts[k] += 1;
            }
        }
        let draws = (trials * m) as f64;
        for j in 0..m {
            let p = weights[j];
            let se = (draws * p * (1.0 - p)).sqrt();
            let dev = (counts[j] as f64 - draws * p).abs();
            assert!(dev <= 4.0 * se, "component {j}: deviation {dev} exceeds 4 se {se}");
        }
    }

    #[test]
    fn frozen_vs_redrawn_seed_changes_only_delta_s() {
        let system = SmcSystem::self_targeted({
            let sched = DiffusionSchedule::default_vp();
            let grid = TimeGrid::uniform(sched.t_max, 6).unwrap();
            Flow::new(crate::gmm::benchmark_gmm(4, 3).unwrap(), sched, grid, Integrator::Heun)
                .unwrap()
        });
        let z = DVector::from_vec(vec![0.4, -0.2, 0.9, 0.1]);
        let cfg = EstimatorConfig::fd(EstimatorKind::FpPlusPlus);
        let mut c = PassCounter::new();
        let (w1, x1) = system.generalized_work(&z, &cfg, 100, &mut c).unwrap();
        let (w2, x2) = system.generalized_work(&z, &cfg, 200, &mut c).unwrap();
        assert_eq!(x1, x2, "the image f(z) is independent of estimator noise");
        assert_eq!(w1.u_x.to_bits(), w2.u_x.to_bits());
        assert_eq!(w1.u_z.to_bits(), w2.u_z.to_bits());
        assert_ne!(w1.delta_s, w2.delta_s);
    }

    #[test]
    fn stationary_run_keeps_uniform_weights_and_never_resamples() {
        let system = stationary_system(3, 4);
        let config = SmcConfig {
            n_particles: 32,
            schedule: AnnealingSchedule::uniform(6, 2, 0.5).unwrap(),
            estimator: EstimatorConfig::fd(EstimatorKind::FpPlusPlus),
            kernel: McmcKernel { block_size: 1, sigma_prop: 0.2 },
            resample: ResampleMethod::Systematic,
            master_seed: 11,
        };
        let run = run_smc(&system, &config).unwrap();
        assert_eq!(run.diagnostics.levels.len(), 6);
        for rec in &run.diagnostics.levels {
            assert!((rec.ess - 32.0).abs() < 1e-6, "W = 0 keeps ESS at M, got {}", rec.ess);
            assert!(!rec.resampled);
            assert_eq!(rec.distinct_ancestors, 32);
            assert!(rec.acceptance_rate > 0.5, "prior-target kernel should accept often");
        }
        let lw = -(32f64).ln();
        for p in &run.particles {
            assert!((p.log_weight - lw).abs() < 1e-9);
            assert!(p.work.w.abs() < 1e-9, "stationary flow has zero work, got {}", p.work.w);
        }
    }

    #[test]
    fn perfect_transport_has_identically_zero_work() {
        let sched = DiffusionSchedule::default_vp();
        let grid = TimeGrid::uniform(sched.t_max, 8).unwrap();
        let system =
            SmcSystem::perfect_transport(4, 2.0, sched, grid, Integrator::Heun).unwrap();
        let cfg = EstimatorConfig::fd(EstimatorKind::BruteForce);
        let mut counter = PassCounter::new();
        let mut rng = seed::rng_from(17);
        let mut works = Vec::new();
        for _ in 0..20 {
            let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (w, _) = system.generalized_work(&z, &cfg, 0, &mut counter).unwrap();
            works.push(w.w);
        }
        let spread =
            works.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - works.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-9, "perfect transport work should be constant, spread {spread}");
        assert!(works[0].abs() < 1e-9, "and zero, got {}", works[0]);
    }

    #[test]
    fn run_is_deterministic_for_a_fixed_master_seed() {
        let system = stationary_system(2, 3);
        let config = SmcConfig {
            n_particles: 8,
            schedule: AnnealingSchedule::uniform(3, 1, 0.5).unwrap(),
            estimator: EstimatorConfig::fd(EstimatorKind::FpPlusPlus),
            kernel: McmcKernel { block_size: 1, sigma_prop: 0.3 },
            resample: ResampleMethod::Systematic,
            master_seed: 21,
        };
        let a = run_smc(&system, &config).unwrap();
        let b = run_smc(&system, &config).unwrap();
        for (pa, pb) in a.particles.iter().zip(&b.particles) {
            assert_eq!(pa.z, pb.z);
            assert_eq!(pa.log_weight.to_bits(), pb.log_weight.to_bits());
            assert_eq!(pa.draw_seed, pb.draw_seed);
        }
        assert_eq!(a.diagnostics.levels, b.diagnostics.levels);
        assert_eq!(a.diagnostics.total_passes, b.diagnostics.total_passes);
    }

    #[test]
    fn ancestors_never_increase_across_levels() {
        // Force resampling pressure with a deliberately coarse flow so the
        // work spread is real, then check lineage monotonicity.
        let sched = DiffusionSchedule::default_vp();
        let grid = TimeGrid::uniform(sched.t_max, 3).unwrap();
        let flow =
            Flow::new(crate::gmm::benchmark_gmm(3, 4).unwrap(), sched, grid, Integrator::Heun)
                .unwrap();
        let system = SmcSystem::self_targeted(flow);
        let config = SmcConfig {
            n_particles: 24,
            schedule: AnnealingSchedule::uniform(8, 1, 0.9).unwrap(),
            estimator: EstimatorConfig::fd(EstimatorKind::FpPlusPlus),
            kernel: McmcKernel { block_size: 1, sigma_prop: 0.2 },
            resample: ResampleMethod::Systematic,
            master_seed: 31,
        };
        let run = run_smc(&system, &config).unwrap();
        let counts: Vec<usize> =
            run.diagnostics.levels.iter().map(|r| r.distinct_ancestors).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "lineages only ever merge: {counts:?}");
        assert!(run.diagnostics.levels.iter().any(|r| r.resampled), "setup should resample");
    }
}
