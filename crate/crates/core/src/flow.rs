//! Discretized probability-flow ODE for the variance-preserving diffusion.
//!
//! Schedule: `beta(t) = beta_min + t (beta_max - beta_min) / t_max` on
//! `[0, t_max]`, with `B(t) = int_0^t beta`, `alpha_t = exp(-B(t)/2)`, and
//! `sigma_t = sqrt(1 - alpha_t^2)`. Time runs from `t = t_max` (latent, the
//! prior is standard normal to within `alpha(t_max)^2`) down to `t = 0`
//! (data). The velocity field is
//!
//! ```text
//! v(x, t) = -1/2 beta(t) [ x + grad log p_t(x) ]
//! ```
//!
//! where `p_t` is the diffused mixture marginal, available in closed form
//! (see [`crate::gmm`]), so the field and its Jacobian
//! `dv/dx = -1/2 beta(t) (I + H_t(x))` are exact.
//!
//! Discretization: a strictly decreasing grid `t_max = tau_0 > ... >
//! tau_T = 0`. Steps are indexed `k = 1..=T` with step 1 adjacent to data:
//! step `k` integrates from `tau_{T-k}` down to `tau_{T-k+1}` (generative
//! direction), and the one-step maps chain as `f = f_1 o f_2 o ... o f_T`.
//! A trajectory is stored latent-first: `[x_{T+1} = z, x_T, ..., x_1 = x]`.
//! The inverse map of a step reuses the same integrator with the time
//! endpoints swapped, so `f_k^{-1}` is itself a one-step scheme and is *not*
//! the algebraic inverse of `f_k`; the round-trip defect is the integrator's
//! truncation error.
//!
//! Every integration primitive records into a [`PassCounter`]. One "pass"
//! is one full traversal of the grid (T single-step integrations, T
//! single-step tangent propagations, or one divergence-probe sweep), which
//! is the cost unit the estimators are compared in.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::gmm::{GmmScratch, GmmSpec};
use crate::Result;

/// Linear variance-preserving beta schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
}

impl DiffusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_max: f64) -> Result<Self> {
        if !(beta_min > 0.0) || !(beta_max >= beta_min) || !(t_max > 0.0) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < beta_min <= beta_max and t_max > 0, got \
                 beta_min={beta_min} beta_max={beta_max} t_max={t_max}"
            )));
        }
        Ok(DiffusionSchedule { beta_min, beta_max, t_max })
    }

    /// Defaults: `beta_min = 0.1`, `beta_max = 20`, `t_max = 1`.
    pub fn default_vp() -> Self {
        DiffusionSchedule { beta_min: 0.1, beta_max: 20.0, t_max: 1.0 }
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max
    }

    /// `B(t) = int_0^t beta(s) ds`, in closed form.
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min) / self.t_max
    }

    /// Signal scale `alpha_t = exp(-B(t)/2)`; `alpha_0 = 1` exactly.
    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.beta_integral(t)).exp()
    }

    /// Noise scale `sigma_t = sqrt(1 - alpha_t^2)`; `sigma_0 = 0` exactly.
    pub fn sigma(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        (1.0 - a * a).max(0.0).sqrt()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.t_max {
            return Err(Error::invalid(format!("time {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// Strictly decreasing integration grid from `t_max` to `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals. Endpoints are exact:
    /// `times[0] == t_max`, `times[steps] == 0`.
    pub fn uniform(t_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        if !(t_max > 0.0) {
            return Err(Error::invalid(format!("t_max {t_max} must be positive")));
        }
        // Dividing before scaling keeps both endpoints exact.
        let times = (0..=steps)
            .map(|i| t_max * ((steps - i) as f64 / steps as f64))
            .collect();
        Ok(TimeGrid { times })
    }

    /// Explicit node times; must strictly decrease from `t_max` to exactly 0.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("grid needs at least two nodes"));
        }
        if *times.last().unwrap() != 0.0 {
            return Err(Error::invalid("grid must end at t = 0"));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid("grid times must strictly decrease"));
        }
        Ok(TimeGrid { times })
    }

    /// Number of steps T.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Node times, descending; `times()[i]` is the time of node `i`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Node indices `(hi, lo)` for step `k` in `1..=T`: the generative step
    /// `k` integrates from node `hi = T - k` down to `lo = T - k + 1`, so
    /// consecutive steps chain: `lo(k+1) == hi(k)`.
    pub fn step_nodes(&self, k: usize) -> Result<(usize, usize)> {
        let t = self.steps();
        if k == 0 || k > t {
            return Err(Error::invalid(format!("step index {k} outside 1..={t}")));
        }
        Ok((t - k, t - k + 1))
    }
}

/// One-step integration scheme. Heun is the explicit trapezoidal
/// predictor-corrector (two velocity evaluations per step); Euler is the
/// single-evaluation reference scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Heun,
    Euler,
}

/// Which one-step map a Jacobian refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `f_k`: from `x_{k+1}` (higher time) to `x_k` (lower time).
    Generative,
    /// `f_k^{-1}`: from `x_k` back up to `x_{k+1}`.
    Inverse,
}

/// Tally of integration work, in single-step units. `merge` is associative
/// and commutative, so per-task counters can be reduced in any order without
/// changing totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounter {
    /// Generative single-step state integrations.
    pub forward_steps: u64,
    /// Inverse single-step state integrations.
    pub inverse_steps: u64,
    /// Single-step tangent propagations (one per direction vector).
    pub tangent_steps: u64,
    /// Full-trajectory divergence probe sweeps.
    pub probe_sweeps: u64,
}

impl PassCounter {
    pub fn new() -> Self {
        PassCounter::default()
    }

    pub fn merge(&mut self, other: &PassCounter) {
        self.forward_steps += other.forward_steps;
        self.inverse_steps += other.inverse_steps;
        self.tangent_steps += other.tangent_steps;
        self.probe_sweeps += other.probe_sweeps;
    }

    /// Whole ODE passes given `steps` grid intervals per traversal.
    ///
    /// # Panics
    /// Panics if any step tally is not a multiple of `steps`; estimators
    /// only ever consume whole traversals.
    pub fn passes(&self, steps: usize) -> u64 {
        let t = steps as u64;
        assert!(t > 0, "grid must have steps");
        let state = self.forward_steps + self.inverse_steps + self.tangent_steps;
        assert!(
            state % t == 0,
            "step tally {state} is not a whole number of {t}-step passes"
        );
        state / t + self.probe_sweeps
    }
}

/// Scratch buffers for one-step integration; see [`GmmScratch`] for why the
/// hot path avoids allocation.
#[derive(Debug, Clone)]
pub struct FlowScratch {
    v1: DVector<f64>,
    v2: DVector<f64>,
    xp: DVector<f64>,
    a1: DVector<f64>,
    a2: DVector<f64>,
    wp: DVector<f64>,
    pub gmm: GmmScratch,
}

impl FlowScratch {
    pub fn for_flow(flow: &Flow) -> Self {
        let dim = flow.dim();
        FlowScratch {
            v1: DVector::zeros(dim),
            v2: DVector::zeros(dim),
            xp: DVector::zeros(dim),
            a1: DVector::zeros(dim),
            a2: DVector::zeros(dim),
            wp: DVector::zeros(dim),
            gmm: GmmScratch::new(dim, flow.gmm.n_components()),
        }
    }
}

struct NodeMarginal {
    beta: f64,
    marginal: GmmSpec,
}

/// A mixture target discretized on a time grid: the generative map
/// `f: z -> x` and everything needed to differentiate it.
pub struct Flow {
    gmm: GmmSpec,
    sched: DiffusionSchedule,
    grid: TimeGrid,
    integrator: Integrator,
    nodes: Vec<NodeMarginal>,
}

impl Flow {
    /// Precomputes the diffused marginal at every grid node so that velocity
    /// evaluations on the integration path never refactorize covariances.
    /// Node `T` (t = 0) holds the target itself, exactly.
    pub fn new(
        gmm: GmmSpec,
        sched: DiffusionSchedule,
        grid: TimeGrid,
        integrator: Integrator,
    ) -> Result<Self> {
        if (grid.times()[0] - sched.t_max).abs() > 1e-12 * sched.t_max {
            return Err(Error::invalid(format!(
                "grid starts at {} but the schedule runs to t_max = {}",
                grid.times()[0],
                sched.t_max
            )));
        }
        let nodes = grid
            .times()
            .iter()
            .map(|&t| {
                let marginal = gmm.diffuse(sched.alpha(t), sched.sigma(t))?;
                Ok(NodeMarginal { beta: sched.beta(t), marginal })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Flow { gmm, sched, grid, integrator, nodes })
    }

    pub fn dim(&self) -> usize {
        self.gmm.dim()
    }

    pub fn gmm(&self) -> &GmmSpec {
        &self.gmm
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    /// Diffused marginal cached at grid node `i`.
    pub fn node_marginal(&self, i: usize) -> &GmmSpec {
        &self.nodes[i].marginal
    }

    /// Probability-flow velocity at an arbitrary time in `[0, t_max]`. This
    /// recomputes the diffused marginal, so it is for inspection and tests;
    /// integration goes through the cached node path.
    pub fn velocity(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.sched.check_time(t)?;
        self.check_dim(x)?;
        let marginal = self.gmm.diffuse(self.sched.alpha(t), self.sched.sigma(t))?;
        let mut out = marginal.score(x);
        out += x;
        out *= -0.5 * self.sched.beta(t);
        Ok(out)
    }

    /// `v(x, tau_i)` against the cached node marginal, allocation-free.
    pub fn velocity_node(
        &self,
        x: &DVector<f64>,
        node: usize,
        out: &mut DVector<f64>,
        scratch: &mut GmmScratch,
    ) {
        let nm = &self.nodes[node];
        nm.marginal.score_into(x, out, scratch);
        *out += x;
        *out *= -0.5 * nm.beta;
    }

    /// Exact velocity Jacobian `dv/dx = -1/2 beta (I + H)` at node `i`.
    pub fn velocity_jacobian_node(&self, x: &DVector<f64>, node: usize) -> DMatrix<f64> {
        let nm = &self.nodes[node];
        let mut j = nm.marginal.score_jacobian(x);
        for i in 0..self.dim() {
            j[(i, i)] += 1.0;
        }
        j *= -0.5 * nm.beta;
        j
    }

    /// Exact velocity Jacobian-vector product at node `i`, allocation-free.
    pub(crate) fn velocity_jvp_node(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        node: usize,
        out: &mut DVector<f64>,
        scratch: &mut GmmScratch,
    ) {
        let nm = &self.nodes[node];
        nm.marginal.score_hessian_vp_into(x, w, out, scratch);
        *out += w;
        *out *= -0.5 * nm.beta;
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, flow is {}-dimensional",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_finite(x: &DVector<f64>, what: &str, k: usize) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite state after {what} step k={k}")));
        }
        Ok(())
    }

    /// Core one-step update between nodes `from` and `to` (their times may
    /// run in either direction), writing the new state into `out`.
    fn step_between(
        &self,
        x: &DVector<f64>,
        from: usize,
        to: usize,
        out: &mut DVector<f64>,
        scratch: &mut FlowScratch,
    ) {
        let h = self.grid.times()[to] - self.grid.times()[from];
        self.velocity_node(x, from, &mut scratch.v1, &mut scratch.gmm);
        match self.integrator {
            Integrator::Euler => {
                out.copy_from(x);
                out.axpy(h, &scratch.v1, 1.0);
            }
            Integrator::Heun => {
                scratch.xp.copy_from(x);
                scratch.xp.axpy(h, &scratch.v1, 1.0);
                self.velocity_node(&scratch.xp, to, &mut scratch.v2, &mut scratch.gmm);
                out.copy_from(x);
                out.axpy(0.5 * h, &scratch.v1, 1.0);
                out.axpy(0.5 * h, &scratch.v2, 1.0);
            }
        }
    }

    /// Joint state + tangent update between nodes, used by the exact-tangent
    /// estimator modes. The tangent `w` is advanced by the analytic Jacobian
    /// of this exact one-step map (not a finite-difference surrogate).
    fn step_tangent_between(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        from: usize,
        to: usize,
        x_out: &mut DVector<f64>,
        w_out: &mut DVector<f64>,
        scratch: &mut FlowScratch,
    ) {
        let h = self.grid.times()[to] - self.grid.times()[from];
        self.velocity_node(x, from, &mut scratch.v1, &mut scratch.gmm);
        self.velocity_jvp_node(x, w, from, &mut scratch.a1, &mut scratch.gmm);
        match self.integrator {
            Integrator::Euler => {
                x_out.copy_from(x);
                x_out.axpy(h, &scratch.v1, 1.0);
                w_out.copy_from(w);
                w_out.axpy(h, &scratch.a1, 1.0);
            }
            Integrator::Heun => {
                scratch.xp.copy_from(x);
                scratch.xp.axpy(h, &scratch.v1, 1.0);
                scratch.wp.copy_from(w);
                scratch.wp.axpy(h, &scratch.a1, 1.0);
                self.velocity_node(&scratch.xp, to, &mut scratch.v2, &mut scratch.gmm);
                self.velocity_jvp_node(&scratch.xp, &scratch.wp, to, &mut scratch.a2, &mut scratch.gmm);
                x_out.copy_from(x);
                x_out.axpy(0.5 * h, &scratch.v1, 1.0);
                x_out.axpy(0.5 * h, &scratch.v2, 1.0);
                w_out.copy_from(w);
                w_out.axpy(0.5 * h, &scratch.a1, 1.0);
                w_out.axpy(0.5 * h, &scratch.a2, 1.0);
            }
        }
    }

    /// Generative step `k`: maps `x_{k+1}` to `x_k`, counting one forward
    /// step. Step indices are 1-based; step 1 lands on the data side.
    pub fn step_generative(
        &self,
        x_next: &DVector<f64>,
        k: usize,
        counter: &mut PassCounter,
    ) -> Result<DVector<f64>> {
        self.check_dim(x_next)?;
        let (hi, lo) = self.grid.step_nodes(k)?;
        let mut out = DVector::zeros(self.dim());
        let mut scratch = FlowScratch::for_flow(self);
        self.step_between(x_next, hi, lo, &mut out, &mut scratch);
        counter.forward_steps += 1;
        Self::check_finite(&out, "generative", k)?;
        Ok(out)
    }

    /// Inverse step `k`: maps `x_k` back to `x_{k+1}` by integrating the
    /// same scheme from the lower time node up to the higher one.
    pub fn step_inverse(
        &self,
        x_k: &DVector<f64>,
        k: usize,
        counter: &mut PassCounter,
    ) -> Result<DVector<f64>> {
        self.check_dim(x_k)?;
        let (hi, lo) = self.grid.step_nodes(k)?;
        let mut out = DVector::zeros(self.dim());
        let mut scratch = FlowScratch::for_flow(self);
        self.step_between(x_k, lo, hi, &mut out, &mut scratch);
        counter.inverse_steps += 1;
        Self::check_finite(&out, "inverse", k)?;
        Ok(out)
    }

    /// Allocation-free inverse step for estimator inner loops.
    pub(crate) fn step_inverse_into(
        &self,
        x_k: &DVector<f64>,
        k: usize,
        out: &mut DVector<f64>,
        scratch: &mut FlowScratch,
        counter: &mut PassCounter,
    ) -> Result<()> {
        let (hi, lo) = self.grid.step_nodes(k)?;
        self.step_between(x_k, lo, hi, out, scratch);
        counter.inverse_steps += 1;
        Self::check_finite(out, "inverse", k)
    }

    /// Inverse step `k` carrying a tangent vector through its analytic
    /// Jacobian. Counts one tangent step (primal and tangent ride together).
    pub(crate) fn step_inverse_tangent(
        &self,
        x_k: &DVector<f64>,
        w: &DVector<f64>,
        k: usize,
        x_out: &mut DVector<f64>,
        w_out: &mut DVector<f64>,
        scratch: &mut FlowScratch,
        counter: &mut PassCounter,
    ) -> Result<()> {
        let (hi, lo) = self.grid.step_nodes(k)?;
        self.step_tangent_between(x_k, w, lo, hi, x_out, w_out, scratch);
        counter.tangent_steps += 1;
        Self::check_finite(x_out, "inverse tangent", k)?;
        Self::check_finite(w_out, "inverse tangent", k)
    }

    /// Exact Jacobian of the one-step map in the given direction, evaluated
    /// at that map's input point, by differentiating the integrator update
    /// rule with the analytic velocity Jacobian.
    ///
    /// Heun from `a` to `b` with `h = tau_b - tau_a`:
    /// `J = I + h/2 [ J_v(x, a) + J_v(x_pred, b) (I + h J_v(x, a)) ]`.
    pub fn step_jacobian_exact(
        &self,
        k: usize,
        x_input: &DVector<f64>,
        direction: Direction,
    ) -> Result<DMatrix<f64>> {
        self.check_dim(x_input)?;
        let (hi, lo) = self.grid.step_nodes(k)?;
        let (from, to) = match direction {
            Direction::Generative => (hi, lo),
            Direction::Inverse => (lo, hi),
        };
        let h = self.grid.times()[to] - self.grid.times()[from];
        let j1 = self.velocity_jacobian_node(x_input, from);
        let dim = self.dim();
        let eye = DMatrix::identity(dim, dim);
        let j = match self.integrator {
            Integrator::Euler => &eye + &j1 * h,
            Integrator::Heun => {
                let mut scratch = FlowScratch::for_flow(self);
                self.velocity_node(x_input, from, &mut scratch.v1, &mut scratch.gmm);
                let xp = x_input + &scratch.v1 * h;
                let j2 = self.velocity_jacobian_node(&xp, to);
                let inner = &eye + &j1 * h;
                &eye + (&j1 + &j2 * inner) * (0.5 * h)
            }
        };
        Ok(j)
    }

    /// Runs the full generative chain from a latent point. Returns the
    /// trajectory `[z, x_T, ..., x_1]`; costs exactly one pass.
    pub fn push_forward(&self, z: &DVector<f64>, counter: &mut PassCounter) -> Result<FlowTrajectory> {
        self.check_dim(z)?;
        let t = self.grid.steps();
        let mut scratch = FlowScratch::for_flow(self);
        let mut states = Vec::with_capacity(t + 1);
        states.push(z.clone_owned());
        for i in 0..t {
            let k = t - i;
            let mut next = DVector::zeros(self.dim());
            self.step_between(&states[i], t - k, t - k + 1, &mut next, &mut scratch);
            counter.forward_steps += 1;
            Self::check_finite(&next, "generative", k)?;
            states.push(next);
        }
        Ok(FlowTrajectory { states })
    }

    /// Runs the full inverse chain from a data-side point; the result is
    /// ordered latent-first like [`Flow::push_forward`]'s. Costs one pass.
    pub fn pull_back(&self, x: &DVector<f64>, counter: &mut PassCounter) -> Result<FlowTrajectory> {
        self.check_dim(x)?;
        let t = self.grid.steps();
        let mut scratch = FlowScratch::for_flow(self);
        let mut states = Vec::with_capacity(t + 1);
        states.push(x.clone_owned());
        for k in 1..=t {
            let mut next = DVector::zeros(self.dim());
            self.step_between(&states[k - 1], t - k + 1, t - k, &mut next, &mut scratch);
            counter.inverse_steps += 1;
            Self::check_finite(&next, "inverse", k)?;
            states.push(next);
        }
        states.reverse();
        Ok(FlowTrajectory { states })
    }
}

/// States along one generative trajectory, latent-first:
/// `states[i]` sits at grid node `i` (time `tau_i`), so `states[0] = z` and
/// `states[T] = x`. In step indexing, `x_k = states[T + 1 - k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    states: Vec<DVector<f64>>,
}

impl FlowTrajectory {
    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    /// Number of steps T (one less than the number of stored states).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Latent endpoint `z = x_{T+1}`.
    pub fn latent(&self) -> &DVector<f64> {
        &self.states[0]
    }

    /// Data endpoint `x = x_1`.
    pub fn sample(&self) -> &DVector<f64> {
        &self.states[self.states.len() - 1]
    }

    /// State `x_k` in step indexing, `k` in `1..=T+1`.
    pub fn x_k(&self, k: usize) -> &DVector<f64> {
        &self.states[self.states.len() - k]
    }

    /// Recomputes every generative step and checks the stored states match
    /// bit-for-bit. A trajectory from [`Flow::push_forward`] always passes.
    pub fn verify_chain(&self, flow: &Flow) -> Result<()> {
        let t = self.steps();
        if t != flow.grid().steps() {
            return Err(Error::invalid("trajectory and flow disagree on step count"));
        }
        let mut counter = PassCounter::new();
        for i in 0..t {
            let k = t - i;
            let next = flow.step_generative(&self.states[i], k, &mut counter)?;
            if next != self.states[i + 1] {
                return Err(Error::numerical(format!(
                    "trajectory state {} does not reproduce under step k={k}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}
