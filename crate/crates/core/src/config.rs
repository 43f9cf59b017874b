//! Run configuration: TOML with dotted sections, every field defaulted and
//! validated, resolvable back to text so a run directory can carry the exact
//! configuration it was produced from.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators::{EstimatorConfig, EstimatorKind, TangentMode, DEFAULT_DELTA};
use crate::flow::{DiffusionSchedule, Flow, Integrator, TimeGrid};
use crate::gmm::{benchmark_gmm_with_noise, GmmSpec};
use crate::smc::{AnnealingSchedule, McmcKernel, ResampleMethod, SmcConfig, SmcSystem};
use crate::Result;

fn cfg_err(section: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("[{section}] {detail}"))
}

/// Target density selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// `benchmark` (two-mode mixture), `stationary` (standard normal, flow
    /// is the identity), or `perfect-transport` (isotropic Gaussian anchor
    /// with the target set to the exact discrete pushforward).
    pub kind: String,
    pub dim: usize,
    /// Structure seed for the benchmark mixture's random covariances.
    pub seed: u64,
    /// Scale of the half-normal diagonal noise in the benchmark covariances.
    pub diag_noise_std: f64,
    /// Anchor standard deviation, used by `perfect-transport` only.
    pub anchor_std: f64,
    /// Component weights for the proposal mixture the flow is built from.
    /// Unset means uniform, which for the benchmark misweights the (0.25,
    /// 0.75) target on purpose: the sampler then has a real reweighting job
    /// instead of starting at the answer.
    pub proposal_weights: Option<Vec<f64>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            kind: "benchmark".to_string(),
            dim: 10,
            seed: 26,
            diag_noise_std: 0.5,
            anchor_std: 2.0,
            proposal_weights: None,
        }
    }
}

/// Diffusion schedule and discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    /// Number of integration steps T.
    pub steps: usize,
    /// `heun` or `euler`.
    pub integrator: String,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
            steps: 16,
            integrator: "heun".to_string(),
        }
    }
}

/// Entropy estimator selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    /// `fp`, `fppp`, `hutch-g`, `hutch-r`, or `bruteforce`. The Hutchinson
    /// kinds also accept an inline probe count suffix, e.g. `hutch-g4`.
    pub kind: String,
    /// `fd` (central finite differences) or `exact` (analytic tangent).
    pub mode: String,
    /// Finite-difference radius.
    pub delta: f64,
    /// Hutchinson probe count (ignored by the other kinds, overridden by an
    /// inline suffix on `kind`).
    pub n_probes: usize,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec {
            kind: "fppp".to_string(),
            mode: "fd".to_string(),
            delta: DEFAULT_DELTA,
            n_probes: 1,
        }
    }
}

/// Sampler shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcSpec {
    pub n_particles: usize,
    /// Number of annealing levels for the linear ladder; ignored when
    /// `betas` is given explicitly.
    pub levels: usize,
    /// Explicit ladder (must start at 0 and end at 1), overrides `levels`.
    pub betas: Option<Vec<f64>>,
    pub mcmc_steps: usize,
    /// Proposal block size; 0 means the default `max(1, D/10)`.
    pub block_size: usize,
    pub sigma_prop: f64,
    pub ess_threshold: f64,
    /// `systematic` or `multinomial`.
    pub resample: String,
}

impl Default for SmcSpec {
    fn default() -> Self {
        SmcSpec {
            n_particles: 1000,
            levels: 10,
            betas: None,
            mcmc_steps: 10,
            block_size: 0,
            sigma_prop: 0.1,
            ess_threshold: 0.5,
            resample: "systematic".to_string(),
        }
    }
}

/// Batch plan for `bench-gmm`: each listed estimator runs once per seed,
/// with run seeds `master_seed + 0 .. master_seed + n_seeds - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub estimators: Vec<String>,
    pub n_seeds: usize,
    /// Direct target samples drawn for the reference energy histogram.
    pub ref_samples: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec { estimators: vec!["fppp".to_string()], n_seeds: 10, ref_samples: 10_000 }
    }
}

/// The whole run configuration. Unknown keys anywhere are rejected, so a
/// typo fails loudly instead of silently using a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Worker threads; 0 keeps the library default.
    pub workers: usize,
    pub out_dir: Option<String>,
    pub target: TargetConfig,
    pub flow: FlowConfig,
    pub estimator: EstimatorSpec,
    pub smc: SmcSpec,
    pub bench: BenchSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 1,
            workers: 0,
            out_dir: None,
            target: TargetConfig::default(),
            flow: FlowConfig::default(),
            estimator: EstimatorSpec::default(),
            smc: SmcSpec::default(),
            bench: BenchSpec::default(),
        }
    }
}

/// Parses `fp | fppp | hutch-g[N] | hutch-r[N] | bruteforce` into a kind,
/// with `n_probes` as the probe count when no inline suffix is present.
pub fn parse_estimator_kind(kind: &str, n_probes: usize) -> Result<EstimatorKind> {
    let parse_probes = |suffix: &str, section: &str| -> Result<usize> {
        if suffix.is_empty() {
            return Ok(n_probes);
        }
        suffix
            .parse::<usize>()
            .map_err(|_| cfg_err("estimator", format!("bad probe suffix in kind `{section}`")))
    };
    let k = match kind {
        "fp" => EstimatorKind::Fp,
        "fppp" | "fp++" => EstimatorKind::FpPlusPlus,
        "bruteforce" => EstimatorKind::BruteForce,
        s if s.starts_with("hutch-g") => {
            EstimatorKind::HutchGaussian(parse_probes(&s["hutch-g".len()..], s)?)
        }
        s if s.starts_with("hutch-r") => {
            EstimatorKind::HutchRademacher(parse_probes(&s["hutch-r".len()..], s)?)
        }
        other => {
            return Err(cfg_err(
                "estimator",
                format!(
                    "unknown kind `{other}` (expected fp, fppp, hutch-g[N], hutch-r[N], bruteforce)"
                ),
            ))
        }
    };
    match k {
        EstimatorKind::HutchGaussian(0) | EstimatorKind::HutchRademacher(0) => {
            Err(cfg_err("estimator", "hutchinson needs n_probes >= 1"))
        }
        k => Ok(k),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The fully resolved configuration as TOML, for the run directory.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field validation beyond what the builders check; called by the
    /// parsers so a loaded config is either usable or rejected with context.
    pub fn validate(&self) -> Result<()> {
        self.integrator()?;
        self.estimator_config()?;
        self.resample_method()?;
        match self.target.kind.as_str() {
            "benchmark" | "stationary" | "perfect-transport" => {}
            other => {
                return Err(cfg_err(
                    "target",
                    format!(
                        "unknown kind `{other}` (expected benchmark, stationary, perfect-transport)"
                    ),
                ))
            }
        }
        if self.target.dim == 0 {
            return Err(cfg_err("target", "dim must be >= 1"));
        }
        if self.flow.steps == 0 {
            return Err(cfg_err("flow", "steps must be >= 1"));
        }
        if self.smc.n_particles < 2 {
            return Err(cfg_err("smc", "n_particles must be >= 2"));
        }
        if self.bench.n_seeds == 0 {
            return Err(cfg_err("bench", "n_seeds must be >= 1"));
        }
        if self.bench.ref_samples == 0 {
            return Err(cfg_err("bench", "ref_samples must be >= 1"));
        }
        for kind in &self.bench.estimators {
            parse_estimator_kind(kind, self.estimator.n_probes)?;
        }
        if self.target.kind == "perfect-transport" {
            if self.target.proposal_weights.is_some() {
                return Err(cfg_err(
                    "target",
                    "proposal_weights does not apply to perfect-transport",
                ));
            }
        } else {
            self.build_proposal()?;
        }
        // Builders catch the rest (schedule positivity, ladder shape, ...)
        // at construction; run them once now so errors surface at load time.
        self.schedule()?;
        self.annealing_schedule()?;
        Ok(())
    }

    pub fn integrator(&self) -> Result<Integrator> {
        match self.flow.integrator.as_str() {
            "heun" => Ok(Integrator::Heun),
            "euler" => Ok(Integrator::Euler),
            other => Err(cfg_err("flow", format!("unknown integrator `{other}`"))),
        }
    }

    pub fn resample_method(&self) -> Result<ResampleMethod> {
        match self.smc.resample.as_str() {
            "systematic" => Ok(ResampleMethod::Systematic),
            "multinomial" => Ok(ResampleMethod::Multinomial),
            other => Err(cfg_err("smc", format!("unknown resample method `{other}`"))),
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.flow.beta_min, self.flow.beta_max, self.flow.t_max)
            .map_err(|e| cfg_err("flow", e))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.flow.t_max, self.flow.steps).map_err(|e| cfg_err("flow", e))
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig> {
        let kind = parse_estimator_kind(&self.estimator.kind, self.estimator.n_probes)?;
        let mode = match self.estimator.mode.as_str() {
            "fd" => TangentMode::FiniteDifference,
            "exact" => TangentMode::Exact,
            other => return Err(cfg_err("estimator", format!("unknown mode `{other}`"))),
        };
        EstimatorConfig::new(kind, mode, self.estimator.delta).map_err(|e| cfg_err("estimator", e))
    }

    /// The target mixture (`stationary` and `benchmark` kinds; the
    /// perfect-transport target is owned by its system).
    pub fn build_target(&self) -> Result<GmmSpec> {
        match self.target.kind.as_str() {
            "benchmark" => {
                benchmark_gmm_with_noise(self.target.dim, self.target.seed, self.target.diag_noise_std)
                    .map_err(|e| cfg_err("target", e))
            }
            "stationary" => Ok(GmmSpec::standard_normal(self.target.dim)),
            other => Err(cfg_err("target", format!("kind `{other}` has no standalone mixture"))),
        }
    }

    /// The mixture the flow transports to: the target with its component
    /// weights replaced by `proposal_weights` (uniform when unset).
    pub fn build_proposal(&self) -> Result<GmmSpec> {
        let target = self.build_target()?;
        let weights = match &self.target.proposal_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / target.n_components() as f64; target.n_components()],
        };
        target.with_weights(&weights).map_err(|e| cfg_err("target", e))
    }

    /// The generative flow, built over the proposal mixture.
    pub fn build_flow(&self) -> Result<Flow> {
        let gmm = self.build_proposal()?;
        Flow::new(gmm, self.schedule()?, self.time_grid()?, self.integrator()?)
            .map_err(|e| cfg_err("flow", e))
    }

    pub fn build_system(&self) -> Result<SmcSystem> {
        if self.target.kind == "perfect-transport" {
            SmcSystem::perfect_transport(
                self.target.dim,
                self.target.anchor_std,
                self.schedule()?,
                self.time_grid()?,
                self.integrator()?,
            )
            .map_err(|e| cfg_err("target", e))
        } else {
            SmcSystem::with_target(self.build_flow()?, self.build_target()?)
                .map_err(|e| cfg_err("target", e))
        }
    }

    pub fn annealing_schedule(&self) -> Result<AnnealingSchedule> {
        match &self.smc.betas {
            Some(betas) => {
                AnnealingSchedule::new(betas.clone(), self.smc.mcmc_steps, self.smc.ess_threshold)
            }
            None => {
                AnnealingSchedule::uniform(self.smc.levels, self.smc.mcmc_steps, self.smc.ess_threshold)
            }
        }
        .map_err(|e| cfg_err("smc", e))
    }

    pub fn kernel(&self) -> McmcKernel {
        let block_size = if self.smc.block_size == 0 {
            (self.target.dim / 10).max(1)
        } else {
            self.smc.block_size
        };
        McmcKernel { block_size, sigma_prop: self.smc.sigma_prop }
    }

    /// Full sampler configuration for one run. `run_seed` overrides the
    /// config's master seed so a batch can reuse one config across seeds.
    pub fn smc_config(&self, run_seed: u64) -> Result<SmcConfig> {
        Ok(SmcConfig {
            n_particles: self.smc.n_particles,
            schedule: self.annealing_schedule()?,
            estimator: self.estimator_config()?,
            kernel: self.kernel(),
            resample: self.resample_method()?,
            master_seed: run_seed,
        })
    }

    /// Like [`RunConfig::smc_config`] with the estimator swapped, for batch
    /// plans that sweep estimators against a fixed sampler shape.
    pub fn smc_config_with(&self, run_seed: u64, kind_label: &str) -> Result<SmcConfig> {
        let mut cfg = self.smc_config(run_seed)?;
        let kind = parse_estimator_kind(kind_label, self.estimator.n_probes)?;
        cfg.estimator = EstimatorConfig {
            kind,
            mode: cfg.estimator.mode,
            delta: cfg.estimator.delta,
        };
        Ok(cfg)
    }
}
