//! `fpsmc`: validation suites, the benchmark-mixture SMC reproduction with
//! CSV artifacts, raw estimator draws as JSONL, and a summarizer for them.
//!
//! Exit codes: 0 success, 1 a check or strict-mode run failed, 2 bad
//! configuration or arguments, 3 numerical failure.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use fpsmc::config::RunConfig;
use fpsmc::estimators::{estimate_entropy, rel_se_of_exp_mean};
use fpsmc::flow::PassCounter;
use fpsmc::gmm::GmmSpec;
use fpsmc::metrics::{reference_samples, Histogram, MetricsReport};
use fpsmc::seed;
use fpsmc::smc::{run_smc, Particle, SmcDiagnostics};
use fpsmc::suites::{validate_battery, ValidateParams};
use fpsmc::Error;

/// Seed-stream tags; distinct from every tag the library uses internally.
const TAG_REFERENCE: u64 = 0xC11F_0001;
const TAG_ESTIMATE_Z: u64 = 0xC11F_0002;
const TAG_ESTIMATE_DRAW: u64 = 0xC11F_0003;

const SUMMARY_HEADER: &str =
    "estimator,seed,modal_weight,energy_tv,distinct_ancestors,total_passes,wall_s,status";
const LEVELS_HEADER: &str =
    "level,beta,ess,resampled,acceptance_rate,mean_energy,distinct_ancestors,proposal_failures";

#[derive(Parser)]
#[command(name = "fpsmc", version, about = "Flow-perturbation entropy estimation and annealed SMC")]
struct Cli {
    /// Run configuration (TOML); omitted means built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 keeps the library default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Turn recoverable per-run failures into a nonzero exit.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the self-check suites and print one pass/fail line per check.
    Validate,
    /// Run annealed SMC for every configured estimator and seed, writing
    /// CSV artifacts into the output directory.
    BenchGmm,
    /// Stream one JSONL record per estimator draw to stdout.
    Estimate {
        /// Latent points drawn from the prior (ignored with --z-file).
        #[arg(long, default_value_t = 1)]
        points: usize,
        /// Draws per latent point.
        #[arg(long, default_value_t = 100)]
        draws: usize,
        /// Read latent points from a file, one comma- or
        /// whitespace-separated vector per line.
        #[arg(long, value_name = "PATH")]
        z_file: Option<PathBuf>,
    },
    /// Summarize an `estimate` JSONL stream (file argument or stdin).
    Summarize { file: Option<PathBuf> },
}

struct CliError {
    code: u8,
    msg: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            _ => 3,
        };
        CliError { code, msg: e.to_string() }
    }
}

fn io_err(what: &str, path: &Path, e: io::Error) -> CliError {
    CliError { code: 2, msg: format!("{what} {}: {e}", path.display()) }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.display().to_string());
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| CliError { code: 2, msg: format!("worker pool: {e}") })?;
    }
    match cli.cmd {
        Cmd::Validate => cmd_validate(&cfg),
        Cmd::BenchGmm => cmd_bench_gmm(&cfg, cli.strict),
        Cmd::Estimate { points, draws, z_file } => cmd_estimate(&cfg, points, draws, z_file),
        Cmd::Summarize { file } => cmd_summarize(file),
    }
}

fn cmd_validate(cfg: &RunConfig) -> Result<u8, CliError> {
    let params = ValidateParams { delta: cfg.estimator.delta, ..ValidateParams::default() };
    let outcomes = validate_battery(&params);
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("{}: {} ({})", o.name, o.status(), o.detail);
        if !o.passed {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        // Machine-readable tail line for scripted consumers.
        println!("failures: {}", serde_json::to_string(&failed).expect("string array"));
        Ok(1)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    match &cfg.out_dir {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(format!("runs/bench-gmm-m{}", cfg.master_seed)),
    }
}

fn cmd_bench_gmm(cfg: &RunConfig, strict: bool) -> Result<u8, CliError> {
    let out = out_dir(cfg);
    fs::create_dir_all(&out).map_err(|e| io_err("cannot create", &out, e))?;
    let system = cfg.build_system()?;

    write_file(&out.join("config.resolved.toml"), &cfg.resolved_toml())?;
    write_file(&out.join("gmm.toml"), &gmm_toml(system.target()))?;

    let mut ref_rng = seed::stream(cfg.master_seed, &[TAG_REFERENCE]);
    let reference = reference_samples(system.target(), cfg.bench.ref_samples, &mut ref_rng);

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    let mut failed_runs = 0usize;
    let run_seeds: Vec<u64> =
        (0..cfg.bench.n_seeds).map(|j| cfg.master_seed + j as u64).collect();
    for label in &cfg.bench.estimators {
        for &run_seed in &run_seeds {
            let run_dir = out.join(format!("{label}-seed{run_seed}"));
            fs::create_dir_all(&run_dir).map_err(|e| io_err("cannot create", &run_dir, e))?;
            let smc_cfg = cfg.smc_config_with(run_seed, label)?;
            let t0 = Instant::now();
            match run_smc(&system, &smc_cfg) {
                Ok(run) => {
                    let wall_s = t0.elapsed().as_secs_f64();
                    let report = MetricsReport::compute(
                        system.target(),
                        &run.particles,
                        &reference,
                        run.diagnostics.total_passes,
                        wall_s,
                    )?;
                    write_levels_csv(&run_dir, &run.diagnostics)?;
                    write_ensemble_csv(&run_dir, &run.particles)?;
                    write_rc_csv(&run_dir, &report.rc_hist)?;
                    write_energy_csv(&run_dir, &report.energy_hist, &report.energy_ref_hist)?;
                    for warning in &run.diagnostics.warnings {
                        eprintln!("{label} seed {run_seed}: warning: {warning}");
                    }
                    println!(
                        "{label} seed {run_seed}: modal {:.4}, tv {:.4}, ancestors {}, {:.1}s",
                        report.modal[0], report.energy_tv, report.distinct_ancestors, wall_s
                    );
                    summary.push_str(&format!(
                        "{label},{run_seed},{},{},{},{},{},ok\n",
                        report.modal[0],
                        report.energy_tv,
                        report.distinct_ancestors,
                        report.total_passes,
                        wall_s,
                    ));
                }
                Err(Error::DegenerateEnsemble { level, detail }) => {
                    failed_runs += 1;
                    eprintln!("{label} seed {run_seed}: degenerate at level {level}: {detail}");
                    summary.push_str(&format!("{label},{run_seed},,,,,,failed\n"));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    write_file(&out.join("summary.csv"), &summary)?;
    let manifest = json!({
        "schema_version": 1,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "command": "bench-gmm",
        "master_seed": cfg.master_seed,
        "run_seeds": run_seeds,
        "estimators": cfg.bench.estimators,
        "target_kind": cfg.target.kind,
        "dim": cfg.target.dim,
        "ref_samples": cfg.bench.ref_samples,
        "failed_runs": failed_runs,
    });
    write_file(
        &out.join("manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("manifest")),
    )?;
    println!("artifacts in {}", out.display());
    if failed_runs > 0 {
        eprintln!("{failed_runs} run(s) failed");
        if strict {
            return Ok(1);
        }
    }
    Ok(0)
}

fn cmd_estimate(
    cfg: &RunConfig,
    points: usize,
    draws: usize,
    z_file: Option<PathBuf>,
) -> Result<u8, CliError> {
    if draws == 0 || (z_file.is_none() && points == 0) {
        return Err(CliError { code: 2, msg: "estimate needs points >= 1 and draws >= 1".into() });
    }
    let flow = cfg.build_flow()?;
    let est = cfg.estimator_config()?;
    let zs: Vec<DVector<f64>> = match &z_file {
        Some(path) => parse_z_file(path, cfg.target.dim)?,
        None => {
            let prior = GmmSpec::standard_normal(cfg.target.dim);
            (0..points)
                .map(|i| {
                    let mut rng = seed::stream(cfg.master_seed, &[TAG_ESTIMATE_Z, i as u64]);
                    prior.sample_direct(&mut rng)
                })
                .collect()
        }
    };
    let stdout = io::stdout().lock();
    let mut w = BufWriter::new(stdout);
    for (pi, z) in zs.iter().enumerate() {
        let traj = flow.push_forward(z, &mut PassCounter::new())?;
        for d in 0..draws {
            let draw_seed = seed::chain(cfg.master_seed, &[TAG_ESTIMATE_DRAW, pi as u64, d as u64]);
            let t0 = Instant::now();
            let rec = estimate_entropy(&flow, &traj, &est, draw_seed, &mut PassCounter::new())?;
            let line = json!({
                "kind": rec.kind.label(),
                "seed": draw_seed,
                "delta_s": rec.delta_s,
                "ode_passes": rec.ode_passes,
                "wall_ns": t0.elapsed().as_nanos() as u64,
            });
            writeln!(w, "{line}").map_err(|e| CliError { code: 2, msg: format!("stdout: {e}") })?;
        }
    }
    w.flush().map_err(|e| CliError { code: 2, msg: format!("stdout: {e}") })?;
    Ok(0)
}

fn cmd_summarize(file: Option<PathBuf>) -> Result<u8, CliError> {
    let reader: Box<dyn BufRead> = match &file {
        Some(path) => Box::new(io::BufReader::new(
            fs::File::open(path).map_err(|e| io_err("cannot open", path, e))?,
        )),
        None => Box::new(io::BufReader::new(io::stdin())),
    };
    let mut delta_s = Vec::new();
    let mut total_passes: u64 = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError { code: 2, msg: format!("line {}: {e}", idx + 1) })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CliError { code: 2, msg: format!("line {}: {e}", idx + 1) })?;
        let ds = v
            .get("delta_s")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| CliError { code: 2, msg: format!("line {}: no delta_s", idx + 1) })?;
        delta_s.push(ds);
        total_passes += v.get("ode_passes").and_then(|x| x.as_u64()).unwrap_or(0);
    }
    let n = delta_s.len();
    if n < 2 {
        return Err(CliError { code: 2, msg: format!("summarize needs >= 2 records, got {n}") });
    }
    let nf = n as f64;
    let mean = delta_s.iter().sum::<f64>() / nf;
    let var = delta_s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let max = delta_s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_mean_exp = max + (delta_s.iter().map(|v| (v - max).exp()).sum::<f64>() / nf).ln();
    let log_mean_exp_sq =
        2.0 * max + (delta_s.iter().map(|v| (2.0 * (v - max)).exp()).sum::<f64>() / nf).ln();
    let mean_exp = log_mean_exp.exp();
    let se_mean_exp = rel_se_of_exp_mean(log_mean_exp, log_mean_exp_sq, n) * mean_exp;
    println!(
        "{}",
        json!({
            "n": n,
            "mean_delta_s": mean,
            "var_delta_s": var,
            "log_mean_exp": log_mean_exp,
            "mean_exp": mean_exp,
            "se_mean_exp": se_mean_exp,
            "total_ode_passes": total_passes,
        })
    );
    Ok(0)
}

fn parse_z_file(path: &Path, dim: usize) -> Result<Vec<DVector<f64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err("cannot read", path, e))?;
    let mut zs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|tok| !tok.is_empty())
            .map(str::parse::<f64>)
            .collect();
        let vals = vals.map_err(|e| CliError {
            code: 2,
            msg: format!("{}: line {}: {e}", path.display(), idx + 1),
        })?;
        if vals.len() != dim {
            return Err(CliError {
                code: 2,
                msg: format!(
                    "{}: line {}: got {} coordinates, config dim is {dim}",
                    path.display(),
                    idx + 1,
                    vals.len()
                ),
            });
        }
        zs.push(DVector::from_vec(vals));
    }
    if zs.is_empty() {
        return Err(CliError { code: 2, msg: format!("{}: no points", path.display()) });
    }
    Ok(zs)
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|e| io_err("cannot write", path, e))
}

/// The target mixture as TOML, so a run directory carries the exact density
/// it sampled without rebuilding it from the structure seed.
fn gmm_toml(gmm: &GmmSpec) -> String {
    let mut s = format!("dim = {}\n", gmm.dim());
    for c in gmm.components() {
        s.push_str("\n[[component]]\n");
        s.push_str(&format!("weight = {}\n", c.weight));
        let mean: Vec<String> = c.mean.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("mean = [{}]\n", mean.join(", ")));
        s.push_str("covariance = [\n");
        for i in 0..gmm.dim() {
            let row: Vec<String> =
                (0..gmm.dim()).map(|j| c.covariance[(i, j)].to_string()).collect();
            s.push_str(&format!("  [{}],\n", row.join(", ")));
        }
        s.push_str("]\n");
    }
    s
}

fn write_levels_csv(dir: &Path, diag: &SmcDiagnostics) -> Result<(), CliError> {
    let mut s = String::from(LEVELS_HEADER);
    s.push('\n');
    for r in &diag.levels {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.level,
            r.beta,
            r.ess,
            u8::from(r.resampled),
            r.acceptance_rate,
            r.mean_energy,
            r.distinct_ancestors,
            r.proposal_failures,
        ));
    }
    write_file(&dir.join("levels.csv"), &s)
}

fn write_ensemble_csv(dir: &Path, particles: &[Particle]) -> Result<(), CliError> {
    let dim = particles.first().map_or(0, |p| p.z.len());
    let mut header = Vec::with_capacity(2 * dim + 2);
    for i in 0..dim {
        header.push(format!("z{i}"));
    }
    for i in 0..dim {
        header.push(format!("x{i}"));
    }
    header.push("log_weight".into());
    header.push("ancestor".into());
    let mut s = header.join(",");
    s.push('\n');
    for p in particles {
        let mut row: Vec<String> = Vec::with_capacity(2 * dim + 2);
        row.extend(p.z.iter().map(|v| v.to_string()));
        row.extend(p.x.iter().map(|v| v.to_string()));
        row.push(p.log_weight.to_string());
        row.push(p.ancestor.to_string());
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_file(&dir.join("ensemble.csv"), &s)
}

fn histogram_csv(h: &Histogram, value_cols: &[(&str, &[f64])]) -> String {
    let edges = h.edges();
    let mut header = String::from("bin_lo,bin_hi");
    for (name, _) in value_cols {
        header.push(',');
        header.push_str(name);
    }
    let mut s = header;
    s.push('\n');
    for i in 0..h.bins() {
        s.push_str(&format!("{},{}", edges[i], edges[i + 1]));
        for (_, vals) in value_cols {
            s.push_str(&format!(",{}", vals[i]));
        }
        s.push('\n');
    }
    s
}

fn write_rc_csv(dir: &Path, h: &Histogram) -> Result<(), CliError> {
    write_file(&dir.join("rc_histogram.csv"), &histogram_csv(h, &[("mass", &h.mass)]))
}

fn write_energy_csv(dir: &Path, ens: &Histogram, refe: &Histogram) -> Result<(), CliError> {
    write_file(
        &dir.join("energy_histogram.csv"),
        &histogram_csv(ens, &[("ensemble_mass", &ens.mass), ("reference_mass", &refe.mass)]),
    )
}
