//! `qsphere`: config-driven experiments on randomly forced bilinear systems.
//!
//! Exit status is 0 on success, 2 for configuration or input errors and 3
//! for numerical failures. Every artifact records the config hash and seed.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use qsphere_core::control::{self, SteeringPlan};
use qsphere_core::dynamics::{propagate, NoisePath};
use qsphere_core::ergodicity::{self, InitialLaw};
use qsphere_core::linalg::{self, distance};
use qsphere_core::noise;
use qsphere_core::system::{check_condition2, DEFAULT_TOL_COUPLING, DEFAULT_TOL_GAP};
use qsphere_core::{Cvec, Error};

pub use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(Error),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e)
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            CliError::Config(_) | CliError::Io(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qsphere", version, about = "Randomly forced bilinear systems on the unit sphere")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Integrator substeps per unit interval.
    #[arg(long, global = true)]
    pub substeps: Option<usize>,
    /// Relative norm drift tolerated per substep.
    #[arg(long = "drift-tol", global = true)]
    pub drift_tol: Option<f64>,
    /// Record every N substeps in `simulate`.
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one noise-driven trajectory and write it as CSV.
    Simulate,
    /// Total-variation mixing between two initial laws.
    Mix,
    /// Hitting times of a ball around e_1.
    Hittime,
    /// Build an exact steering plan, or replay one.
    Steer {
        /// Replay an existing plan instead of building one.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Coupled chains and their meeting times.
    Couple,
    /// One-step transition kernel from a state.
    Kernel,
    /// Galerkin truncation of the forced Schrödinger equation.
    Galerkin {
        #[arg(long)]
        potential: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Coupling non-degeneracy check of the configured system.
    Check,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Mix => "mix",
            Command::Hittime => "hittime",
            Command::Steer { .. } => "steer",
            Command::Couple => "couple",
            Command::Kernel => "kernel",
            Command::Galerkin { .. } => "galerkin",
            Command::Check => "check",
        }
    }
}

/// Output context shared by the commands.
struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    command: &'static str,
}

impl Ctx {
    fn envelope(&self, result: impl Serialize) -> Result<Value, CliError> {
        Ok(json!({
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "schema_version": config::SCHEMA_VERSION,
            "result": serde_json::to_value(result).map_err(|e| CliError::Io(e.to_string()))?,
        }))
    }

    fn write_json(&self, name: &str, result: impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        let text = serde_json::to_string_pretty(&self.envelope(result)?).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    fn csv(&self, name: &str) -> Result<(PathBuf, std::io::BufWriter<fs::File>), CliError> {
        let path = self.out.join(name);
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(w, "# config_hash={} seed={}", self.hash, self.cfg.seed)?;
        Ok((path, w))
    }
}

fn point_or(pairs: &Option<Vec<linalg::Pair>>, n: usize, default: Cvec, what: &str) -> Result<Cvec, CliError> {
    match pairs {
        Some(p) => config::state(p, n, what),
        None => Ok(default),
    }
}

/// Run a parsed command line; returns the artifact paths.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    // `galerkin` and `check` draw no randomness and run without a seed
    let seedless = matches!(cli.command, Command::Galerkin { .. } | Command::Check);
    let seed = match (&cli.config, cli.seed) {
        (None, None) if seedless => Some(0),
        _ => cli.seed,
    };
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), seed)?;
    if let Some(s) = cli.substeps {
        cfg.propagator.substeps_per_unit = s;
    }
    if let Some(d) = cli.drift_tol {
        cfg.propagator.norm_drift_tolerance = d;
    }
    if let Some(s) = cli.stride {
        cfg.propagator.record_stride = s;
    }
    if let Command::Galerkin { potential, n, sigma, epsilon } = &cli.command {
        let g = &mut cfg.galerkin;
        if let Some(p) = potential {
            g.potential = p.clone();
        }
        if let Some(v) = n {
            g.n = *v;
        }
        if let Some(v) = sigma {
            g.sigma = *v;
        }
        if let Some(v) = epsilon {
            g.epsilon = *v;
        }
    }
    cfg.propagator.validate()?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        // a pool installed earlier in this process stays in effect
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    // `galerkin --out system.json` names the artifact itself
    let (out, file) = match (&cli.command, cli.out.extension()) {
        (Command::Galerkin { .. }, Some(ext)) if ext == "json" => (
            cli.out.parent().map(Path::to_path_buf).unwrap_or_default(),
            cli.out.file_name().map(|f| f.to_string_lossy().into_owned()),
        ),
        _ => (cli.out.clone(), None),
    };
    if !out.as_os_str().is_empty() {
        fs::create_dir_all(&out)?;
    }
    let ctx = Ctx { hash: cfg.hash(), cfg, out, command: cli.command.name() };
    log::info!("{} with config hash {} and seed {}", ctx.command, ctx.hash, ctx.cfg.seed);
    match &cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Mix => mix(&ctx),
        Command::Hittime => hittime(&ctx),
        Command::Steer { replay } => match replay {
            Some(p) => steer_replay(&ctx, p),
            None => steer(&ctx),
        },
        Command::Couple => couple(&ctx),
        Command::Kernel => kernel(&ctx),
        Command::Galerkin { .. } => galerkin(&ctx, file.as_deref().unwrap_or("system.json")),
        Command::Check => check(&ctx),
    }
}

fn simulate(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let block = &ctx.cfg.simulate;
    if block.steps == 0 {
        return Err(CliError::Config("simulate.steps must be at least 1".into()));
    }
    let z0 = point_or(&block.z0, spec.dim(), spec.e1().clone(), "simulate.z0")?;
    let model = &ctx.cfg.noise;
    let path: Vec<_> = (0..block.steps as u64)
        .map(|k| noise::sample_segment(model, &mut noise::segment_rng(ctx.cfg.seed, 0, k)))
        .collect();
    let mut pc = ctx.cfg.propagator;
    if pc.record_stride == 0 {
        pc.record_stride = pc.substeps_per_unit;
    }
    let rec = propagate(&spec, &z0, &NoisePath { path: &path, model }, block.steps as f64, &pc)?;
    let (csv_path, mut w) = ctx.csv("trajectory.csv")?;
    rec.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "simulate: {} unit steps, {} records, max norm drift {:.3e}",
        block.steps,
        rec.times.len(),
        rec.max_norm_drift
    );
    Ok(vec![csv_path])
}

fn partition(ctx: &Ctx, spec: &qsphere_core::SystemSpec, cells: usize, samples: usize) -> Result<ergodicity::Partition, CliError> {
    Ok(ergodicity::make_partition(spec, &ctx.cfg.noise, cells, samples, ctx.cfg.seed, &ctx.cfg.propagator)?)
}

fn mix(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let b = &ctx.cfg.mix;
    let n = spec.dim();
    let za = point_or(&b.law_a, n, linalg::basis_vector(n, 0), "mix.law_a")?;
    let zb = point_or(&b.law_b, n, linalg::basis_vector(n, 1), "mix.law_b")?;
    let part = partition(ctx, &spec, b.cells, b.partition_samples)?;
    let (tv, same) = ergodicity::mixing_series(
        &spec,
        &ctx.cfg.noise,
        &InitialLaw::Point(za),
        &InitialLaw::Point(zb),
        b.k_max,
        b.ensemble,
        &part,
        ctx.cfg.seed,
        &ctx.cfg.propagator,
    )?;
    let floor = ergodicity::noise_floor(&same);
    let (csv_path, mut w) = ctx.csv("tv.csv")?;
    writeln!(w, "k,tv,noise_floor")?;
    for &(k, v) in &tv {
        writeln!(w, "{k},{v:.10e},{floor:.10e}")?;
    }
    w.flush()?;
    let fit = ergodicity::mixing_rate(&tv, &same);
    let result = match &fit {
        Ok(r) => serde_json::to_value(r).map_err(|e| CliError::Io(e.to_string()))?,
        Err(e) => json!({ "tv_series": tv, "same_law_series": same, "noise_floor": floor, "fit_error": e.to_string() }),
    };
    let json_path = ctx.write_json("mix.json", result)?;
    match fit {
        Ok(r) => {
            println!(
                "mix: rate {:.4} (95% CI {:.4}..{:.4}), C {:.3}, window {:?}, noise floor {:.4}",
                r.rate, r.rate_ci.0, r.rate_ci.1, r.c_const, r.fit_window, r.noise_floor
            );
            Ok(vec![json_path, csv_path])
        }
        Err(e) => Err(e.into()),
    }
}

fn hittime(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let b = &ctx.cfg.hittime;
    let z0 = point_or(&b.z0, spec.dim(), spec.spectral().e(1).clone(), "hittime.z0")?;
    let r = ergodicity::hitting_experiment(
        &spec,
        &ctx.cfg.noise,
        &z0,
        b.delta,
        b.alpha,
        b.k_max,
        b.chains,
        ctx.cfg.seed,
        &ctx.cfg.propagator,
    )?;
    let path = ctx.write_json("hittime.json", &r)?;
    println!(
        "hittime: mean tau {:.2}, E exp(alpha tau) {:.4e}, censored {}/{}, tail slope {}",
        r.mean_tau,
        r.estimate,
        r.censored,
        r.samples.len(),
        r.tail_fit.map_or("n/a".to_string(), |f| format!("{:.3e} (95% CI {:.3e}..{:.3e})", f.slope, f.slope_ci.0, f.slope_ci.1))
    );
    if r.censored_fraction() > 0.05 {
        return Err(Error::HeavyCensoring { censored: r.censored, total: r.samples.len() }.into());
    }
    Ok(vec![path])
}

fn steer(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let b = &ctx.cfg.steer;
    let n = spec.dim();
    let mut rng = noise::segment_rng(noise::derive_seed(ctx.cfg.seed, 21), 0, 0);
    let z1 = match &b.z1 {
        Some(p) => config::state(p, n, "steer.z1")?,
        None => linalg::random_sphere_point(n, &mut rng),
    };
    let z2 = match &b.z2 {
        Some(p) => config::state(p, n, "steer.z2")?,
        None => linalg::random_sphere_point(n, &mut rng),
    };
    let mut steering = b.steering;
    steering.approach.propagator = ctx.cfg.propagator;
    steering.approach.seed = ctx.cfg.seed;
    let plan = control::global_steer(&spec, &z1, &z2, b.delta, b.tol, &steering)?;
    let path = ctx.write_json("plan.json", plan.to_doc())?;
    let replayed = plan.replay(&spec, &ctx.cfg.propagator)?;
    let err = distance(replayed.last().unwrap_or(&plan.start), &plan.target);
    println!(
        "steer: {} stages over {} units, replay error {:.3e} (tol {:.1e})",
        plan.stages.len(),
        plan.duration(),
        err,
        b.tol
    );
    Ok(vec![path])
}

fn steer_replay(ctx: &Ctx, plan_path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let text = fs::read_to_string(plan_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", plan_path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("plan is not JSON: {e}")))?;
    // accept a bare plan or one wrapped in an artifact envelope
    let doc = v.get("result").cloned().unwrap_or(v);
    let doc = serde_json::from_value(doc).map_err(|e| CliError::Config(format!("invalid plan: {e}")))?;
    let plan = SteeringPlan::from_doc(&doc)?;
    if plan.start.len() != spec.dim() {
        return Err(CliError::Config(format!("plan has n = {}, the system has n = {}", plan.start.len(), spec.dim())));
    }
    let ends = plan.replay(&spec, &ctx.cfg.propagator)?;
    let end = ends.last().cloned().unwrap_or_else(|| plan.start.clone());
    let err = distance(&end, &plan.target);
    let tol = ctx.cfg.steer.tol;
    let path = ctx.write_json(
        "replay.json",
        json!({
            "plan": plan_path.display().to_string(),
            "endpoint": linalg::to_pairs(&end),
            "replay_error": err,
            "recorded_error": plan.total_error,
            "tolerance": tol,
            "verified": err <= tol,
        }),
    )?;
    println!("steer --replay: error {err:.3e} against tolerance {tol:.1e}");
    if err > tol {
        return Err(Error::ToleranceNotMet { error: err, tolerance: tol }.into());
    }
    Ok(vec![path])
}

fn couple(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let b = &ctx.cfg.couple;
    let part = partition(ctx, &spec, b.cells, b.partition_samples)?;
    let r = ergodicity::coupling_experiment(
        &spec,
        &ctx.cfg.noise,
        b.delta0,
        &part,
        b.kernel_samples,
        b.runs,
        b.max_steps,
        ctx.cfg.seed,
        &ctx.cfg.propagator,
    )?;
    let (csv_path, mut w) = ctx.csv("couple.csv")?;
    writeln!(w, "run,meeting_step,attempts")?;
    for (i, run) in r.runs.iter().enumerate() {
        let l = run.meeting_step.map_or(String::new(), |l| l.to_string());
        writeln!(w, "{i},{l},{}", run.attempts.len())?;
    }
    w.flush()?;
    let json_path = ctx.write_json(
        "couple.json",
        json!({
            "delta0": r.delta0,
            "runs": r.runs.len(),
            "max_steps": r.max_steps,
            "met_fraction": r.met_fraction,
            "absorbing_all": r.absorbing_all,
            "survival": r.survival,
            "survival_fit": r.survival_fit,
            "kernel_rows": r.kernel_rows,
        }),
    )?;
    println!(
        "couple: {:.1}% of {} runs met within {} steps, absorbing in all runs: {}, tail slope {}",
        100.0 * r.met_fraction,
        r.runs.len(),
        r.max_steps,
        r.absorbing_all,
        r.survival_fit.map_or("n/a".to_string(), |f| format!("{:.3e}", f.slope))
    );
    Ok(vec![json_path, csv_path])
}

fn kernel(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let b = &ctx.cfg.kernel;
    let z = point_or(&b.z, spec.dim(), spec.e1().clone(), "kernel.z")?;
    let part = partition(ctx, &spec, b.cells, b.partition_samples)?;
    let est = ergodicity::estimate_kernel(&spec, &ctx.cfg.noise, &z, &part, b.samples, ctx.cfg.seed, &ctx.cfg.propagator)?;
    let centroids: Vec<_> = part.centroids().iter().map(linalg::to_pairs).collect();
    let path = ctx.write_json(
        "kernel.json",
        json!({
            "source": linalg::to_pairs(&est.source),
            "samples": est.samples,
            "weights": est.row.weights,
            "centroids": centroids,
        }),
    )?;
    println!("kernel: {} samples over {} cells, largest cell mass {:.4}", est.samples, part.len(), est.row.max_mass());
    Ok(vec![path])
}

fn galerkin(ctx: &Ctx, name: &str) -> Result<Vec<PathBuf>, CliError> {
    let g = &ctx.cfg.galerkin;
    let sys = g.build()?;
    let report = qsphere_core::galerkin::condition_check(&g.potential()?, g.n)?;
    let mut doc = ctx.envelope(sys.spec.to_doc()?)?;
    doc["condition"] = serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?;
    let path = ctx.out.join(name);
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    println!(
        "galerkin: V = {}, n = {}, sigma = {}, eps = {}; condition {}",
        sys.potential,
        g.n,
        g.sigma,
        g.epsilon,
        if report.condition.pass { "passes" } else { "fails" }
    );
    for note in &report.notes {
        println!("  {note}");
    }
    Ok(vec![path])
}

fn check(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.cfg.system()?;
    let r = check_condition2(&spec, DEFAULT_TOL_GAP, DEFAULT_TOL_COUPLING);
    let path = ctx.write_json("check.json", &r)?;
    println!(
        "check: {} (min gap {:.3e}, min coupling {:.3e})",
        if r.pass { "pass" } else { "fail" },
        r.min_gap,
        r.min_coupling
    );
    for reason in &r.reasons {
        println!("  {reason}");
    }
    Ok(vec![path])
}
