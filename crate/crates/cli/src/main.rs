//! Command-line entry point: trajectory generation, training, evaluation,
//! Lyapunov estimation and the numerical verification suite, all producing
//! reproducible outputs with manifests.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/format error,
//! 3 numerical failure.

mod manifest;

use chaos_ot::dynamics::{add_noise, simulate, NoiseSpec, Stepper, SystemSpec};
use chaos_ot::io;
use chaos_ot::metrics::{
    benettin_lle, fixed_summary_cloud, l1_hist_error, relative_rmse, spectral_distance,
    theory_suite, BenettinOpts, FixedSummary,
};
use chaos_ot::models::{forward_plain, NetSpec};
use chaos_ot::training::{rollout, train, Method, TrainConfig};
use chaos_ot::{Error, Trajectory};
use clap::{Args, Parser, Subcommand};
use manifest::{digest_file, Manifest};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "chaos-ot",
    about = "Neural emulators for chaotic systems with optimal-transport regularization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a ground-truth system and write a trajectory file.
    Simulate(SimulateArgs),
    /// Train an emulator on a trajectory file.
    Train(TrainArgs),
    /// Evaluate a trained model: one-step RMSE, spectral distance, histogram error.
    Eval(EvalArgs),
    /// Estimate the leading Lyapunov exponent of a system or trained model.
    Lyapunov(LyapunovArgs),
    /// Run the numerical verification suite (exit 0 iff all checks pass).
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SystemArgs {
    /// System: l63 | l96 | ks
    #[arg(long)]
    system: String,
    /// Site count (l96) or grid points (ks)
    #[arg(long)]
    dim: Option<usize>,
    /// L96 forcing F
    #[arg(long)]
    forcing: Option<f64>,
    /// KS domain length L
    #[arg(long)]
    domain: Option<f64>,
    /// L63 sigma (defaults to the classic 10)
    #[arg(long)]
    sigma: Option<f64>,
    /// L63 rho (defaults to 28)
    #[arg(long)]
    rho: Option<f64>,
    /// L63 beta (defaults to 8/3)
    #[arg(long)]
    beta: Option<f64>,
}

impl SystemArgs {
    fn resolve(&self) -> Result<SystemSpec, Error> {
        let reject = |flag: &str, sys: &str| {
            Err(Error::Config(format!("--{flag} is not valid for {sys}")))
        };
        match self.system.as_str() {
            "l63" => {
                if self.forcing.is_some() {
                    return reject("forcing", "l63");
                }
                if self.domain.is_some() {
                    return reject("domain", "l63");
                }
                if self.dim.is_some() {
                    return reject("dim", "l63");
                }
                Ok(SystemSpec::L63 {
                    sigma: self.sigma.unwrap_or(10.0),
                    rho: self.rho.unwrap_or(28.0),
                    beta: self.beta.unwrap_or(8.0 / 3.0),
                })
            }
            "l96" => {
                if self.sigma.is_some() || self.rho.is_some() || self.beta.is_some() {
                    return reject("sigma/--rho/--beta", "l96");
                }
                if self.domain.is_some() {
                    return reject("domain", "l96");
                }
                Ok(SystemSpec::L96 {
                    m: self.dim.unwrap_or(60),
                    forcing: self.forcing.unwrap_or(10.0),
                })
            }
            "ks" => {
                if self.sigma.is_some() || self.rho.is_some() || self.beta.is_some() {
                    return reject("sigma/--rho/--beta", "ks");
                }
                if self.forcing.is_some() {
                    return reject("forcing", "ks");
                }
                Ok(SystemSpec::Ks {
                    m: self.dim.unwrap_or(64),
                    domain: self.domain.unwrap_or(22.0),
                })
            }
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Stored time step
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Stored steps to keep
    #[arg(long)]
    steps: usize,
    /// Stored steps to discard before keeping
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    /// Integrator substeps per stored step
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    /// Observation noise level (fraction of the pooled std)
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent replicas (suffixed .r0, .r1, ... before the extension)
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of key = value lines overriding the per-system preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (trajectory file)
    #[arg(long)]
    data: PathBuf,
    /// Method: no-ot | fixed-ot | sinkhorn | wgan (overrides config)
    #[arg(long)]
    method: Option<String>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log (defaults to OUT.log.csv)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print all config keys and exit
    #[arg(long, default_value_t = false)]
    help_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Autoregressive rollout length
    #[arg(long, default_value_t = 1000)]
    rollout: usize,
    /// Observation noise applied to the evaluation data
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Histogram bins
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// KS domain length for the fixed summary (defaults to 22 * m / 64)
    #[arg(long)]
    domain: Option<f64>,
    /// Output metrics CSV
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct LyapunovArgs {
    /// Trained model to analyze (mutually exclusive with --system)
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    forcing: Option<f64>,
    #[arg(long)]
    domain: Option<f64>,
    /// Initial separation
    #[arg(long, default_value_t = 1e-2)]
    d0: f64,
    /// Rescaling band lower edge
    #[arg(long, default_value_t = 1e-5)]
    band_lo: f64,
    /// Rescaling band upper edge
    #[arg(long, default_value_t = 10.0)]
    band_hi: f64,
    /// Estimation window (steps)
    #[arg(long, default_value_t = 1000)]
    horizon: usize,
    /// Warm-up steps before estimation
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    /// Time units per step
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Integrator substeps per step (ground-truth systems)
    #[arg(long, default_value_t = 10)]
    substeps: usize,
    /// Stored burn-in steps to reach the attractor before estimating
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV row output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV report output
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() {
    // determinism cap: the library is single-threaded; values other than 1
    // are accepted but do not add parallelism
    if let Ok(v) = std::env::var("CHAOS_OT_THREADS") {
        if v.parse::<usize>().is_err() {
            eprintln!("error: CHAOS_OT_THREADS must be an integer, got '{v}'");
            std::process::exit(1);
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // keep clap's message but force usage errors onto exit code 1
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Lyapunov(args) => cmd_lyapunov(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> chaos_ot::Result<i32> {
    let start = Instant::now();
    let spec = args.system.resolve()?;
    spec.validate()?;
    if args.steps == 0 {
        return Err(Error::Config("--steps must be >= 1".into()));
    }
    if args.replicas == 0 {
        return Err(Error::Config("--replicas must be >= 1".into()));
    }
    for replica in 0..args.replicas {
        let seed = args.seed.wrapping_add(replica as u64);
        let u0 = spec.default_initial_state(seed);
        let clean = simulate(&spec, &u0, args.steps, args.dt, args.burn_in, args.substeps)?;
        let traj = add_noise(
            &clean,
            NoiseSpec {
                level: args.noise,
                seed,
            },
        )?;
        let path = if args.replicas == 1 {
            args.out.clone()
        } else {
            replica_path(&args.out, replica)
        };
        io::write_trajectory(&path, &traj)?;
        let manifest = Manifest {
            command: format!(
                "simulate --system {} --steps {} --dt {} --burn-in {} --substeps {} --noise {}",
                spec.tag().name(),
                args.steps,
                args.dt,
                args.burn_in,
                args.substeps,
                args.noise
            ),
            config: format!("{spec:?}\n"),
            inputs: vec![],
            seed,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        manifest.write_alongside(&path)?;
        println!(
            "wrote {} ({} steps x {} dims, dt {})",
            path.display(),
            traj.len(),
            traj.dim(),
            traj.dt
        );
    }
    Ok(0)
}

fn replica_path(base: &Path, replica: usize) -> PathBuf {
    match (base.file_stem(), base.extension()) {
        (Some(stem), Some(ext)) => base.with_file_name(format!(
            "{}.r{replica}.{}",
            stem.to_string_lossy(),
            ext.to_string_lossy()
        )),
        _ => {
            let mut os = base.as_os_str().to_owned();
            os.push(format!(".r{replica}"));
            PathBuf::from(os)
        }
    }
}

fn cmd_train(args: TrainArgs) -> chaos_ot::Result<i32> {
    if args.help_config {
        print!("{}", TrainConfig::help_text());
        return Ok(0);
    }
    let start = Instant::now();
    let traj = io::read_trajectory(&args.data)?;
    let mut config = TrainConfig::preset(traj.system);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        config.apply_config_text(&text)?;
    }
    if let Some(method) = &args.method {
        config.method = Method::parse(method)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let outcome = train(&config, &traj)?;
    io::write_model(&args.out, &outcome.emulator)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| append_ext(&args.out, ".log.csv"));
    io::atomic_write(&log_path, outcome.log.to_csv().as_bytes())?;
    let manifest = Manifest {
        command: format!("train --method {}", config.method.name()),
        config: config.to_config_text(),
        inputs: vec![(
            args.data.display().to_string(),
            digest_file(&args.data)?,
        )],
        seed: config.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write_alongside(&args.out)?;
    let last = outcome.log.epochs.last();
    println!(
        "trained {} for {} epochs (final mse {:.6e}); model {} log {}",
        config.method.name(),
        config.epochs,
        last.map_or(f64::NAN, |r| r.mse),
        args.out.display(),
        log_path.display()
    );
    Ok(0)
}

fn append_ext(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

fn cmd_eval(args: EvalArgs) -> chaos_ot::Result<i32> {
    let start = Instant::now();
    let model = io::read_model(&args.model)?;
    let data = io::read_trajectory(&args.data)?;
    if let NetSpec::Mlp(s) = &model.spec {
        if s.widths[0] != data.dim() {
            return Err(Error::Dimension(format!(
                "model expects dimension {}, data has {}",
                s.widths[0],
                data.dim()
            )));
        }
    }
    if args.rollout < 3 || data.len() < args.rollout.max(2) {
        return Err(Error::Config(
            "--rollout must be >= 3 and fit inside the data".into(),
        ));
    }
    let observed = add_noise(
        &data,
        NoiseSpec {
            level: args.noise,
            seed: args.seed,
        },
    )?;

    // one-step relative RMSE over the observed pairs
    let pairs = (observed.len() - 1).min(2000);
    let mut preds = Vec::with_capacity(pairs);
    let mut targets = Vec::with_capacity(pairs);
    for t in 0..pairs {
        preds.push(forward_plain(&model, observed.state(t)));
        targets.push(observed.state(t + 1).to_vec());
    }
    let rmse = relative_rmse(&preds, &targets)?;

    // autoregressive rollout vs the observed trajectory
    let pred_traj = rollout(
        &model,
        observed.state(0),
        args.rollout,
        observed.dt,
        observed.system,
    )?;
    let true_slice = Trajectory::new(
        observed.dt,
        observed.system,
        args.rollout,
        observed.dim(),
        observed.states()[..args.rollout * observed.dim()].to_vec(),
    )?;
    let spec_dist = spectral_distance(&true_slice, &pred_traj)?;
    let domain = args
        .domain
        .unwrap_or(22.0 * data.dim() as f64 / 64.0);
    let summary = FixedSummary::for_system(data.system, domain)?;
    let hist = l1_hist_error(
        &fixed_summary_cloud(summary, &true_slice)?,
        &fixed_summary_cloud(summary, &pred_traj)?,
        args.bins,
    )?;

    let setting = format!("noise={};rollout={}", args.noise, args.rollout);
    let csv = format!(
        "metric,setting,value\nrmse,{setting},{rmse:.9e}\nspectral_distance,{setting},{spec_dist:.9e}\nl1_hist_error,{setting},{hist:.9e}\n"
    );
    io::atomic_write(&args.metrics, csv.as_bytes())?;
    let manifest = Manifest {
        command: format!("eval --rollout {} --noise {}", args.rollout, args.noise),
        config: format!("bins = {}\ndomain = {domain}\n", args.bins),
        inputs: vec![
            (args.model.display().to_string(), digest_file(&args.model)?),
            (args.data.display().to_string(), digest_file(&args.data)?),
        ],
        seed: args.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write_alongside(&args.metrics)?;
    println!("rmse {rmse:.6}  spectral {spec_dist:.6}  hist {hist:.6}");
    Ok(0)
}

fn cmd_lyapunov(args: LyapunovArgs) -> chaos_ot::Result<i32> {
    let start = Instant::now();
    let opts = BenettinOpts {
        d0: args.d0,
        band: (args.band_lo, args.band_hi),
        horizon: args.horizon,
        warmup: args.warmup,
        dt: args.dt,
        seed: args.seed,
    };
    let (label, lle, inputs) = match (&args.model, &args.system) {
        (Some(path), None) => {
            let model = io::read_model(path)?;
            let dim = match &model.spec {
                NetSpec::Mlp(s) => s.widths[0],
                NetSpec::Conv(_) => args.dim.ok_or_else(|| {
                    Error::Config("--dim required for conv models".into())
                })?,
            };
            // settle onto the model's attractor from a generic state
            let mut u0 = vec![0.1; dim];
            for (i, v) in u0.iter_mut().enumerate() {
                *v += 0.01 * (i as f64).sin();
            }
            let mut step = |u: &[f64]| -> chaos_ot::Result<Vec<f64>> {
                let next = forward_plain(&model, u);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("model rollout blew up".into()));
                }
                Ok(next)
            };
            for _ in 0..args.burn_in {
                u0 = step(&u0)?;
            }
            let lle = benettin_lle(&mut step, &u0, opts)?;
            (
                format!("model:{}", path.display()),
                lle,
                vec![(path.display().to_string(), digest_file(path)?)],
            )
        }
        (None, Some(system)) => {
            let sys = SystemArgs {
                system: system.clone(),
                dim: args.dim,
                forcing: args.forcing,
                domain: args.domain,
                sigma: None,
                rho: None,
                beta: None,
            };
            let spec = sys.resolve()?;
            let stepper = Stepper::new(&spec, args.dt, args.substeps)?;
            let mut u0 = spec.default_initial_state(args.seed);
            let mut step = |u: &[f64]| stepper.step(u);
            for _ in 0..args.burn_in {
                u0 = step(&u0)?;
            }
            let lle = benettin_lle(&mut step, &u0, opts)?;
            (format!("system:{}", spec.tag().name()), lle, vec![])
        }
        _ => {
            return Err(Error::Config(
                "exactly one of --model or --system is required".into(),
            ))
        }
    };
    println!("lle,{label},{lle:.6}");
    if let Some(out) = &args.out {
        let csv = format!("metric,setting,value\nlle,{label},{lle:.9e}\n");
        io::atomic_write(out, csv.as_bytes())?;
        let manifest = Manifest {
            command: format!("lyapunov {label}"),
            config: format!(
                "d0 = {}\nband = [{}, {}]\nhorizon = {}\nwarmup = {}\ndt = {}\nsubsteps = {}\n",
                args.d0, args.band_lo, args.band_hi, args.horizon, args.warmup, args.dt, args.substeps
            ),
            inputs,
            seed: args.seed,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        manifest.write_alongside(out)?;
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> chaos_ot::Result<i32> {
    let start = Instant::now();
    let report = theory_suite(args.seed);
    println!("check,measured,bound,margin,pass");
    for c in &report.checks {
        println!(
            "{},{:.6e},{:.6e},{:.6e},{}",
            c.name, c.measured, c.bound, c.margin, c.pass
        );
    }
    if let Some(out) = &args.out {
        io::atomic_write(out, report.to_csv().as_bytes())?;
        let manifest = Manifest {
            command: "verify".into(),
            config: String::new(),
            inputs: vec![],
            seed: args.seed,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        manifest.write_alongside(out)?;
    }
    if report.all_pass() {
        println!("all checks passed");
        Ok(0)
    } else {
        eprintln!("verification failures detected");
        Ok(3)
    }
}
