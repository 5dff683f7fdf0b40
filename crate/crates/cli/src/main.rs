use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use musctl_core::distrib::{serve_env, ServeOptions};
use musctl_core::harness::{self, sidecar_path, Checkpoint, Fabric, RunConfig};
use musctl_core::sim::CrashInjection;
use musctl_core::{ConfigError, EnvError, HarnessError, KvConfig, PlantConfig, Trajectory};

#[derive(Parser)]
#[command(
    name = "musctl",
    version,
    about = "Learned muscle control for a shoulder-abduction plant"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a DQL or PPO agent.
    Train(TrainArgs),
    /// Score a checkpoint on the frozen test set.
    Evaluate(EvalArgs),
    /// Dump a deterministic rollout as a trace CSV.
    Trace(TraceArgs),
    /// Host one plant behind the TCP step protocol.
    ServeEnv(ServeArgs),
    /// Write the frozen test trajectories as CSV files.
    GenTestset(GenArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set total_frames=50000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WorkerArgs {
    /// Number of local env servers to spawn.
    #[arg(long)]
    workers: Option<usize>,
    /// Address of an external env server; repeatable. Disables local spawn.
    #[arg(long = "worker-addr", value_name = "HOST:PORT")]
    worker_addrs: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    workers: WorkerArgs,
    /// Frame budget.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    workers: WorkerArgs,
    /// Directory for `eval.csv` and `eval_summary.csv`; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one trace per test trajectory under `<out>/traces`.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Trajectory from the frozen test set.
    #[arg(long, default_value_t = 0, conflicts_with = "waypoints")]
    test_index: u64,
    /// Explicit waypoints in degrees, joined by quintic sections.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    waypoints: Option<Vec<f64>>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Plant config path, or `single` / `reference`.
    #[arg(long, default_value = "single")]
    plant: String,
    /// Fraction of episodes forced to crash.
    #[arg(long, default_value_t = 0.0)]
    crash_injection: f64,
    /// Episode length, in steps, over which injected crashes are placed.
    #[arg(long, default_value_t = 100)]
    crash_horizon: usize,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &ConfigArgs, base: Option<KvConfig>) -> Result<KvConfig, HarnessError> {
    let mut kv = base.unwrap_or_default();
    if let Some(path) = &args.config {
        kv.merge(&KvConfig::load(path)?);
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: o.clone(),
        })?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn apply_workers(kv: &mut KvConfig, w: &WorkerArgs) {
    if let Some(n) = w.workers {
        kv.set("workers", n.to_string());
    }
    if !w.worker_addrs.is_empty() {
        kv.set("worker_addrs", w.worker_addrs.join(", "));
    }
}

fn injection(cfg: &RunConfig) -> Option<CrashInjection> {
    (cfg.crash_injection > 0.0).then(|| CrashInjection {
        probability: cfg.crash_injection,
        horizon: cfg.train_spec().frames,
    })
}

fn train(args: TrainArgs) -> Result<(), HarnessError> {
    let mut kv = load_config(&args.config, None)?;
    apply_workers(&mut kv, &args.workers);
    if let Some(f) = args.frames {
        kv.set("total_frames", f.to_string());
    }
    if let Some(s) = args.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(o) = &args.out {
        kv.set("out_dir", o.display().to_string());
    }
    let cfg = RunConfig::from_kv(&kv)?;
    let mut fabric = Fabric::open(&cfg, injection(&cfg))?;
    let result = harness::train(&cfg, &mut fabric);
    fabric.close();
    let summary = result?;
    println!(
        "trained {} frames in {} episodes ({} updates); reward {:.2} -> {:.2}; checkpoint {}",
        summary.frames,
        summary.episodes,
        summary.updates,
        summary.baseline_reward,
        summary.final_reward,
        summary.checkpoint.display()
    );
    Ok(())
}

/// Run configuration for an existing checkpoint: its sidecar, then the
/// explicit config file and overrides on top.
fn checkpoint_config(
    ckpt: &Path,
    args: &ConfigArgs,
    workers: Option<&WorkerArgs>,
) -> Result<RunConfig, HarnessError> {
    let sidecar = sidecar_path(ckpt);
    let base = if sidecar.exists() {
        let mut kv = KvConfig::load(&sidecar)?;
        // Worker endpoints belong to the run that produced the checkpoint.
        let mut trimmed = KvConfig::new();
        for k in kv
            .keys()
            .filter(|k| *k != "worker_addrs" && *k != "frames")
            .map(str::to_string)
            .collect::<Vec<_>>()
        {
            trimmed.set(&k, kv.require_str(&k)?.to_string());
        }
        kv = trimmed;
        Some(kv)
    } else {
        None
    };
    let mut kv = load_config(args, base)?;
    if let Some(w) = workers {
        apply_workers(&mut kv, w);
    }
    Ok(RunConfig::from_kv(&kv)?)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |e| HarnessError::io(path, e)
}

fn evaluate(args: EvalArgs) -> Result<(), HarnessError> {
    let cfg = checkpoint_config(&args.checkpoint, &args.config, Some(&args.workers))?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let out_dir = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut fabric = Fabric::open(&cfg, None)?;
    let result = harness::evaluate(&cfg, &ckpt, &mut fabric);
    fabric.close();
    let (report, episodes) = result?;
    let csv = out_dir.join("eval.csv");
    report
        .write_csv(BufWriter::new(
            fs::File::create(&csv).map_err(io_err(&csv))?,
        ))
        .map_err(io_err(&csv))?;
    let summary = out_dir.join("eval_summary.csv");
    report
        .write_summary(BufWriter::new(
            fs::File::create(&summary).map_err(io_err(&summary))?,
        ))
        .map_err(io_err(&summary))?;
    if args.traces {
        let dir = out_dir.join("traces");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (score, ep) in report.scores.iter().zip(&episodes) {
            let path = dir.join(format!("trace_{:03}.csv", score.index));
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            ep.write_trace(BufWriter::new(file), cfg.plant.dt)
                .map_err(io_err(&path))?;
        }
    }
    report
        .write_summary(io::stdout().lock())
        .map_err(io_err(Path::new("stdout")))?;
    Ok(())
}

fn trace(args: TraceArgs) -> Result<(), HarnessError> {
    let cfg = checkpoint_config(&args.checkpoint, &args.config, None)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let traj = match &args.waypoints {
        Some(w) => Trajectory::through(w, cfg.section_seconds)?,
        None => cfg.test_set().get(args.test_index),
    };
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(io_err(path))?;
            let mut out = BufWriter::new(file);
            harness::emit_trace(&cfg, &ckpt, &traj, &mut out)?;
            out.flush().map_err(io_err(path))?;
        }
        None => {
            harness::emit_trace(&cfg, &ckpt, &traj, io::stdout().lock())?;
        }
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), HarnessError> {
    let plant = match args.plant.as_str() {
        "single" => PlantConfig::single_muscle(),
        "reference" => PlantConfig::reference(),
        path => PlantConfig::load(path)?,
    };
    if !(0.0..=1.0).contains(&args.crash_injection) {
        return Err(ConfigError::Constraint("--crash-injection must lie in [0, 1]".into()).into());
    }
    let listener = TcpListener::bind(&args.listen).map_err(EnvError::from)?;
    println!(
        "listening on {}",
        listener.local_addr().map_err(EnvError::from)?
    );
    let opts = ServeOptions {
        crash_injection: (args.crash_injection > 0.0).then_some(CrashInjection {
            probability: args.crash_injection,
            horizon: args.crash_horizon,
        }),
        die_after_steps: None,
    };
    serve_env(listener, plant, opts)?;
    info!("env server stopped");
    Ok(())
}

fn gen_testset(args: GenArgs) -> Result<(), HarnessError> {
    let cfg = RunConfig::from_kv(&load_config(&args.config, None)?)?;
    let n = harness::write_test_set(&cfg, &args.out)?;
    println!("wrote {n} trajectories to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Trace(a) => trace(a),
        Command::ServeEnv(a) => serve(a),
        Command::GenTestset(a) => gen_testset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
