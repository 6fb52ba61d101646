use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dictpfl::experiment::{self, RunConfig};
use dictpfl::netsim::{DryRunConfig, ShapeManifest};
use dictpfl::Error;

/// Encrypted federated fine-tuning simulator.
#[derive(Parser)]
#[command(name = "dictpfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task and write per-round metrics as CSV.
    Run(RunArgs),
    /// Per-strategy upload accounting for a model shape manifest.
    Dryrun(DryrunArgs),
    /// Write the synthetic training task as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// key=value config file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// dictpfl, full, topK, sae or sae:F
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// dictionary size
    #[arg(long)]
    rank: Option<usize>,
    /// pruning fraction s in [0, 1)
    #[arg(long)]
    prune: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Dirichlet concentration, `inf` for a homogeneous split
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// overridden by DICTPFL_SEED
    #[arg(long)]
    seed: Option<u64>,
    /// mock or toy-rlwe
    #[arg(long)]
    backend: Option<String>,
    /// lan or wan
    #[arg(long)]
    net: Option<String>,
    /// worker threads, 0 = min(clients, cores)
    #[arg(long)]
    threads: Option<usize>,
    /// local epochs per round
    #[arg(long)]
    epochs: Option<usize>,
    /// minibatch size, 0 = full batch
    #[arg(long)]
    batch: Option<usize>,
    /// compacted or padded
    #[arg(long)]
    packing: Option<String>,
    /// modeled or measured
    #[arg(long)]
    timing: Option<String>,
    /// extra `key=value` settings
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DryrunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// encrypted fraction for select-and-encrypt
    #[arg(long, default_value_t = 0.1)]
    sae_fraction: f64,
    /// layers trained by the top-k baseline
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    /// write the held-out split instead of the training split
    #[arg(long)]
    test: bool,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Config(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            Failure::Runtime(e) => {
                eprintln!("error: {e}");
                ExitCode::from(3)
            }
        }
    }
}

fn config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let numbers: [(&str, Option<String>); 12] = [
        ("clients", common.clients.map(|v| v.to_string())),
        ("rounds", common.rounds.map(|v| v.to_string())),
        ("rank", common.rank.map(|v| v.to_string())),
        ("prune", common.prune.map(|v| v.to_string())),
        ("tau", common.tau.map(|v| v.to_string())),
        ("beta", common.beta.map(|v| v.to_string())),
        ("alpha", common.alpha.map(|v| v.to_string())),
        ("lr", common.lr.map(|v| v.to_string())),
        ("seed", common.seed.map(|v| v.to_string())),
        ("threads", common.threads.map(|v| v.to_string())),
        ("epochs", common.epochs.map(|v| v.to_string())),
        ("batch", common.batch.map(|v| v.to_string())),
    ];
    let names = [
        ("strategy", &common.strategy),
        ("backend", &common.backend),
        ("net", &common.net),
        ("packing", &common.packing),
        ("timing", &common.timing),
    ];
    for (key, value) in numbers {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for (key, value) in names {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    cfg.apply_env()?;
    Ok(cfg)
}

fn sink(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = config(&args.common).map_err(Failure::Config)?;
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    cfg.validate().map_err(Failure::Config)?;
    let metrics = experiment::run(&cfg).map_err(Failure::Runtime)?;
    let out = sink(cfg.out.as_deref()).map_err(|e| Failure::Runtime(e.into()))?;
    experiment::write_metrics_csv(out, &metrics).map_err(Failure::Runtime)?;
    let summary = experiment::summary_line(&cfg, &metrics);
    if cfg.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn cmd_dryrun(args: &DryrunArgs) -> Result<(), Failure> {
    let cfg = config(&args.common).map_err(Failure::Config)?;
    let manifest = ShapeManifest::load(&args.manifest)
        .map_err(|e| Failure::Config(Error::Parameter(format!("{}: {e}", args.manifest.display()))))?;
    let dry = DryRunConfig {
        rank: cfg.rank,
        s: cfg.s,
        tau: cfg.tau,
        ..DryRunConfig::default()
    };
    let reports = experiment::dry_run(&manifest, &dry, args.sae_fraction, args.top_k).map_err(Failure::Config)?;
    for r in &reports {
        for w in &r.warnings {
            eprintln!("warning: {}: {w}", r.strategy);
        }
    }
    let out = sink(args.out.as_deref()).map_err(|e| Failure::Runtime(e.into()))?;
    experiment::write_dryrun_csv(out, &reports).map_err(Failure::Runtime)
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let cfg = config(&args.common).map_err(Failure::Config)?;
    cfg.validate().map_err(Failure::Config)?;
    let task = experiment::make_task(&cfg).map_err(Failure::Config)?;
    let data = if args.test { &task.test } else { &task.train };
    let out = sink(args.out.as_deref()).map_err(|e| Failure::Runtime(e.into()))?;
    data.write_csv(out).map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Dryrun(a) => cmd_dryrun(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
