use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use npc_core::data;
use npc_core::experiment::{self, ExperimentConfig};
use npc_core::npc::Method;

#[derive(Parser, Debug)]
#[command(name = "npc", version, about = "Noise-robust cross-modal training experiments")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON experiment config; fields not given take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset file.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method at one noise ratio.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Clean dataset file; generated from the config when omitted.
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "npc")]
        method: Method,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (noise ratio, method) cell and write the combined report.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replaces the config's noise ratios; repeatable.
        #[arg(long)]
        noise: Vec<f64>,
        /// Replaces the config's methods; repeatable.
        #[arg(long)]
        method: Vec<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge report files from several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Merge even when config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

/// Errors that should exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn validated(cfg: ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn generate(cfg: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(cfg)?;
    cfg.synth.validate().map_err(|e| Usage(e.to_string()))?;
    let ds = data::generate_synthetic(&cfg.synth)?;
    let bytes = data::encode_dataset(&ds);
    npc_core::write_atomic(out, &bytes)?;
    println!("n={} d_img={} d_txt={}", ds.len(), ds.d_img(), ds.d_txt());
    println!("sha256={}", experiment::checksum(&bytes));
    Ok(())
}

fn train(cfg: &ConfigArgs, dataset: Option<&Path>, method: Method, noise: f64, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = validated(load_config(cfg)?)?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(Usage(format!("--noise must lie in [0, 1], got {noise}")).into());
    }
    let ds = match dataset {
        Some(path) => data::read_dataset(path).with_context(|| format!("reading {}", path.display()))?,
        None => data::generate_synthetic(&cfg.synth)?,
    };
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = experiment::train_to_dir(&cfg, &ds, method, noise, &out)?;
    let e = &outcome.report.eval;
    println!(
        "{method} noise={noise} r1_i2t={:.1} r1_t2i={:.1} rsum={:.1} -> {}",
        e.r1_i2t,
        e.r1_t2i,
        e.rsum,
        out.display()
    );
    Ok(())
}

fn sweep(cfg: &ConfigArgs, noise: Vec<f64>, methods: Vec<Method>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(cfg)?;
    if !noise.is_empty() {
        cfg.noise_ratios = noise;
    }
    if !methods.is_empty() {
        cfg.methods = methods;
    }
    let cfg = validated(cfg)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = experiment::run_sweep(&cfg)?;
    experiment::write_sweep(&cfg, &outcome, &out)?;
    for row in &outcome.summary {
        match row.var_r1 {
            Some(v) => println!("{} var_r1={v:.4}", row.method),
            None => println!("{} var_r1=n/a", row.method),
        }
    }
    if !outcome.failures.is_empty() {
        for f in &outcome.failures {
            eprintln!("cell failed: method={} noise={}: {}", f.method, f.noise_ratio, f.error);
        }
        anyhow::bail!("{} of {} cells failed", outcome.failures.len(), outcome.failures.len() + outcome.rows.len());
    }
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path, force: bool) -> anyhow::Result<()> {
    let merged = experiment::merge_reports(runs, force)?;
    experiment::write_merged(&merged, out)?;
    println!("{} rows -> {}", merged.rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { cfg, out } => generate(&cfg, &out),
        Command::Train {
            cfg,
            dataset,
            method,
            noise,
            out,
        } => train(&cfg, dataset.as_deref(), method, noise, out),
        Command::Sweep { cfg, noise, method, out } => sweep(&cfg, noise, method, out),
        Command::Report { runs, out, force } => report(&runs, &out, force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NPC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
