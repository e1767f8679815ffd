mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use kobt::bayes_opt::tune;
use kobt::importance::Statistic;
use kobt::knockoff::{KnockoffKind, KnockoffSampler};
use kobt::knockoff_filter::{replicate_stream, run_kobt, tuning_stream};
use kobt::sim_harness::run_experiment;
use kobt::{KobtError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{load_config, parse_knockoff_kind, Command, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "kobt", version, about = "Knockoff boosted trees: variable selection with FDR control")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run the full pipeline and select features.
    Select(Common),
    /// Write knockoff copies of the design matrix.
    Knockoff(Common),
    /// Tune the (gamma, lambda, alpha) penalties by Bayesian optimization.
    Tune(Common),
    /// Run a simulation experiment.
    Simulate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, visible_alias = "spec")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "KOBT_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value = "kobt_out")]
    out: PathBuf,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    statistic: Option<Statistic>,
    /// shrunk, sparse or pc<K>.
    #[arg(long, value_parser = parse_knockoff_kind)]
    knockoff_kind: Option<KnockoffKind>,
    #[arg(long)]
    reps: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            delta: self.delta,
            q: self.q,
            statistic: self.statistic,
            knockoff_kind: self.knockoff_kind.clone(),
            reps: self.reps,
        }
    }
}

/// Everything needed to re-run a job. Wall time is the only field that
/// varies between identical runs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    kobt_version: &'a str,
    cli_version: &'a str,
    config: &'a RunConfig,
    dropped_columns: Vec<String>,
    outputs: Vec<String>,
    wall_time_seconds: f64,
}

fn config_hash(config: &RunConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

fn execute(command: Command, config: &RunConfig, out: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    match command {
        Command::Select => {
            let (data, dropped) = config.load_dataset()?;
            let result = run_kobt(&data, &config.filter)?;
            Ok((report::write_selection(&result, out)?, dropped))
        }
        Command::Knockoff => {
            let (data, dropped) = config.load_dataset()?;
            let sampler = KnockoffSampler::prepare(&data.x, &config.filter.knockoff)?;
            let mut files = Vec::new();
            // Matrix m is the one replicate m of `select` would draw.
            for m in 1..=config.knockoff_count {
                let set = sampler.sample(replicate_stream(config.filter.master_seed, m).child(0))?;
                files.push((format!("knockoff_{m}.csv"), set.to_csv_string()));
                files.push((format!("knockoff_{m}.json"), set.sidecar_json()?));
            }
            let refs: Vec<(&str, String)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
            Ok((report::write_all(out, &refs)?, dropped))
        }
        Command::Tune => {
            let (data, dropped) = config.load_dataset()?;
            let f = &config.filter;
            let result = tune(&data, &f.boost, f.tune_init, f.tune_iter, f.cv_folds, tuning_stream(f.master_seed))?;
            Ok((report::write_tuning(&result, out)?, dropped))
        }
        Command::Simulate => {
            let output = run_experiment(config.experiment()?)?;
            Ok((report::write_experiment(&output, out)?, Vec::new()))
        }
    }
}

fn run(command: Command, args: &Common) -> Result<()> {
    let start = Instant::now();
    if !args.config.is_file() {
        return Err(KobtError::invalid("config", format!("{} does not exist", args.config.display())));
    }
    let mut config = load_config(&args.config)?;
    args.overrides().apply(&mut config);
    config.validate_for(command)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global()
        .map_err(|e| KobtError::Numerical(format!("thread pool: {e}")))?;
    let (files, dropped) = execute(command, &config, &args.out)?;
    let seed = match command {
        Command::Simulate => config.experiment()?.seed,
        _ => config.filter.master_seed,
    };
    let manifest = Manifest {
        command: command.as_str(),
        config_hash: config_hash(&config)?,
        seed,
        kobt_version: kobt::VERSION,
        cli_version: env!("CARGO_PKG_VERSION"),
        config: &config,
        dropped_columns: dropped,
        outputs: files
            .iter()
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
            .collect(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    report::write_atomic(&args.out.join("run_manifest.json"), report::to_json(&manifest)?.as_bytes())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = match &cli.command {
        Sub::Select(a) => (Command::Select, a),
        Sub::Knockoff(a) => (Command::Knockoff, a),
        Sub::Tune(a) => (Command::Tune, a),
        Sub::Simulate(a) => (Command::Simulate, a),
    };
    match run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kobt {}: {e}", command.as_str());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
