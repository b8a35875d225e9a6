use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use debias_cli::experiment::{calibrate, prepare, run_experiment, sweep_with_threads, effective_parallelism};
use debias_cli::report::{aggregate, aggregate_csv_string, csv_string, load_csv, markdown, save_text, RawRow};
use debias_cli::{gradcheck_suite, CliError, CliResult, ExperimentConfig};
use debias_core::ensembles::Method;
use debias_core::synth::BiasKind;

#[derive(Parser)]
#[command(name = "debias", version, about = "Train and compare bias-robust ensembles on synthetic biased data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override an entropy-penalty weight, e.g. `--lambda-h dependent=0.1`. Repeatable.
    #[arg(long = "lambda-h", value_name = "KIND=VALUE")]
    lambda_h: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        for item in &self.lambda_h {
            let (kind, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--lambda-h expects KIND=VALUE, got `{item}`")))?;
            let kind: BiasKind = kind.trim().parse().map_err(|e| CliError::Config(format!("--lambda-h: {e}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("--lambda-h: `{value}` is not a number")))?;
            cfg.lambda_h.set(kind, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (bias kind, method, seed) combination and write the results.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one method and seed for each configured bias kind; prints CSV rows.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
        /// Print every diagnostic as one JSON object per bias kind instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Compare every objective's gradient with central finite differences.
    Gradcheck,
    /// Write the generated datasets as JSON, one file per bias kind, seed and split.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute seed aggregates from a raw results CSV.
    Analyze {
        #[arg(long)]
        csv: PathBuf,
        /// Also write the markdown table here.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> CliResult<u8> {
    match command {
        Command::Sweep { config } => cmd_sweep(&config.load()?),
        Command::Run { config, method, seed, json } => {
            let method: Method = method.parse().map_err(|e| CliError::Config(format!("--method: {e}")))?;
            cmd_run(&config.load()?, method, seed, json)
        }
        Command::Gradcheck => {
            let report = gradcheck_suite();
            println!("{report}");
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Gen { config, out } => cmd_gen(&config.load()?, &out),
        Command::Analyze { csv, markdown: md_path } => {
            let rows = load_csv(&csv)?;
            let md = markdown(&aggregate(&rows));
            print!("{md}");
            if let Some(path) = md_path {
                save_text(&path, &md)?;
            }
            Ok(failure_code(&rows))
        }
    }
}

fn failure_code(rows: &[RawRow]) -> u8 {
    u8::from(rows.iter().any(RawRow::failed))
}

fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<u8> {
    let threads = effective_parallelism(cfg)?;
    let total = cfg.bias_kind.len() * cfg.methods.len() * cfg.seeds.len();
    eprintln!("sweep: {total} runs on {threads} worker(s)");
    let result = sweep_with_threads(cfg, threads)?;
    for o in result.outcomes.iter().filter(|o| o.failed()) {
        eprintln!("run {} failed: {}", o.run_id(), o.error.as_deref().unwrap_or("unknown error"));
    }
    let rows = result.rows();
    let csv = csv_string(&rows)?;
    match &cfg.output_csv {
        Some(path) => save_text(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &cfg.output_aggregate_csv {
        save_text(path, &aggregate_csv_string(&result.table)?)?;
    }
    let md = markdown(&result.table);
    match &cfg.output_markdown {
        Some(path) => save_text(path, &md)?,
        None => eprint!("{md}"),
    }
    Ok(failure_code(&rows))
}

fn cmd_run(cfg: &ExperimentConfig, method: Method, seed: u64, json: bool) -> CliResult<u8> {
    let mut rows = Vec::new();
    for &kind in &cfg.bias_kind {
        let outcome = run_experiment(cfg, kind, method, seed)?;
        if let Some(err) = &outcome.error {
            eprintln!("run {} failed: {err}", outcome.run_id());
        }
        if json {
            let doc = serde_json::json!({
                "run_id": outcome.run_id(),
                "metrics": outcome.metrics,
                "error": outcome.error,
            });
            println!("{doc}");
        }
        rows.push(outcome.to_row());
    }
    if !json {
        print!("{}", csv_string(&rows)?);
    }
    Ok(failure_code(&rows))
}

fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> CliResult<u8> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let separation = calibrate(cfg)?;
    for &kind in &cfg.bias_kind {
        for &seed in &cfg.seeds {
            let data = prepare(cfg, kind, seed, separation)?;
            for ds in [&data.train, &data.in_domain, &data.ood] {
                let path = out.join(format!("{kind}-s{seed}-{}.json", ds.split.as_str()));
                ds.save(&path)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(0)
}
