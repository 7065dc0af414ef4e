use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedunlearn_core::harness::config::DEFAULT_LAMBDA_GRID;
use fedunlearn_core::harness::{
    emit_csv, emit_plots, emit_runs_csv, emit_selection_csv, grid_search, run_all, ExperimentConfig, MetricsLog,
    OneOrMany,
};
use fedunlearn_core::{Regime, Strategy};

/// Federated learning and unlearning experiments with standalone task vectors.
#[derive(Debug, Parser)]
#[command(name = "fedunlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed/strategy/regime/beta combination of a config.
    Run(Overrides),
    /// Grid-search lambda_tgt and the learning rates, then pick one point per
    /// strategy, regime and beta.
    Grid(Overrides),
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated list of sata, safa, tfs, ctt, federaser.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    /// Comma-separated list of standard, ntk.
    #[arg(long, value_delimiter = ',', value_parser = parse_regime)]
    regime: Vec<Regime>,
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// A value, a comma-separated list, or `grid` for the default grid.
    #[arg(long)]
    lambda_tgt: Option<String>,
    /// Skip writing per-round update history.
    #[arg(long)]
    no_history: bool,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s.to_ascii_lowercase().as_str() {
        "standard" => Ok(Regime::Standard),
        "ntk" | "ntk_linearized" | "linearized" => Ok(Regime::Ntk),
        other => Err(format!("unknown regime {other:?}; expected standard or ntk")),
    }
}

fn parse_lambda(s: &str) -> Result<Vec<f64>> {
    if s.eq_ignore_ascii_case("grid") {
        return Ok(DEFAULT_LAMBDA_GRID.to_vec());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("--lambda-tgt: {v:?} is neither a number nor `grid`"))
        })
        .collect()
}

fn many<T: Clone>(values: &[T]) -> Option<OneOrMany<T>> {
    match values {
        [] => None,
        [one] => Some(OneOrMany::One(one.clone())),
        _ => Some(OneOrMany::Many(values.to_vec())),
    }
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(v) = many(&self.strategy) {
            cfg.strategy = v;
        }
        if let Some(v) = many(&self.regime) {
            cfg.regime = v;
        }
        if let Some(v) = many(&self.beta) {
            cfg.beta = v;
        }
        if let Some(v) = many(&self.seed) {
            cfg.seeds = v;
        }
        if let Some(s) = &self.lambda_tgt {
            cfg.lambda_tgt = many(&parse_lambda(s)?).context("--lambda-tgt: empty")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_common(out: &Path, cfg: &ExperimentConfig, logs: &[&MetricsLog], plot_logs: &[&MetricsLog]) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml()?).context("writing config echo")?;
    emit_csv(logs, &out.join("metrics.csv"))?;
    emit_runs_csv(logs, &out.join("runs.csv"))?;
    if !plot_logs.is_empty() {
        emit_plots(plot_logs, &out.join("plots"), cfg.percent_plots)?;
    }
    Ok(())
}

fn run(args: &Overrides, grid: bool) -> Result<()> {
    let cfg = args.load()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let history = (!args.no_history).then(|| args.out.join("history"));
    if grid {
        let outcome = grid_search(&cfg, history.as_deref())?;
        let all: Vec<&MetricsLog> = outcome.logs.iter().collect();
        write_common(&args.out, &cfg, &all, &outcome.selected_logs())?;
        emit_selection_csv(&outcome.selections, &args.out.join("selection.csv"))?;
        for s in &outcome.selections {
            let p = s.best_point();
            let best = &s.scores[s.best];
            println!(
                "{} {} beta={}: lambda_tgt={} lr_main={} lr_standalone={} (first-FU target acc {:.4}, final global acc {:.4})",
                s.strategy, s.regime, s.beta, p.lambda_tgt, p.lr_main, p.lr_standalone, best.target_acc,
                best.final_global_acc
            );
        }
    } else {
        if cfg.has_grid() {
            bail!("the config defines a grid over lambda_tgt or learning rates; use `fedunlearn grid`");
        }
        let logs = run_all(&cfg, history.as_deref())?;
        let refs: Vec<&MetricsLog> = logs.iter().collect();
        write_common(&args.out, &cfg, &refs, &refs)?;
        for log in &logs {
            let fu = log.first_fu();
            println!(
                "{}: final global acc {:.4}, first-FU target acc {}",
                log.meta.run_id,
                log.last().map_or(f64::NAN, |r| r.global_test_accuracy),
                fu.and_then(|r| r.target_test_accuracy)
                    .map_or("n/a".to_string(), |a| format!("{a:.4}"))
            );
        }
    }
    log::info!("outputs written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::Grid(args) => run(args, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
