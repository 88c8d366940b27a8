use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use g2t::bounds::{optimal_step_size, theta, BoundQuery, BoundsError, ObjectiveClass, Row};
use g2t::experiment::{
    run_experiment, Experiment, ExperimentConfig, ExperimentError, SUMMARY_FILE,
};
use g2t::selection::export_miqcp;

#[derive(Parser)]
#[command(
    name = "g2t",
    version,
    about = "Gradient estimator selection for stochastic optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write traces plus a summary.
    Optimize(RunArgs),
    /// Measure the per-evaluation cost of the base gradient and each control variate.
    Profile(RunArgs),
    /// Run one control-variate selection at the warm-started parameters.
    Select(RunArgs),
    /// Print the convergence guarantees and step sizes for an objective class.
    Bounds(BoundsArgs),
    /// Write the weight-selection problem at the warm-started parameters as MIQCP text.
    ExportMiqcp(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (optimize, profile) or file (export-miqcp).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Wall-clock budget per run, in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Strong-convexity modulus; 0 for none.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Smoothness constant; omit when unbounded.
    #[arg(long = "smooth-l")]
    smooth_l: Option<f64>,
    /// Treat the objective as non-convex.
    #[arg(long)]
    nonconvex: bool,
    /// Bound on the expected squared gradient norm.
    #[arg(long)]
    g2: f64,
    /// Number of iterations.
    #[arg(long, short = 'k', required_unless_present = "time_budget")]
    iterations: Option<u64>,
    /// Optimization time in seconds; K = floor(time / cost).
    #[arg(long, requires = "cost")]
    time_budget: Option<f64>,
    /// Seconds per gradient evaluation.
    #[arg(long)]
    cost: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Initial suboptimality F(w0) - F(w*).
    #[arg(long, default_value_t = 0.0)]
    df: f64,
    /// Initial distance ||w0 - w*||.
    #[arg(long, default_value_t = 0.0)]
    dw: f64,
}

/// Marks errors that should exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config = ExperimentConfig::from_toml(&text)
        .map_err(|e| ConfigError(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        match config.seeds.first_mut() {
            Some(s) => *s = seed,
            None => config.seeds.push(seed),
        }
    }
    if let Some(t) = args.time_budget {
        config.optimizer.time_budget = t;
    }
    Ok(config)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6e}"))
}

fn optimize(args: RunArgs) -> Result<()> {
    let config = load_config(&args)?;
    let out = args.out.clone().or_else(|| config.output.clone());
    let summary = run_experiment(config, out.as_deref())?;
    println!("learning_rate\tmean_final_elbo\tsteps\twall_seconds");
    for run in &summary.runs {
        let steps: u64 = run.total_steps.iter().sum();
        let wall: f64 = run.wall_seconds.iter().sum();
        println!(
            "{:.3e}\t{:.6}\t{steps}\t{wall:.3}",
            run.learning_rate, run.mean_final_elbo
        );
    }
    if let Some(best) = summary.best() {
        println!("best learning rate: {:.3e}", best.learning_rate);
        for e in &best.selection_history {
            println!(
                "  seed {} t={:.3}s step {}: {} g2hat={} that={}",
                e.seed,
                e.wall_seconds,
                e.step,
                e.selection,
                fmt_opt(e.g2hat),
                fmt_opt(e.that)
            );
        }
    }
    if let Some(dir) = out {
        eprintln!("wrote traces and {} to {}", SUMMARY_FILE, dir.display());
    }
    Ok(())
}

fn profile(args: RunArgs) -> Result<()> {
    let config = load_config(&args)?;
    let report = Experiment::new(config)?.profile()?;
    println!(
        "estimator\tseconds\t(median of {} after {} warmup)",
        report.reps, report.warmup
    );
    println!("{}\t{:.6e}", report.labels[0], report.t0);
    for (label, t) in report.labels[1..].iter().zip(&report.t) {
        println!("{label}\t{t:.6e}");
    }
    if let Some(dir) = &args.out {
        let path = dir.join("profile.json");
        write_out(&path, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn select(args: RunArgs) -> Result<()> {
    let config = load_config(&args)?;
    let exp = Experiment::new(config)?;
    let out = exp.select_once()?;
    let d = &out.decision;
    println!("support\t{}", d.support);
    println!("labels\t{}", exp.control_variates().labels().join(","));
    println!(
        "weights\t{}",
        d.weights
            .iter()
            .map(|w| format!("{w:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("g2hat\t{:.6e}", d.g2hat);
    println!("that\t{:.6e}", d.that);
    println!("score\t{:.6e}", d.score);
    println!("base_g2\t{:.6e}", out.stats.u);
    if let Some(dir) = &args.out {
        write_out(
            &dir.join("selection.json"),
            &serde_json::to_string_pretty(d)?,
        )?;
    }
    Ok(())
}

fn export(args: RunArgs) -> Result<()> {
    let config = load_config(&args)?;
    let out = Experiment::new(config)?.select_once()?;
    let text = export_miqcp(&out.stats, &out.profile)?;
    match &args.out {
        Some(path) => write_out(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn bounds(args: BoundsArgs) -> Result<()> {
    let bad = |e: BoundsError| ConfigError(e.to_string());
    let objective =
        ObjectiveClass::new(args.lambda, args.smooth_l, !args.nonconvex).map_err(bad)?;
    let mut query = BoundQuery::new(objective, args.iterations.unwrap_or(1), args.g2)
        .with_beta(args.beta)
        .with_df(args.df)
        .with_dw(args.dw);
    if let (Some(t), Some(c)) = (args.time_budget, args.cost) {
        query = query.with_time_budget(t, c).map_err(bad)?;
    }
    println!("row\tguarantee\tstep_size");
    for row in Row::ALL {
        match (theta(&query, row), optimal_step_size(&query, row)) {
            (Ok(v), Ok(eta)) => println!("{row}\t{v}\t{eta}"),
            (Err(BoundsError::AssumptionViolation { requirement, .. }), _)
            | (_, Err(BoundsError::AssumptionViolation { requirement, .. })) => {
                println!("{row}\tnot applicable\trequires {requirement}")
            }
            (Err(e), _) | (_, Err(e)) => return Err(bad(e).into()),
        }
    }
    Ok(())
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<ExperimentError>()
                .is_some_and(ExperimentError::is_config)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(a) => optimize(a),
        Command::Profile(a) => profile(a),
        Command::Select(a) => select(a),
        Command::Bounds(a) => bounds(a),
        Command::ExportMiqcp(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
