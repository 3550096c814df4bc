use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use grwlab_core::experiments::{
    run_experiment, write_output, ExperimentConfig, ExperimentId, RunContext,
};

/// Runs reweighting experiments and writes reports, traces and charts.
///
/// Exits with 0 when every assertion in the report passes, 1 when some fail
/// and 2 on errors.
#[derive(Debug, Parser)]
#[command(name = "grwlab", version)]
struct Cli {
    /// fig1, fig2, fig3, ntk-convergence, approx-scaling or compare
    experiment: ExperimentId,
    /// Key-value config file; defaults for the experiment when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of concurrent training runs
    #[arg(long)]
    jobs: Option<usize>,
    /// Use synthetic stand-ins instead of IDX digit files
    #[arg(long)]
    synthetic: bool,
    /// Override one config key, e.g. `--set epochs=1000`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config and exit
    #[arg(long)]
    print_config: bool,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => ExperimentConfig::defaults(cli.experiment),
    };
    if cfg.experiment != cli.experiment {
        bail!(
            "config describes experiment {} but {} was requested",
            cfg.experiment,
            cli.experiment
        );
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_config_text());
        return Ok(true);
    }
    let mut ctx = RunContext::default();
    if let Some(j) = cli.jobs {
        ctx.jobs = j.max(1);
    }
    ctx.synthetic = cli.synthetic;

    let started = std::time::Instant::now();
    let output = run_experiment(&cfg, &ctx)?;
    write_output(&output, &cfg, &cfg.out)
        .with_context(|| format!("writing {}", cfg.out.display()))?;

    let report = &output.report;
    println!(
        "{} on {} (config {})",
        report.experiment,
        report.dataset,
        &report.config_hash[..12]
    );
    for a in &report.assertions {
        println!(
            "  [{}] {}: {}",
            if a.passed { "pass" } else { "FAIL" },
            a.name,
            a.detail
        );
    }
    let failed = report.assertions.iter().filter(|a| !a.passed).count();
    println!(
        "{} of {} assertions passed in {:.1}s; output in {}",
        report.assertions.len() - failed,
        report.assertions.len(),
        started.elapsed().as_secs_f64(),
        cfg.out.display()
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
