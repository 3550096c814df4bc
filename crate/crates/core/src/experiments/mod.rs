//! Experiment runners that reproduce the reweighting studies end to end.
//!
//! Each runner returns an [`ExperimentOutput`]: a JSON [`Report`] with
//! explicit pass/fail assertions, the training traces, extra CSV tables and
//! SVG charts. Independent cells (scheme × seed × width) run on a rayon pool
//! bounded by [`RunContext::jobs`]; results are assembled in a fixed order so
//! outputs are bit-identical for a given config.

mod compare;
pub mod config;
mod figures;
pub mod report;
pub mod svg;
mod wide;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use compare::run_compare;
pub use config::{DatasetSpec, ExperimentConfig, ExperimentId};
pub use figures::{run_fig1, run_fig2, run_fig3};
pub use report::{Assertion, Report};
pub use svg::{Chart, Series};
pub use wide::{run_approx_scaling, run_ntk_convergence};

use crate::data::{
    export_trace, load_mnist_from_data_dir, paper_subset, random_unit_vector, separable_six,
    synth_groups, synthetic_six, Dataset, SynthSpec, Task, TraceFormat,
};
use crate::error::{invalid, GrwError, Result};
use crate::linalg::{extreme_eigenvalues, gram, norm, Matrix};
use crate::models::{Architecture, LinearModel, Model, ModelSpec, WideNet};
use crate::trainer::TrainTrace;

/// Execution settings that do not change results.
#[derive(Debug, Clone)]
pub struct RunContext {
    /// Upper bound on concurrently running cells.
    pub jobs: usize,
    /// Use synthetic stand-ins even when IDX files are available.
    pub synthetic: bool,
}

impl Default for RunContext {
    fn default() -> Self {
        Self {
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            synthetic: false,
        }
    }
}

impl RunContext {
    pub fn new(jobs: usize, synthetic: bool) -> Self {
        Self {
            jobs: jobs.max(1),
            synthetic,
        }
    }

    /// Maps `f` over `items` on a pool of at most `jobs` threads, keeping order.
    pub fn map<T: Sync, R: Send>(
        &self,
        items: &[T],
        f: impl Fn(&T) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| items.par_iter().map(&f).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: Report,
    /// `(file stem, trace)`, written as `traces/<stem>.csv`.
    pub traces: Vec<(String, TrainTrace)>,
    /// `(file name, CSV body)` for derived tables.
    pub tables: Vec<(String, String)>,
    /// `(file stem, chart)`, written as `<stem>.svg`.
    pub charts: Vec<(String, Chart)>,
}

impl ExperimentOutput {
    fn new(report: Report) -> Self {
        Self {
            report,
            traces: Vec::new(),
            tables: Vec::new(),
            charts: Vec::new(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    cfg.validate()?;
    log::info!("running {} (config {})", cfg.experiment, cfg.hash());
    match cfg.experiment {
        ExperimentId::Fig1 => run_fig1(cfg, ctx),
        ExperimentId::Fig2 => run_fig2(cfg, ctx),
        ExperimentId::Fig3 => run_fig3(cfg, ctx),
        ExperimentId::NtkConvergence => run_ntk_convergence(cfg, ctx),
        ExperimentId::ApproxScaling => run_approx_scaling(cfg, ctx),
        ExperimentId::Compare => run_compare(cfg, ctx),
    }
}

/// Writes `report.json`, `config.txt`, `traces/*.csv`, tables and charts into `dir`.
pub fn write_output(output: &ExperimentOutput, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), output.report.to_json())?;
    fs::write(dir.join("config.txt"), cfg.to_config_text())?;
    for (stem, trace) in &output.traces {
        export_trace(
            trace,
            &dir.join("traces").join(format!("{stem}.csv")),
            TraceFormat::Csv,
        )?;
    }
    for (name, body) in &output.tables {
        fs::write(dir.join(name), body)?;
    }
    for (stem, chart) in &output.charts {
        fs::write(dir.join(format!("{stem}.svg")), chart.to_svg())?;
    }
    Ok(())
}

/// Materializes a dataset spec. The digit subset falls back to its synthetic
/// stand-in when `ctx.synthetic` is set or the IDX files are missing.
pub fn resolve_dataset(
    spec: &DatasetSpec,
    task: Task,
    seed: u64,
    ctx: &RunContext,
) -> Result<Dataset> {
    let fallback = || match task {
        Task::Regression => synthetic_six(seed, task),
        Task::Classification => separable_six(seed),
    };
    match spec {
        DatasetSpec::Mnist => {
            if ctx.synthetic {
                return fallback();
            }
            match load_mnist_from_data_dir()? {
                Some(store) => paper_subset(&store, task),
                None => {
                    log::warn!(
                        "no MNIST IDX files under {}; using the synthetic stand-in",
                        crate::data::data_dir().display()
                    );
                    fallback()
                }
            }
        }
        DatasetSpec::Six => synthetic_six(seed, task),
        DatasetSpec::Separable => separable_six(seed),
        DatasetSpec::Blobs { dim, sizes, noise } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10B);
            let means = sizes
                .iter()
                .map(|_| {
                    random_unit_vector(*dim, &mut rng)
                        .into_iter()
                        .map(|v| 0.5 * v)
                        .collect()
                })
                .collect();
            synth_groups(&SynthSpec {
                dim: *dim,
                sizes: sizes.clone(),
                means,
                noise: *noise,
                seed,
                classification: task == Task::Classification,
            })
        }
    }
}

/// Builds the model: linear models start at zero, networks from `seed`.
pub fn build_model(spec: &ModelSpec, input_dim: usize, seed: u64) -> Result<Box<dyn Model>> {
    match spec {
        ModelSpec::Linear => Ok(Box::new(LinearModel::zeros(input_dim))),
        ModelSpec::Mlp(arch) => {
            if arch.input_dim != input_dim {
                return Err(invalid(format!(
                    "model expects {}-dimensional inputs, dataset has {input_dim}",
                    arch.input_dim
                )));
            }
            Ok(Box::new(WideNet::new(arch.clone(), seed)?))
        }
    }
}

pub(crate) fn mlp_arch(spec: &ModelSpec) -> Result<&Architecture> {
    match spec {
        ModelSpec::Mlp(a) => Ok(a),
        ModelSpec::Linear => Err(GrwError::Unsupported(
            "this experiment needs a network model (mlp:…), not a linear one".into(),
        )),
    }
}

pub(crate) fn with_width(arch: &Architecture, width: usize) -> Result<Architecture> {
    Architecture::new(
        arch.input_dim,
        vec![width; arch.depth()],
        arch.beta,
        arch.activation,
    )
}

/// Largest eigenvalue of `FᵀF`.
pub(crate) fn lambda_max(f: &Matrix) -> Result<f64> {
    lambda_max_sym(&gram(f)?)
}

pub(crate) fn lambda_max_sym(k: &Matrix) -> Result<f64> {
    Ok(extreme_eigenvalues(k, 1e-12 * k.max_abs().max(1e-300))?.0)
}

/// `count` deterministic points with norms in `[0.5, 1]`, as columns.
pub fn unit_ball_points(dim: usize, count: usize, seed: u64) -> Result<Matrix> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57);
    let cols: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let r = rng.random_range(0.5..=1.0);
            random_unit_vector(dim, &mut rng)
                .into_iter()
                .map(|v| r * v)
                .collect()
        })
        .collect();
    if cols.is_empty() {
        return Err(invalid("need at least one test point"));
    }
    Matrix::from_columns(&cols)
}

/// `‖a/‖a‖ − b/‖b‖‖` for the displacements from `theta0`.
pub(crate) fn direction_gap(a: &[f64], b: &[f64], theta0: &[f64]) -> f64 {
    let da: Vec<f64> = a.iter().zip(theta0).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = b.iter().zip(theta0).map(|(x, y)| x - y).collect();
    let (na, nb) = (norm(&da), norm(&db));
    if na == 0.0 || nb == 0.0 {
        return f64::NAN;
    }
    da.iter()
        .zip(&db)
        .map(|(x, y)| (x / na - y / nb).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// File-name-safe label.
pub(crate) fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub(crate) fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

pub(crate) fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}
