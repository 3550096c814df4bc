//! Wide-network studies: kernel convergence at initialization and the gap
//! between a network and its linearization during training.

use serde_json::{json, Map};

use super::{
    lambda_max_sym, log_log_slope, median, mlp_arch, resolve_dataset, strictly_decreasing,
    unit_ball_points, with_width, Chart, ExperimentConfig, ExperimentOutput, Report, RunContext,
};
use crate::data::Task;
use crate::error::{invalid, Result};
use crate::linalg::{extreme_eigenvalues, Matrix};
use crate::losses::LossKind;
use crate::models::{LinearizedModel, Model, WideNet};
use crate::oracles::{empirical_ntk_gram, limiting_kernel_gram, KernelSpec};
use crate::reweighting::Scheme;
use crate::trainer::{train, train_lockstep, TrainConfig, TrainTrace};

fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn width_chart(title: &str, y_label: &str, widths: &[usize], per_width: &[Vec<f64>]) -> Chart {
    let pts = widths
        .iter()
        .zip(per_width)
        .map(|(w, v)| (*w as f64, median(v)))
        .collect();
    Chart::new(title, "width", y_label)
        .log_x()
        .log_y()
        .with_series("median", pts)
}

/// Empirical NTK Gram at initialization against the analytic limit.
pub fn run_ntk_convergence(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    let arch = mlp_arch(&cfg.model)?;
    let spec = KernelSpec::for_architecture(arch)?;
    if cfg.widths.is_empty() {
        return Err(invalid("at least one width is required"));
    }
    let data = resolve_dataset(&cfg.dataset, Task::Regression, cfg.seed, ctx)?;
    if data.dim() != arch.input_dim {
        return Err(invalid(
            "dataset dimension does not match the network input",
        ));
    }
    let limit = limiting_kernel_gram(&spec, &data.x)?;
    let limit_norm = limit.frobenius_norm();

    let grid: Vec<(usize, u64)> = cfg
        .widths
        .iter()
        .flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s)))
        .collect();
    let cells = ctx.map(&grid, |&(width, seed)| {
        let net = WideNet::new(with_width(arch, width)?, seed)?;
        let k = empirical_ntk_gram(&net, &data.x)?;
        let symmetric = k.is_symmetric(1e-12 * k.max_abs().max(1e-300));
        let (_, lmin) = extreme_eigenvalues(&k, 1e-13 * k.max_abs().max(1e-300))?;
        let psd = lmin >= -1e-10 * k.max_abs();
        Ok((
            frobenius_diff(&k, &limit) / limit_norm,
            symmetric && psd,
            lmin,
        ))
    })?;

    let mut report = Report::new("ntk-convergence", &cfg.hash(), &data.provenance);
    let ns = cfg.seeds.len();
    let per_width: Vec<Vec<f64>> = (0..cfg.widths.len())
        .map(|i| cells[i * ns..(i + 1) * ns].iter().map(|c| c.0).collect())
        .collect();
    let medians: Vec<f64> = per_width.iter().map(|v| median(v)).collect();
    let mut widths_json = Map::new();
    for (i, w) in cfg.widths.iter().enumerate() {
        let block = &cells[i * ns..(i + 1) * ns];
        let all_psd = block.iter().all(|c| c.1);
        widths_json.insert(
            w.to_string(),
            json!({
                "median_rel_error": medians[i],
                "rel_errors": per_width[i],
                "min_eigenvalue": block.iter().map(|c| c.2).fold(f64::INFINITY, f64::min),
            }),
        );
        report.check(
            &format!("width={w}.symmetric_psd"),
            all_psd,
            "empirical Gram symmetric PSD for every seed",
        );
    }
    report.metric("widths", widths_json);
    report.metric("limit_frobenius_norm", limit_norm);
    report.check(
        "median_error_decreasing",
        strictly_decreasing(&medians),
        format!("medians {medians:?}"),
    );
    if cfg.widths.len() >= 2 {
        let ws: Vec<f64> = cfg.widths.iter().map(|w| *w as f64).collect();
        report.metric("log_log_slope", log_log_slope(&ws, &medians));
    }
    let mut out = ExperimentOutput::new(report);
    let mut csv = String::from("width,seed,rel_error\n");
    for ((w, s), c) in grid.iter().zip(&cells) {
        csv.push_str(&format!("{w},{s},{:.16e}\n", c.0));
    }
    out.tables.push(("ntk_errors.csv".into(), csv));
    out.charts.push((
        "ntk_convergence".into(),
        width_chart(
            "empirical vs limiting kernel",
            "relative Frobenius error",
            &cfg.widths,
            &per_width,
        ),
    ));
    Ok(out)
}

struct GapRun {
    sup_gap: f64,
    initial_gap: f64,
    nn_trace: TrainTrace,
    lin_trace: TrainTrace,
    gap_curve: Vec<(f64, f64)>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn outputs(model: &dyn Model, theta: &[f64], points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.iter().map(|x| model.predict(theta, x)).collect()
}

/// Sup over recorded epochs of `|f − f_lin|` at the test points, with both
/// models driven by the network's weight sequence.
pub fn run_approx_scaling(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    let arch = mlp_arch(&cfg.model)?;
    let spec = KernelSpec::for_architecture(arch)?;
    if cfg.widths.is_empty() {
        return Err(invalid("at least one width is required"));
    }
    let data = resolve_dataset(&cfg.dataset, Task::Regression, cfg.seed, ctx)?;
    if data.dim() != arch.input_dim {
        return Err(invalid(
            "dataset dimension does not match the network input",
        ));
    }
    let loss = cfg.losses[0];
    let scheme = cfg.schemes[0];
    let tests = unit_ball_points(arch.input_dim, cfg.test_points, cfg.seed.wrapping_add(1))?;
    let test_cols = tests.columns();
    let mut all_inputs = data.x.columns();
    all_inputs.extend(test_cols.iter().cloned());
    let all_inputs = Matrix::from_columns(&all_inputs)?;
    let eta = match cfg.eta {
        Some(e) => e,
        None => 1.0 / lambda_max_sym(&limiting_kernel_gram(&spec, &data.x)?)?,
    };
    let train_cfg = |mu: f64, scheme: Scheme| {
        let mut tc = TrainConfig::new(eta, cfg.epochs, loss, scheme);
        tc.mu = mu;
        tc.stop_risk = cfg.stop_risk;
        tc.record_every = cfg.record_every;
        tc.seed = cfg.seed;
        tc
    };

    let grid: Vec<(usize, u64)> = cfg
        .widths
        .iter()
        .flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s)))
        .collect();
    let cells = ctx.map(&grid, |&(width, seed)| {
        let net = WideNet::new(with_width(arch, width)?, seed)?;
        let lin = LinearizedModel::new(net.clone(), &all_inputs)?;
        let tc = train_cfg(0.0, scheme);
        let mut nn_out = Vec::new();
        let mut sup_gap = 0.0f64;
        let mut initial_gap = f64::NAN;
        let mut gap_curve = Vec::new();
        let runs = train_lockstep(&[&net, &lin], &data, &tc, &mut |v| {
            if v.model_index == 0 {
                nn_out = outputs(&net, v.theta, &test_cols)?;
            } else {
                let g = max_abs_diff(&nn_out, &outputs(&lin, v.theta, &test_cols)?);
                if v.epoch == 0 {
                    initial_gap = g;
                }
                sup_gap = sup_gap.max(g);
                gap_curve.push((v.epoch as f64, g));
            }
            Ok(())
        })?;
        let mut runs = runs.into_iter();
        let nn_trace = runs.next().expect("network run").trace;
        let lin_trace = runs.next().expect("linearized run").trace;
        Ok(GapRun {
            sup_gap,
            initial_gap,
            nn_trace,
            lin_trace,
            gap_curve,
        })
    })?;

    let mut report = Report::new("approx-scaling", &cfg.hash(), &data.provenance);
    report.metric("eta", eta);
    let ns = cfg.seeds.len();
    let per_width: Vec<Vec<f64>> = (0..cfg.widths.len())
        .map(|i| {
            cells[i * ns..(i + 1) * ns]
                .iter()
                .map(|c| c.sup_gap)
                .collect()
        })
        .collect();
    let medians: Vec<f64> = per_width.iter().map(|v| median(v)).collect();
    let mut widths_json = Map::new();
    for (i, w) in cfg.widths.iter().enumerate() {
        let block = &cells[i * ns..(i + 1) * ns];
        widths_json.insert(
            w.to_string(),
            json!({
                "median_sup_gap": medians[i],
                "sup_gaps": per_width[i],
                "final_risks": block.iter().map(|c| c.nn_trace.final_risk()).collect::<Vec<_>>(),
            }),
        );
    }
    report.metric("widths", widths_json);
    let initial = cells.iter().map(|c| c.initial_gap).fold(0.0, f64::max);
    report.check_below("initial_gap", initial, 1e-12);
    report.check(
        "median_gap_decreasing",
        strictly_decreasing(&medians),
        format!("medians {medians:?}"),
    );
    if cfg.widths.len() >= 2 {
        let ws: Vec<f64> = cfg.widths.iter().map(|w| *w as f64).collect();
        let slope = log_log_slope(&ws, &medians);
        report.metric("log_log_slope", slope);
        report.check_below("log_log_slope", slope, -0.2 * (1.0 - 1e-12));
    }

    // Regularized GRW against unregularized ERM on the widest network:
    // shrinking μ by √10 tightens the reachable risk roughly 10×.
    if cfg.mu > 0.0 && loss == LossKind::Squared {
        let width = *cfg.widths.iter().max().expect("validated widths");
        let net = WideNet::new(with_width(arch, width)?, cfg.seeds[0])?;
        let mus = [cfg.mu, cfg.mu / 10f64.sqrt()];
        let jobs: Vec<(f64, Scheme)> = vec![(0.0, Scheme::Erm), (mus[0], scheme), (mus[1], scheme)];
        let runs = ctx.map(&jobs, |&(mu, s)| {
            let run = train(&net, &data, &train_cfg(mu, s))?;
            let f = outputs(&net, &run.params, &test_cols)?;
            Ok((run.trace.final_risk().unwrap_or(f64::NAN), f))
        })?;
        let gaps: Vec<f64> = runs[1..]
            .iter()
            .map(|r| max_abs_diff(&r.1, &runs[0].1))
            .collect();
        report.metric(
            "regularized_vs_erm",
            json!({
                "width": width, "mus": mus, "risks": [runs[1].0, runs[2].0],
                "erm_risk": runs[0].0, "test_gaps": gaps,
                "risk_ratio": runs[1].0 / runs[2].0,
            }),
        );
        report.check_below("regularized_gap_shrinks", gaps[1], gaps[0]);
    }

    let mut out = ExperimentOutput::new(report);
    let mut csv = String::from("width,seed,sup_gap\n");
    for ((w, s), c) in grid.iter().zip(&cells) {
        csv.push_str(&format!("{w},{s},{:.16e}\n", c.sup_gap));
    }
    out.tables.push(("approx_gaps.csv".into(), csv));
    out.charts.push((
        "approx_scaling".into(),
        width_chart(
            "network vs linearization",
            "sup |f − f_lin|",
            &cfg.widths,
            &per_width,
        ),
    ));
    let mut curve = Chart::new(
        "gap during training (first seed)",
        "epoch",
        "max |f − f_lin|",
    );
    for (i, w) in cfg.widths.iter().enumerate() {
        let c = &cells[i * ns];
        out.traces
            .push((format!("approx_w{w}_nn"), c.nn_trace.clone()));
        out.traces
            .push((format!("approx_w{w}_lin"), c.lin_trace.clone()));
        let stride = c.gap_curve.len().div_ceil(1500).max(1);
        curve = curve.with_series(
            &format!("width {w}"),
            c.gap_curve.iter().copied().step_by(stride).collect(),
        );
    }
    out.charts.push(("approx_gap_curves".into(), curve));
    Ok(out)
}
