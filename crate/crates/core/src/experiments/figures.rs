//! Linear-model studies: interpolation equivalence, the regularization
//! threshold and max-margin directions.

use serde_json::{json, Map, Value};

use super::{
    build_model, direction_gap, lambda_max, resolve_dataset, slug, Chart, ExperimentConfig,
    ExperimentOutput, Report, RunContext,
};
use crate::data::{Dataset, Task};
use crate::error::{invalid, Result};
use crate::linalg::{cosine, distance, norm, span_residual, sub, Matrix};
use crate::losses::LossKind;
use crate::models::{feature_matrix, initial_outputs, Model, ModelSpec};
use crate::oracles::{max_margin_direction, min_norm_interpolator, ridge_closed_form};
use crate::reweighting::{
    check_assumption1, iw_weights, Scheme, DEFAULT_A1_TOL, DEFAULT_A1_WINDOW,
};
use crate::trainer::{
    compare_runs, safe_learning_rate, train_observed, TrainConfig, TrainRun, TrainTrace,
};

const SIMPLEX_LIMIT: f64 = 1e-12;
const SPAN_LIMIT: f64 = 1e-8;
/// Upper bound on points drawn per chart series.
const CHART_POINTS: usize = 1500;

struct Cell {
    label: String,
    run: TrainRun,
    /// Largest `‖(θ−θ⁰) − P_X(θ−θ⁰)‖ / ‖θ−θ⁰‖` over recorded epochs.
    span_rel: f64,
    snapshots: Vec<(u64, Vec<f64>)>,
}

/// Trains one cell, tracking the span invariant against `span` and keeping a
/// parameter snapshot every `snap_every` recorded epochs.
fn run_cell(
    label: String,
    model: &dyn Model,
    data: &Dataset,
    tc: &TrainConfig,
    span: Option<&Matrix>,
    snap_every: u64,
) -> Result<Cell> {
    let mut span_rel = 0.0f64;
    let mut snapshots = Vec::new();
    let mut recorded = 0u64;
    let run = train_observed(model, data, tc, &mut |v| {
        if let Some(x) = span {
            let d = sub(v.theta, v.theta0);
            let nd = norm(&d);
            if nd > 0.0 {
                span_rel = span_rel.max(span_residual(&d, x)? / nd);
            }
        }
        if snap_every > 0 && recorded.is_multiple_of(snap_every) {
            snapshots.push((v.epoch, v.theta.to_vec()));
        }
        recorded += 1;
        Ok(())
    })?;
    Ok(Cell {
        label,
        run,
        span_rel,
        snapshots,
    })
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let stride = points.len().div_ceil(CHART_POINTS).max(1);
    let last = points.last().copied();
    let mut out: Vec<(f64, f64)> = points.into_iter().step_by(stride).collect();
    if let (Some(l), Some(o)) = (last, out.last()) {
        if *o != l {
            out.push(l);
        }
    }
    out
}

fn series(trace: &TrainTrace, f: impl Fn(&crate::trainer::TraceRow) -> f64) -> Vec<(f64, f64)> {
    thin(trace.rows.iter().map(|r| (r.epoch as f64, f(r))).collect())
}

fn weighted_risk_monotone(trace: &TrainTrace, from: usize) -> bool {
    trace.rows[from.min(trace.rows.len())..]
        .windows(2)
        .all(|w| w[1].weighted_risk <= w[0].weighted_risk * (1.0 + 1e-9))
}

fn assumption1_window(record_every: u64) -> usize {
    (DEFAULT_A1_WINDOW as u64).div_ceil(record_every).max(2) as usize
}

fn base_config(cfg: &ExperimentConfig, eta: f64, loss: LossKind, scheme: Scheme) -> TrainConfig {
    let mut tc = TrainConfig::new(eta, cfg.epochs, loss, scheme);
    tc.stop_risk = cfg.stop_risk;
    tc.record_every = cfg.record_every;
    tc.seed = cfg.seed;
    tc.mu = cfg.mu;
    tc
}

fn pairs_json(report: &crate::trainer::CompareReport) -> Value {
    Value::Array(
        report
            .pairs
            .iter()
            .map(|p| json!({"a": p.a, "b": p.b, "gap": p.gap, "cosine": p.cosine}))
            .collect(),
    )
}

/// Static-weight vector for `scheme`, if it has one.
fn static_weights(scheme: &Scheme, data: &Dataset) -> Result<Option<Vec<f64>>> {
    if scheme.is_dynamic() {
        return Ok(None);
    }
    Ok(Some(scheme.initial_state(&data.groups)?.q))
}

/// Squared-loss interpolation: every scheme converges to the same
/// min-norm interpolator.
pub fn run_fig1(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    let data = resolve_dataset(&cfg.dataset, Task::Regression, cfg.seed, ctx)?;
    let loss = cfg.losses[0];
    if loss != LossKind::Squared {
        return Err(invalid("fig1 trains with the squared loss"));
    }
    let model = build_model(&cfg.model, data.dim(), cfg.seed)?;
    let theta0 = model.initial_params().to_vec();
    let feats = feature_matrix(model.as_ref(), &data.x)?;
    let f0 = initial_outputs(model.as_ref(), &data.x)?;
    let oracle = min_norm_interpolator(&feats, &data.y, &theta0, &f0)?;
    let q_star = iw_weights(&data.groups)?
        .q
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let eta = match cfg.eta {
        Some(e) => e,
        None => safe_learning_rate(&feats, q_star)?,
    };
    let linear = matches!(cfg.model, ModelSpec::Linear);
    let expected_records = cfg.epochs / cfg.record_every + 1;
    let snap_every = (expected_records / 400).max(1);

    let cells = ctx.map(&cfg.schemes, |scheme| {
        let mut tc = base_config(cfg, eta, loss, *scheme);
        tc.mu = 0.0;
        tc.reference = Some(oracle.clone());
        run_cell(
            scheme.to_string(),
            model.as_ref(),
            &data,
            &tc,
            Some(&feats),
            snap_every,
        )
    })?;

    let mut report = Report::new("fig1", &cfg.hash(), &data.provenance);
    report.metric("eta", eta);
    report.metric("q_star", q_star);
    report.metric("oracle_norm", norm(&sub(&oracle, &theta0)));
    let window = assumption1_window(cfg.record_every);
    let mut runs = Map::new();
    for (cell, scheme) in cells.iter().zip(&cfg.schemes) {
        let l = &cell.label;
        let trace = &cell.run.trace;
        let risk = trace.final_risk().unwrap_or(f64::NAN);
        let gap = distance(&cell.run.params, &oracle);
        report.check_below(&format!("{l}.risk"), risk, 1e-10);
        report.check_below(&format!("{l}.oracle_gap"), gap, 1e-3);
        if linear {
            report.check_below(
                &format!("{l}.span_invariant"),
                cell.span_rel,
                SPAN_LIMIT * (1.0 + 1e-12),
            );
        }
        report.check_below(
            &format!("{l}.simplex"),
            cell.run.max_simplex_violation,
            SIMPLEX_LIMIT * (1.0 + 1e-12),
        );
        let mut entry = json!({
            "final_risk": risk,
            "oracle_gap": gap,
            "steps": cell.run.steps,
            "stopped_early": cell.run.stopped_early,
            "max_span_residual": cell.span_rel,
            "max_simplex_violation": cell.run.max_simplex_violation,
        });
        let mut monotone_from = 0;
        if scheme.is_dynamic() {
            match check_assumption1(&trace.weight_history(), window, DEFAULT_A1_TOL) {
                Ok(a1) => {
                    monotone_from = a1.t_eps;
                    entry["assumption1"] = json!({
                        "satisfied": a1.satisfied, "q_star": a1.q_star, "t_eps_row": a1.t_eps,
                    });
                    if matches!(scheme, Scheme::Gdro { .. }) {
                        report.check(
                            &format!("{l}.assumption1"),
                            a1.satisfied,
                            format!(
                                "weights settle within {DEFAULT_A1_TOL} from row {}",
                                a1.t_eps
                            ),
                        );
                    }
                }
                Err(e) => {
                    monotone_from = trace.rows.len();
                    entry["assumption1"] = json!({"error": e.to_string()});
                    if matches!(scheme, Scheme::Gdro { .. }) {
                        report.check(&format!("{l}.assumption1"), false, e.to_string());
                    }
                }
            }
        }
        let mono = weighted_risk_monotone(trace, monotone_from);
        entry["weighted_risk_monotone"] = json!(mono);
        report.check(
            &format!("{l}.weighted_risk_monotone"),
            mono,
            format!("nonincreasing from recorded row {monotone_from}"),
        );
        runs.insert(l.clone(), entry);
    }
    report.metric("runs", runs);

    let labels: Vec<String> = cells.iter().map(|c| c.label.clone()).collect();
    let finals: Vec<&[f64]> = cells.iter().map(|c| c.run.params.as_slice()).collect();
    let traces: Vec<&TrainTrace> = cells.iter().map(|c| &c.run.trace).collect();
    let cmp = compare_runs(&labels, &finals, &traces, &theta0)?;
    for p in &cmp.pairs {
        report.check_below(&format!("pair.{}-{}.gap", p.a, p.b), p.gap, 1e-3);
    }
    report.metric("pairs", pairs_json(&cmp));
    report.metric("max_pair_gap", cmp.max_gap());

    let mut out = ExperimentOutput::new(report);
    for c in &cells {
        out.traces
            .push((format!("fig1_{}", slug(&c.label)), c.run.trace.clone()));
    }
    // Gap to the ERM run along the common snapshot epochs.
    if let Some(base) = cells.iter().position(|c| c.label == "erm") {
        let others: Vec<&Cell> = cells
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != base)
            .map(|(_, c)| c)
            .collect();
        let mut csv = String::from("epoch");
        for c in &others {
            csv.push_str(&format!(",gap_{}", slug(&c.label)));
        }
        csv.push('\n');
        let mut chart = Chart::new("distance to the ERM weights", "epoch", "‖θ − θ_ERM‖").log_y();
        let mut pts: Vec<Vec<(f64, f64)>> = vec![Vec::new(); others.len()];
        for (epoch, theta) in &cells[base].snapshots {
            let row: Option<Vec<f64>> = others
                .iter()
                .map(|c| {
                    c.snapshots
                        .iter()
                        .find(|(e, _)| e == epoch)
                        .map(|(_, t)| distance(t, theta))
                })
                .collect();
            if let Some(row) = row {
                csv.push_str(&epoch.to_string());
                for (k, g) in row.iter().enumerate() {
                    csv.push_str(&format!(",{g:.16e}"));
                    pts[k].push((*epoch as f64, *g));
                }
                csv.push('\n');
            }
        }
        for (c, p) in others.iter().zip(pts) {
            chart = chart.with_series(&c.label, thin(p));
        }
        out.tables.push(("fig1_weight_gaps.csv".into(), csv));
        out.charts.push(("fig1_weight_gaps".into(), chart));
        out.charts.push((
            "fig1_erm_norm".into(),
            Chart::new("ERM weight norm", "epoch", "‖θ − θ⁰‖")
                .with_series("erm", series(&cells[base].run.trace, |r| r.theta_norm)),
        ));
    }
    let mut risk_chart = Chart::new("training risk", "epoch", "risk").log_y();
    for c in &cells {
        risk_chart = risk_chart.with_series(&c.label, series(&c.run.trace, |r| r.risk));
    }
    out.charts.push(("fig1_risk".into(), risk_chart));
    for c in cells.iter().filter(|c| c.label.starts_with("gdro")) {
        let mut chart = Chart::new("group weights under group DRO", "epoch", "group weight");
        for k in 0..data.groups.num_groups() {
            chart = chart.with_series(
                &format!("group {k}"),
                series(&c.run.trace, |r| r.q_groups[k]),
            );
        }
        out.charts
            .push((format!("fig1_{}_weights", slug(&c.label)), chart));
    }
    Ok(out)
}

/// Regularized training for each `μ` in `mus`: small `μ` keeps the schemes
/// together, large `μ` pulls them apart.
pub fn run_fig2(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    let data = resolve_dataset(&cfg.dataset, Task::Regression, cfg.seed, ctx)?;
    let loss = cfg.losses[0];
    if loss != LossKind::Squared {
        return Err(invalid("fig2 trains with the squared loss"));
    }
    let mus = if cfg.mus.is_empty() {
        vec![cfg.mu]
    } else {
        cfg.mus.clone()
    };
    if mus.iter().any(|m| !(*m > 0.0)) {
        return Err(invalid("fig2 needs positive regularization strengths"));
    }
    let model = build_model(&cfg.model, data.dim(), cfg.seed)?;
    let theta0 = model.initial_params().to_vec();
    let feats = feature_matrix(model.as_ref(), &data.x)?;
    let f0 = initial_outputs(model.as_ref(), &data.x)?;
    let lmax = lambda_max(&feats)?;

    let grid: Vec<(f64, Scheme)> = mus
        .iter()
        .flat_map(|&m| cfg.schemes.iter().map(move |s| (m, *s)))
        .collect();
    let cells = ctx.map(&grid, |(mu, scheme)| {
        let eta = cfg.eta.unwrap_or(1.0 / (lmax + mu));
        let mut tc = base_config(cfg, eta, loss, *scheme);
        tc.mu = *mu;
        let run = run_cell(format!("{scheme}"), model.as_ref(), &data, &tc, None, 0)?;
        Ok((eta, run))
    })?;

    let mut report = Report::new("fig2", &cfg.hash(), &data.provenance);
    let mut per_mu = Map::new();
    // (μ, max risk, min risk, max gap)
    let mut summary: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut min_gaps = Vec::new();
    let mut out_traces = Vec::new();
    let mut risk_chart =
        Chart::new("training risk under L2 regularization", "epoch", "risk").log_y();
    for (mi, &mu) in mus.iter().enumerate() {
        let block = &cells[mi * cfg.schemes.len()..(mi + 1) * cfg.schemes.len()];
        let mut runs = Map::new();
        for ((eta, cell), scheme) in block.iter().zip(&cfg.schemes) {
            let l = &cell.label;
            let risk = cell.run.trace.final_risk().unwrap_or(f64::NAN);
            let mut entry = json!({"final_risk": risk, "eta": eta, "steps": cell.run.steps});
            if let Some(q) = static_weights(scheme, &data)? {
                let ridge = ridge_closed_form(&feats, &data.y, &q, mu, &theta0, &f0)?;
                let gap = distance(&ridge, &cell.run.params);
                entry["ridge_gap"] = json!(gap);
                report.check_below(&format!("mu={mu}.{l}.ridge_gap"), gap, 1e-6);
            }
            report.check_below(
                &format!("mu={mu}.{l}.simplex"),
                cell.run.max_simplex_violation,
                SIMPLEX_LIMIT * (1.0 + 1e-12),
            );
            runs.insert(l.clone(), entry);
            out_traces.push((
                format!("fig2_mu{}_{}", slug(&mu.to_string()), slug(l)),
                cell.run.trace.clone(),
            ));
            risk_chart = risk_chart
                .with_series(&format!("{l}, μ={mu}"), series(&cell.run.trace, |r| r.risk));
        }
        let labels: Vec<String> = block.iter().map(|(_, c)| c.label.clone()).collect();
        let finals: Vec<&[f64]> = block.iter().map(|(_, c)| c.run.params.as_slice()).collect();
        let traces: Vec<&TrainTrace> = block.iter().map(|(_, c)| &c.run.trace).collect();
        let cmp = compare_runs(&labels, &finals, &traces, &theta0)?;
        let risks: Vec<f64> = cmp.final_risks.iter().map(|(_, r)| *r).collect();
        let max_risk = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_risk = risks.iter().copied().fold(f64::INFINITY, f64::min);
        let min_gap = cmp
            .pairs
            .iter()
            .map(|p| p.gap)
            .fold(f64::INFINITY, f64::min);
        per_mu.insert(
            format!("{mu}"),
            json!({
                "runs": runs, "pairs": pairs_json(&cmp),
                "max_risk": max_risk, "min_risk": min_risk,
                "max_gap": cmp.max_gap(), "min_gap": min_gap,
            }),
        );
        summary.push((mu, max_risk, min_risk, cmp.max_gap()));
        min_gaps.push(min_gap);
    }
    report.metric("mus", per_mu);
    report.metric("lambda_max", lmax);

    if summary.len() >= 2 {
        let (si, li) = (0, summary.len() - 1);
        let small = summary[si];
        let large = summary[li];
        report.check_below(&format!("mu={}.max_risk", small.0), small.1, 1e-6);
        report.check_below(&format!("mu={}.max_gap", small.0), small.3, 1e-2);
        report.check_above(&format!("mu={}.min_risk", large.0), large.2, 1e-2);
        report.check_above(
            &format!("mu={}.min_gap", large.0),
            min_gaps[li],
            10.0 * small.3,
        );
    }

    let mut out = ExperimentOutput::new(report);
    out.traces = out_traces;
    out.charts.push(("fig2_risk".into(), risk_chart));
    let mut gap_chart = Chart::new("largest pairwise weight gap", "μ", "max ‖θ_a − θ_b‖")
        .log_x()
        .log_y();
    gap_chart = gap_chart.with_series("max gap", summary.iter().map(|s| (s.0, s.3)).collect());
    out.charts.push(("fig2_gaps".into(), gap_chart));
    Ok(out)
}

/// Separable classification: logistic directions approach the max-margin
/// direction, poly-tailed losses keep a scheme-dependent direction.
pub fn run_fig3(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    let data = resolve_dataset(&cfg.dataset, Task::Classification, cfg.seed, ctx)?;
    let model = build_model(&cfg.model, data.dim(), cfg.seed)?;
    let theta0 = model.initial_params().to_vec();
    let feats = feature_matrix(model.as_ref(), &data.x)?;
    let mm = max_margin_direction(&feats, &data.y)?;
    let eta = match cfg.eta {
        Some(e) => e,
        None => 1.0 / lambda_max(&feats)?,
    };
    let linear = matches!(cfg.model, ModelSpec::Linear);

    let grid: Vec<(LossKind, Scheme)> = cfg
        .losses
        .iter()
        .flat_map(|&l| cfg.schemes.iter().map(move |s| (l, *s)))
        .collect();
    let cells = ctx.map(&grid, |(loss, scheme)| {
        let mut tc = base_config(cfg, eta, *loss, *scheme);
        tc.direction_ref = Some(mm.direction.clone());
        run_cell(
            format!("{loss}/{scheme}"),
            model.as_ref(),
            &data,
            &tc,
            linear.then_some(&feats),
            0,
        )
    })?;

    let mut report = Report::new("fig3", &cfg.hash(), &data.provenance);
    report.metric("eta", eta);
    report.metric("margin", mm.margin);
    report.metric("support_set", &mm.support_set);
    let mut runs = Map::new();
    let mut erm_iw_gap: Vec<(LossKind, f64)> = Vec::new();
    let mut cos_chart = Chart::new(
        "alignment with the max-margin direction",
        "epoch",
        "1 − cos",
    )
    .log_x()
    .log_y();
    let mut norm_chart = Chart::new("weight norm growth", "epoch", "‖θ − θ⁰‖").log_x();
    for (li, loss) in cfg.losses.iter().enumerate() {
        let block = &cells[li * cfg.schemes.len()..(li + 1) * cfg.schemes.len()];
        for cell in block {
            let l = &cell.label;
            let trace = &cell.run.trace;
            let disp = sub(&cell.run.params, &theta0);
            let cos = cosine(&disp, &mm.direction);
            let rows = &trace.rows;
            let tail = &rows[rows.len() - (rows.len() / 10).max(2).min(rows.len())..];
            let growing = tail.windows(2).all(|w| w[1].theta_norm > w[0].theta_norm);
            let risk = trace.final_risk().unwrap_or(f64::NAN);
            runs.insert(
                l.clone(),
                json!({
                    "cosine": cos, "norm": norm(&disp), "norm_increasing": growing,
                    "final_risk": risk, "saturated": risk == 0.0, "steps": cell.run.steps,
                    "max_span_residual": cell.span_rel,
                }),
            );
            if *loss == LossKind::Logistic {
                report.check_above(&format!("{l}.cosine"), cos, 0.999);
                report.check(
                    &format!("{l}.norm_increasing"),
                    growing,
                    "‖θ‖ strictly increasing over the final 10%",
                );
            }
            if linear {
                report.check_below(
                    &format!("{l}.span_invariant"),
                    cell.span_rel,
                    SPAN_LIMIT * (1.0 + 1e-12),
                );
            }
            report.check_below(
                &format!("{l}.simplex"),
                cell.run.max_simplex_violation,
                SIMPLEX_LIMIT * (1.0 + 1e-12),
            );
            cos_chart = cos_chart.with_series(
                l,
                series(trace, |r| 1.0 - r.cos_ref.unwrap_or(f64::NAN))
                    .into_iter()
                    .filter(|p| p.0 > 0.0)
                    .collect(),
            );
            norm_chart = norm_chart.with_series(
                l,
                series(trace, |r| r.theta_norm)
                    .into_iter()
                    .filter(|p| p.0 > 0.0)
                    .collect(),
            );
        }
        let find = |s: &Scheme| {
            block
                .iter()
                .zip(&cfg.schemes)
                .find(|(_, x)| *x == s)
                .map(|(c, _)| c)
        };
        let mut gaps = Map::new();
        for i in 0..block.len() {
            for j in i + 1..block.len() {
                let g = direction_gap(&block[i].run.params, &block[j].run.params, &theta0);
                gaps.insert(format!("{}-{}", cfg.schemes[i], cfg.schemes[j]), json!(g));
            }
        }
        runs.insert(format!("{loss}/direction_gaps"), Value::Object(gaps));
        if let (Some(e), Some(w)) = (find(&Scheme::Erm), find(&Scheme::Iw)) {
            erm_iw_gap.push((*loss, direction_gap(&e.run.params, &w.run.params, &theta0)));
        }
    }
    report.metric("runs", runs);
    let log_gap = erm_iw_gap
        .iter()
        .find(|(l, _)| *l == LossKind::Logistic)
        .map(|x| x.1);
    let poly_gap = erm_iw_gap
        .iter()
        .find(|(l, _)| matches!(l, LossKind::PolyTailed { .. }))
        .map(|x| x.1);
    report.metric(
        "erm_iw_direction_gap",
        erm_iw_gap
            .iter()
            .map(|(l, g)| (l.to_string(), json!(g)))
            .collect::<Map<String, Value>>(),
    );
    if let (Some(lg), Some(pg)) = (log_gap, poly_gap) {
        let ratio = pg / lg;
        report.metric("gap_ratio", ratio);
        report.check_above("polytailed_gap_exceeds_logistic", pg, lg);
        report.check_above("gap_ratio", ratio, 2.0 * (1.0 - 1e-12));
    }

    let mut out = ExperimentOutput::new(report);
    for c in &cells {
        out.traces
            .push((format!("fig3_{}", slug(&c.label)), c.run.trace.clone()));
    }
    out.charts.push(("fig3_direction".into(), cos_chart));
    out.charts.push(("fig3_norm".into(), norm_chart));
    Ok(out)
}
