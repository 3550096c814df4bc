//! Generic scheme × loss comparison, with order-invariance and sign-agreement
//! checks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::{
    build_model, lambda_max, median, resolve_dataset, slug, unit_ball_points, ExperimentConfig,
    ExperimentOutput, Report, RunContext,
};
use crate::data::{Dataset, Task};
use crate::error::{invalid, Result};
use crate::linalg::{distance, dot};
use crate::losses::LossKind;
use crate::models::{feature_matrix, LinearizedModel, Model, ModelSpec, WideNet};
use crate::oracles::max_margin_direction;
use crate::reweighting::Scheme;
use crate::trainer::{compare_runs, train, TrainConfig, TrainRun, TrainTrace};

const ORDER_TOL: f64 = 1e-9;

/// `(scheme, agreeing points, points above the threshold)`
type Agreement = (String, usize, usize);

enum Job {
    Cell(usize, Scheme),
    Permuted(usize, u64),
}

fn task_for(loss: LossKind) -> Task {
    if loss.is_classification() {
        Task::Classification
    } else {
        Task::Regression
    }
}

pub fn run_compare(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    let mut datasets = Vec::with_capacity(cfg.losses.len());
    for loss in &cfg.losses {
        datasets.push(resolve_dataset(
            &cfg.dataset,
            task_for(*loss),
            cfg.seed,
            ctx,
        )?);
    }
    let dim = datasets[0].dim();
    let model = build_model(&cfg.model, dim, cfg.seed)?;
    let theta0 = model.initial_params().to_vec();
    let etas: Vec<f64> = datasets
        .iter()
        .map(|d| match cfg.eta {
            Some(e) => Ok(e),
            None => Ok(1.0 / (lambda_max(&feature_matrix(model.as_ref(), &d.x)?)? + cfg.mu)),
        })
        .collect::<Result<_>>()?;
    let config_for = |li: usize, scheme: Scheme| {
        let mut tc = TrainConfig::new(etas[li], cfg.epochs, cfg.losses[li], scheme);
        tc.mu = cfg.mu;
        tc.stop_risk = cfg.stop_risk;
        tc.record_every = cfg.record_every;
        tc.seed = cfg.seed;
        tc
    };
    let permutation = |n: usize, seed: u64| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    };

    let mut jobs = Vec::new();
    for li in 0..cfg.losses.len() {
        for s in &cfg.schemes {
            jobs.push(Job::Cell(li, *s));
        }
    }
    for &seed in cfg.seeds.iter().filter(|&&s| s != cfg.seed) {
        jobs.push(Job::Permuted(0, seed));
    }
    let results: Vec<TrainRun> = ctx.map(&jobs, |job| match job {
        Job::Cell(li, s) => train(model.as_ref(), &datasets[*li], &config_for(*li, *s)),
        Job::Permuted(li, seed) => {
            let order = permutation(datasets[*li].num_samples(), *seed);
            let permuted = datasets[*li].permuted(&order)?;
            train(model.as_ref(), &permuted, &config_for(*li, cfg.schemes[0]))
        }
    })?;

    let mut report = Report::new("compare", &cfg.hash(), &datasets[0].provenance);
    report.metric("etas", &etas);
    let ns = cfg.schemes.len();
    let mut per_loss = Map::new();
    let mut out_traces = Vec::new();
    for (li, loss) in cfg.losses.iter().enumerate() {
        let block = &results[li * ns..(li + 1) * ns];
        let labels: Vec<String> = cfg.schemes.iter().map(|s| s.to_string()).collect();
        let finals: Vec<&[f64]> = block.iter().map(|r| r.params.as_slice()).collect();
        let traces: Vec<&TrainTrace> = block.iter().map(|r| &r.trace).collect();
        let cmp = compare_runs(&labels, &finals, &traces, &theta0)?;
        per_loss.insert(
            loss.to_string(),
            json!({
                "pairs": cmp.pairs.iter().map(|p| json!({"a": p.a, "b": p.b, "gap": p.gap, "cosine": p.cosine})).collect::<Vec<Value>>(),
                "final_risks": cmp.final_risks.iter().map(|(l, r)| (l.clone(), json!(r))).collect::<Map<String, Value>>(),
                "max_gap": cmp.max_gap(),
            }),
        );
        for (r, label) in block.iter().zip(&labels) {
            report.check_below(
                &format!("{loss}/{label}.simplex"),
                r.max_simplex_violation,
                1e-12 * (1.0 + 1e-12),
            );
            out_traces.push((
                format!("compare_{}_{}", slug(&loss.to_string()), slug(label)),
                r.trace.clone(),
            ));
        }
    }
    report.metric("losses", per_loss);

    let mut order_gaps = Map::new();
    for (job, run) in jobs.iter().zip(&results).skip(cfg.losses.len() * ns) {
        if let Job::Permuted(li, seed) = job {
            let gap = distance(&run.params, &results[li * ns].params);
            order_gaps.insert(seed.to_string(), json!(gap));
            report.check_below(
                &format!("order_invariance.seed={seed}"),
                gap,
                ORDER_TOL * (1.0 + 1e-12),
            );
        }
    }
    report.metric("order_gaps", order_gaps);

    if let (ModelSpec::Mlp(_), true) = (&cfg.model, cfg.mu > 0.0) {
        if let Some(li) = cfg.losses.iter().position(|l| *l == LossKind::Logistic) {
            let net = build_wide(&cfg.model, dim, cfg.seed)?;
            let block = &results[li * ns..(li + 1) * ns];
            let sign = sign_agreement(&net, &datasets[li], block, &cfg.schemes, cfg)?;
            report.metric("sign_agreement", sign.0);
            for (label, agree, total) in sign.1 {
                report.check(
                    &format!("sign_agreement.{label}"),
                    total > 0 && agree == total,
                    format!("{agree} of {total} high-margin test points agree"),
                );
            }
        }
    }

    let mut out = ExperimentOutput::new(report);
    out.traces = out_traces;
    Ok(out)
}

fn build_wide(spec: &ModelSpec, dim: usize, seed: u64) -> Result<WideNet> {
    match spec {
        ModelSpec::Mlp(arch) if arch.input_dim == dim => WideNet::new(arch.clone(), seed),
        _ => Err(invalid("sign agreement needs a network matching the data")),
    }
}

/// Compares the sign of each trained network with the max-margin predictor
/// over the initial gradient features, on test points whose max-margin score
/// is above the median magnitude.
fn sign_agreement(
    net: &WideNet,
    data: &Dataset,
    runs: &[TrainRun],
    schemes: &[Scheme],
    cfg: &ExperimentConfig,
) -> Result<(Value, Vec<Agreement>)> {
    let feats = feature_matrix(net, &data.x)?;
    let mm = max_margin_direction(&feats, &data.y)?;
    let count = if cfg.test_points > 0 {
        cfg.test_points.max(50)
    } else {
        200
    };
    let tests = unit_ball_points(data.dim(), count, cfg.seed.wrapping_add(7))?.columns();
    let lin = LinearizedModel::new(net.clone(), &data.x)?;
    let f_mm: Vec<f64> = tests
        .iter()
        .map(|x| Ok(dot(&mm.direction, &lin.feature(x)?)))
        .collect::<Result<_>>()?;
    let threshold = median(&f_mm.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let mut rates = Vec::new();
    let mut detail = Map::new();
    for (run, scheme) in runs.iter().zip(schemes) {
        let mut agree = 0usize;
        let mut total = 0usize;
        for (x, f) in tests.iter().zip(&f_mm) {
            if f.abs() > threshold {
                total += 1;
                if net.predict(&run.params, x)?.signum() == f.signum() {
                    agree += 1;
                }
            }
        }
        let rate = agree as f64 / total.max(1) as f64;
        detail.insert(
            scheme.to_string(),
            json!({"agree": agree, "total": total, "rate": rate}),
        );
        rates.push((scheme.to_string(), agree, total));
    }
    let value = json!({"threshold": threshold, "margin": mm.margin, "schemes": detail});
    Ok((value, rates))
}
