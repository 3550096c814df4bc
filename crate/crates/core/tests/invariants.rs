//! Training invariants as properties over random small problems.

use grwlab_core::data::{parse_trace_csv, trace_to_csv, Dataset};
use grwlab_core::linalg::{extreme_eigenvalues, gram, norm, span_residual, sub, Matrix};
use grwlab_core::losses::LossKind;
use grwlab_core::models::LinearModel;
use grwlab_core::reweighting::{simplex_violation, GroupInfo, Scheme};
use grwlab_core::trainer::{train, train_observed, TrainConfig};
use proptest::prelude::*;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::Erm),
        Just(Scheme::Iw),
        (0.001f64..1.0).prop_map(|nu| Scheme::Gdro { nu }),
        (0.1f64..1.0).prop_map(|alpha| Scheme::Cvar { alpha }),
    ]
}

fn loss() -> impl Strategy<Value = LossKind> {
    prop_oneof![
        Just(LossKind::Squared),
        Just(LossKind::Logistic),
        Just(LossKind::PolyTailed {
            alpha: 1.0,
            beta: 0.0
        }),
    ]
}

/// `n` samples in `d ≥ n` dimensions inside the unit ball, two groups.
fn problem() -> impl Strategy<Value = (Matrix, Vec<f64>, Vec<usize>)> {
    (2usize..6, 0usize..6).prop_flat_map(|(n, extra)| {
        let d = n + extra;
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(prop::bool::ANY, n),
            prop::collection::vec(0usize..2, n),
        )
            .prop_map(|(cols, signs, mut labels)| {
                let cols: Vec<Vec<f64>> = cols
                    .into_iter()
                    .map(|c| {
                        let s = norm(&c).max(1e-3) * 1.25;
                        c.iter().map(|v| v / s).collect()
                    })
                    .collect();
                labels[0] = 0;
                labels[1] = 1;
                let y = signs.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
                (Matrix::from_columns(&cols).unwrap(), y, labels)
            })
    })
}

fn dataset(x: &Matrix, y: &[f64], labels: &[usize], loss: LossKind) -> Dataset {
    Dataset::new(
        x.clone(),
        y.to_vec(),
        GroupInfo::new(labels.to_vec(), 2).unwrap(),
        "random",
        loss.is_classification(),
    )
    .unwrap()
}

fn eta_for(x: &Matrix) -> f64 {
    let (hi, _) = extreme_eigenvalues(&gram(x).unwrap(), 1e-14).unwrap();
    1.0 / hi.max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn displacement_stays_in_the_input_span((x, y, labels) in problem(), s in scheme(), l in loss()) {
        let data = dataset(&x, &y, &labels, l);
        prop_assume!(x.rows() > x.cols());
        let (_, lo) = extreme_eigenvalues(&gram(&x).unwrap(), 1e-14).unwrap();
        prop_assume!(lo > 1e-6);
        let theta0: Vec<f64> = (0..x.rows()).map(|i| 0.1 * (i as f64).sin()).collect();
        let model = LinearModel::new(theta0);
        let mut tc = TrainConfig::new(eta_for(&x), 300, l, s);
        tc.stop_risk = 0.0;
        tc.record_every = 7;
        let mut worst = 0.0f64;
        train_observed(&model, &data, &tc, &mut |v| {
            let d = sub(v.theta, v.theta0);
            let nd = norm(&d);
            if nd > 0.0 {
                worst = worst.max(span_residual(&d, &x)? / nd);
            }
            Ok(())
        }).unwrap();
        prop_assert!(worst <= 1e-8, "relative span residual {worst}");
    }

    #[test]
    fn weights_stay_on_the_simplex((x, y, labels) in problem(), s in scheme(), l in loss()) {
        let data = dataset(&x, &y, &labels, l);
        let mut tc = TrainConfig::new(eta_for(&x), 200, l, s);
        tc.stop_risk = 0.0;
        tc.record_every = 1;
        let run = train(&LinearModel::zeros(x.rows()), &data, &tc).unwrap();
        prop_assert!(run.max_simplex_violation <= 1e-12);
        for row in &run.trace.rows {
            prop_assert!(simplex_violation(&row.q) <= 1e-12);
            prop_assert!(row.q.iter().all(|q| *q >= 0.0));
            let total: f64 = row.q_groups.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sample_order_does_not_matter((x, y, labels) in problem(), l in loss(), which in 0usize..3, rot in 1usize..5) {
        // CVaR ties are index-ordered, so only the order-free schemes qualify
        let s = [Scheme::Erm, Scheme::Iw, Scheme::Gdro { nu: 0.1 }][which];
        let data = dataset(&x, &y, &labels, l);
        let n = data.num_samples();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let mut tc = TrainConfig::new(eta_for(&x), 150, l, s);
        tc.stop_risk = 0.0;
        let model = LinearModel::zeros(x.rows());
        let a = train(&model, &data, &tc).unwrap();
        let b = train(&model, &data.permuted(&order).unwrap(), &tc).unwrap();
        let gap = a.params.iter().zip(&b.params).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(gap <= 1e-9, "gap {gap}");
    }

    #[test]
    fn traces_round_trip_through_csv((x, y, labels) in problem(), s in scheme(), l in loss()) {
        let data = dataset(&x, &y, &labels, l);
        let mut tc = TrainConfig::new(eta_for(&x), 40, l, s);
        tc.stop_risk = 0.0;
        tc.record_every = 3;
        let run = train(&LinearModel::zeros(x.rows()), &data, &tc).unwrap();
        let text = trace_to_csv(&run.trace);
        let back = parse_trace_csv(&text).unwrap();
        prop_assert_eq!(trace_to_csv(&back), text);
    }

    #[test]
    fn training_is_deterministic((x, y, labels) in problem(), s in scheme(), l in loss()) {
        let data = dataset(&x, &y, &labels, l);
        let mut tc = TrainConfig::new(eta_for(&x), 60, l, s);
        tc.stop_risk = 0.0;
        let model = LinearModel::zeros(x.rows());
        let a = train(&model, &data, &tc).unwrap();
        let b = train(&model, &data, &tc).unwrap();
        prop_assert_eq!(a.params, b.params);
        prop_assert_eq!(trace_to_csv(&a.trace), trace_to_csv(&b.trace));
    }
}

#[test]
fn heavy_regularization_pins_parameters() {
    // ημ = 1 collapses θ back to θ⁰ before each gradient step, so the
    // displacement never exceeds one weighted-gradient step.
    let x = Matrix::from_columns(&[vec![0.6, 0.0, 0.1], vec![0.0, 0.5, 0.3]]).unwrap();
    let data = Dataset::new(
        x,
        vec![1.0, -2.0],
        GroupInfo::from_sizes(&[1, 1]).unwrap(),
        "pair",
        false,
    )
    .unwrap();
    let theta0 = vec![0.2, -0.1, 0.05];
    let model = LinearModel::new(theta0.clone());
    let mu = 1e6;
    let eta = 1.0 / mu;
    for s in [
        Scheme::Erm,
        Scheme::Iw,
        Scheme::Gdro { nu: 0.5 },
        Scheme::Cvar { alpha: 0.5 },
    ] {
        let mut tc = TrainConfig::new(eta, 500, LossKind::Squared, s);
        tc.mu = mu;
        tc.stop_risk = 0.0;
        let run = train(&model, &data, &tc).unwrap();
        let disp = norm(&sub(&run.params, &theta0));
        // ‖Σ qᵢ ℓ'ᵢ xᵢ‖ ≤ max|ℓ'| at θ⁰, which is at most 2.1 here
        assert!(disp <= eta * 2.1, "{s}: displacement {disp}");
    }
}
