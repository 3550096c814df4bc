//! Sample-weighting schemes: ERM, importance weighting, Group DRO and CVaR.
//!
//! Every scheme produces a [`WeightState`] whose `q` lies on the probability
//! simplex. Static schemes are fixed once; dynamic schemes are refreshed
//! from the current per-sample losses before every gradient step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, GrwError, Result};

/// Simplex tolerance enforced after every update.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Default trailing window (in recorded snapshots) for [`check_assumption1`].
pub const DEFAULT_A1_WINDOW: usize = 1000;
pub const DEFAULT_A1_TOL: f64 = 1e-4;

/// Group membership. Groups are 0-based internally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInfo {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl GroupInfo {
    /// `labels[i]` is the group of sample `i`; `num_groups` fixes K.
    pub fn new(labels: Vec<usize>, num_groups: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("a dataset needs at least one sample"));
        }
        let mut sizes = vec![0usize; num_groups];
        for &k in &labels {
            if k >= num_groups {
                return Err(invalid(format!(
                    "group label {k} out of range 0..{num_groups}"
                )));
            }
            sizes[k] += 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(invalid(format!("group {k} is empty")));
        }
        Ok(Self { labels, sizes })
    }

    /// Contiguous groups of the given sizes, in order.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let labels = sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect();
        Self::new(labels, sizes.len())
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::from_sizes(&[n])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    /// Mean of `values` within each group.
    pub fn group_means(&self, values: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_groups()];
        for (&k, &v) in self.labels.iter().zip(values) {
            sums[k] += v;
        }
        sums.iter()
            .zip(&self.sizes)
            .map(|(s, &n)| s / n as f64)
            .collect()
    }

    /// Total of `values` within each group.
    pub fn group_sums(&self, values: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_groups()];
        for (&k, &v) in self.labels.iter().zip(values) {
            sums[k] += v;
        }
        sums
    }

    /// Same partition with samples reordered: new sample `i` is old sample `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            order.iter().map(|&i| self.labels[i]).collect(),
            self.num_groups(),
        )
    }
}

/// Current sample weights plus Group DRO's group weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub q: Vec<f64>,
    pub gdro_g: Option<Vec<f64>>,
    pub step: u64,
}

impl WeightState {
    /// Largest violation of `q_i ≥ 0, Σ q_i = 1` (and the same for `gdro_g`).
    pub fn simplex_violation(&self) -> f64 {
        let v = simplex_violation(&self.q);
        match &self.gdro_g {
            Some(g) => v.max(simplex_violation(g)),
            None => v,
        }
    }
}

pub fn simplex_violation(w: &[f64]) -> f64 {
    let neg = w.iter().fold(0.0_f64, |m, &x| m.max(-x));
    let sum: f64 = w.iter().sum();
    neg.max((sum - 1.0).abs())
}

fn renormalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
}

pub fn erm_weights(n: usize) -> Result<WeightState> {
    if n == 0 {
        return Err(invalid("erm_weights needs n >= 1"));
    }
    Ok(WeightState {
        q: vec![1.0 / n as f64; n],
        gdro_g: None,
        step: 0,
    })
}

/// `q_i = 1 / (K · n_k)` for sample `i` in group `k`.
pub fn iw_weights(groups: &GroupInfo) -> Result<WeightState> {
    let k = groups.num_groups() as f64;
    let q = groups
        .labels()
        .iter()
        .map(|&g| 1.0 / (k * groups.sizes()[g] as f64))
        .collect();
    Ok(WeightState {
        q,
        gdro_g: None,
        step: 0,
    })
}

fn q_from_group_weights(g: &[f64], groups: &GroupInfo) -> Vec<f64> {
    let mut q: Vec<f64> = groups
        .labels()
        .iter()
        .map(|&k| g[k] / groups.sizes()[k] as f64)
        .collect();
    renormalize(&mut q);
    q
}

/// Group DRO starting point: uniform group weights, `q_i = 1/(K n_k)`.
pub fn gdro_init(groups: &GroupInfo) -> WeightState {
    let k = groups.num_groups();
    let g = vec![1.0 / k as f64; k];
    WeightState {
        q: q_from_group_weights(&g, groups),
        gdro_g: Some(g),
        step: 0,
    }
}

/// One exponentiated-gradient step `g_k ← g_k · exp(ν R̂_k)`, renormalized,
/// followed by `q_i = g_k / n_k`.
pub fn gdro_step(
    state: &WeightState,
    group_risks: &[f64],
    nu: f64,
    groups: &GroupInfo,
) -> Result<WeightState> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(invalid(format!(
            "group DRO step size must be positive, got {nu}"
        )));
    }
    if group_risks.len() != groups.num_groups() {
        return Err(invalid("one risk per group is required"));
    }
    if group_risks.iter().any(|r| !r.is_finite()) {
        return Err(invalid("non-finite group risk"));
    }
    let g = state
        .gdro_g
        .as_ref()
        .ok_or_else(|| invalid("state carries no group DRO weights"))?;
    // log-domain update; the max shift cancels under normalization
    let logits: Vec<f64> = g
        .iter()
        .zip(group_risks)
        .map(|(gk, r)| gk.ln() + nu * r)
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut next: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    renormalize(&mut next);
    Ok(WeightState {
        q: q_from_group_weights(&next, groups),
        gdro_g: Some(next),
        step: state.step + 1,
    })
}

/// Uniform weight on the `⌈αn⌉` largest losses; ties at the cut go to the lowest index.
pub fn cvar_weights(per_sample_losses: &[f64], alpha: f64) -> Result<WeightState> {
    let n = per_sample_losses.len();
    if n == 0 {
        return Err(invalid("cvar_weights needs at least one loss"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!(
            "cvar alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if per_sample_losses.iter().any(|l| !l.is_finite()) {
        return Err(invalid("non-finite loss"));
    }
    let m = cvar_support_size(n, alpha);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal losses
    order.sort_by(|&a, &b| per_sample_losses[b].total_cmp(&per_sample_losses[a]));
    let mut q = vec![0.0; n];
    for &i in &order[..m] {
        q[i] = 1.0 / m as f64;
    }
    Ok(WeightState {
        q,
        gdro_g: None,
        step: 0,
    })
}

/// `⌈αn⌉`, guarded against `α·n` landing a hair above an integer.
pub fn cvar_support_size(n: usize, alpha: f64) -> usize {
    let raw = alpha * n as f64;
    let rounded = raw.round();
    let m = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        rounded as usize
    } else {
        raw.ceil() as usize
    };
    m.clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    pub satisfied: bool,
    pub q_star: f64,
    /// First snapshot index after which the weights stay within `tol`.
    pub t_eps: usize,
}

/// Checks that a weight history has settled with a strictly positive minimum.
///
/// Oscillation over a range of snapshots is the largest per-coordinate
/// `max − min` within it. The history is satisfied when the oscillation over
/// the trailing `window` snapshots is at most `tol` and the trailing mean has
/// a positive minimum coordinate (reported as `q_star`).
pub fn check_assumption1(
    history: &[Vec<f64>],
    window: usize,
    tol: f64,
) -> Result<Assumption1Report> {
    if window == 0 || history.len() < window {
        return Err(invalid(format!(
            "history of length {} is shorter than the window {window}",
            history.len()
        )));
    }
    let n = history[0].len();
    if history.iter().any(|h| h.len() != n) {
        return Err(invalid("weight snapshots have different lengths"));
    }
    let tail = &history[history.len() - window..];
    let oscillation = |rows: &[Vec<f64>]| -> f64 {
        (0..n)
            .map(|i| {
                let (lo, hi) = rows
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r[i]), hi.max(r[i]))
                    });
                hi - lo
            })
            .fold(0.0, f64::max)
    };
    let settled = oscillation(tail) <= tol;
    let q_star = (0..n)
        .map(|i| tail.iter().map(|r| r[i]).sum::<f64>() / window as f64)
        .fold(f64::INFINITY, f64::min);
    // running suffix min/max per coordinate, scanned backwards
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut t_eps = history.len();
    for (t, row) in history.iter().enumerate().rev() {
        let mut osc: f64 = 0.0;
        for i in 0..n {
            lo[i] = lo[i].min(row[i]);
            hi[i] = hi[i].max(row[i]);
            osc = osc.max(hi[i] - lo[i]);
        }
        if osc <= tol {
            t_eps = t;
        } else {
            break;
        }
    }
    let satisfied = settled && q_star > 0.0;
    Ok(Assumption1Report {
        satisfied,
        q_star: q_star.max(0.0),
        t_eps,
    })
}

/// Weighting scheme, parsed from `erm`, `iw`, `gdro:<nu>` or `cvar:<alpha>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scheme {
    Erm,
    Iw,
    Gdro { nu: f64 },
    Cvar { alpha: f64 },
}

impl Scheme {
    pub fn is_dynamic(&self) -> bool {
        matches!(self, Scheme::Gdro { .. } | Scheme::Cvar { .. })
    }

    /// Short name used for report keys and file names.
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Erm => "erm",
            Scheme::Iw => "iw",
            Scheme::Gdro { .. } => "gdro",
            Scheme::Cvar { .. } => "cvar",
        }
    }

    pub fn initial_state(&self, groups: &GroupInfo) -> Result<WeightState> {
        match *self {
            Scheme::Erm => erm_weights(groups.num_samples()),
            Scheme::Iw => iw_weights(groups),
            Scheme::Gdro { .. } => Ok(gdro_init(groups)),
            Scheme::Cvar { .. } => erm_weights(groups.num_samples()),
        }
    }

    /// Weights for the next step given the losses at the current parameters.
    pub fn update(
        &self,
        state: &WeightState,
        per_sample_losses: &[f64],
        groups: &GroupInfo,
    ) -> Result<WeightState> {
        match *self {
            Scheme::Erm | Scheme::Iw => Ok(state.clone()),
            Scheme::Gdro { nu } => {
                gdro_step(state, &groups.group_means(per_sample_losses), nu, groups)
            }
            Scheme::Cvar { alpha } => {
                let mut next = cvar_weights(per_sample_losses, alpha)?;
                next.step = state.step + 1;
                Ok(next)
            }
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Erm => f.write_str("erm"),
            Scheme::Iw => f.write_str("iw"),
            Scheme::Gdro { nu } => write!(f, "gdro:{nu}"),
            Scheme::Cvar { alpha } => write!(f, "cvar:{alpha}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = GrwError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| invalid(format!("scheme {s:?} needs a parameter")))?
                .parse::<f64>()
                .map_err(|_| invalid(format!("bad scheme parameter in {s:?}")))
        };
        match name {
            "erm" if arg.is_none() => Ok(Scheme::Erm),
            "iw" if arg.is_none() => Ok(Scheme::Iw),
            "gdro" => {
                let nu = number(arg)?;
                if !(nu > 0.0) {
                    return Err(invalid("gdro step size must be positive"));
                }
                Ok(Scheme::Gdro { nu })
            }
            "cvar" => {
                let alpha = number(arg)?;
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(invalid("cvar alpha must lie in (0, 1]"));
                }
                Ok(Scheme::Cvar { alpha })
            }
            _ => Err(invalid(format!("unknown scheme {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn erm_examples() {
        assert_eq!(erm_weights(4).unwrap().q, vec![0.25; 4]);
        assert_eq!(erm_weights(1).unwrap().q, vec![1.0]);
        for w in erm_weights(6).unwrap().q {
            assert!((w - 1.0 / 6.0).abs() < 1e-16);
        }
        assert!(erm_weights(0).is_err());
    }

    #[test]
    fn iw_examples() {
        let g = GroupInfo::from_sizes(&[5, 1]).unwrap();
        let q = iw_weights(&g).unwrap().q;
        assert_eq!(&q[..5], &[0.1; 5]);
        assert_eq!(q[5], 0.5);
        let one = GroupInfo::single(3).unwrap();
        assert_eq!(iw_weights(&one).unwrap().q, erm_weights(3).unwrap().q);
        let bal = GroupInfo::from_sizes(&[2, 2, 2]).unwrap();
        for w in iw_weights(&bal).unwrap().q {
            assert!((w - 1.0 / 6.0).abs() < 1e-16);
        }
    }

    #[test]
    fn empty_group_rejected() {
        assert!(GroupInfo::new(vec![0, 0, 2], 3).is_err());
        assert!(GroupInfo::from_sizes(&[3, 0]).is_err());
    }

    #[test]
    fn gdro_examples() {
        let groups = GroupInfo::from_sizes(&[3, 1]).unwrap();
        let s0 = gdro_init(&groups);
        let same = gdro_step(&s0, &[0.7, 0.7], 0.3, &groups).unwrap();
        assert_eq!(same.gdro_g, s0.gdro_g);

        let s1 = gdro_step(&s0, &[1.0, 2.0], 0.1, &groups).unwrap();
        let g = s1.gdro_g.as_ref().unwrap();
        assert!((g[0] - 0.475_020_812_521_06).abs() < 1e-12, "{g:?}");
        assert!((g[1] - 0.524_979_187_478_94).abs() < 1e-12);
        assert!((s1.q[0] - g[0] / 3.0).abs() < 1e-15);
        assert!((s1.q[3] - g[1]).abs() < 1e-15);

        let tiny = gdro_step(&s0, &[1.0, 2.0], 1e-9, &groups).unwrap();
        let gt = tiny.gdro_g.unwrap();
        assert!((gt[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gdro_rejects_bad_input() {
        let groups = GroupInfo::from_sizes(&[1, 1]).unwrap();
        let s0 = gdro_init(&groups);
        assert!(gdro_step(&s0, &[f64::NAN, 1.0], 0.1, &groups).is_err());
        assert!(gdro_step(&s0, &[1.0, 1.0], 0.0, &groups).is_err());
        assert!(gdro_step(&erm_weights(2).unwrap(), &[1.0, 1.0], 0.1, &groups).is_err());
    }

    #[test]
    fn cvar_examples() {
        let full = cvar_weights(&[0.3, 2.0, 1.0, 0.1], 1.0).unwrap();
        assert_eq!(full.q, vec![0.25; 4]);
        assert_eq!(
            cvar_weights(&[3.0, 1.0, 2.0], 1.0 / 3.0).unwrap().q,
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            cvar_weights(&[2.0, 2.0, 1.0], 2.0 / 3.0).unwrap().q,
            vec![0.5, 0.5, 0.0]
        );
        // tie straddling the cut goes to the lower index
        assert_eq!(
            cvar_weights(&[1.0, 2.0, 2.0], 1.0 / 3.0).unwrap().q,
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn cvar_tie_break_matches_stable_sort_oracle() {
        let losses = [1.0, 3.0, 3.0, 0.5, 3.0, 2.0, 2.0];
        for m in 1..=7 {
            let alpha = m as f64 / 7.0;
            let w = cvar_weights(&losses, alpha).unwrap();
            // oracle: repeatedly pick the max, first index wins
            let mut taken = [false; 7];
            for _ in 0..m {
                let mut best = None;
                for i in 0..7 {
                    if taken[i] {
                        continue;
                    }
                    match best {
                        None => best = Some(i),
                        Some(b) if losses[i] > losses[b] => best = Some(i),
                        _ => {}
                    }
                }
                taken[best.unwrap()] = true;
            }
            for i in 0..7 {
                let expected = if taken[i] { 1.0 / m as f64 } else { 0.0 };
                assert_eq!(w.q[i], expected, "m={m} i={i}");
            }
        }
    }

    #[test]
    fn assumption1_examples() {
        let constant = vec![vec![0.2, 0.3, 0.5]; 10];
        let r = check_assumption1(&constant, 5, 1e-4).unwrap();
        assert!(r.satisfied);
        assert_eq!(r.q_star, 0.2);
        assert_eq!(r.t_eps, 0);

        let collapsing: Vec<Vec<f64>> = (0..10)
            .map(|t| {
                if t < 4 {
                    vec![0.5, 0.5]
                } else {
                    vec![1.0, 0.0]
                }
            })
            .collect();
        let r = check_assumption1(&collapsing, 5, 1e-4).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.q_star, 0.0);
        assert_eq!(r.t_eps, 4);

        let oscillating: Vec<Vec<f64>> = (0..10)
            .map(|t| {
                if t % 2 == 0 {
                    vec![0.4, 0.6]
                } else {
                    vec![0.6, 0.4]
                }
            })
            .collect();
        let r = check_assumption1(&oscillating, 4, 1e-4).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.t_eps, 9);

        assert!(check_assumption1(&constant, 11, 1e-4).is_err());
    }

    #[test]
    fn parses_schemes() {
        assert_eq!("erm".parse::<Scheme>().unwrap(), Scheme::Erm);
        assert_eq!("iw".parse::<Scheme>().unwrap(), Scheme::Iw);
        assert_eq!(
            "gdro:0.01".parse::<Scheme>().unwrap(),
            Scheme::Gdro { nu: 0.01 }
        );
        assert_eq!(
            "cvar:0.5".parse::<Scheme>().unwrap(),
            Scheme::Cvar { alpha: 0.5 }
        );
        for bad in ["gdro", "gdro:-1", "cvar:0", "cvar:1.5", "erm:1", "dro"] {
            assert!(bad.parse::<Scheme>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn gdro_shift_invariant_and_on_simplex(
            risks in proptest::collection::vec(0.0f64..10.0, 3),
            nu in 0.001f64..2.0,
            steps in 1usize..20,
        ) {
            let groups = GroupInfo::from_sizes(&[2, 3, 1]).unwrap();
            let mut a = gdro_init(&groups);
            let mut b = gdro_init(&groups);
            let shifted: Vec<f64> = risks.iter().map(|r| r + 5.0).collect();
            for _ in 0..steps {
                a = gdro_step(&a, &risks, nu, &groups).unwrap();
                b = gdro_step(&b, &shifted, nu, &groups).unwrap();
                prop_assert!(a.simplex_violation() <= SIMPLEX_TOL);
            }
            for (x, y) in a.gdro_g.unwrap().iter().zip(b.gdro_g.unwrap()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn iw_gives_balanced_risk(
            losses in proptest::collection::vec(0.0f64..5.0, 7),
        ) {
            let groups = GroupInfo::new(vec![0, 1, 1, 2, 2, 2, 0], 3).unwrap();
            let q = iw_weights(&groups).unwrap().q;
            let weighted: f64 = q.iter().zip(&losses).map(|(a, b)| a * b).sum();
            let balanced: f64 = groups.group_means(&losses).iter().sum::<f64>() / 3.0;
            prop_assert!((weighted - balanced).abs() < 1e-12);
        }

        #[test]
        fn cvar_support_and_simplex(
            losses in proptest::collection::vec(0.0f64..3.0, 1..30),
            alpha in 0.01f64..1.0,
        ) {
            let w = cvar_weights(&losses, alpha).unwrap();
            let m = (alpha * losses.len() as f64).ceil() as usize;
            let support = w.q.iter().filter(|&&x| x > 0.0).count();
            prop_assert_eq!(support, m.clamp(1, losses.len()));
            prop_assert!(w.simplex_violation() <= SIMPLEX_TOL);
        }
    }
}
