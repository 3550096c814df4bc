//! Machine-readable experiment reports.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    /// Measured quantity the check is about.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub config_hash: String,
    pub dataset: String,
    pub assertions: Vec<Assertion>,
    pub metrics: Map<String, Value>,
}

impl Report {
    pub fn new(experiment: &str, config_hash: &str, dataset: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            dataset: dataset.to_string(),
            assertions: Vec::new(),
            metrics: Map::new(),
        }
    }

    /// Passes when `value < threshold`.
    pub fn check_below(&mut self, name: &str, value: f64, threshold: f64) {
        self.push(
            name,
            value < threshold,
            value,
            threshold,
            format!("{value:.3e} < {threshold:.3e}"),
        );
    }

    /// Passes when `value > threshold`.
    pub fn check_above(&mut self, name: &str, value: f64, threshold: f64) {
        self.push(
            name,
            value > threshold,
            value,
            threshold,
            format!("{value:.3e} > {threshold:.3e}"),
        );
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        let v = if passed { 1.0 } else { 0.0 };
        self.push(name, passed, v, 1.0, detail.into());
    }

    fn push(&mut self, name: &str, passed: bool, value: f64, threshold: f64, detail: String) {
        if !passed {
            log::warn!("assertion {name} failed: {detail}");
        }
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            value,
            threshold,
            detail,
        });
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metrics.insert(key.to_string(), v);
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    /// Numeric metric lookup, following `/`-separated object keys.
    pub fn number(&self, path: &str) -> Option<f64> {
        let mut parts = path.split('/');
        let mut cur = self.metrics.get(parts.next()?)?;
        for p in parts {
            cur = match cur {
                Value::Object(m) => m.get(p)?,
                Value::Array(a) => a.get(p.parse::<usize>().ok()?)?,
                _ => return None,
            };
        }
        cur.as_f64()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
