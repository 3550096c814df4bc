//! Scalar losses `ℓ(ŷ, y)` and their derivatives in `ŷ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, GrwError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    /// `½(ŷ − y)²`
    Squared,
    /// `log(1 + exp(−ŷy))`
    Logistic,
    /// Logistic (shifted for continuity) below margin `beta`,
    /// `1 / [m − (beta − 1)]^alpha` at and above it.
    PolyTailed { alpha: f64, beta: f64 },
}

impl LossKind {
    pub fn poly_tailed(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(invalid(format!(
                "polytailed needs alpha > 0 and finite beta, got ({alpha}, {beta})"
            )));
        }
        Ok(LossKind::PolyTailed { alpha, beta })
    }

    /// Classification losses expect labels in {−1, +1}.
    pub fn is_classification(&self) -> bool {
        !matches!(self, LossKind::Squared)
    }

    pub fn check_label(&self, y: f64) -> Result<()> {
        if self.is_classification() && y != 1.0 && y != -1.0 {
            return Err(invalid(format!(
                "{self} loss needs labels in {{-1,+1}}, got {y}"
            )));
        }
        if !y.is_finite() {
            return Err(invalid("non-finite target"));
        }
        Ok(())
    }

    pub fn value(&self, yhat: f64, y: f64) -> Result<f64> {
        self.check_label(y)?;
        Ok(self.value_unchecked(yhat, y))
    }

    pub fn grad(&self, yhat: f64, y: f64) -> Result<f64> {
        self.check_label(y)?;
        Ok(self.grad_unchecked(yhat, y))
    }

    /// Same as [`LossKind::value`] for labels already validated.
    pub fn value_unchecked(&self, yhat: f64, y: f64) -> f64 {
        match *self {
            LossKind::Squared => 0.5 * (yhat - y) * (yhat - y),
            LossKind::Logistic => logistic(yhat * y),
            LossKind::PolyTailed { alpha, beta } => {
                let m = yhat * y;
                if m < beta {
                    logistic(m) + poly_left_shift(beta)
                } else {
                    (m - (beta - 1.0)).powf(-alpha)
                }
            }
        }
    }

    pub fn grad_unchecked(&self, yhat: f64, y: f64) -> f64 {
        match *self {
            LossKind::Squared => yhat - y,
            LossKind::Logistic => -y * sigmoid(-yhat * y),
            LossKind::PolyTailed { alpha, beta } => {
                let m = yhat * y;
                if m < beta {
                    -y * sigmoid(-m)
                } else {
                    -y * alpha * (m - (beta - 1.0)).powf(-alpha - 1.0)
                }
            }
        }
    }
}

/// Constant added to the logistic branch so the two pieces meet at `m = beta`.
fn poly_left_shift(beta: f64) -> f64 {
    1.0 - logistic(beta)
}

/// `log(1 + e^{−m})` without overflow.
pub fn logistic(m: f64) -> f64 {
    (-m.abs()).exp().ln_1p() + (-m).max(0.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Squared => write!(f, "squared"),
            LossKind::Logistic => write!(f, "logistic"),
            LossKind::PolyTailed { alpha, beta } => write!(f, "polytailed:{alpha}:{beta}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = GrwError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "squared" => return Ok(LossKind::Squared),
            "logistic" => return Ok(LossKind::Logistic),
            _ => {}
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["polytailed", a, b] => {
                let alpha = a
                    .parse()
                    .map_err(|_| invalid(format!("bad polytailed alpha {a:?}")))?;
                let beta = b
                    .parse()
                    .map_err(|_| invalid(format!("bad polytailed beta {b:?}")))?;
                LossKind::poly_tailed(alpha, beta)
            }
            _ => Err(invalid(format!("unknown loss {s:?}"))),
        }
    }
}
