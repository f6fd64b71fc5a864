//! Exponential-family cumulant functions.
//!
//! Every family is written in canonical form, `f(y) ∝ exp{(yη − b(η)) / φ}`,
//! so the log-likelihood contribution of a cell only needs `b` and its
//! derivatives.

use serde::{Deserialize, Serialize};

/// Natural parameters above this value are clamped inside `exp` for Poisson items.
pub const POISSON_ETA_MAX: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bernoulli,
    Poisson,
    Gaussian,
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "binary" | "logistic" => Ok(Family::Bernoulli),
            "poisson" | "count" => Ok(Family::Poisson),
            "gaussian" | "normal" => Ok(Family::Gaussian),
            other => Err(format!("unknown family '{other}'")),
        }
    }
}

/// Logistic function evaluated without overflow.
#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Family {
    /// `b(η)`.
    #[inline]
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => eta.max(0.0) + (-eta.abs()).exp().ln_1p(),
            Family::Poisson => eta.min(POISSON_ETA_MAX).exp(),
            Family::Gaussian => 0.5 * eta * eta,
        }
    }

    /// `b'(η)`, the mean.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => sigmoid(eta),
            Family::Poisson => eta.min(POISSON_ETA_MAX).exp(),
            Family::Gaussian => eta,
        }
    }

    /// `b''(η)`, the variance function.
    #[inline]
    pub fn variance(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => sigmoid(eta) * sigmoid(-eta),
            Family::Poisson => eta.min(POISSON_ETA_MAX).exp(),
            Family::Gaussian => 1.0,
        }
    }

    /// `b'''(η)`.
    #[inline]
    pub fn third(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => {
                let (s, c) = (sigmoid(eta), sigmoid(-eta));
                s * c * (c - s)
            }
            Family::Poisson => eta.min(POISSON_ETA_MAX).exp(),
            Family::Gaussian => 0.0,
        }
    }

    /// Derivative of `b` of the given order (0 through 3).
    ///
    /// Panics on orders above 3.
    pub fn b(self, order: u8, eta: f64) -> f64 {
        match order {
            0 => self.cumulant(eta),
            1 => self.mean(eta),
            2 => self.variance(eta),
            3 => self.third(eta),
            _ => panic!("cumulant derivative of order {order} is not available"),
        }
    }

    /// Whether `y` lies in the support of the family.
    pub fn admits(self, y: f64) -> bool {
        match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Family::Gaussian => y.is_finite(),
        }
    }

    /// True when the dispersion is fixed at one.
    pub fn has_unit_scale(self) -> bool {
        !matches!(self, Family::Gaussian)
    }
}

/// Free-function form of [`Family::b`].
pub fn family_b(family: Family, order: u8, eta: f64) -> f64 {
    family.b(order, eta)
}
