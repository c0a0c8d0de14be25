//! Response families and their canonical links.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Lower clamp for fitted means (Poisson and binomial).
pub const MU_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Gaussian,
    Poisson,
    Binomial,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
        }
    }

    /// Canonical link g(mu).
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Binomial => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Inverse canonical link.
    pub fn inv_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Binomial => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Variance function v(mu); dispersion is fixed at one.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Binomial => mu * (1.0 - mu),
        }
    }

    /// d eta / d mu, which is 1 / v(mu) under a canonical link.
    pub fn deta_dmu(self, mu: f64) -> f64 {
        1.0 / self.variance(mu)
    }

    /// Pin a fitted mean into the range where the link is finite.
    pub fn clamp_mean(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.max(MU_FLOOR),
            Family::Binomial => mu.clamp(MU_FLOOR, 1.0 - MU_FLOOR),
        }
    }

    /// Whether clamping changed the mean.
    pub fn is_clamped(self, mu: f64) -> bool {
        self.clamp_mean(mu) != mu
    }

    /// Unit deviance contribution, used for cross-validation loss.
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu).powi(2),
            Family::Poisson => {
                let mu = self.clamp_mean(mu);
                let term = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (term - (y - mu))
            }
            Family::Binomial => {
                let mu = self.clamp_mean(mu);
                let a = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                let b = if y < 1.0 {
                    (1.0 - y) * ((1.0 - y) / (1.0 - mu)).ln()
                } else {
                    0.0
                };
                2.0 * (a + b)
            }
        }
    }

    /// Log-likelihood of one observation (dropping terms constant in mu).
    pub fn log_density(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => -0.5 * (y - mu).powi(2),
            Family::Poisson => {
                let mu = self.clamp_mean(mu);
                y * mu.ln() - mu
            }
            Family::Binomial => {
                let mu = self.clamp_mean(mu);
                y * mu.ln() + (1.0 - y) * (1.0 - mu).ln()
            }
        }
    }

    /// Starting mean for IRLS.
    pub fn mu_start(self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::Poisson => y + 0.1,
            Family::Binomial => (y + 0.5) / 2.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" | "n" => Ok(Family::Gaussian),
            "poisson" | "p" => Ok(Family::Poisson),
            "binomial" | "b" => Ok(Family::Binomial),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}
