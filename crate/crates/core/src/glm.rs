//! Fixed-effects GLM fit by IRLS with step halving.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::linalg;

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefs: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn deviance(fam: Family, y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter()
        .zip(eta.iter())
        .map(|(&y, &e)| fam.unit_deviance(y, fam.inv_link(e)))
        .sum()
}

pub fn fit_glm(y: &DVector<f64>, x: &DMatrix<f64>, fam: Family) -> Result<GlmFit> {
    const MAX_ITER: usize = 100;
    if fam == Family::Gaussian {
        let coefs = linalg::least_squares(x, y)
            .ok_or_else(|| Error::numerical("glm", "rank-deficient design"))?;
        let eta = x * &coefs;
        let dev = deviance(fam, y, &eta);
        return Ok(GlmFit {
            mu: eta.clone(),
            coefs,
            eta,
            deviance: dev,
            iterations: 1,
            converged: true,
        });
    }

    let mut eta = y.map(|v| fam.link(fam.mu_start(v)));
    let mut coefs = DVector::zeros(x.ncols());
    let mut dev = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let mu = eta.map(|e| fam.clamp_mean(fam.inv_link(e)));
        let w = mu.map(|m| fam.variance(m));
        let z = DVector::from_fn(y.len(), |i, _| {
            eta[i] + (y[i] - mu[i]) * fam.deta_dmu(mu[i])
        });
        let target = linalg::weighted_least_squares(x, &z, &w)
            .ok_or_else(|| Error::numerical("glm", "singular weighted normal equations"))?;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &coefs + (&target - &coefs) * step;
            let cand_eta = x * &cand;
            let cand_dev = deviance(fam, y, &cand_eta);
            if cand_dev.is_finite() && cand_dev <= dev + 1e-12 * dev.abs().max(1.0) {
                accepted = Some((cand, cand_eta, cand_dev));
                break;
            }
            if !dev.is_finite() && cand_dev.is_finite() {
                accepted = Some((cand, cand_eta, cand_dev));
                break;
            }
            step *= 0.5;
        }
        let Some((c, e, d)) = accepted else {
            converged = true;
            break;
        };
        let change = (dev - d).abs() / (d.abs() + 0.1);
        coefs = c;
        eta = e;
        dev = d;
        if change < 1e-10 {
            converged = true;
            break;
        }
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("glm", "non-finite linear predictor"));
    }
    let mu = eta.map(|e| fam.clamp_mean(fam.inv_link(e)));
    Ok(GlmFit {
        coefs,
        eta,
        mu,
        deviance: dev,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::NelderMead;

    fn design() -> DMatrix<f64> {
        DMatrix::from_fn(40, 2, |i, j| {
            if j == 0 {
                1.0
            } else {
                (i as f64 / 39.0) * 2.0 - 1.0
            }
        })
    }

    #[test]
    fn poisson_matches_direct_maximization() {
        let x = design();
        let y = DVector::from_fn(40, |i, _| {
            ((i * 7) % 5) as f64 + if i > 20 { 2.0 } else { 0.0 }
        });
        let fit = fit_glm(&y, &x, Family::Poisson).unwrap();
        assert!(fit.converged);
        let nll = |b: &[f64]| -> f64 {
            (0..40)
                .map(|i| {
                    let eta = b[0] + b[1] * x[(i, 1)];
                    -(y[i] * eta - eta.exp())
                })
                .sum()
        };
        let m = NelderMead::default().minimize(nll, &[0.0, 0.0]);
        assert!((m.x[0] - fit.coefs[0]).abs() < 1e-5);
        assert!((m.x[1] - fit.coefs[1]).abs() < 1e-5);
    }

    #[test]
    fn logistic_matches_direct_maximization() {
        let x = design();
        let y = DVector::from_fn(40, |i, _| if (i * 13) % 7 < 3 + i / 12 { 1.0 } else { 0.0 });
        let fit = fit_glm(&y, &x, Family::Binomial).unwrap();
        let nll = |b: &[f64]| -> f64 {
            (0..40)
                .map(|i| {
                    let eta = b[0] + b[1] * x[(i, 1)];
                    -(y[i] * eta - (1.0 + eta.exp()).ln())
                })
                .sum()
        };
        let m = NelderMead::default().minimize(nll, &[0.0, 0.0]);
        assert!((m.x[0] - fit.coefs[0]).abs() < 1e-5);
        assert!((m.x[1] - fit.coefs[1]).abs() < 1e-5);
    }
}
