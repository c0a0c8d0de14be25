//! Poisson and binomial mixed models by penalized quasi-likelihood, and the
//! working-response linearization shared with the plain GLM selection path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::fit_glm;
use crate::lmm::{fit_lmm_inner, Method, ReFit, ReSpec, VarComp};

pub const PQL_MAX_ITERS: usize = 50;
pub const PQL_TOL: f64 = 1e-6;
/// Consecutive non-contracting iterations with clamped binomial means
/// before the fit is declared separated. A clamped mean in a fit whose
/// updates are shrinking (an all-0 or all-1 cluster) is not separation.
const SEPARATION_PATIENCE: usize = 5;

/// `W* = eta_fixed + (y - mu) deta/dmu`, evaluated at the clamped mean.
///
/// For the Gaussian family this is `y - u_hat` because `mu - eta_fixed`
/// is exactly the random-effect contribution.
pub fn working_response(
    y: &DVector<f64>,
    mu_hat: &DVector<f64>,
    eta_fixed: &DVector<f64>,
    fam: Family,
) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| {
        let mu = fam.clamp_mean(mu_hat[i]);
        eta_fixed[i] + (y[i] - mu) * fam.deta_dmu(mu)
    })
}

/// Alternative response `g(y) - u_hat`, with `y` nudged into the link's
/// domain by the IRLS starting rule.
pub fn link_scale_response(y: &DVector<f64>, u_hat: &DVector<f64>, fam: Family) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| {
        let mu = if fam == Family::Gaussian {
            y[i]
        } else {
            fam.clamp_mean(fam.mu_start(y[i]))
        };
        fam.link(mu) - u_hat[i]
    })
}

/// Which adjusted response the mixed driver hands to the selection step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseKind {
    #[default]
    Working,
    LinkScale,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmmFit {
    pub family: Family,
    pub varcomp: VarComp,
    pub fixed_coefs: Vec<f64>,
    pub eta_full: Vec<f64>,
    pub eta_fixed: Vec<f64>,
    pub mu_hat: Vec<f64>,
    /// `eta_full - eta_fixed`, on the link scale.
    pub u_hat: Vec<f64>,
    /// ML log-likelihood of the final weighted working model (approximate).
    pub approx_loglik: f64,
    /// AIC from `approx_loglik`, same parameter count as the LMM.
    pub approx_aic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub theta: Vec<f64>,
    /// `max |delta eta|` per iteration.
    pub trace: Vec<f64>,
}

pub fn fit_glmm_pql(
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    re: &ReSpec,
    fam: Family,
) -> Result<GlmmFit> {
    fit_glmm_pql_from(y, w, re, fam, None)
}

/// PQL with an optional starting `theta` (relative covariance factor).
pub fn fit_glmm_pql_from(
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    re: &ReSpec,
    fam: Family,
    init_theta: Option<&[f64]>,
) -> Result<GlmmFit> {
    if fam == Family::Gaussian {
        return Err(Error::Config(
            "PQL needs a Poisson or binomial family".into(),
        ));
    }
    for (i, &v) in y.iter().enumerate() {
        let ok = match fam {
            Family::Poisson => v >= 0.0 && v.fract() == 0.0,
            _ => v == 0.0 || v == 1.0,
        };
        if !ok {
            return Err(Error::InvalidResponse {
                row: i + 1,
                value: v,
                family: fam.name(),
            });
        }
    }
    let n = y.len();
    let glm = fit_glm(y, w, fam)?;
    let mut eta = glm.eta;
    let mut theta: Option<Vec<f64>> = init_theta.map(|t| t.to_vec());
    let mut trace = Vec::new();
    let mut clamped_run = 0;
    let mut last: Option<(ReFit, DVector<f64>)> = None;
    let mut converged = false;

    for _ in 0..PQL_MAX_ITERS {
        let mu = eta.map(|e| fam.clamp_mean(fam.inv_link(e)));
        let contracting = match trace.as_slice() {
            [.., a, b] => *b <= 0.5 * *a,
            _ => false,
        };
        if fam == Family::Binomial
            && !contracting
            && eta.iter().any(|&e| fam.is_clamped(fam.inv_link(e)))
        {
            clamped_run += 1;
            if clamped_run >= SEPARATION_PATIENCE {
                return Err(Error::numerical(
                    "PQL",
                    format!("fitted means pinned at the clamp for {clamped_run} iterations (separation); trace {trace:?}"),
                ));
            }
        } else {
            clamped_run = 0;
        }
        let weights = mu.map(|m| fam.variance(m));
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) * fam.deta_dmu(mu[i]));
        let fit = fit_lmm_inner(&z, w, re, Some(&weights), Method::Ml, theta.as_deref())?;
        let new_eta = DVector::from_fn(n, |i, _| fit.fitted_fixed[i] + fit.u_hat[i]);
        if new_eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "PQL",
                format!("non-finite linear predictor; trace {trace:?}"),
            ));
        }
        let change = (&new_eta - &eta).amax();
        trace.push(change);
        theta = Some(fit.theta.clone());
        eta = new_eta;
        last = Some((fit, weights));
        if change < PQL_TOL {
            converged = true;
            break;
        }
    }
    let (fit, _) = last.expect("at least one PQL iteration");
    let eta_fixed = fit.fitted_fixed.clone();
    let mu_hat: Vec<f64> = eta
        .iter()
        .map(|&e| fam.clamp_mean(fam.inv_link(e)))
        .collect();
    Ok(GlmmFit {
        family: fam,
        varcomp: fit.varcomp,
        fixed_coefs: fit.fixed_coefs,
        u_hat: eta.iter().zip(&eta_fixed).map(|(a, b)| a - b).collect(),
        eta_full: eta.iter().copied().collect(),
        eta_fixed,
        mu_hat,
        approx_loglik: fit.loglik,
        approx_aic: fit.aic,
        iterations: trace.len(),
        converged,
        theta: fit.theta,
        trace,
    })
}
