//! Gaussian linear mixed models with one grouping factor: random intercept,
//! random slope, or both (correlated).
//!
//! Estimation follows the profiled-deviance approach: the relative
//! covariance factor `Lambda` (lower Cholesky factor of `D / sigma2_e`) is
//! optimized by Nelder-Mead while the fixed effects and the residual scale
//! are profiled out in closed form. All per-cluster work uses `q x q`
//! matrices (`q <= 2`), so a deviance evaluation is `O(m p^2)` after a single
//! pass over the data.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Grouping;
use crate::linalg;
use crate::optim::NelderMead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Ml,
    Reml,
}

/// Which random effects are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReFlags {
    pub intercept: bool,
    pub slope: bool,
}

impl ReFlags {
    pub const INTERCEPT: ReFlags = ReFlags {
        intercept: true,
        slope: false,
    };
    pub const BOTH: ReFlags = ReFlags {
        intercept: true,
        slope: true,
    };

    pub fn q(self) -> usize {
        self.intercept as usize + self.slope as usize
    }

    /// Number of distinct variance/covariance parameters in `D`.
    pub fn n_cov_params(self) -> usize {
        match self.q() {
            2 => 3,
            q => q,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReSpec {
    pub flags: ReFlags,
    pub group: Grouping,
    pub slope_covariate: Option<DVector<f64>>,
}

impl ReSpec {
    pub fn new(
        flags: ReFlags,
        group: Grouping,
        slope_covariate: Option<DVector<f64>>,
    ) -> Result<Self> {
        if flags.q() == 0 {
            return Err(Error::Config(
                "at least one random effect is required".into(),
            ));
        }
        if flags.slope && slope_covariate.is_none() {
            return Err(Error::MissingSlope);
        }
        if group.n_groups() < 2 {
            return Err(Error::Config("need at least two clusters".into()));
        }
        if let Some(t) = &slope_covariate {
            if t.len() != group.len() {
                return Err(Error::Dimension(
                    "slope covariate and group differ in length".into(),
                ));
            }
        }
        Ok(ReSpec {
            flags,
            group,
            slope_covariate: if flags.slope { slope_covariate } else { None },
        })
    }

    pub fn q(&self) -> usize {
        self.flags.q()
    }

    pub fn n(&self) -> usize {
        self.group.len()
    }

    /// Row of the random-effects design for observation `i`.
    fn z_row(&self, i: usize) -> [f64; 2] {
        let t = self.slope_covariate.as_ref().map_or(0.0, |t| t[i]);
        match (self.flags.intercept, self.flags.slope) {
            (true, true) => [1.0, t],
            (true, false) => [1.0, 0.0],
            (false, true) => [t, 0.0],
            (false, false) => unreachable!(),
        }
    }
}

/// Random-effect standard deviations and correlation. `sigma_b1` is zero
/// without a slope; `rho` is present only with both effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarComp {
    pub sigma_b0: f64,
    pub sigma_b1: f64,
    pub rho: Option<f64>,
    pub sigma_e: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReFit {
    pub varcomp: VarComp,
    pub fixed_coefs: Vec<f64>,
    /// Per-observation BLUP contribution `b0_i + b1_i t_j`.
    pub u_hat: Vec<f64>,
    /// Per-cluster `(b0_i, b1_i)`.
    pub blups: Vec<(f64, f64)>,
    pub fitted_fixed: Vec<f64>,
    /// Maximized-likelihood value at the reported estimates, also for
    /// REML fits.
    pub loglik: f64,
    /// `-2` times the restricted log-likelihood (REML fits only).
    pub reml_criterion: Option<f64>,
    pub method: Method,
    /// `-2 loglik + 2 (#fixed + #variance components incl. residual)`.
    pub aic: f64,
    pub theta: Vec<f64>,
    pub flags: ReFlags,
    pub evaluations: usize,
}

impl ReFit {
    /// Fitted values with and without the random effects differ by `u_hat`.
    pub fn fitted_full(&self) -> Vec<f64> {
        self.fitted_fixed
            .iter()
            .zip(&self.u_hat)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Random-effects offset: full minus fixed-only fitted values.
pub fn blup_offset(fit: &ReFit) -> DVector<f64> {
    let full = fit.fitted_full();
    DVector::from_fn(full.len(), |i, _| full[i] - fit.fitted_fixed[i])
}

struct Cluster {
    members: Vec<usize>,
    ztz: DMatrix<f64>,
    ztw: DMatrix<f64>,
    wtw: DMatrix<f64>,
    zty: DVector<f64>,
    wty: DVector<f64>,
    /// Member rows, kept for the explicit penalized residual sum of squares.
    rows_y: DVector<f64>,
    rows_wt: DVector<f64>,
    rows_w: DMatrix<f64>,
    rows_z: DMatrix<f64>,
}

/// Cross-products of one weighted LMM problem.
pub(crate) struct LmmProblem {
    n: usize,
    p: usize,
    q: usize,
    clusters: Vec<Cluster>,
    sum_log_w: f64,
    /// Weighted least-squares coefficients; cross-products use `y - W beta0`
    /// so that `r2` is not a small difference of large sums.
    beta0: DVector<f64>,
}

struct Evaluation {
    deviance: f64,
    beta: DVector<f64>,
    /// Coefficients of the centered problem, `beta - beta0`.
    beta_c: DVector<f64>,
    r2: f64,
    logdet_v: f64,
}

impl LmmProblem {
    pub(crate) fn new(
        y: &DVector<f64>,
        w: &DMatrix<f64>,
        re: &ReSpec,
        weights: Option<&DVector<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if w.nrows() != n || re.n() != n {
            return Err(Error::Dimension(format!(
                "response {n}, fixed design {}, grouping {}",
                w.nrows(),
                re.n()
            )));
        }
        if let Some(wt) = weights {
            if wt.len() != n || wt.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("weights must be positive and finite".into()));
            }
        }
        let (p, q) = (w.ncols(), re.q());
        if n < p + 2 {
            return Err(Error::Config(format!(
                "{n} observations for {p} fixed effects"
            )));
        }
        let beta0 = match weights {
            Some(wt) => linalg::weighted_least_squares(w, y, wt),
            None => linalg::least_squares(w, y),
        }
        .unwrap_or_else(|| DVector::zeros(p));
        let y = &(y - w * &beta0);
        let mut sum_log_w = 0.0;
        let clusters = re
            .group
            .members()
            .into_iter()
            .map(|members| {
                let mut c = Cluster {
                    ztz: DMatrix::zeros(q, q),
                    ztw: DMatrix::zeros(q, p),
                    wtw: DMatrix::zeros(p, p),
                    zty: DVector::zeros(q),
                    wty: DVector::zeros(p),
                    rows_y: DVector::from_iterator(members.len(), members.iter().map(|&i| y[i])),
                    rows_wt: DVector::from_iterator(
                        members.len(),
                        members.iter().map(|&i| weights.map_or(1.0, |v| v[i])),
                    ),
                    rows_w: DMatrix::from_fn(members.len(), p, |r, j| w[(members[r], j)]),
                    rows_z: DMatrix::from_fn(members.len(), q, |r, j| re.z_row(members[r])[j]),
                    members,
                };
                for &i in &c.members {
                    let wt = weights.map_or(1.0, |v| v[i]);
                    sum_log_w += wt.ln();
                    let zr = re.z_row(i);
                    let wr = w.row(i);
                    for a in 0..q {
                        c.zty[a] += wt * zr[a] * y[i];
                        for b in 0..q {
                            c.ztz[(a, b)] += wt * zr[a] * zr[b];
                        }
                        for b in 0..p {
                            c.ztw[(a, b)] += wt * zr[a] * wr[b];
                        }
                    }
                    for a in 0..p {
                        c.wty[a] += wt * wr[a] * y[i];
                        for b in 0..p {
                            c.wtw[(a, b)] += wt * wr[a] * wr[b];
                        }
                    }
                }
                c
            })
            .collect();
        Ok(LmmProblem {
            n,
            p,
            q,
            clusters,
            sum_log_w,
            beta0,
        })
    }

    pub(crate) fn n_theta(&self) -> usize {
        match self.q {
            2 => 3,
            _ => 1,
        }
    }

    fn lambda(&self, theta: &[f64]) -> DMatrix<f64> {
        match self.q {
            1 => DMatrix::from_element(1, 1, theta[0]),
            _ => DMatrix::from_row_slice(2, 2, &[theta[0], 0.0, theta[1], theta[2]]),
        }
    }

    fn evaluate(&self, theta: &[f64], method: Method) -> Option<Evaluation> {
        if theta.len() != self.n_theta() || theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let lam = self.lambda(theta);
        let p = self.p;
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut c = DVector::<f64>::zeros(p);
        let mut logdet = -self.sum_log_w;
        let eye = DMatrix::<f64>::identity(self.q, self.q);
        let mut solved = Vec::with_capacity(self.clusters.len());
        for cl in &self.clusters {
            let lz = lam.tr_mul(&cl.ztz) * &lam + &eye;
            let chol = lz.cholesky()?;
            logdet += linalg::chol_logdet(&chol);
            let ltzw = lam.tr_mul(&cl.ztw);
            let ltzy = lam.tr_mul(&cl.zty);
            let m_ltzw = chol.solve(&ltzw);
            let m_ltzy = chol.solve(&ltzy);
            a += &cl.wtw - ltzw.tr_mul(&m_ltzw);
            c += &cl.wty - ltzw.tr_mul(&m_ltzy);
            solved.push((m_ltzw, m_ltzy));
        }
        let chol_a = a.cholesky()?;
        let beta_c = chol_a.solve(&c);
        // Penalized residual sum of squares from explicit residuals. The
        // cross-product shortcut y'V^-1 y - c'beta loses about
        // log10(theta^2 sum w) digits to cancellation under large weights.
        let mut r2 = 0.0;
        for (cl, (m_ltzw, m_ltzy)) in self.clusters.iter().zip(&solved) {
            let u = m_ltzy - m_ltzw * &beta_c;
            let resid = &cl.rows_y - &cl.rows_w * &beta_c - &cl.rows_z * (&lam * &u);
            r2 += resid
                .iter()
                .zip(cl.rows_wt.iter())
                .map(|(e, wt)| wt * e * e)
                .sum::<f64>()
                + u.norm_squared();
        }
        if !(r2 > 0.0) || !r2.is_finite() {
            return None;
        }
        let n = self.n as f64;
        let deviance = match method {
            Method::Ml => logdet + n * (1.0 + (2.0 * PI * r2 / n).ln()),
            Method::Reml => {
                let dof = n - p as f64;
                logdet + linalg::chol_logdet(&chol_a) + dof * (1.0 + (2.0 * PI * r2 / dof).ln())
            }
        };
        deviance.is_finite().then_some(Evaluation {
            deviance,
            beta: &self.beta0 + &beta_c,
            beta_c,
            r2,
            logdet_v: logdet,
        })
    }

    pub(crate) fn deviance(&self, theta: &[f64], method: Method) -> f64 {
        self.evaluate(theta, method)
            .map_or(f64::INFINITY, |e| e.deviance)
    }

    /// Moment-based starting point: per-cluster least-squares coefficients of
    /// the OLS residuals give a crude `D`, the pooled within-cluster residual
    /// variance a crude `sigma2_e`.
    fn moment_start(&self, y: &DVector<f64>, w: &DMatrix<f64>, re: &ReSpec) -> Vec<f64> {
        let q = self.q;
        let fallback = vec![0.5; self.n_theta()];
        let Some(beta) = linalg::least_squares(w, y) else {
            return fallback;
        };
        let resid = y - w * beta;
        let mut coefs: Vec<Vec<f64>> = Vec::new();
        let mut ss_within = 0.0;
        let mut dof = 0usize;
        for cl in &self.clusters {
            if cl.members.len() <= q {
                continue;
            }
            let zi = DMatrix::from_fn(cl.members.len(), q, |r, c| re.z_row(cl.members[r])[c]);
            let ri = DVector::from_fn(cl.members.len(), |r, _| resid[cl.members[r]]);
            if let Some(b) = linalg::least_squares(&zi, &ri) {
                ss_within += (&ri - &zi * &b).norm_squared();
                dof += cl.members.len() - q;
                coefs.push(b.iter().copied().collect());
            }
        }
        if coefs.len() < 2 || dof == 0 {
            return fallback;
        }
        let s2 = (ss_within / dof as f64).max(1e-12);
        let m = coefs.len() as f64;
        let sd = |j: usize| {
            let mean = coefs.iter().map(|c| c[j]).sum::<f64>() / m;
            let var = coefs.iter().map(|c| (c[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            (var / s2).sqrt().max(0.1)
        };
        match q {
            1 => vec![sd(0)],
            _ => vec![sd(0), 0.0, sd(1)],
        }
    }
}

/// Profiled deviance: `-2` times the profiled (restricted) log-likelihood at
/// relative covariance factor `theta`. Inadmissible points give `+inf`.
///
/// `theta` is `[l00]` for a single random effect and `[l00, l10, l11]` for
/// both, the lower Cholesky factor of `D / sigma2_e`.
pub fn profiled_deviance(
    theta: &[f64],
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    re: &ReSpec,
    method: Method,
) -> Result<f64> {
    Ok(LmmProblem::new(y, w, re, None)?.deviance(theta, method))
}

pub fn fit_lmm(y: &DVector<f64>, w: &DMatrix<f64>, re: &ReSpec, method: Method) -> Result<ReFit> {
    fit_lmm_inner(y, w, re, None, method, None)
}

/// Residual covariance `sigma2_e diag(1 / weights)`.
pub fn fit_lmm_weighted(
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    re: &ReSpec,
    weights: &DVector<f64>,
    method: Method,
) -> Result<ReFit> {
    fit_lmm_inner(y, w, re, Some(weights), method, None)
}

const RESTART_SCALES: [f64; 3] = [0.1, 1.0, 10.0];

pub(crate) fn fit_lmm_inner(
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    re: &ReSpec,
    weights: Option<&DVector<f64>>,
    method: Method,
    warm_theta: Option<&[f64]>,
) -> Result<ReFit> {
    let problem = LmmProblem::new(y, w, re, weights)?;
    let objective = |th: &[f64]| problem.deviance(th, method);

    let starts: Vec<Vec<f64>> = match warm_theta {
        Some(th) if th.len() == problem.n_theta() => vec![th.to_vec()],
        _ => {
            let base = problem.moment_start(y, w, re);
            RESTART_SCALES
                .iter()
                .map(|s| base.iter().map(|v| v * s).collect())
                .collect()
        }
    };
    let mut best: Option<crate::optim::Minimum> = None;
    let mut evaluations = 0;
    let mut any_converged = false;
    for start in &starts {
        let scale = start.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let nm = NelderMead {
            step: (0.25 * scale).max(0.05),
            ..NelderMead::default()
        };
        let m = nm.minimize(objective, start);
        evaluations += m.evals;
        any_converged |= m.converged;
        if best.as_ref().is_none_or(|b| m.f < b.f) {
            best = Some(m);
        }
    }
    let mut best = best.expect("at least one start");
    // polish with fresh, shrinking simplices until the incumbent stops moving;
    // the deviance is flat along some directions and one simplex can stall
    for step in [0.02, 0.002, 0.0002] {
        let polish = NelderMead {
            step,
            ..NelderMead::default()
        }
        .minimize(objective, &best.x);
        evaluations += polish.evals;
        if polish.f <= best.f {
            any_converged |= polish.converged;
            best = polish;
        }
    }
    if best.f.is_finite() {
        let refined = crate::optim::newton_polish(objective, &best.x, 1e-4, 20);
        evaluations += refined.evals;
        if refined.f.is_finite() {
            any_converged |= refined.converged;
            best.x = refined.x;
            best.f = refined.f;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::numerical(
            "LMM",
            "no admissible point: profiled system is singular",
        ));
    }
    if !any_converged {
        return Err(Error::NonConvergence {
            context: "LMM variance-component optimizer",
            iterations: evaluations,
            best: best.f,
            best_point: best.x,
        });
    }
    finish(&problem, y, w, re, method, best.x, evaluations)
}

fn finish(
    problem: &LmmProblem,
    _y: &DVector<f64>,
    w: &DMatrix<f64>,
    re: &ReSpec,
    method: Method,
    mut theta: Vec<f64>,
    evaluations: usize,
) -> Result<ReFit> {
    // canonical sign: non-negative diagonal of Lambda
    if problem.q == 1 {
        theta[0] = theta[0].abs();
    } else {
        if theta[0] < 0.0 {
            theta[0] = -theta[0];
            theta[1] = -theta[1];
        }
        theta[2] = theta[2].abs();
    }
    let ev = problem
        .evaluate(&theta, method)
        .ok_or_else(|| Error::numerical("LMM", "optimum is not admissible"))?;
    let n = problem.n as f64;
    let p = problem.p;
    let sigma2 = match method {
        Method::Ml => ev.r2 / n,
        Method::Reml => ev.r2 / (n - p as f64),
    };
    let loglik = -0.5 * (ev.logdet_v + n * (2.0 * PI * sigma2).ln() + ev.r2 / sigma2);

    let lam = problem.lambda(&theta);
    let d = lam.clone() * lam.transpose() * sigma2;
    let (sigma_b0, sigma_b1, rho) = match (re.flags.intercept, re.flags.slope) {
        (true, true) => {
            let (s0, s1) = (d[(0, 0)].sqrt(), d[(1, 1)].sqrt());
            let rho = if s0 > 0.0 && s1 > 0.0 {
                d[(0, 1)] / (s0 * s1)
            } else {
                0.0
            };
            (s0, s1, Some(rho.clamp(-1.0, 1.0)))
        }
        (true, false) => (d[(0, 0)].sqrt(), 0.0, None),
        (false, true) => (0.0, d[(0, 0)].sqrt(), None),
        (false, false) => unreachable!(),
    };

    let q = problem.q;
    let eye = DMatrix::<f64>::identity(q, q);
    let mut u_hat = vec![0.0; problem.n];
    let mut blups = Vec::with_capacity(problem.clusters.len());
    for cl in &problem.clusters {
        let m = lam.tr_mul(&cl.ztz) * &lam + &eye;
        let rhs = lam.tr_mul(&(&cl.zty - &cl.ztw * &ev.beta_c));
        let b = &lam * m.cholesky().expect("admissible").solve(&rhs);
        let (b0, b1) = match (re.flags.intercept, re.flags.slope) {
            (true, true) => (b[0], b[1]),
            (true, false) => (b[0], 0.0),
            _ => (0.0, b[0]),
        };
        for &i in &cl.members {
            let z = re.z_row(i);
            u_hat[i] = (0..q).map(|a| z[a] * b[a]).sum();
        }
        blups.push((b0, b1));
    }
    let fitted_fixed: Vec<f64> = (w * &ev.beta).iter().copied().collect();
    let n_params = p + re.flags.n_cov_params() + 1;
    Ok(ReFit {
        varcomp: VarComp {
            sigma_b0,
            sigma_b1,
            rho,
            sigma_e: sigma2.sqrt(),
        },
        fixed_coefs: ev.beta.iter().copied().collect(),
        u_hat,
        blups,
        fitted_fixed,
        loglik,
        reml_criterion: (method == Method::Reml).then_some(ev.deviance),
        method,
        aic: -2.0 * loglik + 2.0 * n_params as f64,
        theta,
        flags: re.flags,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn balanced(seed: u64, m: usize, n: usize, sb: f64, se: f64) -> (DVector<f64>, ReSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = DVector::zeros(m * n);
        for i in 0..m {
            let b: f64 = sb * rng.sample::<f64, _>(StandardNormal);
            for j in 0..n {
                y[i * n + j] = 3.0 + b + se * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let re = ReSpec::new(ReFlags::INTERCEPT, Grouping::blocks(m, n), None).unwrap();
        (y, re)
    }

    /// Closed-form ML for the balanced one-way random-intercept model.
    fn anova_ml(y: &DVector<f64>, m: usize, n: usize) -> (f64, f64) {
        let grand = y.mean();
        let means: Vec<f64> = (0..m).map(|i| y.rows(i * n, n).mean()).collect();
        let ssw: f64 = (0..m)
            .map(|i| {
                y.rows(i * n, n)
                    .iter()
                    .map(|v| (v - means[i]).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let ssb: f64 = n as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
        let s2e = ssw / (m * (n - 1)) as f64;
        let s2b = ((ssb / m as f64) - s2e) / n as f64;
        (s2b.max(0.0), s2e)
    }

    #[test]
    fn balanced_anova_closed_form() {
        for seed in 0..10 {
            let (m, n) = (8 + seed as usize, 5);
            let (y, re) = balanced(seed, m, n, 1.3, 0.8);
            let (s2b, s2e) = anova_ml(&y, m, n);
            let fit = fit_lmm(&y, &DMatrix::from_element(m * n, 1, 1.0), &re, Method::Ml).unwrap();
            assert!(
                (fit.varcomp.sigma_e.powi(2) - s2e).abs() < 1e-6,
                "seed {seed}"
            );
            assert!(
                (fit.varcomp.sigma_b0.powi(2) - s2b).abs() < 1e-6,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn balanced_blup_is_shrunken_cluster_mean() {
        let (m, n) = (12, 6);
        let (y, re) = balanced(42, m, n, 1.0, 1.0);
        let fit = fit_lmm(&y, &DMatrix::from_element(m * n, 1, 1.0), &re, Method::Ml).unwrap();
        let (s2b, s2e) = (fit.varcomp.sigma_b0.powi(2), fit.varcomp.sigma_e.powi(2));
        let shrink = n as f64 * s2b / (n as f64 * s2b + s2e);
        for i in 0..m {
            let resid = y.rows(i * n, n).mean() - fit.fixed_coefs[0];
            assert!((fit.blups[i].0 - shrink * resid).abs() < 1e-9);
            for j in 0..n {
                assert_eq!(fit.u_hat[i * n + j], fit.blups[i].0);
            }
        }
        let off = blup_offset(&fit);
        for i in 0..m * n {
            assert!((off[i] - fit.u_hat[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn blup_shrinks_monotonically_with_variance_ratio() {
        let (m, n) = (10, 4);
        let (y, re) = balanced(3, m, n, 1.0, 1.0);
        let x = DMatrix::from_element(m * n, 1, 1.0);
        let problem = LmmProblem::new(&y, &x, &re, None).unwrap();
        let mut last = f64::INFINITY;
        for theta in [2.0, 1.0, 0.5, 0.25, 0.1, 0.01] {
            let fit = finish(&problem, &y, &x, &re, Method::Ml, vec![theta], 0).unwrap();
            let size: f64 = fit.blups.iter().map(|b| b.0.abs()).sum();
            assert!(size < last);
            last = size;
        }
    }

    #[test]
    fn zero_group_effect_hits_boundary() {
        let (m, n) = (100, 100);
        let (y, re) = balanced(9, m, n, 0.0, 1.0);
        let fit = fit_lmm(&y, &DMatrix::from_element(m * n, 1, 1.0), &re, Method::Ml).unwrap();
        assert!(fit.varcomp.sigma_b0 < 0.05, "{}", fit.varcomp.sigma_b0);
    }

    #[test]
    fn theta_zero_gives_ols_deviance() {
        let (y, re) = balanced(5, 6, 5, 1.0, 1.0);
        let x = DMatrix::from_element(30, 1, 1.0);
        let dev = profiled_deviance(&[0.0], &y, &x, &re, Method::Ml).unwrap();
        let rss: f64 = y.iter().map(|v| (v - y.mean()).powi(2)).sum();
        let n = 30.0;
        let ols = n * (1.0 + (2.0 * PI * rss / n).ln());
        assert!((dev - ols).abs() < 1e-9);
    }

    #[test]
    fn inadmissible_theta_is_infinite() {
        let (y, re) = balanced(5, 6, 5, 1.0, 1.0);
        let x = DMatrix::from_element(30, 1, 1.0);
        assert_eq!(
            profiled_deviance(&[f64::NAN], &y, &x, &re, Method::Ml).unwrap(),
            f64::INFINITY
        );
        assert_eq!(
            profiled_deviance(&[1.0, 2.0], &y, &x, &re, Method::Ml).unwrap(),
            f64::INFINITY
        );
    }

    fn slope_data(seed: u64, m: usize, n: usize) -> (DVector<f64>, DMatrix<f64>, ReSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = DVector::from_fn(m * n, |i, _| (i % n) as f64);
        let mut y = DVector::zeros(m * n);
        for i in 0..m {
            let b0: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
            let b1: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            for j in 0..n {
                let k = i * n + j;
                y[k] = 1.0 + 0.3 * t[k] + b0 + b1 * t[k] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x = DMatrix::from_fn(m * n, 2, |i, j| if j == 0 { 1.0 } else { t[i] });
        let re = ReSpec::new(ReFlags::BOTH, Grouping::blocks(m, n), Some(t)).unwrap();
        (y, x, re)
    }

    #[test]
    fn optimum_is_minimal_on_local_grid() {
        let (y, x, re) = slope_data(21, 15, 8);
        let fit = fit_lmm(&y, &x, &re, Method::Reml).unwrap();
        let f0 = profiled_deviance(&fit.theta, &y, &x, &re, Method::Reml).unwrap();
        for a in -2..=2 {
            for b in -2..=2 {
                let mut th = fit.theta.clone();
                th[0] += a as f64 * 0.01;
                th[2] += b as f64 * 0.01;
                let f = profiled_deviance(&th, &y, &x, &re, Method::Reml).unwrap();
                assert!(f >= f0 - 1e-9, "({a},{b}) {f} < {f0}");
            }
        }
    }

    #[test]
    fn deviance_is_continuous_along_a_ray() {
        let (y, x, re) = slope_data(22, 10, 6);
        let dir = [1.0, 0.3, 0.5];
        let mut prev = None;
        for s in 0..=2000 {
            let t = s as f64 * 1e-3;
            let th: Vec<f64> = dir.iter().map(|d| d * t).collect();
            let f = profiled_deviance(&th, &y, &x, &re, Method::Ml).unwrap();
            if let Some(p) = prev {
                assert!((f - p as f64).abs() < 0.5, "jump at {t}");
            }
            prev = Some(f);
        }
    }

    #[test]
    fn ml_fit_beats_ols() {
        let (y, x, re) = slope_data(23, 12, 6);
        let fit = fit_lmm(&y, &x, &re, Method::Ml).unwrap();
        let beta = linalg::least_squares(&x, &y).unwrap();
        let rss = (&y - &x * beta).norm_squared();
        let n = y.len() as f64;
        let ols_ll = -0.5 * n * (1.0 + (2.0 * PI * rss / n).ln());
        assert!(fit.loglik >= ols_ll - 1e-9);
        let u = DVector::from_vec(fit.u_hat.clone());
        // cluster structure: intercept plus slope in t
        for (i, &(b0, b1)) in fit.blups.iter().enumerate() {
            for j in 0..6 {
                let k = i * 6 + j;
                let t = re.slope_covariate.as_ref().unwrap()[k];
                assert!((u[k] - (b0 + b1 * t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let (y, x, re) = slope_data(24, 10, 6);
        let a = fit_lmm(&y, &x, &re, Method::Ml).unwrap();
        let b = fit_lmm_weighted(&y, &x, &re, &DVector::from_element(60, 1.0), Method::Ml).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-8);
        assert!((a.varcomp.sigma_e - b.varcomp.sigma_e).abs() < 1e-8);
        assert!((a.varcomp.sigma_b0 - b.varcomp.sigma_b0).abs() < 1e-6);
    }

    #[test]
    fn uniform_weight_four_rescales_residual_sd() {
        // residual covariance sigma2_e / w: the scale parameter absorbs w
        let (y, re) = balanced(8, 10, 6, 1.0, 1.0);
        let x1 = DMatrix::from_element(60, 1, 1.0);
        let a = fit_lmm(&y, &x1, &re, Method::Ml).unwrap();
        let b =
            fit_lmm_weighted(&y, &x1, &re, &DVector::from_element(60, 4.0), Method::Ml).unwrap();
        assert!((b.varcomp.sigma_e - 2.0 * a.varcomp.sigma_e).abs() < 1e-6);
        assert!((b.varcomp.sigma_b0 - a.varcomp.sigma_b0).abs() < 1e-6);
        assert!((b.fixed_coefs[0] - a.fixed_coefs[0]).abs() < 1e-8);
    }

    #[test]
    fn weighted_gls_matches_dense_oracle() {
        let (y, x, re) = slope_data(25, 10, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wts = DVector::from_fn(60, |_, _| rng.random_range(0.3..3.0));
        let theta = [0.8, -0.1, 0.3];
        let problem = LmmProblem::new(&y, &x, &re, Some(&wts)).unwrap();
        let ev = problem.evaluate(&theta, Method::Ml).unwrap();

        // dense: V = diag(1/w) + Z Lambda Lambda' Z'
        let n = 60;
        let lam = DMatrix::from_row_slice(2, 2, &[theta[0], 0.0, theta[1], theta[2]]);
        let mut v = DMatrix::zeros(n, n);
        for i in 0..n {
            v[(i, i)] = 1.0 / wts[i];
            for j in 0..n {
                if re.group.codes[i] == re.group.codes[j] {
                    let zi = DVector::from_column_slice(&re.z_row(i));
                    let zj = DVector::from_column_slice(&re.z_row(j));
                    v[(i, j)] += (zi.transpose() * &lam * lam.transpose() * zj)[(0, 0)];
                }
            }
        }
        let vinv = v.clone().try_inverse().unwrap();
        let a = x.transpose() * &vinv * &x;
        let beta = a.clone().try_inverse().unwrap() * x.transpose() * &vinv * &y;
        for j in 0..2 {
            assert!((beta[j] - ev.beta[j]).abs() < 1e-6);
        }
        let r = &y - &x * &beta;
        let r2 = (r.transpose() * &vinv * &r)[(0, 0)];
        assert!((r2 - ev.r2).abs() < 1e-6 * r2);
        let logdet = v.determinant().ln();
        assert!((logdet - ev.logdet_v).abs() < 1e-6);
    }
}
