//! Alternating fixed-effects selection / random-effects refit loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::gam::{fit_semms, FitConfig};
use crate::glm::fit_glm;
use crate::glmm::{
    fit_glmm_pql_from, link_scale_response, working_response, GlmmFit, ResponseKind,
};
use crate::ingest::Dataset;
use crate::linalg;
use crate::lmm::{fit_lmm_inner, Method, ReFit, ReFlags, ReSpec, VarComp};
use crate::mixture::MixtureState;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MixedConfig {
    pub re: ReFlags,
    /// Outer tolerance on `max |delta u_hat|`, response units.
    pub conv_tol: f64,
    pub max_outer: usize,
    pub semms: FitConfig,
    /// Start from the null random-effects fit instead of `u_hat = 0`.
    pub warm_start: bool,
    pub response: ResponseKind,
}

impl Default for MixedConfig {
    fn default() -> Self {
        MixedConfig {
            re: ReFlags::INTERCEPT,
            conv_tol: 1e-3,
            max_outer: 10,
            semms: FitConfig::default(),
            warm_start: true,
            response: ResponseKind::Working,
        }
    }
}

impl MixedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.re.q() == 0 {
            return Err(Error::Config(
                "at least one random effect is required".into(),
            ));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::Config("conv_tol must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::Config("max_outer must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FinalModel {
    Lmm(ReFit),
    Glmm(GlmmFit),
}

impl FinalModel {
    pub fn varcomp(&self) -> VarComp {
        match self {
            FinalModel::Lmm(f) => f.varcomp,
            FinalModel::Glmm(f) => f.varcomp,
        }
    }

    pub fn u_hat(&self) -> &[f64] {
        match self {
            FinalModel::Lmm(f) => &f.u_hat,
            FinalModel::Glmm(f) => &f.u_hat,
        }
    }

    pub fn fixed_coefs(&self) -> &[f64] {
        match self {
            FinalModel::Lmm(f) => &f.fixed_coefs,
            FinalModel::Glmm(f) => &f.fixed_coefs,
        }
    }

    /// AIC; approximate (working-model) for PQL fits.
    pub fn aic(&self) -> f64 {
        match self {
            FinalModel::Lmm(f) => f.aic,
            FinalModel::Glmm(f) => f.approx_aic,
        }
    }

    fn theta(&self) -> &[f64] {
        match self {
            FinalModel::Lmm(f) => &f.theta,
            FinalModel::Glmm(f) => &f.theta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalReport {
    pub model: FinalModel,
    pub aic: f64,
    /// Variance inflation factors of the non-constant fixed columns, in
    /// design order.
    pub vif: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedFit {
    pub state: MixtureState,
    pub final_model: FinalModel,
    pub aic: f64,
    pub vif: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub outer_iters: usize,
    pub converged: bool,
    /// `max |delta u_hat|` per outer iteration.
    pub u_trace: Vec<f64>,
    pub selected_per_iter: Vec<Vec<usize>>,
    /// ML (or approximate PQL) log-likelihood of each in-loop refit.
    pub re_logliks: Vec<f64>,
}

impl MixedFit {
    pub fn selected(&self) -> Vec<usize> {
        self.state.active().to_vec()
    }
}

pub(crate) fn re_spec(d: &Dataset, flags: ReFlags) -> Result<ReSpec> {
    let group = d.group.clone().ok_or(Error::MissingGroup)?;
    if flags.slope && d.slope.is_none() {
        return Err(Error::MissingSlope);
    }
    ReSpec::new(flags, group, d.slope.clone())
}

fn fixed_design(d: &Dataset, selected: &[usize]) -> DMatrix<f64> {
    linalg::hcat(&d.x, &linalg::select_columns(&d.z, selected))
}

/// One random-effects fit of the loop, warm-started from `theta` when given.
fn refit(
    d: &Dataset,
    re: &ReSpec,
    selected: &[usize],
    method: Method,
    theta: Option<&[f64]>,
) -> Result<FinalModel> {
    let w = fixed_design(d, selected);
    match d.family {
        Family::Gaussian => Ok(FinalModel::Lmm(fit_lmm_inner(
            &d.y, &w, re, None, method, theta,
        )?)),
        fam => Ok(FinalModel::Glmm(fit_glmm_pql_from(
            &d.y, &w, re, fam, theta,
        )?)),
    }
}

fn loglik(m: &FinalModel) -> f64 {
    match m {
        FinalModel::Lmm(f) => f.loglik,
        FinalModel::Glmm(f) => f.approx_loglik,
    }
}

/// Response handed to the selection step given the current RE fit.
fn adjusted_response(
    d: &Dataset,
    kind: ResponseKind,
    u: &DVector<f64>,
    eta_fixed: &DVector<f64>,
) -> DVector<f64> {
    let fam = d.family;
    match (fam, kind) {
        (Family::Gaussian, _) => &d.y - u,
        (_, ResponseKind::LinkScale) => link_scale_response(&d.y, u, fam),
        (_, ResponseKind::Working) => {
            let mu = DVector::from_fn(d.n(), |i, _| {
                fam.clamp_mean(fam.inv_link(eta_fixed[i] + u[i]))
            });
            working_response(&d.y, &mu, eta_fixed, fam)
        }
    }
}

fn eta_fixed_of(m: &FinalModel) -> DVector<f64> {
    match m {
        FinalModel::Lmm(f) => DVector::from_vec(f.fitted_fixed.clone()),
        FinalModel::Glmm(f) => DVector::from_vec(f.eta_fixed.clone()),
    }
}

pub fn fit_semms_mixed(d: &Dataset, cfg: &MixedConfig) -> Result<MixedFit> {
    cfg.validate()?;
    cfg.semms.validate(d.k())?;
    let re = re_spec(d, cfg.re)?;
    let d = if d.standardized {
        d.clone()
    } else {
        d.standardize()?
    };
    let n = d.n();

    // starting offset: null RE model, or nothing
    let (mut u, mut eta_fixed, mut theta) = if cfg.warm_start {
        let null = refit(&d, &re, &[], Method::Ml, None)?;
        (
            DVector::from_column_slice(null.u_hat()),
            eta_fixed_of(&null),
            Some(null.theta().to_vec()),
        )
    } else {
        let eta = match d.family {
            Family::Gaussian => DVector::zeros(n),
            fam => fit_glm(&d.y, &d.x, fam)?.eta,
        };
        (DVector::zeros(n), eta, None)
    };

    let mut u_trace = Vec::new();
    let mut selected_per_iter = Vec::new();
    let mut re_logliks = Vec::new();
    let mut state = MixtureState::empty(d.k());
    let mut current: Option<FinalModel> = None;
    let mut converged = false;

    for t in 1..=cfg.max_outer {
        let adj = adjusted_response(&d, cfg.response, &u, &eta_fixed);
        let sel = fit_semms(&d.with_response(adj, Family::Gaussian), &cfg.semms)?;
        let selected = sel.selected();
        let model = refit(&d, &re, &selected, Method::Ml, theta.as_deref()).map_err(|e| {
            Error::OuterLoop {
                iteration: t,
                last_selected: state.active().to_vec(),
                last_u_hat: u.iter().copied().collect(),
                source: Box::new(e),
            }
        })?;
        let new_u = DVector::from_column_slice(model.u_hat());
        let change = (&new_u - &u).amax();
        u_trace.push(change);
        selected_per_iter.push(selected);
        re_logliks.push(loglik(&model));
        state = sel.state;
        u = new_u;
        eta_fixed = eta_fixed_of(&model);
        theta = Some(model.theta().to_vec());
        current = Some(model);
        if change < cfg.conv_tol {
            converged = true;
            break;
        }
    }

    let report = match d.family {
        Family::Gaussian => final_report(&d, &re, state.active(), theta.as_deref())?,
        // the last in-loop PQL fit is already the final ML model
        _ => {
            let model = current.expect("at least one outer iteration");
            let w = fixed_design(&d, state.active());
            FinalReport {
                aic: model.aic(),
                vif: vif(&w),
                model,
            }
        }
    };
    Ok(MixedFit {
        u_hat: report.model.u_hat().to_vec(),
        aic: report.aic,
        vif: report.vif,
        final_model: report.model,
        state,
        outer_iters: u_trace.len(),
        converged,
        u_trace,
        selected_per_iter,
        re_logliks,
    })
}

fn final_report(
    d: &Dataset,
    re: &ReSpec,
    selected: &[usize],
    theta: Option<&[f64]>,
) -> Result<FinalReport> {
    let method = if d.family == Family::Gaussian {
        Method::Reml
    } else {
        Method::Ml
    };
    // a REML optimum differs from the ML one, so only PQL reuses theta
    let theta = if method == Method::Reml { None } else { theta };
    let model = refit(d, re, selected, method, theta)?;
    Ok(FinalReport {
        aic: model.aic(),
        vif: vif(&fixed_design(d, selected)),
        model,
    })
}

/// Standalone refit of a selected set: REML for Gaussian, PQL otherwise.
/// Candidates enter as fixed covariates after standardization.
pub fn run_final_model(
    d: &Dataset,
    state: &MixtureState,
    cfg: &MixedConfig,
) -> Result<FinalReport> {
    cfg.validate()?;
    let re = re_spec(d, cfg.re)?;
    let d = if d.standardized {
        d.clone()
    } else {
        d.standardize()?
    };
    final_report(&d, &re, state.active(), None)
}

/// Diagonal of the inverse correlation matrix of the non-constant columns.
pub fn vif(w: &DMatrix<f64>) -> Vec<f64> {
    let cols: Vec<usize> = (0..w.ncols())
        .filter(|&j| {
            let c = w.column(j);
            c.iter().any(|&v| v != c[0])
        })
        .collect();
    if cols.is_empty() {
        return Vec::new();
    }
    let n = w.nrows() as f64;
    let std: Vec<DVector<f64>> = cols
        .iter()
        .map(|&j| {
            let c = w.column(j);
            let mean = c.mean();
            let centered = c.map(|v| v - mean);
            let sd = (centered.norm_squared() / n).sqrt();
            centered / sd
        })
        .collect();
    let p = std.len();
    let r = DMatrix::from_fn(p, p, |a, b| std[a].dot(&std[b]) / n);
    match r.try_inverse() {
        Some(inv) => (0..p).map(|j| inv[(j, j)]).collect(),
        None => vec![f64::INFINITY; p],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Grouping;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn clustered(seed: u64, sb: f64) -> Dataset {
        let (m, n, k) = (20, 10, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(m * n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b: Vec<f64> = (0..m)
            .map(|_| sb * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y = DVector::from_fn(m * n, |i, _| {
            2.0 * z[(i, 0)] - 1.5 * z[(i, 1)] + b[i / n] + rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(y, z, Family::Gaussian)
            .unwrap()
            .with_group(Grouping::blocks(m, n))
            .unwrap()
    }

    #[test]
    fn vif_of_orthonormal_columns_is_one() {
        let mut w = DMatrix::from_fn(8, 4, |i, j| match j {
            0 => 1.0,
            1 => [1.0, -1.0][i % 2],
            2 => [1.0, 1.0, -1.0, -1.0][i % 4],
            _ => {
                if i < 4 {
                    1.0
                } else {
                    -1.0
                }
            }
        });
        for v in vif(&w) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        w.set_column(3, &(w.column(3) + w.column(1) * 0.5));
        let v = vif(&w);
        assert!(v[0] > 1.1 && v[2] > 1.1 && (v[1] - 1.0).abs() < 1e-9);
        assert!(vif(&DMatrix::from_element(5, 1, 1.0)).is_empty());
    }

    #[test]
    fn empty_selection_gives_null_model_with_finite_aic() {
        let d = clustered(1, 1.0);
        let r = run_final_model(&d, &MixtureState::empty(d.k()), &MixedConfig::default()).unwrap();
        assert!(r.aic.is_finite());
        assert_eq!(r.model.fixed_coefs().len(), 1);
        assert!(matches!(
            r.model,
            FinalModel::Lmm(ReFit {
                method: Method::Reml,
                ..
            })
        ));
    }

    #[test]
    fn selects_signal_and_converges() {
        let d = clustered(2, 1.5);
        let fit = fit_semms_mixed(&d, &MixedConfig::default()).unwrap();
        assert_eq!(fit.selected(), vec![0, 1]);
        assert!(fit.converged);
        assert!(fit.outer_iters <= 10);
        assert_eq!(fit.u_trace.len(), fit.outer_iters);
        assert_eq!(fit.selected_per_iter.len(), fit.outer_iters);
    }

    #[test]
    fn gaussian_adjusted_response_is_subtraction() {
        let d = clustered(3, 1.0);
        let u = DVector::from_fn(d.n(), |i, _| (i % 7) as f64 * 0.1);
        let r = adjusted_response(&d, ResponseKind::Working, &u, &DVector::zeros(d.n()));
        assert_eq!(r, &d.y - &u);
    }

    #[test]
    fn zero_random_effect_matches_plain_fit() {
        let mut agree = 0;
        for seed in 0..20 {
            let d = clustered(100 + seed, 0.0);
            let plain = fit_semms(&d, &FitConfig::default()).unwrap().selected();
            let mixed = fit_semms_mixed(&d, &MixedConfig::default()).unwrap();
            assert!(mixed.outer_iters <= 2, "seed {seed}: {:?}", mixed.u_trace);
            agree += (plain == mixed.selected()) as usize;
        }
        assert_eq!(agree, 20);
    }

    #[test]
    fn missing_group_is_rejected() {
        let mut d = clustered(4, 1.0);
        d.group = None;
        assert!(matches!(
            fit_semms_mixed(&d, &MixedConfig::default()),
            Err(Error::MissingGroup)
        ));
        let d = clustered(4, 1.0);
        let cfg = MixedConfig {
            re: ReFlags::BOTH,
            ..Default::default()
        };
        assert!(matches!(
            fit_semms_mixed(&d, &cfg),
            Err(Error::MissingSlope)
        ));
    }
}
