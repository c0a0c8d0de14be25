//! Generalized alternating maximization: greedy label moves interleaved with
//! an EM refresh of `(mu, beta, sigma2_e, sigma2_r)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::fit_glm;
use crate::glmm::working_response;
use crate::ingest::Dataset;
use crate::linalg;
use crate::mixture::{log_likelihood, objective, CrossProducts, Label, MixtureState, ModelParams};

/// Smallest admissible common effect magnitude.
const MU_MIN: f64 = 1e-8;
/// Residual variance below this is treated as a degenerate fit.
const SIGMA2_E_MIN: f64 = 1e-12;
/// Outer working-response rounds for non-Gaussian plain fits.
const MAX_WORKING_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Size of the correlation-screened starting set.
    pub nn: usize,
    /// Candidates correlated above this with an already chosen one are
    /// skipped while building the starting set. Not used afterwards.
    pub mincor: f64,
    /// Minimum gain for a move to be accepted.
    pub minchange: f64,
    pub max_gam_iters: usize,
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            nn: 5,
            mincor: 0.7,
            minchange: 1.0,
            max_gam_iters: 100,
            em_tol: 1e-6,
            em_max_iters: 200,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.mincor > 0.0 && self.mincor < 1.0) {
            return Err(Error::Config(format!(
                "mincor must lie in (0,1), got {}",
                self.mincor
            )));
        }
        if !(self.minchange > 0.0) || !(self.em_tol > 0.0) {
            return Err(Error::Config(
                "minchange and em_tol must be positive".into(),
            ));
        }
        if self.nn > k {
            return Err(Error::Config(format!(
                "nn = {} exceeds the {k} candidates",
                self.nn
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemmsFit {
    pub state: MixtureState,
    pub params: ModelParams,
    /// `prior + log-likelihood` after the initial EM and after every
    /// accepted move (each followed by EM).
    pub trace: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
    /// Largest drop in log-likelihood seen across all EM iterations.
    pub em_max_decrease: f64,
    /// Whether the candidates were standardized by the fitter.
    pub standardized_internally: bool,
    /// Working-response rounds (non-Gaussian plain fits only).
    pub working_rounds: usize,
}

impl SemmsFit {
    pub fn selected(&self) -> Vec<usize> {
        self.state.active().to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub params: ModelParams,
    /// Log-likelihood at entry followed by one value per iteration.
    pub loglik: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmOutcome {
    pub fn max_decrease(&self) -> f64 {
        self.loglik
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Starting labels: the `nn` candidates most correlated with the response,
/// skipping any whose absolute correlation with an already chosen candidate
/// exceeds `mincor`. Each chosen label takes the sign of its correlation.
pub fn init_active_set(d: &Dataset, cfg: &FitConfig) -> MixtureState {
    let k = d.k();
    let mut state = MixtureState::empty(k);
    if cfg.nn == 0 || k == 0 {
        return state;
    }
    let y = d.y.as_slice();
    let cors: Vec<f64> = (0..k)
        .map(|j| pearson(d.z.column(j).as_slice(), y))
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| cors[b].abs().total_cmp(&cors[a].abs()).then(a.cmp(&b)));

    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.nn);
    for j in order {
        if chosen.len() == cfg.nn {
            break;
        }
        if cors[j] == 0.0 {
            continue;
        }
        let zj = d.z.column(j);
        let clash = chosen
            .iter()
            .any(|&c| pearson(zj.as_slice(), d.z.column(c).as_slice()).abs() > cfg.mincor);
        if !clash {
            chosen.push(j);
            state.set(j, Label::from_sign(cors[j]));
        }
    }
    state
}

/// Least-squares starting values for the parameters of `state`.
pub fn initial_params(d: &Dataset, state: &MixtureState) -> Result<ModelParams> {
    let n = d.n() as f64;
    let p = d.x.ncols();
    let beta0 = linalg::least_squares(&d.x, &d.y)
        .ok_or_else(|| Error::numerical("initial parameters", "fixed design is rank deficient"))?;
    let resid = &d.y - &d.x * &beta0;
    let rss0 = resid.norm_squared();

    if state.n_active() == 0 {
        // magnitude of the strongest marginal slope
        let mu = (0..d.k())
            .map(|j| {
                let z = d.z.column(j);
                let zc = &z - DVector::from_element(z.len(), z.mean());
                (zc.dot(&resid) / zc.norm_squared()).abs()
            })
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
            .max(1e-3);
        return Ok(ModelParams {
            mu,
            beta: beta0.iter().copied().collect(),
            sigma2_e: (rss0 / n).max(SIGMA2_E_MIN * 10.0),
            sigma2_r: 0.25 * mu * mu,
        });
    }

    let active = state.active();
    let signs = state.active_signs();
    let mut zg = linalg::select_columns(&d.z, active);
    for (mut col, s) in zg.column_iter_mut().zip(&signs) {
        col *= *s;
    }
    let h = linalg::hcat(&d.x, &zg);
    let Some(coef) = linalg::least_squares(&h, &d.y) else {
        let mut params = initial_params(d, &MixtureState::empty(d.k()))?;
        params.sigma2_r = 0.1 * params.mu * params.mu;
        return Ok(params);
    };
    let rss = (&d.y - &h * &coef).norm_squared();
    let a: Vec<f64> = coef.rows(p, active.len()).iter().copied().collect();
    let l = a.len() as f64;
    let mu = (a.iter().sum::<f64>() / l).max(1e-3);
    let var = if a.len() > 1 {
        a.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (l - 1.0)
    } else {
        0.0
    };
    Ok(ModelParams {
        mu,
        beta: coef.rows(0, p).iter().copied().collect(),
        sigma2_e: (rss / n).max(rss0 / n * 1e-3).max(SIGMA2_E_MIN * 10.0),
        sigma2_r: var.max(0.01 * mu * mu),
    })
}

/// EM over `(mu, beta, sigma2_e, sigma2_r)` with the active-coefficient
/// deviations as latent variables.
///
/// E-step: `eta | Y ~ N(m, V)` with `V = sigma2_r B` and
/// `m = (sigma2_r / sigma2_e) B Z_G' (Y - X beta - Z_G mu 1)`.
/// M-step: `(beta, mu)` by least squares of `Y - Z_G m` on `[X | Z_G 1]`
/// (with `mu >= MU_MIN`), then
/// `sigma2_e = (||Y - X beta - Z_G (mu 1 + m)||^2 + tr(Z_G'Z_G V)) / N` and
/// `sigma2_r = (||m||^2 + tr V) / L`.
pub fn em_update(
    cp: &CrossProducts,
    state: &MixtureState,
    p: &ModelParams,
    cfg: &FitConfig,
) -> Result<EmOutcome> {
    let n = cp.n() as f64;
    let pp = cp.p();
    let l = state.n_active();

    if l == 0 {
        let ws = cp.workspace(state, p)?;
        let entry = log_likelihood(&ws, p)?;
        let beta = linalg::solve_spd(cp.xtx(), cp.xty())
            .ok_or_else(|| Error::numerical("EM", "fixed design is rank deficient"))?;
        let rss = cp.yty() - 2.0 * beta.dot(cp.xty()) + beta.dot(&(cp.xtx() * &beta));
        let sigma2_e = rss / n;
        if !(sigma2_e >= SIGMA2_E_MIN) {
            return Err(Error::numerical(
                "EM",
                format!("residual variance collapsed to {sigma2_e}"),
            ));
        }
        let params = ModelParams {
            beta: beta.iter().copied().collect(),
            sigma2_e,
            ..p.clone()
        };
        let ws = cp.workspace(state, &params)?;
        let ll = log_likelihood(&ws, &params)?;
        return Ok(EmOutcome {
            params,
            loglik: vec![entry, ll],
            iterations: 1,
            converged: true,
        });
    }

    let mut params = p.clone();
    params.mu = params.mu.max(MU_MIN);
    if !(params.sigma2_r >= 0.0) {
        params.sigma2_r = 0.0;
    }
    let mut ws = cp.workspace(state, &params)?;
    let mut ll = log_likelihood(&ws, &params)?;
    let mut trace = vec![ll];

    let ztz = ws.ztz();
    let hth = ws.hth().clone();
    let hty = ws.hty().clone();
    let xtx = hth.view((0, 0), (pp, pp)).into_owned();
    let xtzg = hth.view((0, pp), (pp, l)).into_owned();
    let ones = DVector::from_element(l, 1.0);
    let xtzg1 = &xtzg * &ones;
    let one_ztz_one = ones.dot(&(&ztz * &ones));

    // normal equations of [X | Z_G 1]
    let mut ata = DMatrix::zeros(pp + 1, pp + 1);
    ata.view_mut((0, 0), (pp, pp)).copy_from(&xtx);
    ata.view_mut((0, pp), (pp, 1)).copy_from(&xtzg1);
    ata.view_mut((pp, 0), (1, pp)).copy_from(&xtzg1.transpose());
    ata[(pp, pp)] = one_ztz_one;
    let ata_chol = linalg::cholesky(&ata);
    let xtx_chol = linalg::cholesky(&xtx)
        .ok_or_else(|| Error::numerical("EM", "fixed design is rank deficient"))?;

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.em_max_iters {
        iterations = it;
        let r = params.ratio();
        let c = ws.mean_coefficients(&params);
        let zte = ws.zt_residual(&c);
        let b = ws.b().clone();
        let m = &b * &zte * r;
        let trace_b = b.trace();
        let trace_ztz_b = (&ztz * &b).trace();

        // (beta, mu)
        let xt_target = hty.rows(0, pp) - &xtzg * &m;
        let ones_target = ones.dot(&(hty.rows(pp, l) - &ztz * &m));
        let mut rhs = DVector::zeros(pp + 1);
        rhs.rows_mut(0, pp).copy_from(&xt_target);
        rhs[pp] = ones_target;
        let joint = ata_chol.as_ref().map(|ch| ch.solve(&rhs));
        let (beta, mu) = match joint {
            Some(sol) if sol[pp] >= MU_MIN && sol.iter().all(|v| v.is_finite()) => {
                (sol.rows(0, pp).into_owned(), sol[pp])
            }
            _ => {
                let beta = xtx_chol.solve(&(xt_target - &xtzg1 * MU_MIN));
                (beta, MU_MIN)
            }
        };

        // variances
        let mut full = DVector::zeros(pp + l);
        full.rows_mut(0, pp).copy_from(&beta);
        full.rows_mut(pp, l).copy_from(&(&ones * mu + &m));
        let rss = ws.residual_ss(&full).max(0.0);
        let sigma2_e = (rss + params.sigma2_r * trace_ztz_b) / n;
        let sigma2_r = (m.norm_squared() + params.sigma2_r * trace_b) / l as f64;
        if !(sigma2_e >= SIGMA2_E_MIN) {
            return Err(Error::numerical(
                "EM",
                format!("residual variance collapsed to {sigma2_e}"),
            ));
        }

        params = ModelParams {
            mu,
            beta: beta.iter().copied().collect(),
            sigma2_e,
            sigma2_r,
        };
        ws.refresh(sigma2_e, sigma2_r)?;
        let next = log_likelihood(&ws, &params)?;
        trace.push(next);
        let change = (next - ll).abs() / ll.abs().max(1.0);
        ll = next;
        if change < cfg.em_tol {
            converged = true;
            break;
        }
    }
    Ok(EmOutcome {
        params,
        loglik: trace,
        iterations,
        converged,
    })
}

/// A single accepted label reassignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub k: usize,
    pub label: Label,
    pub gain: f64,
}

/// Best single reassignment at fixed parameters, ties broken by smallest
/// index and then `+1` before `-1` before `0`.
pub fn best_move(
    cp: &CrossProducts,
    state: &MixtureState,
    p: &ModelParams,
) -> Result<Option<Move>> {
    let base = objective(cp, state, p)?;
    let mut best: Option<Move> = None;
    for k in 0..state.k() {
        for label in Label::MOVE_ORDER {
            if label == state.label(k) {
                continue;
            }
            let gain = objective(cp, &state.with(k, label), p)? - base;
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(Move { k, label, gain });
            }
        }
    }
    Ok(best)
}

/// Apply the best move if its gain exceeds `minchange`.
pub fn greedy_step(
    cp: &CrossProducts,
    state: &MixtureState,
    p: &ModelParams,
    cfg: &FitConfig,
) -> Result<(MixtureState, Option<Move>)> {
    match best_move(cp, state, p)? {
        Some(mv) if mv.gain > cfg.minchange => Ok((state.with(mv.k, mv.label), Some(mv))),
        _ => Ok((state.clone(), None)),
    }
}

fn prepare(d: &Dataset) -> Result<(Dataset, bool)> {
    if d.standardized {
        Ok((d.clone(), false))
    } else {
        Ok((d.standardize()?, true))
    }
}

/// Gaussian fit. Candidates are standardized first unless already flagged
/// as standardized.
pub fn fit_semms(d: &Dataset, cfg: &FitConfig) -> Result<SemmsFit> {
    cfg.validate(d.k())?;
    let (d, standardized_internally) = prepare(d)?;
    let cp = CrossProducts::new(&d);
    let state = init_active_set(&d, cfg);
    let params = initial_params(&d, &state)?;
    let mut fit = run_gam(&cp, state, params, cfg)?;
    fit.standardized_internally = standardized_internally;
    Ok(fit)
}

/// The alternating loop from a given starting point.
pub fn run_gam(
    cp: &CrossProducts,
    mut state: MixtureState,
    params: ModelParams,
    cfg: &FitConfig,
) -> Result<SemmsFit> {
    let em = em_update(cp, &state, &params, cfg)?;
    let mut em_max_decrease = em.max_decrease();
    let mut params = em.params;
    let mut trace = vec![objective(cp, &state, &params)?];
    let mut converged = false;
    let mut n_iters = 0;
    while n_iters < cfg.max_gam_iters {
        let (next, mv) = greedy_step(cp, &state, &params, cfg)?;
        if mv.is_none() {
            converged = true;
            break;
        }
        n_iters += 1;
        state = next;
        let em = em_update(cp, &state, &params, cfg)?;
        em_max_decrease = em_max_decrease.max(em.max_decrease());
        params = em.params;
        trace.push(objective(cp, &state, &params)?);
    }
    Ok(SemmsFit {
        state,
        params,
        trace,
        n_iters,
        converged,
        em_max_decrease,
        standardized_internally: false,
        working_rounds: 0,
    })
}

/// Plain non-Gaussian fit: repeatedly linearize around the current fixed
/// linear predictor, run the Gaussian fitter on the working response, and
/// refit an unpenalized GLM on the selected set, until the selected set
/// stops changing.
pub fn fit_semms_glm(d: &Dataset, cfg: &FitConfig) -> Result<SemmsFit> {
    if d.family == Family::Gaussian {
        return Err(Error::Config(
            "fit_semms_glm needs a Poisson or binomial response".into(),
        ));
    }
    cfg.validate(d.k())?;
    let fam = d.family;
    let (ds, standardized_internally) = prepare(d)?;
    let select = |eta: &DVector<f64>| -> Result<SemmsFit> {
        let mu = eta.map(|e| fam.clamp_mean(fam.inv_link(e)));
        let gauss = ds.with_response(working_response(&ds.y, &mu, eta, fam), Family::Gaussian);
        let start = init_active_set(&gauss, cfg);
        let params = initial_params(&gauss, &start)?;
        run_gam(&CrossProducts::new(&gauss), start, params, cfg)
    };
    let mut eta = fit_glm(&ds.y, &ds.x, fam)?.eta;
    // (selected set, linear predictor refitted from it)
    let mut history: Vec<(Vec<usize>, DVector<f64>)> = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    let mut fit = loop {
        rounds += 1;
        let fit = select(&eta)?;
        let selected = fit.selected();
        if history.last().is_some_and(|(s, _)| *s == selected) {
            converged = true;
            break fit;
        }
        if rounds >= MAX_WORKING_ROUNDS {
            break fit;
        }
        // a set seen before, but not last round, means the linearization
        // alternates between sets; one damped round at the cycle's average
        // linear predictor settles it instead of the round cap's parity
        if let Some(start) = history.iter().position(|(s, _)| *s == selected) {
            let cycle = &history[start..];
            let mean = cycle
                .iter()
                .fold(DVector::zeros(eta.len()), |acc, (_, e)| acc + e)
                / cycle.len() as f64;
            rounds += 1;
            break select(&mean)?;
        }
        let h = linalg::hcat(&ds.x, &linalg::select_columns(&ds.z, &selected));
        eta = match fit_glm(&ds.y, &h, fam) {
            Ok(g) => g.eta,
            Err(e) if e.is_numerical() => break fit,
            Err(e) => return Err(e),
        };
        history.push((selected, eta.clone()));
    };
    fit.converged = fit.converged && converged;
    fit.standardized_internally = standardized_internally;
    fit.working_rounds = rounds;
    Ok(fit)
}
