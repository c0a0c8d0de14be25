//! State, parameters and marginal likelihood of the three-component mixture
//! model.
//!
//! Active predictor `k` carries coefficient `gamma_k * (mu + eta_k)` with
//! `eta_k ~ N(0, sigma2_r)`, so that marginally
//!
//! ```text
//! Y ~ N(X beta + Z_G mu 1,  sigma2_e I + sigma2_r Z_G Z_G')
//! ```
//!
//! where `Z_G` holds the active columns multiplied by their signs. The
//! likelihood is evaluated through the Woodbury identity and the matrix
//! determinant lemma from cross-products only; nothing of size `N x N` is
//! ever formed.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::linalg;

/// Ternary latent label of a candidate predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Null,
    Positive,
}

impl Label {
    /// Order in which alternatives are tried; earlier wins ties.
    pub const MOVE_ORDER: [Label; 3] = [Label::Positive, Label::Negative, Label::Null];

    pub fn sign(self) -> f64 {
        match self {
            Label::Negative => -1.0,
            Label::Null => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn from_sign(s: f64) -> Label {
        if s > 0.0 {
            Label::Positive
        } else if s < 0.0 {
            Label::Negative
        } else {
            Label::Null
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub negative: usize,
    pub null: usize,
    pub positive: usize,
}

impl Counts {
    pub fn active(&self) -> usize {
        self.negative + self.positive
    }

    pub fn total(&self) -> usize {
        self.negative + self.null + self.positive
    }

    fn bump(&mut self, label: Label, delta: isize) {
        let slot = match label {
            Label::Negative => &mut self.negative,
            Label::Null => &mut self.null,
            Label::Positive => &mut self.positive,
        };
        *slot = slot
            .checked_add_signed(delta)
            .expect("label count underflow");
    }
}

/// Labels of all K candidates plus the active-set bookkeeping derived from
/// them. `active` is kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureState {
    labels: Vec<Label>,
    active: Vec<usize>,
    counts: Counts,
}

impl MixtureState {
    pub fn empty(k: usize) -> Self {
        MixtureState {
            labels: vec![Label::Null; k],
            active: Vec::new(),
            counts: Counts {
                null: k,
                ..Counts::default()
            },
        }
    }

    pub fn from_labels(labels: Vec<Label>) -> Self {
        let mut state = MixtureState::empty(labels.len());
        for (k, l) in labels.into_iter().enumerate() {
            state.set(k, l);
        }
        state
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> Label {
        self.labels[k]
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Signs of the active predictors, aligned with [`Self::active`].
    pub fn active_signs(&self) -> Vec<f64> {
        self.active.iter().map(|&k| self.labels[k].sign()).collect()
    }

    pub fn set(&mut self, k: usize, label: Label) {
        let old = self.labels[k];
        if old == label {
            return;
        }
        self.counts.bump(old, -1);
        self.counts.bump(label, 1);
        self.labels[k] = label;
        match (old, label) {
            (Label::Null, _) => {
                let pos = self.active.partition_point(|&a| a < k);
                self.active.insert(pos, k);
            }
            (_, Label::Null) => {
                let pos = self.active.binary_search(&k).expect("active index");
                self.active.remove(pos);
            }
            _ => {}
        }
    }

    /// Copy with one label reassigned.
    pub fn with(&self, k: usize, label: Label) -> Self {
        let mut s = self.clone();
        s.set(k, label);
        s
    }
}

/// Parameters of the selection model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu: f64,
    pub beta: Vec<f64>,
    pub sigma2_e: f64,
    pub sigma2_r: f64,
}

impl ModelParams {
    pub fn ratio(&self) -> f64 {
        self.sigma2_r / self.sigma2_e
    }
}

/// Multiplicity penalty `sum_s L_s log(L_s / K)` with `0 log 0 = 0`.
pub fn prior_log_score(counts: Counts, k: usize) -> f64 {
    debug_assert_eq!(counts.total(), k);
    let kf = k as f64;
    [counts.negative, counts.null, counts.positive]
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let c = c as f64;
            c * (c / kf).ln()
        })
        .sum()
}

/// Cross-products of the full candidate matrix, computed once per
/// response so that any active set's workspace is an `O(L^2 + LP)` copy.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    n: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
}

impl CrossProducts {
    pub fn new(d: &Dataset) -> Self {
        Self::from_parts(&d.x, &d.z, &d.y)
    }

    pub fn from_parts(x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        CrossProducts {
            n: y.len(),
            xtx: x.tr_mul(x),
            xty: x.tr_mul(y),
            yty: y.dot(y),
            ztz: z.tr_mul(z),
            ztx: z.tr_mul(x),
            zty: z.tr_mul(y),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.xtx.nrows()
    }

    pub fn k(&self) -> usize {
        self.ztz.nrows()
    }

    pub(crate) fn xtx(&self) -> &DMatrix<f64> {
        &self.xtx
    }

    pub(crate) fn xty(&self) -> &DVector<f64> {
        &self.xty
    }

    pub(crate) fn yty(&self) -> f64 {
        self.yty
    }

    /// Workspace for `state`, with `B` evaluated at the variances in `p`.
    pub fn workspace(&self, state: &MixtureState, p: &ModelParams) -> Result<LikelihoodWorkspace> {
        let active = state.active().to_vec();
        let signs = state.active_signs();
        let (pp, l) = (self.p(), active.len());
        let mut hth = DMatrix::zeros(pp + l, pp + l);
        let mut hty = DVector::zeros(pp + l);
        hth.view_mut((0, 0), (pp, pp)).copy_from(&self.xtx);
        hty.rows_mut(0, pp).copy_from(&self.xty);
        for (a, (&ka, &sa)) in active.iter().zip(&signs).enumerate() {
            hty[pp + a] = sa * self.zty[ka];
            for c in 0..pp {
                let v = sa * self.ztx[(ka, c)];
                hth[(pp + a, c)] = v;
                hth[(c, pp + a)] = v;
            }
            for (b, (&kb, &sb)) in active.iter().zip(&signs).enumerate() {
                hth[(pp + a, pp + b)] = sa * sb * self.ztz[(ka, kb)];
            }
        }
        LikelihoodWorkspace::assemble(self.n, pp, active, signs, hth, hty, self.yty, p)
    }
}

/// Everything needed to evaluate the marginal likelihood of one active set:
/// the cross-products of `H = [X | Z_G]` with itself and with `Y`, plus
/// `B = (I + (sigma2_r / sigma2_e) Z_G' Z_G)^-1`.
#[derive(Debug, Clone)]
pub struct LikelihoodWorkspace {
    n: usize,
    p: usize,
    active: Vec<usize>,
    signs: Vec<f64>,
    hth: DMatrix<f64>,
    hty: DVector<f64>,
    yty: f64,
    sigma2_e: f64,
    sigma2_r: f64,
    b: DMatrix<f64>,
    logdet_core: f64,
}

impl LikelihoodWorkspace {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n: usize,
        p: usize,
        active: Vec<usize>,
        signs: Vec<f64>,
        hth: DMatrix<f64>,
        hty: DVector<f64>,
        yty: f64,
        params: &ModelParams,
    ) -> Result<Self> {
        let l = active.len();
        let mut ws = LikelihoodWorkspace {
            n,
            p,
            active,
            signs,
            hth,
            hty,
            yty,
            sigma2_e: f64::NAN,
            sigma2_r: f64::NAN,
            b: DMatrix::zeros(l, l),
            logdet_core: 0.0,
        };
        ws.refresh(params.sigma2_e, params.sigma2_r)?;
        Ok(ws)
    }

    pub fn l(&self) -> usize {
        self.active.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// `Z_G' Z_G`.
    pub fn ztz(&self) -> DMatrix<f64> {
        let (p, l) = (self.p, self.l());
        self.hth.view((p, p), (l, l)).into_owned()
    }

    pub fn hth(&self) -> &DMatrix<f64> {
        &self.hth
    }

    pub fn hty(&self) -> &DVector<f64> {
        &self.hty
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `log |I + (sigma2_r / sigma2_e) Z_G' Z_G|`.
    pub fn logdet_core(&self) -> f64 {
        self.logdet_core
    }

    /// Recompute `B` and its log-determinant for new variances. The
    /// cross-products stay fixed.
    pub fn refresh(&mut self, sigma2_e: f64, sigma2_r: f64) -> Result<()> {
        if !(sigma2_e > 0.0) || !(sigma2_r >= 0.0) {
            return Err(Error::numerical(
                "likelihood workspace",
                format!("inadmissible variances sigma2_e={sigma2_e}, sigma2_r={sigma2_r}"),
            ));
        }
        let r = sigma2_r / sigma2_e;
        let mut core = self.ztz() * r;
        for i in 0..core.nrows() {
            core[(i, i)] += 1.0;
        }
        let (b, logdet) = linalg::spd_inverse_logdet(&core).ok_or_else(|| {
            Error::numerical("likelihood workspace", "I + r Z'Z is not positive definite")
        })?;
        self.b = b;
        self.logdet_core = logdet;
        self.sigma2_e = sigma2_e;
        self.sigma2_r = sigma2_r;
        Ok(())
    }

    /// Mean coefficients on `H = [X | Z_G]`: `(beta, mu 1_L)`.
    pub(crate) fn mean_coefficients(&self, p: &ModelParams) -> DVector<f64> {
        let mut c = DVector::zeros(self.p + self.l());
        c.rows_mut(0, self.p).copy_from_slice(&p.beta);
        c.rows_mut(self.p, self.l()).fill(p.mu);
        c
    }

    /// `||Y - H c||^2` from cross-products.
    pub(crate) fn residual_ss(&self, c: &DVector<f64>) -> f64 {
        self.yty - 2.0 * c.dot(&self.hty) + c.dot(&(&self.hth * c))
    }

    /// `Z_G' (Y - H c)`.
    pub(crate) fn zt_residual(&self, c: &DVector<f64>) -> DVector<f64> {
        let (p, l) = (self.p, self.l());
        self.hty.rows(p, l) - self.hth.rows(p, l) * c
    }

    fn check_params(&self, p: &ModelParams) -> Result<()> {
        if p.beta.len() != self.p {
            return Err(Error::Dimension(format!(
                "beta has length {}, X has {} columns",
                p.beta.len(),
                self.p
            )));
        }
        if p.sigma2_e != self.sigma2_e || p.sigma2_r != self.sigma2_r {
            return Err(Error::numerical(
                "log-likelihood",
                "workspace was built for different variance components",
            ));
        }
        Ok(())
    }
}

/// Gaussian marginal log-likelihood of `Y` under the mixture model.
pub fn log_likelihood(ws: &LikelihoodWorkspace, p: &ModelParams) -> Result<f64> {
    ws.check_params(p)?;
    let n = ws.n as f64;
    let c = ws.mean_coefficients(p);
    let rss = ws.residual_ss(&c);
    let zte = ws.zt_residual(&c);
    let r = p.ratio();
    let quad = (rss - r * zte.dot(&(&ws.b * &zte))) / p.sigma2_e;
    let terms = [
        ("log|Sigma|", n * p.sigma2_e.ln() + ws.logdet_core),
        ("quadratic form", quad),
    ];
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::numerical(
                "log-likelihood",
                format!("{name} evaluated to {v}"),
            ));
        }
    }
    Ok(-0.5 * (n * (2.0 * PI).ln() + terms[0].1 + quad))
}

/// Workspace computed straight from the data (`O(N L^2)`).
pub fn build_workspace(
    d: &Dataset,
    state: &MixtureState,
    p: &ModelParams,
) -> Result<LikelihoodWorkspace> {
    let active = state.active().to_vec();
    let signs = state.active_signs();
    let mut zg = linalg::select_columns(&d.z, &active);
    for (mut col, s) in zg.column_iter_mut().zip(&signs) {
        col *= *s;
    }
    let h = linalg::hcat(&d.x, &zg);
    LikelihoodWorkspace::assemble(
        d.n(),
        d.x.ncols(),
        active,
        signs,
        h.tr_mul(&h),
        h.tr_mul(&d.y),
        d.y.dot(&d.y),
        p,
    )
}

/// `prior + log-likelihood` for a state at fixed parameters.
pub fn objective(cp: &CrossProducts, state: &MixtureState, p: &ModelParams) -> Result<f64> {
    let ws = cp.workspace(state, p)?;
    Ok(prior_log_score(state.counts(), state.k()) + log_likelihood(&ws, p)?)
}

/// Change in `prior + log-likelihood` from reassigning `gamma_k <- label`,
/// all parameters held fixed.
pub fn delta_score(
    cp: &CrossProducts,
    state: &MixtureState,
    p: &ModelParams,
    k: usize,
    label: Label,
) -> Result<f64> {
    let before = objective(cp, state, p)?;
    let after = objective(cp, &state.with(k, label), p)?;
    Ok(after - before)
}
