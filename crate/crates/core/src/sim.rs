//! Simulation scenarios, the semi-synthetic augmentation recipe, selection
//! metrics and the replicated benchmark harness.
//!
//! Every replicate owns a ChaCha20 generator seeded with `base_seed + r`.
//! Stream 0 draws the data (random intercepts, random slopes, `Z` row by
//! row, then the response observation by observation); stream 1 seeds the
//! cross-validation folds of the lasso. Replicates can therefore run in any
//! order or in parallel without changing a single draw.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::gam::{fit_semms, fit_semms_glm, FitConfig};
use crate::ingest::{mean_sd, Dataset, Grouping};
use crate::lasso::{fit_lasso_cv, LassoConfig};
use crate::lmm::ReFlags;
use crate::mixed::{fit_semms_mixed, MixedConfig};

pub const STREAM_DATA: u64 = 0;
pub const STREAM_FOLDS: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// 0-based candidate indices carrying signal.
    pub true_idx: Vec<usize>,
    pub beta_true: Vec<f64>,
    pub sigma_b0: f64,
    pub sigma_b1: f64,
    pub family: Family,
    /// Random effects fitted by the mixed method.
    pub re: ReFlags,
    pub seed: u64,
}

impl SimScenario {
    pub fn n_obs(&self) -> usize {
        self.m * self.n
    }

    pub fn validate(&self) -> Result<()> {
        if self.true_idx.len() != self.beta_true.len() {
            return Err(Error::Config(format!(
                "scenario {}: {} true indices but {} coefficients",
                self.name,
                self.true_idx.len(),
                self.beta_true.len()
            )));
        }
        if let Some(&j) = self.true_idx.iter().find(|&&j| j >= self.k) {
            return Err(Error::Config(format!(
                "scenario {}: true index {} >= K = {}",
                self.name,
                j + 1,
                self.k
            )));
        }
        if self.m < 2 || self.n < 2 {
            return Err(Error::Config(format!(
                "scenario {}: need m >= 2 and n >= 2",
                self.name
            )));
        }
        if !(self.sigma_b0 >= 0.0 && self.sigma_b1 >= 0.0) {
            return Err(Error::Config(format!(
                "scenario {}: negative random-effect SD",
                self.name
            )));
        }
        if self.re.q() == 0 {
            return Err(Error::Config(format!(
                "scenario {}: no random effect to fit",
                self.name
            )));
        }
        Ok(())
    }
}

pub const SCENARIO_NAMES: [&str; 6] = ["sim1", "sim2", "sim3", "sim4", "sim5", "sim6"];

/// Published parameter sets. True predictors are V1..V5 in the listed
/// order of coefficients.
pub fn scenario(name: &str) -> Option<SimScenario> {
    let (m, n, k, beta, sb0, sb1, family, re) = match name {
        "sim1" => (
            20,
            10,
            100,
            [1.5, -1.2, 1.0, -0.9, 0.8],
            1.5,
            0.5,
            Family::Gaussian,
            ReFlags::BOTH,
        ),
        "sim2" => (
            20,
            10,
            100,
            [0.8, -0.7, 0.6, -0.6, 0.5],
            3.0,
            1.0,
            Family::Gaussian,
            ReFlags::BOTH,
        ),
        "sim3" => (
            30,
            3,
            200,
            [2.0, -1.8, 1.5, -1.5, 1.2],
            1.5,
            0.5,
            Family::Gaussian,
            ReFlags::BOTH,
        ),
        "sim4" => (
            30,
            10,
            100,
            [0.6, -0.5, 0.4, -0.4, 0.3],
            1.0,
            0.3,
            Family::Poisson,
            ReFlags::BOTH,
        ),
        "sim5" => (
            30,
            20,
            100,
            [1.5, -1.3, 1.1, -1.0, 0.9],
            3.0,
            1.0,
            Family::Binomial,
            ReFlags::BOTH,
        ),
        "sim6" => (
            50,
            20,
            100,
            [0.8, -0.7, 0.6, -0.5, 0.5],
            3.0,
            0.0,
            Family::Binomial,
            ReFlags::INTERCEPT,
        ),
        _ => return None,
    };
    Some(SimScenario {
        name: name.to_string(),
        m,
        n,
        k,
        true_idx: (0..5).collect(),
        beta_true: beta.to_vec(),
        sigma_b0: sb0,
        sigma_b1: sb1,
        family,
        re,
        seed: 1,
    })
}

/// Scenario file: plain `key = value` lines. `base` names a registry entry
/// to start from; every other key overrides one field. Indices in
/// `true_idx` are 1-based.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    base: Option<String>,
    name: Option<String>,
    m: Option<usize>,
    n: Option<usize>,
    k: Option<usize>,
    true_idx: Option<Vec<usize>>,
    beta_true: Option<Vec<f64>>,
    sigma_b0: Option<f64>,
    sigma_b1: Option<f64>,
    family: Option<Family>,
    random_intercept: Option<bool>,
    random_slope: Option<bool>,
    seed: Option<u64>,
}

pub fn parse_scenario(text: &str) -> Result<SimScenario> {
    let f: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
    let mut s = match &f.base {
        Some(b) => scenario(b).ok_or_else(|| unknown_scenario(b))?,
        None => SimScenario {
            name: "custom".into(),
            m: 0,
            n: 0,
            k: 0,
            true_idx: Vec::new(),
            beta_true: Vec::new(),
            sigma_b0: 0.0,
            sigma_b1: 0.0,
            family: Family::Gaussian,
            re: ReFlags::BOTH,
            seed: 1,
        },
    };
    if let Some(v) = f.name {
        s.name = v;
    }
    if let Some(v) = f.m {
        s.m = v;
    }
    if let Some(v) = f.n {
        s.n = v;
    }
    if let Some(v) = f.k {
        s.k = v;
    }
    if let Some(v) = f.true_idx {
        if v.contains(&0) {
            return Err(Error::Config("true_idx is 1-based".into()));
        }
        s.true_idx = v.into_iter().map(|j| j - 1).collect();
    }
    if let Some(v) = f.beta_true {
        s.beta_true = v;
    }
    if let Some(v) = f.sigma_b0 {
        s.sigma_b0 = v;
    }
    if let Some(v) = f.sigma_b1 {
        s.sigma_b1 = v;
    }
    if let Some(v) = f.family {
        s.family = v;
    }
    if let Some(v) = f.random_intercept {
        s.re.intercept = v;
    }
    if let Some(v) = f.random_slope {
        s.re.slope = v;
    }
    if let Some(v) = f.seed {
        s.seed = v;
    }
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<SimScenario> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn unknown_scenario(name: &str) -> Error {
    Error::Config(format!(
        "unknown scenario {name:?}; available: {}",
        SCENARIO_NAMES.join(", ")
    ))
}

fn stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standardized(v: &[f64]) -> Vec<f64> {
    let (mean, sd) = mean_sd(v);
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// One dataset from the scenario, using `s.seed`.
pub fn generate(s: &SimScenario) -> Result<(Dataset, Vec<usize>)> {
    s.validate()?;
    let (m, n, k) = (s.m, s.n, s.k);
    let big_n = m * n;
    let mut rng = stream(s.seed, STREAM_DATA);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let b0: Vec<f64> = (0..m).map(|_| s.sigma_b0 * normal()).collect();
    let b1: Vec<f64> = (0..m).map(|_| s.sigma_b1 * normal()).collect();
    let mut z = DMatrix::zeros(big_n, k);
    for i in 0..big_n {
        for j in 0..k {
            z[(i, j)] = normal();
        }
    }
    let t_std = standardized(&(1..=n).map(|j| j as f64).collect::<Vec<_>>());
    let t = DVector::from_fn(big_n, |i, _| t_std[i % n]);

    let mut y = DVector::zeros(big_n);
    for i in 0..big_n {
        let c = i / n;
        let eta = s
            .true_idx
            .iter()
            .zip(&s.beta_true)
            .map(|(&j, b)| b * z[(i, j)])
            .sum::<f64>()
            + b0[c]
            + b1[c] * t[i];
        y[i] = match s.family {
            Family::Gaussian => eta + rng.sample::<f64, _>(StandardNormal),
            Family::Poisson => {
                let mu = eta.exp();
                Poisson::new(mu)
                    .map_err(|e| Error::numerical("generator", format!("Poisson mean {mu}: {e}")))?
                    .sample(&mut rng)
            }
            Family::Binomial => Bernoulli::new(Family::Binomial.inv_link(eta))
                .map_err(|e| Error::numerical("generator", e.to_string()))?
                .sample(&mut rng) as u8 as f64,
        };
    }
    let d = Dataset::new(y, z, s.family)?
        .with_group(Grouping::blocks(m, n))?
        .with_slope(t)?;
    Ok((d, s.true_idx.clone()))
}

/// Replace the candidates of `base` with `k` standardized iid normal
/// columns and add `sum coef * V_j` to the response. Signal indices are
/// 0-based.
pub fn augment_semisynthetic(
    base: &Dataset,
    k: usize,
    signal: &[(usize, f64)],
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    if let Some(&(j, _)) = signal.iter().find(|(j, _)| *j >= k) {
        return Err(Error::Config(format!("signal index {} >= K = {k}", j + 1)));
    }
    let n = base.n();
    let mut rng = stream(seed, STREAM_DATA);
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            z[(i, j)] = rng.sample(StandardNormal);
        }
    }
    for j in 0..k {
        let col = standardized(z.column(j).as_slice());
        z.set_column(j, &DVector::from_vec(col));
    }
    let mut y = base.y.clone();
    for &(j, coef) in signal {
        y.axpy(coef, &z.column(j), 1.0);
    }
    let mut d = Dataset {
        y,
        z,
        z_names: (1..=k).map(|j| format!("V{j}")).collect(),
        standardized: true,
        ..base.clone()
    };
    d = d.with_response(d.y.clone(), base.family);
    let truth: BTreeSet<usize> = signal.iter().map(|s| s.0).collect();
    Ok((d, truth.into_iter().collect()))
}

pub const DEFAULT_SIGNAL: [(usize, f64); 2] = [(0, 20.0), (1, -15.0)];

const SLEEPSTUDY_CSV: &str = include_str!("../data/sleepstudy.csv");

/// Reaction times for Days 2-9: `y` = Reaction, fixed design `[1, Days]`,
/// grouping by Subject, slope covariate Days, no candidates.
pub fn sleepstudy() -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(SLEEPSTUDY_CSV.as_bytes());
    let (mut y, mut days, mut subj) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i].trim().parse().map_err(|_| Error::NonNumeric {
                row: 0,
                col: i + 1,
                value: rec[i].to_string(),
            })
        };
        let day = parse(2)?;
        if day < 2.0 {
            continue;
        }
        y.push(parse(1)?);
        days.push(day);
        subj.push(rec[3].to_string());
    }
    let n = y.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { days[i] });
    Dataset::new(DVector::from_vec(y), DMatrix::zeros(n, 0), Family::Gaussian)?
        .with_x(x)?
        .with_group(Grouping::from_labels(&subj))?
        .with_slope(DVector::from_vec(days))
}

/// `1 + (n_i - 1) rho`.
pub fn design_effect(n_i: usize, rho: f64) -> f64 {
    1.0 + (n_i as f64 - 1.0) * rho
}

/// Latent-scale intraclass correlation of a logistic random intercept.
pub fn icc_logistic(sigma_b0: f64) -> f64 {
    let v = sigma_b0 * sigma_b0;
    v / (v + PI * PI / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub exact: bool,
}

pub fn score_selection(selected: &[usize], truth: &[usize]) -> SelectionMetrics {
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let tp = sel.intersection(&truth).count();
    let fp = sel.len() - tp;
    SelectionMetrics {
        tp,
        fp,
        exact: tp == truth.len() && fp == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    PlainSemms,
    MixedSemms,
    LassoCv,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::PlainSemms => "plain-semms",
            BenchMethod::MixedSemms => "mixed-semms",
            BenchMethod::LassoCv => "lasso-cv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" | "plain-semms" => Ok(BenchMethod::PlainSemms),
            "mixed" | "mixed-semms" => Ok(BenchMethod::MixedSemms),
            "lasso" | "lasso-cv" => Ok(BenchMethod::LassoCv),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; available: plain-semms, mixed-semms, lasso-cv"
            ))),
        }
    }
}

/// Fitting settings shared by every replicate. The mixed method's random
/// effects come from the scenario, and lasso fold seeds from stream 1.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub semms: FitConfig,
    pub mixed: MixedConfig,
    pub lasso: LassoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub method: BenchMethod,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    pub exact: Option<bool>,
    pub outer_iters: Option<usize>,
    pub converged: Option<bool>,
    /// 1-based indices joined by ';'.
    pub selected: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: BenchMethod,
    pub mean_tp: f64,
    pub mean_fp: f64,
    pub exact_rate: f64,
    pub mean_outer_iters: Option<f64>,
    pub max_outer_iters: Option<usize>,
    pub non_converged: usize,
    pub n_reps: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub scenario: SimScenario,
    pub reps: usize,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
}

impl BenchmarkTable {
    pub fn summary(&self, m: BenchMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub table: BenchmarkTable,
    pub rows: Vec<ReplicateRow>,
}

impl BenchmarkOutput {
    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn join_one_based(idx: &[usize]) -> String {
    idx.iter()
        .map(|j| (j + 1).to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Run one method on one generated dataset.
pub fn run_method(
    method: BenchMethod,
    d: &Dataset,
    s: &SimScenario,
    settings: &BenchSettings,
    seed: u64,
) -> Result<(Vec<usize>, Option<usize>, Option<bool>)> {
    match method {
        BenchMethod::PlainSemms => {
            let fit = match d.family {
                Family::Gaussian => fit_semms(d, &settings.semms)?,
                _ => fit_semms_glm(d, &settings.semms)?,
            };
            Ok((fit.selected(), None, None))
        }
        BenchMethod::MixedSemms => {
            let cfg = MixedConfig {
                re: s.re,
                semms: settings.semms.clone(),
                ..settings.mixed.clone()
            };
            let fit = fit_semms_mixed(d, &cfg)?;
            Ok((fit.selected(), Some(fit.outer_iters), Some(fit.converged)))
        }
        BenchMethod::LassoCv => {
            let cfg = LassoConfig {
                seed: stream(seed, STREAM_FOLDS).next_u64(),
                ..settings.lasso.clone()
            };
            Ok((fit_lasso_cv(d, &cfg)?.selected, None, None))
        }
    }
}

pub fn run_benchmark(
    s: &SimScenario,
    methods: &[BenchMethod],
    reps: usize,
    base_seed: u64,
    settings: &BenchSettings,
) -> Result<BenchmarkOutput> {
    s.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let seeds: Vec<u64> = (0..reps as u64)
        .map(|r| base_seed.wrapping_add(r))
        .collect();
    let per_rep: Vec<Vec<ReplicateRow>> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| {
            let sc = SimScenario { seed, ..s.clone() };
            let generated = generate(&sc);
            methods
                .iter()
                .map(|&method| {
                    let outcome =
                        generated
                            .as_ref()
                            .map_err(|e| e.to_string())
                            .and_then(|(d, truth)| {
                                run_method(method, d, &sc, settings, seed)
                                    .map(|res| (res, truth))
                                    .map_err(|e| e.to_string())
                            });
                    match outcome {
                        Ok(((selected, outer, conv), truth)) => {
                            let m = score_selection(&selected, truth);
                            ReplicateRow {
                                replicate: r,
                                seed,
                                method,
                                tp: Some(m.tp),
                                fp: Some(m.fp),
                                exact: Some(m.exact),
                                outer_iters: outer,
                                converged: conv,
                                selected: join_one_based(&selected),
                                error: String::new(),
                            }
                        }
                        Err(e) => ReplicateRow {
                            replicate: r,
                            seed,
                            method,
                            tp: None,
                            fp: None,
                            exact: None,
                            outer_iters: None,
                            converged: None,
                            selected: String::new(),
                            error: e,
                        },
                    }
                })
                .collect()
        })
        .collect();
    let rows: Vec<ReplicateRow> = per_rep.into_iter().flatten().collect();

    let methods = methods
        .iter()
        .map(|&method| {
            let ok: Vec<&ReplicateRow> = rows
                .iter()
                .filter(|r| r.method == method && r.error.is_empty())
                .collect();
            let n_ok = ok.len();
            let mean = |f: &dyn Fn(&ReplicateRow) -> f64| {
                if n_ok == 0 {
                    0.0
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / n_ok as f64
                }
            };
            let outer: Vec<usize> = ok.iter().filter_map(|r| r.outer_iters).collect();
            MethodSummary {
                method,
                mean_tp: mean(&|r| r.tp.unwrap_or(0) as f64),
                mean_fp: mean(&|r| r.fp.unwrap_or(0) as f64),
                exact_rate: mean(&|r| r.exact.unwrap_or(false) as u8 as f64),
                mean_outer_iters: (!outer.is_empty())
                    .then(|| outer.iter().sum::<usize>() as f64 / outer.len() as f64),
                max_outer_iters: outer.iter().copied().max(),
                non_converged: ok.iter().filter(|r| r.converged == Some(false)).count(),
                n_reps: n_ok,
                failed: reps - n_ok,
            }
        })
        .collect();
    Ok(BenchmarkOutput {
        table: BenchmarkTable {
            scenario: s.clone(),
            reps,
            base_seed,
            seeds,
            methods,
        },
        rows,
    })
}
