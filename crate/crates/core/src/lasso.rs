//! L1-penalized regression path by cyclic coordinate descent, with K-fold
//! cross-validation over observations (grouping is ignored on purpose).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::ingest::Dataset;

const CD_TOL: f64 = 1e-10;
const CD_MAX_SWEEPS: usize = 100_000;
const IRLS_MAX: usize = 50;
const IRLS_TOL: f64 = 1e-8;
const MAX_REFOLDS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoConfig {
    pub nfolds: usize,
    pub n_lambda: usize,
    /// Smallest lambda as a fraction of `lambda_max`.
    pub lambda_min_ratio: f64,
    pub seed: u64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            nfolds: 5,
            n_lambda: 100,
            lambda_min_ratio: 1e-3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoResult {
    pub selected: Vec<usize>,
    pub lambda_chosen: f64,
    /// `(lambda, mean held-out deviance)` along the grid.
    pub cv_curve: Vec<(f64, f64)>,
    pub coefs: Vec<f64>,
    pub intercept: f64,
    /// Fold seed actually used, after any refolds.
    pub fold_seed: u64,
    pub folds: Vec<usize>,
}

/// Penalized fit at one lambda, stored sparsely enough for our sizes.
#[derive(Debug, Clone)]
pub struct PathPoint {
    pub lambda: f64,
    pub intercept: f64,
    pub beta: DVector<f64>,
}

/// `max_j |z_j' (y - ybar)| / N` (Gaussian), or the analogous score at the
/// intercept-only GLM fit.
pub fn lambda_max(z: &DMatrix<f64>, y: &DVector<f64>, fam: Family) -> f64 {
    let n = y.len() as f64;
    let mu0 = fam.clamp_mean(y.mean());
    let r = y.map(|v| v - mu0);
    (z.transpose() * r).amax() / n
}

pub fn lambda_grid(lmax: f64, n_lambda: usize, min_ratio: f64) -> Vec<f64> {
    if n_lambda == 1 {
        return vec![lmax];
    }
    (0..n_lambda)
        .map(|i| lmax * min_ratio.powf(i as f64 / (n_lambda - 1) as f64))
        .collect()
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Weighted penalized least squares
/// `(1/2N) sum w_i (y_i - b0 - z_i b)^2 + lambda |b|_1` from a warm start.
/// The residual `r = y - b0 - Z b` is kept in sync.
fn cd_weighted(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    lambda: f64,
    b0: &mut f64,
    beta: &mut DVector<f64>,
) {
    let n = y.len() as f64;
    let k = z.ncols();
    let wsum = w.sum();
    let xw2: Vec<f64> = (0..k)
        .map(|j| {
            z.column(j)
                .iter()
                .zip(w.iter())
                .map(|(x, wi)| wi * x * x)
                .sum::<f64>()
                / n
        })
        .collect();
    let mut r = y - z * &*beta - DVector::from_element(y.len(), *b0);

    let sweep = |idx: &mut dyn Iterator<Item = usize>,
                 beta: &mut DVector<f64>,
                 r: &mut DVector<f64>,
                 b0: &mut f64|
     -> f64 {
        let mut max_delta = 0.0f64;
        // intercept first
        let shift = r.iter().zip(w.iter()).map(|(ri, wi)| wi * ri).sum::<f64>() / wsum;
        if shift != 0.0 {
            *b0 += shift;
            r.add_scalar_mut(-shift);
            max_delta = max_delta.max(shift * shift * wsum / n);
        }
        for j in idx {
            if xw2[j] == 0.0 {
                continue;
            }
            let col = z.column(j);
            let grad = col
                .iter()
                .zip(r.iter())
                .zip(w.iter())
                .map(|((x, ri), wi)| wi * x * ri)
                .sum::<f64>()
                / n;
            let old = beta[j];
            let new = soft(grad + xw2[j] * old, lambda) / xw2[j];
            if new != old {
                let d = new - old;
                beta[j] = new;
                r.axpy(-d, &col, 1.0);
                max_delta = max_delta.max(d * d * xw2[j]);
            }
        }
        max_delta
    };

    for _ in 0..CD_MAX_SWEEPS {
        let delta = sweep(&mut (0..k), beta, &mut r, b0);
        if delta < CD_TOL {
            break;
        }
        // iterate on the active set until it settles, then recheck all
        let active: Vec<usize> = (0..k).filter(|&j| beta[j] != 0.0).collect();
        for _ in 0..CD_MAX_SWEEPS {
            if sweep(&mut active.iter().copied(), beta, &mut r, b0) < CD_TOL {
                break;
            }
        }
    }
}

/// Full regularization path with warm starts.
pub fn lasso_path(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    fam: Family,
    lambdas: &[f64],
) -> Result<Vec<PathPoint>> {
    let n = y.len();
    let k = z.ncols();
    let mut beta = DVector::zeros(k);
    let mut b0 = fam.link(fam.clamp_mean(y.mean()));
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        match fam {
            Family::Gaussian => cd_weighted(
                z,
                y,
                &DVector::from_element(n, 1.0),
                lambda,
                &mut b0,
                &mut beta,
            ),
            _ => {
                for it in 0.. {
                    let eta = z * &beta + DVector::from_element(n, b0);
                    let mu = eta.map(|e| fam.clamp_mean(fam.inv_link(e)));
                    let w = mu.map(|m| fam.variance(m));
                    let work = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) / w[i]);
                    let (old_b0, old_beta) = (b0, beta.clone());
                    cd_weighted(z, &work, &w, lambda, &mut b0, &mut beta);
                    if !b0.is_finite() || beta.iter().any(|v| !v.is_finite()) {
                        return Err(Error::numerical("lasso IRLS", "non-finite coefficients"));
                    }
                    let change = (&beta - old_beta).amax().max((b0 - old_b0).abs());
                    if change < IRLS_TOL || it + 1 >= IRLS_MAX {
                        break;
                    }
                }
            }
        }
        out.push(PathPoint {
            lambda,
            intercept: b0,
            beta: beta.clone(),
        });
    }
    Ok(out)
}

fn subset_rows(z: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    z.select_rows(rows.iter())
}

fn folds_ok(y: &DVector<f64>, folds: &[usize], nfolds: usize, fam: Family) -> bool {
    (0..nfolds).all(|f| {
        let held: Vec<f64> = folds
            .iter()
            .zip(y.iter())
            .filter(|(g, _)| **g == f)
            .map(|(_, &v)| v)
            .collect();
        let train: Vec<f64> = folds
            .iter()
            .zip(y.iter())
            .filter(|(g, _)| **g != f)
            .map(|(_, &v)| v)
            .collect();
        if held.is_empty() {
            return false;
        }
        if fam != Family::Binomial {
            return true;
        }
        let both = |v: &[f64]| v.iter().any(|&a| a == 0.0) && v.iter().any(|&a| a == 1.0);
        both(&held) && both(&train)
    })
}

fn assign_folds(n: usize, nfolds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        folds[i] = pos % nfolds;
    }
    folds
}

/// Minimum-CV-deviance lasso on the candidates; the fixed design of `d` is
/// ignored apart from the intercept.
pub fn fit_lasso_cv(d: &Dataset, cfg: &LassoConfig) -> Result<LassoResult> {
    let fam = d.family;
    if cfg.nfolds < 2 || cfg.nfolds > d.n() {
        return Err(Error::Config(format!("nfolds must be in 2..={}", d.n())));
    }
    if cfg.n_lambda == 0 || !(cfg.lambda_min_ratio > 0.0 && cfg.lambda_min_ratio < 1.0) {
        return Err(Error::Config(
            "need n_lambda >= 1 and 0 < lambda_min_ratio < 1".into(),
        ));
    }
    let d = if d.standardized {
        d.clone()
    } else {
        d.standardize()?
    };
    let (z, y) = (&d.z, &d.y);
    let lambdas = lambda_grid(lambda_max(z, y, fam), cfg.n_lambda, cfg.lambda_min_ratio);

    let mut attempt = 0;
    let (folds, fold_seed) = loop {
        let seed = cfg.seed.wrapping_add(attempt as u64);
        let folds = assign_folds(d.n(), cfg.nfolds, seed);
        if folds_ok(y, &folds, cfg.nfolds, fam) {
            break (folds, seed);
        }
        attempt += 1;
        if attempt >= MAX_REFOLDS {
            return Err(Error::numerical(
                "lasso cross-validation",
                format!("{MAX_REFOLDS} fold assignments all left a fold without both classes"),
            ));
        }
    };

    let per_fold: Vec<Vec<f64>> = (0..cfg.nfolds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let train: Vec<usize> = (0..d.n()).filter(|&i| folds[i] != f).collect();
            let held: Vec<usize> = (0..d.n()).filter(|&i| folds[i] == f).collect();
            let path = lasso_path(
                &subset_rows(z, &train),
                &y.select_rows(train.iter()),
                fam,
                &lambdas,
            )?;
            let zh = subset_rows(z, &held);
            Ok(path
                .iter()
                .map(|pt| {
                    let eta = &zh * &pt.beta;
                    held.iter()
                        .enumerate()
                        .map(|(r, &i)| fam.unit_deviance(y[i], fam.inv_link(eta[r] + pt.intercept)))
                        .sum::<f64>()
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let n = d.n() as f64;
    let cv_curve: Vec<(f64, f64)> = lambdas
        .iter()
        .enumerate()
        .map(|(l, &lam)| (lam, per_fold.iter().map(|v| v[l]).sum::<f64>() / n))
        .collect();
    // first minimum: ties go to the larger lambda
    let best = cv_curve
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.1 < cv_curve[b].1 { i } else { b });
    let full = lasso_path(z, y, fam, &lambdas[..=best])?;
    let pt = full.last().expect("non-empty path");
    Ok(LassoResult {
        selected: (0..d.k()).filter(|&j| pt.beta[j] != 0.0).collect(),
        lambda_chosen: lambdas[best],
        cv_curve,
        coefs: pt.beta.iter().copied().collect(),
        intercept: pt.intercept,
        fold_seed,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn data(seed: u64, n: usize, k: usize, coefs: &[(usize, f64)]) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            coefs.iter().map(|&(j, b)| b * z[(i, j)]).sum::<f64>()
                + rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(y, z, Family::Gaussian)
            .unwrap()
            .standardize()
            .unwrap()
    }

    #[test]
    fn kkt_conditions_hold_along_the_path() {
        let d = data(1, 80, 15, &[(0, 1.0), (3, -0.7), (9, 0.4)]);
        let lambdas = lambda_grid(lambda_max(&d.z, &d.y, Family::Gaussian), 20, 1e-3);
        let n = 80.0;
        for pt in lasso_path(&d.z, &d.y, Family::Gaussian, &lambdas).unwrap() {
            let r = &d.y - &d.z * &pt.beta - DVector::from_element(80, pt.intercept);
            assert!(r.sum().abs() < 1e-8);
            for j in 0..15 {
                let g = d.z.column(j).dot(&r) / n;
                if pt.beta[j] == 0.0 {
                    assert!(g.abs() <= pt.lambda + 1e-4);
                } else {
                    assert!((g - pt.lambda * pt.beta[j].signum()).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn nothing_active_at_lambda_max() {
        let d = data(2, 50, 10, &[(0, 1.0)]);
        let lmax = lambda_max(&d.z, &d.y, Family::Gaussian);
        let pts = lasso_path(&d.z, &d.y, Family::Gaussian, &[lmax, lmax * 0.999]).unwrap();
        assert!(pts[0].beta.iter().all(|&b| b == 0.0));
        assert!(pts[1].beta.iter().filter(|&&b| b != 0.0).count() >= 1);
        for fam in [Family::Poisson, Family::Binomial] {
            let y = d.y.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let lmax = lambda_max(&d.z, &y, fam);
            let pts = lasso_path(&d.z, &y, fam, &[lmax]).unwrap();
            assert!(pts[0].beta.amax() < 1e-10);
        }
    }

    #[test]
    fn single_predictor_enters_at_closed_form_point() {
        let d = data(3, 100, 1, &[(0, 2.0)]);
        let entry = d.z.column(0).dot(&d.y).abs() / 100.0;
        assert!((lambda_max(&d.z, &d.y, Family::Gaussian) - entry).abs() < 1e-12);
        let lambdas: Vec<f64> = (1..20).map(|i| entry * (1.0 - i as f64 * 0.05)).collect();
        for pt in lasso_path(&d.z, &d.y, Family::Gaussian, &lambdas).unwrap() {
            assert!(pt.beta[0] > 0.0);
        }
    }

    #[test]
    fn null_data_selects_little() {
        let mut sparse = 0;
        for seed in 0..100 {
            let d = data(100 + seed, 100, 10, &[]);
            let fit = fit_lasso_cv(
                &d,
                &LassoConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            sparse += (fit.selected.len() <= 2) as usize;
        }
        assert!(sparse >= 80, "{sparse}/100");
    }

    #[test]
    fn chosen_lambda_is_on_grid_and_selection_matches_coefs() {
        let d = data(4, 120, 20, &[(1, 1.0), (5, -1.0)]);
        let fit = fit_lasso_cv(&d, &LassoConfig::default()).unwrap();
        assert!(fit.cv_curve.iter().any(|c| c.0 == fit.lambda_chosen));
        let nz: Vec<usize> = (0..20).filter(|&j| fit.coefs[j] != 0.0).collect();
        assert_eq!(nz, fit.selected);
        assert!(fit.selected.contains(&1) && fit.selected.contains(&5));
        let again = fit_lasso_cv(&d, &LassoConfig::default()).unwrap();
        assert_eq!(again.selected, fit.selected);
        assert_eq!(again.lambda_chosen, fit.lambda_chosen);
    }

    #[test]
    fn binomial_refolds_or_fails_when_a_class_is_rare() {
        let d = data(5, 40, 3, &[]);
        let mut y = DVector::zeros(40);
        y[0] = 1.0;
        let b = d.with_response(y, Family::Binomial);
        assert!(fit_lasso_cv(&b, &LassoConfig::default())
            .unwrap_err()
            .is_numerical());
    }
}
