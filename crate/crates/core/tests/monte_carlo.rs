//! Replicated-data properties of the selection and random-effects engines.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};

use semms::gam::{em_update, fit_semms_glm, greedy_step, initial_params, FitConfig};
use semms::glmm::fit_glmm_pql;
use semms::lmm::ReSpec;
use semms::mixed::{fit_semms_mixed, MixedConfig};
use semms::mixture::{delta_score, CrossProducts, Label, MixtureState};
use semms::sim::{generate, icc_logistic, scenario, SimScenario};
use semms::{Dataset, Family};

fn replicate(name: &str, seed: u64) -> (Dataset, Vec<usize>, SimScenario) {
    let s = SimScenario {
        seed,
        ..scenario(name).unwrap()
    };
    let (d, truth) = generate(&s).unwrap();
    (d, truth, s)
}

fn truth_state(s: &SimScenario) -> MixtureState {
    let mut labels = vec![Label::Null; s.k];
    for (&j, &b) in s.true_idx.iter().zip(&s.beta_true) {
        labels[j] = if b > 0.0 {
            Label::Positive
        } else {
            Label::Negative
        };
    }
    MixtureState::from_labels(labels)
}

fn true_design(d: &Dataset, truth: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(d.n(), truth.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            d.z[(i, truth[j - 1])]
        }
    })
}

#[test]
fn truth_is_a_local_optimum_on_sim1() {
    let cfg = FitConfig::default();
    let mut stuck = 0;
    for seed in 0..100 {
        let (d, _, s) = replicate("sim1", seed);
        let d = d.standardize().unwrap();
        let cp = CrossProducts::new(&d);
        let state = truth_state(&s);
        let p = em_update(&cp, &state, &initial_params(&d, &state).unwrap(), &cfg)
            .unwrap()
            .params;
        let (_, mv) = greedy_step(&cp, &state, &p, &cfg).unwrap();
        stuck += mv.is_none() as usize;
    }
    assert!(stuck >= 90, "truth kept in {stuck}/100");
}

#[test]
fn adding_a_true_predictor_has_positive_gain() {
    let cfg = FitConfig::default();
    let mut positive = 0;
    let mut total = 0;
    for seed in 0..20 {
        let (d, _, s) = replicate("sim1", 500 + seed);
        let d = d.standardize().unwrap();
        let cp = CrossProducts::new(&d);
        let full = truth_state(&s);
        for &k in &s.true_idx {
            let without = full.with(k, Label::Null);
            let p = em_update(&cp, &without, &initial_params(&d, &without).unwrap(), &cfg)
                .unwrap()
                .params;
            let gain = delta_score(&cp, &without, &p, k, full.label(k)).unwrap();
            positive += (gain > 0.0) as usize;
            total += 1;
        }
    }
    assert!(
        positive * 100 >= 95 * total,
        "{positive}/{total} positive gains"
    );
}

#[test]
fn gaussian_re_logliks_never_decrease_across_outer_iterations() {
    for (name, seed) in (0..10)
        .map(|s| ("sim1", s))
        .chain((0..10).map(|s| ("sim2", s)))
    {
        let (d, _, s) = replicate(name, seed);
        let cfg = MixedConfig {
            re: s.re,
            ..Default::default()
        };
        let fit = fit_semms_mixed(&d, &cfg).unwrap();
        for w in fit.re_logliks.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-6,
                "{name} seed {seed}: {:?}",
                fit.re_logliks
            );
        }
    }
}

#[test]
fn u_change_contracts_on_most_replicates() {
    let mut contracting = 0;
    let mut total = 0;
    for (name, seed) in (0..25)
        .map(|s| ("sim1", s))
        .chain((0..25).map(|s| ("sim2", s)))
    {
        let (d, _, s) = replicate(name, seed);
        let cfg = MixedConfig {
            re: s.re,
            ..Default::default()
        };
        let fit = fit_semms_mixed(&d, &cfg).unwrap();
        contracting += fit.u_trace.windows(2).all(|w| w[1] <= w[0]) as usize;
        total += 1;
    }
    assert!(
        contracting * 10 >= 9 * total,
        "{contracting}/{total} contracting traces"
    );
}

#[test]
fn warm_start_does_not_add_false_positives() {
    let warm = MixedConfig {
        re: scenario("sim2").unwrap().re,
        ..Default::default()
    };
    let cold = MixedConfig {
        warm_start: false,
        ..warm.clone()
    };
    let (mut fp_warm, mut fp_cold) = (0, 0);
    for seed in 0..50 {
        let (d, truth, _) = replicate("sim2", 100 + seed);
        let count = |sel: Vec<usize>| sel.iter().filter(|k| !truth.contains(k)).count();
        fp_warm += count(fit_semms_mixed(&d, &warm).unwrap().selected());
        fp_cold += count(fit_semms_mixed(&d, &cold).unwrap().selected());
    }
    assert!(fp_warm <= fp_cold, "warm {fp_warm} vs zero-start {fp_cold}");
}

#[test]
fn pql_recovers_poisson_intercept_sd() {
    let mut total = 0.0;
    for seed in 0..20 {
        let (d, truth, s) = replicate("sim4", 300 + seed);
        let re = ReSpec::new(s.re, d.group.clone().unwrap(), d.slope.clone()).unwrap();
        let fit = fit_glmm_pql(&d.y, &true_design(&d, &truth), &re, Family::Poisson).unwrap();
        total += fit.varcomp.sigma_b0;
    }
    let mean = total / 20.0;
    assert!((mean - 1.0).abs() <= 0.3, "mean sigma_b0 {mean}");
}

#[test]
fn pql_binomial_icc_near_target() {
    let mut total = 0.0;
    for seed in 0..20 {
        let (d, truth, s) = replicate("sim5", 300 + seed);
        let re = ReSpec::new(s.re, d.group.clone().unwrap(), d.slope.clone()).unwrap();
        let fit = fit_glmm_pql(&d.y, &true_design(&d, &truth), &re, Family::Binomial).unwrap();
        total += icc_logistic(fit.varcomp.sigma_b0);
    }
    let mean = total / 20.0;
    assert!((mean - icc_logistic(3.0)).abs() <= 0.1, "mean ICC {mean}");
}

#[test]
fn poisson_without_signal_selects_nothing() {
    let mut empty = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (200, 20);
        let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| Poisson::new(2.0).unwrap().sample(&mut rng));
        let d = Dataset::new(y, z, Family::Poisson).unwrap();
        // start empty, as in the Gaussian null check: the screened starting
        // set is kept by the greedy search on noise for any family
        let cfg = FitConfig {
            nn: 0,
            ..Default::default()
        };
        empty += fit_semms_glm(&d, &cfg).unwrap().selected().is_empty() as usize;
    }
    assert!(empty >= 90, "{empty}/100 empty");
}

#[test]
fn dominant_binomial_predictor_always_found() {
    let mut found = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, k) = (600, 20);
        let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            let p = 1.0 / (1.0 + (-3.0 * z[(i, 0)]).exp());
            Bernoulli::new(p).unwrap().sample(&mut rng) as u8 as f64
        });
        let d = Dataset::new(y, z, Family::Binomial).unwrap();
        found += fit_semms_glm(&d, &FitConfig::default())
            .unwrap()
            .selected()
            .contains(&0) as usize;
    }
    assert_eq!(found, 100);
}
