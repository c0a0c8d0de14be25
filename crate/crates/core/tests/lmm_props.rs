use nalgebra::{DMatrix, DVector};
use semms::lmm::{fit_lmm, Method, ReFlags, ReSpec};
use semms::sim::sleepstudy;

/// Pooled within-subject OLS residual variance on [1, Days].
fn within_subject_variance() -> f64 {
    let d = sleepstudy().unwrap();
    let g = d.group.clone().unwrap();
    let mut ss = 0.0;
    let mut n_groups = 0;
    for members in g.members() {
        let x = DMatrix::from_fn(members.len(), 2, |i, j| d.x[(members[i], j)]);
        let y = DVector::from_iterator(members.len(), members.iter().map(|&i| d.y[i]));
        let b = (x.transpose() * &x)
            .cholesky()
            .unwrap()
            .solve(&(x.transpose() * &y));
        ss += (&y - &x * b).norm_squared();
        n_groups += 1;
    }
    ss / (d.y.len() - 2 * n_groups) as f64
}

#[test]
fn intercept_and_slope_residual_sd_is_method_free() {
    // with X inside each subject's random-effect design the residual
    // variance is fixed by within-subject fits; REML only inflates D
    let d = sleepstudy().unwrap();
    let re = ReSpec::new(ReFlags::BOTH, d.group.clone().unwrap(), d.slope.clone()).unwrap();
    let reml = fit_lmm(&d.y, &d.x, &re, Method::Reml).unwrap().varcomp;
    let ml = fit_lmm(&d.y, &d.x, &re, Method::Ml).unwrap().varcomp;
    let oracle = within_subject_variance().sqrt();
    assert!(
        (reml.sigma_e - oracle).abs() < 1e-6 * oracle,
        "{} vs {oracle}",
        reml.sigma_e
    );
    assert!(
        (ml.sigma_e - oracle).abs() < 1e-6 * oracle,
        "{} vs {oracle}",
        ml.sigma_e
    );
    assert!(reml.sigma_b0 > ml.sigma_b0 + 0.5);
    assert!(reml.sigma_b1 > ml.sigma_b1 + 0.1);
}

#[test]
fn reml_residual_sd_exceeds_ml_with_random_intercept() {
    let d = sleepstudy().unwrap();
    let re = ReSpec::new(ReFlags::INTERCEPT, d.group.clone().unwrap(), None).unwrap();
    let reml = fit_lmm(&d.y, &d.x, &re, Method::Reml).unwrap().varcomp;
    let ml = fit_lmm(&d.y, &d.x, &re, Method::Ml).unwrap().varcomp;
    assert!(
        reml.sigma_e > ml.sigma_e * (1.0 + 1e-4),
        "REML {} ML {}",
        reml.sigma_e,
        ml.sigma_e
    );
    assert!(reml.sigma_b0 > ml.sigma_b0);
}
