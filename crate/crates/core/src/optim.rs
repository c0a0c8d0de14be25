//! Derivative-free local minimization (Nelder-Mead).

#[derive(Debug, Clone)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when all vertex values are within `ftol * (1 + |f_best|)` of the
    /// best, so rounding noise in large objectives cannot stall the test.
    pub ftol: f64,
    /// ... and all vertices are within `xtol * (1 + |x_best|)` (sup norms).
    pub xtol: f64,
    /// Initial simplex edge along each coordinate.
    pub step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_evals: 20_000,
            ftol: 1e-12,
            xtol: 1e-8,
            step: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn minimize<F>(&self, f: F, x0: &[f64]) -> Minimum
    where
        F: Fn(&[f64]) -> f64,
    {
        let dim = x0.len();
        let eval = |x: &[f64]| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        if dim == 0 {
            return Minimum {
                x: Vec::new(),
                f: eval(x0),
                evals: 1,
                converged: true,
            };
        }

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        simplex.push(x0.to_vec());
        for i in 0..dim {
            let mut v = x0.to_vec();
            v[i] += self.step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
        let mut evals = dim + 1;

        // Adaptive coefficients keep the method usable in higher dimensions.
        let d = dim as f64;
        let (alpha, gamma) = (1.0, 1.0 + 2.0 / d);
        let (rho, sigma) = (0.75 - 1.0 / (2.0 * d), 1.0 - 1.0 / d);
        let (rho, sigma) = if dim == 1 { (0.5, 0.5) } else { (rho, sigma) };

        let mut converged = false;
        while evals < self.max_evals {
            let mut order: Vec<usize> = (0..=dim).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let fspread = values[dim] - values[0];
            let xspread = simplex[1..]
                .iter()
                .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            let xscale = 1.0 + simplex[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if fspread <= self.ftol * (1.0 + values[0].abs()) && xspread <= self.xtol * xscale {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; dim];
            for v in &simplex[..dim] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / d;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[dim])
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let xr = along(alpha);
            let fr = eval(&xr);
            evals += 1;
            if fr < values[0] {
                let xe = along(alpha * gamma);
                let fe = eval(&xe);
                evals += 1;
                if fe < fr {
                    simplex[dim] = xe;
                    values[dim] = fe;
                } else {
                    simplex[dim] = xr;
                    values[dim] = fr;
                }
                continue;
            }
            if fr < values[dim - 1] {
                simplex[dim] = xr;
                values[dim] = fr;
                continue;
            }
            let (xc, fc) = if fr < values[dim] {
                let xc = along(alpha * rho);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < values[dim].min(fr) {
                simplex[dim] = xc;
                values[dim] = fc;
                continue;
            }
            // shrink toward the best vertex
            let best = simplex[0].clone();
            for i in 1..=dim {
                for (x, b) in simplex[i].iter_mut().zip(&best) {
                    *x = b + sigma * (*x - b);
                }
                values[i] = eval(&simplex[i]);
            }
            evals += dim;
        }

        let best = (0..=dim)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap();
        Minimum {
            x: simplex[best].clone(),
            f: values[best],
            evals,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            step: 0.5,
            ..Default::default()
        };
        let m = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_quadratic_to_tight_tolerance() {
        let m = NelderMead::default().minimize(|x| (x[0] - 0.3).powi(2) * 50.0 + 7.0, &[2.0]);
        assert!((m.x[0] - 0.3).abs() < 1e-8);
    }

    #[test]
    fn nan_is_treated_as_infinite() {
        let m = NelderMead::default().minimize(
            |x| {
                if x[0] < 0.0 {
                    f64::NAN
                } else {
                    (x[0] - 1.0).powi(2)
                }
            },
            &[0.5],
        );
        assert!((m.x[0] - 1.0).abs() < 1e-6);
    }
}

/// Newton refinement with central-difference derivatives. Meant for a point
/// already near a smooth interior minimum: steps are kept only while the
/// gradient norm shrinks, which still discriminates after function values
/// have flattened to rounding level.
pub fn newton_polish<F>(f: F, x0: &[f64], h: f64, max_iters: usize) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64]| {
        evals += 1;
        f(x)
    };
    let mut x = x0.to_vec();
    let mut fx = eval(&x);
    let derivs = |x: &[f64], fx: f64, eval: &mut dyn FnMut(&[f64]) -> f64| {
        let mut g = nalgebra::DVector::zeros(dim);
        let mut hess = nalgebra::DMatrix::zeros(dim, dim);
        let shifted = |x: &[f64], i: usize, a: f64, j: usize, b: f64| {
            let mut v = x.to_vec();
            v[i] += a;
            v[j] += b;
            v
        };
        for i in 0..dim {
            let fp = eval(&shifted(x, i, h, i, 0.0));
            let fm = eval(&shifted(x, i, -h, i, 0.0));
            g[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
            for j in 0..i {
                let pp = eval(&shifted(x, i, h, j, h));
                let pm = eval(&shifted(x, i, h, j, -h));
                let mp = eval(&shifted(x, i, -h, j, h));
                let mm = eval(&shifted(x, i, -h, j, -h));
                let v = (pp - pm - mp + mm) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        (g, hess)
    };
    let mut converged = false;
    if fx.is_finite() && dim > 0 {
        let (mut g, mut hess) = derivs(&x, fx, &mut eval);
        for _ in 0..max_iters {
            if !g.iter().all(|v: &f64| v.is_finite()) {
                break;
            }
            let Some(chol) = hess.clone().cholesky() else {
                break;
            };
            let step = chol.solve(&(-&g));
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            let fn_ = eval(&xn);
            // reject anything that is clearly worse, not just rounding noise
            if !fn_.is_finite() || fn_ > fx + 1e-9 * (1.0 + fx.abs()) {
                break;
            }
            let (gn, hn) = derivs(&xn, fn_, &mut eval);
            if gn.norm() >= g.norm() {
                converged = true;
                break;
            }
            x = xn;
            fx = fn_;
            g = gn;
            hess = hn;
        }
    }
    Minimum {
        x,
        f: fx,
        evals,
        converged,
    }
}
