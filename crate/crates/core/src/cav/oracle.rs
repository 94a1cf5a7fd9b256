//! Brute-force reference minimizers for the non-smooth solvers on
//! instances with at most three features.

use super::solvers::{lasso_objective, svm_objective, LinearFit};
use crate::tensor::dot;

/// Coarse-to-fine grid search over the box `[lo, hi]`: `points` values per
/// axis, then the box shrinks to two cells around the best point, `levels`
/// times. Returns the best point and value.
pub fn grid_minimize(f: impl Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64], points: usize, levels: usize) -> (Vec<f64>, f64) {
    assert!(points >= 2 && lo.len() == hi.len());
    let d = lo.len();
    let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
    let mut best = (lo.clone(), f64::INFINITY);
    let mut idx = vec![0usize; d];
    for _ in 0..levels {
        let step: Vec<f64> = (0..d).map(|j| (hi[j] - lo[j]) / (points - 1) as f64).collect();
        idx.iter_mut().for_each(|i| *i = 0);
        'grid: loop {
            let p: Vec<f64> = (0..d).map(|j| lo[j] + step[j] * idx[j] as f64).collect();
            let v = f(&p);
            if v < best.1 {
                best = (p, v);
            }
            for j in 0..d {
                idx[j] += 1;
                if idx[j] < points {
                    continue 'grid;
                }
                idx[j] = 0;
            }
            break;
        }
        for j in 0..d {
            lo[j] = best.0[j] - 2.0 * step[j];
            hi[j] = best.0[j] + 2.0 * step[j];
        }
    }
    best
}

fn optimal_intercept(x: &[Vec<f64>], t: &[f64], beta: &[f64]) -> f64 {
    x.iter().zip(t).map(|(r, ti)| ti - dot(r, beta)).sum::<f64>() / t.len() as f64
}

/// Lasso minimum over `beta in [-radius, radius]^d`; the intercept is set
/// to its closed-form optimum at every grid point.
pub fn lasso_oracle(x: &[Vec<f64>], t: &[f64], lambda: f64, radius: f64) -> (LinearFit, f64) {
    let d = x[0].len();
    let fit_at = |beta: &[f64]| LinearFit {
        beta: beta.to_vec(),
        intercept: optimal_intercept(x, t, beta),
    };
    let (beta, v) = grid_minimize(
        |b| lasso_objective(x, t, &fit_at(b), lambda),
        &vec![-radius; d],
        &vec![radius; d],
        41,
        8,
    );
    (fit_at(&beta), v)
}

/// SVM minimum over `(beta, intercept) in [-radius, radius]^(d+1)`.
pub fn svm_oracle(x: &[Vec<f64>], t: &[f64], lambda: f64, radius: f64) -> (LinearFit, f64) {
    let d = x[0].len();
    let fit_at = |p: &[f64]| LinearFit {
        beta: p[..d].to_vec(),
        intercept: p[d],
    };
    let (p, v) = grid_minimize(
        |p| svm_objective(x, t, &fit_at(p), lambda),
        &vec![-radius; d + 1],
        &vec![radius; d + 1],
        41,
        8,
    );
    (fit_at(&p), v)
}
