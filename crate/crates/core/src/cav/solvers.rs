//! Linear concept classifiers on a design matrix.
//!
//! All solvers fit `t ~ x . beta + intercept` with an unpenalized intercept.
//! Targets are concept labels `t in {0, 1}`.

use super::linalg::cholesky_solve;
use crate::error::{Error, Result};
use crate::tensor::dot;

pub const LASSO_TOL: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;
pub const LOGISTIC_GRAD_TOL: f64 = 1e-6;
pub const SVM_TOL: f64 = 1e-10;
pub const SVM_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
}

fn check(x: &[Vec<f64>], t: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != t.len() {
        return Err(Error::Shape(format!(
            "{} rows and {} targets",
            x.len(),
            t.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    Ok(d)
}

fn column_means(x: &[Vec<f64>]) -> Vec<f64> {
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = x.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn residuals(x: &[Vec<f64>], t: &[f64], fit: &LinearFit) -> Vec<f64> {
    x.iter()
        .zip(t)
        .map(|(r, &ti)| ti - dot(r, &fit.beta) - fit.intercept)
        .collect()
}

/// `(1/N) sum r_n^2 + lambda ||beta||_2^2`
pub fn ridge_objective(x: &[Vec<f64>], t: &[f64], fit: &LinearFit, lambda: f64) -> f64 {
    let r = residuals(x, t, fit);
    r.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + lambda * dot(&fit.beta, &fit.beta)
}

/// Gradient of [`ridge_objective`] with respect to `(beta, intercept)`.
pub fn ridge_gradient(x: &[Vec<f64>], t: &[f64], fit: &LinearFit, lambda: f64) -> Vec<f64> {
    let r = residuals(x, t, fit);
    let n = x.len() as f64;
    let d = fit.beta.len();
    let mut g: Vec<f64> = (0..d)
        .map(|j| -2.0 / n * x.iter().zip(&r).map(|(row, ri)| row[j] * ri).sum::<f64>() + 2.0 * lambda * fit.beta[j])
        .collect();
    g.push(-2.0 / n * r.iter().sum::<f64>());
    g
}

/// Closed-form ridge via the regularized normal equations on centred data.
pub fn ridge_solve(x: &[Vec<f64>], t: &[f64], lambda: f64) -> Result<LinearFit> {
    let d = check(x, t)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("ridge lambda must be positive, got {lambda}")));
    }
    let n = x.len() as f64;
    let mx = column_means(x);
    let mt = mean(t);
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (r, &ti) in x.iter().zip(t) {
        let c: Vec<f64> = r.iter().zip(&mx).map(|(v, m)| v - m).collect();
        for i in 0..d {
            rhs[i] += c[i] * (ti - mt) / n;
            for j in 0..d {
                gram[i * d + j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..d {
        gram[i * d + i] += lambda;
    }
    let beta = cholesky_solve(&gram, &rhs)?;
    let intercept = mt - dot(&mx, &beta);
    Ok(LinearFit { beta, intercept })
}

/// `(1/N) sum r_n^2 + lambda sum_j |beta_j|`
pub fn lasso_objective(x: &[Vec<f64>], t: &[f64], fit: &LinearFit, lambda: f64) -> f64 {
    let r = residuals(x, t, fit);
    r.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
        + lambda * fit.beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Smallest lambda for which the lasso solution is identically zero.
pub fn lasso_lambda_max(x: &[Vec<f64>], t: &[f64]) -> Result<f64> {
    check(x, t)?;
    let mx = column_means(x);
    let mt = mean(t);
    let n = x.len() as f64;
    let d = mx.len();
    Ok((0..d)
        .map(|j| {
            (2.0 / n * x.iter().zip(t).map(|(r, ti)| (r[j] - mx[j]) * (ti - mt)).sum::<f64>()).abs()
        })
        .fold(0.0, f64::max))
}

fn soft_threshold(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on centred data.
pub fn lasso_solve(x: &[Vec<f64>], t: &[f64], lambda: f64) -> Result<LinearFit> {
    let d = check(x, t)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lasso lambda must be positive, got {lambda}")));
    }
    let n = x.len() as f64;
    let mx = column_means(x);
    let mt = mean(t);
    // column-major centred copy
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| x.iter().map(|r| r[j] - mx[j]).collect())
        .collect();
    let sq: Vec<f64> = cols.iter().map(|c| dot(c, c) / n).collect();
    let mut resid: Vec<f64> = t.iter().map(|ti| ti - mt).collect();
    let mut beta = vec![0.0; d];
    for _sweep in 0..LASSO_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if sq[j] == 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = dot(&cols[j], &resid) / n + sq[j] * old;
            let new = soft_threshold(rho, lambda / 2.0) / sq[j];
            if new != old {
                let diff = new - old;
                for (r, c) in resid.iter_mut().zip(&cols[j]) {
                    *r -= diff * c;
                }
                beta[j] = new;
                max_change = max_change.max(diff.abs());
            }
        }
        if max_change < LASSO_TOL {
            let intercept = mt - dot(&mx, &beta);
            return Ok(LinearFit { beta, intercept });
        }
    }
    Err(Error::NonConvergence(format!(
        "lasso coordinate descent exceeded {LASSO_MAX_SWEEPS} sweeps"
    )))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Probabilities `p_n = sigma(x_n . beta + intercept)`.
pub fn logistic_probabilities(x: &[Vec<f64>], fit: &LinearFit) -> Vec<f64> {
    x.iter().map(|r| sigmoid(dot(r, &fit.beta) + fit.intercept)).collect()
}

/// `-sum [t ln p + (1 - t) ln(1 - p)] + lambda ||beta||^2`
pub fn logistic_objective(x: &[Vec<f64>], t: &[f64], fit: &LinearFit, lambda: f64) -> f64 {
    let nll: f64 = x
        .iter()
        .zip(t)
        .map(|(r, &ti)| {
            let z = dot(r, &fit.beta) + fit.intercept;
            // -[t ln s(z) + (1-t) ln(1 - s(z))] = softplus(z) - t z
            softplus(z) - ti * z
        })
        .sum();
    nll + lambda * dot(&fit.beta, &fit.beta)
}

fn logistic_gradient(x: &[Vec<f64>], t: &[f64], fit: &LinearFit, lambda: f64) -> Vec<f64> {
    let d = fit.beta.len();
    let mut g = vec![0.0; d + 1];
    for (r, &ti) in x.iter().zip(t) {
        let e = sigmoid(dot(r, &fit.beta) + fit.intercept) - ti;
        for j in 0..d {
            g[j] += e * r[j];
        }
        g[d] += e;
    }
    for j in 0..d {
        g[j] += 2.0 * lambda * fit.beta[j];
    }
    g
}

/// Damped Newton descent with backtracking; stops when the gradient norm
/// drops below [`LOGISTIC_GRAD_TOL`].
pub fn logistic_solve(x: &[Vec<f64>], t: &[f64], lambda: f64) -> Result<LinearFit> {
    let d = check(x, t)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "logistic lambda must be non-negative, got {lambda}"
        )));
    }
    const MAX_ITERS: usize = 500;
    const MAX_UPHILL: usize = 50;
    let mut fit = LinearFit {
        beta: vec![0.0; d],
        intercept: 0.0,
    };
    let mut loss = logistic_objective(x, t, &fit, lambda);
    let mut uphill = 0;
    for _ in 0..MAX_ITERS {
        let g = logistic_gradient(x, t, &fit, lambda);
        if crate::tensor::norm(&g) < LOGISTIC_GRAD_TOL {
            return Ok(fit);
        }
        let dim = d + 1;
        let mut h = vec![0.0; dim * dim];
        for r in x {
            let p = sigmoid(dot(r, &fit.beta) + fit.intercept);
            let w = p * (1.0 - p);
            for i in 0..dim {
                let ri = if i < d { r[i] } else { 1.0 };
                for j in 0..dim {
                    let rj = if j < d { r[j] } else { 1.0 };
                    h[i * dim + j] += w * ri * rj;
                }
            }
        }
        for i in 0..dim {
            h[i * dim + i] += if i < d { 2.0 * lambda } else { 0.0 } + 1e-12;
        }
        let step = match cholesky_solve(&h, &g) {
            Ok(s) => s,
            Err(_) => g.clone(),
        };
        let slope = -dot(&g, &step);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = LinearFit {
                beta: fit.beta.iter().zip(&step).map(|(b, s)| b - scale * s).collect(),
                intercept: fit.intercept - scale * step[d],
            };
            let cl = logistic_objective(x, t, &cand, lambda);
            if cl.is_finite() && cl <= loss + 1e-4 * scale * slope {
                accepted = Some((cand, cl));
                break;
            }
            scale *= 0.5;
        }
        let (cand, cl) = match accepted {
            Some(a) => a,
            None => {
                let cand = LinearFit {
                    beta: fit.beta.iter().zip(&step).map(|(b, s)| b - scale * s).collect(),
                    intercept: fit.intercept - scale * step[d],
                };
                let cl = logistic_objective(x, t, &cand, lambda);
                (cand, cl)
            }
        };
        if !cl.is_finite() {
            return Err(Error::Divergence("logistic loss became non-finite".into()));
        }
        if cl > loss {
            uphill += 1;
            if uphill >= MAX_UPHILL {
                return Err(Error::Divergence(format!(
                    "logistic loss increased for {MAX_UPHILL} consecutive steps"
                )));
            }
        } else {
            uphill = 0;
        }
        fit = cand;
        loss = cl;
    }
    let g = logistic_gradient(x, t, &fit, lambda);
    if crate::tensor::norm(&g) < LOGISTIC_GRAD_TOL {
        Ok(fit)
    } else {
        Err(Error::NonConvergence(format!(
            "logistic regression gradient norm {:e} after {MAX_ITERS} iterations",
            crate::tensor::norm(&g)
        )))
    }
}

/// `(1/N) sum max(0, 1 - y_n (x_n . beta + intercept)) + (lambda / 2) ||beta||^2`
/// with `y = 2t - 1`.
pub fn svm_objective(x: &[Vec<f64>], t: &[f64], fit: &LinearFit, lambda: f64) -> f64 {
    let hinge: f64 = x
        .iter()
        .zip(t)
        .map(|(r, &ti)| {
            let y = 2.0 * ti - 1.0;
            (1.0 - y * (dot(r, &fit.beta) + fit.intercept)).max(0.0)
        })
        .sum();
    hinge / x.len() as f64 + 0.5 * lambda * dot(&fit.beta, &fit.beta)
}

/// Exact solver through the dual
/// `min 1/2 a'Qa - sum a` s.t. `0 <= a <= 1/(lambda N)`, `y'a = 0`,
/// `Q = (y y') * (x x')`, by sequential minimal optimization with the
/// second-order working-set rule. `beta = sum a_n y_n x_n`; the intercept is
/// then the exact primal minimizer for that `beta`.
pub fn svm_solve(x: &[Vec<f64>], t: &[f64], lambda: f64) -> Result<LinearFit> {
    let d = check(x, t)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("svm lambda must be positive, got {lambda}")));
    }
    let n = x.len();
    let c = 1.0 / (lambda * n as f64);
    let y: Vec<f64> = t.iter().map(|ti| 2.0 * ti - 1.0).collect();
    let k: Vec<f64> = (0..n * n).map(|p| dot(&x[p / n], &x[p % n])).collect();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    // gradient of the dual objective, Q a - 1
    let mut grad = vec![-1.0; n];
    let mut iters = 0;
    loop {
        let up = |i: usize| (y[i] > 0.0 && alpha[i] < c) || (y[i] < 0.0 && alpha[i] > 0.0);
        let low = |i: usize| (y[i] < 0.0 && alpha[i] < c) || (y[i] > 0.0 && alpha[i] > 0.0);
        let mut best_up: Option<(usize, f64)> = None;
        for r in 0..n {
            let v = -y[r] * grad[r];
            if up(r) && best_up.map_or(true, |(_, b)| v > b) {
                best_up = Some((r, v));
            }
        }
        let Some((i, m_up)) = best_up else { break };
        // second-order choice of the partner; the gap uses the first-order one
        let mut m_low = f64::INFINITY;
        let mut partner: Option<(usize, f64)> = None;
        for r in 0..n {
            if !low(r) {
                continue;
            }
            let v = -y[r] * grad[r];
            m_low = m_low.min(v);
            let gap = m_up - v;
            if gap > 0.0 {
                let a = (k[i * n + i] + k[r * n + r] - 2.0 * k[i * n + r]).max(1e-12);
                let gain = gap * gap / a;
                if partner.map_or(true, |(_, g)| gain > g) {
                    partner = Some((r, gain));
                }
            }
        }
        if m_up - m_low < SVM_TOL {
            break;
        }
        let Some((j, _)) = partner else { break };
        let m_low = -y[j] * grad[j];
        iters += 1;
        if iters > SVM_MAX_ITERS {
            return Err(Error::NonConvergence(format!(
                "svm dual gap {:e} after {SVM_MAX_ITERS} iterations",
                m_up - m_low
            )));
        }
        // a_i += y_i s, a_j -= y_j s keeps y'a fixed
        let curvature = (k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j]).max(1e-12);
        let mut step = (m_up - m_low) / curvature;
        let room = |idx: usize, sign: f64| if sign > 0.0 { c - alpha[idx] } else { alpha[idx] };
        step = step.min(room(i, y[i])).min(room(j, -y[j]));
        let (di, dj) = (y[i] * step, -y[j] * step);
        alpha[i] = (alpha[i] + di).clamp(0.0, c);
        alpha[j] = (alpha[j] + dj).clamp(0.0, c);
        for (r, g) in grad.iter_mut().enumerate() {
            *g += q(r, i) * di + q(r, j) * dj;
        }
    }
    let mut beta = vec![0.0; d];
    for ((row, a), yi) in x.iter().zip(&alpha).zip(&y) {
        for (b, v) in beta.iter_mut().zip(row) {
            *b += a * yi * v;
        }
    }
    let mut fit = LinearFit { beta, intercept: 0.0 };
    fit.intercept = best_intercept(x, t, &fit);
    Ok(fit)
}

/// Exact hinge minimizer over the intercept for fixed `beta`. The hinge sum
/// is convex and piecewise linear in `b`, so some breakpoint
/// `b = y_n - x_n . beta` attains the minimum; ties keep the first one.
fn best_intercept(x: &[Vec<f64>], t: &[f64], fit: &LinearFit) -> f64 {
    let hinge_at = |b: f64| -> f64 {
        x.iter()
            .zip(t)
            .map(|(r, &ti)| {
                let y = 2.0 * ti - 1.0;
                (1.0 - y * (dot(r, &fit.beta) + b)).max(0.0)
            })
            .sum()
    };
    let mut best = (hinge_at(fit.intercept), fit.intercept);
    for (r, &ti) in x.iter().zip(t) {
        let b = (2.0 * ti - 1.0) - dot(r, &fit.beta);
        let v = hinge_at(b);
        if v < best.0 {
            best = (v, b);
        }
    }
    best.1
}
