//! Negative Hessian of `log p_t = log p(x_{t+1} | x_t, θ) + log p(y_{t+1} | θ, x_{t+1})`
//! with respect to the stacked vector `w = [x_t; θ; x_{t+1}]` (length `2n + q`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Derivatives, SsmModel};

/// How second derivatives of the log densities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianMethod {
    /// Analytic when the model supplies derivatives, otherwise finite differences.
    #[default]
    Auto,
    Analytic,
    FiniteDifference,
}

/// One joint sample `(x_t, θ, x_{t+1}, y_{t+1})` with the input `u_t`.
#[derive(Debug, Clone, Copy)]
pub struct TransitionSample<'a> {
    pub x: &'a [f64],
    pub theta: &'a [f64],
    pub x_next: &'a [f64],
    pub y_next: &'a [f64],
    pub u: &'a [f64],
    pub t: usize,
}

/// `−∇²_w log p_t` at the sample.
pub fn neg_log_pt_hessian(
    model: &SsmModel,
    s: &TransitionSample<'_>,
    method: HessianMethod,
) -> Result<DMatrix<f64>> {
    let dyn_ = model.dynamics();
    let analytic = match method {
        HessianMethod::FiniteDifference => None,
        HessianMethod::Auto | HessianMethod::Analytic => {
            match (
                dyn_.transition_derivatives(s.x, s.theta, s.u, s.t),
                dyn_.measurement_derivatives(s.x_next, s.theta, s.t + 1),
            ) {
                (Some(f), Some(g)) => Some((f, g)),
                _ if method == HessianMethod::Analytic => {
                    return Err(Error::Config(format!(
                        "model '{}' does not provide analytic derivatives",
                        model.name()
                    )))
                }
                _ => None,
            }
        }
    };
    Ok(match analytic {
        Some((f, g)) => analytic_hessian(model, s, &f, &g),
        None => finite_difference_hessian(model, s),
    })
}

/// Gauss-Newton term plus residual-weighted curvature for each Gaussian factor.
fn analytic_hessian(
    model: &SsmModel,
    s: &TransitionSample<'_>,
    df: &Derivatives,
    dg: &Derivatives,
) -> DMatrix<f64> {
    let n = s.x.len();
    let q = s.theta.len();
    let m = s.y_next.len();
    let ext = n + q;
    let dim = 2 * n + q;
    let mut h = DMatrix::zeros(dim, dim);

    // Transition factor, residual r = x' − f(x, θ, u), ∂r/∂w = [−F_x, −F_θ, I].
    let mut mean = vec![0.0; n];
    model.dynamics().transition(s.x, s.theta, s.u, s.t, &mut mean);
    let r = DVector::from_iterator(n, s.x_next.iter().zip(&mean).map(|(a, b)| a - b));
    let qinv = model.process_noise(s.t).precision();
    let mut jr = DMatrix::zeros(n, dim);
    jr.view_mut((0, 0), (n, ext)).copy_from(&(-&df.jacobian));
    jr.view_mut((0, ext), (n, n)).fill_with_identity();
    h += jr.transpose() * qinv * &jr;
    let weights = qinv * &r;
    for (k, hk) in df.hessians.iter().enumerate() {
        // ∇²r_k = −∇²f_k on the [x; θ] block.
        let mut block = h.view_mut((0, 0), (ext, ext));
        block -= hk * weights[k];
    }

    // Measurement factor, residual r = y − g(x', θ); derivative columns of g
    // are ordered [x', θ] and land on the (x', θ) slots of w.
    let idx: Vec<usize> = (ext..dim).chain(n..ext).collect();
    let mut pred = vec![0.0; m];
    model
        .dynamics()
        .measurement(s.x_next, s.theta, s.t + 1, &mut pred);
    let r = DVector::from_iterator(m, s.y_next.iter().zip(&pred).map(|(a, b)| a - b));
    let rinv = model.meas_noise(s.t + 1).precision();
    let mut jr = DMatrix::zeros(m, dim);
    for (c, &w) in idx.iter().enumerate() {
        for k in 0..m {
            jr[(k, w)] = -dg.jacobian[(k, c)];
        }
    }
    h += jr.transpose() * rinv * &jr;
    let weights = rinv * &r;
    for (k, hk) in dg.hessians.iter().enumerate() {
        for (a, &wa) in idx.iter().enumerate() {
            for (b, &wb) in idx.iter().enumerate() {
                h[(wa, wb)] -= weights[k] * hk[(a, b)];
            }
        }
    }
    h
}

/// `log p_t` as a function of the stacked vector.
fn log_pt(model: &SsmModel, s: &TransitionSample<'_>, w: &[f64]) -> f64 {
    let n = s.x.len();
    let q = s.theta.len();
    let (x, rest) = w.split_at(n);
    let (theta, x_next) = rest.split_at(q);
    model.log_transition_density(x_next, x, theta, s.u, s.t)
        + model.log_measurement_density(s.y_next, x_next, theta, s.t + 1)
}

/// Step `max(|v|, 1)·ε^{1/3}` for central differences.
pub fn fd_step(v: f64) -> f64 {
    v.abs().max(1.0) * f64::EPSILON.cbrt()
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, at: &[f64]) -> Vec<f64> {
    let mut w = at.to_vec();
    (0..at.len())
        .map(|i| {
            let h = fd_step(at[i]);
            w[i] = at[i] + h;
            let up = f(&w);
            w[i] = at[i] - h;
            let down = f(&w);
            w[i] = at[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of the central-difference gradient, symmetrized.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: &F, at: &[f64]) -> DMatrix<f64> {
    let d = at.len();
    let mut h = DMatrix::zeros(d, d);
    let mut w = at.to_vec();
    for j in 0..d {
        let step = fd_step(at[j]);
        w[j] = at[j] + step;
        let up = fd_gradient(f, &w);
        w[j] = at[j] - step;
        let down = fd_gradient(f, &w);
        w[j] = at[j];
        for i in 0..d {
            h[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    crate::linalg::symmetrized(h)
}

fn finite_difference_hessian(model: &SsmModel, s: &TransitionSample<'_>) -> DMatrix<f64> {
    let mut at = Vec::with_capacity(2 * s.x.len() + s.theta.len());
    at.extend_from_slice(s.x);
    at.extend_from_slice(s.theta);
    at.extend_from_slice(s.x_next);
    -fd_hessian(&|w: &[f64]| log_pt(model, s, w), &at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::registry;

    #[test]
    fn linear_gaussian_closed_form() {
        let (a, c, q, r) = (0.8, 1.0, 0.1, 0.1);
        let m = registry::linear_gaussian(a, c, q, r, 0.0, 1.0).unwrap();
        let s = TransitionSample {
            x: &[0.3],
            theta: &[],
            x_next: &[0.1],
            y_next: &[-0.2],
            u: &[0.0],
            t: 0,
        };
        for method in [HessianMethod::Analytic, HessianMethod::FiniteDifference] {
            let h = neg_log_pt_hessian(&m, &s, method).unwrap();
            let tol = if method == HessianMethod::Analytic { 1e-12 } else { 1e-4 };
            assert!((h[(0, 0)] - a * a / q).abs() < tol);
            assert!((h[(0, 1)] + a / q).abs() < tol);
            assert!((h[(1, 1)] - (1.0 / q + c * c / r)).abs() < tol);
        }
    }

    #[test]
    fn benchmark_analytic_matches_fd_pointwise() {
        let m = registry::build(registry::BENCHMARK).unwrap();
        let s = TransitionSample {
            x: &[1.1],
            theta: &[0.68, 0.63, 0.52, 0.37],
            x_next: &[1.52],
            y_next: &[1.71],
            u: &[0.5],
            t: 3,
        };
        let an = neg_log_pt_hessian(&m, &s, HessianMethod::Analytic).unwrap();
        let fd = neg_log_pt_hessian(&m, &s, HessianMethod::FiniteDifference).unwrap();
        let scale = crate::linalg::max_abs(&an);
        for i in 0..6 {
            for j in 0..6 {
                let diff = (an[(i, j)] - fd[(i, j)]).abs();
                assert!(diff < 1e-3 * an[(i, j)].abs() + 1e-6 * scale, "({i},{j}): {} vs {}", an[(i, j)], fd[(i, j)]);
            }
        }
    }
}
