use nalgebra::DMatrix;

use super::{Derivatives, Dynamics};

/// Univariate nonlinear benchmark with unknown `θ = [a, b, c, d]`:
///
/// ```text
/// x' = a·x + x / (b + x²) + u + v
/// y  = c·x + d·x² + w
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct Benchmark;

impl Dynamics for Benchmark {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        4
    }

    fn meas_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect()
    }

    fn transition(&self, x: &[f64], theta: &[f64], u: &[f64], _t: usize, out: &mut [f64]) {
        let (a, b) = (theta[0], theta[1]);
        let x = x[0];
        out[0] = a * x + x / (b + x * x) + u[0];
    }

    fn measurement(&self, x: &[f64], theta: &[f64], _t: usize, out: &mut [f64]) {
        let (c, d) = (theta[2], theta[3]);
        let x = x[0];
        out[0] = c * x + d * x * x;
    }

    fn transition_derivatives(
        &self,
        x: &[f64],
        theta: &[f64],
        _u: &[f64],
        _t: usize,
    ) -> Option<Derivatives> {
        let (a, b) = (theta[0], theta[1]);
        let x = x[0];
        let den = b + x * x;
        let den2 = den * den;
        let den3 = den2 * den;
        // Stacked argument order: [x, a, b, c, d].
        let jacobian = DMatrix::from_row_slice(1, 5, &[a + (b - x * x) / den2, x, -x / den2, 0.0, 0.0]);
        let mut h = DMatrix::zeros(5, 5);
        h[(0, 0)] = 2.0 * x * (x * x - 3.0 * b) / den3;
        h[(0, 1)] = 1.0;
        h[(1, 0)] = 1.0;
        h[(0, 2)] = (3.0 * x * x - b) / den3;
        h[(2, 0)] = h[(0, 2)];
        h[(2, 2)] = 2.0 * x / den3;
        Some(Derivatives {
            jacobian,
            hessians: vec![h],
        })
    }

    fn measurement_derivatives(&self, x: &[f64], theta: &[f64], _t: usize) -> Option<Derivatives> {
        let (c, d) = (theta[2], theta[3]);
        let x = x[0];
        let jacobian = DMatrix::from_row_slice(1, 5, &[c + 2.0 * d * x, 0.0, 0.0, x, x * x]);
        let mut h = DMatrix::zeros(5, 5);
        h[(0, 0)] = 2.0 * d;
        h[(0, 3)] = 1.0;
        h[(3, 0)] = 1.0;
        h[(0, 4)] = 2.0 * x;
        h[(4, 0)] = 2.0 * x;
        Some(Derivatives {
            jacobian,
            hessians: vec![h],
        })
    }

    fn param_in_support(&self, theta: &[f64]) -> bool {
        theta[1] > 0.0 && theta.iter().all(|v| v.is_finite())
    }
}
