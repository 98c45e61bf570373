use nalgebra::DMatrix;

use super::{Derivatives, Dynamics};

/// Scalar linear-Gaussian model with known coefficients and no unknown
/// parameters: `x' = a·x + u + v`, `y = c·x + w`.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussian1d {
    pub a: f64,
    pub c: f64,
}

impl Dynamics for LinearGaussian1d {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn meas_dim(&self) -> usize {
        1
    }

    fn transition(&self, x: &[f64], _theta: &[f64], u: &[f64], _t: usize, out: &mut [f64]) {
        out[0] = self.a * x[0] + u[0];
    }

    fn measurement(&self, x: &[f64], _theta: &[f64], _t: usize, out: &mut [f64]) {
        out[0] = self.c * x[0];
    }

    fn transition_derivatives(
        &self,
        _x: &[f64],
        _theta: &[f64],
        _u: &[f64],
        _t: usize,
    ) -> Option<Derivatives> {
        Some(Derivatives {
            jacobian: DMatrix::from_element(1, 1, self.a),
            hessians: vec![DMatrix::zeros(1, 1)],
        })
    }

    fn measurement_derivatives(&self, _x: &[f64], _theta: &[f64], _t: usize) -> Option<Derivatives> {
        Some(Derivatives {
            jacobian: DMatrix::from_element(1, 1, self.c),
            hessians: vec![DMatrix::zeros(1, 1)],
        })
    }
}

/// Static-mean toy: `y = θ + w` with a nuisance state `x' = v` that
/// the measurement ignores. The parameter posterior is conjugate Gaussian.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConjugateMean;

impl Dynamics for ConjugateMean {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn meas_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into()]
    }

    fn transition(&self, _x: &[f64], _theta: &[f64], _u: &[f64], _t: usize, out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn measurement(&self, _x: &[f64], theta: &[f64], _t: usize, out: &mut [f64]) {
        out[0] = theta[0];
    }

    fn transition_derivatives(
        &self,
        _x: &[f64],
        _theta: &[f64],
        _u: &[f64],
        _t: usize,
    ) -> Option<Derivatives> {
        Some(Derivatives {
            jacobian: DMatrix::zeros(1, 2),
            hessians: vec![DMatrix::zeros(2, 2)],
        })
    }

    fn measurement_derivatives(&self, _x: &[f64], _theta: &[f64], _t: usize) -> Option<Derivatives> {
        Some(Derivatives {
            jacobian: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            hessians: vec![DMatrix::zeros(2, 2)],
        })
    }
}
