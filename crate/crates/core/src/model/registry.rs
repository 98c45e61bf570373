//! Built-in models selectable by name.

use std::sync::Arc;

use super::{
    Benchmark, ConjugateMean, GaussianNoise, GaussianPrior, InputSignal, LinearGaussian1d,
    NoiseSequence, SsmModel,
};
use crate::error::{Error, Result};

pub const BENCHMARK: &str = "benchmark-eq13";
pub const LINEAR_GAUSSIAN_1D: &str = "linear-gaussian-1d";
pub const CONJUGATE_MEAN: &str = "conjugate-mean";

/// `(name, description)` of every registered model.
pub fn list() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            BENCHMARK,
            "x' = a x + x/(b + x^2) + u + v, y = c x + d x^2 + w; theta = [a b c d], Q = R = 1e-3",
        ),
        (
            LINEAR_GAUSSIAN_1D,
            "x' = 0.8 x + u + v, y = x + w; no unknown parameters, Q = R = 0.1",
        ),
        (
            CONJUGATE_MEAN,
            "y = mu + w with a nuisance white-noise state; conjugate Gaussian posterior for mu",
        ),
    ]
}

/// Optional replacements for a registered model's defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub process_variance: Option<f64>,
    pub measurement_variance: Option<f64>,
    pub prior_mean: Option<Vec<f64>>,
    pub prior_variances: Option<Vec<f64>>,
    pub input: Option<InputSignal>,
}

/// Builds a registered model with its default constants.
pub fn build(name: &str) -> Result<SsmModel> {
    build_with(name, &Overrides::default())
}

pub fn build_with(name: &str, overrides: &Overrides) -> Result<SsmModel> {
    let (q, r, mean, var, input): (f64, f64, Vec<f64>, Vec<f64>, InputSignal) = match name {
        BENCHMARK => (
            1e-3,
            1e-3,
            vec![1.0, 0.7, 0.6, 0.5, 0.4],
            vec![0.01; 5],
            InputSignal::default(),
        ),
        LINEAR_GAUSSIAN_1D => (0.1, 0.1, vec![0.0], vec![1.0], InputSignal::Zero),
        CONJUGATE_MEAN => (1.0, 0.1, vec![0.0, 0.0], vec![1.0, 1.0], InputSignal::Zero),
        other => {
            return Err(Error::Config(format!(
                "unknown model '{other}' (known: {})",
                list().iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            )))
        }
    };
    let q = overrides.process_variance.unwrap_or(q);
    let r = overrides.measurement_variance.unwrap_or(r);
    let mean = overrides.prior_mean.clone().unwrap_or(mean);
    let var = match &overrides.prior_variances {
        Some(v) if v.len() == 1 => vec![v[0]; mean.len()],
        Some(v) => v.clone(),
        None => var,
    };
    if var.len() != mean.len() {
        return Err(Error::Config(format!(
            "prior has {} mean entries but {} variances",
            mean.len(),
            var.len()
        )));
    }
    let input = overrides.input.clone().unwrap_or(input);
    let prior = GaussianPrior::diagonal(&mean, &var)?;
    let process = NoiseSequence::constant(GaussianNoise::scalar(q)?);
    let meas = NoiseSequence::constant(GaussianNoise::scalar(r)?);
    match name {
        BENCHMARK => SsmModel::new(name, Arc::new(Benchmark), process, meas, prior, input),
        LINEAR_GAUSSIAN_1D => SsmModel::new(
            name,
            Arc::new(LinearGaussian1d { a: 0.8, c: 1.0 }),
            process,
            meas,
            prior,
            input,
        ),
        _ => SsmModel::new(name, Arc::new(ConjugateMean), process, meas, prior, input),
    }
}

/// Benchmark model with the given constant noise variances and input.
pub fn benchmark_with(q: f64, r: f64, input: InputSignal) -> Result<SsmModel> {
    build_with(
        BENCHMARK,
        &Overrides {
            process_variance: Some(q),
            measurement_variance: Some(r),
            input: Some(input),
            ..Overrides::default()
        },
    )
}

/// Scalar linear-Gaussian model with arbitrary coefficients.
pub fn linear_gaussian(
    a: f64,
    c: f64,
    q: f64,
    r: f64,
    prior_mean: f64,
    prior_var: f64,
) -> Result<SsmModel> {
    SsmModel::new(
        LINEAR_GAUSSIAN_1D,
        Arc::new(LinearGaussian1d { a, c }),
        NoiseSequence::constant(GaussianNoise::scalar(q)?),
        NoiseSequence::constant(GaussianNoise::scalar(r)?),
        GaussianPrior::diagonal(&[prior_mean], &[prior_var])?,
        InputSignal::Zero,
    )
}
