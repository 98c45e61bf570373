//! Closed-form oracle for a static Gaussian mean observed in Gaussian noise,
//! used to check the MSE decomposition `P = E[V*] + E[B* B*ᵀ]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::registry::{self, Overrides};
use crate::model::SsmModel;
use crate::par;
use crate::rng::{self, Domain};
use crate::smc::{identify, AdaSchedule};

/// `θ ~ N(μ0, σ0²)`, `y_t = θ + w_t`, `w_t ~ N(0, r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugateToy {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub noise_var: f64,
}

impl Default for ConjugateToy {
    fn default() -> Self {
        Self {
            prior_mean: 0.0,
            prior_var: 1.0,
            noise_var: 0.1,
        }
    }
}

impl ConjugateToy {
    /// Posterior `(mean, variance)` for `t = 0..=T`.
    pub fn posterior(&self, ys: &[f64]) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(ys.len() + 1);
        let mut precision = 1.0 / self.prior_var;
        let mut info_mean = self.prior_mean / self.prior_var;
        out.push((self.prior_mean, self.prior_var));
        for y in ys {
            precision += 1.0 / self.noise_var;
            info_mean += y / self.noise_var;
            out.push((info_mean / precision, 1.0 / precision));
        }
        out
    }

    /// The matching state-space model, for running the particle filter on it.
    pub fn model(&self) -> Result<SsmModel> {
        registry::build_with(
            registry::CONJUGATE_MEAN,
            &Overrides {
                measurement_variance: Some(self.noise_var),
                prior_mean: Some(vec![0.0, self.prior_mean]),
                prior_variances: Some(vec![1.0, self.prior_var]),
                ..Overrides::default()
            },
        )
    }

    /// Draws `(θ, y_{1:T})`.
    pub fn sample<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> (f64, Vec<f64>) {
        let z: f64 = rng.sample(StandardNormal);
        let theta = self.prior_mean + self.prior_var.sqrt() * z;
        let sd = self.noise_var.sqrt();
        let ys = (0..horizon)
            .map(|_| theta + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (theta, ys)
    }
}

/// Estimator plugged into the decomposition check.
#[derive(Debug, Clone, PartialEq)]
pub enum DecompositionEstimator {
    /// Exact posterior mean shifted by a constant.
    ExactPosterior { offset: f64 },
    /// Particle filter with artificial parameter dynamics.
    Smc { particles: usize, schedule: AdaSchedule },
}

/// Per-step terms of the decomposition over `M` runs, `t = 1..=T` at
/// index `t − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionCheck {
    pub runs: usize,
    pub mse: Vec<f64>,
    pub mean_posterior_var: Vec<f64>,
    pub mean_sq_bias: Vec<f64>,
    /// `|P̃ − (mean V* + mean B*²)|`.
    pub residual: Vec<f64>,
    /// Standard error of the residual estimate.
    pub standard_error: Vec<f64>,
}

impl DecompositionCheck {
    /// Largest residual measured in standard errors.
    pub fn max_z(&self) -> f64 {
        self.residual
            .iter()
            .zip(&self.standard_error)
            .map(|(r, s)| if *s > 0.0 { r / s } else if *r == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn mean_residual(&self) -> f64 {
        self.residual.iter().sum::<f64>() / self.residual.len() as f64
    }
}

/// Draws `runs` problems from the toy, estimates `θ` and compares the MSE
/// with the sum of the expected posterior variance and squared conditional
/// bias. Run `j` uses substream `(seed, Decomposition, j)`.
pub fn decomposition_check(
    toy: &ConjugateToy,
    runs: usize,
    horizon: usize,
    estimator: &DecompositionEstimator,
    seed: u64,
) -> Result<DecompositionCheck> {
    if runs < 2 || horizon == 0 {
        return Err(Error::Config(format!(
            "decomposition check needs M ≥ 2 and T ≥ 1, got M={runs}, T={horizon}"
        )));
    }
    let model = match estimator {
        DecompositionEstimator::Smc { .. } => Some(toy.model()?),
        DecompositionEstimator::ExactPosterior { .. } => None,
    };
    // Per run and step: (squared error, posterior variance, squared bias).
    let per_run = par::map_indexed(runs, |j| -> Result<Vec<(f64, f64, f64)>> {
        let mut rng = rng::substream(seed, Domain::Decomposition, j as u64);
        let (theta, ys) = toy.sample(horizon, &mut rng);
        let post = toy.posterior(&ys);
        let estimates: Vec<f64> = match estimator {
            DecompositionEstimator::ExactPosterior { offset } => {
                post[1..].iter().map(|(m, _)| m + offset).collect()
            }
            DecompositionEstimator::Smc { particles, schedule } => {
                let model = model.as_ref().expect("model built for SMC");
                let y: Vec<Vec<f64>> = ys.iter().map(|v| vec![*v]).collect();
                let u = vec![vec![0.0]; horizon];
                identify(model, &y, &u, *particles, schedule, &mut rng)?
                    .into_iter()
                    .map(|r| r.theta[0])
                    .collect()
            }
        };
        Ok(estimates
            .iter()
            .zip(&post[1..])
            .map(|(est, (m, v))| ((theta - est).powi(2), *v, (m - est).powi(2)))
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let m = runs as f64;
    let mut out = DecompositionCheck {
        runs,
        mse: Vec::with_capacity(horizon),
        mean_posterior_var: Vec::with_capacity(horizon),
        mean_sq_bias: Vec::with_capacity(horizon),
        residual: Vec::with_capacity(horizon),
        standard_error: Vec::with_capacity(horizon),
    };
    for k in 0..horizon {
        let mut p = 0.0;
        let mut v = 0.0;
        let mut b = 0.0;
        for r in &per_run {
            p += r[k].0;
            v += r[k].1;
            b += r[k].2;
        }
        let (p, v, b) = (p / m, v / m, b / m);
        let mean_d = p - v - b;
        let var_d = per_run
            .iter()
            .map(|r| (r[k].0 - r[k].1 - r[k].2 - mean_d).powi(2))
            .sum::<f64>()
            / (m - 1.0);
        out.mse.push(p);
        out.mean_posterior_var.push(v);
        out.mean_sq_bias.push(b);
        out.residual.push(mean_d.abs());
        out.standard_error.push((var_d / m).sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn posterior_closed_form() {
        let toy = ConjugateToy::default();
        let post = toy.posterior(&[0.5, 0.3]);
        assert_eq!(post[0], (0.0, 1.0));
        assert_relative_eq!(post[1].1, 1.0 / 11.0, epsilon = 1e-15);
        assert_relative_eq!(post[1].0, 5.0 / 11.0, epsilon = 1e-15);
        assert_relative_eq!(post[2].1, 1.0 / 21.0, epsilon = 1e-15);
        assert_relative_eq!(post[2].0, 8.0 / 21.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_posterior_has_no_bias_term() {
        let toy = ConjugateToy::default();
        let est = DecompositionEstimator::ExactPosterior { offset: 0.0 };
        let c = decomposition_check(&toy, 2000, 5, &est, 3).unwrap();
        for k in 0..5 {
            assert_eq!(c.mean_sq_bias[k], 0.0);
            assert!(c.residual[k] < 5.0 * c.standard_error[k] + 1e-12);
        }
    }

    #[test]
    fn offset_adds_squared_offset() {
        let toy = ConjugateToy::default();
        let est = DecompositionEstimator::ExactPosterior { offset: 0.1 };
        let c = decomposition_check(&toy, 500, 3, &est, 8).unwrap();
        for b in &c.mean_sq_bias {
            assert_relative_eq!(*b, 0.01, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_tiny_runs() {
        let toy = ConjugateToy::default();
        let est = DecompositionEstimator::ExactPosterior { offset: 0.0 };
        assert!(decomposition_check(&toy, 1, 3, &est, 0).is_err());
        assert!(decomposition_check(&toy, 10, 0, &est, 0).is_err());
    }
}
