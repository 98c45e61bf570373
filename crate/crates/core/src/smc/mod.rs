//! Sequential Monte Carlo over the extended state with artificial parameter
//! dynamics.
//!
//! Static parameters are given a small random walk (or a Liu-West kernel
//! move) at every step so that the particle cloud can keep exploring the
//! parameter space after resampling.

mod resample;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::model::SsmModel;
use crate::par;
use crate::rng;

pub use resample::{resample_systematic, systematic_indices};

/// Jitter redraws allowed before a particle outside the parameter support is
/// given zero weight.
pub const SUPPORT_REDRAWS: usize = 10;

/// Default particle count.
pub const DEFAULT_PARTICLES: usize = 2000;

/// Artificial parameter dynamics.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaSchedule {
    /// `θ_{t+1} = θ_t + N(0, γᵗ Q₀)`.
    ConstantDecay { q0: DMatrix<f64>, gamma: f64 },
    /// Liu-West kernel shrinkage with discount `δ`: the kernel mean is
    /// `a·θ + (1−a)·θ̄` with `a = (3δ−1)/(2δ)` and the kernel covariance is
    /// `(1−a²)·V` for the weighted particle covariance `V`.
    Shrinkage { delta: f64 },
}

impl Default for AdaSchedule {
    fn default() -> Self {
        AdaSchedule::Shrinkage { delta: 0.98 }
    }
}

impl AdaSchedule {
    /// Geometric decay with `Q₀ = 10⁻²·I` and `γ = 0.97`.
    pub fn default_decay(param_dim: usize) -> Self {
        AdaSchedule::ConstantDecay {
            q0: DMatrix::identity(param_dim, param_dim) * 1e-2,
            gamma: 0.97,
        }
    }

    pub fn validate(&self, param_dim: usize) -> Result<()> {
        match self {
            AdaSchedule::ConstantDecay { q0, gamma } => {
                if q0.nrows() != param_dim || q0.ncols() != param_dim {
                    return Err(Error::Config(format!(
                        "Q0 is {}x{}, parameter dimension is {param_dim}",
                        q0.nrows(),
                        q0.ncols()
                    )));
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(Error::Config(format!("decay rate {gamma} outside (0, 1]")));
                }
                if crate::linalg::min_eigenvalue(q0) < -1e-12 {
                    return Err(Error::Config("Q0 must be positive semi-definite".into()));
                }
            }
            AdaSchedule::Shrinkage { delta } => {
                if !(*delta > 0.9 && *delta <= 1.0) {
                    return Err(Error::Config(format!("shrinkage discount {delta} outside (0.9, 1]")));
                }
            }
        }
        Ok(())
    }

    /// `Q_t^θ` of the decay schedule.
    pub fn param_noise_cov(&self, t: usize) -> Option<DMatrix<f64>> {
        match self {
            AdaSchedule::ConstantDecay { q0, gamma } => Some(q0 * gamma.powi(t as i32)),
            AdaSchedule::Shrinkage { .. } => None,
        }
    }

    /// `(a, h²)` of the shrinkage kernel.
    pub fn shrinkage_coefficients(delta: f64) -> (f64, f64) {
        let a = (3.0 * delta - 1.0) / (2.0 * delta);
        (a, 1.0 - a * a)
    }

    pub fn describe(&self) -> String {
        match self {
            AdaSchedule::ConstantDecay { q0, gamma } => {
                format!("constant-decay(q0_diag={:?}, gamma={gamma})", q0.diagonal().as_slice())
            }
            AdaSchedule::Shrinkage { delta } => format!("shrinkage(delta={delta})"),
        }
    }
}

/// Weighted particles over `[x; θ]`, stored as `N` rows of width `n + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub state_dim: usize,
    pub param_dim: usize,
    particles: Vec<f64>,
    /// Normalized log-weights (`log Σ exp = 0`).
    log_weights: Vec<f64>,
    pub t: usize,
    pub ess: f64,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn width(&self) -> usize {
        self.state_dim + self.param_dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.particles[i * w..(i + 1) * w]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.particle(i)[..self.state_dim]
    }

    pub fn params(&self, i: usize) -> &[f64] {
        &self.particle(i)[self.state_dim..]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Builds a cloud from explicit rows and unnormalized log-weights.
    pub fn from_parts(
        state_dim: usize,
        param_dim: usize,
        particles: Vec<f64>,
        log_weights: Vec<f64>,
        t: usize,
    ) -> Result<Self> {
        if log_weights.is_empty() || particles.len() != log_weights.len() * (state_dim + param_dim) {
            return Err(Error::Shape(format!(
                "{} values for {} particles of width {}",
                particles.len(),
                log_weights.len(),
                state_dim + param_dim
            )));
        }
        let mut cloud = Self {
            state_dim,
            param_dim,
            particles,
            log_weights,
            t,
            ess: 0.0,
        };
        cloud.normalize()?;
        Ok(cloud)
    }

    /// Max-subtracted log-space normalization; refreshes the ESS.
    fn normalize(&mut self) -> Result<()> {
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Degeneracy { t: self.t });
        }
        let sum: f64 = self.log_weights.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        let mut sq = 0.0;
        for l in &mut self.log_weights {
            *l = if l.is_nan() { f64::NEG_INFINITY } else { *l - log_norm };
            let w = l.exp();
            sq += w * w;
        }
        self.ess = (1.0 / sq).clamp(1.0, self.len() as f64);
        Ok(())
    }

    /// Weighted mean and covariance of the parameter components.
    pub fn param_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.param_dim;
        let mean = posterior_mean(self);
        let mut cov = DMatrix::zeros(q, q);
        for (i, lw) in self.log_weights.iter().enumerate() {
            let w = lw.exp();
            if w == 0.0 {
                continue;
            }
            let th = self.params(i);
            for a in 0..q {
                let da = th[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += w * da * (th[b] - mean[b]);
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        (mean, cov)
    }
}

/// `N` prior draws with uniform weights. Draws outside the parameter support
/// start with zero weight.
pub fn init_cloud<R: Rng + ?Sized>(model: &SsmModel, count: usize, rng: &mut R) -> Result<ParticleCloud> {
    if count == 0 {
        return Err(Error::Config("particle count must be positive".into()));
    }
    let d = model.dims();
    let width = d.extended();
    let mut particles = vec![0.0; count * width];
    let mut log_weights = vec![0.0; count];
    for (row, lw) in particles.chunks_mut(width).zip(log_weights.iter_mut()) {
        model.prior().sample_into(rng, row);
        if !model.dynamics().param_in_support(&row[d.state..]) {
            *lw = f64::NEG_INFINITY;
        }
    }
    ParticleCloud::from_parts(d.state, d.param, particles, log_weights, 0)
}

/// `θ_{t|t}`: weighted average of the parameter components.
pub fn posterior_mean(cloud: &ParticleCloud) -> DVector<f64> {
    let mut mean = DVector::zeros(cloud.param_dim);
    for (i, lw) in cloud.log_weights.iter().enumerate() {
        let w = lw.exp();
        if w == 0.0 {
            continue;
        }
        for (m, th) in mean.iter_mut().zip(cloud.params(i)) {
            *m += w * th;
        }
    }
    mean
}

/// Weighted average of the state components.
pub fn filtered_state_mean(cloud: &ParticleCloud) -> DVector<f64> {
    let mut mean = DVector::zeros(cloud.state_dim);
    for (i, lw) in cloud.log_weights.iter().enumerate() {
        let w = lw.exp();
        if w == 0.0 {
            continue;
        }
        for (m, x) in mean.iter_mut().zip(cloud.state(i)) {
            *m += w * x;
        }
    }
    mean
}

/// Summary of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Parameter posterior mean after weighting, before resampling.
    pub mean: DVector<f64>,
    /// Filtered state mean, taken at the same point.
    pub state_mean: DVector<f64>,
    /// ESS after weighting, before resampling.
    pub ess: f64,
    pub resampled: bool,
}

/// Advances the cloud from `t−1` to `t`: parameter jitter, state propagation
/// with input `u = u_{t−1}`, reweighting by `p(y_t | x_t, θ_t)`, and
/// systematic resampling when the ESS falls below `N/2`.
pub fn ada_step<R: Rng + ?Sized>(
    cloud: &mut ParticleCloud,
    y: &[f64],
    u: &[f64],
    model: &SsmModel,
    schedule: &AdaSchedule,
    t: usize,
    rng: &mut R,
) -> Result<StepOutcome> {
    let d = model.dims();
    let (n, q) = (d.state, d.param);
    let count = cloud.len();
    let width = n + q;

    // Kernel: θ ← shrink·θ + (1−shrink)·θ̄ + S·z.
    let (shrink, center, factor) = match schedule {
        AdaSchedule::ConstantDecay { .. } => {
            let cov = schedule.param_noise_cov(t).expect("decay schedule");
            (1.0, DVector::zeros(q), psd_factor(&cov))
        }
        AdaSchedule::Shrinkage { delta } => {
            let (a, h2) = AdaSchedule::shrinkage_coefficients(*delta);
            let (mean, cov) = cloud.param_moments();
            (a, mean, psd_factor(&(cov * h2)))
        }
    };
    let jitter_on = factor.iter().any(|v| *v != 0.0);

    // All randomness for the step is drawn sequentially up front so the
    // per-particle pass below is schedule-independent.
    let jitter_noise: Vec<f64> = if jitter_on {
        (0..count * q).map(|_| rng.sample(StandardNormal)).collect()
    } else {
        Vec::new()
    };
    let process_noise: Vec<f64> = (0..count * n).map(|_| rng.sample(StandardNormal)).collect();
    let guard_seed: u64 = rng.random();

    let qnoise = model.process_noise(t - 1);
    let dynamics = model.dynamics();
    let ParticleCloud {
        particles,
        log_weights,
        ..
    } = cloud;
    par::for_each_row(particles, width, log_weights, |i, row, lw| {
        let (x, theta) = row.split_at_mut(n);
        if jitter_on {
            let base: Vec<f64> = theta
                .iter()
                .zip(center.iter())
                .map(|(th, c)| shrink * th + (1.0 - shrink) * c)
                .collect();
            let apply = |z: &[f64], out: &mut [f64]| {
                for a in 0..q {
                    let mut acc = base[a];
                    for b in 0..q {
                        acc += factor[(a, b)] * z[b];
                    }
                    out[a] = acc;
                }
            };
            apply(&jitter_noise[i * q..(i + 1) * q], theta);
            if !dynamics.param_in_support(theta) {
                let mut guard = rng::substream(guard_seed, rng::Domain::Particle, i as u64);
                let mut z = vec![0.0; q];
                let mut ok = false;
                for _ in 0..SUPPORT_REDRAWS {
                    z.iter_mut().for_each(|v| *v = guard.sample(StandardNormal));
                    apply(&z, theta);
                    if dynamics.param_in_support(theta) {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    *lw = f64::NEG_INFINITY;
                }
            }
        }
        if *lw == f64::NEG_INFINITY {
            return;
        }
        let mut next = vec![0.0; n];
        dynamics.transition(x, theta, u, t - 1, &mut next);
        qnoise.add_scaled(&process_noise[i * n..(i + 1) * n], &mut next);
        x.copy_from_slice(&next);
        let ll = model.log_measurement_density(y, x, theta, t);
        *lw = if ll.is_finite() { *lw + ll } else { f64::NEG_INFINITY };
    });

    cloud.t = t;
    cloud.normalize()?;
    let mean = posterior_mean(cloud);
    let state_mean = filtered_state_mean(cloud);
    let ess = cloud.ess;
    let resampled = ess < count as f64 / 2.0;
    if resampled {
        resample_systematic(cloud, rng);
    }
    Ok(StepOutcome {
        mean,
        state_mean,
        ess,
        resampled,
    })
}

/// Per-step record of an identification run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub t: usize,
    pub theta: Vec<f64>,
    pub ess: f64,
    pub resampled: bool,
}

/// Runs the filter over `y_1..y_T` (inputs `u_0..u_{T−1}`) and records
/// `θ_{t|t}` for `t = 1..=T`.
pub fn identify<R: Rng + ?Sized>(
    model: &SsmModel,
    measurements: &[Vec<f64>],
    inputs: &[Vec<f64>],
    particles: usize,
    schedule: &AdaSchedule,
    rng: &mut R,
) -> Result<Vec<EstimateRecord>> {
    if inputs.len() < measurements.len() {
        return Err(Error::Shape(format!(
            "{} inputs for {} measurements",
            inputs.len(),
            measurements.len()
        )));
    }
    schedule.validate(model.dims().param)?;
    let mut cloud = init_cloud(model, particles, rng)?;
    measurements
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let t = k + 1;
            let out = ada_step(&mut cloud, y, &inputs[k], model, schedule, t, rng)?;
            Ok(EstimateRecord {
                t,
                theta: out.mean.as_slice().to_vec(),
                ess: out.ess,
                resampled: out.resampled,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::simulate_ensemble;
    use crate::model::registry;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_cloud_uniform() {
        let m = registry::build(registry::BENCHMARK).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = init_cloud(&m, 4, &mut rng).unwrap();
        for w in c.weights() {
            assert_relative_eq!(w, 0.25, epsilon = 1e-15);
        }
        assert_relative_eq!(c.ess, 4.0, epsilon = 1e-12);
        let c = init_cloud(&m, 1, &mut rng).unwrap();
        assert_eq!(c.weights(), vec![1.0]);
        assert!(init_cloud(&m, 0, &mut rng).is_err());
    }

    #[test]
    fn init_cloud_param_mean() {
        let m = registry::build(registry::BENCHMARK).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = init_cloud(&m, 10_000, &mut rng).unwrap();
        let mean = posterior_mean(&c);
        for (got, want) in mean.iter().zip([0.7, 0.6, 0.5, 0.4]) {
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn posterior_mean_small_cases() {
        let c = ParticleCloud::from_parts(1, 1, vec![0.0, 0.25], vec![0.0], 0).unwrap();
        assert_eq!(posterior_mean(&c)[0], 0.25);
        let c = ParticleCloud::from_parts(
            1,
            1,
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.3_f64.ln(), 0.7_f64.ln()],
            0,
        )
        .unwrap();
        assert_relative_eq!(posterior_mean(&c)[0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn flat_likelihood_keeps_weights() {
        let m = registry::build_with(
            registry::BENCHMARK,
            &registry::Overrides {
                measurement_variance: Some(1e30),
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lw: Vec<f64> = (0..8).map(|i| ((i + 1) as f64 / 36.0).ln()).collect();
        let mut parts = Vec::new();
        for _ in 0..8 {
            parts.extend_from_slice(&[1.0, 0.7, 0.6, 0.5, 0.4]);
        }
        let mut c = ParticleCloud::from_parts(1, 4, parts, lw, 0).unwrap();
        let before = c.weights();
        let schedule = AdaSchedule::ConstantDecay {
            q0: DMatrix::zeros(4, 4),
            gamma: 1.0,
        };
        // ESS of these weights is above N/2, so no resampling.
        let out = ada_step(&mut c, &[0.3], &[0.0], &m, &schedule, 1, &mut rng).unwrap();
        assert!(!out.resampled);
        for (a, b) in before.iter().zip(c.weights()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_jitter_freezes_parameters() {
        let m = registry::build(registry::BENCHMARK).unwrap();
        let e = simulate_ensemble(&m, 1, 30, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = init_cloud(&m, 200, &mut rng).unwrap();
        let mut initial: Vec<Vec<f64>> = (0..200).map(|i| c.params(i).to_vec()).collect();
        initial.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for schedule in [
            AdaSchedule::ConstantDecay {
                q0: DMatrix::zeros(4, 4),
                gamma: 0.5,
            },
            AdaSchedule::Shrinkage { delta: 1.0 },
        ] {
            let mut cl = c.clone();
            for t in 1..=30 {
                ada_step(&mut cl, e.measurement(0, t), e.input(t - 1), &m, &schedule, t, &mut rng).unwrap();
                for i in 0..200 {
                    let p = cl.params(i).to_vec();
                    assert!(initial.binary_search_by(|q| q.partial_cmp(&p).unwrap()).is_ok());
                }
            }
        }
    }

    #[test]
    fn degeneracy_reports_step() {
        let m = registry::build(registry::BENCHMARK).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = init_cloud(&m, 10, &mut rng).unwrap();
        let err = ada_step(&mut c, &[f64::NAN], &[0.0], &m, &AdaSchedule::default(), 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Degeneracy { t: 1 }));
    }

    #[test]
    fn identify_empty_horizon() {
        let m = registry::build(registry::BENCHMARK).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = identify(&m, &[], &[], 10, &AdaSchedule::default(), &mut rng).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn schedule_validation() {
        assert!(AdaSchedule::Shrinkage { delta: 0.5 }.validate(4).is_err());
        assert!(AdaSchedule::Shrinkage { delta: 0.98 }.validate(4).is_ok());
        assert!(AdaSchedule::default_decay(3).validate(4).is_err());
        let s = AdaSchedule::default_decay(2);
        assert_relative_eq!(
            s.param_noise_cov(2).unwrap(),
            DMatrix::identity(2, 2) * 1e-2 * 0.97 * 0.97,
            epsilon = 1e-15
        );
        let (a, h2) = AdaSchedule::shrinkage_coefficients(0.98);
        assert_relative_eq!(a * a + h2, 1.0, epsilon = 1e-15);
    }
}
