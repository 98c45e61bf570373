//! Additive-Gaussian state-space models over the extended state `z = [x; θ]`.
//!
//! ```text
//! x_{t+1} = f_t(x_t, θ, u_t) + v_t,   v_t ~ N(0, Q_t)
//! θ_{t+1} = θ_t
//! y_t     = g_t(x_t, θ)      + w_t,   w_t ~ N(0, R_t)
//! z_0 ~ N(z_m, z_c)
//! ```
//!
//! The deterministic maps live behind the [`Dynamics`] trait; noise laws,
//! prior and input signal are plain data on [`SsmModel`].

mod benchmark;
mod input;
mod linear;
pub mod registry;

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::symmetrized;

pub use benchmark::Benchmark;
pub use input::InputSignal;
pub use linear::{ConjugateMean, LinearGaussian1d};

/// First and second derivatives of a vector map `h(x, θ)` with respect to the
/// stacked argument `[x; θ]` (length `n + q`).
#[derive(Debug, Clone)]
pub struct Derivatives {
    /// `out_dim × (n + q)`.
    pub jacobian: DMatrix<f64>,
    /// One `(n + q) × (n + q)` Hessian per output component.
    pub hessians: Vec<DMatrix<f64>>,
}

/// Deterministic part of a state-space model.
///
/// Implementations must be pure: they are evaluated concurrently from many
/// workers on distinct inputs.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    fn input_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        (1..=self.param_dim()).map(|i| format!("theta_{i}")).collect()
    }

    /// Noise-free transition mean, input included. Writes `n` values to `out`.
    fn transition(&self, x: &[f64], theta: &[f64], u: &[f64], t: usize, out: &mut [f64]);

    /// Noise-free measurement. Writes `m` values to `out`.
    fn measurement(&self, x: &[f64], theta: &[f64], t: usize, out: &mut [f64]);

    /// Analytic derivatives of the transition mean over `[x; θ]`, if available.
    fn transition_derivatives(
        &self,
        _x: &[f64],
        _theta: &[f64],
        _u: &[f64],
        _t: usize,
    ) -> Option<Derivatives> {
        None
    }

    /// Analytic derivatives of the measurement map over `[x; θ]`, if available.
    fn measurement_derivatives(&self, _x: &[f64], _theta: &[f64], _t: usize) -> Option<Derivatives> {
        None
    }

    /// Whether `θ` lies in the open parameter set the maps are defined on.
    fn param_in_support(&self, _theta: &[f64]) -> bool {
        true
    }
}

/// A zero-mean Gaussian law with cached factorizations.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    cov: DMatrix<f64>,
    lower: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianNoise {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::Config(format!(
                "covariance must be square, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrized(cov);
        let d = cov.nrows();
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
            Error::Config(format!("covariance is not positive definite: {cov}"))
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = symmetrized(chol.inverse());
        let lower = chol.unpack();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            cov,
            lower,
            precision,
            log_norm,
        })
    }

    pub fn scalar(variance: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, variance))
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = cov`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `log N(r; 0, cov)`.
    pub fn log_density(&self, residual: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(residual.len(), d);
        if d == 1 {
            return self.log_norm - 0.5 * residual[0] * residual[0] * self.precision[(0, 0)];
        }
        let mut quad = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.precision[(i, j)] * residual[j];
            }
            quad += residual[i] * row;
        }
        self.log_norm - 0.5 * quad
    }

    /// `out += L·z` for standard-normal `z`.
    pub fn add_scaled(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.lower[(i, j)] * z[j];
            }
            out[i] += acc;
        }
    }

    /// Draws one sample into `out` (overwriting it).
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        out.iter_mut().for_each(|v| *v = 0.0);
        self.add_scaled(&z, out);
    }
}

/// Per-step covariance sequence; a single entry is broadcast to all steps
/// and the last entry is reused past the end.
#[derive(Debug, Clone)]
pub struct NoiseSequence {
    steps: Vec<GaussianNoise>,
}

impl NoiseSequence {
    pub fn constant(noise: GaussianNoise) -> Self {
        Self { steps: vec![noise] }
    }

    pub fn per_step(steps: Vec<GaussianNoise>) -> Result<Self> {
        let Some(first) = steps.first() else {
            return Err(Error::Config("empty noise sequence".into()));
        };
        if steps.iter().any(|s| s.dim() != first.dim()) {
            return Err(Error::Config("noise sequence dimensions differ".into()));
        }
        Ok(Self { steps })
    }

    pub fn at(&self, t: usize) -> &GaussianNoise {
        &self.steps[t.min(self.steps.len() - 1)]
    }

    pub fn dim(&self) -> usize {
        self.steps[0].dim()
    }
}

/// Gaussian prior over the extended state.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub noise: GaussianNoise,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::Config(format!(
                "prior mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self {
            mean,
            noise: GaussianNoise::new(cov)?,
        })
    }

    pub fn diagonal(mean: &[f64], variances: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        self.noise.cov()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `[x_0; θ_0]` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        self.noise.sample_into(rng, out);
        for (o, m) in out.iter_mut().zip(self.mean.iter()) {
            *o += m;
        }
    }
}

/// The stacked state `Z_t = [X_t; θ_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: DVector<f64>,
    pub theta: DVector<f64>,
}

impl ExtendedState {
    pub fn new(x: DVector<f64>, theta: DVector<f64>) -> Self {
        Self { x, theta }
    }

    pub fn from_stacked(z: &[f64], state_dim: usize) -> Self {
        Self {
            x: DVector::from_column_slice(&z[..state_dim]),
            theta: DVector::from_column_slice(&z[state_dim..]),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.x.len() + self.theta.len());
        z.rows_mut(0, self.x.len()).copy_from(&self.x);
        z.rows_mut(self.x.len(), self.theta.len()).copy_from(&self.theta);
        z
    }
}

/// Dimensions of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub param: usize,
    pub meas: usize,
    pub input: usize,
}

impl Dims {
    pub fn extended(&self) -> usize {
        self.state + self.param
    }
}

/// A complete model: dynamics, noise laws, prior and input signal.
#[derive(Debug, Clone)]
pub struct SsmModel {
    name: String,
    dynamics: Arc<dyn Dynamics>,
    process_noise: NoiseSequence,
    meas_noise: NoiseSequence,
    prior: GaussianPrior,
    input: InputSignal,
}

impl SsmModel {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        process_noise: NoiseSequence,
        meas_noise: NoiseSequence,
        prior: GaussianPrior,
        input: InputSignal,
    ) -> Result<Self> {
        let n = dynamics.state_dim();
        let q = dynamics.param_dim();
        let m = dynamics.meas_dim();
        if n == 0 || m == 0 {
            return Err(Error::Config(
                "state and measurement dimensions must be positive".into(),
            ));
        }
        if process_noise.dim() != n {
            return Err(Error::Config(format!(
                "process noise is {0}x{0}, state dimension is {n}",
                process_noise.dim()
            )));
        }
        if meas_noise.dim() != m {
            return Err(Error::Config(format!(
                "measurement noise is {0}x{0}, measurement dimension is {m}",
                meas_noise.dim()
            )));
        }
        if prior.dim() != n + q {
            return Err(Error::Config(format!(
                "prior has dimension {}, extended state has {}",
                prior.dim(),
                n + q
            )));
        }
        Ok(Self {
            name: name.into(),
            dynamics,
            process_noise,
            meas_noise,
            prior,
            input,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        Dims {
            state: self.dynamics.state_dim(),
            param: self.dynamics.param_dim(),
            meas: self.dynamics.meas_dim(),
            input: self.dynamics.input_dim(),
        }
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.dynamics.param_names()
    }

    pub fn process_noise(&self, t: usize) -> &GaussianNoise {
        self.process_noise.at(t)
    }

    pub fn meas_noise(&self, t: usize) -> &GaussianNoise {
        self.meas_noise.at(t)
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn input(&self) -> &InputSignal {
        &self.input
    }

    pub fn with_input(mut self, input: InputSignal) -> Self {
        self.input = input;
        self
    }

    pub fn with_prior(mut self, prior: GaussianPrior) -> Result<Self> {
        if prior.dim() != self.dims().extended() {
            return Err(Error::Config("prior dimension mismatch".into()));
        }
        self.prior = prior;
        Ok(self)
    }

    /// Input sequence `u_0 .. u_{T-1}`.
    pub fn inputs(&self, horizon: usize) -> Result<Vec<Vec<f64>>> {
        self.input.values(self.dims().input, horizon)
    }

    /// `log N(x_next; f_t(x, θ, u), Q_t)`.
    pub fn log_transition_density(
        &self,
        x_next: &[f64],
        x: &[f64],
        theta: &[f64],
        u: &[f64],
        t: usize,
    ) -> f64 {
        let mut mean = vec![0.0; x_next.len()];
        self.dynamics.transition(x, theta, u, t, &mut mean);
        for (m, xn) in mean.iter_mut().zip(x_next) {
            *m = xn - *m;
        }
        self.process_noise(t).log_density(&mean)
    }

    /// `log N(y; g_t(x, θ), R_t)`.
    pub fn log_measurement_density(&self, y: &[f64], x: &[f64], theta: &[f64], t: usize) -> f64 {
        let mut pred = vec![0.0; y.len()];
        self.dynamics.measurement(x, theta, t, &mut pred);
        for (p, yv) in pred.iter_mut().zip(y) {
            *p = yv - *p;
        }
        self.meas_noise(t).log_density(&pred)
    }

    fn check_dims(&self, z: &ExtendedState) -> Result<()> {
        let d = self.dims();
        if z.x.len() != d.state || z.theta.len() != d.param {
            return Err(Error::Shape(format!(
                "extended state has ({}, {}) components, model expects ({}, {})",
                z.x.len(),
                z.theta.len(),
                d.state,
                d.param
            )));
        }
        Ok(())
    }
}

/// `count` independent draws from the extended-state prior.
pub fn sample_prior<R: Rng + ?Sized>(
    model: &SsmModel,
    count: usize,
    rng: &mut R,
) -> Vec<ExtendedState> {
    let d = model.dims();
    let mut buf = vec![0.0; d.extended()];
    (0..count)
        .map(|_| {
            model.prior().sample_into(rng, &mut buf);
            ExtendedState::from_stacked(&buf, d.state)
        })
        .collect()
}

/// `x_{t+1} = f_t(x, θ, u) + v`.
pub fn step_state(
    model: &SsmModel,
    z: &ExtendedState,
    u: &[f64],
    v: &[f64],
    t: usize,
) -> Result<DVector<f64>> {
    model.check_dims(z)?;
    let n = model.dims().state;
    if v.len() != n {
        return Err(Error::Shape(format!("process noise has length {}, expected {n}", v.len())));
    }
    let mut out = vec![0.0; n];
    model
        .dynamics()
        .transition(z.x.as_slice(), z.theta.as_slice(), u, t, &mut out);
    for (o, vi) in out.iter_mut().zip(v) {
        *o += vi;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation {
            t,
            what: "transition",
            z: z.stacked().as_slice().to_vec(),
        });
    }
    Ok(DVector::from_vec(out))
}

/// `y_t = g_t(x, θ) + w`.
pub fn step_measurement(
    model: &SsmModel,
    z: &ExtendedState,
    w: &[f64],
    t: usize,
) -> Result<DVector<f64>> {
    model.check_dims(z)?;
    let m = model.dims().meas;
    if w.len() != m {
        return Err(Error::Shape(format!("measurement noise has length {}, expected {m}", w.len())));
    }
    let mut out = vec![0.0; m];
    model
        .dynamics()
        .measurement(z.x.as_slice(), z.theta.as_slice(), t, &mut out);
    for (o, wi) in out.iter_mut().zip(w) {
        *o += wi;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation {
            t,
            what: "measurement",
            z: z.stacked().as_slice().to_vec(),
        });
    }
    Ok(DVector::from_vec(out))
}

/// Log transition density of the extended-state form.
pub fn log_transition_density(
    model: &SsmModel,
    x_next: &DVector<f64>,
    z: &ExtendedState,
    u: &[f64],
    t: usize,
) -> f64 {
    model.log_transition_density(x_next.as_slice(), z.x.as_slice(), z.theta.as_slice(), u, t)
}

/// Log measurement density of the extended-state form.
pub fn log_measurement_density(
    model: &SsmModel,
    y: &DVector<f64>,
    z: &ExtendedState,
    t: usize,
) -> f64 {
    model.log_measurement_density(y.as_slice(), z.x.as_slice(), z.theta.as_slice(), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bench(q: f64, r: f64) -> SsmModel {
        registry::benchmark_with(q, r, InputSignal::Zero).unwrap()
    }

    fn z(x: f64, theta: [f64; 4]) -> ExtendedState {
        ExtendedState::new(DVector::from_vec(vec![x]), DVector::from_row_slice(&theta))
    }

    #[test]
    fn step_state_zero_fixed_point() {
        let m = bench(1e-3, 1e-3);
        for b in [0.1, 0.6, 3.0] {
            let x = step_state(&m, &z(0.0, [0.3, b, 0.5, 0.4]), &[0.0], &[0.0], 0).unwrap();
            assert_eq!(x[0], 0.0);
        }
    }

    #[test]
    fn step_state_hand_values() {
        let m = bench(1e-3, 1e-3);
        let s = z(1.0, [0.7, 0.6, 0.5, 0.4]);
        let x = step_state(&m, &s, &[0.0], &[0.0], 0).unwrap();
        assert_relative_eq!(x[0], 1.325, epsilon = 1e-12);
        let x = step_state(&m, &s, &[0.5], &[-0.1], 0).unwrap();
        assert_relative_eq!(x[0], 1.725, epsilon = 1e-12);
    }

    #[test]
    fn step_state_reports_non_finite() {
        let m = bench(1e-3, 1e-3);
        // b + x² = 0 puts a pole in the transition.
        let err = step_state(&m, &z(1.0, [0.7, -1.0, 0.5, 0.4]), &[0.0], &[0.0], 5).unwrap_err();
        assert!(matches!(err, Error::ModelEvaluation { t: 5, .. }));
    }

    #[test]
    fn step_measurement_hand_values() {
        let m = bench(1e-3, 1e-3);
        let y = step_measurement(&m, &z(0.0, [0.7, 0.6, 0.5, 0.4]), &[0.0], 1).unwrap();
        assert_eq!(y[0], 0.0);
        let y = step_measurement(&m, &z(1.0, [0.7, 0.6, 0.5, 0.4]), &[0.0], 1).unwrap();
        assert_relative_eq!(y[0], 0.9, epsilon = 1e-12);
        let y = step_measurement(&m, &z(2.0, [0.7, 0.6, 0.5, 0.4]), &[0.01], 1).unwrap();
        assert_relative_eq!(y[0], 2.61, epsilon = 1e-12);
    }

    #[test]
    fn shape_errors() {
        let m = bench(1e-3, 1e-3);
        let bad = ExtendedState::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.7]));
        assert!(matches!(step_state(&m, &bad, &[0.0], &[0.0], 0), Err(Error::Shape(_))));
        assert!(matches!(
            step_measurement(&m, &z(1.0, [0.7, 0.6, 0.5, 0.4]), &[0.0, 0.0], 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn transition_density_peak_symmetry_and_quadratic_drop() {
        let m = bench(1e-3, 1e-3);
        let s = z(1.0, [0.7, 0.6, 0.5, 0.4]);
        let peak_x = 1.325;
        let peak = m.log_transition_density(&[peak_x], &[1.0], s.theta.as_slice(), &[0.0], 0);
        assert_relative_eq!(peak, -0.5 * (2.0 * std::f64::consts::PI * 1e-3).ln(), epsilon = 1e-12);
        let delta = 0.02;
        let up = m.log_transition_density(&[peak_x + delta], &[1.0], s.theta.as_slice(), &[0.0], 0);
        let down = m.log_transition_density(&[peak_x - delta], &[1.0], s.theta.as_slice(), &[0.0], 0);
        assert_relative_eq!(up, down, epsilon = 1e-9);
        assert_relative_eq!(peak - up, delta * delta / (2.0 * 1e-3), epsilon = 1e-9);
    }

    #[test]
    fn measurement_density_mirrors_transition() {
        let m = bench(1e-3, 1e-3);
        let theta = [0.7, 0.6, 0.5, 0.4];
        let y0 = 0.9;
        let peak = m.log_measurement_density(&[y0], &[1.0], &theta, 1);
        assert_relative_eq!(peak, -0.5 * (2.0 * std::f64::consts::PI * 1e-3).ln(), epsilon = 1e-12);
        let d = 0.015;
        let up = m.log_measurement_density(&[y0 + d], &[1.0], &theta, 1);
        let down = m.log_measurement_density(&[y0 - d], &[1.0], &theta, 1);
        assert_relative_eq!(up, down, epsilon = 1e-9);
        assert_relative_eq!(peak - up, d * d / (2.0 * 1e-3), epsilon = 1e-9);
    }

    #[test]
    fn transition_density_integrates_to_one() {
        // Trapezoid quadrature over ±12σ on a fine grid.
        let m = bench(1e-3, 1e-3);
        let theta = [0.7, 0.6, 0.5, 0.4];
        let center = 1.325;
        let sigma = 1e-3_f64.sqrt();
        let n = 20_000;
        let (lo, hi) = (center - 12.0 * sigma, center + 12.0 * sigma);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let xn = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * m.log_transition_density(&[xn], &[1.0], &theta, &[0.0], 0).exp();
        }
        assert!((total * h - 1.0).abs() < 1e-6, "integral {}", total * h);
    }

    #[test]
    fn sample_prior_edge_cases() {
        let m = bench(1e-3, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_prior(&m, 0, &mut rng).is_empty());

        let tight = m
            .clone()
            .with_prior(GaussianPrior::diagonal(&[1.0, 0.7, 0.6, 0.5, 0.4], &[1e-30; 5]).unwrap())
            .unwrap();
        for s in sample_prior(&tight, 10, &mut rng) {
            assert_relative_eq!(s.stacked(), tight.prior().mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_pd_prior_is_config_error() {
        let err = GaussianPrior::diagonal(&[0.0, 0.0], &[1.0, -1.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn prior_sample_moments() {
        let m = bench(1e-3, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = sample_prior(&m, 100_000, &mut rng);
        let count = draws.len() as f64;
        let mut mean = DVector::zeros(5);
        for d in &draws {
            mean += d.stacked();
        }
        mean /= count;
        for (got, want) in mean.iter().zip(m.prior().mean.iter()) {
            assert!((got - want).abs() < 0.005, "mean {got} vs {want}");
        }
        let mut cov = DMatrix::zeros(5, 5);
        for d in &draws {
            let c = d.stacked() - &mean;
            cov += &c * c.transpose();
        }
        cov /= count - 1.0;
        let rel = (&cov - m.prior().cov()).norm() / m.prior().cov().norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }
}
