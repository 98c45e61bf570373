//! Monte Carlo draws of `(x_{0:T}, θ, y_{1:T})` from the joint model law.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::SsmModel;
use crate::par;
use crate::rng::{self, Domain};

/// `M` simulated trajectories over horizon `T`, stored row-major.
///
/// States cover `t = 0..=T`, measurements `t = 1..=T`, inputs `t = 0..T`.
/// Each trajectory keeps a single parameter vector for the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub count: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub param_dim: usize,
    pub meas_dim: usize,
    pub input_dim: usize,
    states: Vec<f64>,
    params: Vec<f64>,
    measurements: Vec<f64>,
    inputs: Vec<f64>,
    /// Substream seed each trajectory was drawn from.
    pub seeds: Vec<u64>,
}

/// One trajectory before it is packed into the ensemble.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub params: Vec<f64>,
    pub measurements: Vec<f64>,
    pub seed: u64,
}

impl TrajectoryEnsemble {
    /// Packs trajectories that share the given inputs.
    pub fn from_trajectories(
        model: &SsmModel,
        horizon: usize,
        inputs: &[Vec<f64>],
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let d = model.dims();
        if inputs.len() != horizon {
            return Err(Error::Shape(format!(
                "{} input rows for horizon {horizon}",
                inputs.len()
            )));
        }
        let mut ens = Self {
            count: trajectories.len(),
            horizon,
            state_dim: d.state,
            param_dim: d.param,
            meas_dim: d.meas,
            input_dim: d.input,
            states: Vec::with_capacity(trajectories.len() * (horizon + 1) * d.state),
            params: Vec::with_capacity(trajectories.len() * d.param),
            measurements: Vec::with_capacity(trajectories.len() * horizon * d.meas),
            inputs: inputs.iter().flatten().copied().collect(),
            seeds: Vec::with_capacity(trajectories.len()),
        };
        if ens.inputs.len() != horizon * d.input {
            return Err(Error::Shape("input rows have the wrong width".into()));
        }
        for (j, tr) in trajectories.into_iter().enumerate() {
            if tr.states.len() != (horizon + 1) * d.state
                || tr.params.len() != d.param
                || tr.measurements.len() != horizon * d.meas
            {
                return Err(Error::Shape(format!("trajectory {j} has the wrong shape")));
            }
            ens.states.extend(tr.states);
            ens.params.extend(tr.params);
            ens.measurements.extend(tr.measurements);
            ens.seeds.push(tr.seed);
        }
        Ok(ens)
    }

    /// `x_t` of trajectory `j`, `t ∈ 0..=T`.
    pub fn state(&self, j: usize, t: usize) -> &[f64] {
        let off = (j * (self.horizon + 1) + t) * self.state_dim;
        &self.states[off..off + self.state_dim]
    }

    /// `θ` of trajectory `j`.
    pub fn params(&self, j: usize) -> &[f64] {
        &self.params[j * self.param_dim..(j + 1) * self.param_dim]
    }

    /// `y_t` of trajectory `j`, `t ∈ 1..=T`.
    pub fn measurement(&self, j: usize, t: usize) -> &[f64] {
        assert!(t >= 1 && t <= self.horizon, "measurement index {t} out of 1..={}", self.horizon);
        let off = (j * self.horizon + t - 1) * self.meas_dim;
        &self.measurements[off..off + self.meas_dim]
    }

    /// `u_t`, `t ∈ 0..T`.
    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    /// Measurements `y_1..y_T` of trajectory `j`, one row per step.
    pub fn measurement_rows(&self, j: usize) -> Vec<Vec<f64>> {
        (1..=self.horizon).map(|t| self.measurement(j, t).to_vec()).collect()
    }

    pub fn input_rows(&self) -> Vec<Vec<f64>> {
        (0..self.horizon).map(|t| self.input(t).to_vec()).collect()
    }

    /// Keeps the first `count` trajectories.
    pub fn truncated(&self, count: usize) -> Self {
        let count = count.min(self.count);
        let mut out = self.clone();
        out.count = count;
        out.states.truncate(count * (self.horizon + 1) * self.state_dim);
        out.params.truncate(count * self.param_dim);
        out.measurements.truncate(count * self.horizon * self.meas_dim);
        out.seeds.truncate(count);
        out
    }
}

/// Simulates one trajectory from its own substream.
pub fn simulate_trajectory(
    model: &SsmModel,
    horizon: usize,
    inputs: &[Vec<f64>],
    seed: u64,
    index: usize,
) -> Result<Trajectory> {
    let d = model.dims();
    let mut rng = rng::from_seed(seed);
    let mut z0 = vec![0.0; d.extended()];
    model.prior().sample_into(&mut rng, &mut z0);
    let params = z0[d.state..].to_vec();
    let mut states = Vec::with_capacity((horizon + 1) * d.state);
    states.extend_from_slice(&z0[..d.state]);
    let mut measurements = Vec::with_capacity(horizon * d.meas);
    let mut next = vec![0.0; d.state];
    let mut y = vec![0.0; d.meas];
    let mut vn = vec![0.0; d.state];
    let mut wn = vec![0.0; d.meas];
    let fail = |t: usize, what: &'static str, x: &[f64]| {
        let mut z = x.to_vec();
        z.extend_from_slice(&params);
        log::warn!("trajectory {index}: {what} non-finite at t={t}");
        Error::ModelEvaluation { t, what, z }
    };
    for t in 0..horizon {
        let x = &states[t * d.state..(t + 1) * d.state];
        model.dynamics().transition(x, &params, &inputs[t], t, &mut next);
        vn.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        model.process_noise(t).add_scaled(&vn, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(fail(t, "transition", x));
        }
        states.extend_from_slice(&next);
        model.dynamics().measurement(&next, &params, t + 1, &mut y);
        wn.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        model.meas_noise(t + 1).add_scaled(&wn, &mut y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(fail(t + 1, "measurement", &next));
        }
        measurements.extend_from_slice(&y);
    }
    Ok(Trajectory {
        states,
        params,
        measurements,
        seed,
    })
}

/// Draws `count` independent trajectories; trajectory `j` uses substream
/// `(seed, Ensemble, j)`, so output does not depend on the worker count.
pub fn simulate_ensemble(
    model: &SsmModel,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if count == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "ensemble needs positive count and horizon, got M={count}, T={horizon}"
        )));
    }
    let inputs = model.inputs(horizon)?;
    let trajectories = par::map_indexed(count, |j| {
        let s = rng::substream_seed(seed, Domain::Ensemble, j as u64);
        simulate_trajectory(model, horizon, &inputs, s, j)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    TrajectoryEnsemble::from_trajectories(model, horizon, &inputs, trajectories)
}
