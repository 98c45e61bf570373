//! Posterior information matrix recursion over the extended state and the
//! parameter lower bound extracted from it.
//!
//! The information matrix `J_t` is kept in blocks `{J^x, J^{xθ}, J^θ}`. Each
//! step averages negative Hessians of `log p_t` over a simulated ensemble to
//! get the six `H` blocks, then applies
//!
//! ```text
//! J^x_{t+1}  = H33 − H13ᵀ (J^x + H11)⁻¹ H13
//! J^xθ_{t+1} = H23ᵀ − H13ᵀ (J^x + H11)⁻¹ (J^xθ + H12)
//! J^θ_{t+1}  = J^θ + H22 − (J^xθ + H12)ᵀ (J^x + H11)⁻¹ (J^xθ + H12)
//! ```
//!
//! The parameter bound is the inverse Schur complement
//! `L^θ = [J^θ − J^xθᵀ (J^x)⁻¹ J^xθ]⁻¹`.

pub mod hessian;

use nalgebra::DMatrix;

use crate::ensemble::{simulate_ensemble, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{self, condition_number, pairwise_sum, spd_inverse, symmetrize};
use crate::model::{GaussianPrior, SsmModel};
use crate::par;

pub use hessian::{fd_gradient, fd_hessian, fd_step, neg_log_pt_hessian, HessianMethod, TransitionSample};

/// Block posterior information matrix at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PimState {
    /// `n × n`
    pub jx: DMatrix<f64>,
    /// `n × q`
    pub jxt: DMatrix<f64>,
    /// `q × q`
    pub jt: DMatrix<f64>,
    pub t: usize,
}

impl PimState {
    pub fn state_dim(&self) -> usize {
        self.jx.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.jt.nrows()
    }

    /// `[[J^x, J^xθ], [J^xθᵀ, J^θ]]`.
    pub fn assembled(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let q = self.param_dim();
        let mut j = DMatrix::zeros(n + q, n + q);
        j.view_mut((0, 0), (n, n)).copy_from(&self.jx);
        j.view_mut((0, n), (n, q)).copy_from(&self.jxt);
        j.view_mut((n, 0), (q, n)).copy_from(&self.jxt.transpose());
        j.view_mut((n, n), (q, q)).copy_from(&self.jt);
        j
    }

    /// Splits a full `(n+q) × (n+q)` information matrix into blocks.
    pub fn from_assembled(j: &DMatrix<f64>, state_dim: usize, t: usize) -> Self {
        let n = state_dim;
        let q = j.nrows() - n;
        let mut j = j.clone();
        symmetrize(&mut j);
        Self {
            jx: j.view((0, 0), (n, n)).into_owned(),
            jxt: j.view((0, n), (n, q)).into_owned(),
            jt: j.view((n, n), (q, q)).into_owned(),
            t,
        }
    }
}

/// Expected negative Hessian blocks of `log p_t` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HBlocks {
    pub h11: DMatrix<f64>,
    pub h12: DMatrix<f64>,
    pub h13: DMatrix<f64>,
    pub h22: DMatrix<f64>,
    pub h23: DMatrix<f64>,
    pub h33: DMatrix<f64>,
    pub t: usize,
    pub mc_count: usize,
}

impl HBlocks {
    /// Splits a full `(2n+q)`-square matrix over `[x_t; θ; x_{t+1}]`.
    pub fn from_full(h: &DMatrix<f64>, n: usize, q: usize, t: usize, mc_count: usize) -> Self {
        let block = |r, c, nr, nc| h.view((r, c), (nr, nc)).into_owned();
        let mut out = Self {
            h11: block(0, 0, n, n),
            h12: block(0, n, n, q),
            h13: block(0, n + q, n, n),
            h22: block(n, n, q, q),
            h23: block(n, n + q, q, n),
            h33: block(n + q, n + q, n, n),
            t,
            mc_count,
        };
        symmetrize(&mut out.h11);
        symmetrize(&mut out.h22);
        symmetrize(&mut out.h33);
        out
    }
}

/// A value together with the number of ridge regularizations it required.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularized<T> {
    pub value: T,
    pub ridge_events: u32,
}

/// Per-step parameter bounds `L^θ_t`, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundSeries {
    pub bounds: Vec<DMatrix<f64>>,
    /// Condition number of `J^x_t`.
    pub cond_jx: Vec<f64>,
    /// Ridge regularizations applied while producing step `t`.
    pub regularization_events: Vec<u32>,
}

impl BoundSeries {
    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn diagonal(&self, t: usize) -> Vec<f64> {
        self.bounds[t].diagonal().iter().copied().collect()
    }

    pub fn param_dim(&self) -> usize {
        self.bounds.first().map_or(0, |b| b.nrows())
    }
}

/// Information matrices and bounds of a full run.
#[derive(Debug, Clone)]
pub struct PcrlbRun {
    pub pim: Vec<PimState>,
    pub bounds: BoundSeries,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PcrlbOptions {
    pub hessian: HessianMethod,
}

/// `J_0 = E[−∇² log p(z_0)]`, which for a Gaussian prior is `z_c⁻¹`.
pub fn initial_pim(prior: &GaussianPrior, state_dim: usize) -> Result<PimState> {
    if state_dim > prior.dim() {
        return Err(Error::Shape(format!(
            "state dimension {state_dim} exceeds prior dimension {}",
            prior.dim()
        )));
    }
    Ok(PimState::from_assembled(prior.noise.precision(), state_dim, 0))
}

/// Monte Carlo average of `−∇² log p_t` over the ensemble at step `t → t+1`.
///
/// Per-trajectory Hessians are computed in parallel and summed with a fixed
/// pairwise tree, so the result is independent of the worker count.
pub fn estimate_h_blocks(
    model: &SsmModel,
    ensemble: &TrajectoryEnsemble,
    t: usize,
    method: HessianMethod,
) -> Result<HBlocks> {
    if t >= ensemble.horizon {
        return Err(Error::Shape(format!(
            "H blocks at t={t} need step t+1 but horizon is {}",
            ensemble.horizon
        )));
    }
    let n = ensemble.state_dim;
    let q = ensemble.param_dim;
    let samples = par::map_indexed(ensemble.count, |j| {
        let s = TransitionSample {
            x: ensemble.state(j, t),
            theta: ensemble.params(j),
            x_next: ensemble.state(j, t + 1),
            y_next: ensemble.measurement(j, t + 1),
            u: ensemble.input(t),
            t,
        };
        let h = neg_log_pt_hessian(model, &s, method)?;
        if let Some(block) = non_finite_block(&h, n, q) {
            return Err(Error::NonFiniteHessian {
                t,
                trajectory: j,
                block,
            });
        }
        Ok(h)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut total = pairwise_sum(&samples)
        .ok_or_else(|| Error::Config("H blocks need at least one trajectory".into()))?;
    total /= ensemble.count as f64;
    Ok(HBlocks::from_full(&total, n, q, t, ensemble.count))
}

fn non_finite_block(h: &DMatrix<f64>, n: usize, q: usize) -> Option<&'static str> {
    let slot = |i: usize| {
        if i < n {
            0
        } else if i < n + q {
            1
        } else {
            2
        }
    };
    const NAMES: [[&str; 3]; 3] = [["H11", "H12", "H13"], ["H12", "H22", "H23"], ["H13", "H23", "H33"]];
    for i in 0..h.nrows() {
        for j in 0..h.ncols() {
            if !h[(i, j)].is_finite() {
                return Some(NAMES[slot(i)][slot(j)]);
            }
        }
    }
    None
}

/// One step of the block information recursion.
pub fn pim_step(j: &PimState, h: &HBlocks) -> Result<Regularized<PimState>> {
    let t = j.t;
    let (inv, events) = spd_inverse(&(&j.jx + &h.h11), "J^x + H11", t)?;
    let coupling = &j.jxt + &h.h12;
    let mut jx = &h.h33 - h.h13.transpose() * &inv * &h.h13;
    let jxt = h.h23.transpose() - h.h13.transpose() * &inv * &coupling;
    let mut jt = &j.jt + &h.h22 - coupling.transpose() * &inv * &coupling;
    symmetrize(&mut jx);
    symmetrize(&mut jt);
    Ok(Regularized {
        value: PimState {
            jx,
            jxt,
            jt,
            t: t + 1,
        },
        ridge_events: events,
    })
}

/// `L^θ = [J^θ − J^xθᵀ (J^x)⁻¹ J^xθ]⁻¹`.
pub fn extract_param_bound(j: &PimState) -> Result<Regularized<DMatrix<f64>>> {
    let (jx_inv, e1) = spd_inverse(&j.jx, "J^x", j.t)?;
    let schur = &j.jt - j.jxt.transpose() * jx_inv * &j.jxt;
    let (bound, e2) = spd_inverse(&schur, "parameter Schur complement", j.t)?;
    Ok(Regularized {
        value: bound,
        ridge_events: e1 + e2,
    })
}

/// Runs the recursion over an existing ensemble.
pub fn bound_from_ensemble(
    model: &SsmModel,
    ensemble: &TrajectoryEnsemble,
    options: PcrlbOptions,
) -> Result<PcrlbRun> {
    let n = model.dims().state;
    let mut state = initial_pim(model.prior(), n)?;
    let mut pim = Vec::with_capacity(ensemble.horizon + 1);
    let mut bounds = BoundSeries::default();
    let mut record = |state: &PimState, step_events: u32, pim: &mut Vec<PimState>| -> Result<()> {
        let bound = extract_param_bound(state)?;
        bounds.bounds.push(bound.value);
        bounds.cond_jx.push(condition_number(&state.jx));
        bounds.regularization_events.push(step_events + bound.ridge_events);
        pim.push(state.clone());
        Ok(())
    };
    record(&state, 0, &mut pim)?;
    for t in 0..ensemble.horizon {
        let h = estimate_h_blocks(model, ensemble, t, options.hessian)?;
        let next = pim_step(&state, &h)?;
        state = next.value;
        record(&state, next.ridge_events, &mut pim)?;
    }
    Ok(PcrlbRun { pim, bounds })
}

/// Simulates `count` trajectories over `horizon` steps and runs the recursion.
pub fn run_pcrlb(
    model: &SsmModel,
    count: usize,
    horizon: usize,
    seed: u64,
    options: PcrlbOptions,
) -> Result<PcrlbRun> {
    let ensemble = simulate_ensemble(model, count, horizon, seed)?;
    bound_from_ensemble(model, &ensemble, options)
}

/// Lower-right `q × q` block of the explicitly inverted full information
/// matrix. Used to cross-check [`extract_param_bound`].
pub fn bound_by_full_inverse(j: &PimState) -> Result<DMatrix<f64>> {
    let n = j.state_dim();
    let q = j.param_dim();
    let (inv, _) = linalg::spd_inverse(&j.assembled(), "J^z", j.t)?;
    Ok(inv.view((n, n), (q, q)).into_owned())
}
