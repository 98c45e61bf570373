//! Monte Carlo error analysis of parameter estimates against the bound:
//! MSE matrices, conditional and unconditional bias, and the
//! efficiency/unbiasedness classification.

mod conjugate;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{canonical_sum, min_eigenvalue};
use crate::model::SsmModel;
use crate::par;
use crate::pcrlb::BoundSeries;
use crate::rng::{self, Domain};
use crate::smc::{identify, AdaSchedule};

pub use conjugate::{decomposition_check, ConjugateToy, DecompositionCheck, DecompositionEstimator};

/// Default ε per parameter.
pub const DEFAULT_EPSILON: f64 = 0.01;
/// Default α per parameter.
pub const DEFAULT_ALPHA: f64 = 0.001;
/// Default fraction of runs that must lie within ε.
pub const DEFAULT_RHO: f64 = 0.7;

/// `P̃_t = (1/M) Σ_j (θ^j − θ̂^j_t)(θ^j − θ̂^j_t)ᵀ` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MseSeries {
    /// Entry `k` holds `t = k + 1`.
    pub matrices: Vec<DMatrix<f64>>,
    pub runs: usize,
}

impl MseSeries {
    pub fn horizon(&self) -> usize {
        self.matrices.len()
    }

    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        &self.matrices[t - 1]
    }

    pub fn trace(&self, t: usize) -> f64 {
        self.at(t).trace()
    }

    pub fn diagonal(&self, t: usize) -> Vec<f64> {
        self.at(t).diagonal().iter().copied().collect()
    }
}

fn check_aligned(truths: &[Vec<f64>], estimates: &[Vec<Vec<f64>>]) -> Result<(usize, usize)> {
    if truths.is_empty() {
        return Err(Error::Shape("need at least one run".into()));
    }
    if truths.len() != estimates.len() {
        return Err(Error::Shape(format!(
            "{} truth vectors but {} estimate sequences",
            truths.len(),
            estimates.len()
        )));
    }
    let q = truths[0].len();
    let horizon = estimates[0].len();
    for (j, (th, est)) in truths.iter().zip(estimates).enumerate() {
        if th.len() != q || est.len() != horizon || est.iter().any(|e| e.len() != q) {
            return Err(Error::Shape(format!("run {j} is misaligned")));
        }
    }
    Ok((q, horizon))
}

/// Monte Carlo MSE. Entries are reduced with an order-independent sum, so
/// permuting runs leaves the result bit-identical.
pub fn mse_mc(truths: &[Vec<f64>], estimates: &[Vec<Vec<f64>>]) -> Result<MseSeries> {
    let (q, horizon) = check_aligned(truths, estimates)?;
    let runs = truths.len();
    let matrices = par::map_indexed(horizon, |k| {
        let mut p = DMatrix::zeros(q, q);
        let mut terms = vec![0.0; runs];
        for a in 0..q {
            for b in 0..=a {
                for (j, term) in terms.iter_mut().enumerate() {
                    let ea = truths[j][a] - estimates[j][k][a];
                    let eb = truths[j][b] - estimates[j][k][b];
                    *term = ea * eb;
                }
                let v = canonical_sum(&mut terms) / runs as f64;
                p[(a, b)] = v;
                p[(b, a)] = v;
            }
        }
        p
    });
    Ok(MseSeries { matrices, runs })
}

/// `B* = θ* − θ̂` elementwise over aligned sequences.
pub fn conditional_bias(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "reference has {} steps, estimate has {}",
            reference.len(),
            estimate.len()
        )));
    }
    reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| {
            if r.len() != e.len() {
                return Err(Error::Shape("parameter dimension differs".into()));
            }
            Ok(r.iter().zip(e).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Conditional biases of every run and their Monte Carlo mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRecord {
    /// `per_run[j][k]` is `B*` of run `j` at `t = k + 1`.
    pub per_run: Vec<Vec<Vec<f64>>>,
    /// Mean over runs at `t = k + 1`.
    pub unconditional: Vec<Vec<f64>>,
    /// How the reference posterior means were obtained.
    pub provenance: String,
}

impl BiasRecord {
    pub fn new(per_run: Vec<Vec<Vec<f64>>>, provenance: impl Into<String>) -> Result<Self> {
        let Some(first) = per_run.first() else {
            return Err(Error::Shape("need at least one run".into()));
        };
        let horizon = first.len();
        let q = first.first().map_or(0, |v| v.len());
        if per_run.iter().any(|r| r.len() != horizon || r.iter().any(|b| b.len() != q)) {
            return Err(Error::Shape("bias sequences are misaligned".into()));
        }
        let runs = per_run.len() as f64;
        let unconditional = (0..horizon)
            .map(|k| {
                (0..q)
                    .map(|i| {
                        let mut terms: Vec<f64> = per_run.iter().map(|r| r[k][i]).collect();
                        canonical_sum(&mut terms) / runs
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            per_run,
            unconditional,
            provenance: provenance.into(),
        })
    }

    pub fn runs(&self) -> usize {
        self.per_run.len()
    }

    pub fn horizon(&self) -> usize {
        self.unconditional.len()
    }
}

/// Settings of the high-fidelity reference filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub particles: usize,
    pub replicates: usize,
    pub schedule: AdaSchedule,
}

impl ReferenceConfig {
    /// `multiplier × identifier particles`, averaged over `replicates` runs.
    pub fn scaled(identifier_particles: usize, multiplier: usize, replicates: usize, schedule: AdaSchedule) -> Self {
        Self {
            particles: identifier_particles * multiplier,
            replicates,
            schedule,
        }
    }

    pub fn provenance(&self) -> String {
        format!(
            "smc-reference(particles={}, replicates={}, schedule={})",
            self.particles,
            self.replicates,
            self.schedule.describe()
        )
    }
}

/// Reference posterior means `θ*_{t|t}` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMeans {
    /// Entry `t`; entry 0 is the prior mean.
    pub means: Vec<Vec<f64>>,
    pub provenance: String,
}

/// Approximates `E[θ_t | y_{1:t}]` by averaging independent large-particle
/// filter replicates. Replicate `r` draws from substream `(seed, Reference, r)`.
pub fn reference_posterior_mean(
    model: &SsmModel,
    measurements: &[Vec<f64>],
    inputs: &[Vec<f64>],
    config: &ReferenceConfig,
    seed: u64,
) -> Result<ReferenceMeans> {
    if config.replicates == 0 {
        return Err(Error::Config("reference needs at least one replicate".into()));
    }
    let d = model.dims();
    let replicates = par::map_indexed(config.replicates, |r| {
        let mut rng = rng::substream(seed, Domain::Reference, r as u64);
        identify(model, measurements, inputs, config.particles, &config.schedule, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let prior_theta = model.prior().mean.as_slice()[d.state..].to_vec();
    let mut means = Vec::with_capacity(measurements.len() + 1);
    means.push(prior_theta);
    let count = config.replicates as f64;
    for k in 0..measurements.len() {
        means.push(
            (0..d.param)
                .map(|i| replicates.iter().map(|rep| rep[k].theta[i]).sum::<f64>() / count)
                .collect(),
        );
    }
    Ok(ReferenceMeans {
        means,
        provenance: config.provenance(),
    })
}

/// Classification tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances {
    pub epsilon: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: f64,
}

impl Tolerances {
    pub fn uniform(q: usize, epsilon: f64, alpha: f64, rho: f64) -> Self {
        Self {
            epsilon: vec![epsilon; q],
            alpha: vec![alpha; q],
            rho,
        }
    }

    pub fn defaults(q: usize) -> Self {
        Self::uniform(q, DEFAULT_EPSILON, DEFAULT_ALPHA, DEFAULT_RHO)
    }

    fn validate(&self, q: usize) -> Result<()> {
        if self.epsilon.len() != q || self.alpha.len() != q {
            return Err(Error::Shape(format!(
                "tolerances have lengths ({}, {}), parameter dimension is {q}",
                self.epsilon.len(),
                self.alpha.len()
            )));
        }
        if self.epsilon.iter().chain(&self.alpha).any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("ε and α must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("ρ = {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Trace gap and smallest eigenvalue of `P̃_t − L̃_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapDiagnostic {
    pub t: usize,
    pub trace_gap: f64,
    pub min_eigenvalue: f64,
}

impl GapDiagnostic {
    /// Finite-sample violation of `P̃ ⪰ L̃`.
    pub fn is_negative(&self) -> bool {
        self.min_eigenvalue < 0.0
    }
}

/// `tr[P̃ − L̃]` and `λ_min(P̃ − L̃)` for `t = 1..=T`. Negative eigenvalues
/// are reported as-is and logged as warnings.
pub fn psd_gap(mse: &MseSeries, bound: &BoundSeries) -> Result<Vec<GapDiagnostic>> {
    if bound.len() < mse.horizon() + 1 {
        return Err(Error::Shape(format!(
            "bound covers t=0..{}, MSE needs t=1..={}",
            bound.len().saturating_sub(1),
            mse.horizon()
        )));
    }
    let mut negatives = 0;
    let gaps: Vec<GapDiagnostic> = (1..=mse.horizon())
        .map(|t| {
            let diff = mse.at(t) - &bound.bounds[t];
            let g = GapDiagnostic {
                t,
                trace_gap: diff.trace(),
                min_eigenvalue: min_eigenvalue(&diff),
            };
            if g.is_negative() {
                negatives += 1;
            }
            g
        })
        .collect();
    if negatives > 0 {
        log::warn!("P̃ − L̃ has a negative eigenvalue at {negatives} of {} steps", gaps.len());
    }
    Ok(gaps)
}

/// Classification at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepVerdict {
    pub t: usize,
    /// Every parameter is ε-unbiased.
    pub eps_efficient: bool,
    pub eps_unbiased: Vec<bool>,
    pub eps_mmse: Vec<bool>,
    pub alpha_unbiased: Vec<bool>,
    pub fraction_within_eps: Vec<f64>,
    pub mean_bias: Vec<f64>,
    pub gap: GapDiagnostic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub steps: Vec<StepVerdict>,
}

impl Verdict {
    pub fn at(&self, t: usize) -> &StepVerdict {
        &self.steps[t - 1]
    }

    pub fn last(&self) -> Option<&StepVerdict> {
        self.steps.last()
    }
}

/// Per-step, per-parameter classification.
///
/// A parameter is ε-unbiased (and ε-MMSE) at `t` when at least a fraction
/// `ρ` of runs have `|B*_i| ≤ ε_i`; α-unconditionally unbiased when
/// `|mean B*_i| ≤ α_i`, or when every run is within `ε_i`. The identifier is
/// ε-efficient when all parameters are ε-unbiased.
pub fn classify(
    mse: &MseSeries,
    bound: &BoundSeries,
    biases: &BiasRecord,
    tolerances: &Tolerances,
) -> Result<Verdict> {
    let q = bound.param_dim();
    tolerances.validate(q)?;
    if biases.horizon() != mse.horizon() {
        return Err(Error::Shape(format!(
            "bias covers {} steps, MSE covers {}",
            biases.horizon(),
            mse.horizon()
        )));
    }
    let gaps = psd_gap(mse, bound)?;
    let runs = biases.runs() as f64;
    let steps = gaps
        .into_iter()
        .map(|gap| {
            let k = gap.t - 1;
            let fraction_within_eps: Vec<f64> = (0..q)
                .map(|i| {
                    let within = biases
                        .per_run
                        .iter()
                        .filter(|r| r[k][i].abs() <= tolerances.epsilon[i])
                        .count();
                    within as f64 / runs
                })
                .collect();
            let mean_bias = biases.unconditional[k].clone();
            let eps_unbiased: Vec<bool> = fraction_within_eps
                .iter()
                .map(|f| *f >= tolerances.rho)
                .collect();
            let alpha_unbiased = (0..q)
                .map(|i| mean_bias[i].abs() <= tolerances.alpha[i] || fraction_within_eps[i] == 1.0)
                .collect();
            StepVerdict {
                t: gap.t,
                eps_efficient: eps_unbiased.iter().all(|v| *v),
                eps_mmse: eps_unbiased.clone(),
                eps_unbiased,
                alpha_unbiased,
                fraction_within_eps,
                mean_bias,
                gap,
            }
        })
        .collect();
    Ok(Verdict { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_runs(errors: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let truths = errors.iter().map(|_| vec![0.0]).collect();
        let est = errors.iter().map(|e| vec![vec![-e]]).collect();
        (truths, est)
    }

    #[test]
    fn mse_exact_cases() {
        let truths = vec![vec![0.7, 0.6], vec![0.5, 0.4]];
        let est = vec![vec![vec![0.7, 0.6]; 3], vec![vec![0.5, 0.4]; 3]];
        let p = mse_mc(&truths, &est).unwrap();
        for m in &p.matrices {
            assert_eq!(m, &DMatrix::zeros(2, 2));
        }
        let (t, e) = scalar_runs(&[0.3]);
        assert_relative_eq!(mse_mc(&t, &e).unwrap().at(1)[(0, 0)], 0.09, epsilon = 1e-15);
        let (t, e) = scalar_runs(&[0.3, -0.3]);
        assert_relative_eq!(mse_mc(&t, &e).unwrap().at(1)[(0, 0)], 0.09, epsilon = 1e-15);
    }

    #[test]
    fn mse_shape_mismatch() {
        let truths = vec![vec![0.0], vec![1.0]];
        let est = vec![vec![vec![0.0]]];
        assert!(matches!(mse_mc(&truths, &est), Err(Error::Shape(_))));
    }

    #[test]
    fn bias_cases() {
        let b = conditional_bias(&[vec![0.7]], &[vec![0.7]]).unwrap();
        assert_eq!(b, vec![vec![0.0]]);
        let b = conditional_bias(&[vec![0.7]], &[vec![0.69]]).unwrap();
        assert_relative_eq!(b[0][0], 0.01, epsilon = 1e-12);
        let b = conditional_bias(&[vec![0.7]], &[vec![0.75]]).unwrap();
        assert!(b[0][0] < 0.0);
    }

    fn series(q: usize, horizon: usize, value: f64) -> BoundSeries {
        BoundSeries {
            bounds: vec![DMatrix::identity(q, q) * value; horizon + 1],
            cond_jx: vec![1.0; horizon + 1],
            regularization_events: vec![0; horizon + 1],
        }
    }

    #[test]
    fn gap_cases() {
        let l = series(3, 2, 0.5);
        let equal = MseSeries {
            matrices: vec![DMatrix::identity(3, 3) * 0.5; 2],
            runs: 1,
        };
        for g in psd_gap(&equal, &l).unwrap() {
            assert_relative_eq!(g.trace_gap, 0.0);
            assert_relative_eq!(g.min_eigenvalue, 0.0);
        }
        let plus = MseSeries {
            matrices: vec![DMatrix::identity(3, 3) * 1.5; 2],
            runs: 1,
        };
        for g in psd_gap(&plus, &l).unwrap() {
            assert_relative_eq!(g.trace_gap, 3.0, epsilon = 1e-12);
            assert_relative_eq!(g.min_eigenvalue, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_bias_is_efficient() {
        let q = 4;
        let horizon = 5;
        let per_run = vec![vec![vec![0.0; q]; horizon]; 10];
        let biases = BiasRecord::new(per_run, "test").unwrap();
        let mse = MseSeries {
            matrices: vec![DMatrix::identity(q, q) * 0.01; horizon],
            runs: 10,
        };
        let v = classify(&mse, &series(q, horizon, 0.01), &biases, &Tolerances::defaults(q)).unwrap();
        for s in &v.steps {
            assert!(s.eps_efficient);
            assert!(s.eps_unbiased.iter().all(|b| *b));
            assert!(s.eps_mmse.iter().all(|b| *b));
            assert!(s.alpha_unbiased.iter().all(|b| *b));
        }
    }

    #[test]
    fn tolerance_validation() {
        let biases = BiasRecord::new(vec![vec![vec![0.0]]], "t").unwrap();
        let mse = MseSeries {
            matrices: vec![DMatrix::identity(1, 1)],
            runs: 1,
        };
        let bad = Tolerances::uniform(1, -1.0, 0.001, 0.7);
        assert!(classify(&mse, &series(1, 1, 1.0), &biases, &bad).is_err());
        let wrong_len = Tolerances::defaults(2);
        assert!(classify(&mse, &series(1, 1, 1.0), &biases, &wrong_len).is_err());
    }

    proptest! {
        #[test]
        fn mse_is_permutation_invariant(
            errs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 2..30),
            seed in any::<u64>(),
        ) {
            let truths: Vec<Vec<f64>> = errs.iter().map(|_| vec![0.0, 0.0]).collect();
            let est: Vec<Vec<Vec<f64>>> = errs.iter().map(|e| vec![e.clone(), vec![e[1], e[0]]]).collect();
            let a = mse_mc(&truths, &est).unwrap();
            let mut order: Vec<usize> = (0..errs.len()).collect();
            // Deterministic shuffle from the seed.
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let t2: Vec<_> = order.iter().map(|&i| truths[i].clone()).collect();
            let e2: Vec<_> = order.iter().map(|&i| est[i].clone()).collect();
            let b = mse_mc(&t2, &e2).unwrap();
            for (x, y) in a.matrices.iter().zip(&b.matrices) {
                for (u, v) in x.iter().zip(y.iter()) {
                    prop_assert_eq!(u.to_bits(), v.to_bits());
                }
                prop_assert!(min_eigenvalue(x) >= -1e-12);
            }
        }

        #[test]
        fn unconditional_bias_is_mean_and_flags_are_consistent(
            raw in prop::collection::vec(prop::collection::vec(-0.02f64..0.02, 3), 1..25),
        ) {
            let per_run: Vec<Vec<Vec<f64>>> = raw.iter().map(|b| vec![b.clone()]).collect();
            let rec = BiasRecord::new(per_run.clone(), "p").unwrap();
            for i in 0..3 {
                let mean = raw.iter().map(|b| b[i]).sum::<f64>() / raw.len() as f64;
                prop_assert!((rec.unconditional[0][i] - mean).abs() < 1e-15);
            }
            let mse = MseSeries { matrices: vec![DMatrix::identity(3, 3)], runs: raw.len() };
            let v = classify(&mse, &series(3, 1, 0.1), &rec, &Tolerances::defaults(3)).unwrap();
            let s = v.at(1);
            if s.eps_efficient {
                prop_assert!(s.eps_unbiased.iter().all(|b| *b));
                prop_assert!(s.eps_mmse.iter().all(|b| *b));
            }
            for i in 0..3 {
                if s.fraction_within_eps[i] == 1.0 {
                    prop_assert!(s.alpha_unbiased[i]);
                }
            }
        }
    }
}
