use nalgebra::DMatrix;
use pcrlb_core::analysis::{
    classify, conditional_bias, decomposition_check, mse_mc, BiasRecord, ConjugateToy, DecompositionEstimator,
    Tolerances,
};
use pcrlb_core::pcrlb::BoundSeries;
use pcrlb_core::rng::{self, Domain};
use pcrlb_core::smc::AdaSchedule;

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[test]
fn decomposition_holds_for_offset_estimator() {
    let toy = ConjugateToy::default();
    let est = DecompositionEstimator::ExactPosterior { offset: 0.1 };
    let check = decomposition_check(&toy, 10_000, 20, &est, 1).unwrap();
    assert!(check.max_z() < 5.0, "max z {}", check.max_z());
    for b in &check.mean_sq_bias {
        assert!((b - 0.01).abs() < 1e-12);
    }
}

#[test]
fn decomposition_residual_shrinks_as_inverse_root_m() {
    let toy = ConjugateToy::default();
    let est = DecompositionEstimator::ExactPosterior { offset: 0.1 };
    let sizes = [100usize, 1_000, 10_000];
    let reps = 40;
    let logs: Vec<f64> = sizes
        .iter()
        .map(|&m| {
            let mean: f64 = (0..reps)
                .map(|r| {
                    let seed = rng::substream_seed(2, Domain::Decomposition, (m * 1000 + r) as u64);
                    decomposition_check(&toy, m, 10, &est, seed).unwrap().mean_residual()
                })
                .sum::<f64>()
                / reps as f64;
            mean.ln()
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|m| (*m as f64).ln()).collect();
    let s = slope(&xs, &logs);
    assert!((s + 0.5).abs() <= 0.15, "slope {s}");
}

#[test]
fn decomposition_holds_for_particle_identifier() {
    let toy = ConjugateToy::default();
    let est = DecompositionEstimator::Smc {
        particles: 300,
        schedule: AdaSchedule::default(),
    };
    let check = decomposition_check(&toy, 400, 10, &est, 5).unwrap();
    assert!(check.max_z() < 5.0, "max z {}", check.max_z());
}

#[test]
fn oracle_identifier_is_classified_efficient() {
    let toy = ConjugateToy::default();
    let runs = 200;
    let horizon = 25;
    let mut truths = Vec::new();
    let mut estimates = Vec::new();
    let mut biases = Vec::new();
    for j in 0..runs {
        let mut rng = rng::substream(12, Domain::Decomposition, j);
        let (theta, ys) = toy.sample(horizon, &mut rng);
        let post: Vec<Vec<f64>> = toy.posterior(&ys)[1..].iter().map(|(m, _)| vec![*m]).collect();
        biases.push(conditional_bias(&post, &post).unwrap());
        truths.push(vec![theta]);
        estimates.push(post);
    }
    let mse = mse_mc(&truths, &estimates).unwrap();
    let record = BiasRecord::new(biases, "closed-form").unwrap();
    let bound = BoundSeries {
        bounds: toy
            .posterior(&vec![0.0; horizon])
            .iter()
            .map(|(_, v)| DMatrix::from_element(1, 1, *v))
            .collect(),
        cond_jx: vec![1.0; horizon + 1],
        regularization_events: vec![0; horizon + 1],
    };
    let verdict = classify(&mse, &bound, &record, &Tolerances::defaults(1)).unwrap();
    for step in &verdict.steps {
        assert!(step.eps_efficient && step.eps_mmse[0] && step.alpha_unbiased[0]);
        assert_eq!(step.fraction_within_eps[0], 1.0);
    }
}
