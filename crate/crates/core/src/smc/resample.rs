use rand::Rng;

use super::ParticleCloud;

/// Offspring indices of systematic resampling for normalized `weights` and
/// the single uniform offset `u0 ∈ [0, 1)`: stratum `k` selects the particle
/// whose cumulative weight first exceeds `(u0 + k) / N`.
pub fn systematic_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let count = weights.len();
    let step = 1.0 / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..count {
        let point = (u0 + k as f64) * step;
        while point >= cumulative && i + 1 < count {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

/// Replaces the cloud by `N` systematically resampled offspring with
/// uniform weights.
pub fn resample_systematic<R: Rng + ?Sized>(cloud: &mut ParticleCloud, rng: &mut R) {
    let u0: f64 = rng.random();
    let weights = cloud.weights();
    let indices = systematic_indices(&weights, u0);
    let width = cloud.width();
    let mut next = Vec::with_capacity(cloud.particles.len());
    for &i in &indices {
        next.extend_from_slice(&cloud.particles[i * width..(i + 1) * width]);
    }
    cloud.particles = next;
    let uniform = -(cloud.len() as f64).ln();
    cloud.log_weights.iter_mut().for_each(|l| *l = uniform);
    cloud.ess = cloud.len() as f64;
}
