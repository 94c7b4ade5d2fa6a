#![allow(dead_code)]

use spsnerf::autodiff::pipeline::{forward_backward, LossSpec, PreparedRay};
use spsnerf::autodiff::{Activation, ParamStore};
use spsnerf::field::{Field, FieldConfig};
use spsnerf::geometry::{Ray, SceneEnvelope, Vec3};
use spsnerf::sampler::{merge_groups, ray_rng, stratified_samples};
use spsnerf::supervision::{DepthPrior, LossWeights, Reduction};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn envelope() -> SceneEnvelope {
    SceneEnvelope::new(Vec3::new(-50.0, -50.0, 0.0), Vec3::new(50.0, 50.0, 40.0), 2.0).unwrap()
}

pub fn small_field(activation: Activation) -> Field {
    Field::new(FieldConfig { l_pos: 3, l_dir: 1, width: 16, depth: 2, skip: 0, activation, density_bias: 0.5 }).unwrap()
}

/// Downward ray from a high, slightly oblique eye, clipped to the envelope.
pub fn random_ray(env: &SceneEnvelope, rng: &mut ChaCha8Rng) -> Ray {
    let target = Vec3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(0.0..40.0));
    let eye = target + Vec3::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0), 600.0);
    let dir = (target - eye).normalize();
    let (near, far) = env.intersect(&eye, &dir).unwrap();
    Ray { origin: eye, dir, near, far }
}

/// Rays with `n_samples` stratified samples each. Priors alternate between
/// absent, confident and uncertain so every depth-loss path is exercised.
pub fn random_batch(env: &SceneEnvelope, n_rays: usize, n_samples: usize, seed: u64) -> Vec<PreparedRay> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_rays)
        .map(|i| {
            let ray = random_ray(env, &mut rng);
            let t = stratified_samples(&ray, n_samples, &mut ray_rng(seed, i as u64));
            let samples = merge_groups(&ray, t, Vec::new());
            let depth = rng.random_range(ray.near..ray.far);
            let prior = match i % 3 {
                0 => None,
                1 => Some(DepthPrior { depth, corr: rng.random_range(0.7..1.0), valid: true }),
                _ => Some(DepthPrior { depth, corr: rng.random_range(0.0..0.5), valid: true }),
            };
            PreparedRay { ray, samples, target: [rng.random(), rng.random(), rng.random()], prior }
        })
        .collect()
}

pub fn spec(depth_scale: f64) -> LossSpec {
    LossSpec {
        weights: LossWeights { lambda: 0.7, gamma: 1.0, m: 1e-4 },
        weight_power: 1,
        reduction: Reduction::Mean,
        depth_scale,
    }
}

/// Largest relative error between analytic and central-difference gradients,
/// over all parameters: `|g - g_fd| / max(|g_fd|, floor)` with the floor set
/// to 1e-3 of the gradient's largest magnitude.
pub fn gradient_check(field: &Field, params: &ParamStore<f64>, env: &SceneEnvelope, batch: &[PreparedRay], spec: &LossSpec, h: f64) -> (f64, usize) {
    let mut p = params.clone();
    forward_backward(field, &mut p, env, batch, spec).unwrap();
    let analytic = p.flat_grads();
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let mut q = params.clone();
        let x = *q.flat_value_mut(i);
        *q.flat_value_mut(i) = x + h;
        let up = forward_backward(field, &mut q, env, batch, spec).unwrap().total;
        *q.flat_value_mut(i) = x - h;
        let down = forward_backward(field, &mut q, env, batch, spec).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1e-3 * scale);
        worst = worst.max(err);
    }
    (worst, analytic.len())
}
