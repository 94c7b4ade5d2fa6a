//! Forward and backward passes for a batch of sampled rays:
//! field → compositing → losses, and back.

use crate::autodiff::{Gradients, ParamStore, Real};
use crate::error::{Error, Result};
use crate::field::{encode_direction, Field, FieldInputs};
use crate::geometry::{Ray, SceneEnvelope};
use crate::par;
use crate::renderer::{composite_backward, composite_raw, RenderGrad, RenderResult};
use crate::sampler::RaySampleSet;
use crate::supervision::{prior_uncertainty, DepthPrior, DepthTerm, LossWeights, Reduction};

/// Rays per work unit. Fixed so results do not depend on the thread count.
pub const RAY_CHUNK: usize = 32;

/// A ray with its final sample set and supervision targets.
#[derive(Debug, Clone)]
pub struct PreparedRay {
    pub ray: Ray,
    pub samples: RaySampleSet,
    pub target: [f64; 3],
    /// Effective prior (variant adjustments already applied); `None` or
    /// invalid disables the depth term for this ray.
    pub prior: Option<DepthPrior>,
}

/// How losses are formed from rendered quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weights: LossWeights,
    /// Exponent on the correlation weight of the depth loss.
    pub weight_power: u32,
    pub reduction: Reduction,
    /// Meters per loss unit: depths, spreads and priors are divided by this
    /// before `Σ`, the active-set test and the depth loss.
    pub depth_scale: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub color: f64,
    pub depth: f64,
    pub total: f64,
    /// Rays whose depth term was active.
    pub active: usize,
}

impl LossParts {
    fn add(self, o: LossParts) -> LossParts {
        LossParts {
            color: self.color + o.color,
            depth: self.depth + o.depth,
            total: self.total + o.total,
            active: self.active + o.active,
        }
    }
}

fn build_inputs<T: Real>(field: &Field, envelope: &SceneEnvelope, rays: &[(&Ray, &RaySampleSet)]) -> FieldInputs<T> {
    let total: usize = rays.iter().map(|(_, s)| s.len()).sum();
    let mut inputs = FieldInputs::with_capacity(&field.cfg, total);
    for (ray, samples) in rays {
        let dir = encode_direction::<T>(&field.cfg, [ray.dir.x, ray.dir.y, ray.dir.z]);
        for &t in &samples.t {
            inputs.push(&field.cfg, envelope.normalize(&ray.at(t)), &dir);
        }
    }
    inputs
}

/// Depth term for one rendered ray, in loss units.
pub fn depth_term(spec: &LossSpec, prior: &DepthPrior, depth: f64, std: f64) -> DepthTerm {
    let s = spec.depth_scale;
    DepthTerm {
        depth: depth / s,
        prior: prior.depth / s,
        corr: prior.corr,
        std: std / s,
        sigma: prior_uncertainty(prior.corr, spec.weights.gamma, spec.weights.m),
        valid: prior.valid,
    }
}

/// Renders rays without building gradients.
pub fn forward_only<T: Real>(
    field: &Field,
    params: &ParamStore<T>,
    envelope: &SceneEnvelope,
    rays: &[Ray],
    samples: &[RaySampleSet],
) -> Result<Vec<RenderResult<T>>> {
    assert_eq!(rays.len(), samples.len());
    let idx: Vec<usize> = (0..rays.len()).collect();
    let parts = par::map_chunks(&idx, RAY_CHUNK, |_, chunk| -> Result<Vec<RenderResult<T>>> {
        let pairs: Vec<(&Ray, &RaySampleSet)> = chunk.iter().map(|&i| (&rays[i], &samples[i])).collect();
        let inputs = build_inputs::<T>(field, envelope, &pairs);
        let (out, _) = field.forward(params, &inputs, false)?;
        let mut off = 0;
        Ok(pairs
            .iter()
            .map(|(_, s)| {
                let n = s.len();
                let r = composite_raw(&s.t, &s.delta, &out.sigma[off..off + n], &out.rgb[3 * off..3 * (off + n)]);
                off += n;
                r
            })
            .collect())
    });
    let mut all = Vec::with_capacity(rays.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Loss over the batch and its exact gradient with respect to every
/// parameter, written into `params`' gradient buffers. Sample positions are
/// treated as constants.
pub fn forward_backward<T: Real>(
    field: &Field,
    params: &mut ParamStore<T>,
    envelope: &SceneEnvelope,
    batch: &[PreparedRay],
    spec: &LossSpec,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty ray batch".into()));
    }
    let norm = match spec.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.len() as f64,
    };
    let lambda = spec.weights.lambda;
    let frozen: &ParamStore<T> = params;
    let parts = par::map_chunks(batch, RAY_CHUNK, |_, chunk| -> Result<(LossParts, Gradients<T>)> {
        let pairs: Vec<(&Ray, &RaySampleSet)> = chunk.iter().map(|r| (&r.ray, &r.samples)).collect();
        let inputs = build_inputs::<T>(field, envelope, &pairs);
        let (out, cache) = field.forward(frozen, &inputs, true)?;
        let cache = cache.expect("cache requested");
        let rows = inputs.rows;
        let mut d_sigma = vec![T::zero(); rows];
        let mut d_rgb = vec![T::zero(); 3 * rows];
        let mut loss = LossParts::default();
        let mut off = 0;
        for pr in chunk {
            let s = &pr.samples;
            let n = s.len();
            let rgb = &out.rgb[3 * off..3 * (off + n)];
            let r = composite_raw(&s.t, &s.delta, &out.sigma[off..off + n], rgb);
            let mut up = RenderGrad::zero();
            let mut color = 0.0;
            for (j, g) in up.color.iter_mut().enumerate() {
                let e = r.color[j].f64() - pr.target[j];
                color += e * e;
                *g = T::of(2.0 * e * norm);
            }
            let mut depth = 0.0;
            if let Some(prior) = pr.prior.filter(|p| p.valid) {
                let term = depth_term(spec, &prior, r.depth, r.std.f64());
                depth = term.loss(spec.weight_power);
                if term.active() {
                    loss.active += 1;
                    up.depth = T::of(lambda * norm * term.grad(spec.weight_power) / spec.depth_scale);
                }
            }
            loss.color += color * norm;
            loss.depth += depth * norm;
            composite_backward(&r, &s.delta, rgb, &up, &mut d_sigma[off..off + n], &mut d_rgb[3 * off..3 * (off + n)]);
            off += n;
        }
        loss.total = loss.color + lambda * loss.depth;
        let mut grads = frozen.new_gradients();
        field.backward(frozen, &out, &cache, &d_sigma, &d_rgb, &mut grads);
        Ok((loss, grads))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let (loss, grads) = par::tree_reduce(parts, |a, b| (a.0.add(b.0), a.1.add(b.1))).expect("non-empty batch");
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (color {}, depth {})",
            loss.color, loss.depth
        )));
    }
    params.set_gradients(grads);
    Ok(loss)
}
