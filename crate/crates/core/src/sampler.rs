//! Sample placement along rays: a stratified group over the whole envelope
//! segment plus a guided group drawn around a depth estimate.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::Ray;

/// Spacing given to the last sample so it can absorb the remaining transmittance.
pub const FAR_SENTINEL: f64 = 1e10;
/// Separation applied to coincident depths.
pub const DUP_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleGroup {
    Stratified,
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Gaussian along the ray, in the same units as the ray parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthGuide {
    pub mean: f64,
    pub std: f64,
}

/// Strictly increasing depths in `[near, far]` with their spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub group: Vec<SampleGroup>,
}

impl RaySampleSet {
    /// Sorts, separates duplicates and computes spacings.
    pub fn build(ray: &Ray, mut tagged: Vec<(f64, SampleGroup)>) -> RaySampleSet {
        tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = tagged.len();
        for i in 1..n {
            if tagged[i].0 <= tagged[i - 1].0 {
                tagged[i].0 = tagged[i - 1].0 + DUP_JITTER;
            }
        }
        if n > 0 && tagged[n - 1].0 > ray.far {
            tagged[n - 1].0 = ray.far;
            for i in (0..n - 1).rev() {
                if tagged[i].0 >= tagged[i + 1].0 {
                    tagged[i].0 = tagged[i + 1].0 - DUP_JITTER;
                }
            }
        }
        let t: Vec<f64> = tagged.iter().map(|s| s.0).collect();
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        if n > 0 {
            delta.push(FAR_SENTINEL);
        }
        RaySampleSet { t, delta, group: tagged.into_iter().map(|s| s.1).collect() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Counter-based per-ray stream: the same `(seed, stream)` always yields the same draws.
pub fn ray_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// One uniform draw in each of `n` equal bins of `[near, far]`.
pub fn stratified_samples<R: RngCore + ?Sized>(ray: &Ray, n: usize, rng: &mut R) -> Vec<f64> {
    let width = (ray.far - ray.near) / n as f64;
    (0..n)
        .map(|i| {
            let u: f64 = rng.random();
            (ray.near + (i as f64 + u) * width).min(ray.far)
        })
        .collect()
}

/// `n` draws from `N(mean, std²)`, clipped to `[near, far]`, sorted.
pub fn guided_samples<R: RngCore + ?Sized>(ray: &Ray, n: usize, mean: f64, std: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (mean + std * z).clamp(ray.near, ray.far)
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Inverse-CDF resampling from coarse compositing weights (the hierarchical
/// baseline). Bins span midpoints between coarse samples.
pub fn importance_samples<R: RngCore + ?Sized>(
    ray: &Ray,
    coarse_t: &[f64],
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let m = coarse_t.len();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(ray.near);
    edges.extend(coarse_t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(ray.far);
    let pdf: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p / total;
        cdf.push(acc);
    }
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).clamp(1, m) - 1;
            let span = cdf[k + 1] - cdf[k];
            let frac = if span > 0.0 { (u - cdf[k]) / span } else { 0.5 };
            (edges[k] + frac * (edges[k + 1] - edges[k])).clamp(ray.near, ray.far)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Stratified group of `n1` merged with a guided group of `n2`.
///
/// The guide is the prior in train mode when one is given, otherwise the
/// predicted depth/spread.
#[allow(clippy::too_many_arguments)]
pub fn two_group_samples<R: RngCore + ?Sized>(
    ray: &Ray,
    n1: usize,
    n2: usize,
    prior: Option<DepthGuide>,
    predicted: Option<DepthGuide>,
    mode: Mode,
    rng: &mut R,
) -> Result<RaySampleSet> {
    let strat = stratified_samples(ray, n1, rng);
    let center = match (mode, prior) {
        (Mode::Train, Some(p)) => Some(p),
        _ => predicted,
    };
    let guided = if n2 > 0 {
        let c = center.ok_or(Error::NoGuideCenter)?;
        guided_samples(ray, n2, c.mean, c.std, rng)
    } else {
        Vec::new()
    };
    Ok(merge_groups(ray, strat, guided))
}

pub fn merge_groups(ray: &Ray, stratified: Vec<f64>, guided: Vec<f64>) -> RaySampleSet {
    let tagged = stratified
        .into_iter()
        .map(|t| (t, SampleGroup::Stratified))
        .chain(guided.into_iter().map(|t| (t, SampleGroup::Guided)))
        .collect();
    RaySampleSet::build(ray, tagged)
}
