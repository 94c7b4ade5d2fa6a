//! Differentiable alpha compositing of color, depth and depth spread.
//!
//! `α_i = 1 - exp(-σ_i δ_i)`, `T_i = Π_{j<i} (1 - α_j)`, `w_i = T_i α_i`;
//! `C = Σ w_i c_i`, `D = Σ w_i t_i`, `S² = Σ w_i (t_i - D)²`.
//!
//! Depths are handled relative to the first sample so that single precision
//! keeps sub-millimetre resolution on rays that start kilometres from the
//! camera. No background term is added.

use crate::autodiff::Real;
use crate::field::FieldOutput;
use crate::sampler::RaySampleSet;

/// Floor applied to `S²` before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub fn alpha(sigma: f64, delta: f64) -> f64 {
    -(-sigma * delta).exp_m1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult<T> {
    pub color: [T; 3],
    /// Expected termination depth, in ray-parameter units.
    pub depth: f64,
    /// Standard deviation of the termination depth.
    pub std: T,
    pub weights: Vec<T>,
    /// `A = Σ w_i`.
    pub opacity: T,
    transmittance: Vec<T>,
    residual: T,
    t_ref: f64,
    t_rel: Vec<T>,
    variance: T,
}

impl<T: Real> RenderResult<T> {
    /// Transmittance reaching sample `i` (`T_1 = 1`).
    pub fn transmittance(&self, i: usize) -> T {
        self.transmittance[i]
    }

    /// Transmittance left after the last sample.
    pub fn residual(&self) -> T {
        self.residual
    }
}

/// Composites one ray. `rgb` holds three values per sample.
pub fn composite_raw<T: Real>(t: &[f64], delta: &[f64], sigma: &[T], rgb: &[T]) -> RenderResult<T> {
    let n = t.len();
    assert!(delta.len() == n && sigma.len() == n && rgb.len() == 3 * n, "composite input lengths");
    let t_ref = t.first().copied().unwrap_or(0.0);
    let t_rel: Vec<T> = t.iter().map(|&v| T::of(v - t_ref)).collect();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    let mut opacity = T::zero();
    let mut d_rel = T::zero();
    for i in 0..n {
        let tau = sigma[i] * T::of(delta[i]);
        let a = -(-tau).exp_m1();
        let w = trans * a;
        transmittance.push(trans);
        weights.push(w);
        for (c, v) in color.iter_mut().zip(&rgb[3 * i..3 * i + 3]) {
            *c = *c + w * *v;
        }
        opacity = opacity + w;
        d_rel = d_rel + w * t_rel[i];
        trans = trans * (-tau).exp();
    }
    let residual = trans;
    let depth = t_ref * opacity.f64() + d_rel.f64();
    // t_i - D = t_rel_i - d_rel + (1 - A) t_ref, with 1 - A taken as the residual.
    let offset = d_rel - residual * T::of(t_ref);
    let variance = weights
        .iter()
        .zip(&t_rel)
        .map(|(&w, &tr)| {
            let dev = tr - offset;
            w * dev * dev
        })
        .sum::<T>();
    let std = variance.max(T::of(VARIANCE_FLOOR)).sqrt();
    RenderResult { color, depth, std, weights, opacity, transmittance, residual, t_ref, t_rel, variance }
}

/// Composites a sample set against per-sample field outputs.
pub fn composite(samples: &RaySampleSet, outputs: &[FieldOutput]) -> RenderResult<f64> {
    let sigma: Vec<f64> = outputs.iter().map(|o| o.sigma).collect();
    let rgb: Vec<f64> = outputs.iter().flat_map(|o| o.rgb).collect();
    composite_raw(&samples.t, &samples.delta, &sigma, &rgb)
}

/// Upstream gradients of a scalar loss with respect to `(C, D, S)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderGrad<T> {
    pub color: [T; 3],
    pub depth: T,
    pub std: T,
}

impl<T: Real> RenderGrad<T> {
    pub fn zero() -> Self {
        Self { color: [T::zero(); 3], depth: T::zero(), std: T::zero() }
    }
}

/// Backward rule of [`composite_raw`]: writes `∂L/∂σ_i` into `d_sigma` and
/// `∂L/∂c_i` into `d_rgb` (both overwritten).
pub fn composite_backward<T: Real>(
    r: &RenderResult<T>,
    delta: &[f64],
    rgb: &[T],
    up: &RenderGrad<T>,
    d_sigma: &mut [T],
    d_rgb: &mut [T],
) {
    let n = r.weights.len();
    let t_ref = T::of(r.t_ref);
    let offset = r.t_rel.iter().zip(&r.weights).map(|(&tr, &w)| w * tr).sum::<T>() - r.residual * t_ref;
    let d_var = if r.variance > T::of(VARIANCE_FLOOR) {
        up.std / (T::of(2.0) * r.std)
    } else {
        T::zero()
    };
    // Σ_k w_k (t_k - D) = D (1 - A); D ≈ t_ref + offset.
    let q = (t_ref + offset) * r.residual;
    let two = T::of(2.0);
    // g_i = ∂L/∂w_i minus the part that is the same for every sample.
    let g: Vec<T> = (0..n)
        .map(|i| {
            let c = &rgb[3 * i..3 * i + 3];
            let dev = r.t_rel[i] - offset;
            up.color[0] * c[0]
                + up.color[1] * c[1]
                + up.color[2] * c[2]
                + up.depth * r.t_rel[i]
                + d_var * (dev * dev - two * r.t_rel[i] * q)
        })
        .collect();
    let constant = up.depth * t_ref - d_var * two * t_ref * q;
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        let next_trans = if k + 1 < n { r.transmittance[k + 1] } else { r.residual };
        let dk = T::of(delta[k]);
        d_sigma[k] = dk * (g[k] * next_trans - suffix + constant * r.residual);
        suffix = suffix + g[k] * r.weights[k];
        for j in 0..3 {
            d_rgb[3 * k + j] = r.weights[k] * up.color[j];
        }
    }
}
