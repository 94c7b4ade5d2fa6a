//! The coordinate network mapping (position, view direction) to (color, density).
//!
//! Trunk: positional encoding of the normalized position followed by `depth`
//! dense layers, the encoding re-injected at the skip layer. Density comes from
//! a softplus head on the trunk alone; color from a sigmoid head after the
//! encoded view direction is concatenated to a linear feature layer, so density
//! can never depend on direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{dense_backward, dense_forward, sigmoid, softplus, Activation, Gradients, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    pub width: usize,
    pub depth: usize,
    /// Trunk layer whose input gets the position encoding appended; 0 disables.
    pub skip: usize,
    pub activation: Activation,
    /// Initial bias of the density head (pre-softplus).
    pub density_bias: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            l_pos: 10,
            l_dir: 4,
            width: 128,
            depth: 4,
            skip: 2,
            activation: Activation::Relu,
            density_bias: 0.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("field config: {m}")));
        if self.l_pos < 1 {
            return bad("l_pos must be >= 1");
        }
        if self.width < 8 {
            return bad("width must be >= 8");
        }
        if self.depth < 2 {
            return bad("depth must be >= 2");
        }
        if self.skip >= self.depth {
            return bad("skip must be < depth");
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        6 * self.l_pos
    }

    pub fn dir_dim(&self) -> usize {
        6 * self.l_dir
    }
}

/// `sin(2^j π v), cos(2^j π v)` for `j = 0..L`, each block spanning all components.
pub fn positional_encode(v: &[f64], levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * v.len() * levels];
    encode_into(v, levels, &mut out);
    out
}

fn encode_into<T: Real>(v: &[f64], levels: usize, out: &mut [T]) {
    let k = v.len();
    let mut freq = std::f64::consts::PI;
    for j in 0..levels {
        let base = 2 * k * j;
        for (i, &x) in v.iter().enumerate() {
            let (s, c) = (freq * x).sin_cos();
            out[base + i] = T::of(s);
            out[base + k + i] = T::of(c);
        }
        freq *= 2.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Parameter layout of a network built from a [`FieldConfig`].
#[derive(Debug, Clone)]
pub struct Field {
    pub cfg: FieldConfig,
    trunk: Vec<Layer>,
    sigma: Layer,
    feature: Layer,
    color_hidden: Layer,
    color_out: Layer,
}

/// Encoded inputs for a batch of samples, row-major.
#[derive(Debug, Clone, Default)]
pub struct FieldInputs<T> {
    pub rows: usize,
    pub pos: Vec<T>,
    pub dir: Vec<T>,
}

impl<T: Real> FieldInputs<T> {
    pub fn with_capacity(cfg: &FieldConfig, rows: usize) -> Self {
        Self {
            rows: 0,
            pos: Vec::with_capacity(rows * cfg.pos_dim()),
            dir: Vec::with_capacity(rows * cfg.dir_dim()),
        }
    }

    /// Appends one sample: normalized position and unit view direction.
    pub fn push(&mut self, cfg: &FieldConfig, pos: [f64; 3], dir_encoded: &[T]) {
        let n = self.pos.len();
        self.pos.resize(n + cfg.pos_dim(), T::zero());
        encode_into(&pos, cfg.l_pos, &mut self.pos[n..]);
        self.dir.extend_from_slice(dir_encoded);
        self.rows += 1;
    }
}

pub fn encode_direction<T: Real>(cfg: &FieldConfig, dir: [f64; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); cfg.dir_dim()];
    encode_into(&dir, cfg.l_dir, &mut out);
    out
}

/// Batched network outputs: `sigma[i]`, `rgb[3i..3i+3]`.
#[derive(Debug, Clone, Default)]
pub struct FieldBatch<T> {
    pub sigma: Vec<T>,
    pub rgb: Vec<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct FieldCache<T> {
    layer_in: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    hidden: Vec<T>,
    sigma_raw: Vec<T>,
    color_in: Vec<T>,
    color_pre: Vec<T>,
    color_act: Vec<T>,
}

fn check_finite<T: Real>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Field {
    pub fn new(cfg: FieldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut next = 0usize;
        let mut layer = |fan_in, fan_out| {
            let l = Layer { w: next, b: next + 1, fan_in, fan_out };
            next += 2;
            l
        };
        let (pd, dd, w) = (cfg.pos_dim(), cfg.dir_dim(), cfg.width);
        let trunk = (0..cfg.depth)
            .map(|i| {
                let fan_in = if i == 0 {
                    pd
                } else if cfg.skip > 0 && i == cfg.skip {
                    w + pd
                } else {
                    w
                };
                layer(fan_in, w)
            })
            .collect();
        let sigma = layer(w, 1);
        let feature = layer(w, w);
        let color_hidden = layer(w + dd, w / 2);
        let color_out = layer(w / 2, 3);
        Ok(Self { cfg, trunk, sigma, feature, color_hidden, color_out })
    }

    fn layers(&self) -> Vec<(String, Layer)> {
        let mut v: Vec<(String, Layer)> =
            self.trunk.iter().enumerate().map(|(i, l)| (format!("trunk{i}"), *l)).collect();
        v.push(("sigma".into(), self.sigma));
        v.push(("feature".into(), self.feature));
        v.push(("color_hidden".into(), self.color_hidden));
        v.push(("color_out".into(), self.color_out));
        v
    }

    /// All weights and biases zero.
    pub fn zero_params<T: Real>(&self) -> ParamStore<T> {
        let mut s = ParamStore::default();
        for (name, l) in self.layers() {
            s.push(format!("{name}.w"), vec![l.fan_in, l.fan_out], vec![T::zero(); l.fan_in * l.fan_out]);
            s.push(format!("{name}.b"), vec![l.fan_out], vec![T::zero(); l.fan_out]);
        }
        s
    }

    /// Uniform fan-in initialization, zero biases, density bias from the config.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = self.zero_params::<T>();
        for (name, l) in self.layers() {
            let gain = if name.starts_with("trunk") || name == "color_hidden" { 6.0 } else { 3.0 };
            let bound = (gain / l.fan_in as f64).sqrt();
            for w in &mut s.params[l.w].value {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        s.params[self.sigma.b].value[0] = T::of(self.cfg.density_bias);
        s
    }

    /// Checks that `params` has this network's layout.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let layers = self.layers();
        if params.params.len() != layers.len() * 2 {
            return Err(Error::ShapeMismatch("parameter count does not match field config".into()));
        }
        for (name, l) in layers {
            let w = &params.params[l.w];
            let b = &params.params[l.b];
            if w.name != format!("{name}.w") || w.shape != [l.fan_in, l.fan_out] || b.shape != [l.fan_out] {
                return Err(Error::ShapeMismatch(format!("layer {name} does not match field config")));
            }
        }
        Ok(())
    }

    fn run_layer<T: Real>(&self, params: &ParamStore<T>, l: Layer, x: &[T], rows: usize) -> Vec<T> {
        let mut y = vec![T::zero(); rows * l.fan_out];
        dense_forward(x, rows, &params.params[l.w].value, &params.params[l.b].value, l.fan_in, l.fan_out, &mut y);
        y
    }

    /// Forward pass over a batch. The cache is only built when `keep` is set.
    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        inputs: &FieldInputs<T>,
        keep: bool,
    ) -> Result<(FieldBatch<T>, Option<FieldCache<T>>)> {
        let rows = inputs.rows;
        let (pd, dd, w) = (self.cfg.pos_dim(), self.cfg.dir_dim(), self.cfg.width);
        let mut cache = FieldCache::default();
        let mut h: Vec<T> = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            let input: Vec<T> = if i == 0 {
                inputs.pos.clone()
            } else if self.cfg.skip > 0 && i == self.cfg.skip {
                let mut cat = Vec::with_capacity(rows * (w + pd));
                for r in 0..rows {
                    cat.extend_from_slice(&h[r * w..(r + 1) * w]);
                    cat.extend_from_slice(&inputs.pos[r * pd..(r + 1) * pd]);
                }
                cat
            } else {
                std::mem::take(&mut h)
            };
            let pre = self.run_layer(params, *l, &input, rows);
            check_finite(&pre, &format!("trunk layer {i}"))?;
            let mut act = vec![T::zero(); pre.len()];
            self.cfg.activation.apply(&pre, &mut act);
            if keep {
                cache.layer_in.push(input);
                cache.pre.push(pre);
            }
            h = act;
        }
        let sigma_raw = self.run_layer(params, self.sigma, &h, rows);
        check_finite(&sigma_raw, "density head")?;
        let feature = self.run_layer(params, self.feature, &h, rows);
        let mut color_in = Vec::with_capacity(rows * (w + dd));
        for r in 0..rows {
            color_in.extend_from_slice(&feature[r * w..(r + 1) * w]);
            color_in.extend_from_slice(&inputs.dir[r * dd..(r + 1) * dd]);
        }
        let color_pre = self.run_layer(params, self.color_hidden, &color_in, rows);
        check_finite(&color_pre, "color hidden layer")?;
        let mut color_act = vec![T::zero(); color_pre.len()];
        self.cfg.activation.apply(&color_pre, &mut color_act);
        let color_raw = self.run_layer(params, self.color_out, &color_act, rows);
        check_finite(&color_raw, "color head")?;
        let out = FieldBatch {
            sigma: sigma_raw.iter().map(|&x| softplus(x)).collect(),
            rgb: color_raw.iter().map(|&x| sigmoid(x)).collect(),
        };
        if keep {
            cache.hidden = h;
            cache.sigma_raw = sigma_raw;
            cache.color_in = color_in;
            cache.color_pre = color_pre;
            cache.color_act = color_act;
            Ok((out, Some(cache)))
        } else {
            Ok((out, None))
        }
    }

    /// Accumulates parameter gradients given `d_sigma` (per row) and `d_rgb` (3 per row).
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        out: &FieldBatch<T>,
        cache: &FieldCache<T>,
        d_sigma: &[T],
        d_rgb: &[T],
        grads: &mut Gradients<T>,
    ) {
        let rows = d_sigma.len();
        let (pd, dd, w) = (self.cfg.pos_dim(), self.cfg.dir_dim(), self.cfg.width);
        let p = |l: usize| &params.params[l].value;

        let d_color_raw: Vec<T> =
            d_rgb.iter().zip(&out.rgb).map(|(&d, &c)| d * c * (T::one() - c)).collect();
        let l = self.color_out;
        let mut d_color_act = vec![T::zero(); rows * l.fan_in];
        self.backward_layer(l, &cache.color_act, rows, p(l.w), &d_color_raw, grads, Some(&mut d_color_act));
        self.cfg.activation.backward(&cache.color_pre, &mut d_color_act);
        let l = self.color_hidden;
        let mut d_color_in = vec![T::zero(); rows * l.fan_in];
        self.backward_layer(l, &cache.color_in, rows, p(l.w), &d_color_act, grads, Some(&mut d_color_in));
        let d_feature: Vec<T> = d_color_in.chunks_exact(w + dd).flat_map(|r| r[..w].iter().copied()).collect();

        let l = self.feature;
        let mut dh = vec![T::zero(); rows * w];
        self.backward_layer(l, &cache.hidden, rows, p(l.w), &d_feature, grads, Some(&mut dh));

        let d_sigma_raw: Vec<T> =
            d_sigma.iter().zip(&cache.sigma_raw).map(|(&d, &raw)| d * sigmoid(raw)).collect();
        let l = self.sigma;
        let mut dh_sigma = vec![T::zero(); rows * w];
        self.backward_layer(l, &cache.hidden, rows, p(l.w), &d_sigma_raw, grads, Some(&mut dh_sigma));
        for (a, b) in dh.iter_mut().zip(dh_sigma) {
            *a = *a + b;
        }

        for i in (0..self.trunk.len()).rev() {
            let l = self.trunk[i];
            self.cfg.activation.backward(&cache.pre[i], &mut dh);
            if i == 0 {
                self.backward_layer(l, &cache.layer_in[i], rows, p(l.w), &dh, grads, None);
                break;
            }
            let mut dx = vec![T::zero(); rows * l.fan_in];
            self.backward_layer(l, &cache.layer_in[i], rows, p(l.w), &dh, grads, Some(&mut dx));
            dh = if self.cfg.skip > 0 && i == self.cfg.skip {
                dx.chunks_exact(w + pd).flat_map(|r| r[..w].iter().copied()).collect()
            } else {
                dx
            };
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer<T: Real>(
        &self,
        l: Layer,
        x: &[T],
        rows: usize,
        w: &[T],
        dy: &[T],
        grads: &mut Gradients<T>,
        dx: Option<&mut [T]>,
    ) {
        let (gw, gb) = if l.w < l.b {
            let (a, b) = grads.0.split_at_mut(l.b);
            (&mut a[l.w], &mut b[0])
        } else {
            unreachable!("weights precede biases")
        };
        dense_backward(x, rows, w, l.fan_in, l.fan_out, dy, gw, gb, dx);
    }
}

/// Single-sample evaluation at a normalized position and unit direction.
pub fn field_eval<T: Real>(field: &Field, params: &ParamStore<T>, x: [f64; 3], d: [f64; 3]) -> Result<FieldOutput> {
    let mut inputs = FieldInputs::with_capacity(&field.cfg, 1);
    let dir = encode_direction::<T>(&field.cfg, d);
    inputs.push(&field.cfg, x, &dir);
    let (out, _) = field.forward(params, &inputs, false)?;
    Ok(FieldOutput {
        rgb: [out.rgb[0].f64(), out.rgb[1].f64(), out.rgb[2].f64()],
        sigma: out.sigma[0].f64(),
    })
}
