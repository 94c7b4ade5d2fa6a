//! Optimization loop: ray batches with attached priors, per-variant sample
//! placement, forward/backward, Adam, logging and checkpoints. Also hosts
//! test-time rendering, which shares the sampling rules.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::pipeline::{forward_backward, forward_only, LossParts, LossSpec, PreparedRay};
use crate::autodiff::{adam_step, Activation, AdamConfig, Checkpoint, ParamStore};
use crate::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::field::{Field, FieldConfig};
use crate::geometry::{pixel_center_ray, Camera, Ray, SceneEnvelope, Vec3};
use crate::raster::Raster;
use crate::renderer::RenderResult;
use crate::sampler::{guided_samples, importance_samples, merge_groups, ray_rng, stratified_samples, RaySampleSet};
use crate::sgm::{compute_prior, PriorMaps, SgmParams};
use crate::supervision::{clamp_corr, prior_uncertainty, DepthPrior, LossWeights, Reduction};
use crate::synth::Dataset;

/// The ablation ladder, weakest to strongest supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Color loss only, hierarchical sampling.
    Nerf,
    /// Depth loss on a sparse pixel subset with unit correlation.
    SparseDepth,
    /// Dense priors and guided sampling, correlation forced to 1.
    DenseNoCorr,
    /// Dense priors weighted by their correlation.
    Full,
}

pub const VARIANTS: [Variant; 4] = [Variant::Nerf, Variant::SparseDepth, Variant::DenseNoCorr, Variant::Full];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Nerf => "nerf",
            Variant::SparseDepth => "sparse_depth",
            Variant::DenseNoCorr => "dense_nocorr",
            Variant::Full => "full",
        }
    }

    pub fn uses_priors(&self) -> bool {
        *self != Variant::Nerf
    }

    /// Whether samples come from the two-group (stratified + guided) scheme
    /// rather than coarse-to-fine resampling.
    pub fn guided(&self) -> bool {
        matches!(self, Variant::DenseNoCorr | Variant::Full)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}` (nerf|sparse_depth|dense_nocorr|full)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate every `decay_period` steps.
    pub lr_decay: f64,
    pub decay_period: u64,
    pub n_stratified: usize,
    pub n_guided: usize,
    pub weights: LossWeights,
    /// Exponent on the correlation weight of the depth loss (1 or 2).
    pub weight_power: u32,
    /// Meters per loss unit for depths, spreads and priors.
    pub depth_scale: f64,
    pub reduction: Reduction,
    pub field: FieldConfig,
    pub seed: u64,
    pub variant: Variant,
    /// Share of prior pixels kept by the sparse variant.
    pub sparse_fraction: f64,
    /// Pixels drawn with replacement when true.
    pub with_replacement: bool,
    pub log_period: u64,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_period: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small settings that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            batch_size: 256,
            lr: 5e-3,
            lr_decay: 0.9,
            decay_period: 10_000,
            n_stratified: 32,
            n_guided: 32,
            weights: LossWeights::default(),
            weight_power: 1,
            depth_scale: 256.0,
            reduction: Reduction::Mean,
            field: FieldConfig {
                l_pos: 8,
                l_dir: 2,
                width: 64,
                depth: 4,
                skip: 2,
                activation: Activation::Relu,
                density_bias: -3.0,
            },
            seed: 0,
            variant: Variant::Full,
            sparse_fraction: 0.02,
            with_replacement: true,
            log_period: 10,
            checkpoint_period: 0,
        }
    }

    /// Full-size settings: 30k steps, 1024 rays, 64 + 64 samples.
    pub fn paper() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 1024,
            lr: 1e-5,
            n_stratified: 64,
            n_guided: 64,
            field: FieldConfig { width: 256, depth: 8, skip: 4, density_bias: -3.0, ..FieldConfig::default() },
            checkpoint_period: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, msg: &str| Err(Error::BadConfigValue { key: k.into(), msg: msg.into() });
        if self.iterations < 1 {
            return bad("iterations", "must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must be in (0, 1]");
        }
        if self.decay_period < 1 {
            return bad("decay_period", "must be >= 1");
        }
        if self.n_stratified < 1 {
            return bad("n_stratified", "must be >= 1");
        }
        if !(1..=2).contains(&self.weight_power) {
            return bad("weight_power", "must be 1 or 2");
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return bad("depth_scale", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.sparse_fraction) {
            return bad("sparse_fraction", "must be in [0, 1]");
        }
        if self.log_period < 1 {
            return bad("log_period", "must be >= 1");
        }
        self.weights.validate()?;
        self.field.validate()
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            weights: self.weights,
            weight_power: self.weight_power,
            reduction: self.reduction,
            depth_scale: self.depth_scale,
        }
    }

    /// Learning rate used for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.lr_decay.powi(((step.max(1) - 1) / self.decay_period) as i32)
    }

    pub fn to_text(&self) -> String {
        let f = &self.field;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("iterations", self.iterations.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("decay_period", self.decay_period.to_string());
        kv("n_stratified", self.n_stratified.to_string());
        kv("n_guided", self.n_guided.to_string());
        kv("lambda", self.weights.lambda.to_string());
        kv("gamma", self.weights.gamma.to_string());
        kv("m", self.weights.m.to_string());
        kv("weight_power", self.weight_power.to_string());
        kv("depth_scale", self.depth_scale.to_string());
        kv("reduction", match self.reduction {
            Reduction::Mean => "mean".into(),
            Reduction::Sum => "sum".into(),
        });
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.to_string());
        kv("sparse_fraction", self.sparse_fraction.to_string());
        kv("with_replacement", self.with_replacement.to_string());
        kv("log_period", self.log_period.to_string());
        kv("checkpoint_period", self.checkpoint_period.to_string());
        kv("field.l_pos", f.l_pos.to_string());
        kv("field.l_dir", f.l_dir.to_string());
        kv("field.width", f.width.to_string());
        kv("field.depth", f.depth.to_string());
        kv("field.skip", f.skip.to_string());
        kv("field.activation", match f.activation {
            Activation::Relu => "relu".into(),
            Activation::Sine => "sine".into(),
        });
        kv("field.density_bias", f.density_bias.to_string());
        s
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "iterations" => self.iterations = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_decay" => self.lr_decay = parse_value(key, v)?,
            "decay_period" => self.decay_period = parse_value(key, v)?,
            "n_stratified" => self.n_stratified = parse_value(key, v)?,
            "n_guided" => self.n_guided = parse_value(key, v)?,
            "lambda" => self.weights.lambda = parse_value(key, v)?,
            "gamma" => self.weights.gamma = parse_value(key, v)?,
            "m" => self.weights.m = parse_value(key, v)?,
            "weight_power" => self.weight_power = parse_value(key, v)?,
            "depth_scale" => self.depth_scale = parse_value(key, v)?,
            "reduction" => {
                self.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::BadConfigValue { key: key.into(), msg: format!("`{v}` is not mean|sum") }),
                }
            }
            "seed" => self.seed = parse_value(key, v)?,
            "variant" => {
                self.variant = v.parse().map_err(|_| Error::BadConfigValue { key: key.into(), msg: format!("unknown variant `{v}`") })?
            }
            "sparse_fraction" => self.sparse_fraction = parse_value(key, v)?,
            "with_replacement" => self.with_replacement = parse_value(key, v)?,
            "log_period" => self.log_period = parse_value(key, v)?,
            "checkpoint_period" => self.checkpoint_period = parse_value(key, v)?,
            "field.l_pos" => self.field.l_pos = parse_value(key, v)?,
            "field.l_dir" => self.field.l_dir = parse_value(key, v)?,
            "field.width" => self.field.width = parse_value(key, v)?,
            "field.depth" => self.field.depth = parse_value(key, v)?,
            "field.skip" => self.field.skip = parse_value(key, v)?,
            "field.activation" => {
                self.field.activation = match v {
                    "relu" => Activation::Relu,
                    "sine" => Activation::Sine,
                    _ => return Err(Error::BadConfigValue { key: key.into(), msg: format!("`{v}` is not relu|sine") }),
                }
            }
            "field.density_bias" => self.field.density_bias = parse_value(key, v)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Desk defaults overridden by the keys present in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Low-resolution prior rasters of one train view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrior {
    pub depth: Raster,
    /// Raw correlation in [-1, 1].
    pub corr: Raster,
    pub valid: Raster,
}

impl From<PriorMaps> for ViewPrior {
    fn from(m: PriorMaps) -> Self {
        Self { depth: m.depth, corr: m.corr, valid: m.valid }
    }
}

impl ViewPrior {
    /// Prior for full-resolution pixel `(u, v)` of a `width × height` image
    /// by nearest-neighbor upsampling. Correlation is clamped to [0, 1].
    pub fn at(&self, u: usize, v: usize, width: usize, height: usize) -> DepthPrior {
        let fx = width.div_ceil(self.depth.width).max(1);
        let fy = height.div_ceil(self.depth.height).max(1);
        let (x, y) = ((u / fx).min(self.depth.width - 1), (v / fy).min(self.depth.height - 1));
        if self.valid.get(x, y, 0) < 0.5 {
            return DepthPrior::INVALID;
        }
        DepthPrior { depth: self.depth.get(x, y, 0) as f64, corr: clamp_corr(self.corr.get(x, y, 0) as f64), valid: true }
    }

    /// Full-resolution rasters (depth, clamped corr, valid).
    pub fn upsampled(&self, width: usize, height: usize) -> ViewPrior {
        let mut out = ViewPrior {
            depth: Raster::new(width, height, 1),
            corr: Raster::new(width, height, 1),
            valid: Raster::new(width, height, 1),
        };
        for v in 0..height {
            for u in 0..width {
                let p = self.at(u, v, width, height);
                out.depth.set(u, v, 0, p.depth as f32);
                out.corr.set(u, v, 0, p.corr as f32);
                out.valid.set(u, v, 0, p.valid as u8 as f32);
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>, view: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.depth.write_flt(dir.join(format!("{view}_prior_depth.flt")))?;
        self.corr.write_flt(dir.join(format!("{view}_prior_corr.flt")))?;
        self.valid.write_flt(dir.join(format!("{view}_prior_valid.flt")))
    }

    pub fn read(dir: impl AsRef<Path>, view: &str) -> Result<ViewPrior> {
        let dir = dir.as_ref();
        let p = ViewPrior {
            depth: Raster::read_flt(dir.join(format!("{view}_prior_depth.flt")))?,
            corr: Raster::read_flt(dir.join(format!("{view}_prior_corr.flt")))?,
            valid: Raster::read_flt(dir.join(format!("{view}_prior_valid.flt")))?,
        };
        if !p.depth.same_shape(&p.corr) || !p.depth.same_shape(&p.valid) || p.depth.channels != 1 {
            return Err(Error::ShapeMismatch(format!("prior rasters of `{view}` disagree")));
        }
        Ok(p)
    }
}

/// One prior per train view, each matched against its widest-baseline partner.
pub fn compute_priors(dataset: &Dataset, factor: usize, params: &SgmParams) -> Result<Vec<ViewPrior>> {
    (0..dataset.train.len())
        .map(|k| {
            let (r, a) = (&dataset.train[k], &dataset.train[dataset.stereo_partner(k)]);
            compute_prior(&r.image, &a.image, &r.camera, &a.camera, &dataset.envelope, factor, params).map(ViewPrior::from)
        })
        .collect()
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pixel subset used by the sparse variant.
pub fn in_sparse_subset(seed: u64, view: usize, u: usize, v: usize, fraction: f64) -> bool {
    let h = mix(mix(mix(seed ^ 0x5157_A85E) ^ view as u64) ^ ((u as u64) << 32 | v as u64));
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

/// Every train pixel as a ray with its color and effective prior.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
    /// Prior after variant adjustments; `None` disables the depth branch.
    pub priors: Vec<Option<DepthPrior>>,
    /// `(view, u, v)` of each entry.
    pub pixels: Vec<(usize, usize, usize)>,
}

impl TrainSet {
    pub fn new(dataset: &Dataset, priors: Option<&[ViewPrior]>, cfg: &TrainConfig) -> Result<Self> {
        if cfg.variant.uses_priors() {
            match priors {
                None => return Err(Error::InvalidArgument(format!("variant {} requires priors", cfg.variant))),
                Some(p) if p.len() != dataset.train.len() => {
                    return Err(Error::ShapeMismatch(format!("{} priors for {} train views", p.len(), dataset.train.len())))
                }
                _ => {}
            }
        }
        let mut set = TrainSet { rays: Vec::new(), colors: Vec::new(), priors: Vec::new(), pixels: Vec::new() };
        for (k, view) in dataset.train.iter().enumerate() {
            let cam = &view.camera;
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let Ok(ray) = pixel_center_ray(cam, u, v, &dataset.envelope) else { continue };
                    let px = view.image.pixel(u, v);
                    let raw = priors.map(|p| p[k].at(u, v, cam.width, cam.height));
                    let prior = match (cfg.variant, raw) {
                        (Variant::Nerf, _) | (_, None) => None,
                        (_, Some(p)) if !p.valid => None,
                        (Variant::SparseDepth, Some(p)) => {
                            in_sparse_subset(cfg.seed, k, u, v, cfg.sparse_fraction).then_some(DepthPrior { corr: 1.0, ..p })
                        }
                        (Variant::DenseNoCorr, Some(p)) => Some(DepthPrior { corr: 1.0, ..p }),
                        (Variant::Full, Some(p)) => Some(p),
                    };
                    set.rays.push(ray);
                    set.colors.push([px[0] as f64, px[1] as f64, px[2] as f64]);
                    set.priors.push(prior);
                    set.pixels.push((k, u, v));
                }
            }
        }
        if set.rays.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Indices into `set` for one batch, uniform over all train pixels.
pub fn build_ray_batch(set: &TrainSet, batch_size: usize, with_replacement: bool, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if with_replacement {
        Ok((0..batch_size).map(|_| rng.random_range(0..set.len())).collect())
    } else {
        if batch_size > set.len() {
            return Err(Error::InvalidArgument(format!("batch of {batch_size} exceeds {} pixels", set.len())));
        }
        Ok(index::sample(rng, set.len(), batch_size).into_vec())
    }
}

/// Network, weights and the settings that produced them.
#[derive(Debug, Clone)]
pub struct Model {
    pub field: Field,
    pub params: ParamStore<f32>,
    pub cfg: TrainConfig,
    pub envelope: SceneEnvelope,
}

impl Model {
    pub fn new(cfg: TrainConfig, envelope: SceneEnvelope) -> Result<Self> {
        cfg.validate()?;
        let field = Field::new(cfg.field.clone())?;
        let params = field.init_params(cfg.seed);
        Ok(Self { field, params, cfg, envelope })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let e = &self.envelope;
        let mut meta = self.cfg.to_text();
        let _ = writeln!(meta, "envelope.min={:?},{:?},{:?}", e.min.x, e.min.y, e.min.z);
        let _ = writeln!(meta, "envelope.max={:?},{:?},{:?}", e.max.x, e.max.y, e.max.z);
        let _ = writeln!(meta, "envelope.margin={:?}", e.margin);
        Checkpoint { params: self.params.clone(), meta }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut cfg = TrainConfig::desk();
        let (mut lo, mut hi, mut margin) = (None, None, None);
        let vec3 = |k: &str, v: &str| -> Result<Vec3> {
            let p = v.split(',').map(|s| parse_value::<f64>(k, s.trim())).collect::<Result<Vec<_>>>()?;
            if p.len() != 3 {
                return Err(Error::format("checkpoint metadata", format!("`{k}` needs 3 values")));
            }
            Ok(Vec3::new(p[0], p[1], p[2]))
        };
        for (k, v) in parse_kv(&ckpt.meta)? {
            match k.as_str() {
                "envelope.min" => lo = Some(vec3(&k, &v)?),
                "envelope.max" => hi = Some(vec3(&k, &v)?),
                "envelope.margin" => margin = Some(parse_value::<f64>(&k, &v)?),
                _ => cfg.set(&k, &v)?,
            }
        }
        cfg.validate()?;
        let missing = || Error::format("checkpoint metadata", "missing envelope");
        let envelope = SceneEnvelope::new(lo.ok_or_else(missing)?, hi.ok_or_else(missing)?, margin.ok_or_else(missing)?)?;
        let field = Field::new(cfg.field.clone())?;
        field.check_params(&ckpt.params)?;
        Ok(Self { field, params: ckpt.params, cfg, envelope })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::read(path)?)
    }

    fn coarse_pass(&self, rays: &[Ray], coarse: &[Vec<f64>]) -> Result<Vec<RenderResult<f32>>> {
        let sets: Vec<RaySampleSet> = rays.iter().zip(coarse).map(|(r, t)| merge_groups(r, t.clone(), Vec::new())).collect();
        forward_only(&self.field, &self.params, &self.envelope, rays, &sets)
    }

    /// Final sample sets. `priors[i]` guides ray `i` in train mode for the
    /// guided variants; rays without one are guided by a stratified first
    /// pass. Coarse-to-fine variants always resample from a first pass.
    pub fn sample_sets(&self, rays: &[Ray], priors: Option<&[Option<DepthPrior>]>, rngs: &mut [ChaCha8Rng]) -> Result<Vec<RaySampleSet>> {
        let cfg = &self.cfg;
        let (n1, n2) = (cfg.n_stratified, cfg.n_guided);
        let coarse: Vec<Vec<f64>> = rays.iter().zip(rngs.iter_mut()).map(|(r, g)| stratified_samples(r, n1, g)).collect();
        let guide_of = |i: usize| -> Option<(f64, f64)> {
            let p = priors?.get(i).copied().flatten()?;
            let sigma = prior_uncertainty(p.corr, cfg.weights.gamma, cfg.weights.m);
            Some((p.depth, sigma * cfg.depth_scale))
        };
        let need_pass: Vec<usize> = (0..rays.len()).filter(|&i| n2 > 0 && (!cfg.variant.guided() || guide_of(i).is_none())).collect();
        let pass = {
            let r: Vec<Ray> = need_pass.iter().map(|&i| rays[i].clone()).collect();
            let c: Vec<Vec<f64>> = need_pass.iter().map(|&i| coarse[i].clone()).collect();
            self.coarse_pass(&r, &c)?
        };
        let mut pass_of = vec![usize::MAX; rays.len()];
        for (j, &i) in need_pass.iter().enumerate() {
            pass_of[i] = j;
        }
        let mut out = Vec::with_capacity(rays.len());
        for (i, (ray, strat)) in rays.iter().zip(coarse).enumerate() {
            let rng = &mut rngs[i];
            let fine = if n2 == 0 {
                Vec::new()
            } else if cfg.variant.guided() {
                let (mean, std) = match guide_of(i) {
                    Some(g) => g,
                    None => {
                        let r = &pass[pass_of[i]];
                        (r.depth, r.std as f64)
                    }
                };
                guided_samples(ray, n2, mean, std, rng)
            } else {
                let r = &pass[pass_of[i]];
                let w: Vec<f64> = r.weights.iter().map(|&w| w as f64).collect();
                importance_samples(ray, &strat, &w, n2, rng)
            };
            out.push(merge_groups(ray, strat, fine));
        }
        Ok(out)
    }

    /// Test-time rendering: no priors, samples guided by the first pass.
    pub fn render_rays(&self, rays: &[Ray], seed: u64) -> Result<Vec<RenderResult<f32>>> {
        const BLOCK: usize = 4096;
        let mut all = Vec::with_capacity(rays.len());
        for (b, block) in rays.chunks(BLOCK).enumerate() {
            let mut rngs: Vec<ChaCha8Rng> = (0..block.len()).map(|i| ray_rng(seed ^ RENDER_SALT, (b * BLOCK + i) as u64)).collect();
            let sets = self.sample_sets(block, None, &mut rngs)?;
            all.extend(forward_only(&self.field, &self.params, &self.envelope, block, &sets)?);
        }
        Ok(all)
    }

    /// RGB and depth of every pixel of `camera`. Pixels whose rays miss the
    /// envelope are black with depth -1.
    pub fn render_view(&self, camera: &Camera, seed: u64) -> Result<(Raster, Raster)> {
        let (w, h) = (camera.width, camera.height);
        let mut rays = Vec::new();
        let mut where_ = Vec::new();
        for v in 0..h {
            for u in 0..w {
                if let Ok(r) = pixel_center_ray(camera, u, v, &self.envelope) {
                    rays.push(r);
                    where_.push((u, v));
                }
            }
        }
        let out = self.render_rays(&rays, seed)?;
        let mut rgb = Raster::new(w, h, 3);
        let mut depth = Raster::filled(w, h, 1, -1.0);
        for ((u, v), r) in where_.into_iter().zip(out) {
            for c in 0..3 {
                rgb.set(u, v, c, r.color[c].clamp(0.0, 1.0));
            }
            depth.set(u, v, 0, r.depth as f32);
        }
        Ok((rgb, depth))
    }
}

const SAMPLE_SALT: u64 = 0xA5A5_0F0F_5A5A_F0F0;
const RENDER_SALT: u64 = 0x0DD5_EED5_0DD5_EED5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub color_loss: f64,
    pub depth_loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,color_loss,depth_loss,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.color_loss, self.depth_loss, self.lr)
    }
}

/// Batch assembly for 1-based `step`: pixel indices plus prepared rays.
pub fn prepare_batch(model: &Model, set: &TrainSet, step: u64) -> Result<(Vec<usize>, Vec<PreparedRay>)> {
    let cfg = &model.cfg;
    let idx = build_ray_batch(set, cfg.batch_size, cfg.with_replacement, &mut ray_rng(cfg.seed, step))?;
    let rays: Vec<Ray> = idx.iter().map(|&i| set.rays[i].clone()).collect();
    let priors: Vec<Option<DepthPrior>> = idx.iter().map(|&i| set.priors[i]).collect();
    let base = step.wrapping_mul(cfg.batch_size as u64);
    let mut rngs: Vec<ChaCha8Rng> = (0..idx.len()).map(|i| ray_rng(cfg.seed ^ SAMPLE_SALT, base + i as u64)).collect();
    let sets = model.sample_sets(&rays, Some(&priors), &mut rngs)?;
    let batch = idx
        .iter()
        .zip(rays)
        .zip(sets)
        .zip(priors)
        .map(|(((&i, ray), samples), prior)| PreparedRay { ray, samples, target: set.colors[i], prior })
        .collect();
    Ok((idx, batch))
}

/// One optimizer step (1-based `step`). Gradients are left in the store.
pub fn train_step(model: &mut Model, set: &TrainSet, step: u64) -> Result<(LossParts, f64)> {
    let (_, batch) = prepare_batch(model, set, step)?;
    let spec = model.cfg.loss_spec();
    let loss = forward_backward(&model.field, &mut model.params, &model.envelope, &batch, &spec).map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("step {step}: {what}")),
        other => other,
    })?;
    let lr = model.cfg.lr_at(step);
    adam_step(&mut model.params, lr, &AdamConfig::default(), step)?;
    Ok((loss, lr))
}

/// Runs from the model's current step to `cfg.iterations`. With `out_dir`,
/// writes `log.csv` (appending when resuming), periodic `step_{n}.ckpt` and
/// `final.ckpt`.
pub fn train(model: &mut Model, set: &TrainSet, out_dir: Option<&Path>) -> Result<Vec<LogRow>> {
    let start = model.params.step + 1;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("log.csv");
            let f = if start == 1 {
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                f
            } else {
                fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?
            };
            Some((f, path))
        }
        None => None,
    };
    let mut rows = Vec::new();
    for step in start..=model.cfg.iterations {
        let (loss, lr) = train_step(model, set, step)?;
        if step % model.cfg.log_period == 0 {
            let row = LogRow { step, color_loss: loss.color, depth_loss: loss.depth, lr };
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            }
            rows.push(row);
        }
        if let Some(dir) = out_dir {
            if model.cfg.checkpoint_period > 0 && step % model.cfg.checkpoint_period == 0 {
                model.write(dir.join(format!("step_{step}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        model.write(dir.join("final.ckpt"))?;
    }
    Ok(rows)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format("training log", "bad header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format("training log", format!("bad row `{l}`")));
            }
            Ok(LogRow {
                step: parse_value("step", f[0])?,
                color_loss: parse_value("color_loss", f[1])?,
                depth_loss: parse_value("depth_loss", f[2])?,
                lr: parse_value("lr", f[3])?,
            })
        })
        .collect()
}
