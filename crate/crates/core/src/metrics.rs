//! Image metrics, altitude errors and DSM extraction from a trained field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::geometry::{world_to_pixel, Ray, SceneEnvelope, Vec3};
use crate::par;
use crate::raster::Raster;
use crate::synth::{Dataset, Heightfield};
use crate::trainer::{Model, ViewPrior};

/// Reported for identical images instead of +∞.
pub const PSNR_CAP: f64 = 99.0;

fn check_shapes(a: &Raster, b: &Raster) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over all samples, peak 1.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Err(Error::ShapeMismatch("empty raster".into()));
    }
    let se: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    let mse = se / a.data.len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Odd window side.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

impl SsimParams {
    /// Normalized separable Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

fn luma(img: &Raster) -> Vec<f64> {
    match img.channels {
        1 => img.data.iter().map(|&v| v as f64).collect(),
        3 => img.data.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect(),
        _ => img.to_gray().data.iter().map(|&v| v as f64).collect(),
    }
}

/// Mean SSIM over every window fully inside the image, on luma.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &Raster, b: &Raster, p: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    if p.window % 2 == 0 || p.window == 0 || !(p.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("ssim window {} / sigma {}", p.window, p.sigma)));
    }
    let (w, h, n) = (a.width, a.height, p.window);
    if w < n || h < n {
        return Err(Error::ShapeMismatch(format!("{w}x{h} image smaller than {n}x{n} window")));
    }
    let (x, y) = (luma(a), luma(b));
    let k = p.kernel();
    let (ow, oh) = (w - n + 1, h - n + 1);
    // Horizontal pass of the five moments, then vertical per output row.
    let moments = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; ow * h];
        for r in 0..h {
            for c in 0..ow {
                out[r * ow + c] = (0..n).map(|i| k[i] * f(r * w + c + i)).sum();
            }
        }
        out
    };
    let hx = moments(&|i| x[i]);
    let hy = moments(&|i| y[i]);
    let hxx = moments(&|i| x[i] * x[i]);
    let hyy = moments(&|i| y[i] * y[i]);
    let hxy = moments(&|i| x[i] * y[i]);
    let rows = par::map_range(oh, |r| {
        let mut acc = 0.0;
        for c in 0..ow {
            let v = |m: &[f64]| (0..n).map(|i| k[i] * m[(r + i) * ow + c]).sum::<f64>();
            let (mx, my) = (v(&hx), v(&hy));
            let sxx = v(&hxx) - mx * mx;
            let syy = v(&hyy) - my * my;
            let sxy = v(&hxy) - mx * my;
            acc += ((2.0 * mx * my + p.c1) * (2.0 * sxy + p.c2)) / ((mx * mx + my * my + p.c1) * (sxx + syy + p.c2));
        }
        acc
    });
    Ok(rows.iter().sum::<f64>() / (ow * oh) as f64)
}

/// Elevation raster on a regular ground grid. Row `j` runs towards −y:
/// cell `(i, j)` covers `x ∈ origin.x + [i, i+1]·gsd`, `y ∈ origin.y − [j, j+1]·gsd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dsm {
    pub elevation: Raster,
    pub gsd: f64,
    /// World `(x, y)` of the outer corner of cell `(0, 0)`.
    pub origin: [f64; 2],
}

impl Dsm {
    pub fn new(elevation: Raster, gsd: f64, origin: [f64; 2]) -> Result<Self> {
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::InvalidArgument(format!("gsd must be > 0, got {gsd}")));
        }
        if elevation.channels != 1 {
            return Err(Error::ShapeMismatch("DSM raster must have one channel".into()));
        }
        Ok(Self { elevation, gsd, origin })
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + (i as f64 + 0.5) * self.gsd, self.origin[1] - (j as f64 + 0.5) * self.gsd]
    }

    pub fn aligned(&self, other: &Dsm) -> bool {
        self.elevation.same_shape(&other.elevation) && self.gsd == other.gsd && self.origin == other.origin
    }

    /// Writes `{stem}.flt` plus `{stem}.txt` with gsd and origin.
    pub fn write(&self, flt_path: impl AsRef<Path>) -> Result<()> {
        let path = flt_path.as_ref();
        self.elevation.write_flt(path)?;
        let side = path.with_extension("txt");
        let text = format!("gsd={:?}\norigin_x={:?}\norigin_y={:?}\n", self.gsd, self.origin[0], self.origin[1]);
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn read(flt_path: impl AsRef<Path>) -> Result<Dsm> {
        let path = flt_path.as_ref();
        let elevation = Raster::read_flt(path)?;
        let side = path.with_extension("txt");
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let (mut gsd, mut ox, mut oy) = (None, None, None);
        for (k, v) in parse_kv(&text)? {
            match k.as_str() {
                "gsd" => gsd = Some(parse_value::<f64>(&k, &v)?),
                "origin_x" => ox = Some(parse_value::<f64>(&k, &v)?),
                "origin_y" => oy = Some(parse_value::<f64>(&k, &v)?),
                _ => return Err(Error::UnknownConfigKey(k)),
            }
        }
        match (gsd, ox, oy) {
            (Some(g), Some(x), Some(y)) => Dsm::new(elevation, g, [x, y]),
            _ => Err(Error::format("DSM sidecar", "needs gsd, origin_x and origin_y")),
        }
    }
}

/// Grid of `gsd` cells over the envelope's horizontal extent (margin excluded).
pub fn dsm_grid(envelope: &SceneEnvelope, gsd: f64) -> Result<(usize, usize, [f64; 2])> {
    if !(gsd > 0.0 && gsd.is_finite()) {
        return Err(Error::InvalidArgument(format!("gsd must be > 0, got {gsd}")));
    }
    let w = ((envelope.max.x - envelope.min.x) / gsd).round() as usize;
    let h = ((envelope.max.y - envelope.min.y) / gsd).round() as usize;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!("gsd {gsd} larger than the envelope")));
    }
    Ok((w, h, [envelope.min.x, envelope.max.y]))
}

/// Vertical ray down through ground point `(x, y)`, starting above the envelope.
pub fn nadir_ray(envelope: &SceneEnvelope, x: f64, y: f64) -> Option<Ray> {
    let (_, hi) = envelope.bounds();
    let origin = Vec3::new(x, y, hi.z + 1.0);
    let dir = Vec3::new(0.0, 0.0, -1.0);
    let (t0, t1) = envelope.intersect(&origin, &dir)?;
    Some(Ray { origin, dir, near: t0.max(0.0), far: t1 })
}

/// One nadir ray per cell rendered with the test-time sampler; elevation is
/// the ray origin height minus the rendered depth.
pub fn extract_dsm(model: &Model, gsd: f64, seed: u64) -> Result<Dsm> {
    let (w, h, origin) = dsm_grid(&model.envelope, gsd)?;
    let mut dsm = Dsm::new(Raster::new(w, h, 1), gsd, origin)?;
    let mut rays = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let [x, y] = dsm.cell_center(i, j);
            rays.push(nadir_ray(&model.envelope, x, y).ok_or(Error::NoIntersection)?);
        }
    }
    let out = model.render_rays(&rays, seed)?;
    for (k, (ray, r)) in rays.iter().zip(out).enumerate() {
        dsm.elevation.data[k] = (ray.origin.z - r.depth) as f32;
    }
    Ok(dsm)
}

/// Heightfield sampled at the cell centers of the grid.
pub fn ground_truth_dsm(scene: &Heightfield, envelope: &SceneEnvelope, gsd: f64) -> Result<Dsm> {
    let (w, h, origin) = dsm_grid(envelope, gsd)?;
    let mut dsm = Dsm::new(Raster::new(w, h, 1), gsd, origin)?;
    for j in 0..h {
        for i in 0..w {
            let [x, y] = dsm.cell_center(i, j);
            dsm.elevation.set(i, j, 0, scene.elevation(x, y) as f32);
        }
    }
    Ok(dsm)
}

/// Cells whose true surface point is seen by some train view whose prior is
/// valid at that point's pixel.
pub fn dsm_valid_mask(gt: &Dsm, dataset: &Dataset, priors: &[ViewPrior]) -> Result<Raster> {
    if priors.len() != dataset.train.len() {
        return Err(Error::ShapeMismatch(format!("{} priors for {} train views", priors.len(), dataset.train.len())));
    }
    let (w, h) = (gt.elevation.width, gt.elevation.height);
    let rows = par::map_range(h, |j| {
        (0..w)
            .map(|i| {
                let [x, y] = gt.cell_center(i, j);
                let p = Vec3::new(x, y, gt.elevation.get(i, j, 0) as f64);
                dataset.train.iter().zip(priors).any(|(view, prior)| {
                    let cam = &view.camera;
                    let Ok([u, v]) = world_to_pixel(cam, &p) else { return false };
                    if !(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
                        return false;
                    }
                    prior.at(u as usize, v as usize, cam.width, cam.height).valid
                        && dataset.scene.visible_from(&cam.center(), &p, &dataset.envelope)
                })
            })
            .collect::<Vec<bool>>()
    });
    let data = rows.into_iter().flatten().map(|b| b as u8 as f32).collect();
    Raster::from_vec(w, h, 1, data)
}

/// Mean |Δz| inside and outside `valid` (nonzero = inside); `None` for an
/// empty partition.
pub fn mae_split(dsm: &Dsm, gt: &Dsm, valid: &Raster) -> Result<(Option<f64>, Option<f64>)> {
    if !dsm.aligned(gt) {
        return Err(Error::ShapeMismatch("DSM grids are not aligned".into()));
    }
    check_shapes(&dsm.elevation, valid)?;
    let (mut s, mut n) = ([0.0f64; 2], [0usize; 2]);
    for ((a, b), m) in dsm.elevation.data.iter().zip(&gt.elevation.data).zip(&valid.data) {
        let k = if *m != 0.0 { 0 } else { 1 };
        s[k] += (*a as f64 - *b as f64).abs();
        n[k] += 1;
    }
    let mean = |k: usize| (n[k] > 0).then(|| s[k] / n[k] as f64);
    Ok((mean(0), mean(1)))
}

/// `key=value` lines; absent values are written as `none`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mae_in: Option<f64>,
    pub mae_out: Option<f64>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [("psnr", self.psnr), ("ssim", self.ssim), ("mae_in", self.mae_in), ("mae_out", self.mae_out)] {
            let _ = match v {
                Some(v) => writeln!(s, "{k}={v}"),
                None => writeln!(s, "{k}=none"),
            };
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    /// Direct per-window SSIM with a 2-D kernel.
    fn ssim_loop(a: &Raster, b: &Raster) -> f64 {
        let p = SsimParams::default();
        let k = p.kernel();
        let (x, y) = (luma(a), luma(b));
        let (w, h, n) = (a.width, a.height, p.window);
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - n {
            for c in 0..=w - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let g = k[dy] * k[dx];
                        let i = (r + dy) * w + c + dx;
                        mx += g * x[i];
                        my += g * y[i];
                        xx += g * x[i] * x[i];
                        yy += g * y[i] * y[i];
                        xy += g * x[i] * y[i];
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + p.c1) * (2.0 * sxy + p.c2)) / ((mx * mx + my * my + p.c1) * (sx + sy + p.c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_values() {
        let a = random(8, 8, 3, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-5);
        let c = random(8, 8, 3, 2);
        let mse: f64 = a.data.iter().zip(&c.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
        assert_abs_diff_eq!(psnr(&a, &c).unwrap(), -10.0 * mse.log10(), epsilon = 1e-9);
        assert!(psnr(&a, &random(8, 4, 3, 1)).is_err());
    }

    #[test]
    fn ssim_values() {
        let a = random(24, 20, 3, 3);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let b = random(24, 20, 3, 4);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim_loop(&a, &b), epsilon = 1e-9);
        let bin = Raster::from_vec(16, 16, 1, (0..256).map(|i| ((i * 7 + i / 16) % 3 == 0) as u8 as f32).collect()).unwrap();
        assert!(ssim(&bin, &bin.map(|v| 1.0 - v)).unwrap() < 0.0);
        assert!(ssim(&random(10, 10, 1, 0), &random(10, 10, 1, 1)).is_err());
    }

    #[test]
    fn mae_values() {
        let gt = Dsm::new(random(6, 5, 1, 7), 2.0, [0.0, 10.0]).unwrap();
        let all = Raster::filled(6, 5, 1, 1.0);
        assert_eq!(mae_split(&gt, &gt, &all).unwrap(), (Some(0.0), None));
        let biased = Dsm { elevation: gt.elevation.map(|v| v + 2.0), ..gt.clone() };
        let half = Raster::from_vec(6, 5, 1, (0..30).map(|i| (i % 2) as f32).collect()).unwrap();
        let (i, o) = mae_split(&biased, &gt, &half).unwrap();
        assert_abs_diff_eq!(i.unwrap(), 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(o.unwrap(), 2.0, epsilon = 1e-6);
        let shifted = Dsm { origin: [1.0, 10.0], ..gt.clone() };
        assert!(mae_split(&shifted, &gt, &all).is_err());
    }

    #[test]
    fn dsm_grid_shape_and_round_trip() {
        let env = crate::synth::standard_envelope();
        let (w, h, o) = dsm_grid(&env, 2.0).unwrap();
        assert_eq!((w, h, o), (256, 256, [-256.0, 256.0]));
        let dsm = Dsm::new(random(4, 3, 1, 9), 0.7, [-1.25, 3.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dsm.write(dir.path().join("d.flt")).unwrap();
        assert_eq!(Dsm::read(dir.path().join("d.flt")).unwrap(), dsm);
        assert!(Dsm::new(Raster::new(2, 2, 1), 0.0, [0.0; 2]).is_err());
    }

    #[test]
    fn gt_dsm_of_flat_scene_and_mask() {
        use crate::synth::{make_dataset, make_scene, DatasetSpec, SceneKind};
        let scene = make_scene(SceneKind::Urban, 32, 2).unwrap();
        let d = make_dataset(&scene, SceneKind::Urban, &DatasetSpec { image_size: 32, ..Default::default() }).unwrap();
        let gt = ground_truth_dsm(&scene, &d.envelope, 16.0).unwrap();
        let [x, y] = gt.cell_center(3, 5);
        assert_eq!(gt.elevation.get(3, 5, 0), scene.elevation(x, y) as f32);
        let priors = crate::trainer::compute_priors(&d, 1, &crate::sgm::SgmParams::default()).unwrap();
        let mask = dsm_valid_mask(&gt, &d, &priors).unwrap();
        let frac = mask.data.iter().sum::<f32>() / mask.data.len() as f32;
        assert!(frac > 0.3 && frac < 1.0, "{frac}");
    }

    #[test]
    fn report_text() {
        let r = Report { psnr: Some(99.0), ssim: Some(1.0), mae_in: None, mae_out: Some(0.5) };
        assert_eq!(r.to_text(), "psnr=99\nssim=1\nmae_in=none\nmae_out=0.5\n");
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (random(12, 12, 3, s1), random(12, 12, 3, s2));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn mae_translation_invariant(seed in 0u64..1000, shift in -50.0f32..50.0) {
            let a = Dsm::new(random(7, 7, 1, seed), 1.0, [0.0, 0.0]).unwrap();
            let b = Dsm::new(random(7, 7, 1, seed + 1), 1.0, [0.0, 0.0]).unwrap();
            let mask = random(7, 7, 1, seed + 2).map(|v| (v > 0.5) as u8 as f32);
            let (i0, o0) = mae_split(&a, &b, &mask).unwrap();
            let sh = |d: &Dsm| Dsm { elevation: d.elevation.map(|v| v + shift), ..d.clone() };
            let (i1, o1) = mae_split(&sh(&a), &sh(&b), &mask).unwrap();
            prop_assert!(i0.zip(i1).is_none_or(|(x, y)| (x - y).abs() < 1e-3));
            prop_assert!(o0.zip(o1).is_none_or(|(x, y)| (x - y).abs() < 1e-3));
        }
    }
}
