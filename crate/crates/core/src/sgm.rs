//! Semi-global matching on a rectified pair: zero-mean NCC costs, path-wise
//! aggregation, winner-take-all with parabolic refinement, left-right check,
//! and triangulation of the winning disparity into depth along the reference
//! ray. Produces the low-resolution depth prior, its correlation map and a
//! validity mask.
//!
//! Disparity convention: reference pixel `x` matches auxiliary pixel `x - d`.

use crate::error::{Error, Result};
use crate::geometry::{Camera, SceneEnvelope, Vec3};
use crate::par;
use crate::raster::Raster;

/// Sentinel depth stored at invalid prior pixels.
pub const INVALID_DEPTH: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgmParams {
    pub window: usize,
    pub p1: f32,
    pub p2: f32,
    pub directions: usize,
    /// Maximum left-right disagreement in pixels.
    pub lr_tolerance: f32,
    /// Winning NCC below this marks the pixel invalid.
    pub min_corr: f32,
    /// A pixel is occluded in the aux image when another pixel of its row
    /// with a disparity larger by more than this lands within half a pixel
    /// of the same aux position. 0 disables the test.
    pub occlusion_margin: f32,
}

impl Default for SgmParams {
    fn default() -> Self {
        Self { window: 3, p1: 0.03, p2: 0.3, directions: 8, lr_tolerance: 1.0, min_corr: 0.0, occlusion_margin: 1.0 }
    }
}

/// Inclusive integer disparity range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisparityRange {
    pub min: i32,
    pub max: i32,
}

impl DisparityRange {
    pub fn new(min: i32, max: i32) -> Result<Self> {
        if min > max {
            return Err(Error::InvalidArgument(format!("empty disparity range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flipped(&self) -> Self {
        Self { min: -self.max, max: -self.min }
    }
}

/// `width × height × |range|` matching costs; `valid` marks candidates whose
/// windows lie inside both images and have non-zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub range: DisparityRange,
    pub cost: Vec<f32>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, k: usize) -> usize {
        (y * self.width + x) * self.range.len() + k
    }

    pub fn costs_at(&self, x: usize, y: usize) -> &[f32] {
        let i = self.idx(x, y, 0);
        &self.cost[i..i + self.range.len()]
    }

    /// Integer winner-take-all disparity index per pixel.
    pub fn argmin(&self) -> Vec<usize> {
        self.cost
            .chunks_exact(self.range.len())
            .map(|c| {
                let mut best = 0;
                for (k, &v) in c.iter().enumerate() {
                    if v < c[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Prior rasters at matching resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMaps {
    /// Depth along the reference ray (m); [`INVALID_DEPTH`] where invalid.
    pub depth: Raster,
    /// Raw NCC at the winning disparity, in [-1, 1]; 0 where invalid.
    pub corr: Raster,
    /// 1 for valid pixels, 0 otherwise.
    pub valid: Raster,
    /// Refined disparity; 0 where invalid.
    pub disparity: Raster,
}

/// Box-filtered decimation. Sizes that do not divide are edge-padded.
pub fn downsample(img: &Raster, factor: usize) -> Result<Raster> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::InvalidArgument(format!("downsample factor {factor} not in {{1,2,4,8}}")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (w, h, c) = (img.width.div_ceil(factor), img.height.div_ceil(factor), img.channels);
    let mut out = Raster::new(w, h, c);
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let sx = (x * factor + dx).min(img.width - 1);
                        let sy = (y * factor + dy).min(img.height - 1);
                        s += img.get(sx, sy, ch) as f64;
                    }
                }
                out.set(x, y, ch, (s * norm) as f32);
            }
        }
    }
    Ok(out)
}

struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut s = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(x, y);
                s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, s }
    }

    /// Sum over `[x0, x1) × [y0, y1)`.
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let w = self.w + 1;
        self.s[y1 * w + x1] - self.s[y0 * w + x1] - self.s[y1 * w + x0] + self.s[y0 * w + x0]
    }
}

/// Variance floor below which a window counts as textureless.
const MIN_WINDOW_VAR: f64 = 1e-10;

/// Zero-mean NCC matching costs (`1 - NCC`) and the NCC values themselves.
pub fn ncc_cost_volume(
    left: &Raster,
    right: &Raster,
    window: usize,
    range: DisparityRange,
) -> Result<(CostVolume, Vec<f32>)> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window {window} must be odd and >= 3")));
    }
    if left.width != right.width || left.height != right.height {
        return Err(Error::ShapeMismatch("stereo pair sizes differ".into()));
    }
    let l = left.to_gray();
    let r = right.to_gray();
    let (w, h) = (l.width, l.height);
    let nd = range.len();
    let rad = window / 2;
    let n = (window * window) as f64;
    let at = |img: &Raster, x: usize, y: usize| img.data[y * w + x] as f64;
    let il = Integral::new(w, h, |x, y| at(&l, x, y));
    let il2 = Integral::new(w, h, |x, y| at(&l, x, y).powi(2));
    let ir = Integral::new(w, h, |x, y| at(&r, x, y));
    let ir2 = Integral::new(w, h, |x, y| at(&r, x, y).powi(2));
    let per_d: Vec<(Vec<f32>, Vec<bool>)> = par::map_range(nd, |k| {
        let d = range.min + k as i32;
        let prod = Integral::new(w, h, |x, y| {
            let xs = x as i64 - d as i64;
            if xs >= 0 && (xs as usize) < w {
                at(&l, x, y) * at(&r, xs as usize, y)
            } else {
                0.0
            }
        });
        let mut ncc = vec![0.0f32; w * h];
        let mut ok = vec![false; w * h];
        for y in rad..h.saturating_sub(rad) {
            for x in rad..w.saturating_sub(rad) {
                let xs = x as i64 - d as i64;
                if xs < rad as i64 || xs + rad as i64 >= w as i64 {
                    continue;
                }
                let xs = xs as usize;
                let (x0, y0, x1, y1) = (x - rad, y - rad, x + rad + 1, y + rad + 1);
                let sl = il.sum(x0, y0, x1, y1);
                let sr = ir.sum(xs - rad, y0, xs + rad + 1, y1);
                let vl = il2.sum(x0, y0, x1, y1) - sl * sl / n;
                let vr = ir2.sum(xs - rad, y0, xs + rad + 1, y1) - sr * sr / n;
                if vl <= MIN_WINDOW_VAR * n || vr <= MIN_WINDOW_VAR * n {
                    continue;
                }
                // Products are indexed by the reference pixel, so the window is [x0, x1).
                let cov = prod.sum(x0, y0, x1, y1) - sl * sr / n;
                ncc[y * w + x] = (cov / (vl * vr).sqrt()).clamp(-1.0, 1.0) as f32;
                ok[y * w + x] = true;
            }
        }
        (ncc, ok)
    });
    let mut cv = CostVolume { width: w, height: h, range, cost: vec![1.0; w * h * nd], valid: vec![false; w * h * nd] };
    let mut ncc = vec![0.0f32; w * h * nd];
    for (k, (nk, ok)) in per_d.into_iter().enumerate() {
        for p in 0..w * h {
            let i = p * nd + k;
            ncc[i] = nk[p];
            cv.cost[i] = 1.0 - nk[p];
            cv.valid[i] = ok[p];
        }
    }
    Ok((cv, ncc))
}

const DIRECTIONS: [(i32, i32); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];

/// Cost of one scan direction: `L(p,d) = C(p,d) + min(L(p-r,d), L(p-r,d±1) + P1, min L(p-r) + P2) - min L(p-r)`.
pub fn aggregate_path(cv: &CostVolume, p1: f32, p2: f32, dir: (i32, i32)) -> Vec<f32> {
    let (w, h, nd) = (cv.width, cv.height, cv.range.len());
    let mut lr = vec![0.0f32; cv.cost.len()];
    let ys: Vec<usize> = if dir.1 >= 0 { (0..h).collect() } else { (0..h).rev().collect() };
    let xs: Vec<usize> = if dir.0 >= 0 { (0..w).collect() } else { (0..w).rev().collect() };
    for &y in &ys {
        for &x in &xs {
            let px = x as i64 - dir.0 as i64;
            let py = y as i64 - dir.1 as i64;
            let base = cv.idx(x, y, 0);
            if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                lr[base..base + nd].copy_from_slice(&cv.cost[base..base + nd]);
                continue;
            }
            let pb = cv.idx(px as usize, py as usize, 0);
            let (head, tail) = lr.split_at_mut(base.max(pb));
            let (prev, cur) = if pb < base { (&head[pb..pb + nd], &mut tail[..nd]) } else { (&tail[..nd], &mut head[base..base + nd]) };
            let min_prev = prev.iter().copied().fold(f32::INFINITY, f32::min);
            for k in 0..nd {
                let mut best = prev[k];
                if k > 0 {
                    best = best.min(prev[k - 1] + p1);
                }
                if k + 1 < nd {
                    best = best.min(prev[k + 1] + p1);
                }
                best = best.min(min_prev + p2);
                cur[k] = cv.cost[base + k] + best - min_prev;
            }
        }
    }
    lr
}

/// Sum of path costs over 4 or 8 directions.
pub fn aggregate(cv: &CostVolume, p1: f32, p2: f32, directions: usize) -> Result<CostVolume> {
    if directions != 4 && directions != 8 {
        return Err(Error::InvalidArgument(format!("directions must be 4 or 8, got {directions}")));
    }
    if !(p1 >= 0.0 && p2 >= p1) {
        return Err(Error::InvalidArgument(format!("penalties must satisfy P2 >= P1 >= 0 (P1={p1}, P2={p2})")));
    }
    let paths = par::map_range(directions, |i| aggregate_path(cv, p1, p2, DIRECTIONS[i]));
    let mut out = CostVolume { cost: vec![0.0; cv.cost.len()], ..cv.clone() };
    for p in paths {
        for (a, b) in out.cost.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(out)
}

/// Parabolic vertex offset around `k`, in (-0.5, 0.5).
pub fn subpixel_offset(costs: &[f32], k: usize) -> f64 {
    if k == 0 || k + 1 >= costs.len() {
        return 0.0;
    }
    let (a, b, c) = (costs[k - 1] as f64, costs[k] as f64, costs[k + 1] as f64);
    let denom = a - 2.0 * b + c;
    if denom <= 0.0 {
        return 0.0;
    }
    let lim = 0.5 - 1e-6;
    (0.5 * (a - c) / denom).clamp(-lim, lim)
}

/// Checks that the pair is row-aligned: shared rotation, focal and `cy`,
/// baseline along the image x axis.
pub fn check_rectified(reference: &Camera, aux: &Camera) -> Result<()> {
    let rot = (reference.rotation - aux.rotation).abs().max();
    let base = reference.rotation * (aux.center() - reference.center());
    let tol = 1e-6 * base.norm().max(1.0);
    if rot > 1e-9
        || (reference.focal - aux.focal).abs() > 1e-9
        || (reference.cy - aux.cy).abs() > 1e-9
        || base.y.abs() > tol
        || base.z.abs() > tol
        || base.x.abs() < 1e-9
    {
        return Err(Error::InvalidArgument("stereo pair is not rectified".into()));
    }
    Ok(())
}

/// Integer disparities spanned by the envelope, padded by one pixel.
pub fn disparity_range(reference: &Camera, aux: &Camera, envelope: &SceneEnvelope) -> Result<DisparityRange> {
    check_rectified(reference, aux)?;
    let (lo, hi) = envelope.bounds();
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..8 {
        let p = Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        );
        // Rectified: disparity depends only on camera-frame depth.
        let z = (reference.rotation * p + reference.translation).z;
        if z <= 0.0 {
            return Err(Error::BehindCamera);
        }
        let b = (reference.rotation * (aux.center() - reference.center())).x;
        let d = reference.focal * b / z + (reference.cx - aux.cx);
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    DisparityRange::new(dmin.floor() as i32 - 1, dmax.ceil() as i32 + 1)
}

/// Ray parameter along the reference ray at the midpoint of closest approach.
pub fn triangulate(reference: &Camera, aux: &Camera, px_ref: [f64; 2], px_aux: [f64; 2]) -> Option<f64> {
    let (o1, d1) = (reference.center(), reference.direction(px_ref));
    let (o2, d2) = (aux.center(), aux.direction(px_aux));
    let w0 = o1 - o2;
    let b = d1.dot(&d2);
    let (d, e) = (d1.dot(&w0), d2.dot(&w0));
    let denom = 1.0 - b * b;
    if denom < 1e-14 {
        return None;
    }
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let mid = 0.5 * ((o1 + d1 * s) + (o2 + d2 * t));
    let depth = (mid - o1).dot(&d1);
    (depth > 0.0).then_some(depth)
}

/// Winner-take-all + refinement + left-right check + triangulation.
///
/// `cv_lr` is referenced to the left image, `cv_rl` to the right image with
/// disparities in its own convention (left pixel `x + d'` for `d' = -d`).
/// Cameras must match the resolution of the volumes.
pub fn extract_prior(
    cv_lr: &CostVolume,
    cv_rl: &CostVolume,
    ncc_lr: &[f32],
    reference: &Camera,
    aux: &Camera,
    params: &SgmParams,
) -> Result<PriorMaps> {
    let (w, h) = (cv_lr.width, cv_lr.height);
    if cv_rl.width != w || cv_rl.height != h || ncc_lr.len() != cv_lr.cost.len() {
        return Err(Error::ShapeMismatch("cost volumes disagree".into()));
    }
    let win_l = cv_lr.argmin();
    let win_r = cv_rl.argmin();
    let mut maps = PriorMaps {
        depth: Raster::filled(w, h, 1, INVALID_DEPTH),
        corr: Raster::new(w, h, 1),
        valid: Raster::new(w, h, 1),
        disparity: Raster::new(w, h, 1),
    };
    for y in 0..h {
        for x in 0..w {
            let k = win_l[y * w + x];
            let i = cv_lr.idx(x, y, k);
            if !cv_lr.valid[i] {
                continue;
            }
            let corr = ncc_lr[i];
            if corr < params.min_corr {
                continue;
            }
            let d_int = cv_lr.range.min + k as i32;
            // Right-referenced disparity at the matched pixel, back in left convention.
            let xr = x as i64 - d_int as i64;
            if xr < 0 || xr >= w as i64 {
                continue;
            }
            let kr = win_r[y * w + xr as usize];
            if !cv_rl.valid[cv_rl.idx(xr as usize, y, kr)] {
                continue;
            }
            let d_back = -(cv_rl.range.min + kr as i32);
            if ((d_int - d_back).abs() as f32) > params.lr_tolerance {
                continue;
            }
            let d = d_int as f64 + subpixel_offset(cv_lr.costs_at(x, y), k);
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let Some(depth) = triangulate(reference, aux, [u, v], [u - d, v]) else { continue };
            maps.depth.set(x, y, 0, depth as f32);
            maps.corr.set(x, y, 0, corr);
            maps.valid.set(x, y, 0, 1.0);
            maps.disparity.set(x, y, 0, d as f32);
        }
        if params.occlusion_margin > 0.0 {
            mark_occluded(&mut maps, y, params.occlusion_margin as f64);
        }
    }
    Ok(maps)
}

/// Invalidates pixels of row `y` hidden in the aux image by a nearer surface.
fn mark_occluded(maps: &mut PriorMaps, y: usize, margin: f64) {
    let w = maps.valid.width;
    let hits: Vec<(usize, f64, f64)> = (0..w)
        .filter(|&x| maps.valid.get(x, y, 0) > 0.5)
        .map(|x| {
            let d = maps.disparity.get(x, y, 0) as f64;
            (x, x as f64 + 0.5 - d, d)
        })
        .collect();
    for &(x, a, d) in &hits {
        if hits.iter().any(|&(_, a2, d2)| d2 > d + margin && (a2 - a).abs() < 0.5) {
            maps.valid.set(x, y, 0, 0.0);
            maps.depth.set(x, y, 0, INVALID_DEPTH);
            maps.corr.set(x, y, 0, 0.0);
        }
    }
}

/// Full prior computation from a full-resolution rectified pair: downsample by
/// `factor`, match, aggregate, extract.
pub fn compute_prior(
    ref_img: &Raster,
    aux_img: &Raster,
    ref_cam: &Camera,
    aux_cam: &Camera,
    envelope: &SceneEnvelope,
    factor: usize,
    params: &SgmParams,
) -> Result<PriorMaps> {
    let left = downsample(ref_img, factor)?;
    let right = downsample(aux_img, factor)?;
    let (lc, rc) = (ref_cam.downscaled(factor), aux_cam.downscaled(factor));
    let range = disparity_range(&lc, &rc, envelope)?;
    let (cv_lr, ncc_lr) = ncc_cost_volume(&left, &right, params.window, range)?;
    let (cv_rl, _) = ncc_cost_volume(&right, &left, params.window, range.flipped())?;
    let agg_lr = aggregate(&cv_lr, params.p1, params.p2, params.directions)?;
    let agg_rl = aggregate(&cv_rl, params.p1, params.p2, params.directions)?;
    extract_prior(&agg_lr, &agg_rl, &ncc_lr, &lc, &rc, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_vec(w, h, 1, (0..w * h).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn shifted(src: &Raster, d: i64, seed: u64) -> Raster {
        // right(x) = left(x + d), so left pixel x matches right pixel x - d.
        let fill = noise(src.width, src.height, seed);
        let mut out = fill.clone();
        for y in 0..src.height {
            for x in 0..src.width {
                let xs = x as i64 + d;
                if xs >= 0 && xs < src.width as i64 {
                    out.set(x, y, 0, src.get(xs as usize, y, 0));
                }
            }
        }
        out
    }

    #[test]
    fn downsample_cases() {
        let img = noise(8, 8, 1);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        let c = Raster::filled(8, 4, 3, 0.3);
        let d = downsample(&c, 4).unwrap();
        assert_eq!((d.width, d.height), (2, 1));
        assert!(d.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let checker = Raster::from_vec(4, 4, 1, (0..16).map(|i| ((i % 4 + i / 4) % 2) as f32).collect()).unwrap();
        assert_eq!(downsample(&checker, 2).unwrap().data, vec![0.5; 4]);
        assert!(downsample(&img, 3).is_err());
        assert_eq!(downsample(&noise(9, 5, 2), 4).unwrap().width, 3);
    }

    #[test]
    fn shifted_pair_has_minimum_at_shift() {
        let left = noise(40, 20, 3);
        let right = shifted(&left, 4, 4);
        let range = DisparityRange::new(0, 8).unwrap();
        let (cv, _) = ncc_cost_volume(&left, &right, 5, range).unwrap();
        let win = cv.argmin();
        for y in 3..17 {
            for x in 12..37 {
                assert_eq!(win[y * 40 + x] as i32 + range.min, 4, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn constant_images_are_all_invalid() {
        let c = Raster::filled(20, 20, 1, 0.4);
        let range = DisparityRange::new(-2, 2).unwrap();
        let (cv, ncc) = ncc_cost_volume(&c, &c, 5, range).unwrap();
        assert!(ncc.iter().all(|&v| v == 0.0));
        assert!(cv.valid.iter().all(|&v| !v));
        let agg = aggregate(&cv, 0.03, 0.3, 8).unwrap();
        let cam = Camera::nadir(Vec3::new(0.0, 0.0, 100.0), 20.0, [10.0, 10.0], [20, 20]).unwrap();
        let cam2 = Camera::nadir(Vec3::new(5.0, 0.0, 100.0), 20.0, [10.0, 10.0], [20, 20]).unwrap();
        let m = extract_prior(&agg, &agg, &ncc, &cam, &cam2, &SgmParams::default()).unwrap();
        assert!(m.valid.data.iter().all(|&v| v == 0.0));
        assert!(m.depth.data.iter().all(|&v| v == INVALID_DEPTH));
    }

    #[test]
    fn ncc_matches_direct_double_loop() {
        let left = noise(24, 16, 5);
        let right = noise(24, 16, 6);
        let range = DisparityRange::new(-3, 5).unwrap();
        let win = 5;
        let (cv, ncc) = ncc_cost_volume(&left, &right, win, range).unwrap();
        let r = (win / 2) as i64;
        for y in 2..14i64 {
            for x in 2..22i64 {
                for d in range.min..=range.max {
                    let i = cv.idx(x as usize, y as usize, (d - range.min) as usize);
                    if x - d as i64 - r < 0 || x - d as i64 + r >= 24 {
                        assert!(!cv.valid[i]);
                        continue;
                    }
                    let (mut a, mut b) = (Vec::new(), Vec::new());
                    for dy in -r..=r {
                        for dx in -r..=r {
                            a.push(left.get((x + dx) as usize, (y + dy) as usize, 0) as f64);
                            b.push(right.get((x + dx - d as i64) as usize, (y + dy) as usize, 0) as f64);
                        }
                    }
                    let ma = a.iter().sum::<f64>() / a.len() as f64;
                    let mb = b.iter().sum::<f64>() / b.len() as f64;
                    let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
                    let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
                    let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
                    assert!((ncc[i] as f64 - cov / (va * vb).sqrt()).abs() < 1e-6);
                    assert!(cv.valid[i]);
                }
            }
        }
    }

    #[test]
    fn zero_penalties_scale_raw_cost() {
        let (cv, _) = ncc_cost_volume(&noise(16, 12, 7), &noise(16, 12, 8), 3, DisparityRange::new(0, 4).unwrap()).unwrap();
        for dirs in [4, 8] {
            let agg = aggregate(&cv, 0.0, 0.0, dirs).unwrap();
            for (a, c) in agg.cost.iter().zip(&cv.cost) {
                assert_abs_diff_eq!(*a, dirs as f32 * c, epsilon = 1e-5);
            }
        }
        assert!(aggregate(&cv, 0.3, 0.03, 8).is_err());
        assert!(aggregate(&cv, 0.03, 0.3, 6).is_err());
    }

    #[test]
    fn single_row_matches_dp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, nd) = (12usize, 5usize);
        let cost: Vec<f32> = (0..w * nd).map(|_| rng.random::<f32>() * 2.0).collect();
        let cv = CostVolume {
            width: w,
            height: 1,
            range: DisparityRange::new(0, nd as i32 - 1).unwrap(),
            cost: cost.clone(),
            valid: vec![true; w * nd],
        };
        let (p1, p2) = (0.1f32, 0.5f32);
        // Oracle: explicit minimization over every predecessor disparity.
        let dp = |order: Vec<usize>| {
            let mut l = vec![vec![0.0f32; nd]; w];
            let mut prev: Option<usize> = None;
            for x in order {
                for d in 0..nd {
                    let c = cost[x * nd + d];
                    l[x][d] = match prev {
                        None => c,
                        Some(p) => {
                            let m = l[p].iter().copied().fold(f32::INFINITY, f32::min);
                            let best = (0..nd)
                                .map(|q| l[p][q] + if q == d { 0.0 } else if q.abs_diff(d) == 1 { p1 } else { p2 })
                                .fold(f32::INFINITY, f32::min);
                            c + best - m
                        }
                    };
                }
                prev = Some(x);
            }
            l
        };
        let fwd = dp((0..w).collect());
        let bwd = dp((0..w).rev().collect());
        let agg = aggregate(&cv, p1, p2, 4).unwrap();
        for x in 0..w {
            for d in 0..nd {
                // Vertical paths on a single row contribute the raw cost twice.
                let expect = fwd[x][d] + bwd[x][d] + 2.0 * cost[x * nd + d];
                assert_abs_diff_eq!(agg.cost[x * nd + d], expect, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn subpixel_is_bounded() {
        assert_abs_diff_eq!(subpixel_offset(&[1.0, 0.0, 1.0], 1), 0.0);
        assert_abs_diff_eq!(subpixel_offset(&[2.0, 1.0, 2.0 / 3.0 + 1.0], 1), 0.1, epsilon = 1e-6);
        let o = subpixel_offset(&[1.0, 0.5, 0.5], 1);
        assert!(o > -0.5 && o < 0.5);
        assert_eq!(subpixel_offset(&[0.0, 1.0], 0), 0.0);
    }

    #[test]
    fn nearer_surface_hides_colliding_pixels() {
        let w = 20;
        let mut maps = PriorMaps {
            depth: Raster::filled(w, 1, 1, 100.0),
            corr: Raster::filled(w, 1, 1, 0.9),
            valid: Raster::filled(w, 1, 1, 1.0),
            disparity: Raster::filled(w, 1, 1, 1.0),
        };
        // Foreground at x = 10..14 with disparity 4 lands on aux 6.5..10.5,
        // where background pixels 7..9 (disparity 1) land too.
        for x in 10..15 {
            maps.disparity.set(x, 0, 0, 4.0);
        }
        mark_occluded(&mut maps, 0, 1.0);
        let hidden: Vec<usize> = (0..w).filter(|&x| maps.valid.get(x, 0, 0) == 0.0).collect();
        assert_eq!(hidden, vec![7, 8, 9]);
        assert!(hidden.iter().all(|&x| maps.depth.get(x, 0, 0) == INVALID_DEPTH));
    }

    #[test]
    fn triangulation_recovers_point() {
        let a = Camera::nadir(Vec3::new(-100.0, 0.0, 1000.0), 800.0, [40.0, 32.0], [64, 64]).unwrap();
        let b = Camera::nadir(Vec3::new(100.0, 0.0, 1000.0), 800.0, [24.0, 32.0], [64, 64]).unwrap();
        let p = Vec3::new(3.0, -2.0, 40.0);
        let pa = crate::geometry::world_to_pixel(&a, &p).unwrap();
        let pb = crate::geometry::world_to_pixel(&b, &p).unwrap();
        assert_abs_diff_eq!(pa[1], pb[1], epsilon = 1e-9);
        let t = triangulate(&a, &b, pa, pb).unwrap();
        assert_abs_diff_eq!(t, (p - a.center()).norm(), epsilon = 1e-6);
        check_rectified(&a, &b).unwrap();
        let c = Camera::nadir(Vec3::new(0.0, 50.0, 1000.0), 800.0, [32.0, 32.0], [64, 64]).unwrap();
        assert!(check_rectified(&a, &c).is_err());
    }
}
