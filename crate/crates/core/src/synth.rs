//! Synthetic ground truth: bilinear heightfields with albedo texture, an exact
//! ray caster, Lambertian renders and on-disk datasets of rectified views.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::geometry::{pixel_center_ray, Camera, SceneEnvelope, Vec3};
use crate::par;
use crate::raster::Raster;

/// Depth written for rays that miss the terrain.
pub const MISS_DEPTH: f32 = -1.0;
pub const AMBIENT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Urban,
    Rural,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "urban" => Ok(SceneKind::Urban),
            "rural" => Ok(SceneKind::Rural),
            _ => Err(Error::InvalidArgument(format!("unknown scene kind `{s}` (urban|rural)"))),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SceneKind::Urban => "urban",
            SceneKind::Rural => "rural",
        })
    }
}

/// Elevations and albedo at grid points, bilinear in between. Grid point
/// `(i, j)` sits at world `(origin[0] + i·gsd, origin[1] + j·gsd)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub nx: usize,
    pub ny: usize,
    pub gsd: f64,
    pub origin: [f64; 2],
    pub z: Vec<f64>,
    pub albedo: Raster,
}

/// Scene extent shared by every generated heightfield.
pub fn standard_envelope() -> SceneEnvelope {
    SceneEnvelope::new(Vec3::new(-256.0, -256.0, 0.0), Vec3::new(256.0, 256.0, 100.0), 5.0)
        .expect("static envelope is valid")
}

impl Heightfield {
    pub fn new(nx: usize, ny: usize, gsd: f64, origin: [f64; 2], z: Vec<f64>, albedo: Raster) -> Result<Self> {
        if nx < 16 || ny < 16 {
            return Err(Error::InvalidArgument(format!("heightfield grid {nx}x{ny} below 16x16")));
        }
        if !(gsd > 0.0) || z.len() != nx * ny || albedo.width != nx || albedo.height != ny || albedo.channels != 3 {
            return Err(Error::ShapeMismatch("heightfield arrays disagree with grid".into()));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("heightfield elevation".into()));
        }
        Ok(Self { nx, ny, gsd, origin, z, albedo })
    }

    #[inline]
    pub fn height(&self, i: usize, j: usize) -> f64 {
        self.z[j * self.nx + i]
    }

    fn grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin[0]) / self.gsd, (y - self.origin[1]) / self.gsd)
    }

    fn cell_of(&self, gx: f64, gy: f64) -> (usize, usize, f64, f64) {
        let i = (gx.floor().max(0.0) as usize).min(self.nx - 2);
        let j = (gy.floor().max(0.0) as usize).min(self.ny - 2);
        (i, j, gx - i as f64, gy - j as f64)
    }

    /// Bilinear elevation; coordinates outside the grid are clamped to it.
    pub fn elevation(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = self.grid_coords(x, y);
        let gx = gx.clamp(0.0, (self.nx - 1) as f64);
        let gy = gy.clamp(0.0, (self.ny - 1) as f64);
        let (i, j, u, v) = self.cell_of(gx, gy);
        let (a, b, c, d) = self.patch(i, j);
        a + b * u + c * v + d * u * v
    }

    pub fn albedo_at(&self, x: f64, y: f64) -> [f64; 3] {
        let (gx, gy) = self.grid_coords(x, y);
        let gx = gx.clamp(0.0, (self.nx - 1) as f64);
        let gy = gy.clamp(0.0, (self.ny - 1) as f64);
        let (i, j, u, v) = self.cell_of(gx, gy);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let g = |ii: usize, jj: usize| self.albedo.get(ii, jj, c) as f64;
            *o = g(i, j) * (1.0 - u) * (1.0 - v) + g(i + 1, j) * u * (1.0 - v) + g(i, j + 1) * (1.0 - u) * v + g(i + 1, j + 1) * u * v;
        }
        out
    }

    /// `h(u,v) = a + b·u + c·v + d·u·v` on cell `(i, j)`.
    fn patch(&self, i: usize, j: usize) -> (f64, f64, f64, f64) {
        let (z00, z10, z01, z11) = (self.height(i, j), self.height(i + 1, j), self.height(i, j + 1), self.height(i + 1, j + 1));
        (z00, z10 - z00, z01 - z00, z00 - z10 - z01 + z11)
    }

    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (gx, gy) = self.grid_coords(x, y);
        let (i, j, u, v) = self.cell_of(gx, gy);
        let (_, b, c, d) = self.patch(i, j);
        Vec3::new(-(b + d * v) / self.gsd, -(c + d * u) / self.gsd, 1.0).normalize()
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// First intersection of `o + t·d` with the surface for `t ∈ [t0, t1]`.
    /// Cells are visited in order along the ray; within a cell the surface
    /// height along the ray is quadratic in `t` and solved in closed form.
    pub fn intersect(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> Option<f64> {
        let (gx0, gy0) = self.grid_coords(o.x, o.y);
        let (ax, ay) = (d.x / self.gsd, d.y / self.gsd);
        let (mut lo, mut hi) = (t0, t1);
        for (g0, a, n) in [(gx0, ax, self.nx), (gy0, ay, self.ny)] {
            let max = (n - 1) as f64;
            if a.abs() < 1e-15 {
                if g0 < 0.0 || g0 > max {
                    return None;
                }
            } else {
                let (ta, tb) = ((0.0 - g0) / a, (max - g0) / a);
                lo = lo.max(ta.min(tb));
                hi = hi.min(ta.max(tb));
            }
        }
        if lo > hi {
            return None;
        }
        let mid = 0.5 * (lo + hi.min(lo + 1e-9));
        let (mut i, mut j, _, _) = self.cell_of(gx0 + ax * mid, gy0 + ay * mid);
        let next = |g0: f64, a: f64, cell: usize| -> (f64, f64) {
            if a > 1e-15 {
                (((cell + 1) as f64 - g0) / a, 1.0 / a)
            } else if a < -1e-15 {
                ((cell as f64 - g0) / a, -1.0 / a)
            } else {
                (f64::INFINITY, f64::INFINITY)
            }
        };
        let (mut tx, dtx) = next(gx0, ax, i);
        let (mut ty, dty) = next(gy0, ay, j);
        let mut t = lo;
        loop {
            let t_exit = tx.min(ty).min(hi);
            if let Some(hit) = self.intersect_cell(i, j, o, d, t, t_exit) {
                return Some(hit);
            }
            if t_exit >= hi {
                return None;
            }
            t = t_exit;
            if tx <= ty {
                if ax > 0.0 {
                    if i + 2 >= self.nx {
                        return None;
                    }
                    i += 1;
                } else {
                    if i == 0 {
                        return None;
                    }
                    i -= 1;
                }
                tx += dtx;
            } else {
                if ay > 0.0 {
                    if j + 2 >= self.ny {
                        return None;
                    }
                    j += 1;
                } else {
                    if j == 0 {
                        return None;
                    }
                    j -= 1;
                }
                ty += dty;
            }
        }
    }

    fn intersect_cell(&self, i: usize, j: usize, o: &Vec3, d: &Vec3, ta: f64, tb: f64) -> Option<f64> {
        let (a, b, c, dd) = self.patch(i, j);
        let (gx, gy) = self.grid_coords(o.x + d.x * ta, o.y + d.y * ta);
        let (u0, v0) = (gx - i as f64, gy - j as f64);
        let (au, av) = (d.x / self.gsd, d.y / self.gsd);
        // f(s) = ray_z(ta + s) - h(u(s), v(s)) = q0 + q1·s + q2·s².
        let h0 = a + b * u0 + c * v0 + dd * u0 * v0;
        let h1 = b * au + c * av + dd * (u0 * av + v0 * au);
        let h2 = dd * au * av;
        let q0 = o.z + d.z * ta - h0;
        let q1 = d.z - h1;
        let q2 = -h2;
        let len = tb - ta;
        if q0 <= 0.0 {
            return Some(ta);
        }
        let mut best = f64::INFINITY;
        if q2.abs() < 1e-14 {
            if q1.abs() > 0.0 {
                best = -q0 / q1;
            }
        } else {
            let disc = q1 * q1 - 4.0 * q2 * q0;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let qq = -0.5 * (q1 + q1.signum() * sq);
                for r in [qq / q2, if qq != 0.0 { q0 / qq } else { f64::INFINITY }] {
                    if r >= 0.0 && r < best {
                        best = r;
                    }
                }
            }
        }
        (best >= 0.0 && best <= len).then_some(ta + best)
    }

    /// Whether world point `p` is seen unoccluded from `eye`.
    pub fn visible_from(&self, eye: &Vec3, p: &Vec3, envelope: &SceneEnvelope) -> bool {
        let dist = (p - eye).norm();
        let d = (p - eye) / dist;
        let Some((t0, _)) = envelope.intersect(eye, &d) else { return true };
        match self.intersect(eye, &d, t0, dist + 1.0) {
            Some(t) => t >= dist - VISIBILITY_TOL,
            None => true,
        }
    }
}

/// Slack (m) allowed between a surface point and its own ray hit.
pub const VISIBILITY_TOL: f64 = 0.05;

/// Deterministic scene over [`standard_envelope`] with `size` cells per side.
pub fn make_scene(kind: SceneKind, size: usize, seed: u64) -> Result<Heightfield> {
    if size < 15 {
        return Err(Error::InvalidArgument(format!("scene size {size} below 15 cells")));
    }
    let env = standard_envelope();
    let n = size + 1;
    let extent = env.max.x - env.min.x;
    let gsd = extent / size as f64;
    let origin = [env.min.x, env.min.y];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4E);
    let mut z = vec![0.0; n * n];
    let mut albedo = Raster::new(n, n, 3);
    let world = |i: usize| origin[0] + i as f64 * gsd;
    let texture = ValueNoise::new(&mut rng, extent);
    let tex = |i: usize, j: usize| texture.at(i as f64 * gsd, j as f64 * gsd);
    match kind {
        SceneKind::Urban => {
            for j in 0..n {
                for i in 0..n {
                    z[j * n + i] = 5.0 + 0.01 * world(i) + 0.005 * world(j);
                    let g = 0.35 + 0.5 * tex(i, j);
                    let tint = [0.85, 0.8, 0.65];
                    for c in 0..3 {
                        albedo.set(i, j, c, (g * tint[c]) as f32);
                    }
                }
            }
            let mut placed: Vec<[usize; 4]> = Vec::new();
            let target = 7;
            let (min_w, max_w) = ((30.0 / gsd).ceil() as usize, (80.0 / gsd).ceil() as usize);
            let margin = (40.0 / gsd).ceil() as usize;
            let mut attempts = 0;
            while placed.len() < target && attempts < 500 {
                attempts += 1;
                let w = rng.random_range(min_w..=max_w);
                let h = rng.random_range(min_w..=max_w);
                if w + 2 * margin >= n || h + 2 * margin >= n {
                    break;
                }
                let x0 = rng.random_range(margin..n - margin - w);
                let y0 = rng.random_range(margin..n - margin - h);
                let gap = (10.0 / gsd).ceil() as usize;
                if placed.iter().any(|b| x0 < b[2] + gap && b[0] < x0 + w + gap && y0 < b[3] + gap && b[1] < y0 + h + gap) {
                    continue;
                }
                placed.push([x0, y0, x0 + w, y0 + h]);
                let height = rng.random_range(20.0..70.0);
                let base: [f64; 3] = [rng.random_range(0.4..0.9), rng.random_range(0.3..0.8), rng.random_range(0.3..0.7)];
                for j in y0..=y0 + h {
                    for i in x0..=x0 + w {
                        z[j * n + i] += height;
                        let g = 0.3 + 0.7 * tex(i, j);
                        for c in 0..3 {
                            albedo.set(i, j, c, (base[c] * g) as f32);
                        }
                    }
                }
            }
        }
        SceneKind::Rural => {
            let mut waves = Vec::new();
            let (mut amp, mut wl) = (RURAL_AMPLITUDE, 256.0);
            for _ in 0..4 {
                let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                waves.push((amp, std::f64::consts::TAU / wl, th.cos(), th.sin(), ph));
                amp *= 0.4;
                wl *= 0.5;
            }
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = (world(i), origin[1] + j as f64 * gsd);
                    z[j * n + i] = 45.0 + waves.iter().map(|&(a, k, c, s, p)| a * (k * (c * x + s * y) + p).sin()).sum::<f64>();
                    let g = 0.4 + 0.5 * tex(i, j);
                    let tint = [0.55, 0.75, 0.45];
                    for c in 0..3 {
                        albedo.set(i, j, c, (g * tint[c]) as f32);
                    }
                }
            }
        }
    }
    // Stored elevations are f32 on disk; keep the in-memory scene identical.
    let z = z.into_iter().map(|v| v as f32 as f64).collect();
    Heightfield::new(n, n, gsd, origin, z, albedo)
}

/// Albedo pattern in [0, 1]: random lattice values bilinearly interpolated,
/// two octaves. Coarse enough for a small network to represent, fine enough
/// for block matching at reduced resolution.
struct ValueNoise {
    octaves: Vec<(f64, usize, Vec<f64>)>,
}

const TEXTURE_OCTAVES: [(f64, f64); 2] = [(16.0, 0.7), (8.0, 0.3)];

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent: f64) -> Self {
        let octaves = TEXTURE_OCTAVES
            .iter()
            .map(|&(spacing, weight)| {
                let n = (extent / spacing).ceil() as usize + 2;
                (spacing, n, (0..n * n).map(|_| weight * rng.random::<f64>()).collect())
            })
            .collect();
        Self { octaves }
    }

    /// `(u, v)` in meters from the grid origin.
    fn at(&self, u: f64, v: f64) -> f64 {
        self.octaves
            .iter()
            .map(|(spacing, n, vals)| {
                let (gx, gy) = (u / spacing, v / spacing);
                let (i, j) = ((gx.floor() as usize).min(n - 2), (gy.floor() as usize).min(n - 2));
                let (fx, fy) = (gx - i as f64, gy - j as f64);
                let g = |a: usize, b: usize| vals[b * n + a];
                g(i, j) * (1.0 - fx) * (1.0 - fy) + g(i + 1, j) * fx * (1.0 - fy) + g(i, j + 1) * (1.0 - fx) * fy + g(i + 1, j + 1) * fx * fy
            })
            .sum()
    }
}

/// Leading rural wave amplitude (m); the slope bound follows from it.
pub const RURAL_AMPLITUDE: f64 = 12.0;

/// Upper bound on the rural surface slope implied by the wave parameters.
pub fn rural_slope_bound() -> f64 {
    let (mut amp, mut wl, mut s) = (RURAL_AMPLITUDE, 256.0, 0.0);
    for _ in 0..4 {
        s += amp * std::f64::consts::TAU / wl;
        amp *= 0.4;
        wl *= 0.5;
    }
    s
}

/// Exact render: Lambertian color and ray depth per pixel center.
pub fn oracle_render(scene: &Heightfield, camera: &Camera, sun: &Vec3, envelope: &SceneEnvelope) -> (Raster, Raster) {
    let sun = sun.normalize();
    let (w, h) = (camera.width, camera.height);
    let mut rgb = Raster::new(w, h, 3);
    let mut depth = Raster::filled(w, h, 1, MISS_DEPTH);
    let rows = par::map_range(h, |y| {
        (0..w)
            .map(|x| {
                let Ok(ray) = pixel_center_ray(camera, x, y, envelope) else { return None };
                let t = scene.intersect(&ray.origin, &ray.dir, ray.near, ray.far)?;
                let p = ray.at(t);
                let shade = AMBIENT + (1.0 - AMBIENT) * scene.normal(p.x, p.y).dot(&sun).max(0.0);
                let a = scene.albedo_at(p.x, p.y);
                Some((t, [a[0] * shade, a[1] * shade, a[2] * shade]))
            })
            .collect::<Vec<_>>()
    });
    for (y, row) in rows.into_iter().enumerate() {
        for (x, hit) in row.into_iter().enumerate() {
            if let Some((t, c)) = hit {
                depth.set(x, y, 0, t as f32);
                for (ch, v) in c.iter().enumerate() {
                    rgb.set(x, y, ch, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    (rgb, depth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Raster,
    pub gt_depth: Raster,
}

/// Views as stored on disk, with images already 8-bit quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: SceneKind,
    pub envelope: SceneEnvelope,
    pub scene: Heightfield,
    pub sun: Vec3,
    pub train: Vec<View>,
    pub test: View,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub n_views: usize,
    /// Std of additive Gaussian noise on train images.
    pub noise: f64,
    pub altitude: f64,
    /// Half of the along-track convergence angle between the outer views.
    pub half_angle_deg: f64,
    /// Cross-track off-nadir angle of the test view.
    pub test_angle_deg: f64,
    pub sun: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            n_views: 2,
            noise: 0.0,
            altitude: 1500.0,
            half_angle_deg: 8.0,
            test_angle_deg: 8.0,
            sun: [0.4, -0.3, 0.87],
            seed: 0,
        }
    }
}

/// Nadir-oriented camera at `(x, y, altitude)` whose principal point is
/// shifted so the envelope center stays in the image center.
pub fn centered_camera(x: f64, y: f64, spec: &DatasetSpec, envelope: &SceneEnvelope) -> Result<Camera> {
    let s = spec.image_size as f64;
    let mid = 0.5 * (envelope.min + envelope.max);
    let dist = spec.altitude - mid.z;
    let focal = 1.15 * s * dist / (envelope.max.x - envelope.min.x);
    // Nadir frame: image x = world x, image y = -world y.
    let cx = s / 2.0 + focal * (x - mid.x) / dist;
    let cy = s / 2.0 - focal * (y - mid.y) / dist;
    Camera::nadir(Vec3::new(x, y, spec.altitude), focal, [cx, cy], [spec.image_size; 2])
}

pub fn view_cameras(spec: &DatasetSpec, envelope: &SceneEnvelope) -> Result<(Vec<(String, Camera)>, (String, Camera))> {
    if spec.n_views != 2 && spec.n_views != 3 {
        return Err(Error::InvalidArgument(format!("n_views must be 2 or 3, got {}", spec.n_views)));
    }
    let dist = spec.altitude - 0.5 * (envelope.min.z + envelope.max.z);
    let bx = dist * spec.half_angle_deg.to_radians().tan();
    let mut xs = vec![-bx, bx];
    if spec.n_views == 3 {
        xs.push(0.0);
    }
    let train = xs
        .iter()
        .enumerate()
        .map(|(k, &x)| Ok((format!("train{k}"), centered_camera(x, 0.0, spec, envelope)?)))
        .collect::<Result<Vec<_>>>()?;
    let ty = -dist * spec.test_angle_deg.to_radians().tan();
    let test = ("test".to_string(), centered_camera(0.0, ty, spec, envelope)?);
    Ok((train, test))
}

/// Renders every view. Train images get additive noise; the test view is clean.
pub fn make_dataset(scene: &Heightfield, kind: SceneKind, spec: &DatasetSpec) -> Result<Dataset> {
    let envelope = standard_envelope();
    let (train_cams, (test_name, test_cam)) = view_cameras(spec, &envelope)?;
    let sun = Vec3::from(spec.sun).normalize();
    let render = |name: String, camera: Camera, noise: f64, stream: u64| -> Result<View> {
        let (mut image, gt_depth) = oracle_render(scene, &camera, &sun, &envelope);
        if noise > 0.0 {
            let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream);
            for v in image.data.iter_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(View { name, camera, image: image.quantized(), gt_depth })
    };
    if spec.noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let train = train_cams
        .into_iter()
        .enumerate()
        .map(|(k, (name, cam))| render(name, cam, spec.noise, k as u64 + 1))
        .collect::<Result<Vec<_>>>()?;
    let test = render(test_name, test_cam, 0.0, 0)?;
    Ok(Dataset { kind, envelope, scene: scene.clone(), sun, train, test })
}

impl Dataset {
    pub fn view(&self, name: &str) -> Option<&View> {
        self.train.iter().chain(std::iter::once(&self.test)).find(|v| v.name == name)
    }

    /// Auxiliary view for each train view's stereo prior: the widest baseline.
    pub fn stereo_partner(&self, index: usize) -> usize {
        let c = self.train[index].camera.center();
        (0..self.train.len())
            .filter(|&k| k != index)
            .max_by(|&a, &b| {
                let da = (self.train[a].camera.center() - c).norm();
                let db = (self.train[b].camera.center() - c).norm();
                da.total_cmp(&db)
            })
            .expect("datasets hold at least two train views")
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = &self.scene;
        Raster::from_vec(s.nx, s.ny, 1, s.z.iter().map(|&v| v as f32).collect())?.write_flt(dir.join("scene.flt"))?;
        s.albedo.write_flt(dir.join("scene_albedo.flt"))?;
        for v in self.train.iter().chain(std::iter::once(&self.test)) {
            v.image.write_png(dir.join(format!("{}.png", v.name)))?;
            v.camera.write(dir.join(format!("{}.cam", v.name)))?;
            v.gt_depth.write_flt(dir.join(format!("{}_gtdepth.flt", v.name)))?;
        }
        let (e, names): (_, Vec<&str>) = (&self.envelope, self.train.iter().map(|v| v.name.as_str()).collect());
        let mut m = String::new();
        let _ = writeln!(m, "kind={}", self.kind);
        let _ = writeln!(m, "train={}", names.join(","));
        let _ = writeln!(m, "test={}", self.test.name);
        let _ = writeln!(m, "envelope_min={:?},{:?},{:?}", e.min.x, e.min.y, e.min.z);
        let _ = writeln!(m, "envelope_max={:?},{:?},{:?}", e.max.x, e.max.y, e.max.z);
        let _ = writeln!(m, "envelope_margin={:?}", e.margin);
        let _ = writeln!(m, "scene_gsd={:?}", s.gsd);
        let _ = writeln!(m, "scene_origin={:?},{:?}", s.origin[0], s.origin[1]);
        let _ = writeln!(m, "sun={:?},{:?},{:?}", self.sun.x, self.sun.y, self.sun.z);
        let path = dir.join("manifest.txt");
        fs::write(&path, m).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = parse_kv(&text)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format("manifest", format!("missing `{k}`")))
        };
        let floats = |k: &str, n: usize| -> Result<Vec<f64>> {
            let v = get(k)?.split(',').map(|s| parse_value::<f64>(k, s.trim())).collect::<Result<Vec<_>>>()?;
            if v.len() != n {
                return Err(Error::format("manifest", format!("`{k}` needs {n} values")));
            }
            Ok(v)
        };
        let (lo, hi) = (floats("envelope_min", 3)?, floats("envelope_max", 3)?);
        let envelope = SceneEnvelope::new(Vec3::new(lo[0], lo[1], lo[2]), Vec3::new(hi[0], hi[1], hi[2]), floats("envelope_margin", 1)?[0])?;
        let sun = floats("sun", 3)?;
        let origin = floats("scene_origin", 2)?;
        let heights = Raster::read_flt(dir.join("scene.flt"))?;
        let albedo = Raster::read_flt(dir.join("scene_albedo.flt"))?;
        let scene = Heightfield::new(
            heights.width,
            heights.height,
            floats("scene_gsd", 1)?[0],
            [origin[0], origin[1]],
            heights.data.iter().map(|&v| v as f64).collect(),
            albedo,
        )?;
        let load = |name: &str| -> Result<View> {
            Ok(View {
                name: name.to_string(),
                camera: Camera::read(dir.join(format!("{name}.cam")))?,
                image: Raster::read_png(dir.join(format!("{name}.png")))?,
                gt_depth: Raster::read_flt(dir.join(format!("{name}_gtdepth.flt")))?,
            })
        };
        let train = get("train")?.split(',').map(|n| load(n.trim())).collect::<Result<Vec<_>>>()?;
        if train.len() < 2 {
            return Err(Error::format("manifest", "at least two train views required"));
        }
        Ok(Dataset {
            kind: get("kind")?.parse()?,
            envelope,
            scene,
            sun: Vec3::new(sun[0], sun[1], sun[2]),
            train,
            test: load(get("test")?)?,
        })
    }
}
