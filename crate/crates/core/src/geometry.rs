//! Pinhole cameras, rays and the axis-aligned scene envelope.
//!
//! Camera convention: `p_cam = R * p_world + t`, the camera looks along +z of
//! its frame, image x grows with camera x and image y with camera y. Pixel
//! `(i, j)` covers `[i, i+1) x [j, j+1)` in continuous image coordinates, so
//! its center is `(i + 0.5, j + 0.5)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        focal: f64,
        principal: [f64; 2],
        size: [usize; 2],
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = Camera {
            focal,
            cx: principal[0],
            cy: principal[1],
            width: size[0],
            height: size[1],
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal {} must be > 0", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if err > 1e-9 || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (|RtR - I| = {err:e})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera at `center` looking straight down (-z), image x along world +x.
    pub fn nadir(center: Vec3, focal: f64, principal: [f64; 2], size: [usize; 2]) -> Result<Self> {
        let rotation = Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        Self::new(focal, principal, size, rotation, -(rotation * center))
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image -y).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, size: [usize; 2]) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let principal = [size[0] as f64 / 2.0, size[1] as f64 / 2.0];
        Self::new(focal, principal, size, rotation, -(rotation * eye))
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Intrinsics of the same camera for an image decimated by `factor`.
    pub fn downscaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        Camera {
            focal: self.focal / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
            ..self.clone()
        }
    }

    /// Unit world-space direction through continuous image point `px`.
    pub fn direction(&self, px: [f64; 2]) -> Vec3 {
        let local = Vec3::new((px[0] - self.cx) / self.focal, (px[1] - self.cy) / self.focal, 1.0);
        (self.rotation.transpose() * local).normalize()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "focal={:?}", self.focal);
        let _ = writeln!(s, "cx={:?}", self.cx);
        let _ = writeln!(s, "cy={:?}", self.cy);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        for r in 0..3 {
            for c in 0..3 {
                let _ = writeln!(s, "r{r}{c}={:?}", self.rotation[(r, c)]);
            }
        }
        for i in 0..3 {
            let _ = writeln!(s, "t{i}={:?}", self.translation[i]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Camera> {
        let kv = crate::config::parse_kv(text)?;
        let num = |k: &str| -> Result<f64> {
            let v = kv
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format("camera file", format!("missing key `{k}`")))?;
            v.parse::<f64>()
                .map_err(|e| Error::format("camera file", format!("`{k}`: {e}")))
        };
        const KEYS: [&str; 17] = [
            "focal", "cx", "cy", "width", "height", "r00", "r01", "r02", "r10", "r11", "r12", "r20",
            "r21", "r22", "t0", "t1", "t2",
        ];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return Err(Error::format("camera file", format!("unknown key `{k}`")));
        }
        let mut rot = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rot[(r, c)] = num(&format!("r{r}{c}"))?;
            }
        }
        let t = Vec3::new(num("t0")?, num("t1")?, num("t2")?);
        Camera::new(
            num("focal")?,
            [num("cx")?, num("cy")?],
            [num("width")? as usize, num("height")? as usize],
            rot,
            t,
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Camera> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Camera::from_text(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Axis-aligned box bounding everything the field may contain. The vertical
/// margin pads the box above and below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneEnvelope {
    pub min: Vec3,
    pub max: Vec3,
    pub margin: f64,
}

impl SceneEnvelope {
    pub fn new(min: Vec3, max: Vec3, margin: f64) -> Result<Self> {
        if !(0..3).all(|i| min[i] < max[i]) || margin < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "envelope min {min:?} must be < max {max:?} with margin >= 0"
            )));
        }
        Ok(Self { min, max, margin })
    }

    /// The padded box actually used for intersection and normalization.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let pad = Vec3::new(0.0, 0.0, self.margin);
        (self.min - pad, self.max + pad)
    }

    /// Slab intersection of `o + t d`; returns the parametric entry/exit.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let (lo, hi) = self.bounds();
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-300 {
                if o[i] < lo[i] || o[i] > hi[i] {
                    return None;
                }
                continue;
            }
            let a = (lo[i] - o[i]) / d[i];
            let b = (hi[i] - o[i]) / d[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 < t1).then_some((t0, t1))
    }

    /// Maps a world point to [-1, 1] per axis over the padded box.
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        std::array::from_fn(|i| 2.0 * (p[i] - lo[i]) / (hi[i] - lo[i]) - 1.0)
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|i| p[i] >= lo[i] - tol && p[i] <= hi[i] + tol)
    }
}

/// Smallest positive ray parameter handed out for a near bound.
pub const MIN_NEAR: f64 = 1e-6;

/// Ray through continuous image point `px`, clipped to the envelope.
pub fn pixel_ray(camera: &Camera, px: [f64; 2], envelope: &SceneEnvelope) -> Result<Ray> {
    if !(0.0..=camera.width as f64).contains(&px[0]) || !(0.0..=camera.height as f64).contains(&px[1]) {
        return Err(Error::PixelOutOfBounds(px[0], px[1]));
    }
    let origin = camera.center();
    let dir = camera.direction(px);
    let (t0, t1) = envelope.intersect(&origin, &dir).ok_or(Error::NoIntersection)?;
    let near = t0.max(MIN_NEAR);
    if t1 <= near {
        return Err(Error::NoIntersection);
    }
    Ok(Ray {
        origin,
        dir,
        near,
        far: t1,
    })
}

/// Ray through the center of integer pixel `(i, j)`.
pub fn pixel_center_ray(camera: &Camera, i: usize, j: usize, envelope: &SceneEnvelope) -> Result<Ray> {
    pixel_ray(camera, [i as f64 + 0.5, j as f64 + 0.5], envelope)
}

pub fn world_to_pixel(camera: &Camera, x: &Vec3) -> Result<[f64; 2]> {
    let p = camera.rotation * x + camera.translation;
    if p.z <= 0.0 {
        return Err(Error::BehindCamera);
    }
    Ok([
        camera.focal * p.x / p.z + camera.cx,
        camera.focal * p.y / p.z + camera.cy,
    ])
}
