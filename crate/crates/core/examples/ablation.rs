//! Trains every variant on one synthetic scene and prints test-view and DSM
//! metrics. Overrides: KIND, SIZE (image px), SCENE_SEED, NOISE, FACTOR, GSD
//! and CFG="key=value;key=value" applied to the desk config. VARIANTS selects
//! a comma-separated subset. Prior error statistics go to stderr.

use std::time::Instant;

use spsnerf::metrics::{dsm_valid_mask, extract_dsm, ground_truth_dsm, mae_split, psnr, ssim};
use spsnerf::sgm::SgmParams;
use spsnerf::geometry::{Camera, Vec3};
use spsnerf::synth::{make_dataset, make_scene, oracle_render, DatasetSpec, SceneKind};
use spsnerf::trainer::{compute_priors, train, Model, TrainConfig, TrainSet, Variant, VARIANTS};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> spsnerf::Result<()> {
    spsnerf::par::configure_from_env();
    let kind: SceneKind = env("KIND", SceneKind::Urban);
    let size: usize = env("SIZE", 128);
    let factor: usize = env("FACTOR", 4);
    let gsd: f64 = env("GSD", 4.0);
    let scene = make_scene(kind, 256, env("SCENE_SEED", 0))?;
    let noise: f64 = env("NOISE", 0.0);
    let data = make_dataset(&scene, kind, &DatasetSpec { image_size: size, noise, ..Default::default() })?;
    let t = Instant::now();
    let priors = compute_priors(&data, factor, &SgmParams::default())?;
    eprintln!("priors {:.1}s", t.elapsed().as_secs_f64());
    for (k, p) in priors.iter().enumerate() {
        let v = &data.train[k];
        let (w, h) = (v.camera.width, v.camera.height);
        let mut errs = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let q = p.at(x, y, w, h);
                if q.valid {
                    errs.push((q.depth - v.gt_depth.get(x, y, 0) as f64).abs());
                }
            }
        }
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        eprintln!("prior {k}: valid {:.3} median {:.2} m p90 {:.2} m mean {:.2} m", n as f64 / (w * h) as f64, errs[n / 2], errs[n * 9 / 10], errs.iter().sum::<f64>() / n as f64);
    }
    // EXTRA="x20,y25": extra clean views tilted along x or y by the given degrees.
    let spec = DatasetSpec { image_size: size, ..Default::default() };
    let mid = 0.5 * (data.envelope.min + data.envelope.max);
    let dist = spec.altitude - mid.z;
    let extra: Vec<(String, Camera, spsnerf::Raster)> = std::env::var("EXTRA")
        .unwrap_or_default()
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|tag| {
            let deg: f64 = tag[1..].parse().expect("angle");
            let off = dist * deg.to_radians().tan();
            let eye = mid + if tag.starts_with('x') { Vec3::new(off, 0.0, dist) } else { Vec3::new(0.0, -off, dist) };
            let focal = 1.15 * size as f64 * (eye - mid).norm() / (data.envelope.max.x - data.envelope.min.x);
            let cam = Camera::look_at(eye, mid, Vec3::new(0.0, 1.0, 0.0), focal, [size, size]).unwrap();
            let (img, _) = oracle_render(&data.scene, &cam, &data.sun, &data.envelope);
            (tag.to_string(), cam, img)
        })
        .collect();
    let gt = ground_truth_dsm(&data.scene, &data.envelope, gsd)?;
    let mask = dsm_valid_mask(&gt, &data, &priors)?;

    let mut base = TrainConfig::desk();
    for kv in std::env::var("CFG").unwrap_or_default().split(';').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set(k.trim(), v.trim())?;
    }
    let wanted: Vec<Variant> = match std::env::var("VARIANTS") {
        Ok(s) => s.split(',').map(|v| v.parse()).collect::<spsnerf::Result<_>>()?,
        Err(_) => VARIANTS.to_vec(),
    };
    for v in wanted {
        let cfg = TrainConfig { variant: v, ..base.clone() };
        let set = TrainSet::new(&data, Some(&priors), &cfg)?;
        let mut model = Model::new(cfg, data.envelope)?;
        let t = Instant::now();
        let rows = train(&mut model, &set, None)?;
        let secs = t.elapsed().as_secs_f64();
        let (rgb, _) = model.render_view(&data.test.camera, 0)?;
        let dsm = extract_dsm(&model, gsd, 0)?;
        let (mi, mo) = mae_split(&dsm, &gt, &mask)?;
        let all = mae_split(&dsm, &gt, &spsnerf::Raster::filled(gt.elevation.width, gt.elevation.height, 1, 1.0))?.0;
        for (tag, cam, img) in &extra {
            let (rgb, _) = model.render_view(cam, 0)?;
            println!("  {v} view {tag}: psnr={:.2} ssim={:.3}", psnr(&rgb, img)?, ssim(&rgb, img)?);
        }
        let last = rows.last().map(|r| (r.color_loss, r.depth_loss));
        println!(
            "{v:<13} psnr={:.2} ssim={:.3} mae_in={:.2} mae_out={:.2} mae={:.2} train={secs:.0}s last_losses={:?}",
            psnr(&rgb, &data.test.image)?,
            ssim(&rgb, &data.test.image)?,
            mi.unwrap_or(f64::NAN),
            mo.unwrap_or(f64::NAN),
            all.unwrap_or(f64::NAN),
            last,
        );
    }
    Ok(())
}
