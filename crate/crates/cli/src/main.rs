use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::{fs, io};

use clap::{Parser, Subcommand};
use spsnerf::geometry::Camera;
use spsnerf::metrics::{dsm_valid_mask, extract_dsm, ground_truth_dsm, mae_split, psnr, ssim, Dsm, Report};
use spsnerf::sgm::{compute_prior, SgmParams};
use spsnerf::synth::{make_dataset, make_scene, Dataset, DatasetSpec, SceneKind};
use spsnerf::trainer::{train, Model, TrainConfig, TrainSet, Variant, ViewPrior};
use spsnerf::{Error, Raster};

#[derive(Parser)]
#[command(name = "spsnerf", version, about = "Sparse-view radiance fields with stereo depth priors")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene and its rendered views.
    MakeScene {
        #[arg(long, default_value = "urban")]
        kind: SceneKind,
        /// Image side in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Std of Gaussian noise added to train images.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stereo depth priors. Without --ref-view every train view is matched
    /// against its widest-baseline partner.
    Sgm {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, requires = "aux_view")]
        ref_view: Option<String>,
        #[arg(long, requires = "ref_view")]
        aux_view: Option<String>,
        #[arg(long, default_value_t = 4)]
        factor: usize,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a field and write checkpoints plus a CSV log.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        priors: Option<PathBuf>,
        /// key=value config file; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Extra key=value overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint up to the configured iterations.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render RGB (PNG) and depth (FLT) for a camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A view name from --dataset, or a camera file.
        #[arg(long)]
        view: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output stem: writes {out}.png and {out}_depth.flt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a DSM with one vertical ray per ground cell.
    Dsm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        gsd: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground-truth DSM of a dataset plus, given priors, its valid mask.
    GtDsm {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        gsd: f64,
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare PNG images (PSNR, SSIM) or DSMs (MAE split).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        valid_mask: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Exit codes: 1 runtime failure, 2 bad arguments or config, 3 I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image(_) | Error::Format { .. } => 3,
        Error::UnknownConfigKey(_) | Error::BadConfigValue { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn load_priors(dir: &Path, data: &Dataset) -> spsnerf::Result<Vec<ViewPrior>> {
    data.train.iter().map(|v| ViewPrior::read(dir, &v.name)).collect()
}

fn run(cli: Cli) -> spsnerf::Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::MakeScene { kind, size, views, noise, out } => {
            let scene = make_scene(kind, 256, seed)?;
            let spec = DatasetSpec { image_size: size, n_views: views, noise, seed, ..Default::default() };
            make_dataset(&scene, kind, &spec)?.write(&out)?;
        }
        Cmd::Sgm { dataset, ref_view, aux_view, factor, window, out } => {
            let data = Dataset::read(&dataset)?;
            let mut params = SgmParams::default();
            if let Some(w) = window {
                params.window = w;
            }
            let pairs: Vec<(String, String)> = match (ref_view, aux_view) {
                (Some(r), Some(a)) => vec![(r, a)],
                _ => (0..data.train.len()).map(|k| (data.train[k].name.clone(), data.train[data.stereo_partner(k)].name.clone())).collect(),
            };
            for (r, a) in pairs {
                let find = |n: &str| data.view(n).ok_or_else(|| Error::InvalidArgument(format!("unknown view `{n}`")));
                let (rv, av) = (find(&r)?, find(&a)?);
                let maps = compute_prior(&rv.image, &av.image, &rv.camera, &av.camera, &data.envelope, factor, &params)?;
                ViewPrior::from(maps).write(&out, &r)?;
            }
        }
        Cmd::Train { dataset, priors, config, variant, overrides, resume, out } => {
            let data = Dataset::read(&dataset)?;
            let mut model = match resume {
                Some(ck) => Model::read(ck)?,
                None => {
                    let mut cfg = match config {
                        Some(p) => TrainConfig::from_text(&fs::read_to_string(&p).map_err(io_err(&p))?)?,
                        None => TrainConfig::desk(),
                    };
                    cfg.seed = seed;
                    if let Some(v) = variant {
                        cfg.variant = v;
                    }
                    for kv in &overrides {
                        let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("`{kv}` is not key=value")))?;
                        cfg.set(k.trim(), v.trim())?;
                    }
                    cfg.validate()?;
                    Model::new(cfg, data.envelope)?
                }
            };
            let priors = match (&priors, model.cfg.variant.uses_priors()) {
                (Some(dir), true) => Some(load_priors(dir, &data)?),
                (None, true) => return Err(Error::InvalidArgument(format!("variant {} needs --priors", model.cfg.variant))),
                (_, false) => None,
            };
            let set = TrainSet::new(&data, priors.as_deref(), &model.cfg)?;
            train(&mut model, &set, Some(&out))?;
        }
        Cmd::Render { checkpoint, view, dataset, out } => {
            let model = Model::read(&checkpoint)?;
            let camera = match dataset {
                Some(d) => {
                    let data = Dataset::read(&d)?;
                    data.view(&view).ok_or_else(|| Error::InvalidArgument(format!("unknown view `{view}`")))?.camera.clone()
                }
                None => Camera::read(&view)?,
            };
            let (rgb, depth) = model.render_view(&camera, seed)?;
            if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(p).map_err(io_err(p))?;
            }
            let stem = out.to_string_lossy().trim_end_matches(".png").to_string();
            rgb.write_png(format!("{stem}.png"))?;
            depth.write_flt(format!("{stem}_depth.flt"))?;
        }
        Cmd::Dsm { checkpoint, gsd, out } => {
            let model = Model::read(&checkpoint)?;
            extract_dsm(&model, gsd, seed)?.write(&out)?;
        }
        Cmd::GtDsm { dataset, gsd, priors, out } => {
            let data = Dataset::read(&dataset)?;
            let gt = ground_truth_dsm(&data.scene, &data.envelope, gsd)?;
            gt.write(&out)?;
            if let Some(dir) = priors {
                let mask = dsm_valid_mask(&gt, &data, &load_priors(&dir, &data)?)?;
                mask.write_flt(out.with_file_name(format!("{}_valid.flt", out.file_stem().unwrap_or_default().to_string_lossy())))?;
            }
        }
        Cmd::Eval { pred, gt, valid_mask, report } => {
            let is_png = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let rep = if is_png(&pred) && is_png(&gt) {
                let (a, b) = (Raster::read_png(&pred)?, Raster::read_png(&gt)?);
                Report { psnr: Some(psnr(&a, &b)?), ssim: Some(ssim(&a, &b)?), ..Default::default() }
            } else {
                let (a, b) = (Dsm::read(&pred)?, Dsm::read(&gt)?);
                let mask = match valid_mask {
                    Some(p) => Raster::read_flt(p)?,
                    None => Raster::filled(b.elevation.width, b.elevation.height, 1, 1.0),
                };
                let (mae_in, mae_out) = mae_split(&a, &b, &mask)?;
                Report { mae_in, mae_out, ..Default::default() }
            };
            let text = rep.to_text();
            print!("{text}");
            if let Some(p) = report {
                fs::write(&p, text).map_err(io_err(&p))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    spsnerf::par::configure_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
