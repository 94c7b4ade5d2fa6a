//! Sparse-view neural radiance fields supervised by low-resolution dense depth
//! priors whose confidence comes from stereo cross-correlation.
//!
//! The crate covers the whole workflow at desk scale: synthetic scenes with an
//! exact ground-truth renderer ([`synth`]), a semi-global matcher producing the
//! depth priors ([`sgm`]), a small coordinate network with hand-written
//! backward rules ([`field`], [`autodiff`]), two-group ray sampling
//! ([`sampler`]), differentiable compositing ([`renderer`]), the supervision
//! terms ([`supervision`]), training ([`trainer`]) and evaluation
//! ([`metrics`]).

pub mod autodiff;
pub mod config;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod par;
pub mod raster;
pub mod renderer;
pub mod sampler;
pub mod sgm;
pub mod supervision;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Camera, Ray, SceneEnvelope};
pub use raster::Raster;
