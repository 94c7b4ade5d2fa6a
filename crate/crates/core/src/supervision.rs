//! Prior uncertainty, the clipped depth loss, the color loss and their sum.

use crate::error::{Error, Result};

/// Depth-loss weight found best for urban scenes.
pub const LAMBDA_URBAN: f64 = 1.0 / 3.0;
/// Depth-loss weight found best for rural scenes.
pub const LAMBDA_RURAL: f64 = 50.0 / 3.0;

/// Per-pixel depth prior. Invalid priors never supervise depth and never
/// guide train-time sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthPrior {
    pub depth: f64,
    /// Correlation clamped to [0, 1].
    pub corr: f64,
    pub valid: bool,
}

impl DepthPrior {
    pub const INVALID: DepthPrior = DepthPrior { depth: -1.0, corr: 0.0, valid: false };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: LAMBDA_URBAN, gamma: 1.0, m: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("m", self.m)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{k} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Raw NCC lies in [-1, 1]; negative values would flip the loss sign.
pub fn clamp_corr(raw: f64) -> f64 {
    raw.clamp(0.0, 1.0)
}

/// `Σ = γ (1 - corr) + m`.
pub fn prior_uncertainty(corr: f64, gamma: f64, m: f64) -> f64 {
    gamma * (1.0 - corr) + m
}

/// Whether the depth loss is active: `S > Σ` or `|D - D̄| > Σ`; ties are inactive.
pub fn in_rsub(depth: f64, prior: f64, std: f64, sigma: f64) -> bool {
    std > sigma || (depth - prior).abs() > sigma
}

/// One ray's contribution to the depth loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthTerm {
    pub depth: f64,
    pub prior: f64,
    pub corr: f64,
    pub std: f64,
    pub sigma: f64,
    pub valid: bool,
}

impl DepthTerm {
    pub fn active(&self) -> bool {
        self.valid && in_rsub(self.depth, self.prior, self.std, self.sigma)
    }

    fn weight(&self, power: u32) -> f64 {
        self.corr.powi(power as i32)
    }

    /// `corr^p (D - D̄)²` when active, exactly zero otherwise.
    pub fn loss(&self, power: u32) -> f64 {
        if self.active() {
            let r = self.depth - self.prior;
            self.weight(power) * r * r
        } else {
            0.0
        }
    }

    /// `∂loss/∂D`; zero whenever the ray is outside the active set.
    pub fn grad(&self, power: u32) -> f64 {
        if self.active() {
            2.0 * self.weight(power) * (self.depth - self.prior)
        } else {
            0.0
        }
    }
}

/// Sum of [`DepthTerm::loss`] over the batch.
pub fn depth_loss(batch: &[DepthTerm], power: u32) -> f64 {
    batch.iter().map(|t| t.loss(power)).sum()
}

/// `Σ ‖C - C̄‖²` over all rays.
pub fn color_loss(batch: &[([f64; 3], [f64; 3])]) -> f64 {
    batch
        .iter()
        .map(|(c, g)| c.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

pub fn total_loss(color: f64, depth: f64, lambda: f64) -> f64 {
    color + lambda * depth
}
