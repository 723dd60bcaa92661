//! Clipping and Gaussian noise for DP-flagged leaf updates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, ParamSet};
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Noise multiplier.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_bound")]
    pub initial_bound: f64,
    /// Use `sigma` as the absolute noise std instead of a multiple of the bound.
    #[serde(default)]
    pub absolute_noise: bool,
    /// Names of the nodes whose updates are sanitized.
    #[serde(default)]
    pub nodes: Vec<String>,
}

fn default_sigma() -> f64 {
    0.5
}

fn default_bound() -> f64 {
    1.0
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { sigma: default_sigma(), initial_bound: default_bound(), absolute_noise: false, nodes: Vec::new() }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("dp.sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.initial_bound > 0.0) {
            return Err(Error::Config(format!("dp.initial_bound must be > 0, got {}", self.initial_bound)));
        }
        Ok(())
    }

    pub fn noise_std(&self, bound: f64) -> f64 {
        if self.absolute_noise || self.sigma == 0.0 {
            self.sigma
        } else {
            self.sigma * bound
        }
    }
}

/// Clip bound shared by the DP children of one server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipState {
    /// Pre-clip norms recorded during the current round.
    pub norms: Vec<f64>,
    pub bound: f64,
}

impl ClipState {
    pub fn new(initial_bound: f64) -> Self {
        Self { norms: Vec::new(), bound: initial_bound }
    }

    pub fn record(&mut self, norm: f64) {
        self.norms.push(norm);
    }
}

/// Moves the bound to the median of the recorded norms (mean of the middle
/// two for an even count) and clears them. With no norms the bound is kept.
pub fn update_bound(state: &mut ClipState) -> f64 {
    if !state.norms.is_empty() {
        let mut sorted = std::mem::take(&mut state.norms);
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median =
            if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
        // a zero median would make the next bound invalid
        if median > 0.0 {
            state.bound = median;
        }
    }
    state.bound
}

/// Scales `delta` by `min(1, bound/||delta||)`; returns the pre-clip norm.
pub fn clip(delta: &ParamSet, bound: f64) -> (ParamSet, f64) {
    let norm = l2_norm(delta);
    let mut out = delta.clone();
    if norm > bound {
        out.scale_in_place((bound / norm) as f32);
    }
    (out, norm)
}

/// Adds i.i.d. `N(0, (sigma*scale)^2)` noise to every coordinate.
pub fn add_noise<R: Rng + ?Sized>(delta: &ParamSet, sigma: f64, scale: f64, rng: &mut R) -> Result<ParamSet> {
    let mut out = delta.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let std = sigma * scale;
    let normal = Normal::new(0.0f64, std)
        .map_err(|e| Error::Config(format!("noise std {std} is invalid: {e}")))?;
    for t in out.iter_mut() {
        for x in t.data_mut() {
            *x = (*x as f64 + normal.sample(rng)) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpRecord {
    pub round: usize,
    pub node: NodeId,
    pub pre_clip_norm: f64,
    pub bound: f64,
    pub noise_std: f64,
}

/// Clip then noise one child's update against its server's clip state.
pub fn sanitize<R: Rng + ?Sized>(
    delta: &ParamSet,
    cfg: &DpConfig,
    state: &mut ClipState,
    rng: &mut R,
    node: NodeId,
    round: usize,
) -> Result<(ParamSet, DpRecord)> {
    let bound = state.bound;
    let (clipped, norm) = clip(delta, bound);
    state.record(norm);
    let std = cfg.noise_std(bound);
    let noised = if cfg.absolute_noise {
        add_noise(&clipped, cfg.sigma, 1.0, rng)?
    } else {
        add_noise(&clipped, cfg.sigma, bound, rng)?
    };
    Ok((noised, DpRecord { round, node, pre_clip_norm: norm, bound, noise_std: std }))
}
