//! Key-layer attention, pseudo-gradient averaging and the server optimizer.

mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::ResidualPacket;
use crate::tensor::{cosine, dot, ParamSet, Role, Tensor};
use crate::topology::NodeId;

pub use schedule::{lr_at, ScheduleConfig, ScheduleShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

pub fn similarity(kind: Similarity, a: &[f32], b: &[f32]) -> f64 {
    match kind {
        Similarity::Cosine => cosine(a, b),
        Similarity::Dot => dot(a, b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    #[serde(default = "default_similarity")]
    pub similarity: Similarity,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "yes")]
    pub include_self: bool,
    /// When false every node keeps its own key layers.
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn default_similarity() -> Similarity {
    Similarity::Cosine
}

fn default_temperature() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            similarity: default_similarity(),
            temperature: default_temperature(),
            include_self: true,
            enabled: true,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "attention.temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Where an attention candidate came from. The derived order is the canonical
/// reduction order: self, parent, children by id, residuals by origin/round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Own { node: NodeId },
    Parent { node: NodeId },
    Child { node: NodeId },
    Residual { node: NodeId, round: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub origin: Origin,
    pub key: &'a Tensor,
    pub value: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Tensor,
    /// Softmax weights in canonical candidate order.
    pub weights: Vec<(Origin, f64)>,
}

/// Softmax attention of one layer over candidate layers.
///
/// Scores are `sim(query, key) / temperature`; the output is the
/// weight-averaged candidate values, accumulated in `f64` in canonical order
/// and named after the query.
pub fn attend_layer(
    query: &Tensor,
    candidates: &[Candidate<'_>],
    cfg: &AttentionConfig,
) -> Result<Attended> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::Empty("attention candidates"));
    }
    for c in candidates {
        if c.key.shape() != query.shape() || c.value.shape() != query.shape() {
            return Err(Error::ShapeMismatch(format!(
                "attention over `{}` {:?}: candidate {:?} has key {:?} value {:?}",
                query.name(),
                query.shape(),
                c.origin,
                c.key.shape(),
                c.value.shape()
            )));
        }
    }
    let mut ordered: Vec<&Candidate<'_>> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.origin);

    let scores: Vec<f64> = ordered
        .iter()
        .map(|c| similarity(cfg.similarity, query.data(), c.key.data()) / cfg.temperature)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let mut acc = vec![0.0f64; query.numel()];
    for (c, &w) in ordered.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(c.value.data()) {
            *a += w * v as f64;
        }
    }
    let output = Tensor::new(
        query.name(),
        query.shape().to_vec(),
        acc.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok(Attended { output, weights: ordered.iter().map(|c| c.origin).zip(weights).collect() })
}

/// One attention weight, for offline analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: String,
    pub origin: Origin,
    pub weight: f64,
}

fn collect_records(layer: &str, att: &Attended, log: &mut Vec<AttentionRecord>) {
    for (origin, weight) in &att.weights {
        log.push(AttentionRecord { layer: layer.to_string(), origin: *origin, weight: *weight });
    }
}

/// Per-layer attention of a server's own keys over its children's keys.
///
/// Each candidate serves as its own key and value; children are taken in id
/// order and the server's own layer is candidate zero when `include_self`.
pub fn aggregate_child_keys(
    node: NodeId,
    own_keys: &ParamSet,
    child_keys: &[(NodeId, ParamSet)],
    cfg: &AttentionConfig,
) -> Result<(ParamSet, Vec<AttentionRecord>)> {
    for (_, k) in child_keys {
        own_keys.check_congruent(k)?;
    }
    let mut log = Vec::new();
    if !cfg.enabled {
        return Ok((own_keys.clone(), log));
    }
    let mut out = ParamSet::new(Role::Keys);
    for own in own_keys.iter() {
        let mut cands = Vec::with_capacity(child_keys.len() + 1);
        if cfg.include_self {
            cands.push(Candidate { origin: Origin::Own { node }, key: own, value: own });
        }
        for (id, keys) in child_keys {
            let t = keys.get(own.name()).expect("congruent");
            cands.push(Candidate { origin: Origin::Child { node: *id }, key: t, value: t });
        }
        let att = attend_layer(own, &cands, cfg)?;
        collect_records(own.name(), &att, &mut log);
        out.push(att.output)?;
    }
    Ok((out, log))
}

/// Per-layer attention of a node's keys over itself, its parent and any
/// residual packets addressed to it.
pub fn merge_with_parent(
    node: NodeId,
    own_keys: &ParamSet,
    parent: (NodeId, &ParamSet),
    residuals: &[ResidualPacket],
    cfg: &AttentionConfig,
) -> Result<(ParamSet, Vec<AttentionRecord>)> {
    own_keys.check_congruent(parent.1)?;
    for p in residuals {
        let layer = own_keys.get(&p.layer).ok_or_else(|| Error::UnknownLayer(p.layer.clone()))?;
        if layer.shape() != p.tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "residual `{}` {:?} vs {:?}",
                p.layer,
                p.tensor.shape(),
                layer.shape()
            )));
        }
    }
    let mut log = Vec::new();
    if !cfg.enabled {
        return Ok((own_keys.clone(), log));
    }
    let mut out = ParamSet::new(Role::Keys);
    for own in own_keys.iter() {
        let mut cands = Vec::new();
        if cfg.include_self {
            cands.push(Candidate { origin: Origin::Own { node }, key: own, value: own });
        }
        let pt = parent.1.get(own.name()).expect("congruent");
        cands.push(Candidate { origin: Origin::Parent { node: parent.0 }, key: pt, value: pt });
        let renamed: Vec<(Origin, Tensor)> = residuals
            .iter()
            .filter(|p| p.layer == own.name())
            .map(|p| {
                (Origin::Residual { node: p.origin, round: p.created_round }, p.tensor.renamed(own.name()))
            })
            .collect();
        for (origin, t) in &renamed {
            cands.push(Candidate { origin: *origin, key: t, value: t });
        }
        let att = attend_layer(own, &cands, cfg)?;
        collect_records(own.name(), &att, &mut log);
        out.push(att.output)?;
    }
    Ok((out, log))
}

/// Unweighted mean, accumulated in `f64` in the order given.
pub fn average_pseudograds(deltas: &[ParamSet]) -> Result<ParamSet> {
    let first = deltas.first().ok_or(Error::Empty("pseudo-gradient list"))?;
    for d in &deltas[1..] {
        first.check_congruent(d)?;
    }
    let n = deltas.len() as f64;
    let mut out = first.zeros_like(Role::PseudoGradient);
    for (idx, dst) in out.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; dst.numel()];
        for d in deltas {
            for (a, &v) in acc.iter_mut().zip(d.tensors()[idx].data()) {
                *a += v as f64;
            }
        }
        for (o, a) in dst.data_mut().iter_mut().zip(acc) {
            *o = (a / n) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerOptConfig {
    /// Server learning rate.
    pub lr: f32,
    pub momentum: f32,
}

impl Default for ServerOptConfig {
    fn default() -> Self {
        Self { lr: 0.2, momentum: 0.9 }
    }
}

/// Momentum buffer of one server; persists across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub momentum: Option<ParamSet>,
    pub lr: f32,
    pub mu: f32,
}

impl ServerOptState {
    pub fn new(cfg: &ServerOptConfig) -> Self {
        Self { momentum: None, lr: cfg.lr, mu: cfg.momentum }
    }
}

/// `m <- mu*m + delta; backbone <- backbone + lr*m`
pub fn server_opt(
    backbone: &ParamSet,
    delta_mean: &ParamSet,
    mut state: ServerOptState,
) -> Result<(ParamSet, ServerOptState)> {
    backbone.check_congruent(delta_mean)?;
    let mut m = match state.momentum.take() {
        Some(m) => {
            backbone.check_congruent(&m)?;
            m
        }
        None => backbone.zeros_like(Role::PseudoGradient),
    };
    m.scale_in_place(state.mu);
    m.axpy_in_place(1.0, delta_mean)?;
    let mut next = backbone.clone();
    next.axpy_in_place(state.lr, &m)?;
    state.momentum = Some(m);
    Ok((next, state))
}
