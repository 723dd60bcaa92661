//! Cross-federation residual sharing.
//!
//! After aggregating its children's keys a server picks, per key layer, the
//! children whose layer is least similar to its own aggregate and ships those
//! layers upward as [`ResidualPacket`]s. A server holding packets routes each
//! one to the child whose cached key layer is most similar; packets reaching a
//! leaf are aggregated there.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{similarity, AttentionConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use crate::topology::{FederationTree, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    /// Maximum number of child layers selected per key layer.
    pub nu: i64,
    /// Only layers with similarity strictly below this are emitted.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_enabled() -> bool {
    true
}

fn default_threshold() -> f64 {
    0.999
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self { enabled: true, nu: 1, threshold: default_threshold() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPacket {
    pub origin: NodeId,
    pub layer: String,
    pub tensor: Tensor,
    pub created_round: usize,
    /// Highest node this packet may reach.
    pub ceiling: NodeId,
    /// Nodes visited after selection, starting with the selecting server.
    pub path: Vec<NodeId>,
    /// Similarity at each routing hop (selection similarity first).
    pub hop_sims: Vec<f64>,
}

impl ResidualPacket {
    pub fn holder(&self) -> NodeId {
        *self.path.last().expect("packet path starts at the selecting server")
    }
}

/// A server's copy of its children's keys from the previous round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyCache {
    pub round: Option<usize>,
    pub keys: BTreeMap<NodeId, ParamSet>,
}

impl KeyCache {
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn refresh(&mut self, round: usize, keys: impl IntoIterator<Item = (NodeId, ParamSet)>) {
        self.round = Some(round);
        self.keys = keys.into_iter().collect();
    }
}

/// Selects, per key layer, up to `nu` child layers with the lowest similarity
/// to `own_keys` (ties go to the lower node id).
pub fn partition_residuals(
    server: NodeId,
    own_keys: &ParamSet,
    child_keys: &[(NodeId, ParamSet)],
    cfg: &ResidualConfig,
    attn: &AttentionConfig,
    round: usize,
) -> Result<Vec<ResidualPacket>> {
    if cfg.nu < 0 {
        return Err(Error::Config(format!("residual nu must be non-negative, got {}", cfg.nu)));
    }
    let mut out = Vec::new();
    if cfg.nu == 0 || !cfg.enabled {
        return Ok(out);
    }
    for (_, keys) in child_keys {
        own_keys.check_congruent(keys)?;
    }
    for own in own_keys.iter() {
        let own_flat = own.data();
        let mut scored: Vec<(f64, NodeId, &Tensor)> = child_keys
            .iter()
            .map(|(id, keys)| {
                let t = keys.get(own.name()).expect("congruent");
                (similarity(attn.similarity, own_flat, t.data()), *id, t)
            })
            .filter(|(s, _, _)| *s < cfg.threshold)
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (sim, id, t) in scored.into_iter().take(cfg.nu as usize) {
            out.push(ResidualPacket {
                origin: id,
                layer: own.name().to_string(),
                tensor: t.clone(),
                created_round: round,
                ceiling: id,
                path: vec![server],
                hop_sims: vec![sim],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Every child lies in the packet's origin subtree.
    OriginExclusion,
    Expired,
}

#[derive(Debug, Default)]
pub struct Routed {
    /// Packets for leaf children, aggregated on arrival.
    pub aggregate: BTreeMap<NodeId, Vec<ResidualPacket>>,
    /// Packets for internal children, routed further down.
    pub forward: BTreeMap<NodeId, Vec<ResidualPacket>>,
    /// Packets kept at this node because no key cache exists yet.
    pub held: Vec<ResidualPacket>,
    pub dropped: Vec<(ResidualPacket, DropReason)>,
}

/// Routes each packet to the child whose cached same-named layer is most
/// similar (ties go to the lower id), never into the packet's origin subtree.
///
/// Packets are processed sorted by `(origin, layer)`. Packets older than
/// `ttl` rounds are dropped.
pub fn route_residuals(
    node: NodeId,
    mut incoming: Vec<ResidualPacket>,
    cache: &KeyCache,
    tree: &FederationTree,
    attn: &AttentionConfig,
    round: usize,
    ttl: usize,
) -> Result<Routed> {
    incoming.sort_by(|a, b| {
        (a.origin, &a.layer, a.created_round).cmp(&(b.origin, &b.layer, b.created_round))
    });
    let mut routed = Routed::default();
    let children = tree.children(node);
    for mut packet in incoming {
        if round.saturating_sub(packet.created_round) > ttl {
            routed.dropped.push((packet, DropReason::Expired));
            continue;
        }
        if cache.is_empty() || children.is_empty() {
            routed.held.push(packet);
            continue;
        }
        let mut best: Option<(f64, NodeId)> = None;
        for &child in children {
            if tree.is_ancestor_or_self(child, packet.origin) {
                continue;
            }
            let Some(keys) = cache.keys.get(&child) else { continue };
            let layer = keys
                .get(&packet.layer)
                .ok_or_else(|| Error::UnknownLayer(packet.layer.clone()))?;
            if layer.shape() != packet.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "residual `{}` {:?} vs cached {:?}",
                    packet.layer,
                    packet.tensor.shape(),
                    layer.shape()
                )));
            }
            let sim = similarity(attn.similarity, packet.tensor.data(), layer.data());
            // children are iterated in ascending id, so strict > keeps the lower id on ties
            if best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, child));
            }
        }
        match best {
            None => routed.dropped.push((packet, DropReason::OriginExclusion)),
            Some((sim, child)) => {
                packet.path.push(child);
                packet.hop_sims.push(sim);
                let bucket = if tree.is_leaf(child) {
                    &mut routed.aggregate
                } else {
                    &mut routed.forward
                };
                bucket.entry(child).or_default().push(packet);
            }
        }
    }
    Ok(routed)
}
