//! Stage-wise execution of a federation tree.
//!
//! One engine round runs the tree top-down one level per stage. At its stage
//! a node takes its parent's freshly trained backbone, merges its keys with
//! the parent's keys and any residuals addressed to it, routes the residuals
//! it holds towards its children and trains locally. After the deepest stage
//! servers aggregate bottom-up: pseudo-gradients are averaged and applied
//! with momentum, child keys are combined by attention, and dissimilar child
//! layers are selected as residuals.
//!
//! All nodes of a level run concurrently; every random stream is keyed by
//! node name and round and every reduction runs in id order, so the thread
//! count never changes the output.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_child_keys, average_pseudograds, merge_with_parent, server_opt, AttentionConfig,
    AttentionRecord, Origin, ServerOptConfig, ServerOptState,
};
use crate::datagen::Shard;
use crate::error::{Error, Result};
use crate::model::{evaluate, init_model, local_train, ModelConfig, Partition, TokenId};
use crate::privacy::{sanitize, update_bound, ClipState, DpConfig, DpRecord};
use crate::residual::{
    partition_residuals, route_residuals, DropReason, KeyCache, ResidualConfig, ResidualPacket,
};
use crate::rng;
use crate::tensor::ParamSet;
use crate::topology::{validate, FederationTree, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub attention: AttentionConfig,
    #[serde(default)]
    pub server: ServerOptConfig,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub dp: DpConfig,
    pub rounds: usize,
    pub seed: u64,
    /// Evaluate every node with the root's model instead of its own.
    #[serde(default)]
    pub global_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLabels {
    pub experiment: String,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub method: String,
    pub node: NodeId,
    pub name: String,
    pub round: usize,
    pub stage: usize,
    /// Sequential training stages completed when the row was taken.
    pub seq_step: usize,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub round: usize,
    pub node: NodeId,
    /// `merge` at stage entry or `aggregate` after the children report.
    pub phase: String,
    pub layer: String,
    pub origin_kind: String,
    pub origin_node: NodeId,
    pub residual_round: Option<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub round: usize,
    pub event: String,
    pub origin: NodeId,
    pub layer: String,
    pub created_round: usize,
    pub at: NodeId,
    pub path: String,
    pub hop_sims: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub round: usize,
    pub stage: usize,
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub metrics: Vec<MetricRow>,
    pub attention: Vec<AttentionRow>,
    pub residuals: Vec<ResidualRow>,
    pub dp: Vec<DpRecord>,
    pub timings: Vec<TimingRow>,
    pub final_models: BTreeMap<NodeId, ParamSet>,
}

/// Per-node state carried across rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub node: NodeId,
    pub backbone: ParamSet,
    pub keys: ParamSet,
    /// Residuals headed for the parent.
    pub upstream: Vec<ResidualPacket>,
    /// Residuals to aggregate at the next merge.
    pub downstream_agg: Vec<ResidualPacket>,
    /// Residuals to route at the next stage.
    pub downstream_route: Vec<ResidualPacket>,
    pub cache: KeyCache,
    pub server: ServerOptState,
    pub clip: ClipState,
}

fn attention_rows(round: usize, node: NodeId, phase: &str, log: Vec<AttentionRecord>) -> Vec<AttentionRow> {
    log.into_iter()
        .map(|r| {
            let (kind, origin_node, residual_round) = match r.origin {
                Origin::Own { node } => ("own", node, None),
                Origin::Parent { node } => ("parent", node, None),
                Origin::Child { node } => ("child", node, None),
                Origin::Residual { node, round } => ("residual", node, Some(round)),
            };
            AttentionRow {
                round,
                node,
                phase: phase.to_string(),
                layer: r.layer,
                origin_kind: kind.to_string(),
                origin_node,
                residual_round,
                weight: r.weight,
            }
        })
        .collect()
}

fn residual_row(round: usize, event: &str, p: &ResidualPacket, at: NodeId) -> ResidualRow {
    ResidualRow {
        round,
        event: event.to_string(),
        origin: p.origin,
        layer: p.layer.clone(),
        created_round: p.created_round,
        at,
        path: p.path.iter().map(ToString::to_string).collect::<Vec<_>>().join(">"),
        hop_sims: p.hop_sims.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(";"),
    }
}

struct StageOut {
    node: NodeId,
    backbone: ParamSet,
    keys: ParamSet,
    held: Vec<ResidualPacket>,
    to_agg: BTreeMap<NodeId, Vec<ResidualPacket>>,
    to_route: BTreeMap<NodeId, Vec<ResidualPacket>>,
    attention: Vec<AttentionRow>,
    residuals: Vec<ResidualRow>,
}

struct AggOut {
    node: NodeId,
    backbone: ParamSet,
    keys: ParamSet,
    server: ServerOptState,
    clip: ClipState,
    route_here: Vec<ResidualPacket>,
    upstream: Vec<ResidualPacket>,
    attention: Vec<AttentionRow>,
    residuals: Vec<ResidualRow>,
    dp: Vec<DpRecord>,
}

/// Seed of the local-training stream of a node in a round.
pub fn train_seed(seed: u64, name: &str, round: usize) -> u64 {
    rng::derive_seed(seed, &["train".into(), name.into(), round.into()])
}

/// Seed shared by every node's initial model.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &["init".into()])
}

struct Plan {
    levels: Vec<Vec<NodeId>>,
    /// Training stages preceding each level within a round.
    slot: Vec<usize>,
    trains: Vec<bool>,
    per_round: usize,
}

impl Plan {
    fn new(tree: &FederationTree) -> Self {
        let levels = tree.levels();
        let trains: Vec<bool> =
            levels.iter().map(|l| l.iter().any(|&id| tree.node(id).trains_locally)).collect();
        let mut slot = Vec::with_capacity(levels.len());
        let mut acc = 0;
        for &t in &trains {
            slot.push(acc);
            acc += t as usize;
        }
        Self { levels, slot, trains, per_round: acc }
    }

    /// Sequential step at which level `t` trains in round `k`.
    fn step(&self, k: usize, t: usize) -> usize {
        k * self.per_round + self.slot[t]
    }

    /// Sequential steps completed once level `t` of round `k` is done.
    fn done(&self, k: usize, t: usize) -> usize {
        self.step(k, t) + self.trains[t] as usize
    }
}

pub struct Engine<'a> {
    cfg: &'a EngineConfig,
    tree: &'a FederationTree,
    shards: &'a BTreeMap<NodeId, Shard>,
    partition: Partition,
    plan: Plan,
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a EngineConfig, tree: &'a FederationTree, shards: &'a BTreeMap<NodeId, Shard>) -> Result<Self> {
        cfg.model.validate()?;
        cfg.attention.validate()?;
        cfg.dp.validate()?;
        if cfg.residual.nu < 0 {
            return Err(Error::Config(format!("residual nu must be non-negative, got {}", cfg.residual.nu)));
        }
        let violations = validate(tree);
        if !violations.is_empty() {
            return Err(Error::Topology(violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")));
        }
        for node in tree.nodes() {
            if !shards.contains_key(&node.id) {
                return Err(Error::Config(format!("node `{}` has no shard", node.name)));
            }
            node.trainer.validate()?;
        }
        Ok(Self { cfg, tree, shards, partition: cfg.model.partition(), plan: Plan::new(tree) })
    }

    fn initial_states(&self) -> Result<BTreeMap<NodeId, RoundState>> {
        let model = init_model(&self.cfg.model, init_seed(self.cfg.seed))?;
        let (backbone, keys) = self.partition.split(&model)?;
        Ok(self
            .tree
            .ids()
            .map(|id| {
                let st = RoundState {
                    node: id,
                    backbone: backbone.clone(),
                    keys: keys.clone(),
                    upstream: Vec::new(),
                    downstream_agg: Vec::new(),
                    downstream_route: Vec::new(),
                    cache: KeyCache::default(),
                    server: ServerOptState::new(&self.cfg.server),
                    clip: ClipState::new(self.cfg.dp.initial_bound),
                };
                (id, st)
            })
            .collect())
    }

    fn ttl(&self) -> usize {
        2 * self.tree.depth()
    }

    fn stage_node(&self, q: NodeId, k: usize, t: usize, states: &BTreeMap<NodeId, RoundState>) -> Result<StageOut> {
        let spec = self.tree.node(q);
        let st = &states[&q];
        let mut attention = Vec::new();
        let mut residuals = Vec::new();
        let (mut backbone, mut keys) = (st.backbone.clone(), st.keys.clone());
        if let Some(p) = spec.parent {
            let parent = &states[&p];
            backbone = parent.backbone.clone();
            let (merged, log) =
                merge_with_parent(q, &keys, (p, &parent.keys), &st.downstream_agg, &self.cfg.attention)?;
            keys = merged;
            attention.extend(attention_rows(k, q, "merge", log));
            for packet in &st.downstream_agg {
                residuals.push(residual_row(k, "aggregated", packet, q));
            }
        }

        let routed = route_residuals(
            q,
            st.downstream_route.clone(),
            &st.cache,
            self.tree,
            &self.cfg.attention,
            k,
            self.ttl(),
        )?;
        for (packet, reason) in &routed.dropped {
            let event = match reason {
                DropReason::OriginExclusion => "dropped_origin_exclusion",
                DropReason::Expired => "dropped_expired",
            };
            residuals.push(residual_row(k, event, packet, q));
        }

        if spec.trains_locally {
            let model = self.partition.join(&self.cfg.model, &backbone, &keys)?;
            let global_step = (self.plan.step(k, t) * spec.trainer.local_steps) as u64;
            let (trained, _) = local_train(
                &self.cfg.model,
                &model,
                &self.shards[&q].train,
                &spec.trainer,
                train_seed(self.cfg.seed, &spec.name, k),
                global_step,
            )?;
            (backbone, keys) = self.partition.split(&trained)?;
        }

        Ok(StageOut {
            node: q,
            backbone,
            keys,
            held: routed.held,
            to_agg: routed.aggregate,
            to_route: routed.forward,
            attention,
            residuals,
        })
    }

    fn aggregate_node(&self, q: NodeId, k: usize, states: &BTreeMap<NodeId, RoundState>) -> Result<AggOut> {
        let st = &states[&q];
        let children = self.tree.children(q);
        let mut clip = st.clip.clone();
        let mut dp = Vec::new();
        let mut deltas = Vec::with_capacity(children.len());
        for &c in children {
            let child = self.tree.node(c);
            let delta = states[&c].backbone.sub(&st.backbone)?;
            if child.dp_enabled {
                let mut noise = rng::stream(self.cfg.seed, &["dp".into(), child.name.as_str().into(), k.into()]);
                let (sanitized, rec) = sanitize(&delta, &self.cfg.dp, &mut clip, &mut noise, c, k)?;
                deltas.push(sanitized);
                dp.push(rec);
            } else {
                deltas.push(delta);
            }
        }
        if !dp.is_empty() {
            update_bound(&mut clip);
        }
        let mean = average_pseudograds(&deltas)?;
        let (backbone, server) = server_opt(&st.backbone, &mean, st.server.clone())?;

        let child_keys: Vec<(NodeId, ParamSet)> = children.iter().map(|&c| (c, states[&c].keys.clone())).collect();
        let (keys, log) = aggregate_child_keys(q, &st.keys, &child_keys, &self.cfg.attention)?;
        let attention = attention_rows(k, q, "aggregate", log);

        let mut residuals = Vec::new();
        let mut outgoing = Vec::new();
        for mut packet in partition_residuals(q, &keys, &child_keys, &self.cfg.residual, &self.cfg.attention, k)? {
            packet.ceiling = self.tree.node(packet.origin).residual_ceiling;
            if packet.ceiling == packet.origin {
                continue;
            }
            residuals.push(residual_row(k, "emitted", &packet, q));
            outgoing.push(packet);
        }
        for &c in children {
            for packet in &states[&c].upstream {
                let mut packet = packet.clone();
                packet.path.push(q);
                outgoing.push(packet);
            }
        }
        let (mut route_here, mut upstream) = (Vec::new(), Vec::new());
        for packet in outgoing {
            if packet.ceiling == q || self.tree.parent(q).is_none() {
                route_here.push(packet);
            } else {
                upstream.push(packet);
            }
        }
        Ok(AggOut { node: q, backbone, keys, server, clip, route_here, upstream, attention, residuals, dp })
    }

    fn evaluate_all(
        &self,
        k: usize,
        t: usize,
        states: &BTreeMap<NodeId, RoundState>,
        labels: &RunLabels,
    ) -> Result<Vec<MetricRow>> {
        let ids: Vec<NodeId> = self.tree.ids().collect();
        let per_node: Vec<Vec<MetricRow>> = ids
            .par_iter()
            .map(|&q| -> Result<Vec<MetricRow>> {
                let st = if self.cfg.global_eval { &states[&0] } else { &states[&q] };
                let model = self.partition.join(&self.cfg.model, &st.backbone, &st.keys)?;
                let shard = &self.shards[&q];
                let mut rows = Vec::with_capacity(2);
                for (split, tokens) in [("val", &shard.val), ("test", &shard.test)] {
                    let e = evaluate(&self.cfg.model, &model, tokens)?;
                    rows.push(MetricRow {
                        experiment: labels.experiment.clone(),
                        method: labels.method.clone(),
                        node: q,
                        name: self.tree.node(q).name.clone(),
                        round: k,
                        stage: t,
                        seq_step: self.plan.done(k, t),
                        split: split.to_string(),
                        loss: e.loss,
                        perplexity: e.perplexity,
                    });
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok(per_node.into_iter().flatten().collect())
    }

    /// Runs every round; `workers` bounds the thread pool (0 = all cores).
    pub fn run(&self, labels: &RunLabels, workers: usize) -> Result<RunOutput> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| self.run_inner(labels))
    }

    fn run_inner(&self, labels: &RunLabels) -> Result<RunOutput> {
        let mut out = RunOutput::default();
        let mut states = self.initial_states()?;
        let depth = self.plan.levels.len() - 1;
        for k in 0..self.cfg.rounds {
            for t in 0..=depth {
                let clock = Instant::now();
                let level = &self.plan.levels[t];
                let results: Vec<StageOut> =
                    level.par_iter().map(|&q| self.stage_node(q, k, t, &states)).collect::<Result<_>>()?;
                for r in results {
                    let st = states.get_mut(&r.node).expect("node state");
                    st.backbone = r.backbone;
                    st.keys = r.keys;
                    st.downstream_agg.clear();
                    st.downstream_route = r.held;
                    for (c, ps) in r.to_agg {
                        states.get_mut(&c).expect("child").downstream_agg.extend(ps);
                    }
                    for (c, ps) in r.to_route {
                        states.get_mut(&c).expect("child").downstream_route.extend(ps);
                    }
                    out.attention.extend(r.attention);
                    out.residuals.extend(r.residuals);
                }
                out.timings.push(TimingRow {
                    round: k,
                    stage: t,
                    phase: "train".into(),
                    seconds: clock.elapsed().as_secs_f64(),
                });

                if t == depth {
                    let clock = Instant::now();
                    self.aggregate_round(k, &mut states, &mut out)?;
                    out.timings.push(TimingRow {
                        round: k,
                        stage: t,
                        phase: "aggregate".into(),
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                }
                if self.plan.trains[t] || t == depth {
                    let clock = Instant::now();
                    out.metrics.extend(self.evaluate_all(k, t, &states, labels)?);
                    out.timings.push(TimingRow {
                        round: k,
                        stage: t,
                        phase: "eval".into(),
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                }
            }
        }
        for (id, st) in &states {
            out.final_models.insert(*id, self.partition.join(&self.cfg.model, &st.backbone, &st.keys)?);
        }
        Ok(out)
    }

    fn aggregate_round(&self, k: usize, states: &mut BTreeMap<NodeId, RoundState>, out: &mut RunOutput) -> Result<()> {
        for level in self.plan.levels.iter().rev() {
            let servers: Vec<NodeId> = level.iter().copied().filter(|&q| !self.tree.is_leaf(q)).collect();
            let results: Vec<AggOut> =
                servers.par_iter().map(|&q| self.aggregate_node(q, k, states)).collect::<Result<_>>()?;
            for r in results {
                let child_keys: Vec<(NodeId, ParamSet)> =
                    self.tree.children(r.node).iter().map(|&c| (c, states[&c].keys.clone())).collect();
                for &c in self.tree.children(r.node) {
                    states.get_mut(&c).expect("child").upstream.clear();
                }
                let st = states.get_mut(&r.node).expect("server state");
                st.backbone = r.backbone;
                st.keys = r.keys;
                st.server = r.server;
                st.clip = r.clip;
                st.cache.refresh(k, child_keys);
                st.downstream_route.extend(r.route_here);
                st.upstream = r.upstream;
                out.attention.extend(r.attention);
                out.residuals.extend(r.residuals);
                out.dp.extend(r.dp);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper around [`Engine`].
pub fn fit(
    cfg: &EngineConfig,
    tree: &FederationTree,
    shards: &BTreeMap<NodeId, Shard>,
    labels: &RunLabels,
    workers: usize,
) -> Result<RunOutput> {
    Engine::new(cfg, tree, shards)?.run(labels, workers)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub stage: usize,
    pub seq_step: usize,
    pub split: String,
    pub nodes: usize,
    pub mean_perplexity: f64,
    pub std_perplexity: f64,
}

/// Rows of the last stage logged in `round` for the given nodes, plus their
/// mean and standard deviation.
pub fn evaluate_round(rows: &[MetricRow], round: usize, split: &str, nodes: &[String]) -> (Vec<MetricRow>, RoundSummary) {
    let stage = rows.iter().filter(|r| r.round == round).map(|r| r.stage).max().unwrap_or(0);
    let picked: Vec<MetricRow> = rows
        .iter()
        .filter(|r| r.round == round && r.stage == stage && r.split == split && nodes.contains(&r.name))
        .cloned()
        .collect();
    let ppl: Vec<f64> = picked.iter().map(|r| r.perplexity).collect();
    let (mean, std) = mean_std(&ppl);
    let summary = RoundSummary {
        round,
        stage,
        seq_step: picked.first().map(|r| r.seq_step).unwrap_or(0),
        split: split.to_string(),
        nodes: picked.len(),
        mean_perplexity: mean,
        std_perplexity: std,
    };
    (picked, summary)
}

/// Single model trained on the union of `train_sets`, evaluated on each
/// named evaluation shard after every round.
pub fn run_centralized(
    cfg: &EngineConfig,
    trainer: &crate::model::TrainerConfig,
    train_sets: &[&[TokenId]],
    eval: &[(NodeId, String, &Shard)],
    labels: &RunLabels,
) -> Result<RunOutput> {
    cfg.model.validate()?;
    trainer.validate()?;
    let pooled: Vec<TokenId> = train_sets.concat();
    let mut model = init_model(&cfg.model, init_seed(cfg.seed))?;
    let mut out = RunOutput::default();
    for k in 0..cfg.rounds {
        let clock = Instant::now();
        model = local_train(
            &cfg.model,
            &model,
            &pooled,
            trainer,
            train_seed(cfg.seed, "centralized", k),
            (k * trainer.local_steps) as u64,
        )?
        .0;
        out.timings.push(TimingRow { round: k, stage: 0, phase: "train".into(), seconds: clock.elapsed().as_secs_f64() });
        let rows: Vec<Vec<MetricRow>> = eval
            .par_iter()
            .map(|(id, name, shard)| -> Result<Vec<MetricRow>> {
                let mut rows = Vec::new();
                for (split, tokens) in [("val", &shard.val), ("test", &shard.test)] {
                    let e = evaluate(&cfg.model, &model, tokens)?;
                    rows.push(MetricRow {
                        experiment: labels.experiment.clone(),
                        method: labels.method.clone(),
                        node: *id,
                        name: name.clone(),
                        round: k,
                        stage: 0,
                        seq_step: k + 1,
                        split: split.to_string(),
                        loss: e.loss,
                        perplexity: e.perplexity,
                    });
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        out.metrics.extend(rows.into_iter().flatten());
    }
    out.final_models.insert(0, model);
    Ok(out)
}
