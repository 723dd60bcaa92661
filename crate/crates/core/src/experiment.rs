//! Experiment configuration, presets and the run/compare/ablate drivers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{AttentionConfig, ScheduleConfig, ScheduleShape, ServerOptConfig};
use crate::datagen::{
    build_hierarchy_dataset, load_text_shard, make_clustered_sources_with, MixtureSpec, SamplingConfig, Shard,
    SourceShape, VocabMap,
};
use crate::engine::{evaluate_round, fit, run_centralized, EngineConfig, MetricRow, RoundSummary, RunLabels, RunOutput};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OptimizerKind, TrainerConfig};
use crate::privacy::DpConfig;
use crate::residual::ResidualConfig;
use crate::rng;
use crate::topology::{FederationTree, NodeConfig, NodeId, NodeSpec, TreeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub alpha: f64,
    pub eta_max: f64,
    /// Defaults to every sequential optimizer step of the hierarchical run.
    #[serde(default)]
    pub total_steps: Option<u64>,
    #[serde(default = "warmup_cosine")]
    pub shape: ScheduleShape,
}

fn warmup_cosine() -> ScheduleShape {
    ScheduleShape::WarmupCosine
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Clustered,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafData {
    pub dataset: String,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub tokens: Option<usize>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    #[serde(default = "one")]
    pub clusters: usize,
    #[serde(default = "one")]
    pub sources_per_cluster: usize,
    #[serde(default)]
    pub divergence: f64,
    #[serde(default)]
    pub source_shape: SourceShape,
    #[serde(default = "default_doc_len")]
    pub doc_len: usize,
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
    /// Two node names whose positions in the tree are exchanged.
    #[serde(default)]
    pub swap: Option<[String; 2]>,
    #[serde(rename = "leaf")]
    pub leaves: Vec<LeafData>,
}

fn one() -> usize {
    1
}

fn default_doc_len() -> usize {
    SamplingConfig::default().doc_len
}

fn default_eval_tokens() -> usize {
    SamplingConfig::default().eval_tokens
}

/// A complete experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelConfig,
    pub trainer: TrainerSection,
    #[serde(default)]
    pub attention: AttentionConfig,
    #[serde(default)]
    pub server: ServerOptConfig,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub dp: DpConfig,
    pub data: DataSection,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeConfig>,
}

const FIG2: &str = include_str!("../presets/fig2.toml");
const IID: &str = include_str!("../presets/iid.toml");

pub const PRESETS: [&str; 5] = ["fig2", "fig2-swapped", "iid", "dp-cc-wk", "dp-pbc-pba"];

fn preset_source(name: &str) -> Result<(&'static str, Vec<&'static str>)> {
    Ok(match name {
        "fig2" => (FIG2, vec![]),
        "fig2-swapped" => (FIG2, vec!["experiment.name=\"fig2-swapped\"", "data.swap=[\"wk\", \"pba\"]"]),
        "iid" => (IID, vec![]),
        "dp-cc-wk" => (FIG2, vec!["experiment.name=\"dp-cc-wk\"", "dp.nodes=[\"cc\", \"wk\"]", "dp.absolute_noise=true"]),
        "dp-pbc-pba" => (FIG2, vec!["experiment.name=\"dp-pbc-pba\"", "dp.nodes=[\"pbc\", \"pba\"]", "dp.absolute_noise=true"]),
        other => return Err(Error::UnknownPreset(other.to_string())),
    })
}

/// Sets a dotted key inside a TOML table. The value is parsed as TOML and
/// taken as a bare string when that fails.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_config(text: &str, overrides: &[String], origin: &str) -> Result<ExperimentConfig> {
    // Deserializing straight from the text keeps line numbers in type errors.
    if let Err(e) = toml::from_str::<ExperimentConfig>(text) {
        return Err(Error::Config(format!("{origin}: {e}")));
    }
    let mut doc: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {e}")))?;
    Ok(cfg)
}

pub fn load_preset(name: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let (text, base) = preset_source(name)?;
    let mut all: Vec<String> = base.into_iter().map(String::from).collect();
    all.extend(overrides.iter().cloned());
    parse_config(text, &all, &format!("preset `{name}`"))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, overrides, &path.display().to_string())
}

/// Text of a preset after its built-in overrides, as TOML.
pub fn preset_toml(name: &str) -> Result<String> {
    let cfg = load_preset(name, &[])?;
    toml::to_string(&cfg).map_err(|e| Error::Serialization(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Worldlm,
    FlatFl,
    Local,
    Centralized,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Worldlm, Method::FlatFl, Method::Local, Method::Centralized];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Worldlm => "worldlm",
            Method::FlatFl => "flat_fl",
            Method::Local => "local",
            Method::Centralized => "centralized",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected worldlm, flat_fl, local or centralized)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConfigSource {
    Preset(String),
    Path(PathBuf),
}

/// One fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub method: Method,
    pub source: ConfigSource,
    /// Hierarchy rounds; baselines get the same sequential-step budget.
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

impl ExperimentPlan {
    pub fn preset(name: &str, method: Method) -> Self {
        Self { method, source: ConfigSource::Preset(name.into()), rounds: None, seed: None, overrides: Vec::new() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = Some(rounds);
        self
    }

    pub fn with_override(mut self, o: impl Into<String>) -> Self {
        self.overrides.push(o.into());
        self
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.source {
            ConfigSource::Preset(name) => load_preset(name, &self.overrides)?,
            ConfigSource::Path(path) => load_config(path, &self.overrides)?,
        };
        if let Some(r) = self.rounds {
            cfg.experiment.rounds = r;
        }
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if cfg.experiment.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        match &self.source {
            ConfigSource::Preset(p) => format!("{p}:{}", self.method.as_str()),
            ConfigSource::Path(p) => format!("{}:{}", p.display(), self.method.as_str()),
        }
    }
}

/// Tree, shards and engine settings shared by every method.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub tree: FederationTree,
    pub shards: BTreeMap<NodeId, Shard>,
    pub trainer: TrainerConfig,
    /// Training stages per hierarchy round.
    pub stages: usize,
}

fn tree_config(cfg: &ExperimentConfig) -> Result<TreeConfig> {
    let mut tc = TreeConfig { nodes: cfg.nodes.clone() };
    if let Some([a, b]) = &cfg.data.swap {
        let ia = tc.nodes.iter().position(|n| &n.name == a);
        let ib = tc.nodes.iter().position(|n| &n.name == b);
        let (Some(ia), Some(ib)) = (ia, ib) else {
            return Err(Error::Config(format!("data.swap names unknown nodes `{a}`/`{b}`")));
        };
        let pa = tc.nodes[ia].parent.clone();
        tc.nodes[ia].parent = tc.nodes[ib].parent.clone();
        tc.nodes[ib].parent = pa;
    }
    Ok(tc)
}

pub fn training_stages(tree: &FederationTree) -> usize {
    tree.levels().iter().filter(|l| l.iter().any(|&id| tree.node(id).trains_locally)).count().max(1)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let provisional = TrainerConfig {
        optimizer: cfg.trainer.optimizer,
        beta1: cfg.trainer.beta1,
        beta2: cfg.trainer.beta2,
        local_steps: cfg.trainer.local_steps,
        batch_size: cfg.trainer.batch_size,
        schedule: ScheduleConfig {
            alpha: cfg.trainer.schedule.alpha,
            eta_max: cfg.trainer.schedule.eta_max,
            total_steps: cfg.trainer.schedule.total_steps.unwrap_or(1),
            shape: cfg.trainer.schedule.shape,
        },
    };
    let mut tree = tree_config(cfg)?.build(&provisional)?;
    let stages = training_stages(&tree);
    let max_steps = tree.nodes().map(|n| n.trainer.local_steps).max().unwrap_or(0);
    let total = cfg
        .trainer
        .schedule
        .total_steps
        .unwrap_or((cfg.experiment.rounds * stages * max_steps).max(1) as u64);
    let ids: Vec<NodeId> = tree.ids().collect();
    for id in ids {
        let node = tree.node_mut(id);
        node.trainer.schedule.total_steps = total;
        node.dp_enabled = node.dp_enabled || cfg.dp.nodes.contains(&node.name);
    }
    for name in &cfg.dp.nodes {
        let id = tree.id_of(name).ok_or_else(|| Error::Config(format!("dp.nodes names unknown node `{name}`")))?;
        if tree.parent(id).is_none() {
            return Err(Error::Config(format!("dp node `{name}` has no parent to aggregate it")));
        }
    }
    let mut trainer = provisional;
    trainer.schedule.total_steps = total;
    trainer.validate()?;

    let shards = match cfg.data.kind {
        DataKind::Clustered => {
            let sources = make_clustered_sources_with(
                cfg.data.clusters,
                cfg.data.sources_per_cluster,
                cfg.data.divergence,
                cfg.model.vocab_size,
                rng::derive_seed(cfg.experiment.seed, &["sources".into()]),
                &cfg.data.source_shape,
            )?;
            let mut assignment = BTreeMap::new();
            for leaf in &cfg.data.leaves {
                let (Some(source), Some(tokens)) = (&leaf.source, leaf.tokens) else {
                    return Err(Error::Config(format!("data.leaf `{}` needs source and tokens", leaf.dataset)));
                };
                assignment.insert(leaf.dataset.clone(), MixtureSpec::single(source.clone(), tokens));
            }
            let sampling = SamplingConfig { doc_len: cfg.data.doc_len, eval_tokens: cfg.data.eval_tokens };
            build_hierarchy_dataset(&tree, &assignment, &sources, &sampling, cfg.experiment.seed)?
        }
        DataKind::Text => text_shards(cfg, &tree)?,
    };
    Ok(Prepared { config: cfg.clone(), tree, shards, trainer, stages })
}

fn text_shards(cfg: &ExperimentConfig, tree: &FederationTree) -> Result<BTreeMap<NodeId, Shard>> {
    let mut vocab = VocabMap::new(cfg.model.vocab_size);
    let mut by_dataset = BTreeMap::new();
    for leaf in &cfg.data.leaves {
        let path = leaf
            .path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("data.leaf `{}` needs a path", leaf.dataset)))?;
        by_dataset.insert(leaf.dataset.clone(), load_text_shard(path, &mut vocab)?);
    }
    let mut out = BTreeMap::new();
    for node in tree.nodes() {
        let parts: Vec<&Shard> = tree
            .leaves_under(node.id)
            .iter()
            .map(|&l| {
                let key = &tree.node(l).dataset;
                by_dataset.get(key).ok_or_else(|| Error::Config(format!("no text for dataset `{key}`")))
            })
            .collect::<Result<_>>()?;
        let cat = |f: fn(&Shard) -> &Vec<u16>| parts.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
        out.insert(
            node.id,
            Shard {
                train: cat(|s| &s.train),
                val: cat(|s| &s.val),
                test: cat(|s| &s.test),
                provenance: MixtureSpec::merge(parts.iter().map(|s| &s.provenance)),
            },
        );
    }
    Ok(out)
}

fn engine_config(p: &Prepared, model: ModelConfig, rounds: usize) -> EngineConfig {
    let c = &p.config;
    EngineConfig {
        model,
        attention: c.attention.clone(),
        server: c.server.clone(),
        residual: c.residual.clone(),
        dp: c.dp.clone(),
        rounds,
        seed: c.experiment.seed,
        global_eval: false,
    }
}

/// Output of one method plus the names of the leaves it reports on.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub output: RunOutput,
    pub leaves: Vec<String>,
    pub root: Option<String>,
}

impl MethodRun {
    /// Leaf test perplexity at the last logged stage.
    pub fn final_leaf_summary(&self) -> RoundSummary {
        let last = self.output.metrics.iter().map(|r| r.round).max().unwrap_or(0);
        evaluate_round(&self.output.metrics, last, "test", &self.leaves).1
    }

    pub fn final_perplexity(&self, node: &str, split: &str) -> Option<f64> {
        let last = self.output.metrics.iter().map(|r| (r.round, r.stage)).max()?;
        self.output
            .metrics
            .iter()
            .find(|r| (r.round, r.stage) == last && r.name == node && r.split == split)
            .map(|r| r.perplexity)
    }

    /// Mean leaf test perplexity for every logged (round, stage).
    pub fn leaf_curve(&self) -> Vec<(usize, usize, f64)> {
        let mut keys: Vec<(usize, usize)> = self.output.metrics.iter().map(|r| (r.round, r.stage)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .filter_map(|(k, t)| {
                let v: Vec<f64> = self
                    .output
                    .metrics
                    .iter()
                    .filter(|r| r.round == k && r.stage == t && r.split == "test" && self.leaves.contains(&r.name))
                    .map(|r| r.perplexity)
                    .collect();
                (!v.is_empty()).then(|| (k, t, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }
}

pub fn run_method(p: &Prepared, method: Method, workers: usize) -> Result<MethodRun> {
    let cfg = &p.config;
    let labels = RunLabels { experiment: cfg.experiment.name.clone(), method: method.as_str().into() };
    let leaf_ids = p.tree.leaves();
    let leaves: Vec<String> = leaf_ids.iter().map(|&l| p.tree.node(l).name.clone()).collect();
    let baseline_rounds = cfg.experiment.rounds * p.stages;
    match method {
        Method::Worldlm => {
            let ec = engine_config(p, cfg.model.clone(), cfg.experiment.rounds);
            let output = fit(&ec, &p.tree, &p.shards, &labels, workers)?;
            Ok(MethodRun { method, output, leaves, root: Some(p.tree.node(0).name.clone()) })
        }
        Method::FlatFl => {
            let mut nodes = vec![NodeSpec {
                id: 0,
                name: "server".into(),
                parent: None,
                children: (1..=leaf_ids.len()).collect(),
                dataset: p.tree.node(0).dataset.clone(),
                trainer: p.trainer.clone(),
                dp_enabled: false,
                residual_ceiling: 0,
                trains_locally: false,
            }];
            let mut shards = BTreeMap::from([(0, p.shards[&0].clone())]);
            for (i, &l) in leaf_ids.iter().enumerate() {
                let src = p.tree.node(l);
                nodes.push(NodeSpec {
                    id: i + 1,
                    parent: Some(0),
                    children: vec![],
                    residual_ceiling: 0,
                    trains_locally: true,
                    ..src.clone()
                });
                shards.insert(i + 1, p.shards[&l].clone());
            }
            let tree = FederationTree::new(nodes)?;
            let model = ModelConfig { key_block_count: 0, include_head_in_keys: false, ..cfg.model.clone() };
            let mut ec = engine_config(p, model, baseline_rounds);
            ec.residual.enabled = false;
            // FL produces one shared model; leaves are scored with it
            ec.global_eval = true;
            let output = fit(&ec, &tree, &shards, &labels, workers)?;
            Ok(MethodRun { method, output, leaves, root: Some("server".into()) })
        }
        Method::Local => {
            let mut output = RunOutput::default();
            for &l in &leaf_ids {
                let spec = p.tree.node(l);
                let tree = FederationTree::new([NodeSpec {
                    id: 0,
                    parent: None,
                    children: vec![],
                    dp_enabled: false,
                    residual_ceiling: 0,
                    trains_locally: true,
                    ..spec.clone()
                }])?;
                let shards = BTreeMap::from([(0, p.shards[&l].clone())]);
                let ec = engine_config(p, cfg.model.clone(), baseline_rounds);
                let mut run = fit(&ec, &tree, &shards, &labels, workers)?;
                for row in &mut run.metrics {
                    row.node = l;
                }
                output.metrics.extend(run.metrics);
                output.timings.extend(run.timings);
                output.final_models.insert(l, run.final_models.remove(&0).expect("single node"));
            }
            Ok(MethodRun { method, output, leaves, root: None })
        }
        Method::Centralized => {
            let train: Vec<&[u16]> = leaf_ids.iter().map(|l| p.shards[l].train.as_slice()).collect();
            let eval: Vec<(NodeId, String, &Shard)> =
                leaf_ids.iter().map(|&l| (l, p.tree.node(l).name.clone(), &p.shards[&l])).collect();
            let ec = engine_config(p, cfg.model.clone(), baseline_rounds);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let output = pool.install(|| run_centralized(&ec, &p.trainer, &train, &eval, &labels))?;
            Ok(MethodRun { method, output, leaves, root: None })
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub plan: ExperimentPlan,
    pub method: Method,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub rounds: usize,
    pub baseline_rounds: usize,
    /// SHA-256 over the resolved config and every shard's tokens.
    pub content_hash: String,
    pub files: Vec<String>,
}

pub fn content_hash(p: &Prepared) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&p.config)?);
    for (id, shard) in &p.shards {
        h.update((*id as u64).to_le_bytes());
        for split in [&shard.train, &shard.val, &shard.test] {
            h.update((split.len() as u64).to_le_bytes());
            for t in split {
                h.update(t.to_le_bytes());
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Runs a plan and writes metrics, logs and a manifest into `out`.
pub fn cmd_run(plan: &ExperimentPlan, out: &Path, workers: usize) -> Result<MethodRun> {
    let cfg = plan.resolve()?;
    let prepared = prepare(&cfg)?;
    let run = run_method(&prepared, plan.method, workers)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("metrics.csv"), &run.output.metrics)?;
    write_csv(&out.join("attention.csv"), &run.output.attention)?;
    write_csv(&out.join("residuals.csv"), &run.output.residuals)?;
    write_csv(&out.join("dp.csv"), &run.output.dp)?;
    write_csv(&out.join("timings.csv"), &run.output.timings)?;
    let manifest = RunManifest {
        plan: plan.clone(),
        method: plan.method,
        seed: cfg.experiment.seed,
        rounds: cfg.experiment.rounds,
        baseline_rounds: cfg.experiment.rounds * prepared.stages,
        content_hash: content_hash(&prepared)?,
        config: cfg,
        files: ["metrics.csv", "attention.csv", "residuals.csv", "dp.csv", "timings.csv"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub seq_step: usize,
    pub leaves: usize,
    pub mean_perplexity: f64,
    pub std_perplexity: f64,
    /// This row's mean over the first row's mean.
    pub ratio_to_first: f64,
}

/// Final leaf test perplexity per plan; the ratio column is relative to the
/// first plan.
pub fn cmd_compare(plans: &[ExperimentPlan], workers: usize) -> Result<Vec<SummaryRow>> {
    let mut rows: Vec<SummaryRow> = Vec::with_capacity(plans.len());
    for plan in plans {
        let cfg = plan.resolve()?;
        let prepared = prepare(&cfg)?;
        let run = run_method(&prepared, plan.method, workers)?;
        let s = run.final_leaf_summary();
        rows.push(SummaryRow {
            label: plan.label(),
            method: plan.method.as_str().into(),
            seed: cfg.experiment.seed,
            seq_step: s.seq_step,
            leaves: s.nodes,
            mean_perplexity: s.mean_perplexity,
            std_perplexity: s.std_perplexity,
            ratio_to_first: f64::NAN,
        });
    }
    let first = rows.first().map(|r| r.mean_perplexity).unwrap_or(f64::NAN);
    for r in &mut rows {
        r.ratio_to_first = r.mean_perplexity / first;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Residuals,
    Attention,
    Dp,
    Swap,
    /// Toggles nothing; both arms are identical.
    None,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "residuals" => AblationAxis::Residuals,
            "attention" => AblationAxis::Attention,
            "dp" => AblationAxis::Dp,
            "swap" => AblationAxis::Swap,
            "none" => AblationAxis::None,
            other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        })
    }
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::Residuals => "residuals",
            AblationAxis::Attention => "attention",
            AblationAxis::Dp => "dp",
            AblationAxis::Swap => "swap",
            AblationAxis::None => "none",
        }
    }

    /// Overrides that switch the axis off relative to the base plan.
    fn toggle(&self, base: &ExperimentConfig) -> Vec<String> {
        match self {
            AblationAxis::Residuals => vec![format!("residual.enabled={}", !base.residual.enabled)],
            AblationAxis::Attention => vec![format!("attention.enabled={}", !base.attention.enabled)],
            AblationAxis::Dp => {
                if base.dp.nodes.is_empty() {
                    let leaves: Vec<String> =
                        base.data.leaves.iter().take(2).map(|l| format!("\"{}\"", l.dataset)).collect();
                    vec![format!("dp.nodes=[{}]", leaves.join(", "))]
                } else {
                    vec!["dp.nodes=[]".into()]
                }
            }
            AblationAxis::Swap => {
                if base.data.swap.is_some() {
                    vec!["data.swap=[]".into()]
                } else {
                    vec!["data.swap=[\"wk\", \"pba\"]".into()]
                }
            }
            AblationAxis::None => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub seed: u64,
    pub toggled: String,
    pub base_mean: f64,
    pub toggled_mean: f64,
    /// `toggled_mean - base_mean`
    pub delta: f64,
}

/// Runs the base plan and a copy with one axis toggled for each seed.
pub fn cmd_ablate(base: &ExperimentPlan, axis: AblationAxis, seeds: &[u64], workers: usize) -> Result<Vec<AblationRow>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let plan = base.clone().with_seed(seed);
        let base_cfg = plan.resolve()?;
        let toggles = axis.toggle(&base_cfg);
        let mut toggled_plan = plan.clone();
        toggled_plan.overrides.extend(toggles.iter().cloned());
        let a = run_method(&prepare(&base_cfg)?, plan.method, workers)?.final_leaf_summary();
        let b = run_method(&prepare(&toggled_plan.resolve()?)?, plan.method, workers)?.final_leaf_summary();
        out.push(AblationRow {
            axis: axis.as_str().into(),
            seed,
            toggled: toggles.join(" "),
            base_mean: a.mean_perplexity,
            toggled_mean: b.mean_perplexity,
            delta: b.mean_perplexity - a.mean_perplexity,
        });
    }
    Ok(out)
}

/// Metrics rows of a run, for callers that only need the table.
pub fn metrics_of(run: &MethodRun) -> &[MetricRow] {
    &run.output.metrics
}
