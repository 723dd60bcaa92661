//! Synthetic corpora from first-order Markov sources, hierarchical mixtures
//! over a federation tree, and byte-level text ingestion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::rng;
use crate::topology::{FederationTree, NodeId};

const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub id: String,
    pub vocab: usize,
    /// Row-major `vocab x vocab`.
    pub transition: Vec<f64>,
    pub initial: Vec<f64>,
}

impl MarkovSource {
    pub fn new(id: impl Into<String>, vocab: usize, transition: Vec<f64>, initial: Vec<f64>) -> Result<Self> {
        let src = Self { id: id.into(), vocab, transition, initial };
        src.validate()?;
        Ok(src)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab;
        if v < 2 || v > TokenId::MAX as usize + 1 {
            return Err(Error::Config(format!("source `{}`: vocab {v} out of range", self.id)));
        }
        if self.transition.len() != v * v || self.initial.len() != v {
            return Err(Error::ShapeMismatch(format!("source `{}` does not match vocab {v}", self.id)));
        }
        let rows = self.transition.chunks(v).chain(std::iter::once(self.initial.as_slice()));
        for (i, row) in rows.enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::Input(format!("source `{}` row {i} has an invalid entry", self.id)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("source `{}` row {i} sums to {s}", self.id)));
            }
        }
        Ok(())
    }

    pub fn prob(&self, from: TokenId, to: TokenId) -> f64 {
        self.transition[from as usize * self.vocab + to as usize]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.transition[from * self.vocab..(from + 1) * self.vocab]
    }

    /// Power iteration from the uniform distribution.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..STATIONARY_MAX_ITERS {
            let mut next = vec![0.0; v];
            for (i, &p) in pi.iter().enumerate() {
                for (n, &t) in next.iter_mut().zip(self.row(i)) {
                    *n += p * t;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < STATIONARY_TOL {
                return Ok(pi);
            }
        }
        Err(Error::NotConverged(STATIONARY_MAX_ITERS))
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        if len == 0 {
            return Vec::new();
        }
        let rows: Vec<WeightedIndex<f64>> = (0..self.vocab)
            .map(|i| WeightedIndex::new(self.row(i)).expect("validated row"))
            .collect();
        let init = WeightedIndex::new(&self.initial).expect("validated initial distribution");
        let mut out = Vec::with_capacity(len);
        let mut cur = init.sample(rng);
        out.push(cur as TokenId);
        while out.len() < len {
            cur = rows[cur].sample(rng);
            out.push(cur as TokenId);
        }
        out
    }

    /// Mean `-ln T[x_t, x_{t+1}]` over the sequence.
    pub fn mean_nll(&self, tokens: &[TokenId]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Empty("token sequence"));
        }
        let total: f64 = tokens.windows(2).map(|w| -self.prob(w[0], w[1]).ln()).sum();
        Ok(total / (tokens.len() - 1) as f64)
    }
}

/// `sum_i pi_i sum_j T_ij (-ln T_ij)` in nats per token.
pub fn entropy_rate(src: &MarkovSource) -> Result<f64> {
    let pi = src.stationary()?;
    let mut h = 0.0;
    for (i, &p) in pi.iter().enumerate() {
        let row_h: f64 = src.row(i).iter().filter(|&&t| t > 0.0).map(|&t| -t * t.ln()).sum();
        h += p * row_h;
    }
    Ok(h)
}

/// Shape of the random matrices behind [`make_clustered_sources`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceShape {
    /// Gamma shape of each row entry; small values give peaked rows.
    pub concentration: f64,
    /// Share of the source-specific matrix inside the divergent part.
    pub specific_share: f64,
    /// Mass spread uniformly over each row to keep chains ergodic.
    pub floor: f64,
}

impl Default for SourceShape {
    fn default() -> Self {
        Self { concentration: 0.2, specific_share: 0.3, floor: 1e-3 }
    }
}

fn random_stochastic<R: Rng + ?Sized>(v: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut m = Vec::with_capacity(v * v);
    for _ in 0..v {
        let row: Vec<f64> = (0..v).map(|_| gamma.sample(rng)).collect();
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            m.extend(row.iter().map(|x| x / s));
        } else {
            m.extend(std::iter::repeat_n(1.0 / v as f64, v));
        }
    }
    m
}

fn normalize_rows(m: &mut [f64], v: usize) {
    for row in m.chunks_mut(v) {
        let s: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= s;
        }
    }
}

/// Sources `c{k}s{j}` whose transitions are
/// `(1-div)*G + div*((1-rho)*C_k + rho*S_kj)`, plus a uniform floor.
pub fn make_clustered_sources(
    num_clusters: usize,
    sources_per_cluster: usize,
    divergence: f64,
    vocab: usize,
    seed: u64,
) -> Result<Vec<MarkovSource>> {
    make_clustered_sources_with(num_clusters, sources_per_cluster, divergence, vocab, seed, &SourceShape::default())
}

pub fn make_clustered_sources_with(
    num_clusters: usize,
    sources_per_cluster: usize,
    divergence: f64,
    vocab: usize,
    seed: u64,
    shape: &SourceShape,
) -> Result<Vec<MarkovSource>> {
    if vocab < 2 {
        return Err(Error::Config("source vocab must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&divergence) {
        return Err(Error::Config(format!("divergence must lie in [0, 1], got {divergence}")));
    }
    if !(shape.concentration > 0.0) || !(0.0..=1.0).contains(&shape.specific_share) || !(shape.floor >= 0.0) {
        return Err(Error::Config(format!("invalid source shape {shape:?}")));
    }
    let v = vocab;
    let global = random_stochastic(v, shape.concentration, &mut rng::stream(seed, &["sources".into(), "global".into()]));
    let mut out = Vec::new();
    for k in 0..num_clusters {
        let cluster =
            random_stochastic(v, shape.concentration, &mut rng::stream(seed, &["sources".into(), "cluster".into(), k.into()]));
        for j in 0..sources_per_cluster {
            let specific = random_stochastic(
                v,
                shape.concentration,
                &mut rng::stream(seed, &["sources".into(), "specific".into(), k.into(), j.into()]),
            );
            let rho = shape.specific_share;
            let mut t: Vec<f64> = (0..v * v)
                .map(|i| {
                    (1.0 - divergence) * global[i]
                        + divergence * ((1.0 - rho) * cluster[i] + rho * specific[i])
                        + shape.floor / v as f64
                })
                .collect();
            normalize_rows(&mut t, v);
            out.push(MarkovSource::new(format!("c{k}s{j}"), v, t, vec![1.0 / v as f64; v])?);
        }
    }
    Ok(out)
}

/// Mean total-variation distance between corresponding rows.
pub fn mean_row_tv(a: &MarkovSource, b: &MarkovSource) -> f64 {
    let v = a.vocab;
    let total: f64 = (0..v)
        .map(|i| 0.5 * a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    total / v as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub source: String,
    pub weight: f64,
    /// Training tokens drawn from this component.
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn single(source: impl Into<String>, tokens: usize) -> Self {
        Self { components: vec![MixtureComponent { source: source.into(), weight: 1.0, tokens }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Empty("mixture"));
        }
        if self.components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let s: f64 = self.components.iter().map(|c| c.weight).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {s}")));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.components.iter().map(|c| c.tokens).sum()
    }

    /// Budget-weighted union, components sorted by source id.
    pub fn merge<'a>(specs: impl IntoIterator<Item = &'a MixtureSpec>) -> MixtureSpec {
        let mut budget: BTreeMap<&str, usize> = BTreeMap::new();
        for spec in specs {
            for c in &spec.components {
                *budget.entry(c.source.as_str()).or_default() += c.tokens;
            }
        }
        let total: usize = budget.values().sum();
        MixtureSpec {
            components: budget
                .into_iter()
                .map(|(s, t)| MixtureComponent {
                    source: s.to_string(),
                    weight: if total == 0 { 0.0 } else { t as f64 / total as f64 },
                    tokens: t,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub train: Vec<TokenId>,
    pub val: Vec<TokenId>,
    pub test: Vec<TokenId>,
    pub provenance: MixtureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Tokens per document; documents are sampled whole from one component.
    pub doc_len: usize,
    /// Validation and test tokens per node.
    pub eval_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { doc_len: 128, eval_tokens: 4096 }
    }
}

fn sample_split(
    spec: &MixtureSpec,
    sources: &BTreeMap<&str, &MarkovSource>,
    total: usize,
    by_weight: bool,
    doc_len: usize,
    seed: u64,
    dataset: &str,
    split: &str,
) -> Result<Vec<TokenId>> {
    let mut docs: Vec<Vec<TokenId>> = Vec::new();
    for (idx, c) in spec.components.iter().enumerate() {
        let src = sources
            .get(c.source.as_str())
            .ok_or_else(|| Error::Config(format!("unknown source `{}`", c.source)))?;
        let mut want = if by_weight { (c.weight * total as f64).round() as usize } else { c.tokens };
        let mut rng = rng::stream(seed, &["data".into(), dataset.into(), split.into(), idx.into(), c.source.as_str().into()]);
        while want > 0 {
            let len = want.min(doc_len);
            docs.push(src.sample(len, &mut rng));
            want -= len;
        }
    }
    docs.shuffle(&mut rng::stream(seed, &["data".into(), dataset.into(), split.into(), "order".into()]));
    Ok(docs.concat())
}

/// Samples train/val/test for one mixture from independent streams keyed by
/// `dataset`.
pub fn sample_shard(
    dataset: &str,
    spec: &MixtureSpec,
    sources: &[MarkovSource],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Shard> {
    spec.validate()?;
    if sampling.doc_len == 0 || sampling.eval_tokens == 0 {
        return Err(Error::Config("doc_len and eval_tokens must be positive".into()));
    }
    let by_id: BTreeMap<&str, &MarkovSource> = sources.iter().map(|s| (s.id.as_str(), s)).collect();
    let train = sample_split(spec, &by_id, spec.total_tokens(), false, sampling.doc_len, seed, dataset, "train")?;
    let val = sample_split(spec, &by_id, sampling.eval_tokens, true, sampling.doc_len, seed, dataset, "val")?;
    let test = sample_split(spec, &by_id, sampling.eval_tokens, true, sampling.doc_len, seed, dataset, "test")?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Empty("shard split"));
    }
    Ok(Shard { train, val, test, provenance: spec.clone() })
}

/// Per-node shards: leaves use their assigned mixture, internal nodes the
/// budget-weighted union of their descendant leaves' mixtures.
pub fn build_hierarchy_dataset(
    tree: &FederationTree,
    assignment: &BTreeMap<String, MixtureSpec>,
    sources: &[MarkovSource],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<BTreeMap<NodeId, Shard>> {
    let mut specs: BTreeMap<NodeId, MixtureSpec> = BTreeMap::new();
    for leaf in tree.leaves() {
        let key = &tree.node(leaf).dataset;
        let spec = assignment
            .get(key)
            .ok_or_else(|| Error::Config(format!("leaf `{}` has no dataset assignment `{key}`", tree.node(leaf).name)))?;
        specs.insert(leaf, spec.clone());
    }
    let mut out = BTreeMap::new();
    for node in tree.nodes() {
        let spec = if tree.is_leaf(node.id) {
            specs[&node.id].clone()
        } else {
            MixtureSpec::merge(tree.leaves_under(node.id).iter().map(|l| &specs[l]))
        };
        out.insert(node.id, sample_shard(&node.dataset, &spec, sources, sampling, seed)?);
    }
    Ok(out)
}

/// Byte-to-token map assigning ids in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabMap {
    pub capacity: usize,
    pub bytes: Vec<u8>,
}

impl VocabMap {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, bytes: Vec::new() }
    }

    pub fn encode(&mut self, data: &[u8]) -> Result<Vec<TokenId>> {
        let mut index: BTreeMap<u8, TokenId> =
            self.bytes.iter().enumerate().map(|(i, &b)| (b, i as TokenId)).collect();
        let mut out = Vec::with_capacity(data.len());
        for &b in data {
            let id = match index.get(&b) {
                Some(&id) => id,
                None => {
                    if self.bytes.len() >= self.capacity {
                        return Err(Error::VocabOverflow(format!(
                            "byte {b:#04x} needs id {} but capacity is {}",
                            self.bytes.len(),
                            self.capacity
                        )));
                    }
                    let id = self.bytes.len() as TokenId;
                    self.bytes.push(b);
                    index.insert(b, id);
                    id
                }
            };
            out.push(id);
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u8>> {
        tokens
            .iter()
            .map(|&t| {
                self.bytes
                    .get(t as usize)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("token {t} is not in the vocabulary")))
            })
            .collect()
    }
}

/// Byte-level tokens of a file, split 90/5/5 in order.
pub fn load_text_shard(path: &Path, vocab: &mut VocabMap) -> Result<Shard> {
    let data = fs::read(path)?;
    if data.is_empty() {
        return Err(Error::Empty("text file"));
    }
    let tokens = vocab.encode(&data)?;
    let n = tokens.len();
    let n_train = n * 90 / 100;
    let n_val = n * 5 / 100;
    Ok(Shard {
        train: tokens[..n_train].to_vec(),
        val: tokens[n_train..n_train + n_val].to_vec(),
        test: tokens[n_train + n_val..].to_vec(),
        provenance: MixtureSpec::single(path.display().to_string(), n_train),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub dtype: String,
    pub splits: BTreeMap<String, (PathBuf, usize)>,
    pub provenance: MixtureSpec,
}

fn write_tokens(path: &Path, tokens: &[TokenId]) -> Result<()> {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_tokens(path: &Path, expected: usize) -> Result<Vec<TokenId>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 2 {
        return Err(Error::Serialization(format!(
            "{} holds {} bytes, manifest expects {expected} tokens",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

impl Shard {
    /// Writes `<stem>.{train,val,test}.u16` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut splits = BTreeMap::new();
        for (name, tokens) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let file = PathBuf::from(format!("{stem}.{name}.u16"));
            write_tokens(&dir.join(&file), tokens)?;
            splits.insert(name.to_string(), (file, tokens.len()));
        }
        let manifest = ShardManifest { dtype: "u16le".into(), splits, provenance: self.provenance.clone() };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Shard> {
        let manifest: ShardManifest = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        if manifest.dtype != "u16le" {
            return Err(Error::Serialization(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let get = |name: &str| -> Result<Vec<TokenId>> {
            let (file, n) = manifest
                .splits
                .get(name)
                .ok_or_else(|| Error::Serialization(format!("manifest lacks split `{name}`")))?;
            read_tokens(&dir.join(file), *n)
        };
        Ok(Shard { train: get("train")?, val: get("val")?, test: get("test")?, provenance: manifest.provenance })
    }
}
