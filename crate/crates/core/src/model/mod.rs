//! Tiny causal n-gram language model with hand-written gradients.
//!
//! The last `context_len` token embeddings are concatenated and projected to
//! `embed_dim`, then passed through `num_blocks` residual MLP blocks
//! (`d -> ratio*d -> tanh -> d`, added back to the stream) and an output head.
//! The final `key_block_count` blocks form the personalized key layers; all
//! other parameters are the backbone.

mod lm;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamSet, Role, Tensor};

pub use lm::{
    backward, backward_wide, forward_loss, forward_loss_wide, Batch, ForwardCache, WideCache,
    WideParams,
};
pub use train::{
    evaluate, evaluate_perplexity, local_train, Eval, OptimizerKind, TrainerConfig,
};

pub type TokenId = u16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub expansion_ratio: usize,
    pub key_block_count: usize,
    pub context_len: usize,
    #[serde(default)]
    pub include_head_in_keys: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("expansion_ratio", self.expansion_ratio),
            ("context_len", self.context_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.key_block_count > self.num_blocks {
            return Err(Error::Config(format!(
                "model.key_block_count ({}) exceeds num_blocks ({})",
                self.key_block_count, self.num_blocks
            )));
        }
        if self.vocab_size > TokenId::MAX as usize + 1 {
            return Err(Error::Config("model.vocab_size exceeds 16-bit token ids".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.expansion_ratio
    }

    /// `V*d + (n*d*d + d) + H*(2*d*e*d + e*d + d) + (d*V + V)`
    pub fn param_count(&self) -> usize {
        let (v, d, n, h) = (self.vocab_size, self.embed_dim, self.context_len, self.num_blocks);
        let hid = self.hidden_dim();
        v * d + (n * d * d + d) + h * (2 * d * hid + hid + d) + (d * v + v)
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, n) = (self.vocab_size, self.embed_dim, self.context_len);
        let hid = self.hidden_dim();
        let mut out = vec![
            ("embed".to_string(), vec![v, d]),
            ("input.weight".to_string(), vec![n * d, d]),
            ("input.bias".to_string(), vec![d]),
        ];
        for b in 0..self.num_blocks {
            out.push((format!("block{b}.fc1.weight"), vec![d, hid]));
            out.push((format!("block{b}.fc1.bias"), vec![hid]));
            out.push((format!("block{b}.fc2.weight"), vec![hid, d]));
            out.push((format!("block{b}.fc2.bias"), vec![d]));
        }
        out.push(("head.weight".to_string(), vec![d, v]));
        out.push(("head.bias".to_string(), vec![v]));
        out
    }

    pub fn partition(&self) -> Partition {
        let first_key_block = self.num_blocks - self.key_block_count;
        let mut backbone = Vec::new();
        let mut keys = Vec::new();
        for (name, _) in self.layout() {
            let is_key = match block_index(&name) {
                Some(b) => b >= first_key_block,
                None => self.include_head_in_keys && name.starts_with("head."),
            };
            if is_key {
                keys.push(name);
            } else {
                backbone.push(name);
            }
        }
        Partition { backbone_names: backbone, key_names: keys }
    }
}

fn block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("block")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

/// Split of the parameter names into backbone and key layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub backbone_names: Vec<String>,
    pub key_names: Vec<String>,
}

impl Partition {
    /// Checks the two lists are disjoint and cover exactly `params`.
    pub fn check_against(&self, params: &ParamSet) -> Result<()> {
        let names = params.names();
        let mut seen = std::collections::BTreeSet::new();
        for n in self.backbone_names.iter().chain(&self.key_names) {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("`{n}` appears twice in the partition")));
            }
            if !names.contains(n) {
                return Err(Error::UnknownLayer(n.clone()));
            }
        }
        if seen.len() != names.len() {
            return Err(Error::Config("partition does not cover every parameter".into()));
        }
        Ok(())
    }

    pub fn split(&self, params: &ParamSet) -> Result<(ParamSet, ParamSet)> {
        Ok((
            params.select(&self.backbone_names, Role::Backbone)?,
            params.select(&self.key_names, Role::Keys)?,
        ))
    }

    /// Reassembles a full model in canonical layout order.
    pub fn join(&self, cfg: &ModelConfig, backbone: &ParamSet, keys: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new(Role::Model);
        for (name, _) in cfg.layout() {
            let t = backbone
                .get(&name)
                .or_else(|| keys.get(&name))
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            out.push(t.clone())?;
        }
        Ok(out)
    }
}

/// Uniform `±1/sqrt(fan_in)` per layer; embeddings use unit scale.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &["init".into()]);
    let mut out = ParamSet::new(Role::Model);
    for (name, shape) in cfg.layout() {
        let fan_in = if name == "embed" {
            1
        } else if shape.len() == 2 {
            shape[0]
        } else {
            // biases share the fan-in of their weight matrix
            let weight_name = name.replace(".bias", ".weight");
            cfg.layout()
                .into_iter()
                .find(|(n, _)| *n == weight_name)
                .map(|(_, s)| s[0])
                .unwrap_or(1)
        };
        let scale = 1.0 / (fan_in as f32).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-scale..scale)).collect();
        out.push(Tensor::new(name, shape, data)?)?;
    }
    cfg.partition().check_against(&out)?;
    Ok(out)
}
