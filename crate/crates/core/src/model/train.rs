use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{lr_at, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::lm::{backward_generic, forward_generic, Batch};
use crate::model::{ModelConfig, TokenId};
use crate::tensor::{ParamSet, Tensor};

const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("trainer.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be positive".into()));
        }
        self.schedule.validate()
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

/// Runs `trainer.local_steps` optimizer steps on random windows of `tokens`.
///
/// The learning rate of local step `i` is the shared schedule evaluated at
/// `global_step + i`; optimizer moments start from zero on every call.
pub fn local_train(
    cfg: &ModelConfig,
    params: &ParamSet,
    tokens: &[TokenId],
    trainer: &TrainerConfig,
    seed: u64,
    global_step: u64,
) -> Result<(ParamSet, usize)> {
    let width = cfg.context_len + 1;
    if tokens.len() < width {
        return Err(Error::Empty("training shard"));
    }
    let mut out = params.clone();
    if trainer.local_steps == 0 {
        return Ok((out, 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_start = tokens.len() - width;
    let mut adam = Adam {
        m: out.iter().map(|t| vec![0.0; t.numel()]).collect(),
        v: out.iter().map(|t| vec![0.0; t.numel()]).collect(),
        t: 0,
    };
    let mut starts = vec![0usize; trainer.batch_size];
    for step in 0..trainer.local_steps {
        for s in starts.iter_mut() {
            *s = rng.random_range(0..=last_start);
        }
        let batch = Batch::from_windows(tokens, width, &starts)?;
        let grads = {
            let p: Vec<&[f32]> = out.iter().map(Tensor::data).collect();
            let (_, cache) = forward_generic(cfg, &p, &batch)?;
            backward_generic(cfg, &p, &cache)?
        };
        let lr = lr_at(global_step + step as u64, &trainer.schedule);
        match trainer.optimizer {
            OptimizerKind::Sgd => {
                for (t, g) in out.iter_mut().zip(&grads) {
                    for (w, gi) in t.data_mut().iter_mut().zip(g) {
                        *w = (*w as f64 - lr * *gi as f64) as f32;
                    }
                }
            }
            OptimizerKind::Adam => {
                adam.t += 1;
                let (b1, b2) = (trainer.beta1, trainer.beta2);
                let c1 = 1.0 - b1.powi(adam.t);
                let c2 = 1.0 - b2.powi(adam.t);
                for (((t, g), m), v) in
                    out.iter_mut().zip(&grads).zip(&mut adam.m).zip(&mut adam.v)
                {
                    for (((w, &gi), mi), vi) in
                        t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let gi = gi as f64;
                        let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
                        let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                        *mi = m_new as f32;
                        *vi = v_new as f32;
                        let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + ADAM_EPS);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Input("local training produced non-finite parameters".into()));
    }
    Ok((out, trainer.local_steps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    /// Mean next-token negative log-likelihood in nats.
    pub loss: f64,
    pub perplexity: f64,
}

/// Mean NLL over every window of the sequence.
pub fn evaluate(cfg: &ModelConfig, params: &ParamSet, tokens: &[TokenId]) -> Result<Eval> {
    let width = cfg.context_len + 1;
    if tokens.len() < width {
        return Err(Error::Empty("evaluation shard"));
    }
    let p: Vec<&[f32]> = params.iter().map(Tensor::data).collect();
    let positions = tokens.len() - width + 1;
    let mut total = 0.0f64;
    let mut start = 0;
    while start < positions {
        let end = (start + EVAL_CHUNK).min(positions);
        let starts: Vec<usize> = (start..end).collect();
        let batch = Batch::from_windows(tokens, width, &starts)?;
        let (loss, _) = forward_generic(cfg, &p, &batch)?;
        total += loss * (end - start) as f64;
        start = end;
    }
    let loss = total / positions as f64;
    Ok(Eval { loss, perplexity: loss.exp() })
}

pub fn evaluate_perplexity(cfg: &ModelConfig, params: &ParamSet, tokens: &[TokenId]) -> Result<f64> {
    Ok(evaluate(cfg, params, tokens)?.perplexity)
}
