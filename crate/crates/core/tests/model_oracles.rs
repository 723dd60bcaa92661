use hierfed::aggregation::{ScheduleConfig, ScheduleShape};
use hierfed::model::{
    backward, backward_wide, forward_loss, forward_loss_wide, init_model, local_train, Batch,
    ModelConfig, OptimizerKind, TrainerConfig, WideParams,
};
use hierfed::tensor::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_blocks = rng.random_range(1..=3);
    ModelConfig {
        vocab_size: rng.random_range(2..=12),
        embed_dim: rng.random_range(1..=6),
        num_blocks,
        expansion_ratio: rng.random_range(1..=3),
        key_block_count: rng.random_range(0..=num_blocks),
        context_len: rng.random_range(1..=3),
        include_head_in_keys: rng.random_bool(0.5),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, rows: usize) -> Batch {
    let rows: Vec<Vec<u16>> = (0..rows)
        .map(|_| (0..=cfg.context_len).map(|_| rng.random_range(0..cfg.vocab_size as u16)).collect())
        .collect();
    Batch::new(&rows).unwrap()
}

/// Straightforward re-implementation reading tensors by name.
fn oracle_loss(cfg: &ModelConfig, p: &ParamSet, rows: &[Vec<u16>]) -> f64 {
    let w = |name: &str| -> Vec<f64> { p.get(name).unwrap().data().iter().map(|&x| x as f64).collect() };
    let (v, d, n, hid) = (cfg.vocab_size, cfg.embed_dim, cfg.context_len, cfg.hidden_dim());
    let embed = w("embed");
    let (in_w, in_b) = (w("input.weight"), w("input.bias"));
    let mut total = 0.0;
    for row in rows {
        let mut x = vec![0.0; n * d];
        for j in 0..n {
            for k in 0..d {
                x[j * d + k] = embed[row[j] as usize * d + k];
            }
        }
        let mut h: Vec<f64> = (0..d).map(|o| in_b[o] + (0..n * d).map(|i| x[i] * in_w[i * d + o]).sum::<f64>()).collect();
        for b in 0..cfg.num_blocks {
            let (w1, b1) = (w(&format!("block{b}.fc1.weight")), w(&format!("block{b}.fc1.bias")));
            let (w2, b2) = (w(&format!("block{b}.fc2.weight")), w(&format!("block{b}.fc2.bias")));
            let a: Vec<f64> =
                (0..hid).map(|o| (b1[o] + (0..d).map(|i| h[i] * w1[i * hid + o]).sum::<f64>()).tanh()).collect();
            h = (0..d).map(|o| h[o] + b2[o] + (0..hid).map(|i| a[i] * w2[i * d + o]).sum::<f64>()).collect();
        }
        let (hw, hb) = (w("head.weight"), w("head.bias"));
        let logits: Vec<f64> = (0..v).map(|o| hb[o] + (0..d).map(|i| h[i] * hw[i * v + o]).sum::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[row[n] as usize];
    }
    total / rows.len() as f64
}

#[test]
fn forward_loss_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let cfg = random_config(&mut rng);
        let p = init_model(&cfg, trial).unwrap();
        let rows: Vec<Vec<u16>> = (0..7)
            .map(|_| (0..=cfg.context_len).map(|_| rng.random_range(0..cfg.vocab_size as u16)).collect())
            .collect();
        let (loss, _) = forward_loss(&cfg, &p, &Batch::new(&rows).unwrap()).unwrap();
        let expect = oracle_loss(&cfg, &p, &rows);
        assert!((loss - expect).abs() < 1e-6, "trial {trial}: {loss} vs {expect}");
        let (wide, _) = forward_loss_wide(&cfg, &WideParams::from_params(&p), &Batch::new(&rows).unwrap()).unwrap();
        assert!((wide - expect).abs() < 1e-12, "trial {trial}: wide {wide} vs {expect}");
    }
}

#[test]
fn gradients_match_central_differences() {
    const STEP: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let cfg = random_config(&mut rng);
        let params = init_model(&cfg, 100 + trial).unwrap();
        let batch = random_batch(&mut rng, &cfg, 5);
        let mut wide = WideParams::from_params(&params);
        let (_, cache) = forward_loss_wide(&cfg, &wide, &batch).unwrap();
        let grads = backward_wide(&cfg, &wide, &cache).unwrap();
        let names = params.names();
        for (t, name) in names.iter().enumerate() {
            let mut num = vec![0.0; wide.0[t].len()];
            for i in 0..wide.0[t].len() {
                let orig = wide.0[t][i];
                wide.0[t][i] = orig + STEP;
                let up = forward_loss_wide(&cfg, &wide, &batch).unwrap().0;
                wide.0[t][i] = orig - STEP;
                let down = forward_loss_wide(&cfg, &wide, &batch).unwrap().0;
                wide.0[t][i] = orig;
                num[i] = (up - down) / (2.0 * STEP);
            }
            let diff: f64 = num.iter().zip(&grads[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt()
                + grads[t].iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(rel < 1e-4, "trial {trial} {cfg:?} `{name}`: relative error {rel:e}");
        }
    }
}

#[test]
fn narrow_and_wide_gradients_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = random_config(&mut rng);
    let p = init_model(&cfg, 3).unwrap();
    let batch = random_batch(&mut rng, &cfg, 9);
    let (_, cache) = forward_loss(&cfg, &p, &batch).unwrap();
    let narrow = backward(&cfg, &p, &cache).unwrap();
    let wide_p = WideParams::from_params(&p);
    let (_, wc) = forward_loss_wide(&cfg, &wide_p, &batch).unwrap();
    let wide = backward_wide(&cfg, &wide_p, &wc).unwrap();
    for (t, g) in narrow.iter().zip(&wide) {
        for (a, b) in t.data().iter().zip(g) {
            assert!((*a as f64 - b).abs() < 1e-5, "`{}`", t.name());
        }
    }
}

#[test]
fn adam_matches_hand_stepped_recurrence() {
    let cfg = ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        num_blocks: 2,
        expansion_ratio: 2,
        key_block_count: 1,
        context_len: 3,
        include_head_in_keys: false,
    };
    let schedule = ScheduleConfig { alpha: 0.5, eta_max: 1e-2, total_steps: 4, shape: ScheduleShape::WarmupCosine };
    let trainer = TrainerConfig {
        optimizer: OptimizerKind::Adam,
        beta1: 0.9,
        beta2: 0.95,
        local_steps: 3,
        batch_size: 3,
        schedule: schedule.clone(),
    };
    // a single window makes every sampled batch identical
    let corpus: Vec<u16> = vec![1, 4, 2, 5];
    let start = init_model(&cfg, 21).unwrap();
    let global = 1;
    let (trained, steps) = local_train(&cfg, &start, &corpus, &trainer, 7, global).unwrap();
    assert_eq!(steps, 3);

    let rows = vec![corpus.clone(); 3];
    let batch = Batch::new(&rows).unwrap();
    let mut p = start.clone();
    let n = p.numel();
    let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
    for t in 1..=3i32 {
        let (_, cache) = forward_loss(&cfg, &p, &batch).unwrap();
        let g = backward(&cfg, &p, &cache).unwrap().flatten();
        let lr = hierfed::aggregation::lr_at(global + t as u64 - 1, &schedule);
        let mut flat: Vec<f64> = p.flatten().iter().map(|&x| x as f64).collect();
        for i in 0..n {
            let gi = g[i] as f64;
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.95 * v[i] + 0.05 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.95f64.powi(t));
            flat[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let mut offset = 0;
        for tensor in p.iter_mut() {
            let len = tensor.numel();
            for (dst, src) in tensor.data_mut().iter_mut().zip(&flat[offset..offset + len]) {
                *dst = *src as f32;
            }
            offset += len;
        }
    }
    let moved = trained.flatten().iter().zip(start.flatten()).any(|(a, b)| a != &b);
    assert!(moved);
    for (a, b) in trained.flatten().iter().zip(p.flatten()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}
