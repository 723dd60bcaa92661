//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use hierfed::aggregation::{
    attend_layer, lr_at, server_opt, AttentionConfig, Candidate, Origin, ScheduleConfig, ScheduleShape,
    ServerOptConfig, ServerOptState, Similarity,
};
use hierfed::datagen::{entropy_rate, make_clustered_sources, MixtureSpec, Shard};
use hierfed::engine::{fit, init_seed, train_seed, EngineConfig, RunLabels};
use hierfed::experiment::{cmd_run, prepare, run_method, ExperimentPlan, Method, MethodRun};
use hierfed::model::{
    backward_wide, forward_loss_wide, init_model, local_train, Batch, ModelConfig, OptimizerKind, TrainerConfig,
    WideParams,
};
use hierfed::privacy::{clip, update_bound, ClipState, DpConfig};
use hierfed::residual::{route_residuals, KeyCache, ResidualConfig, ResidualPacket};
use hierfed::tensor::{l2_norm, ParamSet, Role, Tensor};
use hierfed::topology::{FederationTree, NodeId, NodeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const WORKERS: usize = 1;

fn report(id: &str, pass: bool, detail: &str) {
    println!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

struct Timed {
    run: MethodRun,
    elapsed: Duration,
}

fn execute(plan: ExperimentPlan) -> Timed {
    let clock = Instant::now();
    let cfg = plan.resolve().expect("plan resolves");
    let prepared = prepare(&cfg).expect("experiment prepares");
    let run = run_method(&prepared, plan.method, WORKERS).expect("run completes");
    Timed { run, elapsed: clock.elapsed() }
}

type Key = (String, Method, u64, bool);

/// Runs keyed by (preset, method, seed, residuals enabled), shared between tests.
fn cached(preset: &str, method: Method, seed: u64, residuals: bool) -> &'static Timed {
    static SLOTS: OnceLock<Mutex<BTreeMap<Key, &'static OnceLock<Timed>>>> = OnceLock::new();
    let key = (preset.to_string(), method, seed, residuals);
    let slot: &'static OnceLock<Timed> = {
        let mut slots = SLOTS.get_or_init(Default::default).lock().unwrap();
        *slots.entry(key).or_insert_with(|| Box::leak(Box::new(OnceLock::new())))
    };
    slot.get_or_init(|| {
        let mut plan = ExperimentPlan::preset(preset, method).with_seed(seed);
        if !residuals {
            plan = plan.with_override("residual.enabled=false");
        }
        execute(plan)
    })
}

fn final_mean(run: &MethodRun) -> f64 {
    let m = run.final_leaf_summary().mean_perplexity;
    // a NaN loss means the model blew up; rank it as infinitely bad
    if m.is_nan() {
        f64::INFINITY
    } else {
        m
    }
}

/// Mean leaf test perplexity after the last stage of every round.
fn per_round(run: &MethodRun) -> Vec<f64> {
    let curve = run.leaf_curve();
    let rounds = curve.iter().map(|c| c.0).max().map_or(0, |r| r + 1);
    (0..rounds)
        .map(|k| {
            curve.iter().filter(|c| c.0 == k).max_by_key(|c| c.1).map(|c| c.2).expect("round logged")
        })
        .collect()
}

#[test]
fn criterion_1_unit_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..16);
        let n = rng.random_range(1..6);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new("k", vec![len], (0..len).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap()
        };
        let query = mk(&mut rng);
        let keys: Vec<Tensor> = (0..n).map(|_| mk(&mut rng)).collect();
        let cands: Vec<Candidate> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| Candidate { origin: Origin::Child { node: i + 1 }, key: k, value: k })
            .collect();
        let cfg = AttentionConfig {
            similarity: if rng.random_bool(0.5) { Similarity::Cosine } else { Similarity::Dot },
            temperature: rng.random_range(0.01..5.0),
            ..Default::default()
        };
        let att = attend_layer(&query, &cands, &cfg).unwrap();
        let s: f64 = att.weights.iter().map(|w| w.1).sum();
        assert!(att.weights.iter().all(|w| w.1 >= 0.0));
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    let softmax_ok = worst_sum <= 1e-9;

    let mut worst_clip: f64 = 0.0;
    for _ in 0..1_000 {
        let len = rng.random_range(1..200);
        let d = ParamSet::from_tensors(
            Role::PseudoGradient,
            vec![Tensor::new("d", vec![len], (0..len).map(|_| rng.random_range(-50.0f32..50.0)).collect()).unwrap()],
        )
        .unwrap();
        let s = rng.random_range(1e-3..30.0);
        worst_clip = worst_clip.max(l2_norm(&clip(&d, s).0) / s);
    }
    let clip_ok = worst_clip <= 1.0 + 1e-6;

    let mut odd = ClipState::new(1.0);
    [0.5, 1.0, 2.0].into_iter().for_each(|n| odd.record(n));
    let mut even = ClipState::new(1.0);
    [1.0, 3.0].into_iter().for_each(|n| even.record(n));
    let median_ok = update_bound(&mut odd) == 1.0 && update_bound(&mut even) == 2.0;

    let b = ParamSet::from_tensors(Role::Backbone, vec![Tensor::new("w", vec![3], vec![0.1, -2.0, 7.5]).unwrap()])
        .unwrap();
    let delta =
        ParamSet::from_tensors(Role::PseudoGradient, vec![Tensor::new("w", vec![3], vec![0.3, 0.25, -1.5]).unwrap()])
            .unwrap();
    let fedavg = ServerOptState::new(&ServerOptConfig { lr: 1.0, momentum: 0.0 });
    let (next, _) = server_opt(&b, &delta, fedavg).unwrap();
    let expect: Vec<f32> = b.flatten().iter().zip(delta.flatten()).map(|(x, d)| x + d).collect();
    let fedavg_ok = next.flatten() == expect;

    let sched = ScheduleConfig { alpha: 1e-2, eta_max: 8e-4, total_steps: 3000, shape: ScheduleShape::WarmupCosine };
    let mid = (30 + 3000) / 2;
    let hand = 8e-6 + (8e-4 - 8e-6) * 0.5 * (1.0 + (std::f64::consts::PI * (mid - 30) as f64 / 2970.0).cos());
    let lr_ok = lr_at(0, &sched) == 0.0
        && (lr_at(30, &sched) - 8e-4).abs() < 1e-15
        && (lr_at(3000, &sched) - 8e-6).abs() < 1e-15
        && (lr_at(mid, &sched) - hand).abs() < 1e-9;

    let pass = softmax_ok && clip_ok && median_ok && fedavg_ok && lr_ok;
    report(
        "1",
        pass,
        &format!(
            "max |sum w - 1| {worst_sum:.2e}, max clip ratio {worst_clip:.9}, medians {median_ok}, \
             fedavg {fedavg_ok}, lr endpoints {lr_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_check() {
    const STEP: f64 = 1e-3;
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let num_blocks = rng.random_range(1..=3);
        let cfg = ModelConfig {
            vocab_size: rng.random_range(2..=10),
            embed_dim: rng.random_range(1..=5),
            num_blocks,
            expansion_ratio: rng.random_range(1..=3),
            key_block_count: rng.random_range(0..=num_blocks),
            context_len: rng.random_range(1..=3),
            include_head_in_keys: rng.random_bool(0.5),
        };
        let rows: Vec<Vec<u16>> = (0..4)
            .map(|_| (0..=cfg.context_len).map(|_| rng.random_range(0..cfg.vocab_size as u16)).collect())
            .collect();
        let batch = Batch::new(&rows).unwrap();
        let mut wide = WideParams::from_params(&init_model(&cfg, 500 + trial).unwrap());
        let (_, cache) = forward_loss_wide(&cfg, &wide, &batch).unwrap();
        let grads = backward_wide(&cfg, &wide, &cache).unwrap();
        for t in 0..grads.len() {
            let mut num = vec![0.0; wide.0[t].len()];
            for i in 0..num.len() {
                let orig = wide.0[t][i];
                wide.0[t][i] = orig + STEP;
                let up = forward_loss_wide(&cfg, &wide, &batch).unwrap().0;
                wide.0[t][i] = orig - STEP;
                let down = forward_loss_wide(&cfg, &wide, &batch).unwrap().0;
                wide.0[t][i] = orig;
                num[i] = (up - down) / (2.0 * STEP);
            }
            let diff = num.iter().zip(&grads[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt() + grads[t].iter().map(|a| a * a).sum::<f64>().sqrt();
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
        }
    }
    let elapsed = clock.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    report("2", pass, &format!("worst relative error {worst:.2e} over 20 configs in {elapsed:.1?}"));
    assert!(pass);
}

fn tiny_trainer(local_steps: usize, total: u64) -> TrainerConfig {
    TrainerConfig {
        optimizer: OptimizerKind::Adam,
        beta1: 0.9,
        beta2: 0.95,
        local_steps,
        batch_size: 8,
        schedule: ScheduleConfig { alpha: 0.1, eta_max: 1e-2, total_steps: total, shape: ScheduleShape::WarmupCosine },
    }
}

#[test]
fn criterion_3_fedavg_oracle() {
    let clock = Instant::now();
    let (rounds, clients, steps, seed) = (5usize, 4usize, 6usize, 17u64);
    let model = ModelConfig {
        vocab_size: 12,
        embed_dim: 6,
        num_blocks: 2,
        expansion_ratio: 2,
        key_block_count: 0,
        context_len: 2,
        include_head_in_keys: false,
    };
    let trainer = tiny_trainer(steps, (rounds * steps) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = |n: usize| -> Vec<u16> { (0..n).map(|_| rng.random_range(0..12u16)).collect() };
    let mut nodes = vec![NodeSpec {
        id: 0,
        name: "server".into(),
        parent: None,
        children: (1..=clients).collect(),
        dataset: "server".into(),
        trainer: trainer.clone(),
        dp_enabled: false,
        residual_ceiling: 0,
        trains_locally: false,
    }];
    let mut shards = BTreeMap::new();
    shards.insert(0, Shard { train: tokens(64), val: tokens(32), test: tokens(32), provenance: MixtureSpec::single("u", 64) });
    for c in 1..=clients {
        nodes.push(NodeSpec {
            id: c,
            name: format!("client{c}"),
            parent: Some(0),
            children: vec![],
            dataset: format!("client{c}"),
            trainer: trainer.clone(),
            dp_enabled: false,
            residual_ceiling: c,
            trains_locally: true,
        });
        let n = 100 + 40 * c;
        shards.insert(c, Shard { train: tokens(n), val: tokens(32), test: tokens(32), provenance: MixtureSpec::single("u", n) });
    }
    let tree = FederationTree::new(nodes).unwrap();
    let cfg = EngineConfig {
        model: model.clone(),
        attention: AttentionConfig::default(),
        server: ServerOptConfig { lr: 1.0, momentum: 0.0 },
        residual: ResidualConfig { enabled: false, ..Default::default() },
        dp: DpConfig::default(),
        rounds,
        seed,
        global_eval: false,
    };
    let labels = RunLabels { experiment: "oracle".into(), method: "flat_fl".into() };
    let out = fit(&cfg, &tree, &shards, &labels, WORKERS).unwrap();

    // reference: plain FedAvg written against the public training primitives
    let mut global = init_model(&model, init_seed(seed)).unwrap();
    for k in 0..rounds {
        let mut sums = vec![0.0f64; global.numel()];
        for c in 1..=clients {
            let (trained, _) = local_train(
                &model,
                &global,
                &shards[&c].train,
                &trainer,
                train_seed(seed, &format!("client{c}"), k),
                (k * steps) as u64,
            )
            .unwrap();
            for (s, (a, b)) in sums.iter_mut().zip(trained.flatten().iter().zip(global.flatten())) {
                *s += (a - b) as f64;
            }
        }
        let mut offset = 0;
        for t in global.iter_mut() {
            for x in t.data_mut() {
                *x += (sums[offset] / clients as f64) as f32;
                offset += 1;
            }
        }
    }
    let engine = &out.final_models[&0];
    let identical = engine.flatten().iter().map(|x| x.to_bits()).eq(global.flatten().iter().map(|x| x.to_bits()));
    let elapsed = clock.elapsed();
    let pass = identical && elapsed < Duration::from_secs(60);
    report(
        "3",
        pass,
        &format!("engine vs reference FedAvg over {rounds} rounds x {clients} clients: bit-identical {identical} ({elapsed:.1?})"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_non_iid_ordering() {
    let mut ratios = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let w = cached("fig2", Method::Worldlm, seed, true);
        let f = cached("fig2", Method::FlatFl, seed, true);
        let (wm, fm) = (final_mean(&w.run), final_mean(&f.run));
        slowest = slowest.max(w.elapsed + f.elapsed);
        println!("  fig2 seed {seed}: worldlm {wm:.3} flat_fl {fm:.3} ratio {:.3}", wm / fm);
        ratios.push(wm / fm);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let band = 1.0 / mean_ratio;
    let pass = mean_ratio <= 0.95 && slowest < Duration::from_secs(300);
    report(
        "4",
        pass,
        &format!(
            "mean worldlm/flat_fl {mean_ratio:.3} (need <= 0.95); flat_fl/worldlm {band:.2}x (target band 1.05-2.0: {}); slowest seed {slowest:.1?}",
            (1.05..=2.0).contains(&band)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_iid_non_regression() {
    let seed = 1;
    let w = cached("iid", Method::Worldlm, seed, true);
    let f = cached("iid", Method::FlatFl, seed, true);
    let (wm, fm) = (final_mean(&w.run), final_mean(&f.run));
    let elapsed = w.elapsed + f.elapsed;
    let pass = wm <= 1.25 * fm && elapsed < Duration::from_secs(300);
    report("5", pass, &format!("iid worldlm {wm:.3} flat_fl {fm:.3} ratio {:.3} (need <= 1.25); {elapsed:.1?}", wm / fm));
    assert!(pass);
}

/// Best perplexity over the trailing three rounds, for rounds 2.. onward.
fn trailing_best(curve: &[f64]) -> Vec<f64> {
    curve.windows(3).map(|w| w.iter().copied().fold(f64::INFINITY, f64::min)).collect()
}

#[test]
fn criterion_6_dp_robustness() {
    let mut pass = true;
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let w_dp = cached("dp-cc-wk", Method::Worldlm, seed, true);
        let f_dp = cached("dp-cc-wk", Method::FlatFl, seed, true);
        let w = cached("fig2", Method::Worldlm, seed, true);
        let f = cached("fig2", Method::FlatFl, seed, true);
        slowest = slowest.max(w_dp.elapsed + f_dp.elapsed);
        let w_ratio = final_mean(&w_dp.run) / final_mean(&w.run);
        let f_ratio = final_mean(&f_dp.run) / final_mean(&f.run);
        let a = f_ratio > w_ratio;

        // window k covers rounds k..k+2, so round r >= 6 ends window r-2
        let best = trailing_best(&per_round(&w_dp.run));
        let tail = &best[4..];
        let w_stable = tail.iter().all(|v| v.is_finite()) && tail.windows(2).all(|p| p[1] <= p[0]);
        let f_diverged = f_ratio >= 2.0;
        let b = w_stable && f_diverged;
        println!(
            "  seed {seed}: degradation worldlm {w_ratio:.3} flat_fl {f_ratio:.3e} -> (a) {a}; \
             worldlm trailing best after round 6 {tail:.3?} stable {w_stable}; flat_fl >= 2x {f_diverged} -> (b) {b}"
        );
        pass &= a && b;
    }
    pass &= slowest < Duration::from_secs(600);
    report("6", pass, &format!("dp on cc+wk with sigma 0.5 over {} seeds; slowest seed {slowest:.1?}", SEEDS.len()));
    assert!(pass);
}

#[test]
fn criterion_7_swap_and_residuals() {
    let mut root_plain = Vec::new();
    let mut root_swapped = Vec::new();
    let mut residual_wins = 0;
    for seed in SEEDS {
        let plain = cached("fig2", Method::Worldlm, seed, true);
        let on = cached("fig2-swapped", Method::Worldlm, seed, true);
        let off = cached("fig2-swapped", Method::Worldlm, seed, false);
        let rp = plain.run.final_perplexity("root", "test").unwrap();
        let rs = on.run.final_perplexity("root", "test").unwrap();
        root_plain.push(rp);
        root_swapped.push(rs);
        let (m_on, m_off) = (final_mean(&on.run), final_mean(&off.run));
        residual_wins += (m_on <= m_off) as usize;
        println!("  seed {seed}: root fig2 {rp:.3} swapped {rs:.3}; swapped leaves residuals on {m_on:.3} off {m_off:.3}");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let a = mean(&root_swapped) > mean(&root_plain);
    let b = residual_wins >= 2;
    let pass = a && b;
    report(
        "7",
        pass,
        &format!(
            "(a) mean root perplexity fig2 {:.3} -> swapped {:.3}: {a}; (b) residuals help in {residual_wins}/3 seeds: {b}",
            mean(&root_plain),
            mean(&root_swapped)
        ),
    );
    assert!(pass);
}

fn brute_force_route(packet: &[f32], origin_branch: Option<NodeId>, cache: &[(NodeId, Vec<f32>)]) -> Option<NodeId> {
    let cos = |a: &[f32], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut best: Option<(f64, NodeId)> = None;
    for (id, keys) in cache {
        if Some(*id) == origin_branch {
            continue;
        }
        let s = cos(packet, keys);
        if best.is_none_or(|(b, bid)| s > b || (s == b && *id < bid)) {
            best = Some((s, *id));
        }
    }
    best.map(|b| b.1)
}

#[test]
fn criterion_8_routing() {
    // root 0 -> servers 1..=3, each with two leaves 4..=9
    let trainer = tiny_trainer(1, 1);
    let mut nodes = vec![NodeSpec {
        id: 0,
        name: "r".into(),
        parent: None,
        children: vec![1, 2, 3],
        dataset: "r".into(),
        trainer: trainer.clone(),
        dp_enabled: false,
        residual_ceiling: 0,
        trains_locally: true,
    }];
    for s in 1..=3 {
        nodes.push(NodeSpec {
            id: s,
            name: format!("s{s}"),
            parent: Some(0),
            children: vec![2 * s + 2, 2 * s + 3],
            dataset: format!("s{s}"),
            trainer: trainer.clone(),
            dp_enabled: false,
            residual_ceiling: 0,
            trains_locally: true,
        });
        for l in [2 * s + 2, 2 * s + 3] {
            nodes.push(NodeSpec {
                id: l,
                name: format!("l{l}"),
                parent: Some(s),
                children: vec![],
                dataset: format!("l{l}"),
                trainer: trainer.clone(),
                dp_enabled: false,
                residual_ceiling: 0,
                trains_locally: true,
            });
        }
    }
    let tree = FederationTree::new(nodes).unwrap();
    let attn = AttentionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0;
    let cases = 1_000;
    for case in 0..cases {
        let dim = rng.random_range(2..12);
        let vec_of = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let cache_vals: Vec<(NodeId, Vec<f32>)> = (1..=3).map(|c| (c, vec_of(&mut rng))).collect();
        let payload = vec_of(&mut rng);
        let origin = rng.random_range(1..=9usize);
        let origin_branch = if origin <= 3 { origin } else { (origin - 2) / 2 };
        let mut cache = KeyCache::default();
        cache.refresh(
            case,
            cache_vals.iter().map(|(id, v)| {
                (*id, ParamSet::from_tensors(Role::Keys, vec![Tensor::new("k", vec![dim], v.clone()).unwrap()]).unwrap())
            }),
        );
        let packet = ResidualPacket {
            origin,
            layer: "k".into(),
            tensor: Tensor::new("k", vec![dim], payload.clone()).unwrap(),
            created_round: case,
            ceiling: 0,
            path: vec![0],
            hop_sims: vec![0.0],
        };
        let routed = route_residuals(0, vec![packet], &cache, &tree, &attn, case, 4).unwrap();
        let landed: Vec<NodeId> = routed.forward.keys().chain(routed.aggregate.keys()).copied().collect();
        let expect = brute_force_route(&payload, Some(origin_branch), &cache_vals);
        if landed.len() == 1 && Some(landed[0]) == expect {
            agree += 1;
        }
    }
    let pass = agree == cases;
    report("8", pass, &format!("{agree}/{cases} packets routed to the brute-force argmax child"));
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let files = ["metrics.csv", "attention.csv", "residuals.csv", "dp.csv"];
    let plan = ExperimentPlan::preset("fig2", Method::Worldlm).with_seed(5);
    let mut outputs = Vec::new();
    for (tag, workers) in [("a", 1), ("b", 1), ("c", 4)] {
        let out = dir.path().join(tag);
        cmd_run(&plan, &out, workers).unwrap();
        outputs.push(files.map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    let rerun = outputs[0] == outputs[1];
    let threads = outputs[0] == outputs[2];
    let nonempty = !outputs[0][0].is_empty();
    let pass = rerun && threads && nonempty;
    report("9", pass, &format!("same-seed rerun identical {rerun}; 1 vs 4 workers identical {threads}"));
    assert!(pass);
}

#[test]
fn criterion_10_datagen_oracle() {
    let sources = make_clustered_sources(2, 2, 0.8, 32, 10).unwrap();
    let mut worst: f64 = 0.0;
    for (i, src) in sources.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let tokens = src.sample(100_000, &mut rng);
        let ppl = src.mean_nll(&tokens).unwrap().exp();
        let target = entropy_rate(src).unwrap().exp();
        worst = worst.max((ppl / target - 1.0).abs());
    }
    let pass = worst < 0.01;
    report("10", pass, &format!("worst relative gap to exp(entropy rate) {:.4}% over {} sources", 100.0 * worst, sources.len()));
    assert!(pass);
}
