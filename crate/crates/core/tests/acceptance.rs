//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dictpfl::experiment::{self, write_metrics_csv, RunConfig};
use dictpfl::he::{decrypt_unpack, pack_encrypt, BackendKind, HeBackend, HeParams, MockBackend, ToyRlwe};
use dictpfl::linalg::{percentile_threshold, truncated_svd, Matrix};
use dictpfl::netsim::{dry_run_accounting, DryRunConfig, ShapeManifest};
use dictpfl::prme::{hrc_update, tip_mask, PruneConfig, PruneState};
use dictpfl::protocol::{aggregate, Federation, FederationConfig, Strategy, Upload};
use dictpfl::trainer::{
    dirichlet_partition, local_train, synth_task, Concentration, LocalTrainConfig, SynthSpec, ToyModel,
};
use dictpfl::NetProfile;
use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, Just};
use proptest::strategy::Strategy as _;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn oracle_equivalence() -> Outcome {
    let ds = ok(synth_task(
        &SynthSpec {
            classes: 4,
            dim: 16,
            per_class: 30,
            margin: 3.0,
            noise: 1.0,
        },
        11,
    ))?;
    let shards = ok(dirichlet_partition(&ds, 3, Concentration::Homogeneous, 11))?;
    let base = ok(ToyModel::mlp(&[16, 24, 4], 11))?;
    let cfg = FederationConfig {
        strategy: Strategy::DictPfl,
        rank: 4,
        prune: PruneConfig {
            s: 0.0,
            ..PruneConfig::default()
        },
        train: LocalTrainConfig {
            epochs: 2,
            lr: 0.3,
            batch_size: 16,
        },
        ..FederationConfig::default()
    };
    let backend: Arc<dyn HeBackend> = Arc::new(ok(MockBackend::new(HeParams::toy()))?);
    let mut fed = ok(Federation::new(cfg.clone(), backend, NetProfile::lan(), &base, shards.clone()))?;

    let mut oracle = ok(base.factorize(cfg.rank))?;
    let mut worst = 0.0f64;
    for round in 1..=20 {
        let grads: Vec<Vec<f64>> = shards
            .iter()
            .map(|s| local_train(&oracle, s, &cfg.train).map(|u| u.grad))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mean: Vec<f64> = (0..grads[0].len())
            .map(|i| grads.iter().map(|g| g[i]).sum::<f64>() / 3.0)
            .collect();
        ok(oracle.apply_update(&mean, cfg.train.lr))?;
        ok(fed.run_round())?;
        let want = oracle.trainable_vector();
        for c in fed.clients() {
            for (a, b) in c.model().trainable_vector().iter().zip(&want) {
                let d = (a - b).abs();
                worst = worst.max(d);
                ensure!(d <= 1e-10, "round {round}, client {}: deviation {d:e}", c.id());
            }
        }
    }
    Ok(format!("20 rounds, max deviation {worst:.2e}"))
}

fn he_correctness() -> Outcome {
    let backend = ok(ToyRlwe::new(HeParams::toy()))?;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let keys = ok(backend.keygen(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vecs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4096).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let uploads = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                Ok(Upload {
                    client_id: i,
                    round: 1,
                    packed_len: v.len(),
                    ciphertexts: pack_encrypt(&backend, &keys.public, v, &mut rng)?,
                    plaintext_grads: None,
                })
            })
            .collect::<dictpfl::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let b = ok(aggregate(&backend, 1, &uploads))?;
        let got = ok(decrypt_unpack(&backend, &keys.secret, &b.ciphertexts, 4096))?;
        for (i, g) in got.iter().enumerate() {
            let mean = vecs.iter().map(|v| v[i]).sum::<f64>() / 5.0;
            worst = worst.max((g - mean).abs());
        }
        ensure!(worst <= 1e-3, "seed {seed}: error {worst:e}");
    }
    Ok(format!("100 seeds, max abs error {worst:.2e}"))
}

fn mask_consistency() -> Outcome {
    const K: usize = 10;
    const LEN: usize = 3000;
    let config = PruneConfig {
        s: 0.7,
        tau: 3,
        beta: 0.2,
        seed: 42,
    };
    let backend = ok(MockBackend::new(HeParams::toy()))?;
    let keys = ok(backend.keygen(0))?;
    let mut states: Vec<PruneState> = (0..K).map(|_| PruneState::new(config, LEN)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // per-coordinate scale so some entries stay persistently small
    let scale: Vec<f64> = (0..LEN).map(|_| rng.random_range(0.0f64..1.0).powi(3)).collect();
    let (mut mismatches, mut reactivations, mut pruned_rounds) = (0usize, 0usize, 0usize);
    for round in 1..=100u64 {
        let mut uploads = Vec::with_capacity(K);
        for (k, st) in states.iter_mut().enumerate() {
            ok(st.begin_round(round))?;
            let g: Vec<f64> = scale.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
            let sel = ok(st.accumulate_and_select(&g))?;
            uploads.push(Upload {
                client_id: k,
                round,
                packed_len: sel.values.len(),
                ciphertexts: ok(pack_encrypt(&backend, &keys.public, &sel.values, &mut rng))?,
                plaintext_grads: None,
            });
        }
        for st in &states[1..] {
            ensure!(st.mask() == states[0].mask(), "round {round}: masks differ");
            ensure!(st.reactivated() == states[0].reactivated(), "round {round}: reactivation draws differ");
        }
        reactivations += states[0].reactivated().iter().filter(|r| **r).count();
        pruned_rounds += usize::from(states[0].mask().iter().any(|m| !m));
        let b = match aggregate(&backend, round, &uploads) {
            Ok(b) => b,
            Err(_) => {
                mismatches += 1;
                continue;
            }
        };
        let vals = ok(decrypt_unpack(&backend, &keys.secret, &b.ciphertexts, b.packed_len))?;
        let mut global = vec![0.0; LEN];
        for (&i, v) in states[0].active_indices().iter().zip(vals) {
            global[i] = v;
        }
        for st in &mut states {
            ok(st.observe_global(&global))?;
        }
    }
    ensure!(mismatches == 0, "{mismatches} chunk mismatches");
    ensure!(pruned_rounds > 0 && reactivations > 0, "pruning never exercised");
    Ok(format!(
        "{K} clients x 100 rounds identical; {pruned_rounds} rounds with pruning, {reactivations} reactivations"
    ))
}

/// Entries strictly below the `⌊j·len/10⌋`-th smallest `(|v|, index)` key.
fn brute_below(v: &[f64], tenths: usize) -> Vec<bool> {
    let k = tenths * v.len() / 10;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(a.cmp(&b)));
    let mut below = vec![false; v.len()];
    for &i in &order[..k] {
        below[i] = true;
    }
    below
}

fn tip_semantics() -> Outcome {
    let strategy = (1usize..=5, 0usize..10, 1usize..60, 0usize..8).prop_flat_map(|(tau, tenths, len, extra)| {
        (
            Just(tau),
            Just(tenths),
            // small integer magnitudes force ties
            proptest::collection::vec(proptest::collection::vec(-6i32..=6, len), 1..=tau + extra),
        )
    });
    let mut r = runner(2000);
    r.run(&strategy, |(tau, tenths, hist)| {
        let history: Vec<Vec<f64>> = hist
            .iter()
            .map(|h| h.iter().map(|&x| x as f64 * 0.25).collect())
            .collect();
        let got = tip_mask(&history, tau, tenths as f64 / 10.0).unwrap();
        let len = history[0].len();
        let expect: Vec<bool> = if history.len() < tau {
            vec![true; len]
        } else {
            let recent = &history[history.len() - tau..];
            let below: Vec<Vec<bool>> = recent.iter().map(|h| brute_below(h, tenths)).collect();
            (0..len).map(|i| !below.iter().all(|b| b[i])).collect()
        };
        prop_assert_eq!(got, expect);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok("2000 random histories agree with brute force".into())
}

fn hrc_semantics() -> Outcome {
    let beta = 0.2;
    // exactly one decay from p = 1 and from an arbitrary p
    let mut p = vec![1.0, 0.37, 0.5];
    let t = ok(percentile_threshold(&[0.0, 0.0, 0.0], 1.0))?;
    ok(hrc_update(&mut p, &[true, true, false], &[0.0; 3], &t, beta))?;
    ensure!(p[0] == 0.2 && p[1] == 0.37 * 0.2, "one decay gave {:?}", &p[..2]);
    ensure!(p[2] == 0.5, "non-reactivated entry changed");

    let strategy = (2usize..40, 0usize..10, 1usize..150).prop_flat_map(|(len, tenths, rounds)| {
        (
            Just(tenths),
            proptest::collection::vec(proptest::collection::vec(0u32..100, len), rounds),
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), len), rounds),
            proptest::collection::vec(0i32..4, len),
            prop_oneof![Just(0.2), 0.05f64..0.95],
        )
    });
    let mut r = runner(500);
    r.run(&strategy, |(tenths, globals, reacts, start, beta)| {
        let len = start.len();
        // p = β^e with e ≥ 0 tracked exactly as an integer
        let mut exp: Vec<i32> = start.clone();
        let mut p: Vec<f64> = start.iter().map(|&e| beta.powi(e)).collect();
        for (g, re) in globals.iter().zip(&reacts) {
            let g: Vec<f64> = g.iter().map(|&x| x as f64).collect();
            let t = percentile_threshold(&g, tenths as f64 / 10.0).unwrap();
            hrc_update(&mut p, re, &g, &t, beta).unwrap();
            let below = brute_below(&g, tenths);
            for i in 0..len {
                if re[i] {
                    exp[i] = if below[i] { exp[i] + 1 } else { (exp[i] - 1).max(0) };
                }
                let closed = beta.powi(exp[i]);
                prop_assert!((0.0..=1.0).contains(&p[i]), "p out of range: {}", p[i]);
                prop_assert!(
                    (p[i] - closed).abs() <= 1e-9 * closed,
                    "entry {}: p {} vs closed form {}",
                    i,
                    p[i],
                    closed
                );
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok("closed form β^e holds over 500 random outcome sequences; one decay = 0.2x".into())
}

fn depe_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..10u64 {
        let dims = [rng.random_range(2..40), rng.random_range(2..40), rng.random_range(2..10)];
        let model = ok(ToyModel::mlp(&dims, trial))?;
        let rank = rng.random_range(1..6);
        let fact = ok(model.factorize(rank))?;
        let x = Matrix::from_fn(17, dims[0], |_, _| rng.random_range(-2.0..2.0));
        ensure!(
            ok(model.forward(&x))? == ok(fact.forward(&x))?,
            "trial {trial}: logits differ after factorization"
        );
    }
    let mut worst = 0.0f64;
    let mut shapes = vec![(64, 64), (1, 64), (64, 1), (1, 1)];
    shapes.extend((0..40).map(|_| (rng.random_range(1..=64), rng.random_range(1..=64))));
    for (n, m) in shapes {
        let w = Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let svd = ok(truncated_svd(&w, n.min(m)))?;
        let rel = ok(svd.reconstruct().sub(&w))?.frobenius_norm() / w.frobenius_norm();
        worst = worst.max(rel);
        ensure!(rel <= 1e-6, "{n}x{m}: relative error {rel:e}");
    }
    Ok(format!("neutral on 10 models; worst full-rank reconstruction {worst:.2e}"))
}

fn communication_reduction() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("manifests/vit_b16.txt");
    let t = Instant::now();
    let manifest = ok(ShapeManifest::load(&path))?;
    let cfg = DryRunConfig {
        rank: 4,
        s: 0.7,
        ..DryRunConfig::default()
    };
    let full = ok(dry_run_accounting(&manifest, Strategy::FedHeFull, &cfg))?.steady;
    let dict = ok(dry_run_accounting(&manifest, Strategy::DictPfl, &cfg))?.steady;
    let elapsed = t.elapsed();
    let elem = full.encrypted_elements as f64 / dict.encrypted_elements as f64;
    let bytes = full.ciphertext_bytes as f64 / dict.ciphertext_bytes as f64;
    ensure!((100.0..=1000.0).contains(&elem), "element reduction {elem:.1}x");
    ensure!((100.0..=1000.0).contains(&bytes), "byte reduction {bytes:.1}x");
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("elements {elem:.1}x, bytes {bytes:.1}x ({} vs {} ciphertexts)", full.ciphertexts, dict.ciphertexts))
}

fn convergence() -> Outcome {
    let base = RunConfig {
        clients: 3,
        rounds: 30,
        classes: 4,
        dim: 32,
        alpha: f64::INFINITY,
        backend: BackendKind::ToyRlwe,
        ..RunConfig::default()
    };
    let (mut dict_acc, mut full_acc, mut start_acc) = (0.0, 0.0, 0.0);
    for seed in 0..5 {
        let task = ok(experiment::make_task(&RunConfig { seed, ..base.clone() }))?;
        let start = ok(experiment::base_model(&RunConfig { seed, ..base.clone() }, &task.public))?;
        start_acc += ok(start.evaluate(&task.test))?.1 / 5.0;
        let dict = RunConfig {
            strategy: Strategy::DictPfl,
            rank: 8,
            s: 0.2,
            seed,
            ..base.clone()
        };
        let full = RunConfig {
            strategy: Strategy::FedHeFull,
            seed,
            ..base.clone()
        };
        dict_acc += ok(experiment::run(&dict))?.last().map_or(0.0, |m| m.accuracy) / 5.0;
        full_acc += ok(experiment::run(&full))?.last().map_or(0.0, |m| m.accuracy) / 5.0;
    }
    let gap = (full_acc - dict_acc) * 100.0;
    ensure!(gap <= 2.0, "DictPFL {:.2}% vs Full {:.2}%", dict_acc * 100.0, full_acc * 100.0);
    Ok(format!(
        "round-30 accuracy DictPFL {:.2}% vs Full {:.2}% (gap {gap:.2} pp, pretrained start {:.2}%)",
        dict_acc * 100.0,
        full_acc * 100.0,
        start_acc * 100.0
    ))
}

fn accumulation_conservation() -> Outcome {
    let backend = ok(MockBackend::new(HeParams::toy().with_ring_dim(64)))?;
    let keys = ok(backend.keygen(0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut touched = 0usize;
    for trial in 0..30u64 {
        let len = rng.random_range(1..200);
        let config = PruneConfig {
            s: rng.random_range(0.0..0.95),
            tau: rng.random_range(1..5),
            beta: rng.random_range(0.05..0.95),
            seed: trial,
        };
        let mut st = ok(PruneState::new(config, len))?;
        let mut local_sum = vec![0.0; len];
        let mut uploaded = vec![0.0; len];
        for round in 1..=rng.random_range(5..60u64) {
            ok(st.begin_round(round))?;
            // dyadic values keep every sum exact
            let g: Vec<f64> = (0..len).map(|_| rng.random_range(-1024i32..=1024) as f64 / 1024.0).collect();
            for (s, x) in local_sum.iter_mut().zip(&g) {
                *s += x;
            }
            let sel = ok(st.accumulate_and_select(&g))?;
            let cts = ok(pack_encrypt(&backend, &keys.public, &sel.values, &mut rng))?;
            let back = ok(decrypt_unpack(&backend, &keys.secret, &cts, sel.values.len()))?;
            for (&i, v) in sel.indices.iter().zip(back) {
                uploaded[i] += v;
            }
            touched += len - sel.indices.len();
            let global: Vec<f64> = (0..len).map(|_| rng.random_range(-64i32..=64) as f64 / 64.0).collect();
            ok(st.observe_global(&global))?;
        }
        for i in 0..len {
            let lhs = uploaded[i] + st.accum()[i];
            ensure!(lhs == local_sum[i], "trial {trial}, entry {i}: {lhs} != {}", local_sum[i]);
        }
    }
    ensure!(touched > 0, "no entry was ever pruned");
    Ok(format!("30 randomized schedules exact; {touched} pruned entry-rounds"))
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        strategy: Strategy::DictPfl,
        rounds: 8,
        seed: 1234,
        backend: BackendKind::ToyRlwe,
        ..RunConfig::default()
    };
    let csv = |threads: usize| -> Result<Vec<u8>, String> {
        let mut out = Vec::new();
        let c = RunConfig { threads, ..cfg.clone() };
        ok(write_metrics_csv(&mut out, &ok(experiment::run(&c))?))?;
        Ok(out)
    };
    let a = csv(0)?;
    let b = csv(0)?;
    let c = csv(1)?;
    ensure!(a == b, "two runs differ");
    ensure!(a == c, "thread count changes the output");
    Ok(format!("{} identical bytes across three runs", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("oracle equivalence", oracle_equivalence, Some(Duration::from_secs(30))),
        ("HE correctness", he_correctness, Some(Duration::from_secs(60))),
        ("mask consistency", mask_consistency, Some(Duration::from_secs(30))),
        ("TIP semantics", tip_semantics, None),
        ("HRC semantics", hrc_semantics, None),
        ("DePE exactness", depe_exactness, None),
        ("communication reduction", communication_reduction, Some(Duration::from_secs(1))),
        ("convergence sanity", convergence, Some(Duration::from_secs(300))),
        ("accumulation conservation", accumulation_conservation, None),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > *l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
