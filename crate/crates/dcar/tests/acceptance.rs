//! Acceptance gate: one test per criterion, each printing a PASS line.
//! Gradient checks use central finite differences as an independent oracle;
//! the experiment criteria train real models on the toy world and assert
//! directional results with explicit tolerances.

use std::sync::LazyLock;
use std::time::Instant;

use dcar::checkpoint;
use dcar::dcpo::{self, DcpoConfig};
use dcar::decode::{decode_car, decode_dcar, decode_far, SamplingConfig};
use dcar::evalsuite::{self, Method};
use dcar::infer::{head_accuracy, head_logits_of, Engine};
use dcar::model::{
    car_loss, BoundModel, CarModel, CarModelConfig, TrainConfig,
};
use dcar::optim::AdamConfig;
use dcar::policy::{PolicyConfig, SchedulerPolicy};
use dcar::tensor::{Tape, TensorId};
use dcar::world::{
    self, make_corpus, stream_rng, transcribe, word_error_rate, Corpus, WorldConfig,
};
use rand::Rng;

fn pass(n: usize, name: &str) {
    println!("ACCEPTANCE {n:02} {name}: PASS");
}

// ---------------------------------------------------------------------------
// Shared toy-world experiment state (criteria 8, 9, 10, 12).

struct Toy {
    wcfg: WorldConfig,
    corpus: Corpus,
    model: CarModel,
    train_wall_s: f64,
}

fn toy_world_config() -> WorldConfig {
    WorldConfig {
        symbol_count: 8,
        region_size: 4,
        run_length_min: 3,
        run_length_max: 3,
        jitter_step: 1,
        jitter_hold_prob: 0.95,
        frame_rate: 2,
        seed: 7,
    }
}

fn toy_model_config(wcfg: &WorldConfig) -> CarModelConfig {
    CarModelConfig {
        n_layers: 2,
        n_attn_heads: 4,
        d_model: 128,
        d_ff: 512,
        n_additional_heads: 3,
        head_blocks: 4,
        text_vocab: wcfg.symbol_count,
        token_vocab: wcfg.token_vocab(),
        max_seq_len: 160,
        ..Default::default()
    }
}

static TOY: LazyLock<Toy> = LazyLock::new(|| {
    let wcfg = toy_world_config();
    let corpus = make_corpus(&wcfg, 2000, 200, 980, (10, 14)).expect("toy corpus");
    let mut model = CarModel::new(toy_model_config(&wcfg)).expect("toy model");
    let tcfg = TrainConfig {
        epochs: 8,
        batch_size: 8,
        adam: AdamConfig { learning_rate: 1e-3, ..Default::default() },
        seed: 7,
    };
    let start = Instant::now();
    // Evaluate accuracy on a slice during training to keep the clock honest.
    let logs = dcar::model::train_car(&mut model, &corpus.train, &corpus.eval[..40], &tcfg)
        .expect("toy training");
    let train_wall_s = start.elapsed().as_secs_f64();
    let last = logs.last().expect("epoch logs");
    eprintln!(
        "toy base model: {} epochs in {train_wall_s:.0}s, loss {:.4}, head acc {:?}",
        logs.len(),
        last.train_loss,
        last.eval_head_accuracy
    );
    Toy { wcfg, corpus, model, train_wall_s }
});

fn toy_sampling() -> SamplingConfig {
    SamplingConfig { temperature: 1.0, top_k: 4, greedy: false }
}

struct DcpoSeedRun {
    seed: u64,
    logs: Vec<dcpo::DcpoEpochLog>,
    policy: SchedulerPolicy,
}

fn toy_policy_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        d_in: 128,
        d_model: 32,
        n_attn_heads: 4,
        d_ff: 128,
        action_set: vec![1, 2, 3, 4],
        max_seq_len: 160,
        init_seed: seed,
    }
}

fn toy_dcpo_config(seed: u64) -> DcpoConfig {
    DcpoConfig {
        guidance_range: vec![2, 3],
        epochs: 3,
        batch_size: 8,
        inner_iters: 1,
        max_new_tokens: 96,
        adam: AdamConfig { learning_rate: 2e-3, ..Default::default() },
        sampling: toy_sampling(),
        seed,
        ..Default::default()
    }
}

fn run_dcpo(seed: u64, mutate: impl Fn(&mut DcpoConfig)) -> DcpoSeedRun {
    let toy = &*TOY;
    let mut cfg = toy_dcpo_config(seed);
    mutate(&mut cfg);
    let mut policy = SchedulerPolicy::new(toy_policy_config(seed)).expect("policy");
    let logs = dcpo::train_dcpo(&toy.model, &mut policy, &toy.corpus.policy, &toy.wcfg, &cfg)
        .expect("dcpo training");
    DcpoSeedRun { seed, logs, policy }
}

const DCPO_SEEDS: [u64; 3] = [11, 12, 13];

static DCPO_FULL: LazyLock<(Vec<DcpoSeedRun>, f64)> = LazyLock::new(|| {
    let start = Instant::now();
    let runs = DCPO_SEEDS.iter().map(|&s| run_dcpo(s, |_| {})).collect();
    (runs, start.elapsed().as_secs_f64())
});

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient oracle.

type Builder = dyn Fn(&mut Tape, &[TensorId]) -> TensorId;

fn rand_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| (rng.random::<f32>() - 0.5) * 2.0 * scale).collect()
}

/// Central finite differences against the tape's reverse-mode gradients.
/// Relative error uses a floor so near-zero entries do not blow up the ratio.
fn fd_check(name: &str, inputs: &[(Vec<f32>, Vec<usize>)], build: &Builder, h: f32, tol: f32) {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> =
        inputs.iter().map(|(data, shape)| tape.leaf(data, shape, true)).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.shape(loss), &[1], "{name}: loss must be scalar");
    tape.backward(loss).unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));
    let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let eval = |perturbed: &[Vec<f32>]| -> f32 {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| t.leaf(data, shape, false))
            .collect();
        let loss = build(&mut t, &ids);
        t.scalar(loss)
    };

    let grad_scale = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f32, |m, &v| m.max(v.abs()));
    let floor = (0.05 * grad_scale).max(1e-3);
    let mut worst = 0.0f32;
    for (i, (data, _)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus: Vec<Vec<f32>> = inputs.iter().map(|(d, _)| d.clone()).collect();
            plus[i][j] += h;
            let mut minus: Vec<Vec<f32>> = inputs.iter().map(|(d, _)| d.clone()).collect();
            minus[i][j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            assert!(
                rel < tol,
                "{name}: input {i} element {j}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }
    let _ = worst;
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut n_cases = 0usize;
    for seed in 0..4u64 {
        let mut rng = stream_rng(seed, "fd");
        let m = 2 + seed as usize;
        let k = 3 + (seed as usize % 2);
        let n = 2 + (seed as usize % 3);

        // Weights turning a tensor into a scalar; fixed per case.
        let mk_w = |rng: &mut rand_chacha::ChaCha8Rng, len: usize| rand_vec(rng, len, 1.0);

        let w = mk_w(&mut rng, m * n);
        fd_check(
            "matmul",
            &[(rand_vec(&mut rng, m * k, 1.0), vec![m, k]), (rand_vec(&mut rng, k * n, 1.0), vec![k, n])],
            &move |t, ids| {
                let y = t.matmul(ids[0], ids[1]).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let w = mk_w(&mut rng, m * n);
        fd_check(
            "matmul_nt",
            &[(rand_vec(&mut rng, m * k, 1.0), vec![m, k]), (rand_vec(&mut rng, n * k, 1.0), vec![n, k])],
            &move |t, ids| {
                let y = t.matmul_nt(ids[0], ids[1]).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let w = mk_w(&mut rng, m * k);
        fd_check(
            "add_mul_scale_silu",
            &[(rand_vec(&mut rng, m * k, 1.0), vec![m, k]), (rand_vec(&mut rng, m * k, 1.0), vec![m, k])],
            &move |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                let p = t.mul(s, ids[0]).unwrap();
                let sc = t.scale(p, 0.7);
                let a = t.silu(sc);
                t.dot_const(a, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let w = mk_w(&mut rng, m * n);
        fd_check(
            "add_bias",
            &[(rand_vec(&mut rng, m * n, 1.0), vec![m, n]), (rand_vec(&mut rng, n, 1.0), vec![n])],
            &move |t, ids| {
                let y = t.add_bias(ids[0], ids[1]).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let w = mk_w(&mut rng, m * k);
        fd_check(
            "softmax_rows",
            &[(rand_vec(&mut rng, m * k, 1.5), vec![m, k])],
            &move |t, ids| {
                let y = t.softmax_rows(ids[0]).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        // Random mask keeping at least the diagonal-ish entry per row.
        let mut mask = vec![false; m * k];
        for i in 0..m {
            for j in 0..k {
                mask[i * k + j] = rng.random::<f32>() < 0.4 && j != i % k;
            }
        }
        let w = mk_w(&mut rng, m * k);
        fd_check(
            "masked_softmax_rows",
            &[(rand_vec(&mut rng, m * k, 1.5), vec![m, k])],
            &move |t, ids| {
                let y = t.masked_softmax_rows(ids[0], &mask).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let w = mk_w(&mut rng, m * k);
        fd_check(
            "layer_norm_rows",
            &[
                (rand_vec(&mut rng, m * k, 1.0), vec![m, k]),
                (rand_vec(&mut rng, k, 1.0), vec![k]),
                (rand_vec(&mut rng, k, 1.0), vec![k]),
            ],
            &move |t, ids| {
                let y = t.layer_norm_rows(ids[0], ids[1], ids[2], 1e-5).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let vocab = 5;
        let ids_fixed: Vec<usize> = (0..m).map(|i| i % vocab).collect();
        let w = mk_w(&mut rng, m * k);
        fd_check(
            "embed",
            &[(rand_vec(&mut rng, vocab * k, 1.0), vec![vocab, k])],
            &move |t, ids| {
                let y = t.embed(ids[0], &ids_fixed).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let w = mk_w(&mut rng, m * k);
        fd_check(
            "slice_concat",
            &[(rand_vec(&mut rng, m * (k + 2), 1.0), vec![m, k + 2])],
            &move |t, ids| {
                let a = t.slice_cols(ids[0], 0, k / 2).unwrap();
                let b = t.slice_cols(ids[0], k / 2, k - k / 2).unwrap();
                let y = t.concat_cols(&[a, b]).unwrap();
                t.dot_const(y, &w).unwrap()
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let targets: Vec<usize> = (0..m).map(|i| (i + 1) % n).collect();
        let weights: Vec<f32> = (0..m).map(|i| 0.3 + 0.2 * i as f32).collect();
        fd_check(
            "cross_entropy",
            &[(rand_vec(&mut rng, m * n, 1.5), vec![m, n])],
            &move |t, ids| t.cross_entropy_rows(ids[0], &targets, &weights).unwrap(),
            1e-2,
            1e-2,
        );
        n_cases += 1;

        let rows: Vec<usize> = vec![0, m - 1];
        let actions: Vec<usize> = vec![n - 1, 0];
        fd_check(
            "gather_log_softmax",
            &[(rand_vec(&mut rng, m * n, 1.5), vec![m, n])],
            &move |t, ids| {
                let lp = t.gather_log_softmax(ids[0], &rows, &actions).unwrap();
                t.sum_all(lp)
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;

        // Clipped surrogate, with log probs kept away from the clip kinks.
        let lp_old: Vec<f32> = (0..m).map(|i| -1.0 - 0.1 * i as f32).collect();
        let adv: Vec<f32> = (0..m).map(|i| if i % 2 == 0 { 1.3 } else { -0.8 }).collect();
        let lp_theta: Vec<f32> =
            lp_old.iter().enumerate().map(|(i, &v)| v + if i % 2 == 0 { 0.4 } else { -0.45 }).collect();
        let lp_old2 = lp_old.clone();
        fd_check(
            "exp_shift_clip_surrogate",
            &[(lp_theta, vec![m])],
            &move |t, ids| {
                let ratio = t.exp_shift(ids[0], &lp_old2).unwrap();
                let s = t.clip_surrogate(ratio, &adv, 0.2).unwrap();
                t.sum_all(s)
            },
            5e-3,
            1e-2,
        );
        n_cases += 1;

        let lp_ref: Vec<f32> = (0..m).map(|i| -0.9 - 0.15 * i as f32).collect();
        let lp_theta: Vec<f32> = lp_ref.iter().map(|&v| v + 0.3).collect();
        let lp_ref2 = lp_ref.clone();
        fd_check(
            "kl_term",
            &[(lp_theta, vec![m])],
            &move |t, ids| {
                let kl = t.kl_term(ids[0], &lp_ref2).unwrap();
                t.sum_all(kl)
            },
            1e-2,
            1e-2,
        );
        n_cases += 1;
    }

    // Composed model: every parameter of a small two-layer network.
    for seed in 0..2u64 {
        let wcfg = WorldConfig {
            symbol_count: 4,
            region_size: 3,
            run_length_min: 2,
            run_length_max: 3,
            jitter_step: 1,
            frame_rate: 1,
            seed,
            ..Default::default()
        };
        let corpus = make_corpus(&wcfg, 1, 1, 1, (3, 4)).unwrap();
        let utt = &corpus.train[0];
        let mut model = CarModel::new(CarModelConfig {
            n_layers: 2,
            n_attn_heads: 2,
            d_model: 8,
            d_ff: 16,
            n_additional_heads: 2,
            head_blocks: 1,
            text_vocab: 4,
            token_vocab: wcfg.token_vocab(),
            max_seq_len: 32,
            init_seed: seed,
            ..Default::default()
        })
        .unwrap();

        let loss_of = |m: &CarModel| -> f32 {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(m, &mut tape);
            let loss = car_loss(m, &bound, &mut tape, &[utt], None).unwrap();
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&model, &mut tape);
        let loss = car_loss(&model, &bound, &mut tape, &[utt], None).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f32>> = bound.ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
        let grad_scale = analytic
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f32, |mx, &v| mx.max(v.abs()));
        let floor = 0.05 * grad_scale;

        let n_params = model.params().len();
        let mut rng = stream_rng(seed, "fd-model");
        let h = 2e-2;
        for p in 0..n_params {
            let len = model.params()[p].numel();
            // A few random elements per tensor keeps the suite under budget.
            for _ in 0..3 {
                let j = rng.random_range(0..len);
                let orig = model.params()[p].data[j];
                model.params_mut()[p].data[j] = orig + h;
                let up = loss_of(&model);
                model.params_mut()[p].data[j] = orig - h;
                let down = loss_of(&model);
                model.params_mut()[p].data[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[p][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                assert!(
                    rel < 1e-2,
                    "model param {p} element {j}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
        n_cases += 1;
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(n_cases >= 20, "only {n_cases} gradient cases");
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s");
    pass(1, "gradient-suite");
}

// ---------------------------------------------------------------------------
// Criterion 2: engine equivalence.

#[test]
fn criterion_02_engine_equivalence() {
    let wcfg = WorldConfig {
        symbol_count: 6,
        region_size: 4,
        run_length_min: 2,
        run_length_max: 4,
        jitter_step: 1,
        frame_rate: 2,
        seed: 21,
        ..Default::default()
    };
    let corpus = make_corpus(&wcfg, 1, 100, 1, (4, 8)).unwrap();
    let model = CarModel::new(CarModelConfig {
        n_layers: 2,
        n_attn_heads: 2,
        d_model: 32,
        d_ff: 64,
        n_additional_heads: 3,
        head_blocks: 2,
        text_vocab: wcfg.symbol_count,
        token_vocab: wcfg.token_vocab(),
        max_seq_len: 192,
        ..Default::default()
    })
    .unwrap();
    let mut policy = SchedulerPolicy::new(PolicyConfig {
        d_in: 32,
        d_model: 16,
        n_attn_heads: 2,
        d_ff: 32,
        action_set: vec![1, 2, 3, 4],
        max_seq_len: 192,
        ..Default::default()
    })
    .unwrap();
    // Constant-1 scheduler: overwhelming bias on the first action.
    policy.head_b.data[0] = 100.0;

    let sampling = SamplingConfig::default();
    let eos = wcfg.eos();
    for utt in &corpus.eval {
        let prompt = &utt.target_tokens[..utt.prompt_len];
        let mut r1 = stream_rng(33, &format!("eq-{}", utt.id));
        let far = decode_far(&model, &utt.text, prompt, eos, 128, &sampling, &mut r1).unwrap();
        let mut r2 = stream_rng(33, &format!("eq-{}", utt.id));
        let car =
            decode_car(&model, &utt.text, prompt, eos, 1, 128, &sampling, &mut r2).unwrap();
        let mut r3 = stream_rng(33, &format!("eq-{}", utt.id));
        let mut pr = stream_rng(34, &format!("eq-{}", utt.id));
        let dcar = decode_dcar(
            &model, &policy, &utt.text, prompt, eos, 128, &sampling, &mut r3, &mut pr, false,
        )
        .unwrap();
        assert_eq!(far.tokens, car.tokens, "far vs car(1) diverged on {}", utt.id);
        assert_eq!(far.tokens, dcar.tokens, "far vs dcar(const-1) diverged on {}", utt.id);
    }
    pass(2, "engine-equivalence");
}

// ---------------------------------------------------------------------------
// Criterion 3: KV cache vs full re-forward.

#[test]
fn criterion_03_kv_cache_oracle() {
    let wcfg = WorldConfig {
        symbol_count: 6,
        region_size: 4,
        run_length_min: 2,
        run_length_max: 4,
        jitter_step: 1,
        frame_rate: 2,
        seed: 40,
        ..Default::default()
    };
    let model = CarModel::new(CarModelConfig {
        n_layers: 2,
        n_attn_heads: 2,
        d_model: 32,
        d_ff: 64,
        n_additional_heads: 3,
        head_blocks: 2,
        text_vocab: wcfg.symbol_count,
        token_vocab: wcfg.token_vocab(),
        max_seq_len: 128,
        ..Default::default()
    })
    .unwrap();
    let heads = model.cfg.total_heads();
    let mut rng = stream_rng(41, "kv");
    for case in 0..50 {
        let text_len = rng.random_range(2..6usize);
        let text: Vec<u32> = {
            let mut t = Vec::with_capacity(text_len);
            let mut prev = u32::MAX;
            while t.len() < text_len {
                let s = rng.random_range(0..wcfg.symbol_count as u32);
                if s != prev {
                    t.push(s);
                    prev = s;
                }
            }
            t
        };
        let prefix_len = rng.random_range(3..24usize);
        let prefix: Vec<u32> =
            (0..prefix_len).map(|_| rng.random_range(0..wcfg.token_vocab() as u32)).collect();
        let chunk = 1 + (case % heads);

        // Full re-forward: all tokens in one pass from a fresh engine.
        let mut full = Engine::new(&model, &text).unwrap();
        full.append_tokens(&prefix).unwrap();

        // Cached path: same prefix fed chunk-by-chunk.
        let mut inc = Engine::new(&model, &text).unwrap();
        for c in prefix.chunks(chunk) {
            inc.append_tokens(c).unwrap();
        }

        for pos in 0..prefix_len {
            for head in 0..heads {
                let la = head_logits_of(&model, &full.hidden[pos], head);
                let lb = head_logits_of(&model, &inc.hidden[pos], head);
                for (a, b) in la.iter().zip(&lb) {
                    assert!(
                        (a - b).abs() <= 1e-5,
                        "case {case} pos {pos} head {head}: {a} vs {b}"
                    );
                }
            }
        }
    }
    pass(3, "kv-cache-oracle");
}

// ---------------------------------------------------------------------------
// Criterion 4: reward unit oracle.

#[test]
fn criterion_04_reward_oracle() {
    let r = dcpo::reward(0.3, 0.3, &[2, 3, 2], 30, &[2, 3], 0.1, -10.0);
    assert!((r - 1.0).abs() < 1e-9, "zero-diff reward {r}");

    let gap = std::f64::consts::E - 1.0;
    let r = dcpo::reward(gap, 0.0, &[2], 10, &[2], 0.1, -10.0);
    assert!(r.abs() < 1e-9, "e-1 gap reward {r}");

    let big = std::f64::consts::E.powi(11) - 1.0;
    let r = dcpo::reward(big, 0.0, &[2], 10, &[2], 0.1, -10.0);
    assert!((r + 10.0).abs() < 1e-9, "floor reward {r}");
    let r = dcpo::reward(big * 10.0, 0.0, &[2], 10, &[2], 0.1, -10.0);
    assert!((r + 10.0).abs() < 1e-9, "deep floor reward {r}");

    let r = dcpo::reward(0.0, 0.0, &[10], 100, &[2, 3], 0.1, -10.0);
    assert!((r - 0.99).abs() < 1e-9, "penalty reward {r}");
    pass(4, "reward-oracle");
}

// ---------------------------------------------------------------------------
// Criterion 5: GRPO machinery.

#[test]
fn criterion_05_grpo_machinery() {
    // Advantages: zero mean, unit variance when the spread is real.
    let mut rng = stream_rng(5, "adv");
    for _ in 0..20 {
        let rewards: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let adv = dcpo::advantages(&rewards);
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        let var: f64 = adv.iter().map(|a| a * a).sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-6, "advantage mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "advantage variance {var}");
    }
    let hand = dcpo::advantages(&[1.0, 2.0, 3.0]);
    assert!((hand[0] + 1.224744871).abs() < 1e-6);
    assert!(hand[1].abs() < 1e-9);
    assert_eq!(dcpo::advantages(&[0.5; 4]), vec![0.0; 4]);

    // KL estimator: nonnegative, zero exactly at ratio 1.
    for &(lt, lr) in
        &[(-1.0f32, -1.5), (-2.0, -0.5), (-0.3, -0.3), (-4.0, -1.0), (-1.2, -1.21)]
    {
        let mut tape = Tape::new();
        let lp = tape.leaf(&[lt], &[1], true);
        let kl = tape.kl_term(lp, &[lr]).unwrap();
        let v = tape.scalar(kl);
        assert!(v >= 0.0, "kl negative: {v}");
        if lt == lr {
            assert_eq!(v, 0.0, "kl at equality: {v}");
        } else {
            assert!(v > 0.0, "kl zero away from equality ({lt} vs {lr})");
        }
    }

    // Clipping: outside the trust region the gradient vanishes exactly.
    let eps = 0.2f32;
    let grad_of = |lp_theta: f32, lp_old: f32, adv: f32| -> f32 {
        let mut tape = Tape::new();
        let lp = tape.leaf(&[lp_theta], &[1], true);
        let ratio = tape.exp_shift(lp, &[lp_old]).unwrap();
        let s = tape.clip_surrogate(ratio, &[adv], eps).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        tape.grad(lp)[0]
    };
    // ratio = e^{0.5} ≈ 1.65 > 1.2, positive advantage: clipped, zero grad.
    assert_eq!(grad_of(-1.0, -1.5, 1.0), 0.0);
    // ratio ≈ 0.61 < 0.8, negative advantage: clipped, zero grad.
    assert_eq!(grad_of(-1.5, -1.0, -1.0), 0.0);
    // Inside the trust region the gradient is live.
    assert!(grad_of(-1.05, -1.0, 1.0).abs() > 1e-4);
    // Unclipped branch active even at extreme ratios when it is the minimum.
    assert!(grad_of(-1.0, -1.5, -1.0).abs() > 1e-4);
    pass(5, "grpo-machinery");
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: schedule and group composition on a tiny run.

fn tiny_rl_setup() -> (CarModel, SchedulerPolicy, WorldConfig, Corpus) {
    let wcfg = WorldConfig {
        symbol_count: 4,
        region_size: 3,
        run_length_min: 2,
        run_length_max: 3,
        jitter_step: 1,
        frame_rate: 2,
        seed: 60,
        ..Default::default()
    };
    let corpus = make_corpus(&wcfg, 1, 1, 6, (3, 5)).unwrap();
    let model = CarModel::new(CarModelConfig {
        n_layers: 1,
        n_attn_heads: 2,
        d_model: 16,
        d_ff: 32,
        n_additional_heads: 2,
        head_blocks: 1,
        text_vocab: wcfg.symbol_count,
        token_vocab: wcfg.token_vocab(),
        max_seq_len: 128,
        ..Default::default()
    })
    .unwrap();
    let policy = SchedulerPolicy::new(PolicyConfig {
        d_in: 16,
        d_model: 8,
        n_attn_heads: 2,
        d_ff: 16,
        action_set: vec![1, 2, 3],
        max_seq_len: 128,
        ..Default::default()
    })
    .unwrap();
    (model, policy, wcfg, corpus)
}

#[test]
fn criterion_06_beta_schedule() {
    let (model, mut policy, wcfg, corpus) = tiny_rl_setup();
    let cfg = DcpoConfig {
        epochs: 3,
        batch_size: 3,
        max_new_tokens: 48,
        collapse_threshold: -1e9,
        ..Default::default()
    };
    let logs = dcpo::train_dcpo(&model, &mut policy, &corpus.policy, &wcfg, &cfg).unwrap();
    let betas: Vec<f32> = logs.iter().map(|l| l.beta).collect();
    assert_eq!(betas.len(), 3);
    assert_eq!(betas[0], 0.0);
    assert!((betas[1] - 0.1).abs() < 1e-7, "epoch 2 beta {}", betas[1]);
    assert!((betas[2] - 0.2).abs() < 1e-7, "epoch 3 beta {}", betas[2]);
    pass(6, "beta-schedule");
}

#[test]
fn criterion_07_group_composition() {
    let (model, policy, wcfg, corpus) = tiny_rl_setup();
    let cfg = DcpoConfig { max_new_tokens: 48, ..Default::default() };
    for utt in &corpus.policy {
        let group = dcpo::generate_group(&model, &policy, utt, &wcfg, &cfg, "comp").unwrap();
        let guided: Vec<_> = group.rollouts.iter().filter(|r| r.guided).collect();
        let sampled: Vec<_> = group.rollouts.iter().filter(|r| !r.guided).collect();
        assert_eq!(guided.len(), cfg.guidance_range.len());
        assert_eq!(sampled.len(), cfg.guidance_range.len());
        for (r, &c) in guided.iter().zip(&cfg.guidance_range) {
            assert!(r.actions.iter().all(|&a| a == c), "guided rollout drifted from {c}");
            // Zero out-of-range penalty: rewards with and without it agree.
            let with = dcpo::reward(r.wer_gen, 0.0, &r.actions, r.n_tokens, &cfg.guidance_range, cfg.lambda, cfg.reward_floor);
            let without = dcpo::reward(r.wer_gen, 0.0, &r.actions, r.n_tokens, &cfg.guidance_range, 0.0, cfg.reward_floor);
            assert_eq!(with, without, "guided rollout paid a penalty");
        }
    }
    pass(7, "group-composition");
}

// ---------------------------------------------------------------------------
// Criterion 8: desk-scale CAR experiment.

#[test]
fn criterion_08_desk_scale_car() {
    let toy = &*TOY;
    assert!(
        toy.train_wall_s < 1800.0,
        "toy training took {:.0}s (budget 1800)",
        toy.train_wall_s
    );

    let acc = head_accuracy(&toy.model, &toy.corpus.eval).unwrap();
    assert!(acc[0] >= 0.90, "base head accuracy {:.4}", acc[0]);

    let methods = [Method::Far, Method::Car(2), Method::Car(3)];
    let (report, _) = evalsuite::evaluate(
        &toy.model,
        None,
        &methods,
        &toy.corpus.eval,
        &toy.wcfg,
        &toy_sampling(),
        8,
        96,
    )
    .unwrap();
    let far = &report.results[0];
    let car2 = &report.results[1];
    let car3 = &report.results[2];
    let ratio = far.total_steps as f64 / car3.total_steps as f64;
    assert!(
        (2.7..=3.3).contains(&ratio),
        "far/car3 step ratio {ratio:.3} (far {} car3 {})",
        far.total_steps,
        car3.total_steps
    );
    assert!(
        car2.wer_pct <= far.wer_pct + 2.0,
        "car2 wer {:.2} vs far wer {:.2}",
        car2.wer_pct,
        far.wer_pct
    );
    eprintln!(
        "desk-scale car: acc {:.3}, far wer {:.2}, car2 wer {:.2}, car3 wer {:.2}, ratio {ratio:.2}",
        acc[0], far.wer_pct, car2.wer_pct, car3.wer_pct
    );
    pass(8, "desk-scale-car");
}

// ---------------------------------------------------------------------------
// Criterion 9: desk-scale DCPO experiment.

#[test]
fn criterion_09_desk_scale_dcpo() {
    let toy = &*TOY;
    let (runs, wall) = &*DCPO_FULL;
    assert!(*wall < 3600.0, "dcpo training took {wall:.0}s (budget 3600)");

    let improving = runs
        .iter()
        .filter(|r| r.logs.last().unwrap().mean_reward >= r.logs[0].mean_reward)
        .count();
    assert!(improving >= 2, "reward improved in only {improving}/3 seeds");

    // Held-out behavior of each trained policy, sampled like in training.
    let mut in_range_total = 0usize;
    let mut action_total = 0usize;
    let mut wer_ok = 0usize;
    let mut avg_token_ok = 0usize;
    let sampling = toy_sampling();
    let eos = toy.wcfg.eos();
    for run in runs.iter() {
        let mut actions_in = 0usize;
        let mut actions_n = 0usize;
        for utt in &toy.corpus.eval {
            let prompt = &utt.target_tokens[..utt.prompt_len];
            let mut tr = stream_rng(run.seed, &format!("held-{}-tok", utt.id));
            let mut pr = stream_rng(run.seed, &format!("held-{}-pol", utt.id));
            let trace = decode_dcar(
                &toy.model, &run.policy, &utt.text, prompt, eos, 96, &sampling, &mut tr,
                &mut pr, false,
            )
            .unwrap();
            for &a in &trace.actions {
                if a == 2 || a == 3 {
                    actions_in += 1;
                }
                actions_n += 1;
            }
        }
        in_range_total += actions_in;
        action_total += actions_n;

        let methods = [Method::Car(2), Method::Car(3), Method::Dcar];
        let (report, _) = evalsuite::evaluate(
            &toy.model,
            Some(&run.policy),
            &methods,
            &toy.corpus.eval,
            &toy.wcfg,
            &sampling,
            9,
            96,
        )
        .unwrap();
        let car2 = &report.results[0];
        let car3 = &report.results[1];
        let dcar = &report.results[2];
        if dcar.wer_pct <= car2.wer_pct.min(car3.wer_pct) + 1.0 {
            wer_ok += 1;
        }
        if (2.0..=3.0).contains(&dcar.avg_tokens_per_step) {
            avg_token_ok += 1;
        }
        eprintln!(
            "dcpo seed {}: rewards {:?}, dcar wer {:.2} (car2 {:.2} car3 {:.2}), avg_token {:.2}",
            run.seed,
            run.logs.iter().map(|l| l.mean_reward).collect::<Vec<_>>(),
            dcar.wer_pct,
            car2.wer_pct,
            car3.wer_pct,
            dcar.avg_tokens_per_step
        );
    }
    let in_range = in_range_total as f64 / action_total.max(1) as f64;
    assert!(in_range >= 0.9, "held-out in-range fraction {in_range:.3}");
    assert!(avg_token_ok >= 2, "dcar avg_token in [2,3] in only {avg_token_ok}/3 seeds");
    assert!(wer_ok >= 2, "dcar wer competitive in only {wer_ok}/3 seeds");
    pass(9, "desk-scale-dcpo");
}

// ---------------------------------------------------------------------------
// Criterion 10: ablation direction.

#[test]
fn criterion_10_ablation_direction() {
    let (full_runs, _) = &*DCPO_FULL;
    // Compared on policy-sampled rollouts so the group composition (which the
    // no-guidance flag changes by construction) does not skew the metric.
    // An ablation "wins" only if it beats the full config by more than noise.
    const NOISE: f64 = 2e-3;
    for (flag_name, mutate) in [
        ("no-guidance", Box::new(|c: &mut DcpoConfig| c.no_guidance = true) as Box<dyn Fn(&mut DcpoConfig)>),
        ("no-penalty", Box::new(|c: &mut DcpoConfig| c.no_outrange_penalty = true)),
    ] {
        let mut full_wins = 0usize;
        for (i, &seed) in DCPO_SEEDS.iter().enumerate() {
            let ablated = run_dcpo(seed, &mutate);
            let full_r = full_runs[i].logs.last().unwrap().mean_policy_reward;
            let abl_r = ablated.logs.last().unwrap().mean_policy_reward;
            eprintln!("ablation {flag_name} seed {seed}: full {full_r:.4} vs ablated {abl_r:.4}");
            if full_r + NOISE >= abl_r {
                full_wins += 1;
            }
        }
        assert!(
            full_wins >= 2,
            "{flag_name}: full config won only {full_wins}/3 seeds"
        );
    }
    pass(10, "ablation-direction");
}

// ---------------------------------------------------------------------------
// Criterion 11: round trip and determinism.

#[test]
fn criterion_11_roundtrip_determinism() {
    // Oracle round trip over 1000 texts.
    let wcfg = WorldConfig {
        symbol_count: 8,
        region_size: 4,
        run_length_min: 2,
        run_length_max: 5,
        jitter_step: 1,
        frame_rate: 2,
        seed: 110,
        ..Default::default()
    };
    let mut rng = stream_rng(111, "roundtrip");
    for i in 0..1000 {
        let len = rng.random_range(1..12usize);
        let mut text = Vec::with_capacity(len);
        let mut prev = u32::MAX;
        while text.len() < len {
            let s = rng.random_range(0..wcfg.symbol_count as u32);
            if s != prev {
                text.push(s);
                prev = s;
            }
        }
        let tokens = world::generate(&text, &wcfg, &mut rng).unwrap();
        let back = transcribe(&tokens, &wcfg);
        assert_eq!(back.symbols, text, "round trip failed at case {i}");
        assert_eq!(back.clamped, 0);
        assert_eq!(word_error_rate(&text, &back.symbols).unwrap(), 0.0);
    }

    // Same-seed datasets are byte-identical.
    let dir = tempfile::tempdir().unwrap();
    let mk = |tag: &str| -> Vec<u8> {
        let corpus = make_corpus(&wcfg, 20, 5, 5, (3, 6)).unwrap();
        let p = dir.path().join(format!("{tag}.jsonl"));
        world::write_split(&p, &corpus.train).unwrap();
        std::fs::read(&p).unwrap()
    };
    assert_eq!(mk("a"), mk("b"), "dataset bytes differ across same-seed runs");

    // Checkpoints: load then save reproduces identical bytes.
    let model = CarModel::new(CarModelConfig {
        n_layers: 1,
        n_attn_heads: 2,
        d_model: 16,
        d_ff: 32,
        n_additional_heads: 2,
        head_blocks: 1,
        text_vocab: wcfg.symbol_count,
        token_vocab: wcfg.token_vocab(),
        max_seq_len: 64,
        ..Default::default()
    })
    .unwrap();
    let s1 = dir.path().join("m1");
    checkpoint::save_car(&model, &s1).unwrap();
    let loaded = checkpoint::load_car(&s1).unwrap();
    let s2 = dir.path().join("m2");
    checkpoint::save_car(&loaded, &s2).unwrap();
    assert_eq!(
        std::fs::read(s1.with_extension("bin")).unwrap(),
        std::fs::read(s2.with_extension("bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(s1.with_extension("json")).unwrap(),
        std::fs::read(s2.with_extension("json")).unwrap()
    );

    // Evaluation JSON is byte-identical for a fixed seed.
    let corpus = make_corpus(&wcfg, 1, 10, 1, (3, 6)).unwrap();
    let run_eval = || {
        let (report, _) = evalsuite::evaluate(
            &model,
            None,
            &[Method::Far, Method::Car(2)],
            &corpus.eval,
            &wcfg,
            &SamplingConfig::default(),
            5,
            64,
        )
        .unwrap();
        serde_json::to_vec_pretty(&report).unwrap()
    };
    assert_eq!(run_eval(), run_eval(), "eval JSON differs across same-seed runs");
    pass(11, "roundtrip-determinism");
}

// ---------------------------------------------------------------------------
// Criterion 12: head analysis on the trained toy model.

#[test]
fn criterion_12_head_analysis() {
    let toy = &*TOY;
    let report = evalsuite::analyze_heads(&toy.model, &toy.corpus.eval).unwrap();
    let total: f64 = report.best_fractions.iter().sum();
    assert!((total - 1.0).abs() < 1e-9, "fractions sum to {total}");
    assert!(
        report.base_best_fraction > 0.0 && report.base_best_fraction < 1.0,
        "base-best fraction {} not in (0,1)",
        report.base_best_fraction
    );
    eprintln!(
        "head analysis: base best {:.4}, base worst {:.4}, fractions {:?}",
        report.base_best_fraction, report.base_worst_fraction, report.best_fractions
    );
    pass(12, "head-analysis");
}
