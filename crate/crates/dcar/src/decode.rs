//! Decoding engines over the cached inference path. All engines share one
//! loop; they differ only in how many tokens they commit per forward step.
//! Token sampling consumes exactly one RNG draw per sampled token, so
//! engines that pick the same chunk sizes emit identical token streams from
//! the same seed.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::infer::{argmax, Engine};
use crate::model::{CarModel, ModelError, Result};
use crate::policy::SchedulerPolicy;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f32,
    /// Number of highest-logit candidates kept; 0 keeps the full vocabulary.
    pub top_k: usize,
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_k: 16, greedy: false }
    }
}

/// Everything observed during one decode, enough to score the rollout later
/// without touching the model again.
pub struct DecodeTrace {
    /// Generated tokens, including the end token when one was emitted.
    pub tokens: Vec<u32>,
    /// Hidden-state index (into `hidden`) consulted before each step.
    pub decision_positions: Vec<usize>,
    /// Intended chunk size per step, before any truncation.
    pub actions: Vec<usize>,
    /// Log probability of each action under the scheduler; empty for engines
    /// without one.
    pub policy_log_probs: Vec<f32>,
    /// Tokens actually committed per step; sums to `tokens.len()`.
    pub chunk_sizes: Vec<usize>,
    /// Final-layer hidden state per token position, prompt included.
    pub hidden: Vec<Vec<f32>>,
    pub steps: usize,
    pub wall: Duration,
    pub hit_max_len: bool,
}

impl DecodeTrace {
    pub fn ended(&self, eos: u32) -> bool {
        self.tokens.last() == Some(&eos)
    }
}

/// Draw one token from `logits`. Greedy takes the argmax and consumes no
/// randomness; otherwise temperature plus top-k filtering, one draw.
pub fn sample_token(logits: &[f32], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> u32 {
    if cfg.greedy {
        return argmax(logits) as u32;
    }
    let k = if cfg.top_k == 0 { logits.len() } else { cfg.top_k.min(logits.len()) };
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    let t = cfg.temperature.max(1e-6);
    let mx = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (((logits[i] - mx) / t) as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (w, &i) in weights.iter().zip(&order) {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    *order.last().unwrap() as u32
}

fn decode_core(
    model: &CarModel,
    text: &[u32],
    prompt: &[u32],
    eos: u32,
    max_new: usize,
    sampling: &SamplingConfig,
    token_rng: &mut ChaCha8Rng,
    chooser: &mut dyn FnMut(&[Vec<f32>]) -> Result<(usize, Option<f32>)>,
) -> Result<DecodeTrace> {
    if prompt.is_empty() {
        return Err(ModelError::BadConfig("empty prompt".into()));
    }
    let heads = model.cfg.total_heads();
    let start = Instant::now();
    let mut eng = Engine::new(model, text)?;
    eng.append_tokens(prompt)?;
    let mut trace = DecodeTrace {
        tokens: Vec::new(),
        decision_positions: Vec::new(),
        actions: Vec::new(),
        policy_log_probs: Vec::new(),
        chunk_sizes: Vec::new(),
        hidden: Vec::new(),
        steps: 0,
        wall: Duration::ZERO,
        hit_max_len: false,
    };
    loop {
        if trace.ended(eos) {
            break;
        }
        let room = (max_new - trace.tokens.len())
            .min(model.cfg.max_seq_len.saturating_sub(eng.cache.len));
        if room == 0 {
            trace.hit_max_len = true;
            break;
        }
        let pos = eng.token_len() - 1;
        let (action, log_prob) = chooser(&eng.hidden)?;
        if action == 0 || action > heads {
            return Err(ModelError::BadConfig(format!(
                "chunk size {action} outside 1..={heads}"
            )));
        }
        let mut chunk = Vec::with_capacity(action);
        for i in 0..action.min(room) {
            let logits = eng.head_logits(&eng.hidden[pos], i);
            let tok = sample_token(&logits, sampling, token_rng);
            chunk.push(tok);
            if tok == eos {
                break;
            }
        }
        trace.decision_positions.push(pos);
        trace.actions.push(action);
        if let Some(lp) = log_prob {
            trace.policy_log_probs.push(lp);
        }
        trace.chunk_sizes.push(chunk.len());
        trace.tokens.extend_from_slice(&chunk);
        eng.append_tokens(&chunk)?;
        trace.steps += 1;
    }
    trace.hidden = eng.hidden;
    trace.wall = start.elapsed();
    Ok(trace)
}

/// Frame-level decoding: one token per step from the base head.
pub fn decode_far(
    model: &CarModel,
    text: &[u32],
    prompt: &[u32],
    eos: u32,
    max_new: usize,
    sampling: &SamplingConfig,
    token_rng: &mut ChaCha8Rng,
) -> Result<DecodeTrace> {
    decode_core(model, text, prompt, eos, max_new, sampling, token_rng, &mut |_| Ok((1, None)))
}

/// Fixed chunk size `c` per step, tokens drawn from heads 0..c-1.
pub fn decode_car(
    model: &CarModel,
    text: &[u32],
    prompt: &[u32],
    eos: u32,
    chunk: usize,
    max_new: usize,
    sampling: &SamplingConfig,
    token_rng: &mut ChaCha8Rng,
) -> Result<DecodeTrace> {
    decode_core(model, text, prompt, eos, max_new, sampling, token_rng, &mut |_| Ok((chunk, None)))
}

/// Chunk size chosen per step by the scheduler policy over the hidden states
/// seen so far. Policy randomness comes from its own stream, so the token
/// stream stays aligned with fixed-chunk engines making the same choices.
#[allow(clippy::too_many_arguments)]
pub fn decode_dcar(
    model: &CarModel,
    policy: &SchedulerPolicy,
    text: &[u32],
    prompt: &[u32],
    eos: u32,
    max_new: usize,
    sampling: &SamplingConfig,
    token_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
    policy_greedy: bool,
) -> Result<DecodeTrace> {
    let heads = model.cfg.total_heads();
    if policy.cfg.action_set.iter().any(|&a| a == 0 || a > heads) {
        return Err(ModelError::BadConfig(format!(
            "action set {:?} outside 1..={heads}",
            policy.cfg.action_set
        )));
    }
    decode_core(model, text, prompt, eos, max_new, sampling, token_rng, &mut |hidden| {
        let flat: Vec<f32> = hidden.iter().flatten().copied().collect();
        let (action, lp) = crate::policy::act(policy, &flat, policy_rng, policy_greedy)?;
        Ok((action, Some(lp)))
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeStats {
    pub n_tokens: usize,
    pub steps: usize,
    pub avg_tokens_per_step: f64,
    pub wall_s: f64,
    /// Wall time divided by the audio duration the tokens represent.
    pub rtf: f64,
}

pub fn measure(trace: &DecodeTrace, frame_rate: usize) -> DecodeStats {
    let n = trace.tokens.len();
    let wall_s = trace.wall.as_secs_f64();
    let audio_s = n as f64 / frame_rate as f64;
    DecodeStats {
        n_tokens: n,
        steps: trace.steps,
        avg_tokens_per_step: if trace.steps == 0 { 0.0 } else { n as f64 / trace.steps as f64 },
        wall_s,
        rtf: if n == 0 { f64::INFINITY } else { wall_s / audio_s },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CarModel, CarModelConfig};
    use crate::policy::{PolicyConfig, SchedulerPolicy};
    use crate::world::stream_rng;

    fn tiny_model() -> CarModel {
        CarModel::new(CarModelConfig {
            n_layers: 2,
            n_attn_heads: 2,
            d_model: 16,
            d_ff: 32,
            n_additional_heads: 2,
            head_blocks: 2,
            text_vocab: 5,
            token_vocab: 11,
            max_seq_len: 96,
            ..Default::default()
        })
        .unwrap()
    }

    const EOS: u32 = 10;

    #[test]
    fn greedy_sampling_is_argmax_and_drawless() {
        let logits = [0.1f32, 2.0, -1.0, 1.9];
        let cfg = SamplingConfig { greedy: true, ..Default::default() };
        let mut rng = stream_rng(0, "s");
        let before = rng.clone();
        assert_eq!(sample_token(&logits, &cfg, &mut rng), 1);
        let mut b2 = before;
        assert_eq!(rng.random::<u64>(), b2.random::<u64>());
    }

    #[test]
    fn top_k_one_matches_greedy() {
        let logits = [0.3f32, -0.2, 5.0, 4.9];
        let cfg = SamplingConfig { top_k: 1, ..Default::default() };
        let mut rng = stream_rng(1, "s");
        for _ in 0..10 {
            assert_eq!(sample_token(&logits, &cfg, &mut rng), 2);
        }
    }

    #[test]
    fn sampling_consumes_one_draw_per_token() {
        let logits = [0.0f32; 8];
        let cfg = SamplingConfig::default();
        let mut a = stream_rng(2, "s");
        let mut b = stream_rng(2, "s");
        let _ = sample_token(&logits, &cfg, &mut a);
        let _: f64 = b.random();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn far_equals_car_one() {
        let model = tiny_model();
        let text = [0u32, 2, 4];
        let prompt = [3u32, 4];
        let cfg = SamplingConfig::default();
        let mut r1 = stream_rng(5, "tok");
        let far = decode_far(&model, &text, &prompt, EOS, 40, &cfg, &mut r1).unwrap();
        let mut r2 = stream_rng(5, "tok");
        let car = decode_car(&model, &text, &prompt, EOS, 1, 40, &cfg, &mut r2).unwrap();
        assert_eq!(far.tokens, car.tokens);
        assert_eq!(far.steps, car.steps);
    }

    #[test]
    fn rigged_constant_policy_matches_far() {
        let model = tiny_model();
        let mut pol = SchedulerPolicy::new(PolicyConfig {
            d_in: 16,
            d_model: 8,
            n_attn_heads: 2,
            d_ff: 16,
            action_set: vec![1, 2, 3],
            max_seq_len: 96,
            ..Default::default()
        })
        .unwrap();
        pol.head_b.data[0] = 60.0;
        let text = [1u32, 3];
        let prompt = [0u32];
        let cfg = SamplingConfig::default();
        let mut r1 = stream_rng(9, "tok");
        let far = decode_far(&model, &text, &prompt, EOS, 30, &cfg, &mut r1).unwrap();
        let mut r2 = stream_rng(9, "tok");
        let mut pr = stream_rng(9, "pol");
        let dcar =
            decode_dcar(&model, &pol, &text, &prompt, EOS, 30, &cfg, &mut r2, &mut pr, true)
                .unwrap();
        assert_eq!(far.tokens, dcar.tokens);
    }

    #[test]
    fn trace_bookkeeping_holds() {
        let model = tiny_model();
        let cfg = SamplingConfig::default();
        let mut rng = stream_rng(3, "tok");
        let tr = decode_car(&model, &[0, 1], &[2, 5], EOS, 3, 24, &cfg, &mut rng).unwrap();
        assert_eq!(tr.chunk_sizes.iter().sum::<usize>(), tr.tokens.len());
        assert_eq!(tr.steps, tr.chunk_sizes.len());
        assert_eq!(tr.actions.len(), tr.steps);
        assert!(tr.actions.iter().all(|&a| a == 3));
        // Hidden covers prompt plus generated tokens.
        assert_eq!(tr.hidden.len(), 2 + tr.tokens.len());
        // Decisions advance by the committed chunk.
        for (w, c) in tr.decision_positions.windows(2).zip(&tr.chunk_sizes) {
            assert_eq!(w[1] - w[0], *c);
        }
        assert!(tr.ended(EOS) || tr.hit_max_len);
    }

    #[test]
    fn max_new_caps_generation() {
        let model = tiny_model();
        let cfg = SamplingConfig { top_k: 4, ..Default::default() };
        let mut rng = stream_rng(11, "tok");
        let tr = decode_car(&model, &[0], &[1], EOS, 3, 5, &cfg, &mut rng).unwrap();
        assert!(tr.tokens.len() <= 5);
        if !tr.ended(EOS) {
            assert!(tr.hit_max_len);
        }
    }
}
