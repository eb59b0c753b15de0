//! Chunk-size scheduler: a small causal transformer over the base model's
//! hidden states that emits a distribution over the action set at each token
//! position. It is trained separately from the base model, which stays frozen.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::infer::softmax_vec;
use crate::model::{linear_init, normal_init, ModelError, Result};
use crate::tensor::{Param, Tape, TensorId};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Width of the base model hidden states fed to the scheduler.
    pub d_in: usize,
    /// Internal width, kept small so the scheduler stays a fraction of the
    /// base model.
    pub d_model: usize,
    pub n_attn_heads: usize,
    pub d_ff: usize,
    /// Candidate chunk sizes, strictly increasing, each ≥ 1.
    pub action_set: Vec<usize>,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_in: 128,
            d_model: 32,
            n_attn_heads: 4,
            d_ff: 128,
            action_set: vec![1, 2, 3, 4],
            max_seq_len: 512,
            init_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_attn_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "policy d_model {} not divisible by {} heads",
                self.d_model, self.n_attn_heads
            )));
        }
        if self.action_set.is_empty() {
            return Err(ModelError::BadConfig("empty action set".into()));
        }
        for w in self.action_set.windows(2) {
            if w[1] <= w[0] {
                return Err(ModelError::BadConfig(format!("action set not strictly increasing: {:?}", self.action_set)));
            }
        }
        if self.action_set[0] == 0 {
            return Err(ModelError::BadConfig("chunk size 0 is not an action".into()));
        }
        if self.d_in == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(ModelError::BadConfig("zero-sized policy dimension".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct SchedulerPolicy {
    pub cfg: PolicyConfig,
    pub w_in: Param,
    pub ln1_g: Param,
    pub ln1_b: Param,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub ln2_g: Param,
    pub ln2_b: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub lnf_g: Param,
    pub lnf_b: Param,
    pub head_w: Param,
    pub head_b: Param,
}

impl SchedulerPolicy {
    pub fn new(cfg: PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::world::stream_rng(cfg.init_seed, "policy-init");
        let d = cfg.d_model;
        let na = cfg.action_set.len();
        Ok(SchedulerPolicy {
            w_in: linear_init(&mut rng, cfg.d_in, d, "pol.w_in"),
            ln1_g: Param::new("pol.ln1_g", vec![d], vec![1.0; d]),
            ln1_b: Param::zeros("pol.ln1_b", vec![d]),
            wq: linear_init(&mut rng, d, d, "pol.wq"),
            wk: linear_init(&mut rng, d, d, "pol.wk"),
            wv: linear_init(&mut rng, d, d, "pol.wv"),
            wo: linear_init(&mut rng, d, d, "pol.wo"),
            ln2_g: Param::new("pol.ln2_g", vec![d], vec![1.0; d]),
            ln2_b: Param::zeros("pol.ln2_b", vec![d]),
            w1: linear_init(&mut rng, d, cfg.d_ff, "pol.w1"),
            b1: Param::zeros("pol.b1", vec![cfg.d_ff]),
            w2: linear_init(&mut rng, cfg.d_ff, d, "pol.w2"),
            b2: Param::zeros("pol.b2", vec![d]),
            lnf_g: Param::new("pol.lnf_g", vec![d], vec![1.0; d]),
            lnf_b: Param::zeros("pol.lnf_b", vec![d]),
            head_w: Param::new(
                "pol.head_w",
                vec![d, na],
                normal_init(&mut rng, d * na, 0.01),
            ),
            head_b: Param::zeros("pol.head_b", vec![na]),
            cfg,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_in, &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo,
            &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_in, &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.wk,
            &mut self.wv, &mut self.wo, &mut self.ln2_g, &mut self.ln2_b, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.lnf_g, &mut self.lnf_b,
            &mut self.head_w, &mut self.head_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Index of `action` in the action set.
    pub fn action_index(&self, action: usize) -> Option<usize> {
        self.cfg.action_set.iter().position(|&a| a == action)
    }
}

/// Policy parameters registered as leaves on one tape, in `params()` order.
pub struct BoundPolicy {
    pub ids: Vec<TensorId>,
}

impl BoundPolicy {
    pub fn bind(policy: &SchedulerPolicy, tape: &mut Tape) -> Self {
        let ids = policy
            .params()
            .iter()
            .map(|p| tape.leaf(&p.data, &p.shape, true))
            .collect();
        BoundPolicy { ids }
    }

    /// Gradients in `params()` order after a backward pass.
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<&'t [f32]> {
        self.ids.iter().map(|&id| tape.grad(id)).collect()
    }
}

/// Action logits over all rows of `hidden` (one base-model hidden state per
/// token position), causal across positions. Returns a [len × |A|] tensor.
pub fn action_logits(
    policy: &SchedulerPolicy,
    bound: &BoundPolicy,
    tape: &mut Tape,
    hidden: &[f32],
) -> Result<TensorId> {
    let cfg = &policy.cfg;
    let d_in = cfg.d_in;
    let d = cfg.d_model;
    if hidden.len() % d_in != 0 {
        return Err(ModelError::BadConfig(format!(
            "hidden length {} not a multiple of d_in {}",
            hidden.len(),
            d_in
        )));
    }
    let len = hidden.len() / d_in;
    if len == 0 || len > cfg.max_seq_len {
        return Err(ModelError::TooLong(len, cfg.max_seq_len));
    }
    let ids = &bound.ids;
    let (w_in, ln1_g, ln1_b, wq, wk, wv, wo) =
        (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]);
    let (ln2_g, ln2_b, w1, b1, w2, b2) = (ids[7], ids[8], ids[9], ids[10], ids[11], ids[12]);
    let (lnf_g, lnf_b, head_w, head_b) = (ids[13], ids[14], ids[15], ids[16]);

    // The base model's hidden states already carry positional information,
    // so the scheduler adds none of its own.
    let h_in = tape.leaf(hidden, &[len, d_in], false);
    let mut x = tape.matmul(h_in, w_in)?;

    let mut causal = vec![false; len * len];
    for i in 0..len {
        for j in i + 1..len {
            causal[i * len + j] = true;
        }
    }

    let nh = cfg.n_attn_heads;
    let dh = d / nh;
    let xn = tape.layer_norm_rows(x, ln1_g, ln1_b, LN_EPS)?;
    let q_all = tape.matmul(xn, wq)?;
    let k_all = tape.matmul(xn, wk)?;
    let v_all = tape.matmul(xn, wv)?;
    let mut heads = Vec::with_capacity(nh);
    for h in 0..nh {
        let q = tape.slice_cols(q_all, h * dh, dh)?;
        let k = tape.slice_cols(k_all, h * dh, dh)?;
        let v = tape.slice_cols(v_all, h * dh, dh)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let probs = tape.masked_softmax_rows(scaled, &causal)?;
        heads.push(tape.matmul(probs, v)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    let attn = tape.matmul(ctx, wo)?;
    x = tape.add(x, attn)?;

    let xn2 = tape.layer_norm_rows(x, ln2_g, ln2_b, LN_EPS)?;
    let lin1 = tape.matmul(xn2, w1)?;
    let lin1 = tape.add_bias(lin1, b1)?;
    let act = tape.silu(lin1);
    let lin2 = tape.matmul(act, w2)?;
    let lin2 = tape.add_bias(lin2, b2)?;
    x = tape.add(x, lin2)?;

    let xf = tape.layer_norm_rows(x, lnf_g, lnf_b, LN_EPS)?;
    let logits = tape.matmul(xf, head_w)?;
    Ok(tape.add_bias(logits, head_b)?)
}

/// Action logits at the last position only, without building gradients.
pub fn last_logits(policy: &SchedulerPolicy, hidden: &[f32]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = BoundPolicy::bind(policy, &mut tape);
    let logits = action_logits(policy, &bound, &mut tape, hidden)?;
    let na = policy.cfg.action_set.len();
    let data = tape.data(logits);
    let len = data.len() / na;
    Ok(data[(len - 1) * na..].to_vec())
}

/// Pick an action at the last position and report its log probability.
/// Sampling consumes exactly one draw from `rng`; argmax consumes none.
pub fn act(
    policy: &SchedulerPolicy,
    hidden: &[f32],
    rng: &mut ChaCha8Rng,
    greedy: bool,
) -> Result<(usize, f32)> {
    let logits = last_logits(policy, hidden)?;
    let probs = softmax_vec(&logits);
    let idx = if greedy {
        crate::infer::argmax(&logits)
    } else {
        let u: f32 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    Ok((policy.cfg.action_set[idx], probs[idx].max(f32::MIN_POSITIVE).ln()))
}

/// Log probabilities of recorded (position, action) pairs under the current
/// parameters, recomputed from stored hidden states. No gradients.
pub fn log_prob_of(
    policy: &SchedulerPolicy,
    hidden: &[f32],
    decision_positions: &[usize],
    actions: &[usize],
) -> Result<Vec<f32>> {
    let action_idx = actions
        .iter()
        .map(|&a| {
            policy
                .action_index(a)
                .ok_or_else(|| ModelError::BadConfig(format!("action {a} not in action set")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let bound = BoundPolicy::bind(policy, &mut tape);
    let logits = action_logits(policy, &bound, &mut tape, hidden)?;
    let lp = tape.gather_log_softmax(logits, decision_positions, &action_idx)?;
    Ok(tape.data(lp).to_vec())
}
