//! Decoder-only transformer with bidirectional text attention, causal token
//! attention, one base head and N additional prediction heads.
//!
//! Head i (0 = base) predicts the token at offset i past the next position:
//! the hidden state at token position t parameterizes p(s_{t+1+i} | s_{≤t}, x).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Param, Tape, TensorError, TensorId};
use crate::world::Utterance;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] TensorError),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {0} exceeds max_seq_len {1}")]
    TooLong(usize, usize),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CarModelConfig {
    pub n_layers: usize,
    pub n_attn_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Number of additional heads N; total heads N+1.
    pub n_additional_heads: usize,
    /// Residual blocks inside each additional head.
    pub head_blocks: usize,
    /// Geometric per-head loss weight, γ ∈ (0, 1].
    pub gamma: f32,
    pub text_vocab: usize,
    /// Includes EOS.
    pub token_vocab: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
    pub init_seed: u64,
}

impl Default for CarModelConfig {
    fn default() -> Self {
        CarModelConfig {
            n_layers: 2,
            n_attn_heads: 4,
            d_model: 128,
            d_ff: 512,
            n_additional_heads: 3,
            head_blocks: 4,
            gamma: 1.0,
            text_vocab: 24,
            token_vocab: 24 * 8 + 1,
            max_seq_len: 512,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl CarModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_attn_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_attn_heads {}",
                self.d_model, self.n_attn_heads
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ModelError::BadConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.text_vocab == 0 || self.token_vocab < 2 {
            return Err(ModelError::BadConfig("empty vocabulary".into()));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_additional_heads + 1
    }
}

pub struct Block {
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
}

pub struct ResBlock {
    pub w: Param,
    pub b: Param,
}

/// An additional prediction head: residual (linear + SiLU) blocks feeding a
/// linear projection into the token vocabulary.
pub struct ExtraHead {
    pub blocks: Vec<ResBlock>,
    pub proj: Param,
}

pub struct CarModel {
    pub cfg: CarModelConfig,
    pub text_emb: Param,
    pub tok_emb: Param,
    pub blocks: Vec<Block>,
    pub lnf_g: Param,
    pub lnf_b: Param,
    pub base_head: Param,
    pub extra_heads: Vec<ExtraHead>,
    /// Sinusoidal table, not learned.
    pos_table: Vec<f32>,
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    // Box-Muller; two draws per value keeps the stream simple.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32 * std
        })
        .collect()
}

pub(crate) fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, name: &str) -> Param {
    let std = (2.0 / (fan_in + fan_out) as f32).sqrt();
    Param::new(name, vec![fan_in, fan_out], normal_init(rng, fan_in * fan_out, std))
}

pub fn sinusoidal_table(max_len: usize, d: usize) -> Vec<f32> {
    let mut table = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            table[pos * d + 2 * i] = angle.sin() as f32;
            table[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    table
}

impl CarModel {
    pub fn new(cfg: CarModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = cfg.d_model;
        let text_emb = Param::new("text_emb", vec![cfg.text_vocab, d], normal_init(&mut rng, cfg.text_vocab * d, 0.02));
        let tok_emb = Param::new("tok_emb", vec![cfg.token_vocab, d], normal_init(&mut rng, cfg.token_vocab * d, 0.02));
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            blocks.push(Block {
                ln1_g: Param::new(format!("l{l}.ln1.g"), vec![d], vec![1.0; d]),
                ln1_b: Param::zeros(format!("l{l}.ln1.b"), vec![d]),
                wq: linear_init(&mut rng, d, d, &format!("l{l}.wq")),
                wk: linear_init(&mut rng, d, d, &format!("l{l}.wk")),
                wv: linear_init(&mut rng, d, d, &format!("l{l}.wv")),
                wo: linear_init(&mut rng, d, d, &format!("l{l}.wo")),
                ln2_g: Param::new(format!("l{l}.ln2.g"), vec![d], vec![1.0; d]),
                ln2_b: Param::zeros(format!("l{l}.ln2.b"), vec![d]),
                w1: linear_init(&mut rng, d, cfg.d_ff, &format!("l{l}.w1")),
                b1: Param::zeros(format!("l{l}.b1"), vec![cfg.d_ff]),
                w2: linear_init(&mut rng, cfg.d_ff, d, &format!("l{l}.w2")),
                b2: Param::zeros(format!("l{l}.b2"), vec![d]),
            });
        }
        let lnf_g = Param::new("lnf.g", vec![d], vec![1.0; d]);
        let lnf_b = Param::zeros("lnf.b", vec![d]);
        let base_head = linear_init(&mut rng, d, cfg.token_vocab, "base_head");
        let mut extra_heads = Vec::with_capacity(cfg.n_additional_heads);
        for h in 0..cfg.n_additional_heads {
            let mut hblocks = Vec::with_capacity(cfg.head_blocks);
            for b in 0..cfg.head_blocks {
                hblocks.push(ResBlock {
                    w: linear_init(&mut rng, d, d, &format!("head{}.res{b}.w", h + 1)),
                    b: Param::zeros(format!("head{}.res{b}.b", h + 1), vec![d]),
                });
            }
            extra_heads.push(ExtraHead {
                blocks: hblocks,
                proj: linear_init(&mut rng, d, cfg.token_vocab, &format!("head{}.proj", h + 1)),
            });
        }
        let pos_table = sinusoidal_table(cfg.max_seq_len, d);
        Ok(CarModel {
            cfg,
            text_emb,
            tok_emb,
            blocks,
            lnf_g,
            lnf_b,
            base_head,
            extra_heads,
            pos_table,
        })
    }

    pub fn pos_row(&self, pos: usize) -> &[f32] {
        let d = self.cfg.d_model;
        &self.pos_table[pos * d..(pos + 1) * d]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = vec![&self.text_emb, &self.tok_emb];
        for b in &self.blocks {
            v.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.base_head]);
        for h in &self.extra_heads {
            for rb in &h.blocks {
                v.extend([&rb.w, &rb.b]);
            }
            v.push(&h.proj);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = vec![&mut self.text_emb, &mut self.tok_emb];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.base_head]);
        for h in &mut self.extra_heads {
            for rb in &mut h.blocks {
                v.extend([&mut rb.w, &mut rb.b]);
            }
            v.push(&mut h.proj);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Boolean attention mask for a concatenated [text ‖ tokens] sequence.
/// `true` means the attention edge is forbidden.
pub struct PrefixMask {
    pub text_len: usize,
    pub token_len: usize,
    pub mask: Vec<bool>,
}

impl PrefixMask {
    pub fn new(text_len: usize, token_len: usize) -> Self {
        let n = text_len + token_len;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let forbidden = if i < text_len {
                    // Text rows: bidirectional over text, never into tokens.
                    j >= text_len
                } else {
                    // Token rows: all text plus causal tokens.
                    j >= text_len && j > i
                };
                mask[i * n + j] = forbidden;
            }
        }
        PrefixMask { text_len, token_len, mask }
    }
}

/// Tape bindings for every parameter, in [`CarModel::params`] order.
pub struct BoundModel {
    pub ids: Vec<TensorId>,
}

impl BoundModel {
    pub fn bind(model: &CarModel, tape: &mut Tape) -> Self {
        let ids = model
            .params()
            .iter()
            .map(|p| tape.leaf(&p.data, &p.shape, true))
            .collect();
        BoundModel { ids }
    }

    /// Collect gradients in the same order as [`CarModel::params`].
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f32>> {
        self.ids.iter().map(|&id| tape.grad(id).to_vec()).collect()
    }
}

struct BlockIds {
    ln1_g: TensorId,
    ln1_b: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

fn block_ids(bound: &BoundModel, layer: usize) -> BlockIds {
    let base = 2 + layer * 12;
    let id = |k: usize| bound.ids[base + k];
    BlockIds {
        ln1_g: id(0),
        ln1_b: id(1),
        wq: id(2),
        wk: id(3),
        wv: id(4),
        wo: id(5),
        ln2_g: id(6),
        ln2_b: id(7),
        w1: id(8),
        b1: id(9),
        w2: id(10),
        b2: id(11),
    }
}

pub struct ForwardOut {
    /// Final-layernorm hidden states at token positions, [T_tokens × d_model].
    pub token_hidden: TensorId,
    /// Per-head logits over token positions, head 0 first; each [T_tokens × V].
    pub head_logits: Vec<TensorId>,
}

const LN_EPS: f32 = 1e-5;

/// Optional dropout masks sampled by the caller; `None` disables dropout.
pub struct DropoutRng<'r> {
    pub p: f32,
    pub rng: &'r mut ChaCha8Rng,
}

fn maybe_dropout(tape: &mut Tape, x: TensorId, dk: &mut Option<&mut DropoutRng>) -> Result<TensorId> {
    if let Some(d) = dk {
        if d.p > 0.0 {
            let n = tape.data(x).len();
            let keep = 1.0 - d.p;
            let mask: Vec<f32> = (0..n)
                .map(|_| if d.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let shape = tape.shape(x).to_vec();
            let m = tape.leaf(&mask, &shape, false);
            return Ok(tape.mul(x, m)?);
        }
    }
    Ok(x)
}

/// Teacher-forced forward over [text ‖ tokens] recorded on a tape.
pub fn forward_train(
    model: &CarModel,
    bound: &BoundModel,
    tape: &mut Tape,
    text: &[u32],
    tokens: &[u32],
    mut dropout: Option<&mut DropoutRng>,
) -> Result<ForwardOut> {
    let cfg = &model.cfg;
    let lt = text.len();
    let tt = tokens.len();
    let total = lt + tt;
    if total > cfg.max_seq_len {
        return Err(ModelError::TooLong(total, cfg.max_seq_len));
    }
    let d = cfg.d_model;
    let nh = cfg.n_attn_heads;
    let dh = d / nh;

    let text_ids: Vec<usize> = text.iter().map(|&t| t as usize).collect();
    let tok_ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let te = tape.embed(bound.ids[0], &text_ids)?;
    let ke = tape.embed(bound.ids[1], &tok_ids)?;

    // Stack text over token embeddings, add sinusoidal positions.
    let mut pos = vec![0.0f32; total * d];
    for p in 0..total {
        pos[p * d..(p + 1) * d].copy_from_slice(model.pos_row(p));
    }
    let pos_id = tape.leaf(&pos, &[total, d], false);
    let stacked = tape_concat_rows(tape, te, ke)?;
    let mut x = tape.add(stacked, pos_id)?;

    let mask = PrefixMask::new(lt, tt);
    for layer in 0..cfg.n_layers {
        let ids = block_ids(bound, layer);
        // Attention sublayer.
        let xn = tape.layer_norm_rows(x, ids.ln1_g, ids.ln1_b, LN_EPS)?;
        let q = tape.matmul(xn, ids.wq)?;
        let k = tape.matmul(xn, ids.wk)?;
        let v = tape.matmul(xn, ids.wv)?;
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt());
            let probs = tape.masked_softmax_rows(scaled, &mask.mask)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn = tape.matmul(ctx, ids.wo)?;
        let attn = maybe_dropout(tape, attn, &mut dropout)?;
        x = tape.add(x, attn)?;
        // Feed-forward sublayer.
        let xn2 = tape.layer_norm_rows(x, ids.ln2_g, ids.ln2_b, LN_EPS)?;
        let h1 = tape.matmul(xn2, ids.w1)?;
        let h1 = tape.add_bias(h1, ids.b1)?;
        let a = tape.silu(h1);
        let h2 = tape.matmul(a, ids.w2)?;
        let h2 = tape.add_bias(h2, ids.b2)?;
        let h2 = maybe_dropout(tape, h2, &mut dropout)?;
        x = tape.add(x, h2)?;
    }

    let nfix = 2 + cfg.n_layers * 12;
    let xf = tape.layer_norm_rows(x, bound.ids[nfix], bound.ids[nfix + 1], LN_EPS)?;
    let token_hidden = tape.slice_rows(xf, lt, tt)?;

    let base_head = bound.ids[nfix + 2];
    let mut head_logits = vec![tape.matmul(token_hidden, base_head)?];
    let mut off = nfix + 3;
    for _ in 0..cfg.n_additional_heads {
        let mut r = token_hidden;
        for _ in 0..cfg.head_blocks {
            let w = bound.ids[off];
            let b = bound.ids[off + 1];
            off += 2;
            let lin = tape.matmul(r, w)?;
            let lin = tape.add_bias(lin, b)?;
            let act = tape.silu(lin);
            r = tape.add(r, act)?;
        }
        let proj = bound.ids[off];
        off += 1;
        head_logits.push(tape.matmul(r, proj)?);
    }
    Ok(ForwardOut { token_hidden, head_logits })
}

/// Stack two row blocks on the tape (a over b).
fn tape_concat_rows(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    // Implemented via column-wise identity: rows are contiguous, so build with
    // slice/concat-free arithmetic: pad each part with explicit zero rows and add.
    let (ra, ca) = (tape.shape(a)[0], tape.shape(a)[1]);
    let (rb, cb) = (tape.shape(b)[0], tape.shape(b)[1]);
    if ca != cb {
        return Err(ModelError::Numeric(TensorError::ShapeMismatch {
            op: "concat_rows",
            detail: format!("{ca} vs {cb} cols"),
        }));
    }
    // Selection matrices are constant, so matmul routes gradients correctly.
    let total = ra + rb;
    let mut sel_a = vec![0.0f32; total * ra];
    for i in 0..ra {
        sel_a[i * ra + i] = 1.0;
    }
    let mut sel_b = vec![0.0f32; total * rb];
    for i in 0..rb {
        sel_b[(ra + i) * rb + i] = 1.0;
    }
    let sa = tape.leaf(&sel_a, &[total, ra], false);
    let sb = tape.leaf(&sel_b, &[total, rb], false);
    let pa = tape.matmul(sa, a)?;
    let pb = tape.matmul(sb, b)?;
    Ok(tape.add(pa, pb)?)
}

/// Per-head cross-entropy weights for one utterance under the CAR objective.
///
/// Row t of the teacher-forced input predicts target index t+1+i with head i;
/// positions inside the prompt and heads past the sequence end carry weight 0.
/// Returns (targets, weights) per head; weights are γⁱ / T_scored.
pub fn car_loss_weights(
    cfg: &CarModelConfig,
    target_tokens: &[u32],
    prompt_len: usize,
) -> Vec<(Vec<usize>, Vec<f32>)> {
    let len = target_tokens.len();
    let t_in = len - 1; // final EOS is a target, never an input
    let t_scored = (len - prompt_len) as f32;
    let mut out = Vec::with_capacity(cfg.total_heads());
    for i in 0..cfg.total_heads() {
        let mut targets = vec![0usize; t_in];
        let mut weights = vec![0.0f32; t_in];
        for t in 0..t_in {
            let idx = t + 1 + i;
            if t + 1 >= prompt_len && idx < len {
                targets[t] = target_tokens[idx] as usize;
                weights[t] = cfg.gamma.powi(i as i32) / t_scored;
            }
        }
        out.push((targets, weights));
    }
    out
}

/// L_CAR for one utterance on an existing tape.
pub fn car_loss_utterance(
    model: &CarModel,
    bound: &BoundModel,
    tape: &mut Tape,
    utt: &Utterance,
    dropout: Option<&mut DropoutRng>,
) -> Result<TensorId> {
    let len = utt.target_tokens.len();
    let input = &utt.target_tokens[..len - 1];
    let fwd = forward_train(model, bound, tape, &utt.text, input, dropout)?;
    let specs = car_loss_weights(&model.cfg, &utt.target_tokens, utt.prompt_len);
    let mut loss: Option<TensorId> = None;
    for (i, (targets, weights)) in specs.iter().enumerate() {
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let term = tape.cross_entropy_rows(fwd.head_logits[i], targets, weights)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(loss.expect("at least the base head scores one position"))
}

/// Mean L_CAR over a batch of utterances.
pub fn car_loss(
    model: &CarModel,
    bound: &BoundModel,
    tape: &mut Tape,
    batch: &[&Utterance],
    mut dropout: Option<&mut DropoutRng>,
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for utt in batch {
        let l = car_loss_utterance(model, bound, tape, utt, dropout.as_deref_mut())?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let acc = acc.expect("non-empty batch");
    Ok(tape.scale(acc, 1.0 / batch.len() as f32))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig { learning_rate: 1e-3, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Teacher-forced argmax accuracy per head over the eval split.
    pub eval_head_accuracy: Vec<f64>,
}

/// Teacher-forced training over minibatches; returns per-epoch logs.
pub fn train_car(
    model: &mut CarModel,
    train: &[Utterance],
    eval: &[Utterance],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    assert!(!train.is_empty() && cfg.batch_size >= 1);
    let mut adam = AdamState::new(cfg.adam.clone(), &model.params());
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = crate::world::stream_rng(cfg.seed, &format!("car-epoch-{epoch}"));
        shuffle(&mut order, &mut rng);
        let mut drop_rng = crate::world::stream_rng(cfg.seed, &format!("car-dropout-{epoch}"));
        let mut loss_sum = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let bound = BoundModel::bind(model, &mut tape);
            let mut dropout = DropoutRng { p: model.cfg.dropout, rng: &mut drop_rng };
            let loss = car_loss(model, &bound, &mut tape, &batch, Some(&mut dropout))?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(ModelError::Diverged(format!("NaN loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut model.params_mut(), &grad_refs)?;
            loss_sum += loss_val as f64;
            n_batches += 1;
        }
        let eval_head_accuracy = crate::infer::head_accuracy(model, eval)?;
        logs.push(EpochLog { epoch, train_loss: loss_sum / n_batches as f64, eval_head_accuracy });
    }
    Ok(logs)
}

/// Fisher-Yates with our own rng type.
pub fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
