//! Plain-float inference path for the CAR model: prefix processing of the
//! text block, incremental KV-cached token appends, and per-head logit
//! evaluation. Appending k tokens does one batched pass over the k positions,
//! never k separate full forwards.

use crate::model::{CarModel, ModelError, Result};
use crate::tensor::Param;

const LN_EPS: f32 = 1e-5;

fn layer_norm_row(out: &mut [f32], x: &[f32], g: &[f32], b: &[f32]) {
    let n = x.len();
    let mean = x.iter().sum::<f32>() / n as f32;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..n {
        out[j] = (x[j] - mean) * inv * g[j] + b[j];
    }
}

/// y[rows×n] = x[rows×k] · w[k×n]
fn matmul_rows(x: &[f32], w: &Param, rows: usize) -> Vec<f32> {
    let (k, n) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * k);
    let mut y = vec![0.0f32; rows * n];
    for i in 0..rows {
        for p in 0..k {
            let xv = x[i * k + p];
            if xv == 0.0 {
                continue;
            }
            let wr = &w.data[p * n..(p + 1) * n];
            let yr = &mut y[i * n..(i + 1) * n];
            for j in 0..n {
                yr[j] += xv * wr[j];
            }
        }
    }
    y
}

fn add_bias_rows(y: &mut [f32], b: &Param, rows: usize) {
    let n = b.shape[0];
    for i in 0..rows {
        for j in 0..n {
            y[i * n + j] += b.data[j];
        }
    }
}

fn silu_inplace(y: &mut [f32]) {
    for v in y.iter_mut() {
        *v *= 1.0 / (1.0 + (-*v).exp());
    }
}

struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Per-layer key/value tensors over text prefix plus accepted tokens.
pub struct KvCache {
    layers: Vec<LayerKv>,
    /// Positions (text + tokens) currently cached.
    pub len: usize,
    pub text_len: usize,
}

/// One decode's exclusive view of the model: the cache plus stored
/// final-layernorm hidden states at token positions.
pub struct Engine<'m> {
    pub model: &'m CarModel,
    pub cache: KvCache,
    /// Hidden state per token position (post final layer norm).
    pub hidden: Vec<Vec<f32>>,
    /// When set, post-softmax attention rows are recorded per layer and head.
    pub capture_attention: bool,
    /// captured[layer][head][row] = attention weights over 0..=global_pos.
    pub captured: Vec<Vec<Vec<Vec<f32>>>>,
}

impl<'m> Engine<'m> {
    /// Process the text block with bidirectional attention and fill the cache.
    pub fn new(model: &'m CarModel, text: &[u32]) -> Result<Self> {
        Self::with_capture(model, text, false)
    }

    pub fn with_capture(model: &'m CarModel, text: &[u32], capture_attention: bool) -> Result<Self> {
        let cfg = &model.cfg;
        let lt = text.len();
        if lt > cfg.max_seq_len {
            return Err(ModelError::TooLong(lt, cfg.max_seq_len));
        }
        let d = cfg.d_model;
        let nh = cfg.n_attn_heads;
        let dh = d / nh;
        let mut x = vec![0.0f32; lt * d];
        for (i, &t) in text.iter().enumerate() {
            if t as usize >= cfg.text_vocab {
                return Err(ModelError::BadConfig(format!("text symbol {t} out of vocab")));
            }
            let e = &model.text_emb.data[t as usize * d..(t as usize + 1) * d];
            let p = model.pos_row(i);
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        let mut cache = KvCache {
            layers: (0..cfg.n_layers).map(|_| LayerKv { k: Vec::new(), v: Vec::new() }).collect(),
            len: lt,
            text_len: lt,
        };
        let mut captured = vec![vec![Vec::new(); nh]; cfg.n_layers];
        for (layer, blk) in model.blocks.iter().enumerate() {
            let mut xn = vec![0.0f32; lt * d];
            for i in 0..lt {
                layer_norm_row(&mut xn[i * d..(i + 1) * d], &x[i * d..(i + 1) * d], &blk.ln1_g.data, &blk.ln1_b.data);
            }
            let q = matmul_rows(&xn, &blk.wq, lt);
            let k = matmul_rows(&xn, &blk.wk, lt);
            let v = matmul_rows(&xn, &blk.wv, lt);
            // Bidirectional attention over the text block only.
            let mut ctx = vec![0.0f32; lt * d];
            for h in 0..nh {
                let hoff = h * dh;
                for i in 0..lt {
                    let qr = &q[i * d + hoff..i * d + hoff + dh];
                    let mut scores = vec![0.0f32; lt];
                    for j in 0..lt {
                        let kr = &k[j * d + hoff..j * d + hoff + dh];
                        scores[j] = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() / (dh as f32).sqrt();
                    }
                    let probs = softmax_vec(&scores);
                    if capture_attention {
                        captured[layer][h].push(probs.clone());
                    }
                    for j in 0..lt {
                        let vr = &v[j * d + hoff..j * d + hoff + dh];
                        let c = &mut ctx[i * d + hoff..i * d + hoff + dh];
                        for q2 in 0..dh {
                            c[q2] += probs[j] * vr[q2];
                        }
                    }
                }
            }
            let attn = matmul_rows(&ctx, &blk.wo, lt);
            for j in 0..lt * d {
                x[j] += attn[j];
            }
            let mut xn2 = vec![0.0f32; lt * d];
            for i in 0..lt {
                layer_norm_row(&mut xn2[i * d..(i + 1) * d], &x[i * d..(i + 1) * d], &blk.ln2_g.data, &blk.ln2_b.data);
            }
            let mut h1 = matmul_rows(&xn2, &blk.w1, lt);
            add_bias_rows(&mut h1, &blk.b1, lt);
            silu_inplace(&mut h1);
            let mut h2 = matmul_rows(&h1, &blk.w2, lt);
            add_bias_rows(&mut h2, &blk.b2, lt);
            for j in 0..lt * d {
                x[j] += h2[j];
            }
            cache.layers[layer].k = k;
            cache.layers[layer].v = v;
        }
        Ok(Engine { model, cache, hidden: Vec::new(), capture_attention, captured })
    }

    pub fn token_len(&self) -> usize {
        self.cache.len - self.cache.text_len
    }

    /// Batched forward over `tokens`, appended after the current cache tail.
    /// Advances the cache by exactly `tokens.len()` positions and stores each
    /// position's final hidden state.
    pub fn append_tokens(&mut self, tokens: &[u32]) -> Result<()> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let nh = cfg.n_attn_heads;
        let dh = d / nh;
        let rows = tokens.len();
        if rows == 0 {
            return Ok(());
        }
        let old_len = self.cache.len;
        if old_len + rows > cfg.max_seq_len {
            return Err(ModelError::TooLong(old_len + rows, cfg.max_seq_len));
        }
        let mut x = vec![0.0f32; rows * d];
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= cfg.token_vocab {
                return Err(ModelError::BadConfig(format!("token {t} out of vocab")));
            }
            let e = &self.model.tok_emb.data[t as usize * d..(t as usize + 1) * d];
            let p = self.model.pos_row(old_len + i);
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        for (layer, blk) in self.model.blocks.iter().enumerate() {
            let mut xn = vec![0.0f32; rows * d];
            for i in 0..rows {
                layer_norm_row(&mut xn[i * d..(i + 1) * d], &x[i * d..(i + 1) * d], &blk.ln1_g.data, &blk.ln1_b.data);
            }
            let q = matmul_rows(&xn, &blk.wq, rows);
            let knew = matmul_rows(&xn, &blk.wk, rows);
            let vnew = matmul_rows(&xn, &blk.wv, rows);
            let kv = &mut self.cache.layers[layer];
            kv.k.extend_from_slice(&knew);
            kv.v.extend_from_slice(&vnew);
            let mut ctx = vec![0.0f32; rows * d];
            for h in 0..nh {
                let hoff = h * dh;
                for i in 0..rows {
                    let visible = old_len + i + 1; // text + tokens up to and including self
                    let qr = &q[i * d + hoff..i * d + hoff + dh];
                    let mut scores = vec![0.0f32; visible];
                    for j in 0..visible {
                        let kr = &kv.k[j * d + hoff..j * d + hoff + dh];
                        scores[j] = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() / (dh as f32).sqrt();
                    }
                    let probs = softmax_vec(&scores);
                    if self.capture_attention {
                        self.captured[layer][h].push(probs.clone());
                    }
                    let c = &mut ctx[i * d + hoff..i * d + hoff + dh];
                    for j in 0..visible {
                        let vr = &kv.v[j * d + hoff..j * d + hoff + dh];
                        for q2 in 0..dh {
                            c[q2] += probs[j] * vr[q2];
                        }
                    }
                }
            }
            let attn = matmul_rows(&ctx, &blk.wo, rows);
            for j in 0..rows * d {
                x[j] += attn[j];
            }
            let mut xn2 = vec![0.0f32; rows * d];
            for i in 0..rows {
                layer_norm_row(&mut xn2[i * d..(i + 1) * d], &x[i * d..(i + 1) * d], &blk.ln2_g.data, &blk.ln2_b.data);
            }
            let mut h1 = matmul_rows(&xn2, &blk.w1, rows);
            add_bias_rows(&mut h1, &blk.b1, rows);
            silu_inplace(&mut h1);
            let mut h2 = matmul_rows(&h1, &blk.w2, rows);
            add_bias_rows(&mut h2, &blk.b2, rows);
            for j in 0..rows * d {
                x[j] += h2[j];
            }
        }
        for i in 0..rows {
            let mut hf = vec![0.0f32; d];
            layer_norm_row(&mut hf, &x[i * d..(i + 1) * d], &self.model.lnf_g.data, &self.model.lnf_b.data);
            self.hidden.push(hf);
        }
        self.cache.len += rows;
        Ok(())
    }

    /// Logits of head `head` (0 = base) applied to one hidden state.
    pub fn head_logits(&self, hidden: &[f32], head: usize) -> Vec<f32> {
        head_logits_of(self.model, hidden, head)
    }
}

pub fn softmax_vec(scores: &[f32]) -> Vec<f32> {
    let mx = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

pub fn head_logits_of(model: &CarModel, hidden: &[f32], head: usize) -> Vec<f32> {
    if head == 0 {
        return matmul_rows(hidden, &model.base_head, 1);
    }
    let h = &model.extra_heads[head - 1];
    let mut r = hidden.to_vec();
    for rb in &h.blocks {
        let mut lin = matmul_rows(&r, &rb.w, 1);
        add_bias_rows(&mut lin, &rb.b, 1);
        silu_inplace(&mut lin);
        for j in 0..r.len() {
            r[j] += lin[j];
        }
    }
    matmul_rows(&r, &h.proj, 1)
}

/// Teacher-forced hidden states for a full utterance, via the cache path.
pub fn teacher_hidden(model: &CarModel, text: &[u32], tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
    let mut eng = Engine::new(model, text)?;
    eng.append_tokens(tokens)?;
    Ok(eng.hidden)
}

/// Teacher-forced argmax accuracy per head over a split (scored region only).
pub fn head_accuracy(model: &CarModel, split: &[crate::world::Utterance]) -> Result<Vec<f64>> {
    let heads = model.cfg.total_heads();
    let mut correct = vec![0usize; heads];
    let mut total = vec![0usize; heads];
    for utt in split {
        let len = utt.target_tokens.len();
        let input = &utt.target_tokens[..len - 1];
        let hidden = teacher_hidden(model, &utt.text, input)?;
        for t in 0..input.len() {
            if t + 1 < utt.prompt_len {
                continue;
            }
            for i in 0..heads {
                let idx = t + 1 + i;
                if idx >= len {
                    break;
                }
                let logits = head_logits_of(model, &hidden[t], i);
                let pred = argmax(&logits);
                if pred == utt.target_tokens[idx] as usize {
                    correct[i] += 1;
                }
                total[i] += 1;
            }
        }
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect())
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
