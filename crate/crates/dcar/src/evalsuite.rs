//! Evaluation utilities: chunk-size profiling, side-by-side engine
//! comparison, per-head teacher-forced diagnostics, and attention export.
//! Reports split deterministic content from wall-clock timings so that
//! same-seed runs serialize byte-identically.

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::decode::{decode_car, decode_dcar, decode_far, DecodeTrace, SamplingConfig};
use crate::infer::{head_logits_of, softmax_vec, teacher_hidden, Engine};
use crate::model::{CarModel, ModelError, Result};
use crate::policy::SchedulerPolicy;
use crate::world::{stream_rng, transcribe, word_error_rate, Utterance, WorldConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Far,
    Car(usize),
    Dcar,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Far => write!(f, "far"),
            Method::Car(c) => write!(f, "car{c}"),
            Method::Dcar => write!(f, "dcar"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UttResult {
    pub id: String,
    pub n_tokens: usize,
    pub steps: usize,
    pub wer_pct: f64,
    pub ended: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub n_utterances: usize,
    pub total_tokens: usize,
    pub total_steps: usize,
    pub avg_tokens_per_step: f64,
    /// Mean per-utterance word error rate, in percent.
    pub wer_pct: f64,
    pub per_utterance: Vec<UttResult>,
}

/// Deterministic evaluation content; serializes identically across same-seed
/// runs on the same build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    /// World snapshot: reports from different worlds must not be merged.
    pub world: WorldConfig,
    pub results: Vec<MethodResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub wall_s: f64,
    /// Wall seconds per second of audio the generated tokens represent.
    pub rtf: f64,
    pub speedup_vs_far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub timings: Vec<MethodTiming>,
}

fn trace_wer(trace: &DecodeTrace, utt: &Utterance, wcfg: &WorldConfig) -> Result<f64> {
    let mut full = utt.target_tokens[..utt.prompt_len].to_vec();
    full.extend_from_slice(&trace.tokens);
    let hyp = transcribe(&full, wcfg);
    word_error_rate(&utt.text, &hyp.symbols).map_err(|e| ModelError::BadConfig(e.to_string()))
}

fn run_method(
    model: &CarModel,
    policy: Option<&SchedulerPolicy>,
    method: &Method,
    split: &[Utterance],
    wcfg: &WorldConfig,
    sampling: &SamplingConfig,
    seed: u64,
    max_new: usize,
) -> Result<(MethodResult, Duration)> {
    let eos = wcfg.eos();
    let mut per_utterance = Vec::with_capacity(split.len());
    let mut wall = Duration::ZERO;
    let mut total_tokens = 0usize;
    let mut total_steps = 0usize;
    let mut wer_sum = 0.0;
    for utt in split {
        let prompt = &utt.target_tokens[..utt.prompt_len];
        let mut tok_rng = stream_rng(seed, &format!("eval-u{}-tok", utt.id));
        let trace = match method {
            Method::Far => {
                decode_far(model, &utt.text, prompt, eos, max_new, sampling, &mut tok_rng)?
            }
            Method::Car(c) => {
                decode_car(model, &utt.text, prompt, eos, *c, max_new, sampling, &mut tok_rng)?
            }
            Method::Dcar => {
                let policy = policy.ok_or_else(|| {
                    ModelError::BadConfig("dcar evaluation needs a policy".into())
                })?;
                let mut pol_rng = stream_rng(seed, &format!("eval-u{}-pol", utt.id));
                // Evaluation argmaxes the scheduler; training rollouts sample.
                decode_dcar(
                    model, policy, &utt.text, prompt, eos, max_new, sampling, &mut tok_rng,
                    &mut pol_rng, true,
                )?
            }
        };
        let wer = trace_wer(&trace, utt, wcfg)?;
        wall += trace.wall;
        total_tokens += trace.tokens.len();
        total_steps += trace.steps;
        wer_sum += wer;
        per_utterance.push(UttResult {
            id: utt.id.clone(),
            n_tokens: trace.tokens.len(),
            steps: trace.steps,
            wer_pct: 100.0 * wer,
            ended: trace.ended(eos),
        });
    }
    let n = split.len();
    Ok((
        MethodResult {
            method: method.to_string(),
            n_utterances: n,
            total_tokens,
            total_steps,
            avg_tokens_per_step: total_tokens as f64 / total_steps.max(1) as f64,
            wer_pct: 100.0 * wer_sum / n.max(1) as f64,
            per_utterance,
        },
        wall,
    ))
}

/// Decode the split under every requested method. The same per-utterance
/// token stream is used for each method, so engines that commit identical
/// chunk sizes produce identical tokens.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &CarModel,
    policy: Option<&SchedulerPolicy>,
    methods: &[Method],
    split: &[Utterance],
    wcfg: &WorldConfig,
    sampling: &SamplingConfig,
    seed: u64,
    max_new: usize,
) -> Result<(EvalReport, TimingReport)> {
    if split.is_empty() {
        return Err(ModelError::BadConfig("empty evaluation split".into()));
    }
    let mut results = Vec::new();
    let mut walls = Vec::new();
    for method in methods {
        let (res, wall) = run_method(model, policy, method, split, wcfg, sampling, seed, max_new)?;
        walls.push((method.to_string(), wall, res.total_tokens));
        results.push(res);
    }
    let far_rtf = walls
        .iter()
        .zip(methods)
        .find(|(_, m)| **m == Method::Far)
        .map(|((_, w, t), _)| rtf(*w, *t, wcfg));
    let timings = walls
        .iter()
        .map(|(name, wall, tokens)| {
            let r = rtf(*wall, *tokens, wcfg);
            MethodTiming {
                method: name.clone(),
                wall_s: wall.as_secs_f64(),
                rtf: r,
                speedup_vs_far: far_rtf.map_or(f64::NAN, |f| f / r),
            }
        })
        .collect();
    Ok((EvalReport { seed, world: wcfg.clone(), results }, TimingReport { timings }))
}

fn rtf(wall: Duration, tokens: usize, wcfg: &WorldConfig) -> f64 {
    if tokens == 0 {
        return f64::INFINITY;
    }
    wall.as_secs_f64() / (tokens as f64 / wcfg.frame_rate as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkProfile {
    pub chunk: usize,
    pub wer_pct: f64,
    pub avg_tokens_per_step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileReport {
    pub rows: Vec<ChunkProfile>,
    /// The `top_n` chunk sizes with the lowest error; ties favor the smaller
    /// size. Sorted ascending.
    pub selected: Vec<usize>,
}

/// Decode the split once per candidate chunk size and rank sizes by error.
#[allow(clippy::too_many_arguments)]
pub fn profile_guidance(
    model: &CarModel,
    split: &[Utterance],
    wcfg: &WorldConfig,
    sampling: &SamplingConfig,
    seed: u64,
    max_new: usize,
    top_n: usize,
) -> Result<ProfileReport> {
    let heads = model.cfg.total_heads();
    let mut rows = Vec::with_capacity(heads);
    for c in 1..=heads {
        let (res, _) =
            run_method(model, None, &Method::Car(c), split, wcfg, sampling, seed, max_new)?;
        rows.push(ChunkProfile {
            chunk: c,
            wer_pct: res.wer_pct,
            avg_tokens_per_step: res.avg_tokens_per_step,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .wer_pct
            .partial_cmp(&rows[b].wer_pct)
            .unwrap()
            .then(rows[a].chunk.cmp(&rows[b].chunk))
    });
    let mut selected: Vec<usize> =
        order.iter().take(top_n.min(rows.len())).map(|&i| rows[i].chunk).collect();
    selected.sort_unstable();
    Ok(ProfileReport { rows, selected })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadReport {
    /// Target positions where every head could be scored.
    pub n_columns: usize,
    /// Mean teacher-forced cross entropy per head, nats.
    pub mean_ce: Vec<f64>,
    /// Fraction of columns each head wins (lowest cross entropy).
    pub best_fractions: Vec<f64>,
    pub base_best_fraction: f64,
    pub base_worst_fraction: f64,
}

/// Teacher-forced head comparison. For a target position, head `i` is scored
/// from the hidden state `i + 1` positions earlier, so all heads predict the
/// same token from progressively older contexts. Only positions where every
/// head applies are counted.
pub fn analyze_heads(model: &CarModel, split: &[Utterance]) -> Result<HeadReport> {
    let heads = model.cfg.total_heads();
    let mut ce_sum = vec![0.0f64; heads];
    let mut best = vec![0usize; heads];
    let mut base_worst = 0usize;
    let mut n_columns = 0usize;
    for utt in split {
        let len = utt.target_tokens.len();
        let input = &utt.target_tokens[..len - 1];
        let hidden = teacher_hidden(model, &utt.text, input)?;
        for idx in utt.prompt_len..len {
            if idx < heads {
                continue;
            }
            let target = utt.target_tokens[idx] as usize;
            let mut ces = Vec::with_capacity(heads);
            for i in 0..heads {
                let h = &hidden[idx - 1 - i];
                let probs = softmax_vec(&head_logits_of(model, h, i));
                ces.push(-(probs[target].max(f32::MIN_POSITIVE) as f64).ln());
            }
            let mut best_i = 0;
            let mut worst_i = 0;
            for i in 1..heads {
                if ces[i] < ces[best_i] - 1e-9 {
                    best_i = i;
                }
                if ces[i] > ces[worst_i] + 1e-9 {
                    worst_i = i;
                }
            }
            best[best_i] += 1;
            if worst_i == 0 {
                base_worst += 1;
            }
            for i in 0..heads {
                ce_sum[i] += ces[i];
            }
            n_columns += 1;
        }
    }
    if n_columns == 0 {
        return Err(ModelError::BadConfig("no scorable positions for head analysis".into()));
    }
    Ok(HeadReport {
        n_columns,
        mean_ce: ce_sum.iter().map(|s| s / n_columns as f64).collect(),
        best_fractions: best.iter().map(|&b| b as f64 / n_columns as f64).collect(),
        base_best_fraction: best[0] as f64 / n_columns as f64,
        base_worst_fraction: base_worst as f64 / n_columns as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionHeader {
    pub n_layers: usize,
    pub n_heads: usize,
    pub total_len: usize,
    pub text_len: usize,
    /// Row-major [total_len × total_len] matrices, layer-major then head.
    pub layout: String,
}

/// Teacher-forced attention maps for one utterance, written as a JSON header
/// beside a little-endian f32 blob. Rows a position cannot attend to are 0.
pub fn export_attention(
    model: &CarModel,
    text: &[u32],
    tokens: &[u32],
    stem: &Path,
) -> Result<()> {
    let mut eng = Engine::with_capture(model, text, true)?;
    eng.append_tokens(tokens)?;
    let total = text.len() + tokens.len();
    let (nl, nh) = (model.cfg.n_layers, model.cfg.n_attn_heads);
    let mut blob = Vec::with_capacity(nl * nh * total * total * 4);
    for layer in 0..nl {
        for head in 0..nh {
            let rows = &eng.captured[layer][head];
            for row in rows {
                for &p in row {
                    blob.extend_from_slice(&p.to_le_bytes());
                }
                for _ in row.len()..total {
                    blob.extend_from_slice(&0.0f32.to_le_bytes());
                }
            }
        }
    }
    let header = AttentionHeader {
        n_layers: nl,
        n_heads: nh,
        total_len: total,
        text_len: text.len(),
        layout: "layer,head,row,col".to_string(),
    };
    let io_err = |e: std::io::Error| ModelError::BadConfig(format!("attention export: {e}"));
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    std::fs::write(stem.with_extension("bin"), &blob).map_err(io_err)?;
    let mut json = serde_json::to_string_pretty(&header)
        .map_err(|e| ModelError::BadConfig(format!("attention header: {e}")))?;
    json.push('\n');
    std::fs::write(stem.with_extension("json"), json).map_err(io_err)?;
    Ok(())
}
