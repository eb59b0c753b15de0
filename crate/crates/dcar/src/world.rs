//! Synthetic text→token world with an exact inverse transcriber.
//!
//! Each symbol expands into a run of tokens `s·R + u`, where `u` performs a
//! bounded random walk inside the symbol's region. Because adjacent symbols in
//! a text never repeat, collapsing runs of the per-token symbol recovers the
//! text exactly, giving a zero-noise transcription oracle for rewards.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("text has adjacent repeated symbols at position {0}")]
    AdjacentRepeat(usize),
    #[error("symbol id {0} out of range (S={1})")]
    SymbolOutOfRange(usize, usize),
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("split {0} must have at least 1 utterance")]
    EmptySplit(&'static str),
    #[error("text length range {0}..={1} is infeasible")]
    BadTextLenRange(usize, usize),
    #[error("invalid world config: {0}")]
    BadConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset record at line {0}")]
    BadRecord(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Number of distinct text symbols S.
    pub symbol_count: usize,
    /// Tokens per symbol region R; token ids for symbol s are s·R .. s·R+R−1.
    pub region_size: usize,
    pub run_length_min: usize,
    pub run_length_max: usize,
    /// Maximum sub-index move per token within a run.
    pub jitter_step: usize,
    /// Probability the sub-index walk holds in place at each step.
    pub jitter_hold_prob: f64,
    /// Tokens per synthetic second; sets the 3-second prompt to 3·F tokens.
    pub frame_rate: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            symbol_count: 24,
            region_size: 8,
            run_length_min: 2,
            run_length_max: 5,
            jitter_step: 1,
            jitter_hold_prob: 0.95,
            frame_rate: 50,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Token vocabulary size: S·R region tokens plus EOS.
    pub fn token_vocab(&self) -> usize {
        self.symbol_count * self.region_size + 1
    }

    pub fn eos(&self) -> u32 {
        (self.symbol_count * self.region_size) as u32
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.symbol_count == 0 || self.region_size == 0 {
            return Err(WorldError::BadConfig("symbol_count and region_size must be positive".into()));
        }
        if self.run_length_min < 1 || self.run_length_max < self.run_length_min {
            return Err(WorldError::BadConfig("need 1 <= run_length_min <= run_length_max".into()));
        }
        if self.region_size < 2 * self.jitter_step + 1 {
            return Err(WorldError::BadConfig(format!(
                "region_size {} < 2*jitter_step+1 = {}",
                self.region_size,
                2 * self.jitter_step + 1
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter_hold_prob) {
            return Err(WorldError::BadConfig("jitter_hold_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Symbol text plus its token realization; the prompt is a strict prefix of
/// the target tokens and stands in for an audio prompt.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: Vec<u32>,
    pub prompt_len: usize,
    pub target_tokens: Vec<u32>,
}

impl Utterance {
    pub fn prompt_tokens(&self) -> &[u32] {
        &self.target_tokens[..self.prompt_len]
    }
}

/// Output of the oracle transcriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub symbols: Vec<u32>,
    /// Count of out-of-range token ids that were clamped during transcription.
    pub clamped: usize,
}

fn check_text(text: &[u32], s: usize) -> Result<(), WorldError> {
    for (i, &sym) in text.iter().enumerate() {
        if sym as usize >= s {
            return Err(WorldError::SymbolOutOfRange(sym as usize, s));
        }
        if i > 0 && text[i - 1] == sym {
            return Err(WorldError::AdjacentRepeat(i));
        }
    }
    Ok(())
}

/// Expand a text into tokens. The sub-index walk carries across symbol
/// boundaries; the walk's starting offset plays the role of speaker identity.
pub fn generate(text: &[u32], cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<u32>, WorldError> {
    cfg.validate()?;
    check_text(text, cfg.symbol_count)?;
    let r = cfg.region_size;
    let mut tokens = Vec::new();
    let mut u = rng.random_range(0..r) as i64;
    for &sym in text {
        let run_len = rng.random_range(cfg.run_length_min..=cfg.run_length_max);
        for _ in 0..run_len {
            tokens.push(sym * r as u32 + u as u32);
            if cfg.jitter_step > 0 {
                let hold = rng.random::<f64>() < cfg.jitter_hold_prob;
                if !hold {
                    let step = rng.random_range(1..=cfg.jitter_step as i64);
                    let dir = if rng.random::<bool>() { 1 } else { -1 };
                    u = (u + dir * step).clamp(0, r as i64 - 1);
                }
            }
        }
    }
    tokens.push(cfg.eos());
    Ok(tokens)
}

/// Exact inverse of [`generate`]: map tokens to symbols by region, collapse
/// consecutive repeats, stop at the first EOS. Out-of-range ids are clamped
/// into the last region and counted.
pub fn transcribe(tokens: &[u32], cfg: &WorldConfig) -> Transcript {
    let r = cfg.region_size as u32;
    let eos = cfg.eos();
    let max_sym = cfg.symbol_count as u32 - 1;
    let mut symbols: Vec<u32> = Vec::new();
    let mut clamped = 0;
    for &t in tokens {
        if t == eos {
            break;
        }
        let mut sym = t / r;
        if t > eos || sym > max_sym {
            sym = max_sym;
            clamped += 1;
        }
        if symbols.last() != Some(&sym) {
            symbols.push(sym);
        }
    }
    Transcript { symbols, clamped }
}

/// (S+D+I)/N under optimal Levenshtein alignment; may exceed 1.
pub fn word_error_rate(reference: &[u32], hypothesis: &[u32]) -> Result<f64, WorldError> {
    if reference.is_empty() {
        return Err(WorldError::EmptyReference);
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / n as f64)
}

/// Derive a child rng from a seed and a stream name.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    name.hash(&mut h);
    ChaCha8Rng::seed_from_u64(h.finish())
}

fn random_text(len: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut text = Vec::with_capacity(len);
    for i in 0..len {
        loop {
            let sym = rng.random_range(0..s) as u32;
            if i == 0 || text[i - 1] != sym {
                text.push(sym);
                break;
            }
        }
    }
    text
}

fn make_utterance(id: String, len: usize, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Utterance, WorldError> {
    let text = random_text(len, cfg.symbol_count, rng);
    let target_tokens = generate(&text, cfg, rng)?;
    let non_eos = target_tokens.len() - 1;
    let prompt_len = (3 * cfg.frame_rate).min(non_eos / 2).max(1);
    Ok(Utterance { id, text, prompt_len, target_tokens })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub policy: Vec<Utterance>,
}

/// Generate three disjoint splits deterministically from the world seed.
pub fn make_corpus(
    cfg: &WorldConfig,
    n_train: usize,
    n_eval: usize,
    n_policy: usize,
    text_len_range: (usize, usize),
) -> Result<Corpus, WorldError> {
    cfg.validate()?;
    let (lo, hi) = text_len_range;
    if lo < 1 || hi < lo {
        return Err(WorldError::BadTextLenRange(lo, hi));
    }
    if cfg.symbol_count == 1 && hi > 1 {
        // A single symbol cannot form texts longer than 1 without repeats.
        return Err(WorldError::BadTextLenRange(lo, hi));
    }
    let mut out = Corpus { train: Vec::new(), eval: Vec::new(), policy: Vec::new() };
    for (name, count, split) in [
        ("train", n_train, &mut out.train),
        ("eval", n_eval, &mut out.eval),
        ("policy", n_policy, &mut out.policy),
    ] {
        if count == 0 {
            return Err(WorldError::EmptySplit(name));
        }
        let mut rng = stream_rng(cfg.seed, name);
        for i in 0..count {
            let len = rng.random_range(lo..=hi);
            split.push(make_utterance(format!("{name}-{i:05}"), len, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

fn ids_to_str(ids: &[u32]) -> String {
    ids.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn str_to_ids(s: &str) -> Option<Vec<u32>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split_whitespace().map(|t| t.parse().ok()).collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    prompt_len: usize,
    tokens: String,
}

/// One JSON record per line: id, space-separated text symbols, prompt length,
/// space-separated token ids.
pub fn write_split(path: &Path, split: &[Utterance]) -> Result<(), WorldError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in split {
        let rec = Record {
            id: u.id.clone(),
            text: ids_to_str(&u.text),
            prompt_len: u.prompt_len,
            tokens: ids_to_str(&u.target_tokens),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<Utterance>, WorldError> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|_| WorldError::BadRecord(i + 1))?;
        let text = str_to_ids(&rec.text).ok_or(WorldError::BadRecord(i + 1))?;
        let target_tokens = str_to_ids(&rec.tokens).ok_or(WorldError::BadRecord(i + 1))?;
        if rec.prompt_len >= target_tokens.len() {
            return Err(WorldError::BadRecord(i + 1));
        }
        out.push(Utterance { id: rec.id, text, prompt_len: rec.prompt_len, target_tokens });
    }
    Ok(out)
}
