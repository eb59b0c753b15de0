//! Command-line surface for the pipeline: data generation, base-model
//! training, chunk profiling, scheduler optimization, synthesis, evaluation,
//! and analysis. Exit codes: 0 ok, 2 config, 3 I/O, 4 validation, 5 numeric.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dcar::checkpoint::{self, CheckpointError};
use dcar::config::{ConfigError, RunConfig};
use dcar::dcpo;
use dcar::decode;
use dcar::evalsuite::{self, EvalReport, Method, TimingReport};
use dcar::model::{self, CarModel, ModelError};
use dcar::policy::SchedulerPolicy;
use dcar::world::{self, stream_rng, WorldError};

#[derive(Parser)]
#[command(name = "dcar", version, about = "Chunk-wise token generation on a synthetic world")]
struct Cli {
    /// Worker threads. Only 1 is supported; the flag pins bit-reproducible
    /// single-threaded execution.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/eval/policy splits into a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model on a generated dataset.
    TrainCar {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint stem; writes <out>.json and <out>.bin.
        #[arg(long)]
        out: PathBuf,
        /// Training log path; defaults to <out>.trainlog.json.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank fixed chunk sizes by error and select a guidance set.
    ProfileChunks {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Guidance set size.
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value = "profile.json")]
        out: PathBuf,
        /// Profile only the first N utterances of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Split to profile: train, eval, or policy.
        #[arg(long, default_value = "policy")]
        split: String,
    },
    /// Train the chunk-size scheduler with group rollouts.
    TrainDcpo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Policy checkpoint stem.
        #[arg(long)]
        out: PathBuf,
        /// Epoch log path; defaults to <out>.dcpolog.json.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides both the rollout seed and the policy init seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the guidance range, e.g. "2,3".
        #[arg(long)]
        guidance: Option<String>,
        /// Ablation mode: no-guidance, no-penalty, or totally-free.
        #[arg(long)]
        ablate: Option<String>,
        /// Limit the policy split to its first N utterances.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Decode one text and print tokens plus oracle transcript.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// far, car:<c>, or dcar.
        #[arg(long, default_value = "far")]
        method: String,
        /// Space-separated symbol ids, e.g. "0 3 1".
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate decoding methods side by side on the eval split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Comma list: far,car:2,car:3,dcar
        #[arg(long, default_value = "far,car:2,car:3")]
        methods: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Teacher-forced per-head comparison on the eval split.
    AnalyzeHeads {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "heads.json")]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Dump attention matrices for one utterance.
    ExportAttention {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Utterance id, e.g. eval-00000.
        #[arg(long)]
        utt: String,
        /// Output stem; writes <out>.json and <out>.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluation reports from a directory into one table.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

enum CliError {
    Config(String),
    Io(String),
    Validation(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Validation(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric(_) | ModelError::Diverged(_) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Io(io.to_string()),
            CheckpointError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(path: &Option<PathBuf>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            let cfg = RunConfig::default();
            cfg.check_consistency()?;
            Ok(cfg)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("parse {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    wall_s: f64,
    config: &'a RunConfig,
}

fn write_manifest(base: &Path, command: &str, cfg: &RunConfig, seed: u64, start: Instant) -> CliResult<()> {
    let path = if base.is_dir() {
        base.join("manifest.json")
    } else {
        let mut name = base
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        name.push_str(".manifest.json");
        base.with_file_name(name)
    };
    write_json(
        &path,
        &RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            wall_s: start.elapsed().as_secs_f64(),
            config: cfg,
        },
    )
}

fn read_split_limited(data: &Path, name: &str, limit: Option<usize>) -> CliResult<Vec<world::Utterance>> {
    let mut split = world::read_split(&data.join(format!("{name}.jsonl")))?;
    if let Some(n) = limit {
        if n == 0 {
            return Err(CliError::Validation("limit must be at least 1".into()));
        }
        split.truncate(n);
    }
    Ok(split)
}

fn parse_method(s: &str) -> CliResult<Method> {
    let s = s.trim();
    if s == "far" {
        return Ok(Method::Far);
    }
    if s == "dcar" {
        return Ok(Method::Dcar);
    }
    if let Some(c) = s.strip_prefix("car:") {
        let c: usize = c
            .parse()
            .map_err(|_| CliError::Config(format!("bad chunk size in method '{s}'")))?;
        return Ok(Method::Car(c));
    }
    Err(CliError::Config(format!("unknown method '{s}' (use far, car:<c>, dcar)")))
}

fn load_model_for(cfg: &RunConfig, stem: &Path) -> CliResult<CarModel> {
    let model = checkpoint::load_car(stem)?;
    if model.cfg.token_vocab != cfg.world.token_vocab() {
        return Err(CliError::Validation(format!(
            "checkpoint token_vocab {} does not fit world ({} needed)",
            model.cfg.token_vocab,
            cfg.world.token_vocab()
        )));
    }
    Ok(model)
}

fn print_table(report: &EvalReport, timing: Option<&TimingReport>) {
    println!(
        "{:<8} {:>10} {:>9} {:>12} {:>9}",
        "method", "avg_token", "wer_pct", "rtf", "speedup"
    );
    for row in &report.results {
        let t = timing.and_then(|t| t.timings.iter().find(|x| x.method == row.method));
        let (rtf, speedup) = match t {
            Some(t) => (format!("{:.6}", t.rtf), format!("{:.2}", t.speedup_vs_far)),
            None => ("-".to_string(), "-".to_string()),
        };
        println!(
            "{:<8} {:>10.3} {:>9.2} {:>12} {:>9}",
            row.method, row.avg_tokens_per_step, row.wer_pct, rtf, speedup
        );
    }
}

fn timings_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".to_string());
    name.push_str(".timings.json");
    out.with_file_name(name)
}

fn cmd_gen_data(config: &Option<PathBuf>, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    let corpus = world::make_corpus(
        &cfg.world,
        cfg.data.n_train,
        cfg.data.n_eval,
        cfg.data.n_policy,
        (cfg.data.text_len_min, cfg.data.text_len_max),
    )?;
    fs::create_dir_all(out)?;
    world::write_split(&out.join("train.jsonl"), &corpus.train)?;
    world::write_split(&out.join("eval.jsonl"), &corpus.eval)?;
    world::write_split(&out.join("policy.jsonl"), &corpus.policy)?;
    write_manifest(out, "gen-data", &cfg, cfg.world.seed, start)?;
    println!(
        "wrote {} train / {} eval / {} policy utterances to {}",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.policy.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_car(
    config: &Option<PathBuf>,
    data: &Path,
    out: &Path,
    log: &Option<PathBuf>,
) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    let train = read_split_limited(data, "train", None)?;
    let eval = read_split_limited(data, "eval", None)?;
    let mut model = CarModel::new(cfg.model.clone())?;
    let logs = model::train_car(&mut model, &train, &eval, &cfg.train)?;
    checkpoint::save_car(&model, out)?;
    let log_path = log.clone().unwrap_or_else(|| out.with_extension("trainlog.json"));
    write_json(&log_path, &logs)?;
    write_manifest(out, "train-car", &cfg, cfg.train.seed, start)?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} epochs; final loss {:.4}; base head accuracy {:.3}",
            logs.len(),
            last.train_loss,
            last.eval_head_accuracy[0]
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile_chunks(
    config: &Option<PathBuf>,
    data: &Path,
    model_stem: &Path,
    k: usize,
    out: &Path,
    limit: Option<usize>,
    split_name: &str,
) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    if !matches!(split_name, "train" | "eval" | "policy") {
        return Err(CliError::Config(format!("unknown split '{split_name}'")));
    }
    let split = read_split_limited(data, split_name, limit)?;
    let model = load_model_for(&cfg, model_stem)?;
    if k == 0 || k > model.cfg.total_heads() {
        return Err(CliError::Config(format!(
            "k must be in 1..={}",
            model.cfg.total_heads()
        )));
    }
    let report = evalsuite::profile_guidance(
        &model,
        &split,
        &cfg.world,
        &cfg.sampling,
        cfg.eval.seed,
        cfg.eval.max_new_tokens,
        k,
    )?;
    println!("{:<6} {:>9} {:>10}", "chunk", "wer_pct", "avg_token");
    for row in &report.rows {
        println!("{:<6} {:>9.2} {:>10.3}", row.chunk, row.wer_pct, row.avg_tokens_per_step);
    }
    println!("selected guidance range: {:?}", report.selected);
    write_json(out, &report)?;
    write_manifest(out, "profile-chunks", &cfg, cfg.eval.seed, start)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_dcpo(
    config: &Option<PathBuf>,
    data: &Path,
    model_stem: &Path,
    out: &Path,
    log: &Option<PathBuf>,
    seed: Option<u64>,
    guidance: &Option<String>,
    ablate: &Option<String>,
    limit: Option<usize>,
) -> CliResult<()> {
    let start = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.dcpo.seed = s;
        cfg.policy.init_seed = s;
    }
    if let Some(g) = guidance {
        let parsed: Result<Vec<usize>, _> = g.split(',').map(|t| t.trim().parse()).collect();
        cfg.dcpo.guidance_range =
            parsed.map_err(|_| CliError::Config(format!("bad guidance list '{g}'")))?;
    }
    match ablate.as_deref() {
        None => {}
        Some("no-guidance") => cfg.dcpo.no_guidance = true,
        Some("no-penalty") => cfg.dcpo.no_outrange_penalty = true,
        Some("totally-free") => cfg.dcpo.totally_free = true,
        Some(other) => {
            return Err(CliError::Config(format!(
                "unknown ablation '{other}' (no-guidance, no-penalty, totally-free)"
            )))
        }
    }
    let split = read_split_limited(data, "policy", limit)?;
    let model = load_model_for(&cfg, model_stem)?;
    let mut policy = SchedulerPolicy::new(cfg.policy.clone())?;
    let logs = dcpo::train_dcpo(&model, &mut policy, &split, &cfg.world, &cfg.dcpo)?;
    checkpoint::save_policy(&policy, out)?;
    let log_path = log.clone().unwrap_or_else(|| out.with_extension("dcpolog.json"));
    write_json(&log_path, &logs)?;
    write_manifest(out, "train-dcpo", &cfg, cfg.dcpo.seed, start)?;
    for l in &logs {
        println!(
            "epoch {} beta {:.1}: reward {:.3}, wer {:.3}, in-range {:.3}, mean chunk {:.2}",
            l.epoch, l.beta, l.mean_reward, l.mean_wer_gen, l.in_range_fraction, l.mean_chunk
        );
    }
    Ok(())
}

fn cmd_synth(
    config: &Option<PathBuf>,
    model_stem: &Path,
    policy_stem: &Option<PathBuf>,
    method: &str,
    text: &str,
    seed: u64,
) -> CliResult<()> {
    let cfg = load_config(config)?;
    let model = load_model_for(&cfg, model_stem)?;
    let method = parse_method(method)?;
    let symbols: Result<Vec<u32>, _> = text.split_whitespace().map(|t| t.parse()).collect();
    let symbols = symbols.map_err(|_| CliError::Config(format!("bad text '{text}'")))?;
    let mut gen_rng = stream_rng(seed, "synth-gen");
    let target = world::generate(&symbols, &cfg.world, &mut gen_rng)?;
    let prompt_len = (3 * cfg.world.frame_rate as usize).min((target.len() - 1) / 2).max(1);
    let prompt = &target[..prompt_len];
    let eos = cfg.world.eos();
    let mut tok_rng = stream_rng(seed, "synth-tok");
    let max_new = cfg.eval.max_new_tokens;
    let trace = match method {
        Method::Far => decode::decode_far(
            &model, &symbols, prompt, eos, max_new, &cfg.sampling, &mut tok_rng,
        )?,
        Method::Car(c) => decode::decode_car(
            &model, &symbols, prompt, eos, c, max_new, &cfg.sampling, &mut tok_rng,
        )?,
        Method::Dcar => {
            let stem = policy_stem
                .as_ref()
                .ok_or_else(|| CliError::Validation("dcar synthesis needs --policy".into()))?;
            let policy = checkpoint::load_policy(stem)?;
            let mut pol_rng = stream_rng(seed, "synth-pol");
            decode::decode_dcar(
                &model, &policy, &symbols, prompt, eos, max_new, &cfg.sampling, &mut tok_rng,
                &mut pol_rng, true,
            )?
        }
    };
    let mut full = prompt.to_vec();
    full.extend_from_slice(&trace.tokens);
    let transcript = world::transcribe(&full, &cfg.world);
    let stats = decode::measure(&trace, cfg.world.frame_rate);
    println!("prompt tokens: {prompt:?}");
    println!("generated tokens: {:?}", trace.tokens);
    println!("transcript: {:?}", transcript.symbols);
    println!(
        "steps {} avg_token {:.3} ended {}",
        stats.steps,
        stats.avg_tokens_per_step,
        trace.ended(eos)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &Option<PathBuf>,
    data: &Path,
    model_stem: &Path,
    policy_stem: &Option<PathBuf>,
    methods: &str,
    out: &Path,
    limit: Option<usize>,
) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    let methods = methods.split(',').map(parse_method).collect::<CliResult<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(CliError::Config("no methods requested".into()));
    }
    let split = read_split_limited(data, "eval", limit)?;
    let model = load_model_for(&cfg, model_stem)?;
    let policy = match policy_stem {
        Some(stem) => Some(checkpoint::load_policy(stem)?),
        None => None,
    };
    if methods.contains(&Method::Dcar) && policy.is_none() {
        return Err(CliError::Validation("dcar evaluation needs --policy".into()));
    }
    let (report, timing) = evalsuite::evaluate(
        &model,
        policy.as_ref(),
        &methods,
        &split,
        &cfg.world,
        &cfg.sampling,
        cfg.eval.seed,
        cfg.eval.max_new_tokens,
    )?;
    write_json(out, &report)?;
    write_json(&timings_path(out), &timing)?;
    write_manifest(out, "eval", &cfg, cfg.eval.seed, start)?;
    print_table(&report, Some(&timing));
    Ok(())
}

fn cmd_analyze_heads(
    config: &Option<PathBuf>,
    data: &Path,
    model_stem: &Path,
    out: &Path,
    limit: Option<usize>,
) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    let split = read_split_limited(data, "eval", limit)?;
    let model = load_model_for(&cfg, model_stem)?;
    let report = evalsuite::analyze_heads(&model, &split)?;
    println!("columns scored: {}", report.n_columns);
    for (i, (ce, frac)) in report.mean_ce.iter().zip(&report.best_fractions).enumerate() {
        println!("head {i}: mean ce {ce:.4}, best fraction {frac:.4}");
    }
    println!(
        "base head best {:.4}, worst {:.4}",
        report.base_best_fraction, report.base_worst_fraction
    );
    write_json(out, &report)?;
    write_manifest(out, "analyze-heads", &cfg, cfg.eval.seed, start)?;
    Ok(())
}

fn cmd_export_attention(
    config: &Option<PathBuf>,
    data: &Path,
    model_stem: &Path,
    utt_id: &str,
    out: &Path,
) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    let model = load_model_for(&cfg, model_stem)?;
    let mut found = None;
    for name in ["eval", "train", "policy"] {
        let path = data.join(format!("{name}.jsonl"));
        if !path.exists() {
            continue;
        }
        if let Some(u) = world::read_split(&path)?.into_iter().find(|u| u.id == utt_id) {
            found = Some(u);
            break;
        }
    }
    let utt = found
        .ok_or_else(|| CliError::Validation(format!("utterance '{utt_id}' not found in {}", data.display())))?;
    let tokens = &utt.target_tokens[..utt.target_tokens.len() - 1];
    evalsuite::export_attention(&model, &utt.text, tokens, out)?;
    write_manifest(out, "export-attention", &cfg, cfg.eval.seed, start)?;
    println!(
        "wrote attention for {} ({} text + {} token positions)",
        utt.id,
        utt.text.len(),
        tokens.len()
    );
    Ok(())
}

fn cmd_report(runs: &Path) -> CliResult<()> {
    let mut reports: Vec<(PathBuf, EvalReport)> = Vec::new();
    for entry in fs::read_dir(runs)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if !name.ends_with(".json")
            || name.ends_with(".timings.json")
            || name.ends_with(".manifest.json")
        {
            continue;
        }
        if let Ok(report) = read_json::<EvalReport>(&path) {
            reports.push((path, report));
        }
    }
    if reports.is_empty() {
        return Err(CliError::Validation(format!(
            "no evaluation reports found in {}",
            runs.display()
        )));
    }
    reports.sort_by(|a, b| a.0.cmp(&b.0));
    let world0 = serde_json::to_string(&reports[0].1.world)
        .map_err(|e| CliError::Io(e.to_string()))?;
    for (path, report) in &reports[1..] {
        let w = serde_json::to_string(&report.world).map_err(|e| CliError::Io(e.to_string()))?;
        if w != world0 {
            return Err(CliError::Validation(format!(
                "world config in {} differs from {}; refusing to merge",
                path.display(),
                reports[0].0.display()
            )));
        }
    }
    println!(
        "{:<30} {:<8} {:>10} {:>9} {:>12} {:>9}",
        "run", "method", "avg_token", "wer_pct", "rtf", "speedup"
    );
    for (path, report) in &reports {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let timing: Option<TimingReport> = read_json(&timings_path(path)).ok();
        for row in &report.results {
            // Cross-check aggregates against the per-utterance detail.
            let tokens: usize = row.per_utterance.iter().map(|u| u.n_tokens).sum();
            let steps: usize = row.per_utterance.iter().map(|u| u.steps).sum();
            let recomputed = tokens as f64 / steps.max(1) as f64;
            if (recomputed - row.avg_tokens_per_step).abs() > 1e-9 {
                return Err(CliError::Validation(format!(
                    "avg_token mismatch in {} method {}",
                    path.display(),
                    row.method
                )));
            }
            let t = timing
                .as_ref()
                .and_then(|t| t.timings.iter().find(|x| x.method == row.method));
            let (rtf, speedup) = match t {
                Some(t) => (format!("{:.6}", t.rtf), format!("{:.2}", t.speedup_vs_far)),
                None => ("-".to_string(), "-".to_string()),
            };
            println!(
                "{:<30} {:<8} {:>10.3} {:>9.2} {:>12} {:>9}",
                stem, row.method, row.avg_tokens_per_step, row.wer_pct, rtf, speedup
            );
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if cli.threads != 1 {
        return Err(CliError::Config(format!(
            "--threads {} unsupported; only single-threaded execution is available",
            cli.threads
        )));
    }
    match &cli.cmd {
        Cmd::GenData { config, out } => cmd_gen_data(config, out),
        Cmd::TrainCar { config, data, out, log } => cmd_train_car(config, data, out, log),
        Cmd::ProfileChunks { config, data, model, k, out, limit, split } => {
            cmd_profile_chunks(config, data, model, *k, out, *limit, split)
        }
        Cmd::TrainDcpo { config, data, model, out, log, seed, guidance, ablate, limit } => {
            cmd_train_dcpo(config, data, model, out, log, *seed, guidance, ablate, *limit)
        }
        Cmd::Synth { config, model, policy, method, text, seed } => {
            cmd_synth(config, model, policy, method, text, *seed)
        }
        Cmd::Eval { config, data, model, policy, methods, out, limit } => {
            cmd_eval(config, data, model, policy, methods, out, *limit)
        }
        Cmd::AnalyzeHeads { config, data, model, out, limit } => {
            cmd_analyze_heads(config, data, model, out, *limit)
        }
        Cmd::ExportAttention { config, data, model, utt, out } => {
            cmd_export_attention(config, data, model, utt, out)
        }
        Cmd::Report { runs } => cmd_report(runs),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
