//! Group-relative policy optimization for the chunk-size scheduler. The base
//! model is frozen; only the scheduler moves. Each group mixes guided
//! fixed-chunk rollouts over the guidance range with an equal number of
//! policy-sampled rollouts, scored by transcription quality and an
//! out-of-range chunk penalty, with a clipped importance-ratio surrogate and
//! a per-epoch reference-policy KL term.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{decode_car, decode_dcar, DecodeTrace, SamplingConfig};
use crate::model::{CarModel, ModelError, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::policy::{action_logits, BoundPolicy, SchedulerPolicy};
use crate::tensor::Tape;
use crate::world::{stream_rng, transcribe, word_error_rate, Utterance, WorldConfig};

const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcpoConfig {
    /// Guidance range: chunk sizes considered acceptable. Guided rollouts
    /// traverse exactly these sizes; actions outside it are penalized.
    pub guidance_range: Vec<usize>,
    pub clip_epsilon: f32,
    /// Weight of the out-of-range chunk penalty.
    pub lambda: f64,
    /// Lower bound on the quality term of the reward.
    pub reward_floor: f64,
    pub epochs: usize,
    /// Gradient steps per generation batch.
    pub inner_iters: usize,
    /// Utterances per batch; each contributes one rollout group.
    pub batch_size: usize,
    /// KL coefficient grows by this much per epoch, starting at zero.
    pub beta_step: f32,
    pub max_new_tokens: usize,
    pub adam: AdamConfig,
    pub sampling: SamplingConfig,
    pub seed: u64,
    /// Ablation: replace guided rollouts with extra policy-sampled ones.
    pub no_guidance: bool,
    /// Ablation: score rewards as if lambda were zero.
    pub no_outrange_penalty: bool,
    /// Ablation: no guidance and no penalty at once.
    pub totally_free: bool,
    /// Consecutive epochs with collapsed rewards tolerated before aborting.
    pub collapse_patience: usize,
    pub collapse_threshold: f64,
}

impl Default for DcpoConfig {
    fn default() -> Self {
        DcpoConfig {
            guidance_range: vec![2, 3],
            clip_epsilon: 0.2,
            lambda: 0.1,
            reward_floor: -10.0,
            epochs: 3,
            inner_iters: 1,
            batch_size: 8,
            beta_step: 0.1,
            max_new_tokens: 96,
            adam: AdamConfig { learning_rate: 1e-4, ..Default::default() },
            sampling: SamplingConfig::default(),
            seed: 0,
            no_guidance: false,
            no_outrange_penalty: false,
            totally_free: false,
            collapse_patience: 2,
            collapse_threshold: -5.0,
        }
    }
}

impl DcpoConfig {
    pub fn validate(&self, action_set: &[usize]) -> Result<()> {
        if self.guidance_range.is_empty() {
            return Err(ModelError::BadConfig("empty guidance range".into()));
        }
        for c in &self.guidance_range {
            if !action_set.contains(c) {
                return Err(ModelError::BadConfig(format!(
                    "guidance chunk {c} not in action set {action_set:?}"
                )));
            }
        }
        if self.epochs == 0 || self.inner_iters == 0 || self.batch_size == 0 {
            return Err(ModelError::BadConfig("epochs, inner_iters, batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.clip_epsilon) || self.clip_epsilon == 0.0 {
            return Err(ModelError::BadConfig(format!("clip epsilon {} out of (0,1)", self.clip_epsilon)));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        2 * self.guidance_range.len()
    }

    /// Penalty weight after ablation flags.
    pub fn effective_lambda(&self) -> f64 {
        if self.no_outrange_penalty || self.totally_free {
            0.0
        } else {
            self.lambda
        }
    }

    /// Whether guided rollouts are replaced by policy-sampled ones.
    pub fn guidance_disabled(&self) -> bool {
        self.no_guidance || self.totally_free
    }
}

/// One scored trajectory, with everything needed to re-evaluate the policy's
/// log probabilities at its decision points.
pub struct Rollout {
    pub guided: bool,
    /// Intended chunk size per step.
    pub actions: Vec<usize>,
    /// Index of each action in the policy's action set.
    pub action_idx: Vec<usize>,
    pub decision_positions: Vec<usize>,
    /// Flattened [positions × d_in] base-model hidden states.
    pub hidden: Vec<f32>,
    pub n_tokens: usize,
    pub wer_gen: f64,
    /// Training reward; respects the ablation flags.
    pub reward: f64,
    /// Reward under the nominal penalty weight, regardless of ablation flags.
    /// Comparable across ablation runs.
    pub canonical_reward: f64,
}

pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// Quality term minus out-of-range penalty. `wer_gen`/`wer_gt` are fractions.
/// Only the quality term is floored; an empty generation scores the floor.
pub fn reward(
    wer_gen: f64,
    wer_gt: f64,
    actions: &[usize],
    n_tokens: usize,
    guidance: &[usize],
    lambda: f64,
    floor: f64,
) -> f64 {
    if n_tokens == 0 {
        return floor;
    }
    let quality = (1.0 - (wer_gen - wer_gt + 1.0).ln()).max(floor);
    let penalty: f64 = actions
        .iter()
        .filter(|a| !guidance.contains(a))
        .map(|&a| a as f64 / n_tokens as f64)
        .sum();
    quality - lambda * penalty
}

/// Group-normalized advantages: (r − mean)/std with population std. A group
/// with (near) identical rewards gets all-zero advantages.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_GUARD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

fn rollout_from_trace(
    trace: DecodeTrace,
    guided: bool,
    utt: &Utterance,
    wer_gt: f64,
    policy: &SchedulerPolicy,
    wcfg: &WorldConfig,
    cfg: &DcpoConfig,
) -> Result<Rollout> {
    let prompt = &utt.target_tokens[..utt.prompt_len];
    let mut full = prompt.to_vec();
    full.extend_from_slice(&trace.tokens);
    let hyp = transcribe(&full, wcfg);
    let wer_gen = word_error_rate(&utt.text, &hyp.symbols)
        .map_err(|e| ModelError::BadConfig(e.to_string()))?;
    let action_idx = trace
        .actions
        .iter()
        .map(|&a| {
            policy
                .action_index(a)
                .ok_or_else(|| ModelError::BadConfig(format!("action {a} not in action set")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_tokens = trace.tokens.len();
    let r = reward(
        wer_gen,
        wer_gt,
        &trace.actions,
        n_tokens,
        &cfg.guidance_range,
        cfg.effective_lambda(),
        cfg.reward_floor,
    );
    let canonical = reward(
        wer_gen,
        wer_gt,
        &trace.actions,
        n_tokens,
        &cfg.guidance_range,
        cfg.lambda,
        cfg.reward_floor,
    );
    let d = trace.hidden.first().map_or(0, |h| h.len());
    let mut hidden = Vec::with_capacity(trace.hidden.len() * d);
    for h in &trace.hidden {
        hidden.extend_from_slice(h);
    }
    Ok(Rollout {
        guided,
        actions: trace.actions,
        action_idx,
        decision_positions: trace.decision_positions,
        hidden,
        n_tokens,
        wer_gen,
        reward: r,
        canonical_reward: canonical,
    })
}

/// One rollout group for one utterance: guided fixed-chunk decodes over the
/// guidance range, then an equal number of policy-sampled decodes.
pub fn generate_group(
    model: &CarModel,
    policy: &SchedulerPolicy,
    utt: &Utterance,
    wcfg: &WorldConfig,
    cfg: &DcpoConfig,
    stream_tag: &str,
) -> Result<RolloutGroup> {
    let eos = wcfg.eos();
    let prompt = &utt.target_tokens[..utt.prompt_len];
    let gt = transcribe(&utt.target_tokens, wcfg);
    let wer_gt = word_error_rate(&utt.text, &gt.symbols)
        .map_err(|e| ModelError::BadConfig(e.to_string()))?;
    let mut rollouts = Vec::with_capacity(cfg.group_size());
    let n_guided = cfg.guidance_range.len();
    // A failed decode scores the floor instead of aborting the group.
    let floored = |guided: bool| Rollout {
        guided,
        actions: Vec::new(),
        action_idx: Vec::new(),
        decision_positions: Vec::new(),
        hidden: Vec::new(),
        n_tokens: 0,
        wer_gen: 1.0,
        reward: cfg.reward_floor,
        canonical_reward: cfg.reward_floor,
    };
    for (k, &c) in cfg.guidance_range.iter().enumerate() {
        let mut tok_rng = stream_rng(cfg.seed, &format!("{stream_tag}-u{}-g{k}-tok", utt.id));
        let guided = !cfg.guidance_disabled();
        let trace = if guided {
            decode_car(
                model, &utt.text, prompt, eos, c, cfg.max_new_tokens, &cfg.sampling, &mut tok_rng,
            )
        } else {
            let mut pol_rng = stream_rng(cfg.seed, &format!("{stream_tag}-u{}-g{k}-pol", utt.id));
            decode_dcar(
                model, policy, &utt.text, prompt, eos, cfg.max_new_tokens, &cfg.sampling,
                &mut tok_rng, &mut pol_rng, false,
            )
        };
        rollouts.push(match trace {
            Ok(t) => rollout_from_trace(t, guided, utt, wer_gt, policy, wcfg, cfg)?,
            Err(_) => floored(guided),
        });
    }
    for k in 0..n_guided {
        let mut tok_rng = stream_rng(cfg.seed, &format!("{stream_tag}-u{}-p{k}-tok", utt.id));
        let mut pol_rng = stream_rng(cfg.seed, &format!("{stream_tag}-u{}-p{k}-pol", utt.id));
        let trace = decode_dcar(
            model, policy, &utt.text, prompt, eos, cfg.max_new_tokens, &cfg.sampling,
            &mut tok_rng, &mut pol_rng, false,
        );
        rollouts.push(match trace {
            Ok(t) => rollout_from_trace(t, false, utt, wer_gt, policy, wcfg, cfg)?,
            Err(_) => floored(false),
        });
    }
    let adv = advantages(&rollouts.iter().map(|r| r.reward).collect::<Vec<_>>());
    Ok(RolloutGroup { rollouts, advantages: adv })
}

/// Log probabilities of a rollout's actions under `policy`, no gradients.
fn score_rollout(policy: &SchedulerPolicy, rollout: &Rollout) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = BoundPolicy::bind(policy, &mut tape);
    let logits = action_logits(policy, &bound, &mut tape, &rollout.hidden)?;
    let lp = tape.gather_log_softmax(logits, &rollout.decision_positions, &rollout.action_idx)?;
    Ok(tape.data(lp).to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DcpoEpochLog {
    pub epoch: usize,
    pub beta: f32,
    pub mean_reward: f64,
    /// Mean canonical reward over policy-sampled rollouts only. Uses the
    /// nominal penalty weight and ignores guided rollouts, so it stays
    /// comparable across runs with different ablation flags.
    pub mean_policy_reward: f64,
    pub mean_wer_gen: f64,
    /// Fraction of policy-sampled actions inside the guidance range.
    pub in_range_fraction: f64,
    /// Mean intended chunk size of policy-sampled actions.
    pub mean_chunk: f64,
    pub wall_s: f64,
}

/// One clipped-surrogate update pass over pre-generated groups. `lp_old` and
/// `lp_ref` are per-rollout log probs under the behavior and reference
/// policies. Returns the (maximized) objective value before the step.
#[allow(clippy::too_many_arguments)]
fn policy_step(
    policy: &mut SchedulerPolicy,
    adam: &mut AdamState,
    groups: &[RolloutGroup],
    lp_old: &[Vec<Vec<f32>>],
    lp_ref: &[Vec<Vec<f32>>],
    beta: f32,
    cfg: &DcpoConfig,
) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = BoundPolicy::bind(policy, &mut tape);
    let mut terms = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        for (ri, rollout) in group.rollouts.iter().enumerate() {
            let n_dec = rollout.decision_positions.len();
            if n_dec == 0 {
                continue;
            }
            let logits = action_logits(policy, &bound, &mut tape, &rollout.hidden)?;
            let lp =
                tape.gather_log_softmax(logits, &rollout.decision_positions, &rollout.action_idx)?;
            let ratio = tape.exp_shift(lp, &lp_old[gi][ri])?;
            let adv = vec![group.advantages[ri] as f32; n_dec];
            let surr = tape.clip_surrogate(ratio, &adv, cfg.clip_epsilon)?;
            let mean_w = vec![1.0 / n_dec as f32; n_dec];
            let surr_mean = tape.dot_const(surr, &mean_w)?;
            let mut term = surr_mean;
            if beta > 0.0 {
                let kl = tape.kl_term(lp, &lp_ref[gi][ri])?;
                let kl_mean = tape.dot_const(kl, &mean_w)?;
                let neg_kl = tape.scale(kl_mean, -beta);
                term = tape.add(term, neg_kl)?;
            }
            terms.push(term);
        }
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let objective = tape.scale(total, 1.0 / terms.len() as f32);
    let loss = tape.scale(objective, -1.0);
    let value = tape.scalar(objective);
    tape.backward(loss)?;
    tape.check_finite()?;
    let grads = bound.grads(&tape);
    let mut params = policy.params_mut();
    adam.step(&mut params, &grads)?;
    Ok(value)
}

/// Full training run over the policy split. The reference policy is refreshed
/// at each epoch start; the behavior policy is refreshed per batch.
pub fn train_dcpo(
    model: &CarModel,
    policy: &mut SchedulerPolicy,
    split: &[Utterance],
    wcfg: &WorldConfig,
    cfg: &DcpoConfig,
) -> Result<Vec<DcpoEpochLog>> {
    cfg.validate(&policy.cfg.action_set)?;
    if split.is_empty() {
        return Err(ModelError::BadConfig("empty policy split".into()));
    }
    let mut adam = AdamState::new(cfg.adam.clone(), &policy.params());
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut collapsed = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let beta = cfg.beta_step * (epoch - 1) as f32;
        let reference = policy.clone();
        let mut order: Vec<usize> = (0..split.len()).collect();
        let mut erng = stream_rng(cfg.seed, &format!("dcpo-epoch-{epoch}"));
        crate::model::shuffle(&mut order, &mut erng);

        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        let mut policy_reward_sum = 0.0;
        let mut policy_reward_n = 0usize;
        let mut wer_sum = 0.0;
        let mut in_range = 0usize;
        let mut chunk_sum = 0usize;
        let mut action_n = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let behavior = policy.clone();
            let mut groups = Vec::with_capacity(batch.len());
            for &ui in batch {
                let utt = &split[ui];
                let tag = format!("dcpo-e{epoch}-roll");
                let group = generate_group(model, &behavior, utt, wcfg, cfg, &tag)?;
                for r in &group.rollouts {
                    reward_sum += r.reward;
                    reward_n += 1;
                    wer_sum += r.wer_gen;
                    if !r.guided {
                        policy_reward_sum += r.canonical_reward;
                        policy_reward_n += 1;
                        for &a in &r.actions {
                            chunk_sum += a;
                            if cfg.guidance_range.contains(&a) {
                                in_range += 1;
                            }
                            action_n += 1;
                        }
                    }
                }
                groups.push(group);
            }
            let lp_old: Vec<Vec<Vec<f32>>> = groups
                .iter()
                .map(|g| g.rollouts.iter().map(|r| score_rollout(&behavior, r)).collect())
                .collect::<Result<_>>()?;
            let lp_ref: Vec<Vec<Vec<f32>>> = groups
                .iter()
                .map(|g| g.rollouts.iter().map(|r| score_rollout(&reference, r)).collect())
                .collect::<Result<_>>()?;
            for _ in 0..cfg.inner_iters {
                policy_step(policy, &mut adam, &groups, &lp_old, &lp_ref, beta, cfg)?;
            }
        }
        let mean_reward = reward_sum / reward_n.max(1) as f64;
        logs.push(DcpoEpochLog {
            epoch,
            beta,
            mean_reward,
            mean_policy_reward: policy_reward_sum / policy_reward_n.max(1) as f64,
            mean_wer_gen: wer_sum / reward_n.max(1) as f64,
            in_range_fraction: in_range as f64 / action_n.max(1) as f64,
            mean_chunk: chunk_sum as f64 / action_n.max(1) as f64,
            wall_s: start.elapsed().as_secs_f64(),
        });
        if mean_reward < cfg.collapse_threshold {
            collapsed += 1;
            if collapsed >= cfg.collapse_patience {
                return Err(ModelError::Diverged(format!(
                    "mean reward {mean_reward:.3} below {} for {collapsed} epochs",
                    cfg.collapse_threshold
                )));
            }
        } else {
            collapsed = 0;
        }
    }
    Ok(logs)
}
