//! The three sharing regimes as pure functions of a learner's own group and
//! the peer records it subscribed to.
//!
//! - PRP pools peer rollouts into the learner's candidate set.
//! - XGRPO keeps the learner's own samples and only changes their
//!   advantages using pooled reward statistics.
//! - SGT adds a small NLL term on one verified peer success when the learner's
//!   whole group failed.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envpolicy::{trace_values, PolicyError, PrefixTreePolicy, RolloutGroup};
use crate::exchange::{ExperienceRecord, RecordId};
use crate::grpo::{
    clipped_surrogate, group_advantages, mean, population_std, with_kl, AdvantageMode, AdvantageSet,
    ClipConfig, GradOutput, GrpoError, SurrogateSample,
};
use crate::textgrid::{tokenize, TokenizerSpec};
use crate::thl::{word_align_log_probs, AlignedTrace, ThlConfig, ThlError, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum RegimeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Thl(#[from] ThlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

// ---------------------------------------------------------------- PRP

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrpDenominator {
    #[default]
    LearnerSnapshot,
    ThlAlignedPeer,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrpConfig {
    pub denominator: PrpDenominator,
    pub clip: ClipConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateSource {
    Own { sample: usize },
    Peer { record_id: RecordId, policy_id: String, tokenizer_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolCandidate {
    pub source: CandidateSource,
    /// Index in the learner's support.
    pub response: usize,
    pub text: String,
    pub reward: f64,
    /// The producer's trace on the producer's grid (own candidates: the
    /// learner's behavior trace).
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrpPool {
    pub prompt: usize,
    pub candidates: Vec<PoolCandidate>,
    pub advantages: AdvantageSet,
    pub unusable: usize,
}

impl PrpPool {
    pub fn peer_count(&self) -> usize {
        self.candidates.iter().filter(|c| matches!(c.source, CandidateSource::Peer { .. })).count()
    }
}

/// Own group plus every usable peer record for the same prompt, with
/// advantages normalized over the whole pool. A peer response is unusable
/// when its text has no positive mass under the learner's behavior snapshot.
pub fn prp_pool(
    learner: &PrefixTreePolicy,
    group: &RolloutGroup,
    peers: &[ExperienceRecord],
    mode: AdvantageMode,
    epsilon: f64,
) -> PrpPool {
    let p = group.prompt;
    let mut candidates: Vec<PoolCandidate> = group
        .responses
        .iter()
        .enumerate()
        .map(|(i, &y)| PoolCandidate {
            source: CandidateSource::Own { sample: i },
            response: y,
            text: learner.responses(p)[y].clone(),
            reward: group.rewards[i],
            trace: group.traces[i].clone(),
        })
        .collect();
    let mut unusable = 0;
    for r in peers.iter().filter(|r| r.prompt_id == p) {
        let (Some(text), Some(trace)) = (&r.response_text, &r.trace) else {
            unusable += 1;
            continue;
        };
        match learner.response_index(p, text) {
            Some(y) if group.behavior_snapshot[y] != f64::NEG_INFINITY => candidates.push(PoolCandidate {
                source: CandidateSource::Peer {
                    record_id: r.record_id,
                    policy_id: r.meta.policy_id.clone(),
                    tokenizer_id: r.meta.tokenizer_id.clone(),
                },
                response: y,
                text: text.clone(),
                reward: r.reward,
                trace: trace.clone(),
            }),
            _ => unusable += 1,
        }
    }
    let rewards: Vec<f64> = candidates.iter().map(|c| c.reward).collect();
    let advantages = group_advantages(&rewards, mode, epsilon);
    PrpPool { prompt: p, candidates, advantages, unusable }
}

/// Denominators and mask for one pool candidate on the learner's grid.
///
/// Own candidates always use the learner's behavior snapshot. Peer candidates
/// use the snapshot too under `LearnerSnapshot`, or the THL-aligned peer
/// trace under `ThlAlignedPeer`, where positions the alignment could not fill
/// are masked out.
pub fn prp_denominators(
    variant: PrpDenominator,
    learner: &PrefixTreePolicy,
    group: &RolloutGroup,
    aligned: Option<&AlignedTrace>,
    candidate: &PoolCandidate,
) -> Result<(Vec<f64>, Vec<bool>), RegimeError> {
    let p = group.prompt;
    let snapshot = || trace_values(&group.behavior_snapshot, learner.own_keys(p), candidate.response);
    match (&candidate.source, variant) {
        (CandidateSource::Own { .. }, _) | (CandidateSource::Peer { .. }, PrpDenominator::LearnerSnapshot) => {
            let d = snapshot();
            let m = vec![true; d.len()];
            Ok((d, m))
        }
        (CandidateSource::Peer { .. }, PrpDenominator::ThlAlignedPeer) => {
            let a = aligned.ok_or_else(|| {
                RegimeError::Config("aligned peer denominator requested without an aligned trace".into())
            })?;
            if a.target_tokenizer_id != learner.tokenizer.id {
                return Err(RegimeError::Config("aligned trace targets a different grid".into()));
            }
            Ok((a.values.clone(), a.active_mask.clone()))
        }
    }
}

/// Per-token importance weights `exp(l_theta - d)` for a pool candidate.
pub fn prp_weights(
    variant: PrpDenominator,
    learner: &PrefixTreePolicy,
    group: &RolloutGroup,
    aligned: Option<&AlignedTrace>,
    candidate: &PoolCandidate,
) -> Result<Vec<f64>, RegimeError> {
    let (d, m) = prp_denominators(variant, learner, group, aligned, candidate)?;
    let num = learner.log_prob_trace(group.prompt, candidate.response)?;
    Ok(num
        .log_probs
        .iter()
        .zip(&d)
        .zip(&m)
        .map(|((l, d), &on)| if on { (l - d).exp() } else { f64::NAN })
        .collect())
}

/// Aligns a peer candidate's own trace onto the learner's grid.
pub fn align_peer(
    learner: &PrefixTreePolicy,
    candidate: &PoolCandidate,
    specs: &HashMap<String, TokenizerSpec>,
    thl: &ThlConfig,
) -> Result<AlignedTrace, RegimeError> {
    let CandidateSource::Peer { tokenizer_id, .. } = &candidate.source else {
        return Err(RegimeError::Precondition("only peer candidates are aligned".into()));
    };
    let src = specs
        .get(tokenizer_id)
        .ok_or_else(|| RegimeError::Config(format!("unknown tokenizer `{tokenizer_id}`")))?;
    let mask = vec![true; tokenize(&learner.tokenizer, &candidate.text).len()];
    Ok(word_align_log_probs(&candidate.text, &candidate.trace, src, &learner.tokenizer, &mask, thl)?)
}

pub fn prp_gradient(
    learner: &PrefixTreePolicy,
    group: &RolloutGroup,
    pool: &PrpPool,
    cfg: &PrpConfig,
    specs: &HashMap<String, TokenizerSpec>,
    thl: &ThlConfig,
    reference: &PrefixTreePolicy,
) -> Result<GradOutput, RegimeError> {
    let mut samples = Vec::with_capacity(pool.candidates.len());
    for (c, &a) in pool.candidates.iter().zip(&pool.advantages.values) {
        let aligned = match (&c.source, cfg.denominator) {
            (CandidateSource::Peer { .. }, PrpDenominator::ThlAlignedPeer) => {
                Some(align_peer(learner, c, specs, thl)?)
            }
            _ => None,
        };
        let (d, m) = prp_denominators(cfg.denominator, learner, group, aligned.as_ref(), c)?;
        samples.push(SurrogateSample { response: c.response, denominators: d, mask: m, advantage: a });
    }
    let p = group.prompt;
    let logits = &learner.logits[p];
    let sur = clipped_surrogate(logits, learner.own_keys(p), &samples, cfg.clip.epsilon)?;
    Ok(with_kl(sur, logits, &reference.logits[p], cfg.clip.kl_coefficient, p)?)
}

// ---------------------------------------------------------------- XGRPO

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XgrpoConfig {
    pub mix_factor: f64,
    pub length_correction: f64,
    pub advantage_clip: f64,
}

impl Default for XgrpoConfig {
    fn default() -> Self {
        Self { mix_factor: 0.2, length_correction: 0.1, advantage_clip: 3.0 }
    }
}

impl XgrpoConfig {
    pub fn validate(&self) -> Result<(), RegimeError> {
        if !(0.0..=1.0).contains(&self.mix_factor) {
            return Err(RegimeError::Config("mix_factor must lie in [0, 1]".into()));
        }
        if !(self.advantage_clip > 0.0) {
            return Err(RegimeError::Config("advantage_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.length_correction) {
            return Err(RegimeError::Config("length_correction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean and population standard deviation over all pooled rewards.
pub fn xgrpo_pooled_stats(rewards: &[f64]) -> (f64, f64) {
    (mean(rewards), population_std(rewards))
}

/// Effective advantages: convex mix of local and pooled advantages, a damping
/// factor on positive advantages of longer-than-average responses, then a
/// symmetric clamp.
pub fn xgrpo_advantages(
    rewards: &[f64],
    lengths: &[usize],
    local: &AdvantageSet,
    pooled: (f64, f64),
    cfg: &XgrpoConfig,
    epsilon: f64,
) -> AdvantageSet {
    let (mu, sigma) = pooled;
    let lbar = lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64;
    let c = cfg.mix_factor;
    let values = rewards
        .iter()
        .zip(&local.values)
        .zip(lengths)
        .map(|((&r, &a_local), &len)| {
            let a_pool = (r - mu) / (sigma + epsilon);
            let mut a = (1.0 - c) * a_local + c * a_pool;
            if a > 0.0 {
                let excess = ((len as f64 - lbar) / lbar.max(1.0)).clamp(0.0, 1.0);
                a *= 1.0 - cfg.length_correction * excess;
            }
            a.clamp(-cfg.advantage_clip, cfg.advantage_clip)
        })
        .collect();
    AdvantageSet { values, normalization: local.normalization, epsilon }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XgrpoOutput {
    pub grad: GradOutput,
    pub local: AdvantageSet,
    pub effective: AdvantageSet,
    pub pooled: (f64, f64),
}

/// Only `reward` and `prompt_id` of peer records are read.
pub fn xgrpo_gradient(
    learner: &PrefixTreePolicy,
    group: &RolloutGroup,
    peers: &[ExperienceRecord],
    mode: AdvantageMode,
    epsilon: f64,
    cfg: &XgrpoConfig,
    clip: &ClipConfig,
    reference: &PrefixTreePolicy,
) -> Result<XgrpoOutput, RegimeError> {
    let p = group.prompt;
    let local = group_advantages(&group.rewards, mode, epsilon);
    let mut pooled_rewards = group.rewards.clone();
    pooled_rewards.extend(peers.iter().filter(|r| r.prompt_id == p).map(|r| r.reward));
    let pooled = xgrpo_pooled_stats(&pooled_rewards);
    let lengths: Vec<usize> = group.responses.iter().map(|&y| learner.token_count(p, y)).collect();
    let effective = xgrpo_advantages(&group.rewards, &lengths, &local, pooled, cfg, epsilon);
    let grad = crate::grpo::grpo_gradient(learner, group, &effective, clip, reference)?;
    Ok(XgrpoOutput { grad, local, effective, pooled })
}

// ---------------------------------------------------------------- SGT

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SgtSelection {
    #[default]
    Uniform,
    Shorter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgtConfig {
    pub lambda: f64,
    pub success_threshold: f64,
    pub negative_threshold: f64,
    pub per_prompt_cap: usize,
    pub selection: SgtSelection,
}

impl Default for SgtConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            success_threshold: 0.8,
            negative_threshold: 0.2,
            per_prompt_cap: 1,
            selection: SgtSelection::Uniform,
        }
    }
}

impl SgtConfig {
    pub fn validate(&self) -> Result<(), RegimeError> {
        if !(self.negative_threshold <= self.success_threshold) {
            return Err(RegimeError::Config("negative_threshold must not exceed success_threshold".into()));
        }
        if self.per_prompt_cap == 0 {
            return Err(RegimeError::Config("per_prompt_cap must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(RegimeError::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSuccess {
    pub record_id: RecordId,
    pub policy_id: String,
    pub response_text: String,
    /// The response on the learner's grid.
    pub learner_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEvent {
    pub learner: String,
    pub prompt: usize,
    pub fired: bool,
    pub peer_successes: usize,
    pub selected: Vec<SelectedSuccess>,
}

/// Fires iff every learner reward is below the negative threshold and some
/// peer record for the prompt is above the success threshold. Up to
/// `per_prompt_cap` successes are selected.
pub fn sgt_gate(
    learner: &PrefixTreePolicy,
    group: &RolloutGroup,
    peers: &[ExperienceRecord],
    cfg: &SgtConfig,
    seed: u64,
) -> GateEvent {
    let p = group.prompt;
    let successes: Vec<&ExperienceRecord> = peers
        .iter()
        .filter(|r| r.prompt_id == p && r.reward > cfg.success_threshold && r.response_text.is_some())
        .collect();
    let learner_failed = group.rewards.iter().all(|&r| r < cfg.negative_threshold);
    let mut event = GateEvent {
        learner: learner.id.clone(),
        prompt: p,
        fired: false,
        peer_successes: successes.len(),
        selected: Vec::new(),
    };
    if !learner_failed || successes.is_empty() {
        return event;
    }
    event.fired = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = successes;
    while event.selected.len() < cfg.per_prompt_cap && !pool.is_empty() {
        let i = sgt_select(&pool, cfg.selection, &learner.tokenizer, &mut rng)
            .expect("pool is non-empty");
        let r = pool.remove(i);
        let text = r.response_text.clone().unwrap_or_default();
        event.selected.push(SelectedSuccess {
            record_id: r.record_id,
            policy_id: r.meta.policy_id.clone(),
            learner_tokens: tokenize(&learner.tokenizer, &text).keys(),
            response_text: text,
        });
    }
    event
}

/// Index of the chosen success: a seeded uniform draw, or the shortest on the
/// learner's grid with ties going to the lower record id.
pub fn sgt_select(
    successes: &[&ExperienceRecord],
    rule: SgtSelection,
    learner_spec: &TokenizerSpec,
    rng: &mut ChaCha8Rng,
) -> Result<usize, RegimeError> {
    if successes.is_empty() {
        return Err(RegimeError::Precondition("no peer success to select from".into()));
    }
    Ok(match rule {
        SgtSelection::Uniform => rng.random_range(0..successes.len()),
        SgtSelection::Shorter => {
            let len = |r: &ExperienceRecord| tokenize(learner_spec, r.response_text.as_deref().unwrap_or("")).len();
            (0..successes.len())
                .min_by_key(|&i| (len(successes[i]), successes[i].record_id))
                .expect("non-empty")
        }
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SgtUpdate {
    pub combined: Vec<f64>,
    pub aux: Vec<f64>,
    pub aux_loss: f64,
    pub used: usize,
    pub skipped_zero_support: usize,
}

impl SgtUpdate {
    pub fn applied(&self) -> bool {
        self.used > 0
    }
}

/// Gradient of the per-token averaged NLL of one response on the learner's
/// grid, and the NLL itself.
pub fn token_mean_nll_grad(learner: &PrefixTreePolicy, prompt: usize, y: usize) -> Result<(f64, Vec<f64>), PolicyError> {
    let (vals, grads) = learner.trace_with_grads(prompt, y)?;
    let t = vals.len().max(1) as f64;
    let nll = -vals.iter().sum::<f64>() / t;
    let mut g = vec![0.0; learner.logits[prompt].len()];
    for row in &grads {
        for (gj, dj) in g.iter_mut().zip(row) {
            *gj -= dj / t;
        }
    }
    Ok((nll, g))
}

/// `base + lambda * aux` when the gate fired and at least one selected
/// success is scoreable by the learner; `base` otherwise. Several selected
/// successes are averaged.
pub fn sgt_update(learner: &PrefixTreePolicy, base: &[f64], gate: &GateEvent, cfg: &SgtConfig) -> SgtUpdate {
    let mut out = SgtUpdate { combined: base.to_vec(), aux: vec![0.0; base.len()], ..Default::default() };
    if !gate.fired {
        return out;
    }
    for s in &gate.selected {
        match learner
            .scoreable(gate.prompt, &s.response_text)
            .and_then(|y| token_mean_nll_grad(learner, gate.prompt, y))
        {
            Ok((nll, g)) => {
                out.used += 1;
                out.aux_loss += nll;
                for (a, gj) in out.aux.iter_mut().zip(&g) {
                    *a += gj;
                }
            }
            Err(_) => out.skipped_zero_support += 1,
        }
    }
    if out.used > 0 {
        let k = out.used as f64;
        out.aux_loss /= k;
        for (c, a) in out.combined.iter_mut().zip(out.aux.iter_mut()) {
            *a /= k;
            *c += cfg.lambda * *a;
        }
    }
    out
}
