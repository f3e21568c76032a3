//! The training loop: generate, publish, subscribe and transform, update.
//!
//! Every random draw comes from a stream keyed by (purpose, policy, step,
//! prompt), and per-policy work is mapped in policy order, so the output does
//! not depend on how many workers run it.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Regime, Resolved};
use super::HarnessError;
use crate::derive_seed;
use crate::envpolicy::{BanditEnv, PrefixTreePolicy, RolloutGroup};
use crate::exchange::{Exchange, ExperienceRecord, RecordId, RecordMeta, SubscriptionFilter};
use crate::grpo::{batch_normalize, group_advantages, grpo_gradient, mean, AdvantageMode, AdvantageSet, GradOutput};
use crate::oracle::perturbation_bound_check;
use crate::par::Executor;
use crate::regimes::{
    prp_gradient, prp_pool, sgt_gate, sgt_update, token_mean_nll_grad, xgrpo_advantages, xgrpo_gradient,
    xgrpo_pooled_stats, PrpConfig,
};
use crate::textgrid::TokenizerSpec;
use crate::thl::{align_pass, AlignedTrace, ThlConfig, Trace};

const STREAM_ROLLOUT: u64 = 1;
const STREAM_GATE: u64 = 2;
const STREAM_TEACHER: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// Norm bound on the auxiliary gradient: `||(e_y - pi) / T|| <= sqrt(2)`.
pub const AUX_GRAD_BOUND: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub policy_id: String,
    pub regime: Regime,
    pub train_reward_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_success_rate: Option<f64>,
    pub entropy: f64,
    pub kl_to_reference: f64,
    pub clip_rate: f64,
    pub gate_rate: f64,
    pub pool_unusable_count: usize,
    pub aux_sequence_count: usize,
}

/// Token log-ratios `log pi_learner - log denominator` of one peer response
/// under the three denominator variants, active positions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRatio {
    pub peer: String,
    pub response: usize,
    pub aligned: Vec<f64>,
    /// `None` when the peer cannot score the text on the shuffled prompt.
    pub shuffled: Option<Vec<f64>>,
    pub broken: Vec<f64>,
}

impl PeerRatio {
    pub fn sequence_ratio(&self) -> f64 {
        self.aligned.iter().sum::<f64>().exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbRecord {
    pub difference: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Everything recorded for one (step, learner, prompt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRow {
    pub step: usize,
    pub learner: String,
    pub learner_index: usize,
    pub prompt: usize,
    pub rewards: Vec<f64>,
    /// Response lengths on the learner's grid.
    pub lengths: Vec<usize>,
    /// Rewards of every other policy's samples on this prompt.
    pub peer_rewards: Vec<f64>,
    /// The same, taken from the prompt this one maps to under the step's
    /// prompt permutation.
    pub shuffled_peer_rewards: Vec<f64>,
    pub local_advantages: Vec<f64>,
    pub xgrpo_advantages: Vec<f64>,
    pub shuffled_xgrpo_advantages: Vec<f64>,
    /// The learner failed throughout and some peer succeeded.
    pub sgt_usable: bool,
    /// Some peer response has a sequence ratio inside the band.
    pub prp_usable: bool,
    pub gate_fired: bool,
    pub aux_sequences: usize,
    pub aux_tokens: usize,
    /// Records the learner received under its regime and their token count
    /// on the producers' grids.
    pub subscribed_records: usize,
    pub subscribed_tokens: usize,
    pub pool_unusable: usize,
    pub tokens: usize,
    pub clipped: usize,
    pub peer_ratios: Vec<PeerRatio>,
    pub teacher_matched_nll: Option<f64>,
    pub teacher_mismatched_nll: Option<f64>,
    pub perturbation: Option<PerturbRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub id: String,
    pub tokenizer_id: String,
    pub logits: Vec<Vec<f64>>,
}

impl PolicySnapshot {
    fn of(p: &PrefixTreePolicy) -> Self {
        Self { id: p.id.clone(), tokenizer_id: p.tokenizer.id.clone(), logits: p.logits.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDump {
    pub initial: Vec<PolicySnapshot>,
    pub last: Vec<PolicySnapshot>,
}

/// Written as `abort_dump.json` when an update produces a non-finite logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortDump {
    pub step: usize,
    pub policy_id: String,
    pub prompt: usize,
    pub logits_before: Vec<f64>,
    pub gradient: Vec<f64>,
    pub learning_rate: f64,
    pub completed_metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricsRow>,
    pub artifacts: Vec<ArtifactRow>,
    pub policies: PolicyDump,
    pub pool_dump: Vec<u8>,
}

impl RunOutput {
    pub fn metrics_jsonl(&self) -> String {
        to_jsonl(&self.metrics)
    }

    pub fn artifacts_jsonl(&self) -> String {
        to_jsonl(&self.artifacts)
    }
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("rows serialize"));
        s.push('\n');
    }
    s
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, HarnessError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

struct StepContext<'a> {
    cfg: &'a ExperimentConfig,
    specs: &'a HashMap<String, TokenizerSpec>,
    policies: &'a [PrefixTreePolicy],
    reference: &'a [PrefixTreePolicy],
    exchange: &'a Exchange,
    all: &'a [ExperienceRecord],
    perm: &'a [usize],
    step: usize,
}

struct LearnerStep {
    logits: Vec<Vec<f64>>,
    rows: Vec<ArtifactRow>,
    tokens: usize,
    clipped: usize,
    gates: usize,
    unusable: usize,
    aux: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig, exec: &Executor) -> Result<RunOutput, HarnessError> {
    let Resolved { env, specs, mut policies, .. } = cfg.resolve()?;
    let reference = policies.clone();
    let initial: Vec<PolicySnapshot> = policies.iter().map(PolicySnapshot::of).collect();
    let exchange = Exchange::new(cfg.exchange.retention);
    let n_prompts = env.num_prompts();
    let mut metrics = Vec::with_capacity(cfg.steps * policies.len());
    let mut artifacts = Vec::new();
    let mut pool_dump = Vec::new();

    for step in 0..cfg.steps {
        let s = step as u64;
        exchange.begin_step(s)?;
        let groups: Vec<Vec<RolloutGroup>> = exec
            .map_range(policies.len(), |i| {
                (0..n_prompts)
                    .map(|p| {
                        let seed = derive_seed(cfg.seed, &[STREAM_ROLLOUT, i as u64, s, p as u64]);
                        policies[i].sample_group(&env, p, cfg.group_size, seed)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .into_iter()
            .collect::<Result<_, _>>()?;
        for (i, gs) in groups.iter().enumerate() {
            exchange.publish(s, records_for(cfg, &env, &policies[i], i, s, gs)?)?;
        }
        exchange.close_step(s)?;
        if cfg.exchange.dump_pool {
            exchange.dump_jsonl(s, &mut pool_dump)?;
        }
        let all = exchange.all_records(s)?;
        let mut perm: Vec<usize> = (0..n_prompts).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, s])));

        let ctx = StepContext {
            cfg,
            specs: &specs,
            policies: &policies,
            reference: &reference,
            exchange: &exchange,
            all: &all,
            perm: &perm,
            step,
        };
        let results: Vec<Result<LearnerStep, HarnessError>> =
            exec.map_range(policies.len(), |i| learner_step(&ctx, i, &groups[i]));
        let mut updates = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Err(HarnessError::NonFinite(mut dump)) => {
                    dump.completed_metrics = metrics;
                    return Err(HarnessError::NonFinite(dump));
                }
                other => updates.push(other?),
            }
        }
        for (i, u) in updates.into_iter().enumerate() {
            policies[i].logits = u.logits;
            let pol = &policies[i];
            let rewards: Vec<f64> = groups[i].iter().flat_map(|g| g.rewards.iter().copied()).collect();
            let validate = cfg.validation_every > 0 && (step + 1) % cfg.validation_every == 0;
            let kl = (0..n_prompts).map(|p| pol.kl(&reference[i], p)).collect::<Result<Vec<_>, _>>()?;
            metrics.push(MetricsRow {
                step,
                policy_id: pol.id.clone(),
                regime: cfg.regime,
                train_reward_mean: mean(&rewards),
                val_success_rate: validate.then(|| validation_success(pol, &env)),
                entropy: pol.mean_entropy(),
                kl_to_reference: mean(&kl),
                clip_rate: if u.tokens == 0 { 0.0 } else { u.clipped as f64 / u.tokens as f64 },
                gate_rate: u.gates as f64 / n_prompts as f64,
                pool_unusable_count: u.unusable,
                aux_sequence_count: u.aux,
            });
            artifacts.extend(u.rows);
        }
    }
    let last = policies.iter().map(PolicySnapshot::of).collect();
    Ok(RunOutput { config: cfg.clone(), metrics, artifacts, policies: PolicyDump { initial, last }, pool_dump })
}

/// Greedy-decode success rate over all prompts.
pub fn validation_success(policy: &PrefixTreePolicy, env: &BanditEnv) -> f64 {
    let n = env.num_prompts();
    let hits = (0..n).filter(|&p| crate::envpolicy::is_success(env.reward(p, policy.argmax(p)))).count();
    hits as f64 / n as f64
}

fn records_for(
    cfg: &ExperimentConfig,
    env: &BanditEnv,
    policy: &PrefixTreePolicy,
    index: usize,
    step: u64,
    groups: &[RolloutGroup],
) -> Result<Vec<ExperienceRecord>, HarnessError> {
    let mut out = Vec::new();
    for g in groups {
        let prompt = &env.prompts[g.prompt];
        for (k, ((&y, &reward), trace)) in g.responses.iter().zip(&g.rewards).zip(&g.traces).enumerate() {
            out.push(ExperienceRecord {
                record_id: RecordId::compose(step, index, g.prompt, k)?,
                prompt_id: g.prompt,
                prompt_text: Some(prompt.text.clone()),
                response_text: Some(prompt.responses[y].clone()),
                reward,
                advantage: None,
                trace: Some(trace.clone()),
                meta: RecordMeta {
                    policy_id: policy.id.clone(),
                    policy_index: index,
                    step,
                    tokenizer_id: policy.tokenizer.id.clone(),
                    success: reward > cfg.sgt.success_threshold,
                },
            });
        }
    }
    Ok(out)
}

fn learner_step(ctx: &StepContext, i: usize, groups: &[RolloutGroup]) -> Result<LearnerStep, HarnessError> {
    let cfg = ctx.cfg;
    let learner = &ctx.policies[i];
    let reference = &ctx.reference[i];
    let s = ctx.step as u64;
    let (mode, eps) = (cfg.advantage.mode, cfg.advantage.epsilon);
    let subscribed = match cfg.regime.sharing() {
        Some(r) => ctx.exchange.subscribe(s, &SubscriptionFilter::new(r, learner.id.clone()))?,
        None => Vec::new(),
    };
    let mut by_prompt: Vec<Vec<ExperienceRecord>> = vec![Vec::new(); groups.len()];
    for r in subscribed {
        if let Some(v) = by_prompt.get_mut(r.prompt_id) {
            v.push(r);
        }
    }
    let base_advantages: Vec<AdvantageSet> = if cfg.advantage.batch_normalize {
        let mut sets: Vec<AdvantageSet> =
            groups.iter().map(|g| group_advantages(&g.rewards, AdvantageMode::MeanOnly, eps)).collect();
        batch_normalize(&mut sets, eps);
        sets
    } else {
        groups.iter().map(|g| group_advantages(&g.rewards, mode, eps)).collect()
    };

    let mut out = LearnerStep {
        logits: learner.logits.clone(),
        rows: Vec::new(),
        tokens: 0,
        clipped: 0,
        gates: 0,
        unusable: 0,
        aux: 0,
    };
    for (p, g) in groups.iter().enumerate() {
        let peers = &by_prompt[p];
        let mut gate_fired = false;
        let mut aux_sequences = 0;
        let mut aux_tokens = 0;
        let mut pool_unusable = 0;
        let mut perturbation = None;
        let grad: GradOutput = match cfg.regime {
            Regime::None => grpo_gradient(learner, g, &base_advantages[p], &cfg.clip, reference)?,
            Regime::Prp => {
                let pool = prp_pool(learner, g, peers, mode, eps);
                pool_unusable = pool.unusable;
                let prp = PrpConfig { denominator: cfg.prp.denominator, clip: cfg.clip };
                prp_gradient(learner, g, &pool, &prp, ctx.specs, &cfg.thl, reference)?
            }
            Regime::Xgrpo => xgrpo_gradient(learner, g, peers, mode, eps, &cfg.xgrpo, &cfg.clip, reference)?.grad,
            Regime::Sgt => {
                let base = grpo_gradient(learner, g, &base_advantages[p], &cfg.clip, reference)?;
                let seed = derive_seed(cfg.seed, &[STREAM_GATE, i as u64, s, p as u64]);
                let gate = sgt_gate(learner, g, peers, &cfg.sgt, seed);
                let upd = sgt_update(learner, &base.grad, &gate, &cfg.sgt);
                gate_fired = gate.fired;
                aux_sequences = upd.used;
                for sel in &gate.selected {
                    if learner.scoreable(p, &sel.response_text).is_ok() {
                        aux_tokens += sel.learner_tokens.len();
                    }
                }
                let check = perturbation_bound_check(
                    &learner.logits[p],
                    &base.grad,
                    &upd.aux,
                    cfg.learning_rate,
                    cfg.sgt.lambda,
                    upd.applied(),
                    AUX_GRAD_BOUND,
                )?;
                perturbation =
                    Some(PerturbRecord { difference: check.difference, bound: check.bound, holds: check.holds });
                GradOutput { grad: upd.combined, ..base }
            }
        };
        let row = &mut out.logits[p];
        for (l, gj) in row.iter_mut().zip(&grad.grad) {
            *l -= cfg.learning_rate * gj;
        }
        if row.iter().any(|l| !l.is_finite() && *l != f64::NEG_INFINITY) || grad.grad.iter().any(|g| !g.is_finite()) {
            return Err(HarnessError::NonFinite(Box::new(AbortDump {
                step: ctx.step,
                policy_id: learner.id.clone(),
                prompt: p,
                logits_before: learner.logits[p].clone(),
                gradient: grad.grad.clone(),
                learning_rate: cfg.learning_rate,
                completed_metrics: Vec::new(),
            })));
        }
        out.tokens += grad.tokens;
        out.clipped += grad.clipped;
        out.gates += gate_fired as usize;
        out.unusable += pool_unusable;
        out.aux += aux_sequences;
        if !cfg.diagnostics.enabled {
            continue;
        }
        let subscribed_tokens = peers
            .iter()
            .map(|r| r.trace.as_ref().map(|t| t.len()).unwrap_or(0))
            .sum();
        let mut row = diagnostics(ctx, i, g)?;
        row.gate_fired = gate_fired;
        row.aux_sequences = aux_sequences;
        row.aux_tokens = aux_tokens;
        row.subscribed_records = peers.len();
        row.subscribed_tokens = subscribed_tokens;
        row.pool_unusable = pool_unusable;
        row.tokens = grad.tokens;
        row.clipped = grad.clipped;
        row.perturbation = perturbation;
        out.rows.push(row);
    }
    Ok(out)
}

fn peer_records<'a>(ctx: &'a StepContext, learner: &'a str, prompt: usize) -> impl Iterator<Item = &'a ExperienceRecord> {
    ctx.all.iter().filter(move |r| r.prompt_id == prompt && r.meta.policy_id != learner)
}

fn log_ratios(num: &Trace, aligned: &AlignedTrace) -> Vec<f64> {
    num.log_probs
        .iter()
        .zip(&aligned.values)
        .zip(&aligned.active_mask)
        .filter(|(_, &on)| on)
        .map(|((n, d), _)| n - d)
        .collect()
}

/// Counterfactual quantities for one learner prompt, computed from the
/// unfiltered pool and the pre-update policies. None of this feeds back into
/// training.
fn diagnostics(ctx: &StepContext, i: usize, g: &RolloutGroup) -> Result<ArtifactRow, HarnessError> {
    let cfg = ctx.cfg;
    let learner = &ctx.policies[i];
    let p = g.prompt;
    let s = ctx.step as u64;
    let eps = cfg.advantage.epsilon;
    let peer_rewards: Vec<f64> = peer_records(ctx, &learner.id, p).map(|r| r.reward).collect();
    let shuffled_peer_rewards: Vec<f64> = peer_records(ctx, &learner.id, ctx.perm[p]).map(|r| r.reward).collect();
    let lengths: Vec<usize> = g.responses.iter().map(|&y| learner.token_count(p, y)).collect();
    let local = group_advantages(&g.rewards, cfg.advantage.mode, eps);
    let mix = |peer: &[f64]| {
        let mut pooled = g.rewards.clone();
        pooled.extend_from_slice(peer);
        xgrpo_advantages(&g.rewards, &lengths, &local, xgrpo_pooled_stats(&pooled), &cfg.xgrpo, eps).values
    };
    let xg = mix(&peer_rewards);
    let xg_shuffled = mix(&shuffled_peer_rewards);
    let sgt_usable = g.rewards.iter().all(|&r| r < cfg.sgt.negative_threshold)
        && peer_rewards.iter().any(|&r| r > cfg.sgt.success_threshold);

    let mut peer_ratios = Vec::new();
    for r in peer_records(ctx, &learner.id, p) {
        let (Some(text), Some(trace)) = (&r.response_text, &r.trace) else { continue };
        let Ok(y) = learner.scoreable(p, text) else { continue };
        let src = ctx
            .specs
            .get(&r.meta.tokenizer_id)
            .ok_or_else(|| HarnessError::Config(format!("unknown tokenizer `{}`", r.meta.tokenizer_id)))?;
        let num = learner.log_prob_trace(p, y)?;
        let mask = vec![true; num.len()];
        let thl: &ThlConfig = &cfg.thl;
        let aligned = align_pass(text, trace, src, &learner.tokenizer, &mask, thl, 0)?.aligned;
        let broken = align_pass(text, trace, src, &learner.tokenizer, &mask, thl, cfg.diagnostics.broken_shift)?.aligned;
        let peer = &ctx.policies[r.meta.policy_index];
        let shuffled = match peer.trace_for_text(ctx.perm[p], text, src) {
            Ok(t) => Some(log_ratios(&num, &align_pass(text, &t, src, &learner.tokenizer, &mask, thl, 0)?.aligned)),
            Err(_) => None,
        };
        peer_ratios.push(PeerRatio {
            peer: r.meta.policy_id.clone(),
            response: y,
            aligned: log_ratios(&num, &aligned),
            shuffled,
            broken: log_ratios(&num, &broken),
        });
    }
    let (lo, hi) = cfg.diagnostics.ratio_band;
    let prp_usable = peer_ratios.iter().any(|pr| {
        let rho = pr.sequence_ratio();
        rho >= lo && rho <= hi
    });

    let (mut matched, mut mismatched) = (None, None);
    if sgt_usable {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_TEACHER, i as u64, s, p as u64]));
        let ok = |r: &&ExperienceRecord| r.reward > cfg.sgt.success_threshold && r.response_text.is_some();
        let successes: Vec<&ExperienceRecord> = peer_records(ctx, &learner.id, p).filter(ok).collect();
        let teacher = successes[rng.random_range(0..successes.len())];
        let text = teacher.response_text.as_deref().unwrap_or_default();
        if let Ok(y) = learner.scoreable(p, text) {
            matched = Some(token_mean_nll_grad(learner, p, y)?.0);
            let others: Vec<&ExperienceRecord> = ctx
                .all
                .iter()
                .filter(|r| r.prompt_id != p && r.meta.policy_id == teacher.meta.policy_id)
                .filter(ok)
                .filter(|r| r.response_text.as_deref() != Some(text))
                .filter(|r| learner.scoreable(p, r.response_text.as_deref().unwrap_or_default()).is_ok())
                .collect();
            if !others.is_empty() {
                let other = others[rng.random_range(0..others.len())];
                let y2 = learner.scoreable(p, other.response_text.as_deref().unwrap_or_default())?;
                mismatched = Some(token_mean_nll_grad(learner, p, y2)?.0);
            }
        }
    }

    Ok(ArtifactRow {
        step: ctx.step,
        learner: learner.id.clone(),
        learner_index: i,
        prompt: p,
        rewards: g.rewards.clone(),
        lengths,
        peer_rewards,
        shuffled_peer_rewards,
        local_advantages: local.values,
        xgrpo_advantages: xg,
        shuffled_xgrpo_advantages: xg_shuffled,
        sgt_usable,
        prp_usable,
        gate_fired: false,
        aux_sequences: 0,
        aux_tokens: 0,
        subscribed_records: 0,
        subscribed_tokens: 0,
        pool_unusable: 0,
        tokens: 0,
        clipped: 0,
        peer_ratios,
        teacher_matched_nll: matched,
        teacher_mismatched_nll: mismatched,
        perturbation: None,
    })
}

/// Runs and writes `metrics.jsonl`, `artifacts.jsonl`, `policies.json`,
/// `config.toml` and optionally `pool.jsonl` into `dir`. On a non-finite
/// update `abort_dump.json` is written instead and the error returned.
pub fn run_to_dir(cfg: &ExperimentConfig, exec: &Executor, dir: &Path) -> Result<RunOutput, HarnessError> {
    std::fs::create_dir_all(dir)?;
    match run_experiment(cfg, exec) {
        Ok(out) => {
            write_run(&out, dir)?;
            Ok(out)
        }
        Err(HarnessError::NonFinite(dump)) => {
            std::fs::write(dir.join("abort_dump.json"), serde_json::to_string_pretty(&dump)?)?;
            Err(HarnessError::NonFinite(dump))
        }
        Err(e) => Err(e),
    }
}

pub fn write_run(out: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.jsonl"), out.metrics_jsonl())?;
    std::fs::write(dir.join("artifacts.jsonl"), out.artifacts_jsonl())?;
    std::fs::write(dir.join("policies.json"), serde_json::to_string(&out.policies)?)?;
    std::fs::write(dir.join("config.toml"), out.config.to_toml_string()?)?;
    if out.config.exchange.dump_pool {
        let mut f = std::fs::File::create(dir.join("pool.jsonl"))?;
        f.write_all(&out.pool_dump)?;
    }
    Ok(())
}

/// A finished run read back from disk.
pub struct RunDir {
    pub path: PathBuf,
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricsRow>,
    pub artifacts: Vec<ArtifactRow>,
    pub policies: PolicyDump,
}

impl RunDir {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let config = ExperimentConfig::load(&dir.join("config.toml"))?;
        let metrics = read_jsonl(&std::fs::read_to_string(dir.join("metrics.jsonl"))?)?;
        let artifacts = read_jsonl(&std::fs::read_to_string(dir.join("artifacts.jsonl"))?)?;
        let policies = serde_json::from_str(&std::fs::read_to_string(dir.join("policies.json"))?)?;
        Ok(Self { path: dir.to_path_buf(), config, metrics, artifacts, policies })
    }
}

/// Rebuilds policies from a snapshot against the config's environment.
pub fn restore_policies(cfg: &ExperimentConfig, snaps: &[PolicySnapshot]) -> Result<(BanditEnv, Vec<PrefixTreePolicy>), HarnessError> {
    let resolved = cfg.resolve()?;
    let mut out = Vec::with_capacity(snaps.len());
    for s in snaps {
        let spec = resolved
            .specs
            .get(&s.tokenizer_id)
            .ok_or_else(|| HarnessError::Config(format!("unknown tokenizer `{}`", s.tokenizer_id)))?;
        out.push(PrefixTreePolicy::new(s.id.clone(), spec.clone(), &resolved.env, s.logits.clone())?);
    }
    Ok((resolved.env, out))
}
