//! Group-relative advantages and the clipped surrogate.
//!
//! The loss returned everywhere is the quantity being minimized:
//!
//! `-(1/N) sum_i mean_{t in mask_i} min(w_t A_i, clip(w_t, 1-eps, 1+eps) A_i) + beta KL(pi || ref)`
//!
//! with `w_t = exp(l_theta_t - d_t)` and `d_t` a fixed denominator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envpolicy::{softmax, trace_values_and_grads, PolicyError, PrefixTreePolicy, PromptKeys, RolloutGroup};

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("trace on grid `{found}` cannot be used by a policy on grid `{expected}`; align it first")]
    TraceAlignmentRequired { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("KL to reference undefined on prompt {0}")]
    KlUndefined(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    MeanOnly,
    #[default]
    ZNorm,
}

pub const DEFAULT_ADV_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub normalization: AdvantageMode,
    pub epsilon: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()).sqrt()
}

pub fn group_advantages(rewards: &[f64], mode: AdvantageMode, epsilon: f64) -> AdvantageSet {
    let m = mean(rewards);
    let centered: Vec<f64> = rewards.iter().map(|r| r - m).collect();
    let values = match mode {
        AdvantageMode::MeanOnly => centered,
        AdvantageMode::ZNorm => {
            let s = population_std(rewards);
            centered.iter().map(|a| a / (s + epsilon)).collect()
        }
    };
    AdvantageSet { values, normalization: mode, epsilon }
}

/// Rescale already-centered advantages of a whole batch by their pooled
/// population standard deviation.
pub fn batch_normalize(sets: &mut [AdvantageSet], epsilon: f64) {
    let all: Vec<f64> = sets.iter().flat_map(|s| s.values.iter().copied()).collect();
    let s = population_std(&all);
    for set in sets.iter_mut() {
        for v in &mut set.values {
            *v /= s + epsilon;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub kl_coefficient: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, kl_coefficient: 1e-3 }
    }
}

/// One candidate in a surrogate batch, scored on the learner's own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample {
    pub response: usize,
    pub denominators: Vec<f64>,
    pub mask: Vec<bool>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub tokens: usize,
    pub clipped: usize,
}

impl SurrogateOutput {
    pub fn clip_rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped as f64 / self.tokens as f64
        }
    }
}

/// Per-token surrogate factor and whether the clipped branch binds.
pub fn clipped_factor(w: f64, a: f64, eps: f64) -> (f64, bool) {
    let unclipped = w * a;
    let clipped = w.clamp(1.0 - eps, 1.0 + eps) * a;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Policy part of the loss over `samples`, averaged per sample then over
/// samples. Samples whose mask is empty still count in the denominator.
pub fn clipped_surrogate(
    logits: &[f64],
    keys: &PromptKeys,
    samples: &[SurrogateSample],
    eps: f64,
) -> Result<SurrogateOutput, GrpoError> {
    let n = logits.len();
    let mut out = SurrogateOutput { grad: vec![0.0; n], ..Default::default() };
    if samples.is_empty() {
        return Ok(out);
    }
    let inv_n = 1.0 / samples.len() as f64;
    for s in samples {
        let (vals, grads) = trace_values_and_grads(logits, keys, s.response);
        if s.denominators.len() != vals.len() || s.mask.len() != vals.len() {
            return Err(GrpoError::Shape(format!(
                "sample on response {} has {} tokens but {} denominators and {} mask entries",
                s.response,
                vals.len(),
                s.denominators.len(),
                s.mask.len()
            )));
        }
        let active = s.mask.iter().filter(|&&m| m).count();
        if active == 0 {
            continue;
        }
        let scale = inv_n / active as f64;
        for t in 0..vals.len() {
            if !s.mask[t] {
                continue;
            }
            let w = (vals[t] - s.denominators[t]).exp();
            let (f, clipped) = clipped_factor(w, s.advantage, eps);
            out.tokens += 1;
            out.loss -= scale * f;
            if clipped {
                out.clipped += 1;
            } else if s.advantage != 0.0 {
                let c = scale * s.advantage * w;
                for (g, dl) in out.grad.iter_mut().zip(&grads[t]) {
                    *g -= c * dl;
                }
            }
        }
    }
    Ok(out)
}

/// Exact KL(pi || ref) over the finite support and its logit gradient
/// `pi_j (log(pi_j / ref_j) - KL)`.
pub fn kl_term(logits: &[f64], reference: &[f64]) -> Option<(f64, Vec<f64>)> {
    let p = softmax(logits);
    let q = softmax(reference);
    let mut kl = 0.0;
    let mut logr = vec![0.0; p.len()];
    for j in 0..p.len() {
        if p[j] > 0.0 {
            if q[j] <= 0.0 {
                return None;
            }
            logr[j] = p[j].ln() - q[j].ln();
            kl += p[j] * logr[j];
        }
    }
    let grad = (0..p.len()).map(|j| if p[j] > 0.0 { p[j] * (logr[j] - kl) } else { 0.0 }).collect();
    Some((kl, grad))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub kl: f64,
    pub tokens: usize,
    pub clipped: usize,
}

impl GradOutput {
    pub fn clip_rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped as f64 / self.tokens as f64
        }
    }
}

/// Adds `beta * KL(pi || ref)` to a policy-term result.
pub fn with_kl(
    surrogate: SurrogateOutput,
    logits: &[f64],
    reference: &[f64],
    beta: f64,
    prompt: usize,
) -> Result<GradOutput, GrpoError> {
    let (kl, kl_grad) = kl_term(logits, reference).ok_or(GrpoError::KlUndefined(prompt))?;
    let mut grad = surrogate.grad;
    if beta != 0.0 {
        for (g, k) in grad.iter_mut().zip(&kl_grad) {
            *g += beta * k;
        }
    }
    Ok(GradOutput {
        loss: surrogate.loss + beta * kl,
        grad,
        kl,
        tokens: surrogate.tokens,
        clipped: surrogate.clipped,
    })
}

/// Loss and logit gradient for one prompt's rollout group. Denominators are
/// the behavior traces stored in the group and are never differentiated.
pub fn grpo_gradient(
    policy: &PrefixTreePolicy,
    group: &RolloutGroup,
    advantages: &AdvantageSet,
    clip: &ClipConfig,
    reference: &PrefixTreePolicy,
) -> Result<GradOutput, GrpoError> {
    if advantages.values.len() != group.k() {
        return Err(GrpoError::Shape(format!(
            "{} advantages for a group of {}",
            advantages.values.len(),
            group.k()
        )));
    }
    let samples = group
        .responses
        .iter()
        .zip(&group.traces)
        .zip(&advantages.values)
        .map(|((&y, trace), &a)| {
            if trace.tokenizer_id != policy.tokenizer.id {
                return Err(GrpoError::TraceAlignmentRequired {
                    expected: policy.tokenizer.id.clone(),
                    found: trace.tokenizer_id.clone(),
                });
            }
            Ok(SurrogateSample {
                response: y,
                denominators: trace.log_probs.clone(),
                mask: trace.response_mask.clone(),
                advantage: a,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let p = group.prompt;
    let logits = &policy.logits[p];
    let sur = clipped_surrogate(logits, policy.own_keys(p), &samples, clip.epsilon)?;
    with_kl(sur, logits, &reference.logits[p], clip.kl_coefficient, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envpolicy::{grid_keys, BanditEnv, Prompt};
    use crate::textgrid::TokenizerSpec;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0, 0.0], AdvantageMode::MeanOnly, 1e-8);
        let want = [0.6, -0.4, -0.4, 0.6, -0.4];
        assert!(a.values.iter().zip(want).all(|(x, y)| close(*x, y, 1e-12)));
        let z = group_advantages(&[1.0, 0.0], AdvantageMode::ZNorm, 0.0);
        assert_eq!(z.values, vec![1.0, -1.0]);
        for mode in [AdvantageMode::MeanOnly, AdvantageMode::ZNorm] {
            let e = group_advantages(&[0.3; 4], mode, 1e-8);
            assert!(e.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_renormalization_has_unit_scale() {
        let mut sets = vec![
            group_advantages(&[1.0, 0.0, 0.0], AdvantageMode::MeanOnly, 0.0),
            group_advantages(&[0.2, 0.9], AdvantageMode::MeanOnly, 0.0),
        ];
        batch_normalize(&mut sets, 0.0);
        let all: Vec<f64> = sets.iter().flat_map(|s| s.values.clone()).collect();
        assert!(close(population_std(&all), 1.0, 1e-12));
    }

    #[test]
    fn factor_envelope() {
        for &(w, a) in &[(2.0, 1.0), (0.5, 1.0), (2.0, -1.0), (0.5, -1.0), (1.1, 0.7)] {
            let (f, _) = clipped_factor(w, a, 0.2);
            let lo = f64::min(w, 0.8) * a;
            let hi = f64::max(w, 1.2) * a;
            assert!(f >= lo.min(hi) - 1e-15 && f <= lo.max(hi) + 1e-15);
        }
        assert!(clipped_factor(2.0, 1.0, 0.2).1);
        assert!(!clipped_factor(2.0, -1.0, 0.2).1);
        assert!(clipped_factor(0.5, -1.0, 0.2).1);
    }

    fn three_env() -> BanditEnv {
        BanditEnv::new(
            "t",
            vec![Prompt {
                name: "p".into(),
                text: "q".into(),
                responses: vec!["ab c".into(), "ab d".into(), "e".into()],
                rewards: vec![1.0, 0.0, 0.0],
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_advantage_leaves_only_kl() {
        let env = three_env();
        let spec = TokenizerSpec::character("c");
        let pol = PrefixTreePolicy::new("p", spec.clone(), &env, vec![vec![0.4, -0.3, 0.1]]).unwrap();
        let reference = PrefixTreePolicy::uniform("r", spec, &env);
        let g = pol.sample_group(&env, 0, 5, 1).unwrap();
        let adv = AdvantageSet { values: vec![0.0; 5], normalization: AdvantageMode::MeanOnly, epsilon: 0.0 };
        let out = grpo_gradient(&pol, &g, &adv, &ClipConfig::default(), &reference).unwrap();
        let (_, klg) = kl_term(&pol.logits[0], &reference.logits[0]).unwrap();
        for (a, b) in out.grad.iter().zip(&klg) {
            assert!(close(*a, 1e-3 * b, 1e-12));
        }
    }

    #[test]
    fn on_policy_gradient_is_score_weighted() {
        let env = three_env();
        let spec = TokenizerSpec::character("c");
        let pol = PrefixTreePolicy::new("p", spec, &env, vec![vec![0.4, -0.3, 0.1]]).unwrap();
        let g = pol.sample_group(&env, 0, 5, 9).unwrap();
        let adv = group_advantages(&g.rewards, AdvantageMode::MeanOnly, 0.0);
        let clip = ClipConfig { epsilon: 0.2, kl_coefficient: 0.0 };
        let out = grpo_gradient(&pol, &g, &adv, &clip, &pol).unwrap();
        let mut want = vec![0.0; 3];
        for (&y, &a) in g.responses.iter().zip(&adv.values) {
            let (_, grads) = pol.trace_with_grads(0, y).unwrap();
            let t = grads.len() as f64;
            for j in 0..3 {
                let tok: f64 = grads.iter().map(|gr| gr[j]).sum();
                want[j] -= a * tok / t / 5.0;
            }
        }
        for (a, b) in out.grad.iter().zip(&want) {
            assert!(close(*a, *b, 1e-12));
        }
        assert_eq!(out.clipped, 0);
    }

    #[test]
    fn far_ratios_clip() {
        let env = three_env();
        let spec = TokenizerSpec::character("c");
        let old = PrefixTreePolicy::new("p", spec, &env, vec![vec![0.0, 0.0, 0.0]]).unwrap();
        let ys = [0, 0, 1, 2, 0];
        let g = RolloutGroup {
            policy_id: "p".into(),
            prompt: 0,
            responses: ys.to_vec(),
            rewards: ys.iter().map(|&y| env.reward(0, y)).collect(),
            traces: ys.iter().map(|&y| old.log_prob_trace(0, y).unwrap()).collect(),
            behavior_snapshot: old.logits[0].clone(),
        };
        let mut cur = old.clone();
        cur.logits[0] = vec![6.0, 0.0, 0.0];
        let adv = AdvantageSet { values: vec![1.0; 5], normalization: AdvantageMode::MeanOnly, epsilon: 0.0 };
        let clip = ClipConfig { epsilon: 0.2, kl_coefficient: 0.0 };
        let out = grpo_gradient(&cur, &g, &adv, &clip, &old).unwrap();
        assert!(out.clipped > 0);
        // Only the unclipped samples of responses 1 and 2 still push.
        let only_rest: Vec<SurrogateSample> = [1usize, 2]
            .iter()
            .map(|&y| {
                let d = old.log_prob_trace(0, y).unwrap().log_probs;
                SurrogateSample { response: y, mask: vec![true; d.len()], denominators: d, advantage: 1.0 }
            })
            .collect();
        let rest = clipped_surrogate(&cur.logits[0], cur.own_keys(0), &only_rest, 0.2).unwrap();
        for (a, b) in out.grad.iter().zip(&rest.grad) {
            assert!(close(*a, b * 2.0 / 5.0, 1e-12));
        }
    }

    #[test]
    fn foreign_grid_is_rejected() {
        let env = three_env();
        let pol = PrefixTreePolicy::uniform("p", TokenizerSpec::character("c"), &env);
        let mut g = pol.sample_group(&env, 0, 2, 0).unwrap();
        g.traces[0].tokenizer_id = "other".into();
        let adv = group_advantages(&g.rewards, AdvantageMode::ZNorm, 1e-8);
        let e = grpo_gradient(&pol, &g, &adv, &ClipConfig::default(), &pol);
        assert!(matches!(e, Err(GrpoError::TraceAlignmentRequired { .. })));
    }

    fn loss_at(logits: &[f64], keys: &PromptKeys, samples: &[SurrogateSample], reference: &[f64]) -> f64 {
        let s = clipped_surrogate(logits, keys, samples, 0.2).unwrap();
        with_kl(s, logits, reference, 1e-3, 0).unwrap().loss
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            base in proptest::collection::vec(-1.5f64..1.5, 4),
            drift in proptest::collection::vec(-0.3f64..0.3, 4),
            picks in proptest::collection::vec(0usize..4, 5),
            advs in proptest::collection::vec(-1.5f64..1.5, 5),
        ) {
            let responses: Vec<String> = vec!["ab c".into(), "ab d".into(), "e f".into(), "g".into()];
            let keys = grid_keys(&responses, &TokenizerSpec::character("c"));
            let old = base.clone();
            let cur: Vec<f64> = base.iter().zip(&drift).map(|(a, b)| a + b).collect();
            let samples: Vec<SurrogateSample> = picks.iter().zip(&advs).map(|(&y, &a)| {
                let d = crate::envpolicy::trace_values(&old, &keys, y);
                SurrogateSample { response: y, mask: vec![true; d.len()], denominators: d, advantage: a }
            }).collect();
            let reference = vec![0.1, -0.2, 0.3, 0.0];
            let s = clipped_surrogate(&cur, &keys, &samples, 0.2).unwrap();
            let out = with_kl(s, &cur, &reference, 1e-3, 0).unwrap();
            let h = 1e-6;
            let mut fd = vec![0.0; 4];
            for j in 0..4 {
                let mut up = cur.clone(); up[j] += h;
                let mut dn = cur.clone(); dn[j] -= h;
                fd[j] = (loss_at(&up, &keys, &samples, &reference) - loss_at(&dn, &keys, &samples, &reference)) / (2.0 * h);
            }
            let diff: f64 = fd.iter().zip(&out.grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-4 * norm + 1e-7, "diff {} norm {}", diff, norm);
        }

        #[test]
        fn znorm_has_unit_scale(rewards in proptest::collection::vec(0.0f64..1.0, 2..10)) {
            let a = group_advantages(&rewards, AdvantageMode::ZNorm, 1e-8);
            prop_assert!(mean(&a.values).abs() <= 1e-12);
            let s = population_std(&rewards);
            if s > 1e-2 {
                let sd = population_std(&a.values);
                prop_assert!((sd - 1.0).abs() <= 1e-6);
            }
            let m = group_advantages(&rewards, AdvantageMode::MeanOnly, 1e-8);
            prop_assert!(m.values.iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}
