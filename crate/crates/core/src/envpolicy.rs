//! Verifiable bandit environments and tabular softmax policies.
//!
//! A policy holds one logit per (prompt, response). Token-level conditionals
//! on any tokenizer grid come from marginalizing the sequence softmax over the
//! prefix tree of that grid's tokenizations: token `k` of `y` has probability
//! `P(S_k) / P(S_{k-1})` where `S_k` is the set of responses sharing `y`'s
//! first `k + 1` tokens. The last token uses `S = {y}`, which absorbs the stop
//! decision, so the product of conditionals is exactly `pi(y)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textgrid::{tokenize, TokenizerSpec};
use crate::thl::Trace;

pub const SUCCESS_THRESHOLD: f64 = 0.8;
pub const NEGATIVE_THRESHOLD: f64 = 0.2;
pub const MAX_RESPONSES: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown prompt index {0}")]
    UnknownPrompt(usize),
    #[error("unknown response index {response} for prompt {prompt}")]
    UnknownResponse { prompt: usize, response: usize },
    #[error("response {text:?} has zero probability under policy for prompt {prompt}")]
    ZeroSupport { prompt: usize, text: String },
    #[error("KL undefined on prompt {0}: support of the first policy is not covered")]
    KlUndefined(usize),
    #[error("logit table shape mismatch: {0}")]
    Shape(String),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub name: String,
    pub text: String,
    pub responses: Vec<String>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEnv {
    pub name: String,
    pub prompts: Vec<Prompt>,
}

impl BanditEnv {
    pub fn new(name: impl Into<String>, prompts: Vec<Prompt>) -> Result<Self, PolicyError> {
        let env = Self { name: name.into(), prompts };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.prompts.is_empty() {
            return Err(PolicyError::InvalidEnv("no prompts".into()));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            let bad = |msg: &str| Err(PolicyError::InvalidEnv(format!("prompt {i}: {msg}")));
            if p.responses.len() < 2 {
                return bad("fewer than two responses");
            }
            if p.responses.len() > MAX_RESPONSES {
                return bad("too many responses");
            }
            if p.rewards.len() != p.responses.len() {
                return bad("reward count differs from response count");
            }
            if p.rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return bad("rewards must lie in [0, 1]");
            }
            if p.responses.iter().any(|r| r.is_empty()) {
                return bad("empty response text");
            }
            let mut sorted = p.responses.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != p.responses.len() {
                return bad("duplicate response text");
            }
        }
        Ok(())
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt(&self, prompt: usize) -> Result<&Prompt, PolicyError> {
        self.prompts.get(prompt).ok_or(PolicyError::UnknownPrompt(prompt))
    }

    pub fn reward(&self, prompt: usize, response: usize) -> f64 {
        self.prompts[prompt].rewards[response]
    }

    pub fn response_index(&self, prompt: usize, text: &str) -> Option<usize> {
        self.prompts.get(prompt)?.responses.iter().position(|r| r == text)
    }

    pub fn supports(&self) -> Vec<Vec<String>> {
        self.prompts.iter().map(|p| p.responses.clone()).collect()
    }
}

pub fn is_success(reward: f64) -> bool {
    reward > SUCCESS_THRESHOLD
}

pub fn is_negative(reward: f64) -> bool {
    reward < NEGATIVE_THRESHOLD
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits.iter().copied());
    logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - z).exp() }).collect()
}

/// `exp(theta_j - LSE_S)` on `S`, zero elsewhere.
fn restricted_softmax(logits: &[f64], set: &[usize]) -> Vec<f64> {
    let z = log_sum_exp(set.iter().map(|&j| logits[j]));
    let mut q = vec![0.0; logits.len()];
    for &j in set {
        if logits[j] != f64::NEG_INFINITY {
            q[j] = (logits[j] - z).exp();
        }
    }
    q
}

/// Token strings of every response of one prompt on one grid.
pub type PromptKeys = Vec<Vec<String>>;

pub fn grid_keys(responses: &[String], spec: &TokenizerSpec) -> PromptKeys {
    responses.iter().map(|r| tokenize(spec, r).keys()).collect()
}

/// The nested prefix sets `S_0, ..., S_{T-1}` of response `y`.
pub fn prefix_sets(keys: &PromptKeys, y: usize) -> Vec<Vec<usize>> {
    let path = &keys[y];
    let t = path.len();
    let mut cand: Vec<usize> = (0..keys.len()).collect();
    let mut out = Vec::with_capacity(t);
    for (k, tok) in path.iter().enumerate() {
        if k + 1 == t {
            out.push(vec![y]);
        } else {
            cand.retain(|&r| keys[r].len() > k && keys[r][k] == *tok);
            out.push(cand.clone());
        }
    }
    out
}

/// Per-token conditional log-probabilities of `y` under `logits`.
pub fn trace_values(logits: &[f64], keys: &PromptKeys, y: usize) -> Vec<f64> {
    let mut prev = log_sum_exp(logits.iter().copied());
    prefix_sets(keys, y)
        .iter()
        .map(|set| {
            let cur = log_sum_exp(set.iter().map(|&j| logits[j]));
            let v = cur - prev;
            prev = cur;
            v
        })
        .collect()
}

/// Trace values and their gradients with respect to the prompt's logits.
pub fn trace_values_and_grads(
    logits: &[f64],
    keys: &PromptKeys,
    y: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let all: Vec<usize> = (0..logits.len()).collect();
    let mut prev_lse = log_sum_exp(logits.iter().copied());
    let mut prev_q = restricted_softmax(logits, &all);
    let mut vals = Vec::new();
    let mut grads = Vec::new();
    for set in prefix_sets(keys, y) {
        let lse = log_sum_exp(set.iter().map(|&j| logits[j]));
        let q = restricted_softmax(logits, &set);
        vals.push(lse - prev_lse);
        grads.push(q.iter().zip(&prev_q).map(|(a, b)| a - b).collect());
        prev_lse = lse;
        prev_q = q;
    }
    (vals, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTreePolicy {
    pub id: String,
    pub tokenizer: TokenizerSpec,
    pub logits: Vec<Vec<f64>>,
    supports: Arc<Vec<Vec<String>>>,
    own_keys: Arc<Vec<PromptKeys>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub policy_id: String,
    pub prompt: usize,
    pub responses: Vec<usize>,
    pub rewards: Vec<f64>,
    pub traces: Vec<Trace>,
    /// The prompt's logits at sampling time.
    pub behavior_snapshot: Vec<f64>,
}

impl RolloutGroup {
    pub fn k(&self) -> usize {
        self.responses.len()
    }

    pub fn any_success(&self) -> bool {
        self.rewards.iter().any(|&r| is_success(r))
    }

    pub fn all_negative(&self) -> bool {
        self.rewards.iter().all(|&r| is_negative(r))
    }
}

impl PrefixTreePolicy {
    pub fn new(
        id: impl Into<String>,
        tokenizer: TokenizerSpec,
        env: &BanditEnv,
        logits: Vec<Vec<f64>>,
    ) -> Result<Self, PolicyError> {
        let supports = env.supports();
        if logits.len() != supports.len() {
            return Err(PolicyError::Shape(format!(
                "{} logit rows for {} prompts",
                logits.len(),
                supports.len()
            )));
        }
        for (p, (row, sup)) in logits.iter().zip(&supports).enumerate() {
            if row.len() != sup.len() {
                return Err(PolicyError::Shape(format!("prompt {p}: {} logits", row.len())));
            }
            if row.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
                return Err(PolicyError::Shape(format!("prompt {p}: NaN or +inf logit")));
            }
            if row.iter().all(|l| *l == f64::NEG_INFINITY) {
                return Err(PolicyError::Shape(format!("prompt {p}: empty support")));
            }
        }
        let own_keys = supports.iter().map(|s| grid_keys(s, &tokenizer)).collect();
        Ok(Self {
            id: id.into(),
            tokenizer,
            logits,
            supports: Arc::new(supports),
            own_keys: Arc::new(own_keys),
        })
    }

    pub fn uniform(id: impl Into<String>, tokenizer: TokenizerSpec, env: &BanditEnv) -> Self {
        let logits = env.prompts.iter().map(|p| vec![0.0; p.responses.len()]).collect();
        Self::new(id, tokenizer, env, logits).expect("uniform logits are always valid")
    }

    pub fn num_prompts(&self) -> usize {
        self.logits.len()
    }

    pub fn responses(&self, prompt: usize) -> &[String] {
        &self.supports[prompt]
    }

    pub fn own_keys(&self, prompt: usize) -> &PromptKeys {
        &self.own_keys[prompt]
    }

    fn check(&self, prompt: usize) -> Result<(), PolicyError> {
        if prompt < self.logits.len() {
            Ok(())
        } else {
            Err(PolicyError::UnknownPrompt(prompt))
        }
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        softmax(&self.logits[prompt])
    }

    pub fn seq_log_prob(&self, prompt: usize, y: usize) -> f64 {
        let row = &self.logits[prompt];
        row[y] - log_sum_exp(row.iter().copied())
    }

    pub fn response_index(&self, prompt: usize, text: &str) -> Option<usize> {
        self.supports.get(prompt)?.iter().position(|r| r == text)
    }

    /// Index of `text` if it lies in the support with positive probability.
    pub fn scoreable(&self, prompt: usize, text: &str) -> Result<usize, PolicyError> {
        self.check(prompt)?;
        match self.response_index(prompt, text) {
            Some(y) if self.logits[prompt][y] != f64::NEG_INFINITY => Ok(y),
            _ => Err(PolicyError::ZeroSupport { prompt, text: text.to_string() }),
        }
    }

    fn scoreable_index(&self, prompt: usize, y: usize) -> Result<(), PolicyError> {
        self.check(prompt)?;
        match self.logits[prompt].get(y) {
            None => Err(PolicyError::UnknownResponse { prompt, response: y }),
            Some(&l) if l == f64::NEG_INFINITY => Err(PolicyError::ZeroSupport {
                prompt,
                text: self.supports[prompt][y].clone(),
            }),
            Some(_) => Ok(()),
        }
    }

    /// Trace of response `y` on the policy's own grid.
    pub fn log_prob_trace(&self, prompt: usize, y: usize) -> Result<Trace, PolicyError> {
        self.scoreable_index(prompt, y)?;
        let vals = trace_values(&self.logits[prompt], &self.own_keys[prompt], y);
        Ok(Trace::new(vals, self.tokenizer.id.clone()))
    }

    /// Trace of a response text on an arbitrary grid.
    pub fn trace_for_text(
        &self,
        prompt: usize,
        text: &str,
        spec: &TokenizerSpec,
    ) -> Result<Trace, PolicyError> {
        let y = self.scoreable(prompt, text)?;
        let vals = if *spec == self.tokenizer {
            trace_values(&self.logits[prompt], &self.own_keys[prompt], y)
        } else {
            trace_values(&self.logits[prompt], &grid_keys(&self.supports[prompt], spec), y)
        };
        Ok(Trace::new(vals, spec.id.clone()))
    }

    pub fn trace_with_grads(
        &self,
        prompt: usize,
        y: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), PolicyError> {
        self.scoreable_index(prompt, y)?;
        Ok(trace_values_and_grads(&self.logits[prompt], &self.own_keys[prompt], y))
    }

    pub fn token_count(&self, prompt: usize, y: usize) -> usize {
        self.own_keys[prompt][y].len()
    }

    /// K i.i.d. draws by inverse CDF from a ChaCha8 stream seeded with `seed`.
    pub fn sample_group(
        &self,
        env: &BanditEnv,
        prompt: usize,
        k: usize,
        seed: u64,
    ) -> Result<RolloutGroup, PolicyError> {
        self.check(prompt)?;
        env.prompt(prompt)?;
        let probs = self.probs(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        let mut responses = Vec::with_capacity(k);
        for _ in 0..k {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = last;
            for (j, &p) in probs.iter().enumerate() {
                acc += p;
                if p > 0.0 && u < acc {
                    pick = j;
                    break;
                }
            }
            responses.push(pick);
        }
        let rewards = responses.iter().map(|&y| env.reward(prompt, y)).collect();
        let traces = responses
            .iter()
            .map(|&y| self.log_prob_trace(prompt, y))
            .collect::<Result<_, _>>()?;
        Ok(RolloutGroup {
            policy_id: self.id.clone(),
            prompt,
            responses,
            rewards,
            traces,
            behavior_snapshot: self.logits[prompt].clone(),
        })
    }

    pub fn success_prob(&self, env: &BanditEnv, prompt: usize) -> f64 {
        self.probs(prompt)
            .iter()
            .zip(&env.prompts[prompt].rewards)
            .filter(|(_, &r)| is_success(r))
            .map(|(p, _)| p)
            .sum()
    }

    pub fn entropy(&self, prompt: usize) -> f64 {
        entropy(&self.probs(prompt))
    }

    pub fn kl(&self, other: &PrefixTreePolicy, prompt: usize) -> Result<f64, PolicyError> {
        kl_divergence(&self.probs(prompt), &other.probs(prompt)).ok_or(PolicyError::KlUndefined(prompt))
    }

    /// Greedy decode; ties go to the lowest response index.
    pub fn argmax(&self, prompt: usize) -> usize {
        let row = &self.logits[prompt];
        let mut best = 0;
        for (j, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = j;
            }
        }
        best
    }

    pub fn mean_entropy(&self) -> f64 {
        let n = self.num_prompts();
        (0..n).map(|p| self.entropy(p)).sum::<f64>() / n as f64
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Forward KL; `None` when `a` puts mass where `b` has none.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut kl = 0.0;
    for (&p, &q) in a.iter().zip(b) {
        if p > 0.0 {
            if q <= 0.0 {
                return None;
            }
            kl += p * (p.ln() - q.ln());
        }
    }
    Some(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env_of(responses: &[&str], rewards: &[f64]) -> BanditEnv {
        BanditEnv::new(
            "t",
            vec![Prompt {
                name: "p0".into(),
                text: "q".into(),
                responses: responses.iter().map(|s| s.to_string()).collect(),
                rewards: rewards.to_vec(),
            }],
        )
        .unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn aa_ab_trace() {
        let env = env_of(&["aa", "ab"], &[0.0, 1.0]);
        let l = vec![0.75f64.ln(), 0.25f64.ln()];
        let pol = PrefixTreePolicy::new("p", TokenizerSpec::character("c"), &env, vec![l]).unwrap();
        let t = pol.log_prob_trace(0, 1).unwrap();
        assert!(close(t.log_probs[0], 0.0, 1e-12));
        assert!(close(t.log_probs[1], 0.25f64.ln(), 1e-12));
    }

    #[test]
    fn single_response_support_trace_sums_to_zero() {
        let env = env_of(&["xy", "z"], &[1.0, 0.0]);
        let pol = PrefixTreePolicy::new(
            "p",
            TokenizerSpec::character("c"),
            &env,
            vec![vec![0.0, f64::NEG_INFINITY]],
        )
        .unwrap();
        assert_eq!(pol.log_prob_trace(0, 0).unwrap().masked_sum(), 0.0);
        assert!(matches!(pol.log_prob_trace(0, 1), Err(PolicyError::ZeroSupport { .. })));
        assert!(matches!(pol.trace_for_text(0, "nope", &pol.tokenizer), Err(PolicyError::ZeroSupport { .. })));
    }

    #[test]
    fn prefix_of_another_response() {
        let env = env_of(&["ab", "abc", "b"], &[0.0, 1.0, 0.0]);
        let l = vec![0.3, -0.2, 1.1];
        let pol = PrefixTreePolicy::new("p", TokenizerSpec::character("c"), &env, vec![l]).unwrap();
        for y in 0..3 {
            let t = pol.log_prob_trace(0, y).unwrap();
            assert!(close(t.masked_sum(), pol.seq_log_prob(0, y), 1e-12));
        }
    }

    #[test]
    fn success_prob_and_entropy() {
        let env = env_of(&["a", "b", "c", "d"], &[1.0, 0.0, 0.5, 0.0]);
        let pol = PrefixTreePolicy::uniform("p", TokenizerSpec::character("c"), &env);
        assert!(close(pol.success_prob(&env, 0), 0.25, 1e-12));
        assert!(close(pol.entropy(0), 4f64.ln(), 1e-12));
        assert_eq!(pol.kl(&pol, 0).unwrap(), 0.0);
        let none = env_of(&["a", "b"], &[0.0, 0.0]);
        let p2 = PrefixTreePolicy::uniform("p", TokenizerSpec::character("c"), &none);
        assert_eq!(p2.success_prob(&none, 0), 0.0);
    }

    #[test]
    fn point_mass() {
        let env = env_of(&["a", "b", "c"], &[1.0, 0.0, 0.0]);
        let ninf = f64::NEG_INFINITY;
        let pol = PrefixTreePolicy::new("p", TokenizerSpec::character("c"), &env, vec![vec![0.0, ninf, ninf]])
            .unwrap();
        assert_eq!(pol.entropy(0), 0.0);
        assert_eq!(pol.success_prob(&env, 0), 1.0);
        let g = pol.sample_group(&env, 0, 8, 7).unwrap();
        assert!(g.responses.iter().all(|&y| y == 0));
        let uni = PrefixTreePolicy::uniform("q", TokenizerSpec::character("c"), &env);
        assert!(pol.kl(&uni, 0).is_ok());
        assert!(matches!(uni.kl(&pol, 0), Err(PolicyError::KlUndefined(0))));
    }

    #[test]
    fn sampling_is_replayable_and_calibrated() {
        let env = env_of(&["a", "b", "c", "d"], &[1.0, 0.0, 0.0, 0.0]);
        let pol = PrefixTreePolicy::uniform("p", TokenizerSpec::character("c"), &env);
        assert_eq!(pol.sample_group(&env, 0, 50, 3).unwrap(), pol.sample_group(&env, 0, 50, 3).unwrap());
        let n = 20_000;
        let g = pol.sample_group(&env, 0, n, 11).unwrap();
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        for y in 0..4 {
            let f = g.responses.iter().filter(|&&r| r == y).count() as f64 / n as f64;
            assert!((f - 0.25).abs() <= 3.0 * sigma, "response {y}: {f}");
        }
        assert!(matches!(pol.sample_group(&env, 5, 1, 0), Err(PolicyError::UnknownPrompt(5))));
    }

    #[test]
    fn argmax_ties_break_low() {
        let env = env_of(&["a", "b", "c"], &[0.0, 1.0, 0.0]);
        let pol = PrefixTreePolicy::new("p", TokenizerSpec::character("c"), &env, vec![vec![0.5, 1.0, 1.0]]).unwrap();
        assert_eq!(pol.argmax(0), 1);
    }

    #[test]
    fn env_validation() {
        let p = |responses: Vec<&str>, rewards: Vec<f64>| Prompt {
            name: "x".into(),
            text: "x".into(),
            responses: responses.into_iter().map(String::from).collect(),
            rewards,
        };
        assert!(BanditEnv::new("e", vec![p(vec!["a"], vec![1.0])]).is_err());
        assert!(BanditEnv::new("e", vec![p(vec!["a", "a"], vec![1.0, 0.0])]).is_err());
        assert!(BanditEnv::new("e", vec![p(vec!["a", ""], vec![1.0, 0.0])]).is_err());
        assert!(BanditEnv::new("e", vec![p(vec!["a", "b"], vec![1.5, 0.0])]).is_err());
        assert!(BanditEnv::new("e", vec![]).is_err());
    }

    fn texts() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::btree_set("[ab]{1,3}( [ab]{1,3}){0,2}", 2..8)
            .prop_map(|s| s.into_iter().collect())
    }

    fn spec() -> impl Strategy<Value = TokenizerSpec> {
        prop_oneof![
            Just(TokenizerSpec::character("c")),
            Just(TokenizerSpec::subword("s1", [("a", "b"), ("b", "a")])),
            Just(TokenizerSpec::subword("s2", [("a", "a"), ("aa", "b")])),
            (1usize..4).prop_map(|k| TokenizerSpec::adversarial("adv", k)),
        ]
    }

    proptest! {
        #[test]
        fn chain_rule_on_every_grid(
            responses in texts(),
            raw in proptest::collection::vec(-4.0f64..4.0, 8),
            grid in spec(),
        ) {
            let n = responses.len();
            let rewards = vec![0.0; n];
            let env = BanditEnv::new("t", vec![Prompt { name: "p".into(), text: "q".into(), responses: responses.clone(), rewards }]).unwrap();
            let pol = PrefixTreePolicy::new("p", TokenizerSpec::character("c"), &env, vec![raw[..n].to_vec()]).unwrap();
            let probs = pol.probs(0);
            prop_assert!(close(probs.iter().sum::<f64>(), 1.0, 1e-12));
            for (y, text) in responses.iter().enumerate() {
                let t = pol.trace_for_text(0, text, &grid).unwrap();
                prop_assert_eq!(t.len(), tokenize(&grid, text).len());
                prop_assert!(close(t.masked_sum(), pol.seq_log_prob(0, y), 1e-12));
            }
        }

        #[test]
        fn token_gradients_match_finite_differences(
            responses in texts(),
            raw in proptest::collection::vec(-3.0f64..3.0, 8),
            pick in 0usize..8,
        ) {
            let n = responses.len();
            let y = pick % n;
            let keys = grid_keys(&responses, &TokenizerSpec::character("c"));
            let logits = raw[..n].to_vec();
            let (vals, grads) = trace_values_and_grads(&logits, &keys, y);
            prop_assert_eq!(vals.clone(), trace_values(&logits, &keys, y));
            let h = 1e-6;
            for j in 0..n {
                let mut up = logits.clone();
                up[j] += h;
                let mut dn = logits.clone();
                dn[j] -= h;
                let vu = trace_values(&up, &keys, y);
                let vd = trace_values(&dn, &keys, y);
                for t in 0..vals.len() {
                    let fd = (vu[t] - vd[t]) / (2.0 * h);
                    prop_assert!((fd - grads[t][j]).abs() <= 1e-6, "token {} logit {}", t, j);
                }
            }
            // Summed over tokens the gradient is the sequence score e_y - pi.
            let probs = softmax(&logits);
            for j in 0..n {
                let s: f64 = grads.iter().map(|g| g[j]).sum();
                let e = if j == y { 1.0 } else { 0.0 };
                prop_assert!((s - (e - probs[j])).abs() <= 1e-12);
            }
        }
    }
}
