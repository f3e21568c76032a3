//! Diagnostic tables computed from run artifacts. Every table exports as CSV.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::config::{ExperimentConfig, Regime};
use super::runner::ArtifactRow;
use super::HarnessError;
use crate::envpolicy::{is_success, BanditEnv, PrefixTreePolicy};
use crate::grpo::mean;

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

// ---------------------------------------------------------------- activation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationRow {
    pub learner: String,
    /// (step, prompt) pairs seen by this learner.
    pub prompts: usize,
    pub gated: usize,
    pub ungated: usize,
    /// Success rate over every sample in the pool (learner and peers).
    pub gated_pool_success: Option<f64>,
    pub ungated_pool_success: Option<f64>,
    /// Prompts where no policy in the pool succeeded.
    pub all_fail: usize,
}

pub fn activation_profile(artifacts: &[ArtifactRow]) -> Vec<ActivationRow> {
    #[derive(Default)]
    struct Acc {
        prompts: usize,
        gated: usize,
        gated_hits: usize,
        gated_samples: usize,
        hits: usize,
        samples: usize,
        all_fail: usize,
    }
    let mut by: BTreeMap<(usize, String), Acc> = BTreeMap::new();
    for r in artifacts {
        let a = by.entry((r.learner_index, r.learner.clone())).or_default();
        let hits = r.rewards.iter().chain(&r.peer_rewards).filter(|&&x| is_success(x)).count();
        let n = r.rewards.len() + r.peer_rewards.len();
        a.prompts += 1;
        if r.gate_fired {
            a.gated += 1;
            a.gated_hits += hits;
            a.gated_samples += n;
        } else {
            a.hits += hits;
            a.samples += n;
        }
        if hits == 0 {
            a.all_fail += 1;
        }
    }
    by.into_iter()
        .map(|((_, learner), a)| ActivationRow {
            learner,
            prompts: a.prompts,
            gated: a.gated,
            ungated: a.prompts - a.gated,
            gated_pool_success: rate(a.gated_hits, a.gated_samples),
            ungated_pool_success: rate(a.hits, a.samples),
            all_fail: a.all_fail,
        })
        .collect()
}

// ---------------------------------------------------------------- ratios

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioVariant {
    ThlAligned,
    ShuffledPrompt,
    BrokenAlignment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub variant: RatioVariant,
    pub responses: usize,
    pub tokens: usize,
    pub p99: Option<f64>,
    /// Fraction of token ratios outside the band; the band edges count as
    /// inside.
    pub clip_rate: f64,
    pub any_above_10: f64,
}

/// Nearest-rank quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub fn ratio_statistics(artifacts: &[ArtifactRow], band: (f64, f64)) -> Vec<RatioRow> {
    let (lo, hi) = band;
    [RatioVariant::ThlAligned, RatioVariant::ShuffledPrompt, RatioVariant::BrokenAlignment]
        .into_iter()
        .map(|variant| {
            let mut ratios = Vec::new();
            let mut responses = 0;
            let mut big = 0;
            for pr in artifacts.iter().flat_map(|r| &r.peer_ratios) {
                let logs = match variant {
                    RatioVariant::ThlAligned => Some(&pr.aligned),
                    RatioVariant::ShuffledPrompt => pr.shuffled.as_ref(),
                    RatioVariant::BrokenAlignment => Some(&pr.broken),
                };
                let Some(logs) = logs else { continue };
                responses += 1;
                let start = ratios.len();
                ratios.extend(logs.iter().map(|l| l.exp()));
                if ratios[start..].iter().any(|&x| x > 10.0) {
                    big += 1;
                }
            }
            let outside = ratios.iter().filter(|&&x| x < lo || x > hi).count();
            RatioRow {
                variant,
                responses,
                tokens: ratios.len(),
                p99: quantile(&ratios, 0.99),
                clip_rate: rate(outside, ratios.len()).unwrap_or(0.0),
                any_above_10: rate(big, responses).unwrap_or(0.0),
            }
        })
        .collect()
}

// ---------------------------------------------------------------- complementarity

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub a: String,
    pub b: String,
    pub success_a: f64,
    pub success_b: f64,
    /// `|A and B| / |A or B|`; 1 when both sets are empty.
    pub jaccard: f64,
    /// P(b succeeds | a fails); empty when a never fails.
    pub rescue_b_given_a_fails: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolRow {
    pub prompts: usize,
    pub any: usize,
    pub all: usize,
    pub exactly_one: usize,
    pub at_least_two: usize,
    pub max_single: usize,
    pub any_rate: f64,
    pub all_rate: f64,
    pub exactly_one_rate: f64,
}

impl PoolRow {
    pub fn identities_hold(&self) -> bool {
        self.any >= self.max_single && self.exactly_one == self.any - self.at_least_two
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifficultyRow {
    pub bucket: String,
    pub prompts: usize,
    /// Mean pairwise Jaccard within the bucket.
    pub jaccard: f64,
    pub exactly_one_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplementarityReport {
    pub pairs: Vec<PairRow>,
    pub pool: PoolRow,
    pub buckets: Vec<DifficultyRow>,
}

impl ComplementarityReport {
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        Ok(format!(
            "{}\n{}\n{}",
            csv_string(&self.pairs)?,
            csv_string(std::slice::from_ref(&self.pool))?,
            csv_string(&self.buckets)?
        ))
    }
}

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn mean_pair_jaccard(sets: &[Vec<bool>], idx: &[usize]) -> f64 {
    let mut vals = Vec::new();
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            let sa: Vec<bool> = idx.iter().map(|&p| sets[a][p]).collect();
            let sb: Vec<bool> = idx.iter().map(|&p| sets[b][p]).collect();
            vals.push(jaccard(&sa, &sb));
        }
    }
    if vals.is_empty() {
        1.0
    } else {
        mean(&vals)
    }
}

/// Success sets under greedy decoding, pairwise overlap, pool coverage and a
/// three-way split by mean expected success (easy, medium, hard).
pub fn complementarity_report(env: &BanditEnv, policies: &[PrefixTreePolicy]) -> ComplementarityReport {
    let n = env.num_prompts();
    let sets: Vec<Vec<bool>> = policies
        .iter()
        .map(|pol| (0..n).map(|p| is_success(env.reward(p, pol.argmax(p)))).collect())
        .collect();
    let mut pairs = Vec::new();
    for a in 0..policies.len() {
        for b in 0..policies.len() {
            if a == b {
                continue;
            }
            let fails = (0..n).filter(|&p| !sets[a][p]).count();
            let rescued = (0..n).filter(|&p| !sets[a][p] && sets[b][p]).count();
            pairs.push(PairRow {
                a: policies[a].id.clone(),
                b: policies[b].id.clone(),
                success_a: sets[a].iter().filter(|&&x| x).count() as f64 / n as f64,
                success_b: sets[b].iter().filter(|&&x| x).count() as f64 / n as f64,
                jaccard: jaccard(&sets[a], &sets[b]),
                rescue_b_given_a_fails: rate(rescued, fails),
            });
        }
    }
    let solvers: Vec<usize> = (0..n).map(|p| sets.iter().filter(|s| s[p]).count()).collect();
    let m = policies.len();
    let any = solvers.iter().filter(|&&c| c >= 1).count();
    let all = solvers.iter().filter(|&&c| c == m && m > 0).count();
    let exactly_one = solvers.iter().filter(|&&c| c == 1).count();
    let at_least_two = solvers.iter().filter(|&&c| c >= 2).count();
    let max_single = sets.iter().map(|s| s.iter().filter(|&&x| x).count()).max().unwrap_or(0);
    let pool = PoolRow {
        prompts: n,
        any,
        all,
        exactly_one,
        at_least_two,
        max_single,
        any_rate: rate(any, n).unwrap_or(0.0),
        all_rate: rate(all, n).unwrap_or(0.0),
        exactly_one_rate: rate(exactly_one, n).unwrap_or(0.0),
    };

    let difficulty: Vec<f64> =
        (0..n).map(|p| mean(&policies.iter().map(|pol| pol.success_prob(env, p)).collect::<Vec<_>>())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| difficulty[b].total_cmp(&difficulty[a]).then(a.cmp(&b)));
    let mut buckets = Vec::new();
    let mut start = 0;
    for (k, name) in ["easy", "medium", "hard"].into_iter().enumerate() {
        let size = n / 3 + usize::from(k < n % 3);
        let idx = &order[start..start + size];
        start += size;
        let one = idx.iter().filter(|&&p| solvers[p] == 1).count();
        buckets.push(DifficultyRow {
            bucket: name.into(),
            prompts: size,
            jaccard: mean_pair_jaccard(&sets, idx),
            exactly_one_rate: rate(one, size).unwrap_or(0.0),
        });
    }
    ComplementarityReport { pairs, pool, buckets }
}

// ---------------------------------------------------------------- channels

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelCell {
    pub prp: bool,
    pub xgrpo: bool,
    pub sgt: bool,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelReport {
    pub total: usize,
    pub cells: Vec<ChannelCell>,
    /// Rows where SGT is usable but XGRPO is not.
    pub violations: usize,
}

pub const ADVANTAGE_CHANGE_TOL: f64 = 1e-12;

pub fn xgrpo_usable(r: &ArtifactRow) -> bool {
    r.local_advantages
        .iter()
        .zip(&r.xgrpo_advantages)
        .any(|(a, b)| (a - b).abs() > ADVANTAGE_CHANGE_TOL)
}

pub fn channel_decomposition(artifacts: &[ArtifactRow]) -> ChannelReport {
    let mut counts: BTreeMap<(bool, bool, bool), usize> = BTreeMap::new();
    let mut violations = 0;
    for r in artifacts {
        let (x, s) = (xgrpo_usable(r), r.sgt_usable);
        if s && !x {
            violations += 1;
            continue;
        }
        *counts.entry((r.prp_usable, x, s)).or_default() += 1;
    }
    let total = artifacts.len();
    let mut cells = Vec::with_capacity(6);
    for prp in [false, true] {
        for (xgrpo, sgt) in [(false, false), (true, false), (true, true)] {
            let count = counts.get(&(prp, xgrpo, sgt)).copied().unwrap_or(0);
            cells.push(ChannelCell { prp, xgrpo, sgt, count, percent: 100.0 * rate(count, total).unwrap_or(0.0) });
        }
    }
    ChannelReport { total, cells, violations }
}

// ---------------------------------------------------------------- cost

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub regime: Regime,
    pub rollout_sequences: usize,
    pub rollout_tokens: usize,
    pub extra_sequences: usize,
    pub extra_tokens: usize,
    /// Largest per-step ratio of auxiliary to rollout sequences.
    pub max_step_sequence_fraction: f64,
    /// `cap * (M - 1) / (M * N)`.
    pub bound: f64,
    pub within_bound: bool,
}

pub fn cost_report(cfg: &ExperimentConfig, artifacts: &[ArtifactRow]) -> CostRow {
    let m = cfg.policies.len() as f64;
    let n = cfg.group_size as f64;
    let bound = cfg.sgt.per_prompt_cap as f64 * (m - 1.0) / (m * n);
    let rollout_sequences = artifacts.iter().map(|r| r.rewards.len()).sum();
    let rollout_tokens = artifacts.iter().map(|r| r.lengths.iter().sum::<usize>()).sum();
    let (extra_sequences, extra_tokens) = match cfg.regime {
        Regime::None | Regime::Xgrpo => (0, 0),
        Regime::Prp => (
            artifacts.iter().map(|r| r.subscribed_records).sum(),
            artifacts.iter().map(|r| r.subscribed_tokens).sum(),
        ),
        Regime::Sgt => (
            artifacts.iter().map(|r| r.aux_sequences).sum(),
            artifacts.iter().map(|r| r.aux_tokens).sum(),
        ),
    };
    let mut per_step: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in artifacts {
        let e = per_step.entry(r.step).or_default();
        e.0 += r.aux_sequences;
        e.1 += r.rewards.len();
    }
    let max_step_sequence_fraction = per_step
        .values()
        .map(|&(aux, roll)| rate(aux, roll).unwrap_or(0.0))
        .fold(0.0, f64::max);
    CostRow {
        regime: cfg.regime,
        rollout_sequences,
        rollout_tokens,
        extra_sequences,
        extra_tokens,
        max_step_sequence_fraction,
        bound,
        within_bound: max_step_sequence_fraction <= bound + 1e-15,
    }
}

// ---------------------------------------------------------------- teacher

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherRow {
    pub learner: String,
    pub pairs: usize,
    pub matched_nll: f64,
    pub mismatched_nll: f64,
}

pub fn matched_teacher_check(artifacts: &[ArtifactRow]) -> Vec<TeacherRow> {
    let mut by: BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in artifacts {
        if let (Some(a), Some(b)) = (r.teacher_matched_nll, r.teacher_mismatched_nll) {
            let e = by.entry((r.learner_index, r.learner.clone())).or_default();
            e.0.push(a);
            e.1.push(b);
        }
    }
    by.into_iter()
        .map(|((_, learner), (a, b))| TeacherRow {
            learner,
            pairs: a.len(),
            matched_nll: mean(&a),
            mismatched_nll: mean(&b),
        })
        .collect()
}

// ---------------------------------------------------------------- shuffle

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShuffleRow {
    pub pooling: String,
    pub rows: usize,
    /// Correlation between `mean(learner) - mean(true peers)` and the mean
    /// advantage change; 0 when either side is constant.
    pub correlation: f64,
    pub sign_flip_rate: f64,
    pub mean_abs_change: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn shuffled_pool_control(artifacts: &[ArtifactRow]) -> Vec<ShuffleRow> {
    let rows: Vec<&ArtifactRow> = artifacts.iter().filter(|r| !r.peer_rewards.is_empty()).collect();
    let spread: Vec<f64> = rows.iter().map(|r| mean(&r.rewards) - mean(&r.peer_rewards)).collect();
    let summarize = |name: &str, pick: &dyn Fn(&ArtifactRow) -> &Vec<f64>| {
        let mut change = Vec::with_capacity(rows.len());
        let (mut flips, mut samples, mut abs) = (0usize, 0usize, 0.0);
        for r in &rows {
            let eff = pick(r);
            let d: Vec<f64> = eff.iter().zip(&r.local_advantages).map(|(e, l)| e - l).collect();
            change.push(mean(&d));
            for (e, l) in eff.iter().zip(&r.local_advantages) {
                samples += 1;
                abs += (e - l).abs();
                if (*l > 0.0 && *e < 0.0) || (*l < 0.0 && *e > 0.0) {
                    flips += 1;
                }
            }
        }
        ShuffleRow {
            pooling: name.into(),
            rows: rows.len(),
            correlation: pearson(&spread, &change),
            sign_flip_rate: rate(flips, samples).unwrap_or(0.0),
            mean_abs_change: if samples == 0 { 0.0 } else { abs / samples as f64 },
        }
    };
    vec![
        summarize("true", &|r: &ArtifactRow| &r.xgrpo_advantages),
        summarize("shuffled", &|r: &ArtifactRow| &r.shuffled_xgrpo_advantages),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner::PeerRatio;
    use crate::textgrid::TokenizerSpec;

    fn row(rewards: Vec<f64>, peer: Vec<f64>) -> ArtifactRow {
        let local = crate::grpo::group_advantages(&rewards, crate::grpo::AdvantageMode::ZNorm, 1e-8).values;
        ArtifactRow {
            step: 0,
            learner: "a".into(),
            learner_index: 0,
            prompt: 0,
            lengths: vec![1; rewards.len()],
            rewards,
            shuffled_peer_rewards: peer.clone(),
            peer_rewards: peer,
            xgrpo_advantages: local.clone(),
            shuffled_xgrpo_advantages: local.clone(),
            local_advantages: local,
            sgt_usable: false,
            prp_usable: false,
            gate_fired: false,
            aux_sequences: 0,
            aux_tokens: 0,
            subscribed_records: 0,
            subscribed_tokens: 0,
            pool_unusable: 0,
            tokens: 0,
            clipped: 0,
            peer_ratios: vec![],
            teacher_matched_nll: None,
            teacher_mismatched_nll: None,
            perturbation: None,
        }
    }

    #[test]
    fn quantile_is_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.99), Some(99.0));
        assert_eq!(quantile(&v, 1.0), Some(100.0));
        assert_eq!(quantile(&[3.0], 0.99), Some(3.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn identical_ratios_are_unity() {
        let mut r = row(vec![0.0, 1.0], vec![1.0]);
        r.peer_ratios = vec![PeerRatio {
            peer: "b".into(),
            response: 0,
            aligned: vec![0.0, 0.0],
            shuffled: Some(vec![0.0]),
            broken: vec![0.0],
        }];
        for t in ratio_statistics(&[r.clone()], (0.8, 1.2)) {
            assert_eq!(t.p99, Some(1.0));
            assert_eq!(t.clip_rate, 0.0);
            assert_eq!(t.any_above_10, 0.0);
        }
        // band edges count as inside
        r.peer_ratios[0].aligned = vec![0.8f64.ln(), 1.2f64.ln()];
        let t = &ratio_statistics(&[r], (0.8f64.ln().exp(), 1.2f64.ln().exp()))[0];
        assert_eq!(t.clip_rate, 0.0);
    }

    #[test]
    fn no_fire_run_has_empty_gated_rows() {
        let rows = vec![row(vec![1.0, 0.0], vec![0.0]), row(vec![0.0, 0.0], vec![0.0])];
        let t = activation_profile(&rows);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].gated, t[0].ungated, t[0].prompts, t[0].all_fail), (0, 2, 2, 1));
        assert_eq!(t[0].gated_pool_success, None);
    }

    #[test]
    fn constant_rewards_are_not_xgrpo_usable_and_cells_sum() {
        let mut rows = vec![row(vec![1.0, 1.0], vec![1.0, 1.0])];
        let mut r = row(vec![0.0, 0.0], vec![1.0]);
        r.sgt_usable = true;
        r.xgrpo_advantages = vec![-0.5, -0.5];
        rows.push(r);
        let c = channel_decomposition(&rows);
        assert_eq!(c.violations, 0);
        assert_eq!(c.cells.len(), 6);
        assert!((c.cells.iter().map(|x| x.percent).sum::<f64>() - 100.0).abs() < 1e-9);
        let hit = c.cells.iter().find(|x| x.sgt).unwrap();
        assert!(hit.xgrpo && hit.count == 1);
        assert_eq!(c.cells.iter().find(|x| !x.prp && !x.xgrpo && !x.sgt).unwrap().count, 1);
    }

    #[test]
    fn shuffle_with_identical_rewards_matches() {
        let rows: Vec<ArtifactRow> = (0..4).map(|_| row(vec![1.0, 0.0], vec![1.0, 0.0])).collect();
        let t = shuffled_pool_control(&rows);
        assert_eq!(t[0].correlation, t[1].correlation);
        assert_eq!(t[0].sign_flip_rate, t[1].sign_flip_rate);
        assert_eq!(t[0].mean_abs_change, t[1].mean_abs_change);
        assert!((0.0..=1.0).contains(&t[0].sign_flip_rate));
    }

    #[test]
    fn complementarity_identities() {
        let env = crate::harness::envs::separable().unwrap().env;
        let spec = TokenizerSpec::character("c");
        let mk = |id: &str, best: [usize; 4]| {
            let logits = (0..4).map(|p| (0..4).map(|j| if j == best[p] { 1.0 } else { 0.0 }).collect()).collect();
            PrefixTreePolicy::new(id, spec.clone(), &env, logits).unwrap()
        };
        let same = complementarity_report(&env, &[mk("a", [0, 1, 2, 3]), mk("b", [0, 1, 2, 3])]);
        assert_eq!(same.pairs[0].jaccard, 1.0);
        assert_eq!(same.pool.exactly_one, 0);
        assert!(same.pool.identities_hold());
        let disjoint = complementarity_report(&env, &[mk("a", [0, 1, 0, 0]), mk("b", [1, 0, 2, 3])]);
        assert_eq!(disjoint.pairs[0].jaccard, 0.0);
        assert_eq!(disjoint.pool.any, 4);
        assert_eq!(disjoint.pool.exactly_one, 4);
        assert_eq!(disjoint.pairs[0].rescue_b_given_a_fails, Some(1.0));
        assert!(disjoint.pool.identities_hold());
        assert_eq!(disjoint.buckets.iter().map(|b| b.prompts).sum::<usize>(), 4);
        assert!(disjoint.to_csv().unwrap().contains("exactly_one_rate"));
    }

    #[test]
    fn teacher_table_skips_incomplete_rows() {
        let mut r = row(vec![0.0], vec![1.0]);
        assert!(matched_teacher_check(std::slice::from_ref(&r)).is_empty());
        r.teacher_matched_nll = Some(0.5);
        r.teacher_mismatched_nll = Some(2.0);
        let t = matched_teacher_check(&[r]);
        assert_eq!((t[0].pairs, t[0].matched_nll, t[0].mismatched_nll), (1, 0.5, 2.0));
    }
}
