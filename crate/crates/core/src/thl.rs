//! Cross-tokenizer trace alignment.
//!
//! A source trace is summed per word span; each word's mass is spread
//! uniformly over the target tokens of the same word. Whatever cannot be
//! placed (source tokens with no word, words with no target tokens) is
//! accounted for in a [`ResidualReport`] so that
//! `source_logsum - aligned_logsum == residual` by construction.
//!
//! Trace masks are position-aligned with the token sequence they describe:
//! entry `j` of a trace refers to token `j` of `tokenize(spec, text)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envpolicy::{PolicyError, PrefixTreePolicy};
use crate::textgrid::{
    per_token_word_map_with, tokenize, word_spans, ScriptMode, TokenSeq, TokenizerSpec, WordMapped,
};

pub const DEFAULT_CLIP_BOUND: f64 = 50.0;
pub const DEFAULT_IGNORE_VALUE: f64 = -1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum ThlError {
    #[error("{what}: expected length {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("trace was produced on grid `{trace}` but spec `{spec}` was supplied")]
    GridMismatch { trace: String, spec: String },
    #[error("non-finite source log-probability at position {0}")]
    NonFinite(usize),
    #[error("invalid alignment config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub log_probs: Vec<f64>,
    pub response_mask: Vec<bool>,
    pub tokenizer_id: String,
}

impl Trace {
    pub fn new(log_probs: Vec<f64>, tokenizer_id: impl Into<String>) -> Self {
        let response_mask = vec![true; log_probs.len()];
        Self { log_probs, response_mask, tokenizer_id: tokenizer_id.into() }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn masked_sum(&self) -> f64 {
        self.log_probs.iter().zip(&self.response_mask).filter(|(_, &m)| m).map(|(v, _)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedTrace {
    pub values: Vec<f64>,
    pub active_mask: Vec<bool>,
    pub source_tokenizer_id: String,
    pub target_tokenizer_id: String,
}

impl AlignedTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn active_sum(&self) -> f64 {
        self.values.iter().zip(&self.active_mask).filter(|(_, &m)| m).map(|(v, _)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub residual: f64,
    pub residual_magnitude: f64,
    pub mismatch_count: usize,
    pub bound: f64,
    pub boundary_token_mass: f64,
    pub uncovered_word_mass: f64,
    pub source_logsum: f64,
    pub aligned_logsum: f64,
}

impl ResidualReport {
    pub fn within_bound(&self) -> bool {
        self.residual_magnitude <= self.bound * (1.0 + 1e-12) + 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThlConfig {
    pub clip_bound: f64,
    pub ignore_value: f64,
    pub script_mode: ScriptMode,
}

impl Default for ThlConfig {
    fn default() -> Self {
        Self {
            clip_bound: DEFAULT_CLIP_BOUND,
            ignore_value: DEFAULT_IGNORE_VALUE,
            script_mode: ScriptMode::Auto,
        }
    }
}

impl ThlConfig {
    pub fn validate(&self) -> Result<(), ThlError> {
        if !(self.clip_bound.is_finite() && self.clip_bound > 0.0) {
            return Err(ThlError::Config("clip_bound must be positive and finite".into()));
        }
        if !(self.ignore_value < -self.clip_bound - 1.0) {
            return Err(ThlError::Config("ignore_value must lie below -clip_bound - 1".into()));
        }
        Ok(())
    }
}

/// Everything one alignment pass produces, including per-word totals.
#[derive(Debug, Clone)]
pub struct AlignmentPass {
    pub aligned: AlignedTrace,
    pub report: ResidualReport,
    /// Source mass per word, `None` when no unmasked source token maps to it.
    pub source_word_mass: Vec<Option<f64>>,
    /// Aligned mass per word, read back through the uncorrupted target map.
    pub aligned_word_mass: Vec<f64>,
    pub target_map: WordMapped,
}

pub fn word_align_log_probs(
    text: &str,
    source: &Trace,
    src_spec: &TokenizerSpec,
    tgt_spec: &TokenizerSpec,
    tgt_response_mask: &[bool],
    cfg: &ThlConfig,
) -> Result<AlignedTrace, ThlError> {
    align_pass(text, source, src_spec, tgt_spec, tgt_response_mask, cfg, 0).map(|p| p.aligned)
}

pub fn residual_report(
    text: &str,
    source: &Trace,
    src_spec: &TokenizerSpec,
    tgt_spec: &TokenizerSpec,
    tgt_response_mask: &[bool],
    cfg: &ThlConfig,
) -> Result<ResidualReport, ThlError> {
    align_pass(text, source, src_spec, tgt_spec, tgt_response_mask, cfg, 0).map(|p| p.report)
}

/// Alignment with a deliberately corrupted word map: target tokens of word
/// `w` receive the mass of word `(w + shift) mod W`. Used as a control.
pub fn broken_align_log_probs(
    text: &str,
    source: &Trace,
    src_spec: &TokenizerSpec,
    tgt_spec: &TokenizerSpec,
    tgt_response_mask: &[bool],
    cfg: &ThlConfig,
    shift: usize,
) -> Result<AlignedTrace, ThlError> {
    align_pass(text, source, src_spec, tgt_spec, tgt_response_mask, cfg, shift).map(|p| p.aligned)
}

pub fn retokenize_response(text: &str, tgt_spec: &TokenizerSpec) -> TokenSeq {
    tokenize(tgt_spec, text)
}

pub fn align_pass(
    text: &str,
    source: &Trace,
    src_spec: &TokenizerSpec,
    tgt_spec: &TokenizerSpec,
    tgt_response_mask: &[bool],
    cfg: &ThlConfig,
    shift: usize,
) -> Result<AlignmentPass, ThlError> {
    cfg.validate()?;
    if source.tokenizer_id != src_spec.id {
        return Err(ThlError::GridMismatch {
            trace: source.tokenizer_id.clone(),
            spec: src_spec.id.clone(),
        });
    }
    if source.response_mask.len() != source.log_probs.len() {
        return Err(ThlError::Shape {
            what: "source response mask",
            expected: source.log_probs.len(),
            got: source.response_mask.len(),
        });
    }
    let src_map = per_token_word_map_with(text, src_spec, cfg.script_mode);
    let tgt_map = per_token_word_map_with(text, tgt_spec, cfg.script_mode);
    if source.log_probs.len() != src_map.full_len {
        return Err(ThlError::Shape {
            what: "source trace",
            expected: src_map.full_len,
            got: source.log_probs.len(),
        });
    }
    if tgt_response_mask.len() != tgt_map.full_len {
        return Err(ThlError::Shape {
            what: "target response mask",
            expected: tgt_map.full_len,
            got: tgt_response_mask.len(),
        });
    }

    let n_words = src_map.spans.len();
    let b = cfg.clip_bound;
    let mut word_mass = vec![0.0; n_words];
    let mut word_src_count = vec![0usize; n_words];
    let mut boundary_mass = 0.0;
    let mut boundary_count = 0usize;
    let mut source_logsum = 0.0;
    for (j, (&lp, &on)) in source.log_probs.iter().zip(&source.response_mask).enumerate() {
        if !on {
            continue;
        }
        if lp.is_nan() {
            return Err(ThlError::NonFinite(j));
        }
        let v = lp.clamp(-b, b);
        source_logsum += v;
        match src_map.word_map.get(j) {
            Some(w) => {
                word_mass[w] += v;
                word_src_count[w] += 1;
            }
            None => {
                boundary_mass += v;
                boundary_count += 1;
            }
        }
    }

    let donor = |w: usize| if n_words == 0 { w } else { (w + shift) % n_words };
    let mut tgt_count = vec![0usize; n_words];
    for j in 0..tgt_map.word_map.len() {
        if tgt_response_mask[j] {
            if let Some(w) = tgt_map.word_map.get(j) {
                tgt_count[donor(w)] += 1;
            }
        }
    }

    let tgt_len = tgt_map.full_len;
    let mut values = vec![cfg.ignore_value; tgt_len];
    let mut active = vec![false; tgt_len];
    let mut aligned_word_mass = vec![0.0; n_words];
    for j in 0..tgt_map.word_map.len() {
        if !tgt_response_mask[j] {
            continue;
        }
        let Some(w) = tgt_map.word_map.get(j) else { continue };
        let d = donor(w);
        if word_src_count[d] > 0 && tgt_count[d] > 0 {
            let v = word_mass[d] / tgt_count[d] as f64;
            values[j] = v;
            active[j] = true;
            aligned_word_mass[w] += v;
        }
    }

    let mut uncovered_mass = 0.0;
    let mut uncovered_count = 0usize;
    for w in 0..n_words {
        if word_src_count[w] > 0 && tgt_count[w] == 0 {
            uncovered_mass += word_mass[w];
            uncovered_count += word_src_count[w];
        }
    }
    let aligned_logsum: f64 =
        values.iter().zip(&active).filter(|(_, &a)| a).map(|(v, _)| v).sum();
    let residual = boundary_mass + uncovered_mass;
    let mismatch_count = boundary_count + uncovered_count;
    let report = ResidualReport {
        residual,
        residual_magnitude: residual.abs(),
        mismatch_count,
        bound: b * mismatch_count as f64,
        boundary_token_mass: boundary_mass,
        uncovered_word_mass: uncovered_mass,
        source_logsum,
        aligned_logsum,
    };
    let source_word_mass = (0..n_words)
        .map(|w| (word_src_count[w] > 0).then_some(word_mass[w]))
        .collect();
    Ok(AlignmentPass {
        aligned: AlignedTrace {
            values,
            active_mask: active,
            source_tokenizer_id: src_spec.id.clone(),
            target_tokenizer_id: tgt_spec.id.clone(),
        },
        report,
        source_word_mass,
        aligned_word_mass,
        target_map: tgt_map,
    })
}

/// Fallback for tokens that straddle words: each unmasked source token's value
/// is split over its non-whitespace characters, and every target token
/// collects the share of the characters it covers.
pub fn char_overlap_align_log_probs(
    text: &str,
    source: &Trace,
    src_spec: &TokenizerSpec,
    tgt_spec: &TokenizerSpec,
    tgt_response_mask: &[bool],
    cfg: &ThlConfig,
) -> Result<AlignedTrace, ThlError> {
    cfg.validate()?;
    let chars: Vec<char> = text.chars().collect();
    let src = tokenize(src_spec, text);
    let tgt = tokenize(tgt_spec, text);
    if source.log_probs.len() != src.len() || source.response_mask.len() != src.len() {
        return Err(ThlError::Shape {
            what: "source trace",
            expected: src.len(),
            got: source.log_probs.len(),
        });
    }
    if tgt_response_mask.len() != tgt.len() {
        return Err(ThlError::Shape {
            what: "target response mask",
            expected: tgt.len(),
            got: tgt_response_mask.len(),
        });
    }
    let mut per_char: Vec<Option<f64>> = vec![None; chars.len()];
    for (j, tok) in src.tokens.iter().enumerate() {
        if !source.response_mask[j] {
            continue;
        }
        let lp = source.log_probs[j];
        if lp.is_nan() {
            return Err(ThlError::NonFinite(j));
        }
        let v = lp.clamp(-cfg.clip_bound, cfg.clip_bound);
        let n = (tok.start..tok.end).filter(|&c| !chars[c].is_whitespace()).count();
        if n == 0 {
            continue;
        }
        for c in tok.start..tok.end {
            if !chars[c].is_whitespace() {
                per_char[c] = Some(v / n as f64);
            }
        }
    }
    let mut values = vec![cfg.ignore_value; tgt.len()];
    let mut active = vec![false; tgt.len()];
    for (j, tok) in tgt.tokens.iter().enumerate() {
        if !tgt_response_mask[j] {
            continue;
        }
        let mut sum = 0.0;
        let mut hit = false;
        for share in per_char[tok.start..tok.end].iter().flatten() {
            sum += share;
            hit = true;
        }
        if hit {
            values[j] = sum;
            active[j] = true;
        }
    }
    Ok(AlignedTrace {
        values,
        active_mask: active,
        source_tokenizer_id: src_spec.id.clone(),
        target_tokenizer_id: tgt_spec.id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub rho: f64,
    pub rho_tilde: f64,
    pub delta: f64,
    pub within_envelope: bool,
}

pub fn ratio_envelope_check(
    numerator_logsum: f64,
    ideal_denominator_logsum: f64,
    aligned_denominator_logsum: f64,
) -> Envelope {
    let log_rho = numerator_logsum - ideal_denominator_logsum;
    let log_rho_tilde = numerator_logsum - aligned_denominator_logsum;
    let delta = (ideal_denominator_logsum - aligned_denominator_logsum).abs();
    let tol = 1e-12 * log_rho.abs().max(log_rho_tilde.abs()).max(1.0);
    let within = log_rho_tilde >= log_rho - delta - tol && log_rho_tilde <= log_rho + delta + tol;
    Envelope { rho: log_rho.exp(), rho_tilde: log_rho_tilde.exp(), delta, within_envelope: within }
}

/// Relative error of per-unit mass between a source trace and an aligned
/// trace, with units given by `word_spans(text, unit_mode)`. Tokens are
/// assigned to the unit containing their first non-whitespace character.
pub fn unit_relative_mae(
    text: &str,
    source: &Trace,
    src_spec: &TokenizerSpec,
    aligned: &AlignedTrace,
    tgt_spec: &TokenizerSpec,
    unit_mode: ScriptMode,
) -> f64 {
    let chars: Vec<char> = text.chars().collect();
    let units = word_spans(text, unit_mode);
    let mut owner = vec![None; chars.len()];
    for (u, s) in units.iter().enumerate() {
        for slot in &mut owner[s.start..s.end] {
            *slot = Some(u);
        }
    }
    let unit_of = |start: usize, end: usize| (start..end).find_map(|c| owner[c]);
    let mut src_mass = vec![0.0; units.len()];
    let mut src_seen = vec![false; units.len()];
    for (j, tok) in tokenize(src_spec, text).tokens.iter().enumerate() {
        if source.response_mask.get(j).copied().unwrap_or(false) {
            if let Some(u) = unit_of(tok.start, tok.end) {
                src_mass[u] += source.log_probs[j];
                src_seen[u] = true;
            }
        }
    }
    let mut tgt_mass = vec![0.0; units.len()];
    for (j, tok) in tokenize(tgt_spec, text).tokens.iter().enumerate() {
        if aligned.active_mask.get(j).copied().unwrap_or(false) {
            if let Some(u) = unit_of(tok.start, tok.end) {
                tgt_mass[u] += aligned.values[j];
            }
        }
    }
    let (mut err, mut scale) = (0.0, 0.0);
    for u in 0..units.len() {
        if src_seen[u] {
            err += (tgt_mass[u] - src_mass[u]).abs();
            scale += src_mass[u].abs();
        }
    }
    ratio_or_zero(err, scale)
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    /// Inclusive upper bound on target token count; `None` collects longer texts.
    pub bucket: Option<usize>,
    pub texts: usize,
    pub words: usize,
    pub thl_rel_mae: f64,
    pub baseline_rel_mae: f64,
    pub prefix_leak_max: f64,
    pub residual_max: f64,
}

#[derive(Default)]
struct Acc {
    texts: usize,
    words: usize,
    thl_err: f64,
    base_err: f64,
    scale: f64,
    leak: f64,
    residual: f64,
}

/// Per-word mass error of THL versus a position-copy baseline, bucketed by
/// target token count. The baseline copies source values index by index,
/// truncating or padding with zeros.
pub fn alignment_error_stats(
    corpus: &[(usize, String)],
    src_spec: &TokenizerSpec,
    tgt_spec: &TokenizerSpec,
    policy: &PrefixTreePolicy,
    length_buckets: &[usize],
    cfg: &ThlConfig,
) -> Result<Vec<BucketStats>, ThlError> {
    let mut bounds: Vec<usize> = length_buckets.to_vec();
    bounds.sort_unstable();
    bounds.dedup();
    let mut accs: Vec<Acc> = (0..=bounds.len()).map(|_| Acc::default()).collect();
    for (prompt, text) in corpus {
        let source = policy.trace_for_text(*prompt, text, src_spec)?;
        let tgt_len = tokenize(tgt_spec, text).len();
        let mask = vec![true; tgt_len];
        let pass = align_pass(text, &source, src_spec, tgt_spec, &mask, cfg, 0)?;

        let mut baseline_word = vec![0.0; pass.source_word_mass.len()];
        for j in 0..pass.target_map.word_map.len() {
            if let Some(w) = pass.target_map.word_map.get(j) {
                baseline_word[w] += source.log_probs.get(j).copied().unwrap_or(0.0);
            }
        }
        let slot = bounds.iter().position(|&b| tgt_len <= b).unwrap_or(bounds.len());
        let acc = &mut accs[slot];
        acc.texts += 1;
        acc.residual = acc.residual.max(pass.report.residual_magnitude);
        let mut prefix = 0.0f64;
        for (w, z) in pass.source_word_mass.iter().enumerate() {
            let Some(z) = *z else { continue };
            let d = pass.aligned_word_mass[w] - z;
            acc.words += 1;
            acc.thl_err += d.abs();
            acc.base_err += (baseline_word[w] - z).abs();
            acc.scale += z.abs();
            prefix += d;
            acc.leak = acc.leak.max(prefix.abs());
        }
    }
    Ok(accs
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.texts > 0)
        .map(|(i, a)| BucketStats {
            bucket: bounds.get(i).copied(),
            texts: a.texts,
            words: a.words,
            thl_rel_mae: ratio_or_zero(a.thl_err, a.scale),
            baseline_rel_mae: ratio_or_zero(a.base_err, a.scale),
            prefix_leak_max: a.leak,
            residual_max: a.residual,
        })
        .collect())
}
