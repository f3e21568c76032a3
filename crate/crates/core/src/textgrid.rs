//! Mock tokenizers and the word-span coordinate system.
//!
//! Three tokenizer families produce genuinely different segmentations of the
//! same string:
//!
//! - `WhitespaceSubword`: whitespace runs are single tokens; each word starts
//!   as characters and merge rules are applied greedily in rank order. Tokens
//!   never cross a word boundary.
//! - `Character`: one token per code point.
//! - `Adversarial`: fixed-width character chunks that ignore word boundaries,
//!   so tokens may straddle words. Only used to exercise the residual path.
//!
//! All offsets are code-point indices, not byte offsets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("tokenizer `{0}`: chunk_size must be positive")]
    ZeroChunk(String),
    #[error("tokenizer `{id}`: merge rule {index} has an empty or whitespace-bearing side")]
    BadMerge { id: String, index: usize },
    #[error("tokenizer id must not be empty")]
    EmptyId,
}

/// Half-open code-point interval `[start, end)` over a text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn overlap(&self, start: usize, end: usize) -> usize {
        let lo = self.start.max(start);
        let hi = self.end.min(end);
        hi.saturating_sub(lo)
    }
}

/// How a text is cut into alignment units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptMode {
    /// Character spans if any CJK code point is present, word spans otherwise.
    #[default]
    Auto,
    Word,
    Char,
}

/// CJK Unified Ideographs, Hiragana, Katakana and Hangul Syllables.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3040..=0x309F | 0x30A0..=0x30FF | 0xAC00..=0xD7AF)
}

pub fn contains_cjk(text: &str) -> bool {
    text.chars().any(is_cjk)
}

/// Resolve `Auto` against a concrete text.
pub fn resolve_mode(text: &str, mode: ScriptMode) -> ScriptMode {
    match mode {
        ScriptMode::Auto if contains_cjk(text) => ScriptMode::Char,
        ScriptMode::Auto => ScriptMode::Word,
        other => other,
    }
}

/// Word spans of `text`: maximal non-whitespace runs in word mode, one span
/// per non-whitespace code point in char mode.
pub fn word_spans(text: &str, mode: ScriptMode) -> Vec<WordSpan> {
    let mode = resolve_mode(text, mode);
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_whitespace() {
            if let Some(s) = run_start.take() {
                spans.push(WordSpan { start: s, end: i });
            }
            continue;
        }
        match mode {
            ScriptMode::Char => spans.push(WordSpan { start: i, end: i + 1 }),
            _ => {
                if run_start.is_none() {
                    run_start = Some(i);
                }
            }
        }
    }
    if let Some(s) = run_start {
        spans.push(WordSpan { start: s, end: n });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    WhitespaceSubword,
    Character,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    pub id: String,
    pub mode: TokenizerMode,
    #[serde(default)]
    pub merges: Vec<(String, String)>,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_chunk() -> usize {
    2
}

impl TokenizerSpec {
    pub fn character(id: impl Into<String>) -> Self {
        Self { id: id.into(), mode: TokenizerMode::Character, merges: Vec::new(), chunk_size: 1 }
    }

    pub fn subword<I, A, B>(id: impl Into<String>, merges: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            id: id.into(),
            mode: TokenizerMode::WhitespaceSubword,
            merges: merges.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
            chunk_size: 1,
        }
    }

    pub fn adversarial(id: impl Into<String>, chunk_size: usize) -> Self {
        Self { id: id.into(), mode: TokenizerMode::Adversarial, merges: Vec::new(), chunk_size }
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.id.is_empty() {
            return Err(TokenizerError::EmptyId);
        }
        if self.mode == TokenizerMode::Adversarial && self.chunk_size == 0 {
            return Err(TokenizerError::ZeroChunk(self.id.clone()));
        }
        for (index, (a, b)) in self.merges.iter().enumerate() {
            let bad = |s: &String| s.is_empty() || s.chars().any(char::is_whitespace);
            if bad(a) || bad(b) {
                return Err(TokenizerError::BadMerge { id: self.id.clone(), index });
            }
        }
        Ok(())
    }

    /// Whether every token lies inside one word span or inside whitespace.
    pub fn respects_word_boundaries(&self) -> bool {
        !matches!(self.mode, TokenizerMode::Adversarial)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    pub tokenizer_id: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn reconstruct(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Token strings only; two responses are the same path in a prefix tree
    /// iff these agree.
    pub fn keys(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }
}

pub fn tokenize(spec: &TokenizerSpec, text: &str) -> TokenSeq {
    let chars: Vec<char> = text.chars().collect();
    TokenSeq { tokens: tokenize_chars(spec, &chars, 0), tokenizer_id: spec.id.clone() }
}

fn tokenize_chars(spec: &TokenizerSpec, chars: &[char], offset: usize) -> Vec<Token> {
    let mut out = Vec::new();
    match spec.mode {
        TokenizerMode::Character => {
            for (i, c) in chars.iter().enumerate() {
                out.push(Token { text: c.to_string(), start: offset + i, end: offset + i + 1 });
            }
        }
        TokenizerMode::Adversarial => {
            let width = spec.chunk_size.max(1);
            for (k, chunk) in chars.chunks(width).enumerate() {
                let start = offset + k * width;
                out.push(Token { text: chunk.iter().collect(), start, end: start + chunk.len() });
            }
        }
        TokenizerMode::WhitespaceSubword => {
            let mut i = 0;
            while i < chars.len() {
                let ws = chars[i].is_whitespace();
                let mut j = i;
                while j < chars.len() && chars[j].is_whitespace() == ws {
                    j += 1;
                }
                if ws {
                    out.push(Token {
                        text: chars[i..j].iter().collect(),
                        start: offset + i,
                        end: offset + j,
                    });
                } else {
                    let mut pos = offset + i;
                    for piece in apply_merges(&chars[i..j], &spec.merges) {
                        let n = piece.chars().count();
                        out.push(Token { text: piece, start: pos, end: pos + n });
                        pos += n;
                    }
                }
                i = j;
            }
        }
    }
    out
}

fn apply_merges(word: &[char], merges: &[(String, String)]) -> Vec<String> {
    let mut symbols: Vec<String> = word.iter().map(|c| c.to_string()).collect();
    for (a, b) in merges {
        let mut i = 0;
        while i + 1 < symbols.len() {
            if symbols[i] == *a && symbols[i + 1] == *b {
                let right = symbols.remove(i + 1);
                symbols[i].push_str(&right);
            }
            i += 1;
        }
    }
    symbols
}

/// Per-token word index, `None` for leading delimiters.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WordMap {
    pub entries: Vec<Option<usize>>,
}

impl WordMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.entries.get(i).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordMapped {
    /// Full tokenization, truncated to the prefix the segment rebuild agrees on.
    pub tokens: TokenSeq,
    pub word_map: WordMap,
    pub spans: Vec<WordSpan>,
    /// Length of the untruncated full tokenization.
    pub full_len: usize,
    pub truncated: bool,
}

pub fn per_token_word_map(text: &str, spec: &TokenizerSpec) -> WordMapped {
    per_token_word_map_with(text, spec, ScriptMode::Auto)
}

/// Segment-by-segment word map. Each segment runs from the previous span end
/// through the current span end, so inter-word whitespace attaches to the
/// following word. Tokens covering leading whitespace map to `None`. When the
/// rebuilt sequence disagrees with the full tokenization, both are cut to
/// their common prefix.
pub fn per_token_word_map_with(text: &str, spec: &TokenizerSpec, mode: ScriptMode) -> WordMapped {
    let chars: Vec<char> = text.chars().collect();
    let full = tokenize_chars(spec, &chars, 0);
    let spans = word_spans(text, mode);

    let mut built: Vec<Token> = Vec::with_capacity(full.len());
    let mut map: Vec<Option<usize>> = Vec::with_capacity(full.len());
    let mut prev_end = 0;
    for (w, span) in spans.iter().enumerate() {
        let seg = tokenize_chars(spec, &chars[prev_end..span.end], prev_end);
        if prev_end == 0 && span.start > 0 {
            let n_lead = tokenize_chars(spec, &chars[..span.start], 0).len().min(seg.len());
            map.extend(std::iter::repeat_n(None, n_lead));
            map.extend(std::iter::repeat_n(Some(w), seg.len() - n_lead));
        } else {
            map.extend(std::iter::repeat_n(Some(w), seg.len()));
        }
        built.extend(seg);
        prev_end = span.end;
    }

    let common = built.iter().zip(full.iter()).take_while(|(a, b)| a == b).count();
    let truncated = common != built.len() || common != full.len();
    let full_len = full.len();
    let mut tokens = full;
    tokens.truncate(common);
    map.truncate(common);
    WordMapped {
        tokens: TokenSeq { tokens, tokenizer_id: spec.id.clone() },
        word_map: WordMap { entries: map },
        spans,
        full_len,
        truncated,
    }
}
