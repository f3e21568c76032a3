//! Built-in bandit environments with their initial logit profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::envpolicy::{BanditEnv, Prompt};

pub struct Builtin {
    pub env: BanditEnv,
    /// `profiles[k][prompt][response]`: initial logits a policy may start from.
    pub profiles: Vec<Vec<Vec<f64>>>,
}

pub const BUILTINS: [&str; 3] = ["complementarity", "mismatch", "separable"];

pub fn builtin(name: &str, env_seed: u64) -> Result<Builtin, HarnessError> {
    match name {
        "complementarity" => complementarity(),
        "mismatch" => mismatch(env_seed),
        "separable" => separable(),
        other => Err(HarnessError::Config(format!(
            "unknown builtin environment `{other}` (expected one of {})",
            BUILTINS.join(", ")
        ))),
    }
}

pub const COLORS: [&str; 16] = [
    "amber", "azure", "beige", "black", "brown", "coral", "cream", "green", "ivory", "khaki", "lemon", "lilac",
    "mauve", "olive", "peach", "white",
];

pub const COMPLEMENTARITY_PROMPTS: usize = 12;

/// Logit of the correct answer on a prompt the profile finds easy.
pub const EASY_CORRECT: f64 = 3.0;
/// On a hard prompt one wrong answer dominates and the correct one is buried,
/// though still above the answers that belong to other prompts.
pub const HARD_DECOY: f64 = 8.0;
pub const HARD_CORRECT: f64 = -1.0;
pub const HARD_OTHER_ANSWERS: f64 = -4.0;
pub const MODERATE_CORRECT: f64 = 2.0;

/// Twelve prompts, sixteen shared answers, prompt `x` rewarded only for
/// `COLORS[x]`. Profile 0 is easy on prompts 0-3 and hard on 4-7; profile 1
/// is the mirror image. Prompts 8-11 are moderate for both.
pub fn complementarity() -> Result<Builtin, HarnessError> {
    let responses: Vec<String> = COLORS.iter().map(|c| c.to_string()).collect();
    let prompts = (0..COMPLEMENTARITY_PROMPTS)
        .map(|x| Prompt {
            name: format!("item-{x}"),
            text: format!("what color is item {x}?"),
            responses: responses.clone(),
            rewards: (0..COLORS.len()).map(|j| if j == x { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    let env = BanditEnv::new("complementarity", prompts)?;
    let profile = |easy: std::ops::Range<usize>, hard: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        (0..COMPLEMENTARITY_PROMPTS)
            .map(|x| {
                let mut row = vec![0.0; COLORS.len()];
                if easy.contains(&x) {
                    row[x] = EASY_CORRECT;
                } else if hard.contains(&x) {
                    for (j, l) in row.iter_mut().enumerate().take(COMPLEMENTARITY_PROMPTS) {
                        *l = if j == x { HARD_CORRECT } else { HARD_OTHER_ANSWERS };
                    }
                    row[(x + 5) % COLORS.len()] = HARD_DECOY;
                } else {
                    row[x] = MODERATE_CORRECT;
                }
                row
            })
            .collect()
    };
    Ok(Builtin { env, profiles: vec![profile(0..4, 4..8), profile(4..8, 0..4)] })
}

pub const MISMATCH_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789+-";
pub const MISMATCH_PROMPTS: usize = 8;
pub const MISMATCH_SHARED: f64 = 1.0;
pub const MISMATCH_PER_PROMPT: f64 = 1.0;

/// Responses `answer X` over 64 single-character symbols. The single profile
/// is a shared logit vector plus an equally wide per-prompt draw, so logits on
/// one prompt say something, but not much, about another.
pub fn mismatch(env_seed: u64) -> Result<Builtin, HarnessError> {
    let responses: Vec<String> = MISMATCH_SYMBOLS.chars().map(|c| format!("answer {c}")).collect();
    let n = responses.len();
    let prompts = (0..MISMATCH_PROMPTS)
        .map(|p| Prompt {
            name: format!("q-{p}"),
            text: format!("question {p}"),
            responses: responses.clone(),
            rewards: (0..n).map(|j| if j == (7 * p + 3) % n { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    let env = BanditEnv::new("mismatch", prompts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
    let shared: Vec<f64> = (0..n).map(|_| rng.random_range(-MISMATCH_SHARED..MISMATCH_SHARED)).collect();
    let profile = (0..MISMATCH_PROMPTS)
        .map(|_| shared.iter().map(|g| g + rng.random_range(-MISMATCH_PER_PROMPT..MISMATCH_PER_PROMPT)).collect())
        .collect();
    Ok(Builtin { env, profiles: vec![profile] })
}

/// Four prompts with four answers each and a different correct answer per
/// prompt; a uniform start. Plain GRPO solves it.
pub fn separable() -> Result<Builtin, HarnessError> {
    let responses: Vec<String> = ["yes", "no", "maybe", "later"].iter().map(|s| s.to_string()).collect();
    let prompts = (0..4)
        .map(|p| Prompt {
            name: format!("s-{p}"),
            text: format!("pick {p}"),
            responses: responses.clone(),
            rewards: (0..4).map(|j| if j == p { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    let env = BanditEnv::new("separable", prompts)?;
    let zeros = vec![vec![0.0; 4]; 4];
    Ok(Builtin { env, profiles: vec![zeros] })
}
