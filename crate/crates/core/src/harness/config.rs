//! Experiment configuration, read from TOML. Unknown keys are rejected.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::envs;
use super::HarnessError;
use crate::derive_seed;
use crate::envpolicy::{BanditEnv, PrefixTreePolicy, Prompt};
use crate::exchange::{allocate, DeviceMap, SharingRegime};
use crate::grpo::{AdvantageMode, ClipConfig, DEFAULT_ADV_EPSILON};
use crate::regimes::{PrpDenominator, SgtConfig, XgrpoConfig};
use crate::textgrid::{TokenizerMode, TokenizerSpec};
use crate::thl::ThlConfig;

/// Environment variable that overrides the root under which relative output
/// directories are created.
pub const OUT_ROOT_ENV: &str = "MUTRL_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Standalone GRPO, no subscription.
    #[default]
    None,
    Prp,
    Xgrpo,
    Sgt,
}

impl Regime {
    pub fn sharing(self) -> Option<SharingRegime> {
        match self {
            Regime::None => None,
            Regime::Prp => Some(SharingRegime::Prp),
            Regime::Xgrpo => Some(SharingRegime::Xgrpo),
            Regime::Sgt => Some(SharingRegime::Sgt),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::Prp => "prp",
            Regime::Xgrpo => "xgrpo",
            Regime::Sgt => "sgt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    pub mode: AdvantageMode,
    pub epsilon: f64,
    /// Center per group, then rescale by the std of the learner's whole
    /// batch. Only meaningful for `none` and `sgt`.
    pub batch_normalize: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self { mode: AdvantageMode::ZNorm, epsilon: DEFAULT_ADV_EPSILON, batch_normalize: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrpSection {
    pub denominator: PrpDenominator,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// One of `complementarity`, `mismatch`, `separable`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default)]
    pub env_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<Prompt>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub id: String,
    pub mode: TokenizerMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merges: Vec<(String, String)>,
    /// Words that become single tokens; expanded into left-to-right merges
    /// appended after `merges`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub whole_words: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
}

impl TokenizerConfig {
    pub fn to_spec(&self) -> TokenizerSpec {
        let mut merges = self.merges.clone();
        for w in &self.whole_words {
            let chars: Vec<char> = w.chars().collect();
            let mut acc = String::new();
            for (k, c) in chars.iter().enumerate() {
                if k > 0 {
                    let m = (acc.clone(), c.to_string());
                    if !merges.contains(&m) {
                        merges.push(m);
                    }
                }
                acc.push(*c);
            }
        }
        let chunk_size = self.chunk_size.unwrap_or(match self.mode {
            TokenizerMode::Adversarial => 2,
            _ => 1,
        });
        TokenizerSpec { id: self.id.clone(), mode: self.mode, merges, chunk_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub id: String,
    pub tokenizer: String,
    /// Index into the environment's initial logit profiles.
    #[serde(default)]
    pub profile: usize,
    #[serde(default)]
    pub init_seed: u64,
    /// Half-width of uniform noise added to the profile logits.
    #[serde(default)]
    pub init_scale: f64,
    /// Explicit initial logits; overrides `profile`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExchangeConfig {
    pub retention: u64,
    /// Write every step's pool to `pool.jsonl`.
    pub dump_pool: bool,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self { retention: 1, dump_pool: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Per-prompt counterfactual rows in `artifacts.jsonl`.
    pub enabled: bool,
    pub ratio_band: (f64, f64),
    /// Word shift used by the broken-alignment control.
    pub broken_shift: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { enabled: true, ratio_band: (0.8, 1.2), broken_shift: 1 }
    }
}

fn default_group_size() -> usize {
    5
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_one() -> usize {
    1
}

fn default_validation_every() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_one")]
    pub workers: usize,
    /// Device slots for the allocation map; defaults to one per policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<usize>,
    /// Validate after every `n`-th step; 0 disables validation.
    #[serde(default = "default_validation_every")]
    pub validation_every: usize,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub advantage: AdvantageConfig,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub prp: PrpSection,
    #[serde(default)]
    pub xgrpo: XgrpoConfig,
    #[serde(default)]
    pub sgt: SgtConfig,
    #[serde(default)]
    pub thl: ThlConfig,
    #[serde(default)]
    pub exchange: ExchangeConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_map: Option<BTreeMap<String, usize>>,
    pub environment: EnvironmentConfig,
    pub tokenizers: Vec<TokenizerConfig>,
    pub policies: Vec<PolicyConfig>,
}

/// A config with every id resolved to concrete objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub env: BanditEnv,
    pub specs: HashMap<String, TokenizerSpec>,
    pub policies: Vec<PrefixTreePolicy>,
    pub device_map: DeviceMap,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| bad(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.group_size < 2 {
            return Err(bad("group_size must be at least 2"));
        }
        if self.steps == 0 {
            return Err(bad("steps must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad("learning_rate must be positive and finite"));
        }
        if !(self.clip.epsilon > 0.0 && self.clip.epsilon < 1.0) {
            return Err(bad("clip.epsilon must lie in (0, 1)"));
        }
        if !(self.clip.kl_coefficient >= 0.0) {
            return Err(bad("clip.kl_coefficient must be non-negative"));
        }
        if !(self.advantage.epsilon > 0.0) {
            return Err(bad("advantage.epsilon must be positive"));
        }
        if self.advantage.batch_normalize && matches!(self.regime, Regime::Prp | Regime::Xgrpo) {
            return Err(bad("advantage.batch_normalize applies to regimes none and sgt only"));
        }
        let (lo, hi) = self.diagnostics.ratio_band;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(bad("diagnostics.ratio_band must bracket 1"));
        }
        if self.exchange.retention == 0 {
            return Err(bad("exchange.retention must be at least 1"));
        }
        self.xgrpo.validate().map_err(|e| bad(e.to_string()))?;
        self.sgt.validate().map_err(|e| bad(e.to_string()))?;
        self.thl.validate().map_err(|e| bad(e.to_string()))?;
        if self.policies.is_empty() {
            return Err(bad("at least one policy is required"));
        }
        if self.regime != Regime::None && self.policies.len() < 2 {
            return Err(bad("a sharing regime needs at least two policies"));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tokenizers {
            if !seen.insert(t.id.as_str()) {
                return Err(bad(format!("duplicate tokenizer id `{}`", t.id)));
            }
            t.to_spec().validate().map_err(|e| bad(e.to_string()))?;
        }
        let mut pids = std::collections::HashSet::new();
        for p in &self.policies {
            if !pids.insert(p.id.as_str()) {
                return Err(bad(format!("duplicate policy id `{}`", p.id)));
            }
            if !seen.contains(p.tokenizer.as_str()) {
                return Err(bad(format!("policy `{}` references unknown tokenizer `{}`", p.id, p.tokenizer)));
            }
            if !(p.init_scale >= 0.0 && p.init_scale.is_finite()) {
                return Err(bad(format!("policy `{}`: init_scale must be non-negative", p.id)));
            }
        }
        match (&self.environment.builtin, &self.environment.prompts) {
            (Some(_), Some(_)) => return Err(bad("environment: give either `builtin` or `prompts`, not both")),
            (None, None) => return Err(bad("environment: `builtin` or `prompts` is required")),
            _ => {}
        }
        Ok(())
    }

    /// Output directory with the root override applied to relative paths.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        let dir = self.output_dir.as_ref()?;
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => Some(PathBuf::from(root).join(dir)),
            _ => Some(dir.clone()),
        }
    }

    pub fn resolve(&self) -> Result<Resolved, HarnessError> {
        self.validate()?;
        let (env, profiles) = match (&self.environment.builtin, &self.environment.prompts) {
            (Some(name), _) => {
                let b = envs::builtin(name, self.environment.env_seed)?;
                (b.env, b.profiles)
            }
            (None, Some(prompts)) => {
                let name = self.environment.name.clone().unwrap_or_else(|| "inline".into());
                let env = BanditEnv::new(name, prompts.clone())?;
                let zeros = env.prompts.iter().map(|p| vec![0.0; p.responses.len()]).collect();
                (env, vec![zeros])
            }
            (None, None) => unreachable!("validated"),
        };
        let specs: HashMap<String, TokenizerSpec> =
            self.tokenizers.iter().map(|t| (t.id.clone(), t.to_spec())).collect();
        let mut policies = Vec::with_capacity(self.policies.len());
        for (i, pc) in self.policies.iter().enumerate() {
            let mut logits = match &pc.logits {
                Some(l) => l.clone(),
                None => profiles
                    .get(pc.profile)
                    .ok_or_else(|| {
                        bad(format!(
                            "policy `{}`: profile {} not offered by environment `{}` ({} profiles)",
                            pc.id,
                            pc.profile,
                            env.name,
                            profiles.len()
                        ))
                    })?
                    .clone(),
            };
            if pc.init_scale > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x1417, i as u64, pc.init_seed]));
                for row in &mut logits {
                    for l in row.iter_mut() {
                        *l += rng.random_range(-pc.init_scale..=pc.init_scale);
                    }
                }
            }
            let spec = specs[&pc.tokenizer].clone();
            policies.push(PrefixTreePolicy::new(pc.id.clone(), spec, &env, logits)?);
        }
        let ids: Vec<String> = self.policies.iter().map(|p| p.id.clone()).collect();
        let slots = self.slots.unwrap_or(ids.len());
        let explicit = self.device_map.as_ref().map(|m| DeviceMap { assignments: m.clone() });
        let device_map = allocate(&ids, slots, explicit.as_ref())?;
        Ok(Resolved { env, specs, policies, device_map })
    }
}
