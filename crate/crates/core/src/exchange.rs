//! Shared experience pool and worker placement.
//!
//! Each step runs `begin_step -> publish* -> close_step -> subscribe*`.
//! Publishing after close or subscribing before it is a phase error, so no
//! reader ever sees a half-written step. Records are stored under
//! `(policy_index, record_id)` and always read back in that order.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thl::Trace;

#[derive(Debug, Error, PartialEq)]
pub enum ExchangeError {
    #[error("phase violation: {0}")]
    Phase(String),
    #[error("record {0:?} already published with different content")]
    Duplicate(RecordId),
    #[error("record {0:?} not found")]
    NotFound(RecordId),
    #[error("record {id:?} is stamped with step {stamped} but step {current} is open")]
    WrongStep { id: RecordId, stamped: u64, current: u64 },
    #[error("invalid device map: {0}")]
    InvalidMap(String),
    #[error("record id field out of range: {0}")]
    IdRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordId(pub u64);

impl RecordId {
    /// Packs (step, policy, prompt, sample) into one id: 24/8/16/16 bits.
    pub fn compose(step: u64, policy: usize, prompt: usize, sample: usize) -> Result<Self, ExchangeError> {
        if step >= 1 << 24 || policy >= 1 << 8 || prompt >= 1 << 16 || sample >= 1 << 16 {
            return Err(ExchangeError::IdRange(format!(
                "step {step}, policy {policy}, prompt {prompt}, sample {sample}"
            )));
        }
        Ok(Self(step << 40 | (policy as u64) << 32 | (prompt as u64) << 16 | sample as u64))
    }

    pub fn step(self) -> u64 {
        self.0 >> 40
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub policy_id: String,
    pub policy_index: usize,
    pub step: u64,
    pub tokenizer_id: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub record_id: RecordId,
    pub prompt_id: usize,
    pub prompt_text: Option<String>,
    pub response_text: Option<String>,
    pub reward: f64,
    pub advantage: Option<f64>,
    pub trace: Option<Trace>,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingRegime {
    Prp,
    Xgrpo,
    Sgt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionFilter {
    pub regime: SharingRegime,
    pub learner: String,
}

impl SubscriptionFilter {
    pub fn new(regime: SharingRegime, learner: impl Into<String>) -> Self {
        Self { regime, learner: learner.into() }
    }

    /// The fields this regime may see, or `None` if the record is withheld.
    pub fn project(&self, r: &ExperienceRecord) -> Option<ExperienceRecord> {
        if r.meta.policy_id == self.learner {
            return None;
        }
        match self.regime {
            SharingRegime::Prp => Some(r.clone()),
            SharingRegime::Xgrpo => Some(ExperienceRecord {
                record_id: r.record_id,
                prompt_id: r.prompt_id,
                prompt_text: None,
                response_text: None,
                reward: r.reward,
                advantage: None,
                trace: None,
                meta: r.meta.clone(),
            }),
            SharingRegime::Sgt => r.meta.success.then(|| ExperienceRecord {
                advantage: None,
                trace: None,
                ..r.clone()
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Publishing(u64),
    Closed(u64),
}

#[derive(Debug)]
struct Inner {
    phase: Phase,
    records: BTreeMap<(usize, RecordId), ExperienceRecord>,
    owners: HashMap<RecordId, usize>,
}

#[derive(Debug)]
pub struct Exchange {
    inner: RwLock<Inner>,
    retention: u64,
}

impl Default for Exchange {
    fn default() -> Self {
        Self::new(1)
    }
}

impl Exchange {
    /// `retention` is the number of steps a record stays visible (at least 1).
    pub fn new(retention: u64) -> Self {
        Self {
            inner: RwLock::new(Inner {
                phase: Phase::Idle,
                records: BTreeMap::new(),
                owners: HashMap::new(),
            }),
            retention: retention.max(1),
        }
    }

    pub fn begin_step(&self, step: u64) -> Result<(), ExchangeError> {
        let mut g = self.inner.write().expect("exchange lock poisoned");
        match g.phase {
            Phase::Idle => {}
            Phase::Closed(prev) if prev < step => {}
            other => return Err(ExchangeError::Phase(format!("cannot begin step {step} from {other:?}"))),
        }
        let keep_from = (step + 1).saturating_sub(self.retention);
        let stale: Vec<(usize, RecordId)> =
            g.records.iter().filter(|(_, r)| r.meta.step < keep_from).map(|(k, _)| *k).collect();
        for k in stale {
            g.records.remove(&k);
            g.owners.remove(&k.1);
        }
        g.phase = Phase::Publishing(step);
        Ok(())
    }

    pub fn publish(&self, step: u64, records: Vec<ExperienceRecord>) -> Result<(), ExchangeError> {
        let mut g = self.inner.write().expect("exchange lock poisoned");
        if g.phase != Phase::Publishing(step) {
            return Err(ExchangeError::Phase(format!("publish for step {step} during {:?}", g.phase)));
        }
        for r in &records {
            if r.meta.step != step {
                return Err(ExchangeError::WrongStep { id: r.record_id, stamped: r.meta.step, current: step });
            }
            if let Some(&owner) = g.owners.get(&r.record_id) {
                if g.records.get(&(owner, r.record_id)) != Some(r) {
                    return Err(ExchangeError::Duplicate(r.record_id));
                }
            }
        }
        for r in records {
            let key = (r.meta.policy_index, r.record_id);
            match g.records.get(&key) {
                Some(existing) if *existing != r => return Err(ExchangeError::Duplicate(r.record_id)),
                Some(_) => {}
                None => {
                    g.owners.insert(r.record_id, r.meta.policy_index);
                    g.records.insert(key, r);
                }
            }
        }
        Ok(())
    }

    pub fn close_step(&self, step: u64) -> Result<(), ExchangeError> {
        let mut g = self.inner.write().expect("exchange lock poisoned");
        if g.phase != Phase::Publishing(step) {
            return Err(ExchangeError::Phase(format!("close of step {step} during {:?}", g.phase)));
        }
        g.phase = Phase::Closed(step);
        Ok(())
    }

    fn read_closed<R>(&self, step: u64, f: impl FnOnce(&Inner) -> R) -> Result<R, ExchangeError> {
        let g = self.inner.read().expect("exchange lock poisoned");
        if g.phase != Phase::Closed(step) {
            return Err(ExchangeError::Phase(format!("read of step {step} during {:?}", g.phase)));
        }
        Ok(f(&g))
    }

    pub fn subscribe(&self, step: u64, filter: &SubscriptionFilter) -> Result<Vec<ExperienceRecord>, ExchangeError> {
        self.read_closed(step, |g| g.records.values().filter_map(|r| filter.project(r)).collect())
    }

    /// Unfiltered view for diagnostics; never handed to a learner.
    pub fn all_records(&self, step: u64) -> Result<Vec<ExperienceRecord>, ExchangeError> {
        self.read_closed(step, |g| g.records.values().cloned().collect())
    }

    pub fn provenance(&self, id: RecordId) -> Result<RecordMeta, ExchangeError> {
        let g = self.inner.read().expect("exchange lock poisoned");
        let owner = g.owners.get(&id).ok_or(ExchangeError::NotFound(id))?;
        Ok(g.records[&(*owner, id)].meta.clone())
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("exchange lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dump_jsonl<W: Write>(&self, step: u64, mut out: W) -> Result<(), std::io::Error> {
        let records = self
            .all_records(step)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?;
        for r in records {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviceMap {
    pub assignments: BTreeMap<String, usize>,
}

impl DeviceMap {
    pub fn slot(&self, policy: &str) -> Option<usize> {
        self.assignments.get(policy).copied()
    }

    pub fn loads(&self, slots: usize) -> Vec<usize> {
        let mut l = vec![0; slots];
        for &s in self.assignments.values() {
            if s < slots {
                l[s] += 1;
            }
        }
        l
    }
}

/// Round-robin placement unless an explicit map is given, in which case it is
/// checked for completeness and used verbatim.
pub fn allocate(policies: &[String], slots: usize, explicit: Option<&DeviceMap>) -> Result<DeviceMap, ExchangeError> {
    if slots == 0 {
        return Err(ExchangeError::InvalidMap("need at least one slot".into()));
    }
    if let Some(map) = explicit {
        for p in policies {
            match map.slot(p) {
                None => return Err(ExchangeError::InvalidMap(format!("policy `{p}` has no slot"))),
                Some(s) if s >= slots => {
                    return Err(ExchangeError::InvalidMap(format!("policy `{p}` pinned to slot {s} of {slots}")))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = map.assignments.keys().find(|k| !policies.contains(k)) {
            return Err(ExchangeError::InvalidMap(format!("unknown policy `{extra}`")));
        }
        return Ok(map.clone());
    }
    Ok(DeviceMap {
        assignments: policies.iter().enumerate().map(|(i, p)| (p.clone(), i % slots)).collect(),
    })
}
