//! Mutual reinforcement learning at desk scale.
//!
//! Heterogeneous tabular softmax policies, each with its own mock tokenizer,
//! train with group-relative policy optimization and share experience through
//! a typed exchange under three regimes: pooled rollouts (`prp`), pooled
//! reward statistics (`xgrpo`) and success-gated transfer (`sgt`). The
//! [`oracle`] module checks the closed-form results the regimes rely on.

pub mod envpolicy;
pub mod exchange;
pub mod grpo;
pub mod harness;
pub mod oracle;
pub mod par;
pub mod regimes;
pub mod textgrid;
pub mod thl;

/// Deterministic seed for a sub-stream, independent of scheduling order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x6d75_7472_6c00_0000);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
