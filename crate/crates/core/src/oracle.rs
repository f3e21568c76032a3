//! Brute-force and closed-form checks on raw probability vectors.
//!
//! Nothing here depends on the regimes; every quantity is computed from
//! action probabilities, rewards and tabular softmax scores `e_y - pi`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::derive_seed;
use crate::par::Executor;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("coverage violated at action {0}: pi > 0 but mu = 0")]
    Coverage(usize),
    #[error("eta must lie in (0, 1/3], got {0}")]
    EtaRange(f64),
    #[error("invalid instance: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BanditInstance {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
}

impl BanditInstance {
    pub fn n(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.pi.len();
        if self.mu.len() != n || self.rewards.len() != n || n == 0 {
            return Err(OracleError::Invalid("length mismatch".into()));
        }
        for v in [&self.pi, &self.mu] {
            if v.iter().any(|p| *p < 0.0) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(OracleError::Invalid("not a probability vector".into()));
            }
        }
        Ok(())
    }

    /// Random instance with all probabilities bounded away from zero.
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let pi = draw();
        let mu = draw();
        let rewards = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let baseline = rng.random_range(-0.5..1.5);
        Self { pi, mu, rewards, baseline }
    }

    pub fn advantages(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r - self.baseline).collect()
    }
}

pub fn score(pi: &[f64], y: usize) -> Vec<f64> {
    pi.iter().enumerate().map(|(j, p)| if j == y { 1.0 - p } else { -p }).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnumGradient {
    pub on_policy: Vec<f64>,
    pub importance_weighted: Vec<f64>,
    pub max_abs_diff: f64,
}

/// `E_pi[A(y) s(y)]` and `E_mu[rho(y) A(y) s(y)]` by summation.
pub fn enum_policy_gradient(
    inst: &BanditInstance,
    advantage: impl Fn(usize) -> f64,
) -> Result<EnumGradient, OracleError> {
    let n = inst.n();
    let mut on = vec![0.0; n];
    let mut is = vec![0.0; n];
    for y in 0..n {
        if inst.pi[y] > 0.0 && inst.mu[y] == 0.0 {
            return Err(OracleError::Coverage(y));
        }
        let s = score(&inst.pi, y);
        let a = advantage(y);
        axpy(&mut on, inst.pi[y] * a, &s);
        if inst.mu[y] > 0.0 {
            let rho = inst.pi[y] / inst.mu[y];
            axpy(&mut is, inst.mu[y] * rho * a, &s);
        }
    }
    let max_abs_diff = on.iter().zip(&is).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(EnumGradient { on_policy: on, importance_weighted: is, max_abs_diff })
}

pub fn chi2_divergence(pi: &[f64], mu: &[f64]) -> Result<f64, OracleError> {
    let mut s = 0.0;
    for (y, (&p, &m)) in pi.iter().zip(mu).enumerate() {
        if p > 0.0 {
            if m == 0.0 {
                return Err(OracleError::Coverage(y));
            }
            s += p * p / m;
        }
    }
    Ok(s - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AntiAlign {
    pub eta: f64,
    pub g_on: Vec<f64>,
    pub g_naive: Vec<f64>,
    pub dot: f64,
    pub polynomial: f64,
    pub chi2: f64,
    pub chi2_closed_form: f64,
}

pub fn anti_align_polynomial(eta: f64) -> f64 {
    2.0 / 3.0 * eta.powi(3) - eta * eta + 5.0 / 9.0 * eta - 2.0 / 81.0
}

/// Three actions, reward on the first; the learner is `(1/3, 2/3 - eta, eta)`
/// and the peer behavior `(eta, eta, 1 - 2 eta)`; advantages use the
/// learner's mean reward as baseline.
pub fn anti_align_instance(eta: f64) -> Result<AntiAlign, OracleError> {
    if !(eta > 0.0 && eta <= 1.0 / 3.0) {
        return Err(OracleError::EtaRange(eta));
    }
    let pi = vec![1.0 / 3.0, 2.0 / 3.0 - eta, eta];
    let mu = vec![eta, eta, 1.0 - 2.0 * eta];
    let rewards = [1.0, 0.0, 0.0];
    let b = dot(&pi, &rewards);
    let adv: Vec<f64> = rewards.iter().map(|r| r - b).collect();
    let mut g_on = vec![0.0; 3];
    let mut g_naive = vec![0.0; 3];
    for y in 0..3 {
        let s = score(&pi, y);
        axpy(&mut g_on, pi[y] * adv[y], &s);
        axpy(&mut g_naive, mu[y] * adv[y], &s);
    }
    let chi2 = chi2_divergence(&pi, &mu)?;
    let chi2_closed_form = (1.0 / 9.0) / eta + (2.0 / 3.0 - eta).powi(2) / eta + eta * eta / (1.0 - 2.0 * eta) - 1.0;
    Ok(AntiAlign {
        eta,
        dot: dot(&g_on, &g_naive),
        polynomial: anti_align_polynomial(eta),
        g_on,
        g_naive,
        chi2,
        chi2_closed_form,
    })
}

pub fn gate_probability(p_n: f64, peers: &[f64], k: u32) -> f64 {
    let q: f64 = peers.iter().map(|p| (1.0 - p).powi(k as i32)).product();
    (1.0 - p_n).powi(k as i32) * (1.0 - q)
}

pub fn gate_prob_derivative(p_n: f64, peers: &[f64], k: u32) -> f64 {
    let q: f64 = peers.iter().map(|p| (1.0 - p).powi(k as i32)).product();
    -(k as f64) * (1.0 - p_n).powi(k as i32 - 1) * (1.0 - q)
}

/// Sums the probability of every success/failure pattern of the `K` rollouts
/// of the learner and each peer on which the gate fires.
pub fn gate_probability_enumerated(p_n: f64, peers: &[f64], k: u32) -> f64 {
    let probs: Vec<f64> = std::iter::once(p_n).chain(peers.iter().copied()).collect();
    let bits = k as usize * probs.len();
    assert!(bits <= 24, "enumeration limited to 2^24 patterns");
    let mut total = 0.0;
    for pattern in 0u64..(1u64 << bits) {
        let mut weight = 1.0;
        let mut learner_success = false;
        let mut peer_success = false;
        for (m, &p) in probs.iter().enumerate() {
            for i in 0..k as usize {
                let success = pattern >> (m * k as usize + i) & 1 == 1;
                weight *= if success { p } else { 1.0 - p };
                if success {
                    if m == 0 {
                        learner_success = true;
                    } else {
                        peer_success = true;
                    }
                }
            }
        }
        if !learner_success && peer_success {
            total += weight;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarlo {
    pub estimate: f64,
    pub sigma: f64,
    pub samples: u64,
}

impl MonteCarlo {
    pub fn within(&self, truth: f64, n_sigma: f64) -> bool {
        (self.estimate - truth).abs() <= n_sigma * self.sigma.max(1e-300)
    }
}

/// Simulated gate rate. Samples are split into fixed chunks with their own
/// seeds, so the estimate does not depend on the worker count.
pub fn gate_probability_mc(p_n: f64, peers: &[f64], k: u32, samples: u64, seed: u64, exec: &Executor) -> MonteCarlo {
    const CHUNK: u64 = 8192;
    let chunks = samples.div_ceil(CHUNK);
    let counts = exec.map_range(chunks as usize, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        let n = CHUNK.min(samples - c as u64 * CHUNK);
        let mut hits = 0u64;
        for _ in 0..n {
            let learner_fail = (0..k).all(|_| !rng.random_bool(p_n));
            let mut peer_success = false;
            for &p in peers {
                for _ in 0..k {
                    peer_success |= rng.random_bool(p);
                }
            }
            if learner_fail && peer_success {
                hits += 1;
            }
        }
        hits
    });
    let hits: u64 = counts.iter().sum();
    let est = hits as f64 / samples as f64;
    let truth_free_sigma = (est * (1.0 - est) / samples as f64).sqrt();
    MonteCarlo { estimate: est, sigma: truth_free_sigma, samples }
}

/// `|| sum_y pi(y) b (e_y - pi) ||`.
pub fn baseline_unbiasedness(pi: &[f64], b: f64) -> f64 {
    let mut acc = vec![0.0; pi.len()];
    for y in 0..pi.len() {
        axpy(&mut acc, pi[y] * b, &score(pi, y));
    }
    norm(&acc)
}

pub fn variance_difference(h: f64, d: f64, delta: f64) -> f64 {
    h * (delta * delta - 2.0 * d * delta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceTerms {
    pub h: f64,
    pub b_star: f64,
    pub d: f64,
    pub delta: f64,
    pub closed_form: f64,
    pub brute_force: f64,
}

/// Trace variance of `(r - b) s` under `pi`, by enumeration.
pub fn score_estimator_variance(pi: &[f64], rewards: &[f64], b: f64) -> f64 {
    let n = pi.len();
    let mut mean = vec![0.0; n];
    let mut second = 0.0;
    for y in 0..n {
        let s = score(pi, y);
        let a = rewards[y] - b;
        axpy(&mut mean, pi[y] * a, &s);
        second += pi[y] * a * a * dot(&s, &s);
    }
    second - dot(&mean, &mean)
}

pub fn brute_variance_difference(pi: &[f64], rewards: &[f64], b_n: f64, b_pool: f64) -> VarianceTerms {
    let mut h = 0.0;
    let mut rs = 0.0;
    for y in 0..pi.len() {
        let s2 = dot(&score(pi, y), &score(pi, y));
        h += pi[y] * s2;
        rs += pi[y] * rewards[y] * s2;
    }
    let b_star = rs / h;
    let d = b_n - b_star;
    let delta = b_n - b_pool;
    VarianceTerms {
        h,
        b_star,
        d,
        delta,
        closed_form: variance_difference(h, d, delta),
        brute_force: score_estimator_variance(pi, rewards, b_pool) - score_estimator_variance(pi, rewards, b_n),
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| if *l == f64::NEG_INFINITY { 0.0 } else { (l - m).exp() }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_prob(logits: &[f64], y: usize) -> f64 {
    softmax(logits)[y].ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescueCurve {
    pub degenerate: bool,
    pub grad_norm_sq: f64,
    /// `(eta, delta log pi(y*) / (eta lambda ||grad||^2))`.
    pub ratios: Vec<(f64, f64)>,
    /// `log2` of successive remainder ratios; close to 2 for an `O(eta^2)` term.
    pub remainder_orders: Vec<f64>,
}

/// Takes the ascent step `theta + eta lambda grad log pi(y*)` for each eta
/// and compares the change in `log pi(y*)` with its first-order prediction.
pub fn rescue_gradient_check(logits: &[f64], y_star: usize, lambda: f64, etas: &[f64]) -> Result<RescueCurve, OracleError> {
    let pi = softmax(logits);
    if pi[y_star] == 0.0 {
        return Err(OracleError::Invalid("y* has zero probability".into()));
    }
    let g = score(&pi, y_star);
    let g2 = dot(&g, &g);
    if g2 < 1e-300 {
        return Ok(RescueCurve { degenerate: true, grad_norm_sq: g2, ratios: vec![], remainder_orders: vec![] });
    }
    let base = log_prob(logits, y_star);
    let mut ratios = Vec::new();
    let mut remainders = Vec::new();
    for &eta in etas {
        let stepped: Vec<f64> = logits.iter().zip(&g).map(|(l, gj)| l + eta * lambda * gj).collect();
        let change = log_prob(&stepped, y_star) - base;
        let first = eta * lambda * g2;
        ratios.push((eta, change / first));
        remainders.push(change - first);
    }
    let remainder_orders = remainders
        .windows(2)
        .zip(etas.windows(2))
        .map(|(r, e)| (r[0] / r[1]).abs().ln() / (e[0] / e[1]).ln())
        .collect();
    Ok(RescueCurve { degenerate: false, grad_norm_sq: g2, ratios, remainder_orders })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbCheck {
    pub difference: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Compares one descent step with and without the auxiliary term, starting
/// from `theta`.
pub fn perturbation_bound_check(
    theta: &[f64],
    base: &[f64],
    aux: &[f64],
    eta: f64,
    lambda: f64,
    gate: bool,
    g_s: f64,
) -> Result<PerturbCheck, OracleError> {
    if gate && norm(aux) > g_s * (1.0 + 1e-12) {
        return Err(OracleError::Invalid("aux gradient exceeds G_S".into()));
    }
    let ind = if gate { 1.0 } else { 0.0 };
    let step_base: Vec<f64> = theta.iter().zip(base).map(|(t, b)| t - eta * b).collect();
    let step_comb: Vec<f64> = theta
        .iter()
        .zip(base)
        .zip(aux)
        .map(|((t, b), a)| t - eta * (b + lambda * ind * a))
        .collect();
    let diff: Vec<f64> = step_comb.iter().zip(&step_base).map(|(a, b)| a - b).collect();
    let difference = norm(&diff);
    let bound = eta * lambda * g_s * ind;
    let slack = 1e-12 * bound.max(theta.iter().map(|t| t.abs()).fold(1.0, f64::max) * f64::EPSILON * 8.0);
    Ok(PerturbCheck { difference, bound, holds: difference <= bound + slack.max(1e-15) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipBias {
    pub exact_bias: f64,
    pub tail_bound: f64,
    pub second_moment: f64,
    pub second_moment_cap: f64,
    pub unclipped_second_moment: f64,
    pub variance_cap: f64,
}

/// Bias of the ratio-clipped estimator against `E_pi[A s]`, with the tail
/// bound and second-moment caps, all by enumeration over `mu`.
pub fn clipping_bias_bound(inst: &BanditInstance, eps: f64) -> Result<ClipBias, OracleError> {
    let n = inst.n();
    let adv = inst.advantages();
    let a_max = adv.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let g = (0..n).map(|y| norm(&score(&inst.pi, y))).fold(0.0, f64::max);
    let mut bias = vec![0.0; n];
    let mut tail = 0.0;
    let mut second = 0.0;
    let mut unclipped_second = 0.0;
    for y in 0..n {
        if inst.mu[y] == 0.0 {
            if inst.pi[y] > 0.0 {
                return Err(OracleError::Coverage(y));
            }
            continue;
        }
        let rho = inst.pi[y] / inst.mu[y];
        let c = rho.clamp(1.0 - eps, 1.0 + eps);
        let h = score(&inst.pi, y);
        axpy(&mut bias, inst.mu[y] * (c - rho) * adv[y], &h);
        tail += inst.mu[y] * ((rho - 1.0 - eps).max(0.0) + (1.0 - eps - rho).max(0.0));
        let hn2 = adv[y] * adv[y] * dot(&h, &h);
        second += inst.mu[y] * c * c * hn2;
        unclipped_second += inst.mu[y] * rho * rho * hn2;
    }
    let chi2 = chi2_divergence(&inst.pi, &inst.mu)?;
    Ok(ClipBias {
        exact_bias: norm(&bias),
        tail_bound: a_max * g * tail,
        second_moment: second,
        second_moment_cap: (1.0 + eps).powi(2) * a_max * a_max * g * g,
        unclipped_second_moment: unclipped_second,
        variance_cap: a_max * a_max * g * g * (1.0 + chi2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: String,
    pub pass: bool,
}

fn check(name: &str, value: String, pass: bool) -> OracleCheck {
    OracleCheck { name: name.to_string(), value, pass }
}

/// The full oracle table, in a fixed order.
pub fn run_suite(exec: &Executor) -> Vec<OracleCheck> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);

    let mut worst = 0.0f64;
    let mut bias_ok = true;
    for i in 0..100 {
        let inst = BanditInstance::random(2 + i % 4, &mut rng);
        let adv = inst.advantages();
        let eg = enum_policy_gradient(&inst, |y| adv[y]).expect("instances have full coverage");
        worst = worst.max(eg.max_abs_diff);
        let cb = clipping_bias_bound(&inst, 0.2).expect("coverage");
        bias_ok &= cb.exact_bias <= cb.tail_bound + 1e-15
            && cb.second_moment <= cb.second_moment_cap + 1e-15
            && cb.unclipped_second_moment <= cb.variance_cap + 1e-12;
    }
    out.push(check("importance-weighted expectation equals on-policy gradient", format!("max |diff| = {worst:.3e}"), worst <= 1e-12));
    out.push(check("clipping bias within tail bound; clipped and exact second moments capped", format!("{bias_ok}"), bias_ok));

    for eta in [0.005, 0.01, 0.02, 0.04] {
        let a = anti_align_instance(eta).expect("eta in range");
        let ok = (a.dot - a.polynomial).abs() <= 1e-12 && a.dot < 0.0;
        out.push(check(&format!("anti-aligned naive pooling, eta = {eta}"), format!("dot = {:.6e}, poly = {:.6e}", a.dot, a.polynomial), ok));
    }
    let a = anti_align_instance(0.04).expect("eta in range");
    out.push(check(
        "chi-square at eta = 0.04",
        format!("{:.6} (closed form {:.6})", a.chi2, a.chi2_closed_form),
        (a.chi2 - a.chi2_closed_form).abs() <= 1e-12 * a.chi2 && (a.chi2 - 11.597).abs() < 1e-3,
    ));
    let on_want = [2.0 / 9.0, -(2.0 / 3.0 - 0.04) / 3.0, -0.04 / 3.0];
    let on_err = a.g_on.iter().zip(on_want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    out.push(check("on-policy gradient of the anti-aligned instance", format!("max |diff| = {on_err:.3e}"), on_err <= 1e-15));

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..7);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|x| x / s).collect();
        worst = worst.max(baseline_unbiasedness(&pi, rng.random_range(-10.0..10.0)));
    }
    out.push(check("pooled baseline leaves the expected score unchanged", format!("max residual = {worst:.3e}"), worst <= 1e-12));

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..6);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let v = brute_variance_difference(&pi, &rewards, rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0));
        worst = worst.max((v.closed_form - v.brute_force).abs());
    }
    out.push(check("variance difference closed form matches enumeration", format!("max |diff| = {worst:.3e}"), worst <= 1e-10));

    let g = gate_probability(0.5, &[0.5], 5);
    let ge = gate_probability_enumerated(0.5, &[0.5], 5);
    out.push(check("gate probability, K = 5, p = 0.5, one peer", format!("{g} (enumerated {ge})"), g == 0.030_273_437_5 && ge == g));
    let mut worst = 0.0f64;
    for k in 1..=5u32 {
        for m in 1..=2usize {
            for _ in 0..3 {
                let p_n = rng.random_range(0.0..1.0);
                let peers: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
                worst = worst.max((gate_probability(p_n, &peers, k) - gate_probability_enumerated(p_n, &peers, k)).abs());
            }
        }
    }
    out.push(check("gate closed form matches enumeration, K <= 5, M <= 3", format!("max |diff| = {worst:.3e}"), worst <= 1e-14));
    let mc = gate_probability_mc(0.5, &[0.5], 5, 200_000, 7, exec);
    out.push(check("gate Monte Carlo within 3 sigma", format!("{:.5} +/- {:.5}", mc.estimate, mc.sigma), mc.within(g, 3.0)));
    let mut max_deriv = f64::NEG_INFINITY;
    for k in 1..=6u32 {
        for i in 0..=10 {
            for j in 0..=10 {
                max_deriv = max_deriv.max(gate_prob_derivative(i as f64 / 10.0, &[j as f64 / 10.0, 0.3], k));
            }
        }
    }
    out.push(check("gate probability is non-increasing in learner success", format!("max derivative = {max_deriv:.3e}"), max_deriv <= 0.0));

    let mut worst = 0.0f64;
    let mut orders_ok = true;
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c = rescue_gradient_check(&logits, 0, 0.1, &[1e-2, 5e-3, 2.5e-3, 1e-4]).expect("positive mass");
        worst = worst.max((c.ratios[3].1 - 1.0).abs());
        orders_ok &= c.remainder_orders[..2].iter().all(|o| (o - 2.0).abs() < 0.2);
    }
    out.push(check("rescue step raises log pi(y*) to first order", format!("max |ratio - 1| at eta = 1e-4: {worst:.3e}"), worst <= 1e-3));
    out.push(check("rescue remainder is second order", format!("{orders_ok}"), orders_ok));
    let degenerate = rescue_gradient_check(&[0.0, f64::NEG_INFINITY], 0, 0.1, &[1e-4]).map(|c| c.degenerate).unwrap_or(false);
    out.push(check("point mass on y* is reported degenerate", format!("{degenerate}"), degenerate));

    let mut ok = true;
    for _ in 0..50 {
        let n = 4;
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let aux: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let on = perturbation_bound_check(&theta, &base, &aux, 0.05, 0.1, true, norm(&aux)).expect("G_S = ||aux||");
        let off = perturbation_bound_check(&theta, &base, &aux, 0.05, 0.1, false, norm(&aux)).expect("gate off");
        ok &= on.holds && off.difference == 0.0;
    }
    out.push(check("combined step stays within eta lambda G_S of the base step", format!("{ok}"), ok));
    out
}
