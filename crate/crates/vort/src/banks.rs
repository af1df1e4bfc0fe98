//! Fractional routing to K fixed-order banks and the exact per-bank
//! recurrences M^{(k,s)}_t = λ_s M^{(k,s)}_{t−1} + c_s 1[k_t = k] v_t.
//!
//! Bank indices in this module's public API are 1-based, k ∈ [1, K].

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::gl_kernel::{check_alpha, gl_partial_sum};
use crate::numerics::sigmoid;
use crate::soe::{build_soe_terms, SoeApprox, TailPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub delta: f64,
    pub k: usize,
    pub w_alpha: Vec<f64>,
    pub b_alpha: f64,
}

impl RoutingConfig {
    /// Zero weights over `feature_dim` inputs.
    pub fn new(delta: f64, k: usize, feature_dim: usize) -> Result<Self> {
        let cfg = RoutingConfig { delta, k, w_alpha: vec![0.0; feature_dim], b_alpha: 0.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.k == 0 {
            return Err(domain("bank count K must be >= 1"));
        }
        Ok(())
    }

    /// α_k = δ + (1−δ)k/K for k = 1..K.
    pub fn bank_orders(&self) -> Vec<f64> {
        bank_orders(self.delta, self.k)
    }

    pub fn feature_dim(&self) -> usize {
        self.w_alpha.len()
    }
}

pub fn bank_orders(delta: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|i| if i == k { 1.0 } else { delta + (1.0 - delta) * i as f64 / k as f64 }).collect()
}

/// Nearest bank (1-based) to `alpha`; ties go to the larger k.
pub fn quantise(alpha: f64, delta: f64, k: usize) -> usize {
    let orders = bank_orders(delta, k);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &a) in orders.iter().enumerate() {
        let d = (alpha - a).abs();
        if d <= best_d + 1e-12 * a.abs().max(1.0) {
            best = i;
            best_d = d.min(best_d);
        }
    }
    best + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatures {
    pub x: Vec<f64>,
    pub entropy: f64,
    pub entity_flag: u8,
}

impl TokenFeatures {
    /// Routing input [x; H; e].
    pub fn routing_input(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.push(self.entropy);
        v.push(self.entity_flag as f64);
        v
    }
}

/// α_i = δ + (1−δ)σ(W_α·[x; H; e] + b_α) and its nearest bank.
pub fn assign_order(features: &TokenFeatures, cfg: &RoutingConfig) -> Result<(f64, usize)> {
    let want = features.x.len() + 2;
    if cfg.w_alpha.len() != want {
        return Err(Error::Dimension { expected: cfg.w_alpha.len(), got: want });
    }
    if features.entropy < 0.0 || features.entity_flag > 1 {
        return Err(domain("entropy must be >= 0 and entity flag in {0, 1}"));
    }
    let z = cfg
        .w_alpha
        .iter()
        .zip(features.x.iter().chain([features.entropy, features.entity_flag as f64].iter()))
        .map(|(w, x)| w * x)
        .sum::<f64>()
        + cfg.b_alpha;
    let alpha = cfg.delta + (1.0 - cfg.delta) * sigmoid(z);
    Ok((alpha, quantise(alpha, cfg.delta, cfg.k)))
}

/// One bank's exponential terms. The α = 1 bank is the running sum: a single
/// term with c = 1 and rate exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankKernel {
    pub alpha: f64,
    pub coeffs: Vec<f64>,
    pub rates: Vec<f64>,
    pub soe: Option<SoeApprox>,
}

impl BankKernel {
    pub fn running_sum() -> Self {
        BankKernel { alpha: 1.0, coeffs: vec![1.0], rates: vec![1.0], soe: None }
    }

    pub fn from_soe(soe: SoeApprox) -> Self {
        BankKernel { alpha: soe.alpha, coeffs: soe.coeffs.clone(), rates: soe.rates.clone(), soe: Some(soe) }
    }

    /// Kernel of order `alpha` with S terms; α = 1 gives the running sum.
    pub fn build(alpha: f64, horizon: usize, eps: f64, terms: usize, policy: TailPolicy) -> Result<Self> {
        check_alpha(alpha)?;
        if alpha == 1.0 {
            return Ok(Self::running_sum());
        }
        Ok(Self::from_soe(build_soe_terms(alpha, horizon, eps, terms, policy)?))
    }

    pub fn terms(&self) -> usize {
        self.coeffs.len()
    }

    /// ŵ_j of this bank.
    pub fn weight(&self, j: u64) -> f64 {
        self.coeffs.iter().zip(&self.rates).map(|(&c, &r)| c * r.powi(j.min(i32::MAX as u64) as i32)).sum()
    }

    /// ŵ_0..ŵ_J.
    pub fn weights(&self, j_max: usize) -> Vec<f64> {
        let mut out = vec![0.0; j_max + 1];
        for (&c, &r) in self.coeffs.iter().zip(&self.rates) {
            let mut p = c;
            for o in out.iter_mut() {
                *o += p;
                p *= r;
            }
        }
        out
    }
}

/// Kernels for α_1..α_K.
pub fn build_bank_kernels(
    cfg: &RoutingConfig,
    horizon: usize,
    eps: f64,
    terms: usize,
    policy: TailPolicy,
) -> Result<Vec<BankKernel>> {
    cfg.validate()?;
    cfg.bank_orders().into_iter().map(|a| BankKernel::build(a, horizon, eps, terms, policy)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankState {
    pub kernels: Vec<BankKernel>,
    pub d_v: usize,
    pub t: u64,
    /// m[k][s] is the d_v-vector M^{(k,s)}.
    pub m: Vec<Vec<Vec<f64>>>,
}

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    state: BankState,
}

impl BankState {
    pub fn new(kernels: Vec<BankKernel>, d_v: usize) -> Self {
        let m = kernels.iter().map(|k| vec![vec![0.0; d_v]; k.terms()]).collect();
        BankState { kernels, d_v, t: 0, m }
    }

    pub fn banks(&self) -> usize {
        self.kernels.len()
    }

    fn check_bank(&self, bank_index: usize) -> Result<usize> {
        if bank_index == 0 || bank_index > self.kernels.len() {
            return Err(Error::OutOfRange { index: bank_index, lo: 1, hi: self.kernels.len() });
        }
        Ok(bank_index - 1)
    }

    /// Versioned JSON snapshot.
    pub fn to_json(&self) -> Result<String> {
        let snap = Snapshot { format: "vort-bank-state".into(), version: SNAPSHOT_VERSION, state: self.clone() };
        serde_json::to_string(&snap).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        if snap.format != "vort-bank-state" || snap.version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot {} v{}", snap.format, snap.version)));
        }
        Ok(snap.state)
    }
}

/// Advance one token: every accumulator decays, the routed bank adds c_s v_t.
pub fn bank_step(state: &mut BankState, v: &[f64], bank_index: usize) -> Result<()> {
    if v.len() != state.d_v {
        return Err(Error::Dimension { expected: state.d_v, got: v.len() });
    }
    let target = state.check_bank(bank_index)?;
    for (k, (kern, mk)) in state.kernels.iter().zip(state.m.iter_mut()).enumerate() {
        for ((&c, &r), ms) in kern.coeffs.iter().zip(&kern.rates).zip(mk.iter_mut()) {
            if k == target {
                for (m, &x) in ms.iter_mut().zip(v) {
                    *m = r * *m + c * x;
                }
            } else {
                for m in ms.iter_mut() {
                    *m *= r;
                }
            }
        }
    }
    state.t += 1;
    Ok(())
}

/// M^{(k)}_t = Σ_s M^{(k,s)}_t.
pub fn bank_fractional_state(state: &BankState, bank_index: usize) -> Result<Vec<f64>> {
    let k = state.check_bank(bank_index)?;
    let mut out = vec![0.0; state.d_v];
    for ms in &state.m[k] {
        for (o, &x) in out.iter_mut().zip(ms) {
            *o += x;
        }
    }
    Ok(out)
}

/// ‖M_t‖ of the exact fractional state for constant inputs of norm
/// `input_norm`, for t = 1..t_max.
pub fn growth_profile(alpha: f64, t_max: u64, input_norm: f64) -> Result<Vec<(u64, f64)>> {
    check_alpha(alpha)?;
    if t_max < 10 {
        return Err(domain("growth_profile requires t_max >= 10"));
    }
    (1..=t_max).map(|t| Ok((t, input_norm.abs() * gl_partial_sum(alpha, t)?))).collect()
}
