//! Keyed linear-attention retrieval with banked fractional decay.
//!
//! G^{(k,s)}_t = λ_s G^{(k,s)}_{t−1} + c_s 1[k_t = k] φ(k_t) v_tᵀ and
//! b^{(k,s)}_t = λ_s b^{(k,s)}_{t−1} + c_s 1[k_t = k] φ(k_t), read out as
//! o = Σ φ(q)ᵀG / (Σ φ(q)ᵀb + ε₀).
//!
//! Each (k,s) pair stores an unnormalised matrix and a scalar scale; decay
//! touches only the scale, so a step costs O(S d_φ d_v) for the routed bank.

use serde::{Deserialize, Serialize};

use crate::banks::BankKernel;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const EPS0: f64 = 1e-6;

const RESCALE_BELOW: f64 = 1e-150;

/// Positive random features φ(x)_r = exp(ω_r·x̃ − ‖x̃‖²/2)/√d_φ, x̃ = x/d_k^{1/4}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub d_k: usize,
    pub d_phi: usize,
    pub seed: u64,
    /// d_φ × d_k, row-major.
    pub omega: Vec<f64>,
}

impl FeatureMap {
    pub fn new(d_k: usize, d_phi: usize, seed: u64) -> Self {
        let mut rng = RngStream::derived(seed, 0x5eed_f1);
        let omega = (0..d_k * d_phi).map(|_| rng.gaussian()).collect();
        FeatureMap { d_k, d_phi, seed, omega }
    }

    fn scale(&self) -> f64 {
        (self.d_k as f64).powf(-0.25)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_k {
            return Err(Error::Dimension { expected: self.d_k, got: x.len() });
        }
        Ok(self.apply_unchecked(x))
    }

    pub(crate) fn apply_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let sc = self.scale();
        let norm2: f64 = x.iter().map(|v| v * v).sum::<f64>() * sc * sc;
        let inv = 1.0 / (self.d_phi as f64).sqrt();
        self.omega
            .chunks_exact(self.d_k)
            .map(|row| {
                let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() * sc;
                (dot - 0.5 * norm2).exp() * inv
            })
            .collect()
    }

    /// Vector-Jacobian product: given φ(x) and ∂L/∂φ, returns ∂L/∂x.
    pub fn vjp(&self, x: &[f64], phi: &[f64], grad_phi: &[f64]) -> Vec<f64> {
        let sc = self.scale();
        let mut out = vec![0.0; self.d_k];
        let mut total = 0.0;
        for ((row, &p), &g) in self.omega.chunks_exact(self.d_k).zip(phi).zip(grad_phi) {
            let gp = g * p;
            total += gp;
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gp * w * sc;
            }
        }
        for (o, &v) in out.iter_mut().zip(x) {
            *o -= total * v * sc * sc;
        }
        out
    }
}

pub fn feature_map_apply(fm: &FeatureMap, x: &[f64]) -> Result<Vec<f64>> {
    fm.apply(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot {
    scale: f64,
    g: Vec<f64>,
    b: Vec<f64>,
}

/// Running G (d_φ × d_v) and b (d_φ) sums for every (bank, term) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAccumulators {
    pub kernels: Vec<BankKernel>,
    pub d_phi: usize,
    pub d_v: usize,
    pub eps0: f64,
    pub t: u64,
    slots: Vec<Vec<Slot>>,
    /// Multiply-adds performed so far.
    pub flops: u64,
}

impl RetrievalAccumulators {
    pub fn new(kernels: Vec<BankKernel>, d_phi: usize, d_v: usize) -> Self {
        let slots = kernels
            .iter()
            .map(|k| {
                (0..k.terms())
                    .map(|_| Slot { scale: 1.0, g: vec![0.0; d_phi * d_v], b: vec![0.0; d_phi] })
                    .collect()
            })
            .collect();
        RetrievalAccumulators { kernels, d_phi, d_v, eps0: EPS0, t: 0, slots, flops: 0 }
    }

    pub fn banks(&self) -> usize {
        self.kernels.len()
    }

    /// Materialised G^{(k,s)} (row-major d_φ × d_v); `bank_index` is 1-based.
    pub fn g(&self, bank_index: usize, s: usize) -> Vec<f64> {
        let slot = &self.slots[bank_index - 1][s];
        slot.g.iter().map(|x| x * slot.scale).collect()
    }

    /// Materialised b^{(k,s)}.
    pub fn b(&self, bank_index: usize, s: usize) -> Vec<f64> {
        let slot = &self.slots[bank_index - 1][s];
        slot.b.iter().map(|x| x * slot.scale).collect()
    }

    /// Every (k,s) pair decays by its rate; no token is added.
    pub fn decay(&mut self) {
        for (kern, slots) in self.kernels.iter().zip(self.slots.iter_mut()) {
            for (&r, slot) in kern.rates.iter().zip(slots.iter_mut()) {
                slot.scale *= r;
                if slot.scale < RESCALE_BELOW {
                    for x in slot.g.iter_mut().chain(slot.b.iter_mut()) {
                        *x *= slot.scale;
                    }
                    self.flops += (self.d_phi * (self.d_v + 1)) as u64;
                    slot.scale = 1.0;
                }
                self.flops += 1;
            }
        }
        self.t += 1;
    }

    /// Adds c_s φ vᵀ and c_s φ to the routed bank without decaying.
    pub fn add_features(&mut self, phi: &[f64], v: &[f64], bank_index: usize) -> Result<()> {
        if phi.len() != self.d_phi {
            return Err(Error::Dimension { expected: self.d_phi, got: phi.len() });
        }
        if v.len() != self.d_v {
            return Err(Error::Dimension { expected: self.d_v, got: v.len() });
        }
        if bank_index == 0 || bank_index > self.kernels.len() {
            return Err(Error::OutOfRange { index: bank_index, lo: 1, hi: self.kernels.len() });
        }
        let k = bank_index - 1;
        let dv = self.d_v;
        for (&c, slot) in self.kernels[k].coeffs.iter().zip(self.slots[k].iter_mut()) {
            let a = c / slot.scale;
            for (r, &p) in phi.iter().enumerate() {
                let ap = a * p;
                slot.b[r] += ap;
                for (g, &x) in slot.g[r * dv..(r + 1) * dv].iter_mut().zip(v) {
                    *g += ap * x;
                }
            }
        }
        self.flops += (self.kernels[k].terms() * self.d_phi * (self.d_v + 1)) as u64;
        Ok(())
    }

    /// One step from precomputed features: decay, then add.
    pub fn step_features(&mut self, phi: &[f64], v: &[f64], bank_index: usize) -> Result<()> {
        if bank_index == 0 || bank_index > self.kernels.len() {
            return Err(Error::OutOfRange { index: bank_index, lo: 1, hi: self.kernels.len() });
        }
        self.decay();
        self.add_features(phi, v, bank_index)
    }

    /// Readout from precomputed query features.
    pub fn retrieve_features(&mut self, phi_q: &[f64]) -> Vec<f64> {
        let (num, den) = self.readout_parts(phi_q);
        num.iter().map(|x| x / (den + self.eps0)).collect()
    }

    /// (Σ φᵀG, Σ φᵀb).
    pub fn readout_parts(&mut self, phi_q: &[f64]) -> (Vec<f64>, f64) {
        let dv = self.d_v;
        let mut num = vec![0.0; dv];
        let mut den = 0.0;
        let mut ops = 0u64;
        for slots in &self.slots {
            for slot in slots {
                let mut part = vec![0.0; dv];
                let mut bpart = 0.0;
                for (r, &p) in phi_q.iter().enumerate() {
                    bpart += p * slot.b[r];
                    for (o, &g) in part.iter_mut().zip(&slot.g[r * dv..(r + 1) * dv]) {
                        *o += p * g;
                    }
                }
                for (n, x) in num.iter_mut().zip(&part) {
                    *n += slot.scale * x;
                }
                den += slot.scale * bpart;
                ops += (self.d_phi * (dv + 1) + dv + 1) as u64;
            }
        }
        self.flops += ops;
        (num, den)
    }
}

/// Decay every pair, then add the token to its bank.
pub fn accum_step(
    acc: &mut RetrievalAccumulators,
    fm: &FeatureMap,
    key: &[f64],
    value: &[f64],
    bank_index: usize,
) -> Result<()> {
    let phi = fm.apply(key)?;
    acc.step_features(&phi, value, bank_index)
}

/// o = Σ_{k,s} φ(q)ᵀG / (Σ_{k,s} φ(q)ᵀb + ε₀).
pub fn retrieve(acc: &mut RetrievalAccumulators, query: &[f64], fm: &FeatureMap) -> Result<Vec<f64>> {
    let phi = fm.apply(query)?;
    if phi.len() != acc.d_phi {
        return Err(Error::Dimension { expected: acc.d_phi, got: phi.len() });
    }
    Ok(acc.retrieve_features(&phi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    /// 1-based bank the token was routed to.
    pub bank: usize,
    pub position: u64,
}

/// Direct O(t d_φ d_v) evaluation of the same readout:
/// Σ_i (φ(q)·φ(k_i)) ŵ^{(k_i)}_{t−i} v_i / (Σ_i (φ(q)·φ(k_i)) ŵ^{(k_i)}_{t−i} + ε₀).
pub fn dense_retrieve(
    history: &[HistoryEntry],
    query: &[f64],
    t: u64,
    fm: &FeatureMap,
    kernels: &[BankKernel],
    eps0: f64,
) -> Result<Vec<f64>> {
    let phi_q = fm.apply(query)?;
    let d_v = history.first().map_or(0, |h| h.value.len());
    let mut num = vec![0.0; d_v];
    let mut den = 0.0;
    for h in history {
        if h.position >= t {
            return Err(crate::error::domain(format!("history position {} not before t = {t}", h.position)));
        }
        if h.bank == 0 || h.bank > kernels.len() {
            return Err(Error::OutOfRange { index: h.bank, lo: 1, hi: kernels.len() });
        }
        let phi_k = fm.apply(&h.key)?;
        let s: f64 = phi_q.iter().zip(&phi_k).map(|(a, b)| a * b).sum();
        let a = s * kernels[h.bank - 1].weight(t - h.position);
        den += a;
        for (n, &x) in num.iter_mut().zip(&h.value) {
            *n += a * x;
        }
    }
    Ok(num.iter().map(|x| x / (den + eps0)).collect())
}
