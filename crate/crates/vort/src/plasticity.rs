//! Retrieval-feedback refinement of per-token fractional orders.
//!
//! Loss −Σ_t ln p_{i*(t),t} with p_{it} ∝ exp(q_t·k_i/√d_k) ŵ^{(α_i)}_{t−i},
//! its α-gradient through the SOE coefficients, and projected gradient
//! descent on [δ, 1].

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::soe::SoeApprox;

/// Orders at or above this are treated as the running-sum kernel.
pub const RUNNING_SUM_ALPHA: f64 = 1.0 - 1e-9;
const BOUNDARY_PROBE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasticityConfig {
    pub eta: f64,
    pub iterations: usize,
    pub delta: f64,
    pub l_hat: Option<f64>,
    pub mu_hat: Option<f64>,
}

impl PlasticityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(domain("plasticity step must be positive"));
        }
        if let Some(l) = self.l_hat {
            if !(l > 0.0) || self.eta > 1.0 / l {
                return Err(domain(format!("step {} exceeds 1/L = {}", self.eta, 1.0 / l)));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(domain("delta must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceQuery {
    pub t: usize,
    pub source: usize,
    pub key: Vec<f64>,
}

/// Keys of ingested tokens plus queries with ground-truth sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub keys: Vec<Vec<f64>>,
    pub queries: Vec<TraceQuery>,
}

impl RetrievalTrace {
    pub fn d_k(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    fn validate(&self, alphas: &[f64]) -> Result<()> {
        if alphas.len() != self.keys.len() {
            return Err(Error::Dimension { expected: self.keys.len(), got: alphas.len() });
        }
        for q in &self.queries {
            if q.source >= q.t || q.t > self.keys.len() {
                return Err(domain(format!("query at t={} has no valid source ({})", q.t, q.source)));
            }
        }
        Ok(())
    }
}

/// Per-token kernels on a shared node set: ŵ^{(α)}_j and ∂ŵ^{(α)}_j/∂α.
#[derive(Debug, Clone)]
pub struct OrderKernel {
    template: SoeApprox,
}

impl OrderKernel {
    pub fn new(template: SoeApprox) -> Self {
        OrderKernel { template }
    }

    pub fn template(&self) -> &SoeApprox {
        &self.template
    }

    /// (coefficients, ∂ln c/∂α) for `alpha`; `None` for the running sum.
    fn coeffs(&self, alpha: f64) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        if alpha >= RUNNING_SUM_ALPHA {
            return Ok(None);
        }
        let a = self.template.with_alpha(alpha)?;
        let d = a.dlog_coeffs()?;
        Ok(Some((a.coeffs, d)))
    }

    fn eval(&self, coeffs: &Option<(Vec<f64>, Vec<f64>)>, lag: usize) -> (f64, f64) {
        match coeffs {
            None => (1.0, 0.0),
            Some((c, d)) => {
                let jf = lag as f64;
                let mut w = 0.0;
                let mut g = 0.0;
                for ((&cs, &ds), &x) in c.iter().zip(d).zip(&self.template.xi) {
                    let term = cs * (-x * jf).exp();
                    w += term;
                    g += term * ds;
                }
                (w, g)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct QueryTerms {
    t: usize,
    source: usize,
    /// ln r_i for i < t
    log_r: Vec<f64>,
    /// ∂ln ŵ/∂α_i
    dlog_w: Vec<f64>,
}

fn query_terms(trace: &RetrievalTrace, alphas: &[f64], kernel: &OrderKernel, with_grad: bool) -> Result<Vec<QueryTerms>> {
    trace.validate(alphas)?;
    let scale = 1.0 / (trace.d_k() as f64).sqrt();
    let mut cache: Vec<Option<Option<(Vec<f64>, Vec<f64>)>>> = vec![None; alphas.len()];
    let mut out = Vec::with_capacity(trace.queries.len());
    for q in &trace.queries {
        let mut log_r = Vec::with_capacity(q.t);
        let mut dlog_w = Vec::with_capacity(if with_grad { q.t } else { 0 });
        for i in 0..q.t {
            if cache[i].is_none() {
                let a = if with_grad && alphas[i] >= RUNNING_SUM_ALPHA { 1.0 - BOUNDARY_PROBE } else { alphas[i] };
                cache[i] = Some(kernel.coeffs(a)?);
            }
            let (w, g) = kernel.eval(cache[i].as_ref().unwrap_or(&None), q.t - i);
            if !(w > 0.0) {
                return Err(Error::NonFinite(format!("kernel weight {w} at lag {}", q.t - i)));
            }
            log_r.push(dot(&q.key, &trace.keys[i]) * scale + w.ln());
            if with_grad {
                dlog_w.push(g / w);
            }
        }
        out.push(QueryTerms { t: q.t, source: q.source, log_r, dlog_w });
    }
    Ok(out)
}

fn softmax(log_r: &[f64]) -> Vec<f64> {
    let m = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_r.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// −Σ_t ln p_{i*(t),t} with exact exponential scores.
pub fn retrieval_loss(trace: &RetrievalTrace, alphas: &[f64], kernel: &OrderKernel) -> Result<f64> {
    let terms = query_terms(trace, alphas, kernel, false)?;
    let mut loss = 0.0;
    for q in &terms {
        let m = q.log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + q.log_r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - q.log_r[q.source];
    }
    Ok(loss)
}

/// ∂L/∂α_i for every token. Orders at the running-sum boundary are
/// differentiated at 1 − 1e-6.
pub fn loss_alpha_grad_all(trace: &RetrievalTrace, alphas: &[f64], kernel: &OrderKernel) -> Result<Vec<f64>> {
    let terms = query_terms(trace, alphas, kernel, true)?;
    let mut grad = vec![0.0; alphas.len()];
    for q in &terms {
        let p = softmax(&q.log_r);
        for i in 0..q.t {
            let ind = if i == q.source { 1.0 } else { 0.0 };
            grad[i] -= (ind - p[i]) * q.dlog_w[i];
        }
    }
    Ok(grad)
}

/// Gradient for one token, and whether its order sits on the projection
/// boundary (δ or 1).
pub fn loss_alpha_grad(
    trace: &RetrievalTrace,
    alphas: &[f64],
    kernel: &OrderKernel,
    token: usize,
    delta: f64,
) -> Result<(f64, bool)> {
    if token >= alphas.len() {
        return Err(Error::OutOfRange { index: token, lo: 0, hi: alphas.len().saturating_sub(1) });
    }
    let g = loss_alpha_grad_all(trace, alphas, kernel)?;
    let a = alphas[token];
    Ok((g[token], a <= delta || a >= RUNNING_SUM_ALPHA))
}

/// One projected step on every token: α ← clip(α − η g, δ, 1).
pub fn project_step(alphas: &mut [f64], grad: &[f64], eta: f64, delta: f64) {
    for (a, g) in alphas.iter_mut().zip(grad) {
        *a = (*a - eta * g).clamp(delta, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub l: usize,
    pub alpha: f64,
    pub f: f64,
    pub grad: f64,
}

/// Projected gradient descent α^{(l+1)} = clip(α^{(l)} − η F′(α^{(l)}), δ, 1)
/// on a scalar objective returning (F, F′). Returns every iterate, including
/// the start.
pub fn plasticity_descent(
    objective: impl Fn(f64) -> Result<(f64, f64)>,
    alpha0: f64,
    cfg: &PlasticityConfig,
) -> Result<Vec<Iterate>> {
    cfg.validate()?;
    if !(alpha0 >= cfg.delta && alpha0 <= 1.0) {
        return Err(domain(format!("alpha0 {alpha0} outside [{}, 1]", cfg.delta)));
    }
    let mut hist = Vec::with_capacity(cfg.iterations + 1);
    let mut a = alpha0;
    for l in 0..=cfg.iterations {
        let (f, g) = objective(a)?;
        if !f.is_finite() || !g.is_finite() {
            let dump: Vec<String> = hist.iter().map(|it: &Iterate| format!("{}:{}", it.l, it.alpha)).collect();
            return Err(Error::NonFinite(format!(
                "objective at iterate {l} (alpha {a}): F={f}, F'={g}; history [{}]",
                dump.join(", ")
            )));
        }
        hist.push(Iterate { l, alpha: a, f, grad: g });
        if l < cfg.iterations {
            a = (a - cfg.eta * g).clamp(cfg.delta, 1.0);
        }
    }
    Ok(hist)
}

/// L̂ = max |F(a+h) − 2F(a) + F(a−h)|/h² over a `points`-point grid on [lo, hi].
pub fn estimate_smoothness(f: impl Fn(f64) -> Result<f64>, lo: f64, hi: f64, points: usize) -> Result<f64> {
    if points < 3 || !(lo < hi) {
        return Err(domain("smoothness estimate needs >= 3 points on a proper interval"));
    }
    let h = (hi - lo) / (points - 1) as f64;
    let vals: Vec<f64> = (0..points).map(|i| f(lo + h * i as f64)).collect::<Result<_>>()?;
    Ok(vals.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs() / (h * h)).fold(0.0, f64::max))
}

/// A small retrieval trace with mixed short and long source lags, so that a
/// single shared order has an interior optimum.
pub fn planted_trace(seed: u64, n: usize, queries: usize, d_k: usize) -> RetrievalTrace {
    let mut rng = crate::numerics::RngStream::new(seed);
    let keys: Vec<Vec<f64>> = (0..n).map(|_| (0..d_k).map(|_| rng.gaussian()).collect()).collect();
    let mut qs = Vec::with_capacity(queries);
    for q in 0..queries {
        let t = n / 2 + rng.below((n - n / 2) as u64) as usize;
        let lag = if q % 2 == 0 { 1 + rng.below(3) as usize } else { t / 2 + rng.below((t / 2) as u64) as usize };
        let source = t - lag.min(t);
        let key = keys[source].iter().map(|&k| 0.8 * k + 0.6 * rng.gaussian()).collect();
        qs.push(TraceQuery { t, source, key });
    }
    RetrievalTrace { keys, queries: qs }
}

/// F(α) and F′(α) with every token sharing the order α.
pub fn shared_order_objective(trace: &RetrievalTrace, kernel: &OrderKernel, alpha: f64) -> Result<(f64, f64)> {
    let alphas = vec![alpha; trace.keys.len()];
    let f = retrieval_loss(trace, &alphas, kernel)?;
    let g = loss_alpha_grad_all(trace, &alphas, kernel)?.iter().sum();
    Ok((f, g))
}
