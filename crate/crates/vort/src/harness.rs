//! Training and evaluation of the Power-Law, Exponential and Mixture-5
//! kernels on the synthetic tasks, plus the ablations.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::banks::{assign_order, bank_orders, BankKernel, RoutingConfig, TokenFeatures};
use crate::error::{domain, Error, Result};
use crate::gl_kernel::gl_weights;
use crate::numerics::{log_gamma, sigmoid, softplus, softplus_inv, RngStream};
use crate::plasticity::{loss_alpha_grad_all, project_step, retrieval_loss, OrderKernel, RetrievalTrace, TraceQuery};
use crate::retrieval::{FeatureMap, RetrievalAccumulators, EPS0};
use crate::soe::{build_soe_terms, TailPolicy};
use crate::tasks::{bucket_lags, gen_task, TaskConfig, TaskKind, TaskSequence};
use crate::theory_checks::MixtureModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub mixture: MixtureModel,
    /// Σ_j (f(j) − k_α(j))² at the returned parameters.
    pub residual: f64,
    pub initial_residual: f64,
    pub iterations: usize,
}

fn mixture_residual(log_pi: &[f64], log_lam: &[f64], target: &[f64], grad: Option<(&mut [f64], &mut [f64])>) -> f64 {
    let m = log_pi.len();
    let pi: Vec<f64> = log_pi.iter().map(|x| x.exp()).collect();
    let lam: Vec<f64> = log_lam.iter().map(|x| x.exp()).collect();
    let decay: Vec<f64> = lam.iter().map(|l| (-l).exp()).collect();
    let mut pow = vec![1.0; m];
    let mut res = 0.0;
    let mut gp = vec![0.0; m];
    let mut gl = vec![0.0; m];
    for (idx, &y) in target.iter().enumerate() {
        let j = (idx + 1) as f64;
        let mut f = 0.0;
        for s in 0..m {
            pow[s] *= decay[s];
            f += pi[s] * pow[s];
        }
        let r = f - y;
        res += r * r;
        for s in 0..m {
            let e = pi[s] * pow[s];
            gp[s] += 2.0 * r * e;
            gl[s] -= 2.0 * r * e * j * lam[s];
        }
    }
    if let Some((a, b)) = grad {
        a.copy_from_slice(&gp);
        b.copy_from_slice(&gl);
    }
    res
}

/// Least-squares fit of Σ π_m e^{−λ_m j} to k_α(j) = j^{α−1}/Γ(α) on
/// j = 1..T, by Adam on (ln π, ln λ), starting from `init`.
pub fn fit_mixture_from(init: &MixtureModel, alpha: f64, horizon: usize, iterations: usize) -> Result<MixtureFit> {
    if !(alpha > 0.0 && alpha < 1.0) || horizon == 0 {
        return Err(domain("mixture fit needs α ∈ (0, 1) and T >= 1"));
    }
    let lg = log_gamma(alpha)?;
    let target: Vec<f64> = (1..=horizon).map(|j| ((alpha - 1.0) * (j as f64).ln() - lg).exp()).collect();
    let m = init.m();
    let mut a: Vec<f64> = init.weights.iter().map(|p| p.max(1e-12).ln()).collect();
    let mut b: Vec<f64> = init.rates.iter().map(|l| l.ln()).collect();
    let initial = mixture_residual(&a, &b, &target, None);
    let (mut best, mut best_a, mut best_b) = (initial, a.clone(), b.clone());
    let (mut ma, mut va, mut mb, mut vb) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let (mut ga, mut gb) = (vec![0.0; m], vec![0.0; m]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-12);
    for it in 1..=iterations {
        let r = mixture_residual(&a, &b, &target, Some((&mut ga, &mut gb)));
        if !r.is_finite() {
            return Err(Error::NoConvergence { residual: r });
        }
        if r < best {
            best = r;
            best_a.copy_from_slice(&a);
            best_b.copy_from_slice(&b);
        }
        let lr = 0.05 * (1.0 - it as f64 / (iterations as f64 + 1.0)) + 1e-4;
        let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for s in 0..m {
            ma[s] = b1 * ma[s] + (1.0 - b1) * ga[s];
            va[s] = b2 * va[s] + (1.0 - b2) * ga[s] * ga[s];
            mb[s] = b1 * mb[s] + (1.0 - b1) * gb[s];
            vb[s] = b2 * vb[s] + (1.0 - b2) * gb[s] * gb[s];
            a[s] -= lr * (ma[s] / c1) / ((va[s] / c2).sqrt() + eps);
            b[s] -= lr * (mb[s] / c1) / ((vb[s] / c2).sqrt() + eps);
            b[s] = b[s].clamp(-40.0, 5.0);
        }
    }
    let r = mixture_residual(&a, &b, &target, None);
    if r < best {
        best = r;
        best_a = a;
        best_b = b;
    }
    if !best.is_finite() {
        return Err(Error::NoConvergence { residual: best });
    }
    let mixture = MixtureModel::new(best_a.iter().map(|x| x.exp()).collect(), best_b.iter().map(|x| x.exp()).collect())?;
    Ok(MixtureFit { mixture, residual: best, initial_residual: initial, iterations })
}

/// Best M-term fit to k_α on [1, T]. Rates start log-spaced on [1/T, 1] with
/// equal weights.
pub fn fit_mixture_to_powerlaw(alpha: f64, horizon: usize, m: usize) -> Result<MixtureFit> {
    if m == 0 {
        return Err(domain("mixture needs M >= 1"));
    }
    let lo = (1.0 / horizon.max(1) as f64).ln();
    let rates = (0..m)
        .map(|i| if m == 1 { (0.5 * lo).exp() } else { (lo * (1.0 - i as f64 / (m - 1) as f64)).exp() })
        .collect();
    let init = MixtureModel::new(vec![0.5 / m as f64; m], rates)?;
    fit_mixture_from(&init, alpha, horizon, 6000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PowerLaw,
    Exponential,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_phi: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub kind: ModelKind,
    pub dims: Dims,
    pub alpha0: f64,
    pub terms: usize,
    pub horizon: usize,
    pub eps: f64,
    pub delta: f64,
    pub banks: usize,
    /// Exact GL weights in place of the SOE; evaluated on the quadratic path.
    pub exact_convolution: bool,
    pub exp_lambda: f64,
    pub mixture_weights: Vec<f64>,
    pub mixture_rates: Vec<f64>,
    pub feature_seed: u64,
    /// Trailing softmax-attention window (lags 1..=window); 0 disables it.
    pub window: usize,
}

impl ModelSpec {
    pub fn power_law(dims: Dims, terms: usize, horizon: usize, banks: usize, delta: f64) -> Self {
        ModelSpec {
            name: "PowerLaw".into(),
            kind: ModelKind::PowerLaw,
            dims,
            alpha0: 0.7,
            terms,
            horizon,
            eps: 1e-3,
            delta,
            banks,
            exact_convolution: false,
            exp_lambda: 0.0,
            mixture_weights: vec![],
            mixture_rates: vec![],
            feature_seed: 0xfea7,
            window: 32,
        }
    }

    pub fn exponential(dims: Dims, lambda: f64) -> Self {
        ModelSpec { name: "Exponential".into(), kind: ModelKind::Exponential, exp_lambda: lambda, ..Self::power_law(dims, 1, 1, 1, 0.5) }
    }

    pub fn mixture(dims: Dims, weights: Vec<f64>, rates: Vec<f64>) -> Self {
        ModelSpec {
            name: format!("Mixture{}", weights.len()),
            kind: ModelKind::Mixture,
            mixture_weights: weights,
            mixture_rates: rates,
            ..Self::power_law(dims, 1, 1, 1, 0.5)
        }
    }

    /// Five components, rates log-spaced on [1/256, 1], equal weights.
    pub fn mixture5(dims: Dims) -> Self {
        let rates = (0..5).map(|i| 256f64.powf(-(i as f64) / 4.0)).collect();
        Self::mixture(dims, vec![0.2; 5], rates)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.d == 0 || d.d_k == 0 || d.d_v == 0 || d.d_phi == 0 || d.classes < 2 {
            return Err(domain("model dimensions must be positive and C >= 2"));
        }
        match self.kind {
            ModelKind::PowerLaw if self.terms == 0 || self.banks == 0 || self.horizon == 0 => {
                Err(domain("power-law model needs S, K, T >= 1"))
            }
            ModelKind::Exponential if !(self.exp_lambda > 0.0) => Err(domain("exponential rate must be positive")),
            ModelKind::Mixture
                if self.mixture_weights.is_empty()
                    || self.mixture_weights.len() != self.mixture_rates.len()
                    || self.mixture_weights.iter().chain(&self.mixture_rates).any(|&x| !(x > 0.0)) =>
            {
                Err(domain("mixture needs matching positive weights and rates"))
            }
            _ => Ok(()),
        }
    }
}

/// Offsets of each parameter block inside `Model::theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub wk: usize,
    pub wq: usize,
    pub wv: usize,
    pub readout: usize,
    pub bias: usize,
    pub kernel: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub fm: FeatureMap,
    pub theta: Vec<f64>,
    pub layout: Layout,
    pub routing: Option<RoutingConfig>,
    /// Fixed bank kernels of the power-law model.
    pub bank_kernels: Vec<BankKernel>,
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn outer_add(g: &mut [f64], a: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar != 0.0 {
            for (gv, &xv) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *gv += ar * xv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model {
    /// Projections start at the identity, the readout at N(0, 1/d_v).
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let Dims { d, d_k, d_v, d_phi, classes } = spec.dims;
        let n_kernel = match spec.kind {
            ModelKind::PowerLaw => 0,
            ModelKind::Exponential => 1,
            ModelKind::Mixture => 2 * spec.mixture_weights.len(),
        };
        let wk = 0;
        let wq = wk + d_k * d;
        let wv = wq + d_k * d;
        let readout = wv + d_v * d;
        let bias = readout + classes * d_v;
        let kernel = bias + classes;
        let layout = Layout { wk, wq, wv, readout, bias, kernel, len: kernel + n_kernel };
        let mut theta = vec![0.0; layout.len];
        for (off, rows) in [(wk, d_k), (wq, d_k), (wv, d_v)] {
            for r in 0..rows.min(d) {
                theta[off + r * d + r] = 1.0;
            }
        }
        let mut rng = RngStream::derived(seed, 0x1417);
        let sd = 1.0 / (d_v as f64).sqrt();
        for x in &mut theta[readout..bias] {
            *x = sd * rng.gaussian();
        }
        match spec.kind {
            ModelKind::Exponential => theta[kernel] = softplus_inv(spec.exp_lambda),
            ModelKind::Mixture => {
                let m = spec.mixture_weights.len();
                for i in 0..m {
                    theta[kernel + i] = softplus_inv(spec.mixture_weights[i]);
                    theta[kernel + m + i] = softplus_inv(spec.mixture_rates[i]);
                }
            }
            ModelKind::PowerLaw => {}
        }
        let (routing, bank_kernels) = if spec.kind == ModelKind::PowerLaw {
            let mut cfg = RoutingConfig::new(spec.delta, spec.banks, d + 2)?;
            let u = ((spec.alpha0 - spec.delta) / (1.0 - spec.delta)).clamp(1e-6, 1.0 - 1e-6);
            cfg.b_alpha = (u / (1.0 - u)).ln();
            let kernels = if spec.exact_convolution {
                vec![]
            } else {
                bank_orders(spec.delta, spec.banks)
                    .into_iter()
                    .map(|a| BankKernel::build(a, spec.horizon, spec.eps, spec.terms, TailPolicy::Horizon))
                    .collect::<Result<_>>()?
            };
            (Some(cfg), kernels)
        } else {
            (None, vec![])
        };
        let fm = FeatureMap::new(d_k, d_phi, spec.feature_seed);
        Ok(Model { spec, fm, theta, layout, routing, bank_kernels })
    }

    pub fn exp_lambda(&self) -> Option<f64> {
        (self.spec.kind == ModelKind::Exponential).then(|| softplus(self.theta[self.layout.kernel]))
    }

    /// (π, λ) of a mixture model.
    pub fn mixture(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.spec.kind != ModelKind::Mixture {
            return None;
        }
        let m = self.spec.mixture_weights.len();
        let k = &self.theta[self.layout.kernel..self.layout.kernel + 2 * m];
        Some((k[..m].iter().map(|&x| softplus(x)).collect(), k[m..].iter().map(|&x| softplus(x)).collect()))
    }

    /// Kernels for the accumulator path, one per bank.
    pub fn kernels(&self) -> Vec<BankKernel> {
        match self.spec.kind {
            ModelKind::PowerLaw => self.bank_kernels.clone(),
            ModelKind::Exponential => {
                let l = self.exp_lambda().unwrap_or(1.0);
                vec![BankKernel { alpha: 0.0, coeffs: vec![1.0], rates: vec![(-l).exp()], soe: None }]
            }
            ModelKind::Mixture => {
                let (p, l) = self.mixture().unwrap_or_default();
                vec![BankKernel { alpha: 0.0, coeffs: p, rates: l.iter().map(|x| (-x).exp()).collect(), soe: None }]
            }
        }
    }

    /// ŵ^{(k)}_j for every bank and j = 0..=n.
    pub fn weight_table(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        if self.spec.kind == ModelKind::PowerLaw && self.spec.exact_convolution {
            return bank_orders(self.spec.delta, self.spec.banks)
                .into_iter()
                .map(|a| if a >= 1.0 { Ok(vec![1.0; n + 1]) } else { Ok(gl_weights(a, n)?.values) })
                .collect();
        }
        Ok(self.kernels().iter().map(|k| k.weights(n)).collect())
    }

    /// Per-token (α, 0-based bank).
    pub fn route(&self, seq: &TaskSequence) -> Result<(Vec<f64>, Vec<usize>)> {
        let Some(cfg) = &self.routing else {
            return Ok((vec![1.0; seq.len()], vec![0; seq.len()]));
        };
        let mut alphas = Vec::with_capacity(seq.len());
        let mut banks = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let f = TokenFeatures { x: seq.token(i).to_vec(), entropy: seq.entropy[i], entity_flag: seq.entity_flags[i] };
            let (a, k) = assign_order(&f, cfg)?;
            alphas.push(a);
            banks.push(k - 1);
        }
        Ok((alphas, banks))
    }

    fn block(&self, off: usize, rows: usize, x: &[f64]) -> Vec<f64> {
        matvec(&self.theta[off..off + rows * x.len()], x, rows)
    }

    pub fn key(&self, x: &[f64]) -> Vec<f64> {
        self.block(self.layout.wk, self.spec.dims.d_k, x)
    }

    pub fn query(&self, x: &[f64]) -> Vec<f64> {
        self.block(self.layout.wq, self.spec.dims.d_k, x)
    }

    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        self.block(self.layout.wv, self.spec.dims.d_v, x)
    }

    pub fn logits(&self, o: &[f64]) -> Vec<f64> {
        let c = self.spec.dims.classes;
        let mut z = self.block(self.layout.readout, c, o);
        for (zi, b) in z.iter_mut().zip(&self.theta[self.layout.bias..self.layout.bias + c]) {
            *zi += b;
        }
        z
    }

    fn check_sequence(&self, seq: &TaskSequence) -> Result<()> {
        if seq.d != self.spec.dims.d || seq.classes > self.spec.dims.classes {
            return Err(Error::Dimension { expected: self.spec.dims.d, got: seq.d });
        }
        Ok(())
    }
}

/// Softmax attention with scores q·k_i/√d_k over lags 1..=w before t.
/// Returns the output, the attention weights and the first attended index.
fn local_read(qv: &[f64], keys: &[Vec<f64>], vals: &[Vec<f64>], t: usize, w: usize, d_v: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let lo = t.saturating_sub(w);
    let mut o = vec![0.0; d_v];
    if lo >= t {
        return (o, vec![], lo);
    }
    let scale = 1.0 / (qv.len() as f64).sqrt();
    let sc: Vec<f64> = (lo..t).map(|i| dot(qv, &keys[i]) * scale).collect();
    let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut a: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = a.iter().sum();
    for (j, ai) in a.iter_mut().enumerate() {
        *ai /= z;
        for (ov, &v) in o.iter_mut().zip(&vals[lo + j]) {
            *ov += *ai * v;
        }
    }
    (o, a, lo)
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_loss(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let loss = m + s.ln() - z[y];
    let mut g: Vec<f64> = e.iter().map(|x| x / s).collect();
    g[y] -= 1.0;
    (loss, g)
}

/// Loss, predictions and (optionally) the gradient of the summed loss over
/// one sequence's queries on the dense pair-wise path.
pub struct SequencePass {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub grad: Option<Vec<f64>>,
}

/// Dense forward (and backward) over one sequence's queries:
/// o_t = Σ_{i<t} ŵ_{t−i} s_{ti} v_i / (Σ_{i<t} ŵ_{t−i} s_{ti} + ε₀), s_{ti} = φ(q_t)·φ(k_i).
pub fn sequence_pass(model: &Model, seq: &TaskSequence, table: &[Vec<f64>], want_grad: bool) -> Result<SequencePass> {
    model.check_sequence(seq)?;
    let Dims { d, d_k, d_v, d_phi, classes } = model.spec.dims;
    let lay = model.layout;
    let (_, banks) = model.route(seq)?;
    let used = seq.queries.iter().map(|q| q.t).max().unwrap_or(0);
    if table.iter().any(|w| w.len() <= used) {
        return Err(domain("kernel table shorter than the longest lag"));
    }
    let keys: Vec<Vec<f64>> = (0..used).map(|i| model.key(seq.token(i))).collect();
    let phik: Vec<Vec<f64>> = keys.iter().map(|k| model.fm.apply_unchecked(k)).collect();
    let vals: Vec<Vec<f64>> = (0..used).map(|i| model.value(seq.token(i))).collect();

    let mut grad = want_grad.then(|| vec![0.0; lay.len]);
    let mut g_phik = if want_grad { vec![vec![0.0; d_phi]; used] } else { vec![] };
    let mut g_v = if want_grad { vec![vec![0.0; d_v]; used] } else { vec![] };
    let mut g_key = if want_grad { vec![vec![0.0; d_k]; used] } else { vec![] };
    let win = model.spec.window;
    let mut g_table: Vec<Vec<f64>> = if want_grad { table.iter().map(|w| vec![0.0; w.len()]).collect() } else { vec![] };
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(seq.queries.len());
    let mut s = vec![0.0; used];
    let mut a = vec![0.0; used];
    for q in &seq.queries {
        let t = q.t;
        let qv = model.query(&q.key);
        let phq = model.fm.apply_unchecked(&qv);
        let mut num = vec![0.0; d_v];
        let mut den = EPS0;
        for i in 0..t {
            s[i] = dot(&phq, &phik[i]);
            a[i] = table[banks[i]][t - i] * s[i];
            den += a[i];
            for (n, &v) in num.iter_mut().zip(&vals[i]) {
                *n += a[i] * v;
            }
        }
        let o: Vec<f64> = num.iter().map(|x| x / den).collect();
        let (o_loc, att, lo) = local_read(&qv, &keys, &vals, t, win, d_v);
        let o_sum: Vec<f64> = o.iter().zip(&o_loc).map(|(x, y)| x + y).collect();
        let z = model.logits(&o_sum);
        let (l, gz) = log_softmax_loss(&z, q.label);
        loss += l;
        predictions.push(argmax(&z));
        let Some(g) = grad.as_mut() else { continue };
        outer_add(&mut g[lay.readout..lay.bias], &gz, &o_sum);
        for (gb, &x) in g[lay.bias..lay.bias + classes].iter_mut().zip(&gz) {
            *gb += x;
        }
        let mut go = vec![0.0; d_v];
        for (c, &gzc) in gz.iter().enumerate() {
            for (gov, &r) in go.iter_mut().zip(&model.theta[lay.readout + c * d_v..lay.readout + (c + 1) * d_v]) {
                *gov += gzc * r;
            }
        }
        let god = dot(&go, &o);
        let mut g_phq = vec![0.0; d_phi];
        for i in 0..t {
            let w = table[banks[i]][t - i];
            let da = (dot(&go, &vals[i]) - god) / den;
            let av = a[i] / den;
            for (gv, &x) in g_v[i].iter_mut().zip(&go) {
                *gv += av * x;
            }
            let ds = w * da;
            if ds != 0.0 {
                for ((gk, gq), (&pq, &pk)) in g_phik[i].iter_mut().zip(g_phq.iter_mut()).zip(phq.iter().zip(&phik[i])) {
                    *gk += ds * pq;
                    *gq += ds * pk;
                }
            }
            g_table[banks[i]][t - i] += s[i] * da;
        }
        let mut g_qv = model.fm.vjp(&qv, &phq, &g_phq);
        if !att.is_empty() {
            let da: Vec<f64> = (lo..t).map(|i| dot(&go, &vals[i])).collect();
            let mean: f64 = att.iter().zip(&da).map(|(a, d)| a * d).sum();
            let scale = 1.0 / (d_k as f64).sqrt();
            for (j, i) in (lo..t).enumerate() {
                for (gv, &x) in g_v[i].iter_mut().zip(&go) {
                    *gv += att[j] * x;
                }
                let ds = att[j] * (da[j] - mean) * scale;
                for ((gq, gk), (&k, &qx)) in g_qv.iter_mut().zip(g_key[i].iter_mut()).zip(keys[i].iter().zip(&qv)) {
                    *gq += ds * k;
                    *gk += ds * qx;
                }
            }
        }
        outer_add(&mut g[lay.wq..lay.wq + d_k * d], &g_qv, &q.key);
    }
    if let Some(g) = grad.as_mut() {
        for i in 0..used {
            let x = seq.token(i);
            let mut g_k = model.fm.vjp(&keys[i], &phik[i], &g_phik[i]);
            for (a, b) in g_k.iter_mut().zip(&g_key[i]) {
                *a += b;
            }
            outer_add(&mut g[lay.wk..lay.wk + d_k * d], &g_k, x);
            outer_add(&mut g[lay.wv..lay.wv + d_v * d], &g_v[i], x);
        }
        kernel_grad(model, &g_table, g);
    }
    Ok(SequencePass { loss, predictions, grad })
}

/// Chains ∂L/∂ŵ_j into the kernel parameters.
fn kernel_grad(model: &Model, g_table: &[Vec<f64>], g: &mut [f64]) {
    let k0 = model.layout.kernel;
    match model.spec.kind {
        ModelKind::PowerLaw => {}
        ModelKind::Exponential => {
            let th = model.theta[k0];
            let l = softplus(th);
            let r = (-l).exp();
            let mut acc = 0.0;
            let mut w = 1.0;
            for (j, &gj) in g_table[0].iter().enumerate() {
                acc += gj * -(j as f64) * w;
                w *= r;
            }
            g[k0] += acc * sigmoid(th);
        }
        ModelKind::Mixture => {
            let m = model.spec.mixture_weights.len();
            for c in 0..m {
                let (ta, tb) = (model.theta[k0 + c], model.theta[k0 + m + c]);
                let (p, l) = (softplus(ta), softplus(tb));
                let r = (-l).exp();
                let (mut ga, mut gb) = (0.0, 0.0);
                let mut e = 1.0;
                for (j, &gj) in g_table[0].iter().enumerate() {
                    ga += gj * e;
                    gb += gj * p * -(j as f64) * e;
                    e *= r;
                }
                g[k0 + c] += ga * sigmoid(ta);
                g[k0 + m + c] += gb * sigmoid(tb);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasticitySchedule {
    /// Training sequences used to refine per-token orders.
    pub sequences: usize,
    pub iterations: usize,
    pub eta: f64,
    /// Ridge penalty of the routing regression.
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plasticity: Option<PlasticitySchedule>,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, batch: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            lr,
            batch,
            seed,
            clip: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plasticity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(domain("learning rate must be positive and batch >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasticityLog {
    pub epoch: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Mean routed order of keyed tokens (anchors, entity mentions) and of
    /// the rest, before refinement.
    pub routed_alpha_keyed: f64,
    pub routed_alpha_other: f64,
    /// The same means after refinement.
    pub mean_alpha_keyed: f64,
    pub mean_alpha_other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean per-query loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub plasticity: Vec<PlasticityLog>,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    fn update(&mut self, theta: &mut [f64], grad: &mut [f64], cfg: &TrainConfig, decay_until: usize) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.clip {
            grad.iter_mut().for_each(|g| *g *= cfg.clip / norm);
        }
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let wd = if i < decay_until { cfg.weight_decay * theta[i] } else { 0.0 };
            theta[i] -= cfg.lr * ((self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps) + wd);
        }
    }
}

/// Runs `f` over `items` on up to `available_parallelism` threads and
/// returns results in input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|sc| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| sc.spawn(move || c.iter().map(f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().unwrap_or_default()).collect()
    })
}

/// Mean per-query cross-entropy and the summed gradient over `seqs`.
fn batch_grad(model: &Model, seqs: &[&TaskSequence], table: &[Vec<f64>]) -> Result<(f64, usize, Vec<f64>)> {
    let outs = par_map(seqs, |s| sequence_pass(model, s, table, true));
    let mut grad = vec![0.0; model.layout.len];
    let mut loss = 0.0;
    let mut count = 0;
    for (o, s) in outs.into_iter().zip(seqs) {
        let o = o?;
        loss += o.loss;
        count += s.queries.len();
        if let Some(g) = o.grad {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, count, grad))
}

/// AdamW on the dense path. Power-law models refine their routing between
/// epochs when `cfg.plasticity` is set.
pub fn train(mut model: Model, data: &[TaskSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(domain("training data is empty"));
    }
    let n_max = data.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut opt = AdamW { m: vec![0.0; model.layout.len], v: vec![0.0; model.layout.len], step: 0 };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut logs = vec![];
    let mut initial = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = RngStream::derived(cfg.seed, 0x7a17 + epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let (mut ep_loss, mut ep_count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let table = model.weight_table(n_max)?;
            let seqs: Vec<&TaskSequence> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, count, mut grad) = batch_grad(&model, &seqs, &table)?;
            if count == 0 {
                continue;
            }
            let mean = loss / count as f64;
            if initial.is_nan() {
                initial = mean;
            }
            if !mean.is_finite() || mean > 10.0 * initial {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} batch {bi}: loss {mean} vs initial {initial} (lr {}, |θ| {:.3e})",
                    cfg.lr,
                    model.theta.iter().map(|x| x * x).sum::<f64>().sqrt()
                )));
            }
            grad.iter_mut().for_each(|g| *g /= count as f64);
            opt.update(&mut model.theta, &mut grad, cfg, model.layout.bias);
            ep_loss += loss;
            ep_count += count;
        }
        curve.push(ep_loss / ep_count.max(1) as f64);
        if let (Some(p), ModelKind::PowerLaw) = (&cfg.plasticity, model.spec.kind) {
            logs.push(refine_routing(&mut model, data, p, epoch)?);
        }
    }
    Ok(TrainOutcome { model, loss_curve: curve, initial_loss: initial, plasticity: logs })
}

fn routing_features(seq: &TaskSequence, i: usize) -> Vec<f64> {
    let mut f = seq.token(i).to_vec();
    f.push(seq.entropy[i]);
    f.push(seq.entity_flags[i] as f64);
    f
}

/// Solves (XᵀX + ρI) w = Xᵀz by Gaussian elimination with partial pivoting.
fn ridge_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap_or(c);
        if a[p][c].abs() < 1e-300 {
            return Err(Error::NoConvergence { residual: 0.0 });
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Ok(x)
}

/// Per-token projected gradient steps on the retrieval loss, then a ridge
/// regression of (W_α, b_α) onto the logits of the refined orders.
pub fn refine_routing(model: &mut Model, data: &[TaskSequence], p: &PlasticitySchedule, epoch: usize) -> Result<PlasticityLog> {
    let Some(cfg) = model.routing.clone() else {
        return Err(domain("plasticity needs a routed power-law model"));
    };
    let template = build_soe_terms(model.spec.alpha0, model.spec.horizon, model.spec.eps, model.spec.terms, TailPolicy::Horizon)?;
    let kernel = OrderKernel::new(template);
    let nf = cfg.feature_dim();
    let mut xtx = vec![vec![0.0; nf + 1]; nf + 1];
    let mut xtz = vec![0.0; nf + 1];
    let (mut before, mut after) = (0.0, 0.0);
    let (mut keyed, mut nk, mut other, mut no) = (0.0, 0usize, 0.0, 0usize);
    let (mut rk, mut ro) = (0.0, 0.0);
    let take = p.sequences.min(data.len());
    let stride = (data.len() / take.max(1)).max(1);
    let window = model.spec.window;
    for seq in data.iter().step_by(stride).take(take) {
        // lags inside the attention window are served by it
        let far: Vec<_> = seq.queries.iter().filter(|q| q.t - q.source > window).collect();
        let used = far.iter().map(|q| q.t).max().unwrap_or(0);
        if used == 0 {
            continue;
        }
        let trace = RetrievalTrace {
            keys: (0..used).map(|i| model.key(seq.token(i))).collect(),
            queries: far.iter().map(|q| TraceQuery { t: q.t, source: q.source, key: model.query(&q.key) }).collect(),
        };
        let (mut alphas, _) = model.route(seq)?;
        alphas.truncate(used);
        for (i, &a) in alphas.iter().enumerate() {
            if seq.entity_flags[i] == 1 {
                rk += a;
            } else {
                ro += a;
            }
        }
        let mut f = retrieval_loss(&trace, &alphas, &kernel)?;
        before += f;
        let mut eta = p.eta;
        for _ in 0..p.iterations {
            let g = loss_alpha_grad_all(&trace, &alphas, &kernel)?;
            // halve the step until the loss does not increase
            for _ in 0..8 {
                let mut trial = alphas.clone();
                project_step(&mut trial, &g, eta, cfg.delta);
                let ft = retrieval_loss(&trace, &trial, &kernel)?;
                if ft <= f {
                    alphas = trial;
                    f = ft;
                    break;
                }
                eta *= 0.5;
            }
        }
        after += f;
        for (i, &a) in alphas.iter().enumerate() {
            let x = routing_features(seq, i);
            let u = ((a - cfg.delta) / (1.0 - cfg.delta)).clamp(1e-3, 1.0 - 1e-3);
            let z = (u / (1.0 - u)).ln();
            for r in 0..=nf {
                let xr = if r < nf { x[r] } else { 1.0 };
                xtz[r] += xr * z;
                for c in 0..=nf {
                    xtx[r][c] += xr * if c < nf { x[c] } else { 1.0 };
                }
            }
            if seq.entity_flags[i] == 1 {
                keyed += a;
                nk += 1;
            } else {
                other += a;
                no += 1;
            }
        }
    }
    for (r, row) in xtx.iter_mut().enumerate().take(nf) {
        row[r] += p.ridge;
    }
    let w = ridge_solve(xtx, xtz)?;
    let routing = model.routing.as_mut().ok_or_else(|| domain("routing vanished"))?;
    routing.w_alpha = w[..nf].to_vec();
    routing.b_alpha = w[nf];
    Ok(PlasticityLog {
        epoch,
        loss_before: before,
        loss_after: after,
        routed_alpha_keyed: rk / nk.max(1) as f64,
        routed_alpha_other: ro / no.max(1) as f64,
        mean_alpha_keyed: keyed / nk.max(1) as f64,
        mean_alpha_other: other / no.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub label: String,
    pub correct: u64,
    pub total: u64,
    /// Percent; NaN for an empty bucket.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub edges: Vec<usize>,
    pub buckets: Vec<BucketResult>,
    pub overall: BucketResult,
    /// Bucket results per Zipf exponent (keyed by its decimal form).
    pub per_beta: BTreeMap<String, Vec<BucketResult>>,
    pub empty_buckets: Vec<String>,
    /// confusion[y][ŷ].
    pub confusion: Vec<Vec<u64>>,
    pub runtime_s: f64,
    /// Accumulator multiply-adds per ingested token (decay + add).
    pub flops_per_token: f64,
    /// Multiply-adds of one readout over all banks.
    pub flops_per_query: f64,
    /// Per-token α histogram of the routed model: counts per bank.
    pub bank_counts: Vec<u64>,
}

pub const BUCKET_LABELS: [&str; 3] = ["short", "medium", "long"];

fn bucket_label(b: usize, nb: usize) -> String {
    if nb == 3 {
        BUCKET_LABELS[b].to_string()
    } else {
        format!("bucket{b}")
    }
}

fn tally(hits: &[(usize, bool)], edges: &[usize]) -> Result<Vec<BucketResult>> {
    let lags: Vec<usize> = hits.iter().map(|h| h.0).collect();
    let parts = bucket_lags(&lags, edges)?;
    let nb = parts.len();
    Ok(parts
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let correct = idx.iter().filter(|&&i| hits[i].1).count() as u64;
            let total = idx.len() as u64;
            let accuracy = if total > 0 { 100.0 * correct as f64 / total as f64 } else { f64::NAN };
            BucketResult { label: bucket_label(b, nb), correct, total, accuracy }
        })
        .collect())
}

/// A labelled evaluation set: sequences plus the Zipf exponent each came
/// from, if any.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    pub seqs: &'a [TaskSequence],
    pub betas: &'a [Option<f64>],
    pub edges: &'a [usize],
}

/// Predictions on the accumulator path: every token is ingested in order and
/// each query reads after its position's decay.
pub fn accumulator_predictions(model: &Model, seq: &TaskSequence) -> Result<(Vec<usize>, u64, u64)> {
    model.check_sequence(seq)?;
    let (_, banks) = model.route(seq)?;
    let d_v = model.spec.dims.d_v;
    let mut acc = RetrievalAccumulators::new(model.kernels(), model.spec.dims.d_phi, d_v);
    let keys: Vec<Vec<f64>> = (0..seq.len()).map(|i| model.key(seq.token(i))).collect();
    let vals: Vec<Vec<f64>> = (0..seq.len()).map(|i| model.value(seq.token(i))).collect();
    let mut order: Vec<usize> = (0..seq.queries.len()).collect();
    order.sort_by_key(|&i| seq.queries[i].t);
    let mut preds = vec![0; seq.queries.len()];
    let mut next = 0;
    let mut read_flops = 0;
    for t in 0..=seq.len() {
        if t > 0 {
            acc.decay();
        }
        while next < order.len() && seq.queries[order[next]].t == t {
            let q = &seq.queries[order[next]];
            let qv = model.query(&q.key);
            let phq = model.fm.apply_unchecked(&qv);
            let before = acc.flops;
            let mut o = acc.retrieve_features(&phq);
            read_flops += acc.flops - before;
            let (o_loc, _, _) = local_read(&qv, &keys, &vals, t, model.spec.window, d_v);
            for (a, b) in o.iter_mut().zip(&o_loc) {
                *a += b;
            }
            preds[order[next]] = argmax(&model.logits(&o));
            next += 1;
        }
        if t < seq.len() {
            let phk = model.fm.apply_unchecked(&keys[t]);
            acc.add_features(&phk, &vals[t], banks[t] + 1)?;
        }
    }
    Ok((preds, acc.flops - read_flops, read_flops))
}

/// Top-1 accuracy per lag bucket. Power-law SOE, exponential and mixture
/// models read through the accumulators; the exact-convolution ablation uses
/// the dense path.
pub fn evaluate(model: &Model, set: &EvalSet) -> Result<EvalReport> {
    let start = Instant::now();
    let dense = model.spec.kind == ModelKind::PowerLaw && model.spec.exact_convolution;
    let n_max = set.seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let table = if dense { model.weight_table(n_max)? } else { vec![] };
    let outs = par_map(set.seqs, |s| -> Result<(Vec<usize>, u64, u64, Vec<usize>)> {
        let (_, banks) = model.route(s)?;
        let (p, f, r) = if dense {
            (sequence_pass(model, s, &table, false)?.predictions, 0, 0)
        } else {
            accumulator_predictions(model, s)?
        };
        Ok((p, f, r, banks))
    });
    let c = model.spec.dims.classes;
    let mut confusion = vec![vec![0u64; c]; c];
    let mut hits = vec![];
    let mut per_beta_hits: BTreeMap<String, Vec<(usize, bool)>> = BTreeMap::new();
    let (mut tok_flops, mut tokens, mut q_flops, mut queries) = (0u64, 0u64, 0u64, 0u64);
    let mut bank_counts = vec![0u64; model.spec.banks.max(1)];
    for ((out, seq), beta) in outs.into_iter().zip(set.seqs).zip(set.betas.iter().chain(std::iter::repeat(&None))) {
        let (preds, f, r, banks) = out?;
        tok_flops += f;
        q_flops += r;
        tokens += seq.len() as u64;
        queries += seq.queries.len() as u64;
        for b in banks {
            if b < bank_counts.len() {
                bank_counts[b] += 1;
            }
        }
        for (q, &p) in seq.queries.iter().zip(&preds) {
            confusion[q.label][p.min(c - 1)] += 1;
            let h = (q.t - q.source, p == q.label);
            hits.push(h);
            if let Some(b) = beta {
                per_beta_hits.entry(format!("{b}")).or_default().push(h);
            }
        }
    }
    let buckets = tally(&hits, set.edges)?;
    let correct = hits.iter().filter(|h| h.1).count() as u64;
    let total = hits.len() as u64;
    let overall = BucketResult {
        label: "overall".into(),
        correct,
        total,
        accuracy: if total > 0 { 100.0 * correct as f64 / total as f64 } else { f64::NAN },
    };
    let per_beta = per_beta_hits.iter().map(|(k, h)| Ok((k.clone(), tally(h, set.edges)?))).collect::<Result<_>>()?;
    let empty_buckets = buckets.iter().filter(|b| b.total == 0).map(|b| b.label.clone()).collect();
    Ok(EvalReport {
        model: model.spec.name.clone(),
        edges: set.edges.to_vec(),
        buckets,
        overall,
        per_beta,
        empty_buckets,
        confusion,
        runtime_s: start.elapsed().as_secs_f64(),
        flops_per_token: tok_flops as f64 / tokens.max(1) as f64,
        flops_per_query: q_flops as f64 / queries.max(1) as f64,
        bank_counts,
    })
}

/// Dense-path accuracy over a set (used for validation tuning).
pub fn dense_accuracy(model: &Model, seqs: &[TaskSequence]) -> Result<f64> {
    let n_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let table = model.weight_table(n_max)?;
    let outs = par_map(seqs, |s| sequence_pass(model, s, &table, false));
    let (mut c, mut t) = (0usize, 0usize);
    for (o, s) in outs.into_iter().zip(seqs) {
        let o = o?;
        c += o.predictions.iter().zip(&s.queries).filter(|(p, q)| **p == q.label).count();
        t += s.queries.len();
    }
    Ok(100.0 * c as f64 / t.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub preset: String,
    pub seed: u64,
    pub n: usize,
    /// Training sequences per Zipf exponent (or in total for the copy task).
    pub train_count: usize,
    pub test_count: usize,
    pub betas: Vec<f64>,
    /// Zipf queries per sequence.
    pub queries: usize,
    pub key_scale: f64,
    pub dims: Dims,
    pub terms: usize,
    pub banks: usize,
    pub delta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub tune_epochs: usize,
    pub exp_grid: Vec<f64>,
    /// Every `val_every`-th training sequence is held out for tuning.
    pub val_every: usize,
    pub plasticity: PlasticitySchedule,
    pub ablations: bool,
}

impl ExperimentConfig {
    pub fn desk(task: TaskKind, seed: u64) -> Self {
        ExperimentConfig {
            task,
            preset: "desk".into(),
            seed,
            n: 2000,
            train_count: if task == TaskKind::Zipf { 16 } else { 40 },
            test_count: if task == TaskKind::Zipf { 32 } else { 40 },
            betas: if task == TaskKind::Zipf { vec![1.0, 1.5, 2.0] } else { vec![] },
            queries: 16,
            key_scale: 4.0,
            dims: Dims { d: 32, d_k: 32, d_v: 32, d_phi: 64, classes: 16 },
            terms: 10,
            banks: 4,
            delta: 0.1,
            epochs: 6,
            lr: 1e-2,
            batch: 1,
            tune_epochs: 1,
            exp_grid: (0..=8).map(|k| 10f64.powf(-(k as f64) / 2.0)).collect(),
            val_every: 10,
            plasticity: PlasticitySchedule { sequences: 6, iterations: 10, eta: 20.0, ridge: 1e-2 },
            ablations: true,
        }
    }

    pub fn paper(task: TaskKind, seed: u64) -> Self {
        let n = if task == TaskKind::Zipf { 10_000 } else { 8000 };
        ExperimentConfig {
            preset: "paper".into(),
            n,
            train_count: if task == TaskKind::Zipf { 5000 / 3 } else { 5000 },
            test_count: if task == TaskKind::Zipf { 200 } else { 500 },
            terms: 15,
            epochs: 20,
            lr: 3e-4,
            batch: 16,
            plasticity: PlasticitySchedule { sequences: 32, iterations: 5, eta: 0.05, ridge: 1e-2 },
            ..Self::desk(task, seed)
        }
    }

    pub fn preset(name: &str, task: TaskKind, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(task, seed)),
            "paper" => Ok(Self::paper(task, seed)),
            _ => Err(domain(format!("unknown preset {name:?} (expected desk or paper)"))),
        }
    }

    fn task_config(&self, beta: Option<f64>, split: u64, count: usize) -> TaskConfig {
        let seed = self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(split);
        let mut t = match beta {
            Some(b) => TaskConfig::zipf_desk(b, seed),
            None => TaskConfig::copy_desk(seed),
        };
        t.n = self.n;
        t.count = count;
        t.d = self.dims.d;
        t.classes = self.dims.classes;
        t.queries = self.queries;
        t.key_scale = self.key_scale;
        t
    }

    /// (train, test) sequences with their Zipf exponents.
    pub fn datasets(&self) -> Result<(Vec<TaskSequence>, Vec<Option<f64>>, Vec<TaskSequence>, Vec<Option<f64>>)> {
        let mut out = (vec![], vec![], vec![], vec![]);
        let groups: Vec<Option<f64>> =
            if self.task == TaskKind::Zipf { self.betas.iter().map(|&b| Some(b)).collect() } else { vec![None] };
        for (gi, &beta) in groups.iter().enumerate() {
            let tr = gen_task(&self.task_config(beta, 2 * gi as u64, self.train_count))?;
            let te = gen_task(&self.task_config(beta, 2 * gi as u64 + 1, self.test_count))?;
            out.1.extend(std::iter::repeat_n(beta, tr.len()));
            out.0.extend(tr);
            out.3.extend(std::iter::repeat_n(beta, te.len()));
            out.2.extend(te);
        }
        Ok(out)
    }

    pub fn edges(&self) -> Vec<usize> {
        self.task_config(self.betas.first().copied().filter(|_| self.task == TaskKind::Zipf), 0, 1).bucket_edges()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub eval: EvalReport,
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub plasticity: Vec<PlasticityLog>,
    pub train_s: f64,
    /// Learned kernel parameters (λ for Exponential; π then λ for mixtures).
    pub kernel_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub edges: Vec<usize>,
    /// (λ, validation accuracy) for every grid point.
    pub exp_tuning: Vec<(f64, f64)>,
    pub rows: Vec<ModelRow>,
    pub runtime_s: f64,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub const POWER_LAW: &str = "PowerLaw";
pub const EXPONENTIAL: &str = "Exponential";
pub const MIXTURE5: &str = "Mixture5";
pub const ABLATION_S1: &str = "PowerLaw(S=1)";
pub const ABLATION_EXACT: &str = "PowerLaw(exact)";

fn kernel_params(m: &Model) -> Vec<f64> {
    match m.spec.kind {
        ModelKind::Exponential => m.exp_lambda().into_iter().collect(),
        ModelKind::Mixture => m.mixture().map(|(p, l)| p.into_iter().chain(l).collect()).unwrap_or_default(),
        ModelKind::PowerLaw => m.routing.as_ref().map(|r| vec![r.b_alpha]).unwrap_or_default(),
    }
}

/// Trains and evaluates PowerLaw, Mixture5 and the validation-tuned
/// Exponential, plus the S = 1 and exact-convolution ablations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let (train_all, _, test, test_betas) = cfg.datasets()?;
    let every = cfg.val_every.max(2);
    let (mut train_set, mut val) = (vec![], vec![]);
    for (i, s) in train_all.into_iter().enumerate() {
        if i % every == every - 1 {
            val.push(s);
        } else {
            train_set.push(s);
        }
    }
    let edges = cfg.edges();
    let set = EvalSet { seqs: &test, betas: &test_betas, edges: &edges };
    let mut tc = TrainConfig::new(cfg.epochs, cfg.lr, cfg.batch, cfg.seed);
    let model_seed = cfg.seed ^ 0x5eed;

    let mut tuning = vec![];
    let mut best = (f64::NEG_INFINITY, cfg.exp_grid.first().copied().unwrap_or(1e-2));
    let tune = TrainConfig { epochs: cfg.tune_epochs, ..tc.clone() };
    for &lam in &cfg.exp_grid {
        let m = Model::new(ModelSpec::exponential(cfg.dims, lam), model_seed)?;
        let m = train(m, &train_set, &tune)?.model;
        let acc = if val.is_empty() { 0.0 } else { dense_accuracy(&m, &val)? };
        tuning.push((lam, acc));
        if acc > best.0 {
            best = (acc, lam);
        }
    }

    let pl = |name: &str, terms: usize, exact: bool| {
        let mut s = ModelSpec::power_law(cfg.dims, terms, cfg.n, cfg.banks, cfg.delta);
        s.name = name.into();
        s.exact_convolution = exact;
        s
    };
    let mut specs = vec![
        (pl(POWER_LAW, cfg.terms, false), true),
        (ModelSpec { name: MIXTURE5.into(), ..ModelSpec::mixture5(cfg.dims) }, false),
        (ModelSpec::exponential(cfg.dims, best.1), false),
    ];
    if cfg.ablations {
        specs.push((pl(ABLATION_S1, 1, false), true));
        specs.push((pl(ABLATION_EXACT, cfg.terms, true), true));
    }
    let mut rows = vec![];
    for (spec, plastic) in specs {
        let t0 = Instant::now();
        tc.plasticity = plastic.then(|| cfg.plasticity.clone());
        let out = train(Model::new(spec, model_seed)?, &train_set, &tc)?;
        let train_s = t0.elapsed().as_secs_f64();
        let eval = evaluate(&out.model, &set)?;
        rows.push(ModelRow {
            name: out.model.spec.name.clone(),
            kernel_params: kernel_params(&out.model),
            eval,
            loss_curve: out.loss_curve,
            initial_loss: out.initial_loss,
            plasticity: out.plasticity,
            train_s,
        });
    }
    Ok(ExperimentReport { config: cfg.clone(), edges, exp_tuning: tuning, rows, runtime_s: start.elapsed().as_secs_f64() })
}

/// Mean and range of one accuracy across seeds (NaN entries skipped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SeedStat {
    pub fn of(xs: &[f64]) -> SeedStat {
        let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return SeedStat { mean: f64::NAN, min: f64::NAN, max: f64::NAN };
        }
        SeedStat {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub buckets: Vec<SeedStat>,
    pub overall: SeedStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub task: TaskKind,
    pub preset: String,
    pub seeds: Vec<u64>,
    pub edges: Vec<usize>,
    pub bucket_labels: Vec<String>,
    pub models: Vec<ModelSummary>,
    pub runtime_s: f64,
}

impl ExperimentSummary {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// Aggregates per-seed reports of one task into mean ± range per model.
pub fn summarize(reports: &[ExperimentReport]) -> Result<ExperimentSummary> {
    let first = reports.first().ok_or_else(|| domain("no reports to summarize"))?;
    let mut models = vec![];
    for row in &first.rows {
        let rows: Vec<&ModelRow> = reports.iter().filter_map(|r| r.row(&row.name)).collect();
        let nb = row.eval.buckets.len();
        let buckets = (0..nb)
            .map(|b| SeedStat::of(&rows.iter().filter_map(|r| r.eval.buckets.get(b).map(|x| x.accuracy)).collect::<Vec<_>>()))
            .collect();
        let overall = SeedStat::of(&rows.iter().map(|r| r.eval.overall.accuracy).collect::<Vec<_>>());
        models.push(ModelSummary { name: row.name.clone(), buckets, overall });
    }
    Ok(ExperimentSummary {
        task: first.config.task,
        preset: first.config.preset.clone(),
        seeds: reports.iter().map(|r| r.config.seed).collect(),
        edges: first.edges.clone(),
        bucket_labels: first.rows.first().map(|r| r.eval.buckets.iter().map(|b| b.label.clone()).collect()).unwrap_or_default(),
        models,
        runtime_s: reports.iter().map(|r| r.runtime_s).sum(),
    })
}

/// Runs one preset over several seeds.
pub fn run_seeds(task: TaskKind, preset: &str, seeds: &[u64]) -> Result<(Vec<ExperimentReport>, ExperimentSummary)> {
    let reports = seeds
        .iter()
        .map(|&s| run_experiment(&ExperimentConfig::preset(preset, task, s)?))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&reports)?;
    Ok((reports, summary))
}

/// Outcome of one table-level check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Seed-mean checks on one task's summary: short-bucket parity (3 points),
/// long-bucket ordering, the PowerLaw−Exponential long gap (10 points), the
/// S = 1 ablation against Exponential (5 points, long) and the exact ablation
/// against PowerLaw (2 points, overall).
pub fn table_checks(s: &ExperimentSummary) -> Vec<TableCheck> {
    let get = |m: &str, b: Option<usize>| -> f64 {
        s.model(m).map_or(f64::NAN, |x| match b {
            Some(b) => x.buckets.get(b).map_or(f64::NAN, |v| v.mean),
            None => x.overall.mean,
        })
    };
    let last = s.bucket_labels.len().saturating_sub(1);
    let (pl, m5, ex) = (get(POWER_LAW, Some(last)), get(MIXTURE5, Some(last)), get(EXPONENTIAL, Some(last)));
    let shorts = [POWER_LAW, MIXTURE5, EXPONENTIAL].map(|m| get(m, Some(0)));
    let spread = shorts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - shorts.iter().cloned().fold(f64::INFINITY, f64::min);
    let s1 = get(ABLATION_S1, Some(last));
    let (exact, plo) = (get(ABLATION_EXACT, None), get(POWER_LAW, None));
    let task = match s.task {
        TaskKind::Zipf => "zipf",
        TaskKind::Copy => "copy",
    };
    let check = |name: &str, pass: bool, detail: String| TableCheck { name: format!("{task}: {name}"), pass, detail };
    vec![
        check(
            "short-bucket parity",
            spread <= 3.0,
            format!("PL {:.1} M5 {:.1} Exp {:.1}, spread {spread:.1} (<= 3)", shorts[0], shorts[1], shorts[2]),
        ),
        check("long-bucket ordering", pl > m5 && m5 > ex, format!("PL {pl:.1} > M5 {m5:.1} > Exp {ex:.1}")),
        check("long-bucket gap", pl - ex >= 10.0, format!("PL - Exp = {:.1} (>= 10)", pl - ex)),
        check("S=1 ablation", (s1 - ex).abs() <= 5.0, format!("S=1 {s1:.1} vs Exp {ex:.1} (within 5)")),
        check("exact ablation", (exact - plo).abs() <= 2.0, format!("exact {exact:.1} vs PL {plo:.1} overall (within 2)")),
    ]
}
