//! Numerical checks of the quantisation bound and the exponential-mixture
//! separation bound.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::banks::quantise;
use crate::error::{domain, Result};
use crate::numerics::{digamma, gamma, integrate_adaptive, log_gamma, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if weights.len() != rates.len() || weights.is_empty() {
            return Err(domain("mixture needs equal, nonzero numbers of weights and rates"));
        }
        if weights.iter().any(|&p| !(p >= 0.0)) || rates.iter().any(|&l| !(l > 0.0)) {
            return Err(domain("mixture weights must be >= 0 and rates > 0"));
        }
        Ok(MixtureModel { weights, rates })
    }

    pub fn m(&self) -> usize {
        self.weights.len()
    }

    /// C_f = Σ π_m.
    pub fn c_f(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Λ = min λ_m.
    pub fn big_lambda(&self) -> f64 {
        self.rates.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Σ_{m,m′} π_m π_{m′}/(λ_m + λ_{m′}).
    pub fn cross_sum(&self) -> f64 {
        let mut s = 0.0;
        for (pa, la) in self.weights.iter().zip(&self.rates) {
            for (pb, lb) in self.weights.iter().zip(&self.rates) {
                s += pa * pb / (la + lb);
            }
        }
        s
    }

    /// R = cross_sum / C_f²; zero for the empty mixture.
    pub fn r(&self) -> f64 {
        let c = self.c_f();
        if c > 0.0 {
            self.cross_sum() / (c * c)
        } else {
            0.0
        }
    }

    /// f(t) = Σ π_m e^{−λ_m t}.
    pub fn eval(&self, t: f64) -> f64 {
        self.weights.iter().zip(&self.rates).map(|(p, l)| p * (-l * t).exp()).sum()
    }
}

/// k_α(t) = t^{α−1}/Γ(α).
pub fn k_alpha(alpha: f64, t: f64) -> f64 {
    ((alpha - 1.0) * t.ln() - log_gamma(alpha).unwrap_or(f64::NAN)).exp()
}

/// g_α(t) = t^{α−1}.
pub fn g_alpha(alpha: f64, t: f64) -> f64 {
    t.powf(alpha - 1.0)
}

/// N_α(T) = ∫_1^T t^{2α−2} dt.
pub fn n_alpha(alpha: f64, t: f64) -> Result<f64> {
    if !(t >= 1.0) {
        return Err(domain(format!("n_alpha requires T >= 1, got {t}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let x = 2.0 * alpha - 1.0;
    let lt = t.ln();
    if (x * lt).abs() < 1e-300 {
        return Ok(lt);
    }
    Ok((x * lt).exp_m1() / x)
}

/// ∫_1^T (f(t) − t^{α−1})² dt by adaptive integration in ln t.
pub fn mixture_l2_error(mix: &MixtureModel, alpha: f64, t: f64) -> Result<f64> {
    let n = n_alpha(alpha, t)?;
    let tol = 1e-8 * n.max(1.0);
    let f = |u: f64| {
        let s = u.exp();
        let d = mix.eval(s) - g_alpha(alpha, s);
        d * d * s
    };
    // split at the fastest component's time scale so the integrator sees the knee
    let knee = (1.0 / mix.big_lambda().max(1e-300)).ln().clamp(0.0, t.ln());
    let mut total = 0.0;
    let mut lo = 0.0;
    for hi in [knee, t.ln()] {
        if hi > lo {
            total += integrate_adaptive(f, lo, hi, tol / 2.0, 1e-13)?.value;
            lo = hi;
        }
    }
    Ok(total)
}

/// N_α(T) − 2 C_f Γ(α) Λ^{−α} − Σ π_m π_{m′}/(λ_m + λ_{m′}).
pub fn separation_lower_bound(mix: &MixtureModel, alpha: f64, t: f64) -> Result<f64> {
    let lam = mix.big_lambda();
    if !(lam > 0.0) {
        return Err(domain("separation bound requires Λ > 0"));
    }
    Ok(n_alpha(alpha, t)? - 2.0 * mix.c_f() * gamma(alpha)? * lam.powf(-alpha) - mix.cross_sum())
}

/// (∫_1^T e^{−λt} t^{α−1} dt, Γ(α) λ^{−α}).
pub fn cross_term(alpha: f64, lambda: f64, t: f64) -> Result<(f64, f64)> {
    let f = |u: f64| {
        let s = u.exp();
        (-lambda * s + alpha * u).exp()
    };
    let lhs = integrate_adaptive(f, 0.0, t.ln(), 1e-12, 1e-12)?.value;
    Ok((lhs, gamma(alpha)? * lambda.powf(-alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// sup_{[δ,1]} |ψ| over a 100-point grid.
pub fn sup_abs_digamma(delta: f64) -> Result<f64> {
    let mut m: f64 = 0.0;
    for i in 0..100 {
        let a = delta + (1.0 - delta) * i as f64 / 99.0;
        m = m.max(digamma(a)?.abs());
    }
    Ok(m)
}

/// |k_β(t) − k_α(t)| against (Δ t^{β−1}/Γ(β))(|ln t| + sup_{[δ,1]}|ψ|).
pub fn quantisation_bound_check(alpha: f64, beta: f64, t: f64, delta: f64) -> Result<BoundCheck> {
    if alpha > beta || alpha < delta || beta > 1.0 {
        return Err(domain(format!("need δ ≤ α ≤ β ≤ 1, got δ={delta}, α={alpha}, β={beta}")));
    }
    if !(t >= 1.0) {
        return Err(domain("t must be >= 1"));
    }
    quantisation_bound_with_sup(alpha, beta, t, sup_abs_digamma(delta)?)
}

fn quantisation_bound_with_sup(alpha: f64, beta: f64, t: f64, sup_psi: f64) -> Result<BoundCheck> {
    let lhs = (k_alpha(beta, t) - k_alpha(alpha, t)).abs();
    let rhs = (beta - alpha) * k_alpha(beta, t) * (t.ln().abs() + sup_psi);
    Ok(BoundCheck { lhs, rhs, holds: lhs <= rhs })
}

/// Exhaustive (α, β, t) sweep: `na` × `nb` orders on [δ, 1], `nt` log-spaced t
/// in [1, 10⁴]. Returns (checked, violations, worst lhs/rhs).
pub fn quantisation_grid_sweep(delta: f64, na: usize, nb: usize, nt: usize) -> Result<(usize, usize, f64)> {
    let sup = sup_abs_digamma(delta)?;
    let grid = |n: usize, i: usize| delta + (1.0 - delta) * i as f64 / (n - 1) as f64;
    let mut checked = 0;
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let (a, b) = (grid(na, i), grid(nb, j));
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            for l in 0..nt {
                let t = 10f64.powf(4.0 * l as f64 / (nt - 1) as f64);
                let c = quantisation_bound_with_sup(a, b, t, sup)?;
                checked += 1;
                if !c.holds {
                    bad += 1;
                }
                if c.rhs > 0.0 {
                    worst = worst.max(c.lhs / c.rhs);
                }
            }
        }
    }
    Ok((checked, bad, worst))
}

/// sup over a fine α grid on [δ, 1] of |k_α(t) − k_{α_{k*}}(t)|.
pub fn quantisation_grid_error(delta: f64, k: usize, t: f64) -> Result<f64> {
    if k == 0 || !(t >= 1.0) {
        return Err(domain("need K >= 1 and t >= 1"));
    }
    let orders = crate::banks::bank_orders(delta, k);
    let n = 20_001;
    let mut m: f64 = 0.0;
    for i in 0..n {
        let a = delta + (1.0 - delta) * i as f64 / (n - 1) as f64;
        let ak = orders[quantise(a, delta, k) - 1];
        m = m.max((k_alpha(a, t) - k_alpha(ak, t)).abs());
    }
    Ok(m)
}

/// Ratios k_α(t)/(α/t) at α ∈ {1e-2, 1e-3, 1e-4}, and whether the last is
/// within 1% of 1.
pub fn near_zero_limit_check(t: f64) -> Result<(Vec<f64>, bool)> {
    if !(t >= 1.0) {
        return Err(domain("t must be >= 1"));
    }
    let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&a| k_alpha(a, t) / (a / t)).collect();
    let ok = (ratios[2] - 1.0).abs() <= 0.01;
    Ok((ratios, ok))
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(name: &str, params: &[(&str, f64)], lhs: f64, rhs: f64, pass: bool) -> Self {
        CheckRecord {
            name: name.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lhs,
            rhs,
            pass,
        }
    }
}

/// M uniform on 1..=8, λ_m log-uniform on [0.01, 10], π_m uniform on [0, 1].
pub fn random_mixture(rng: &mut RngStream) -> MixtureModel {
    let m = 1 + rng.below(8) as usize;
    let weights = (0..m).map(|_| rng.uniform()).collect();
    let rates = (0..m).map(|_| 10f64.powf(-2.0 + 3.0 * rng.uniform())).collect();
    MixtureModel { weights, rates }
}

/// mixture_l2_error ≥ separation_lower_bound for `count` random mixtures at
/// α ∈ {0.55, 0.7, 0.9} and T ∈ {10², 10³, 10⁴}.
pub fn separation_sweep(seed: u64, count: usize) -> Result<Vec<CheckRecord>> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::with_capacity(count * 9);
    for idx in 0..count {
        let mix = random_mixture(&mut rng);
        for alpha in [0.55, 0.7, 0.9] {
            for t in [1e2, 1e3, 1e4] {
                let lhs = mixture_l2_error(&mix, alpha, t)?;
                let rhs = separation_lower_bound(&mix, alpha, t)?;
                let tol = 1e-8 * n_alpha(alpha, t)?.max(1.0);
                out.push(CheckRecord::new(
                    "separation",
                    &[("mixture", idx as f64), ("m", mix.m() as f64), ("alpha", alpha), ("T", t)],
                    lhs,
                    rhs,
                    lhs + tol >= rhs,
                ));
            }
        }
    }
    Ok(out)
}

/// L² error on [1, T] against g_α of the best M-term fit made on [1, fit_T],
/// for each T in `horizons`.
pub fn divergence_profile(alpha: f64, fit_horizon: usize, m: usize, horizons: &[f64]) -> Result<Vec<(f64, f64)>> {
    let fit = crate::harness::fit_mixture_to_powerlaw(alpha, fit_horizon, m)?;
    // the fit targets k_α = g_α/Γ(α)
    let g = gamma(alpha)?;
    let mix = MixtureModel::new(fit.mixture.weights.iter().map(|p| p * g).collect(), fit.mixture.rates)?;
    horizons.iter().map(|&t| Ok((t, mixture_l2_error(&mix, alpha, t)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_alpha_closed_forms() {
        assert!((n_alpha(0.5, std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!((n_alpha(0.75, 16.0).unwrap() - 6.0).abs() < 1e-13);
        assert!(n_alpha(0.5, 0.5).is_err());
    }

    #[test]
    fn mixture_derived_quantities() {
        let m = MixtureModel::new(vec![0.5, 1.5], vec![0.1, 2.0]).unwrap();
        assert_eq!(m.c_f(), 2.0);
        assert_eq!(m.big_lambda(), 0.1);
        let c = m.c_f();
        assert!((c * c * m.r() - m.cross_sum()).abs() < 1e-14);
        assert!(MixtureModel::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn empty_mixture_error_is_n_alpha() {
        let m = MixtureModel::new(vec![0.0; 3], vec![0.5, 1.0, 2.0]).unwrap();
        let e = mixture_l2_error(&m, 0.75, 1e4).unwrap();
        let n = n_alpha(0.75, 1e4).unwrap();
        assert!((e - n).abs() < 1e-8 * n);
        assert!((separation_lower_bound(&m, 0.75, 1e4).unwrap() - n).abs() < 1e-12);
    }

    #[test]
    fn bound_at_equal_orders_is_zero() {
        let c = quantisation_bound_check(0.5, 0.5, 10.0, 0.1).unwrap();
        assert_eq!((c.lhs, c.rhs, c.holds), (0.0, 0.0, true));
        assert!(quantisation_bound_check(0.6, 0.5, 10.0, 0.1).is_err());
    }
}
