//! Sum-of-exponentials approximation ŵ_j = Σ_s c_s λ_s^j of the GL kernel.
//!
//! Gauss–Legendre quadrature in u = ln(λ/λ_min) over [0, L] of the Laplace
//! representation w_j = ∫ e^{−λj} ρ̃_α(λ) dλ, where ρ̃_α(λ) = ρ_α(λ) e^{λ} is
//! the lag-aligned density (see [`lag_density`]).

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::gl_kernel::gl_weights;
use crate::numerics::{digamma, gauss_legendre, integrate_adaptive, log_gamma};

/// Smallest admissible quadrature abscissa, so that every rate e^{−ξ} stays
/// representably below 1.
pub const XI_FLOOR: f64 = 1e-15;

/// Largest S tried by [`build_soe`].
pub const MAX_TERMS: usize = 256;

fn check_open_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn log_norm(alpha: f64) -> f64 {
    -(log_gamma(alpha).unwrap_or(f64::NAN) + log_gamma(1.0 - alpha).unwrap_or(f64::NAN))
}

/// 1/(Γ(α)Γ(1−α)) = sin(πα)/π.
pub fn density_constant(alpha: f64) -> f64 {
    log_norm(alpha).exp()
}

/// ρ_α(λ) = e^{−αλ}(1−e^{−λ})^{−α} e^{−λ} / (Γ(α)Γ(1−α)).
pub fn rho(alpha: f64, lambda: f64) -> Result<f64> {
    check_open_alpha(alpha)?;
    if !(lambda > 0.0) {
        return Err(domain(format!("rho requires lambda > 0, got {lambda}")));
    }
    Ok(ln_lag_density(alpha, lambda).exp() * (-lambda).exp())
}

/// ρ̃_α(λ) = ρ_α(λ) e^{λ}, the density whose Laplace moments are the weights
/// themselves: ∫ e^{−λj} ρ̃_α(λ) dλ = w_j for every j ≥ 0.
pub fn lag_density(alpha: f64, lambda: f64) -> Result<f64> {
    check_open_alpha(alpha)?;
    if !(lambda > 0.0) {
        return Err(domain(format!("lag_density requires lambda > 0, got {lambda}")));
    }
    Ok(ln_lag_density(alpha, lambda).exp())
}

fn ln_lag_density(alpha: f64, lambda: f64) -> f64 {
    -alpha * lambda - alpha * (-(-lambda).exp_m1()).ln() + log_norm(alpha)
}

/// ∂ ln ρ_α(λ) / ∂α.
fn dlog_density_dalpha(alpha: f64, lambda: f64, psi_a: f64, psi_1ma: f64) -> f64 {
    let _ = alpha;
    -lambda - (-(-lambda).exp_m1()).ln() - psi_a + psi_1ma
}

/// ∫ e^{−λj} ρ_α(λ) dλ shifted to lag j: returns w_j by integrating
/// ∫ e^{−λ(j−1)} ρ_α(λ) dλ for j ≥ 1, and 1 for j = 0.
///
/// Integrated in u = ln λ by adaptive refinement to 1e-11 absolute, with
/// analytic bounds on both discarded tails below 1e-13.
pub fn moment_oracle(alpha: f64, j: u64) -> Result<f64> {
    check_open_alpha(alpha)?;
    if j == 0 {
        return Ok(1.0);
    }
    let c = density_constant(alpha);
    let tail = 1e-13;
    let lam_lo = (tail * (1.0 - alpha) / c).powf(1.0 / (1.0 - alpha));
    let rate = alpha + (j - 1) as f64 + 1.0;
    // upper tail of e^{−λ(j−1)} ρ ≤ C (1−e^{−1})^{−α} e^{−(α+j)λ} for λ ≥ 1
    let lam_hi = ((c * (1.0 - (-1.0f64).exp()).powf(-alpha) / (rate * tail)).ln() / rate).max(1.0);
    let jm1 = (j - 1) as f64;
    let ln_norm = log_norm(alpha);
    let f = |u: f64| {
        let lam = u.exp();
        let ln_rho = -alpha * lam - alpha * (-(-lam).exp_m1()).ln() - lam + ln_norm;
        (-lam * jm1 + ln_rho + u).exp()
    };
    let r = integrate_adaptive(f, lam_lo.ln(), lam_hi.ln(), 1e-11, 1e-14)?;
    if r.error > 1e-10 {
        return Err(Error::Integration { value: r.value, achieved: r.error });
    }
    Ok(r.value)
}

/// How the integration interval [λ_min, λ_max] is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailPolicy {
    /// λ_min = ε/(2T), λ_max = 2 ln(2T/ε). Independent of α, so nodes are
    /// shared by every order built for the same (T, ε).
    Horizon,
    /// Horizon interval, widened where the analytic tail-mass bounds of the
    /// lag-aligned density exceed ε/4 at this α.
    Certified,
}

/// [λ_min, λ_max] for the given policy.
pub fn tail_bounds(alpha: f64, horizon: usize, eps: f64, policy: TailPolicy) -> Result<(f64, f64)> {
    check_open_alpha(alpha)?;
    if horizon < 1 {
        return Err(domain("horizon must be >= 1"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(domain(format!("target_eps must lie in (0, 1), got {eps}")));
    }
    let t = horizon as f64;
    let mut lo = eps / (2.0 * t);
    let mut hi = 2.0 * (2.0 * t / eps).ln();
    if policy == TailPolicy::Certified {
        let c = density_constant(alpha);
        // ρ̃ ≤ C λ^{−α}: lower mass ≤ C λ_min^{1−α}/(1−α)
        let lo_mass = (eps * (1.0 - alpha) / (4.0 * c)).powf(1.0 / (1.0 - alpha));
        lo = lo.min(lo_mass).max(XI_FLOOR);
        // ρ̃ ≤ C e^{−αλ}(1−e^{−λ_max})^{−α} beyond λ_max
        let mut up = (4.0 * c / (alpha * eps)).ln() / alpha;
        for _ in 0..8 {
            let g = (-(-up).exp_m1()).powf(-alpha);
            up = (4.0 * c * g / (alpha * eps)).ln() / alpha;
        }
        hi = hi.max(up);
    }
    Ok((lo, hi))
}

/// Upper bounds on the discarded lower and upper tail masses of ρ̃_α.
pub fn tail_mass_bounds(alpha: f64, lambda_min: f64, lambda_max: f64) -> (f64, f64) {
    let c = density_constant(alpha);
    let lower = c * lambda_min.powf(1.0 - alpha) / (1.0 - alpha);
    let upper = c * (-(-lambda_max).exp_m1()).powf(-alpha) * (-alpha * lambda_max).exp() / alpha;
    (lower, upper)
}

/// S-term exponential representation of one order's kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoeApprox {
    pub alpha: f64,
    pub horizon: usize,
    pub target_eps: f64,
    pub xi: Vec<f64>,
    pub rates: Vec<f64>,
    pub coeffs: Vec<f64>,
    /// Gauss–Legendre weights ω_s on [0, L].
    pub quad_weights: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub l: f64,
    pub certified_error: Option<f64>,
}

impl SoeApprox {
    /// Quadrature on explicit bounds with S terms. No certification.
    pub fn on_interval(
        alpha: f64,
        horizon: usize,
        target_eps: f64,
        terms: usize,
        lambda_min: f64,
        lambda_max: f64,
    ) -> Result<Self> {
        check_open_alpha(alpha)?;
        if !(lambda_min > 0.0 && lambda_min < lambda_max) {
            return Err(domain(format!("invalid interval [{lambda_min}, {lambda_max}]")));
        }
        let l = (lambda_max / lambda_min).ln();
        let rule = gauss_legendre(terms, 0.0, l)?;
        let xi: Vec<f64> = rule.nodes.iter().map(|&u| lambda_min * u.exp()).collect();
        let mut approx = SoeApprox {
            alpha,
            horizon,
            target_eps,
            rates: xi.iter().map(|&x| (-x).exp()).collect(),
            coeffs: Vec::new(),
            xi,
            quad_weights: rule.weights,
            lambda_min,
            lambda_max,
            l,
            certified_error: None,
        };
        approx.coeffs = approx.coeffs_for(alpha);
        Ok(approx)
    }

    /// Coefficients c_s = ω_s ξ_s ρ̃_α(ξ_s) for another order on the same nodes.
    pub fn coeffs_for(&self, alpha: f64) -> Vec<f64> {
        self.xi
            .iter()
            .zip(&self.quad_weights)
            .map(|(&x, &w)| w * x * ln_lag_density(alpha, x).exp())
            .collect()
    }

    /// Same nodes, coefficients for `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_open_alpha(alpha)?;
        let mut out = self.clone();
        out.alpha = alpha;
        out.coeffs = self.coeffs_for(alpha);
        out.certified_error = None;
        Ok(out)
    }

    pub fn terms(&self) -> usize {
        self.xi.len()
    }

    /// ŵ_j.
    pub fn weight(&self, j: u64) -> f64 {
        let jf = j as f64;
        self.coeffs.iter().zip(&self.xi).map(|(&c, &x)| c * (-x * jf).exp()).sum()
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

    /// ∂ ln c_s / ∂α at the current order, nodes held fixed.
    pub fn dlog_coeffs(&self) -> Result<Vec<f64>> {
        check_open_alpha(self.alpha)?;
        let pa = digamma(self.alpha)?;
        let pb = digamma(1.0 - self.alpha)?;
        Ok(self.xi.iter().map(|&x| dlog_density_dalpha(self.alpha, x, pa, pb)).collect())
    }
}

/// ŵ_j.
pub fn soe_weight(approx: &SoeApprox, j: u64) -> f64 {
    approx.weight(j)
}

/// max_{0≤j≤T} |ŵ_j − w_j| by exact sweep.
pub fn soe_certified_error(approx: &SoeApprox) -> f64 {
    let t = approx.horizon;
    let w = match gl_weights(approx.alpha, t) {
        Ok(w) => w,
        Err(_) => return f64::NAN,
    };
    let what = approx.weights(t);
    what.iter().zip(&w.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Fixed-S approximation with the given tail policy. Certified error is
/// computed and stored but not required to meet `target_eps`.
pub fn build_soe_terms(
    alpha: f64,
    horizon: usize,
    target_eps: f64,
    terms: usize,
    policy: TailPolicy,
) -> Result<SoeApprox> {
    let (lo, hi) = tail_bounds(alpha, horizon, target_eps, policy)?;
    let mut a = SoeApprox::on_interval(alpha, horizon, target_eps, terms, lo, hi)?;
    a.certified_error = Some(soe_certified_error(&a));
    Ok(a)
}

/// Smallest-S certified approximation: max_{j≤T}|ŵ_j − w_j| ≤ target_eps.
///
/// Interval from [`TailPolicy::Certified`]. S is searched by doubling from 1
/// and then bisecting between the last failing and first passing S; every
/// candidate is certified by exact sweep. Fails past S = 256.
pub fn build_soe(alpha: f64, horizon: usize, target_eps: f64) -> Result<SoeApprox> {
    if horizon < 2 {
        return Err(domain("build_soe requires T >= 2"));
    }
    let (lo, hi) = tail_bounds(alpha, horizon, target_eps, TailPolicy::Certified)?;
    let attempt = |s: usize| -> Result<SoeApprox> {
        let mut a = SoeApprox::on_interval(alpha, horizon, target_eps, s, lo, hi)?;
        a.certified_error = Some(soe_certified_error(&a));
        Ok(a)
    };
    let ok = |a: &SoeApprox| a.certified_error.is_some_and(|e| e <= target_eps);
    let mut fail_s = 0usize;
    let mut s = 1usize;
    let mut best = loop {
        let a = attempt(s)?;
        if ok(&a) {
            break a;
        }
        if s >= MAX_TERMS {
            return Err(Error::Certification {
                terms: s,
                achieved: a.certified_error.unwrap_or(f64::NAN),
                target: target_eps,
            });
        }
        fail_s = s;
        s = (2 * s).min(MAX_TERMS);
    };
    let mut pass_s = s;
    while pass_s - fail_s > 1 {
        let mid = (pass_s + fail_s) / 2;
        let a = attempt(mid)?;
        if ok(&a) {
            pass_s = mid;
            best = a;
        } else {
            fail_s = mid;
        }
    }
    Ok(best)
}

/// ∂ŵ_j/∂α with nodes held fixed: Σ_s c_s λ_s^j ∂ ln ρ̃_α(ξ_s)/∂α.
pub fn soe_alpha_grad(approx: &SoeApprox, j: u64) -> Result<f64> {
    let d = approx.dlog_coeffs()?;
    let jf = j as f64;
    Ok(approx
        .coeffs
        .iter()
        .zip(&approx.xi)
        .zip(&d)
        .map(|((&c, &x), &g)| c * (-x * jf).exp() * g)
        .sum())
}
