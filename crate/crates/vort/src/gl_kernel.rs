//! Exact Grünwald–Letnikov weights w_j = Γ(j+α)/(Γ(α)Γ(j+1)).

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::{log_gamma, log_gamma_ratio};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlWeights {
    pub alpha: f64,
    pub values: Vec<f64>,
}

impl GlWeights {
    pub fn get(&self, j: usize) -> f64 {
        self.values[j]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// w_0..w_J by the recurrence w_j = w_{j−1}(j−1+α)/j.
pub fn gl_weights(alpha: f64, j_max: usize) -> Result<GlWeights> {
    check_alpha(alpha)?;
    let mut values = Vec::with_capacity(j_max + 1);
    let mut w = 1.0;
    values.push(w);
    for j in 1..=j_max {
        w *= (j as f64 - 1.0 + alpha) / j as f64;
        values.push(w);
    }
    Ok(GlWeights { alpha, values })
}

/// Σ_{j<t} w_j = Γ(t+α)/(Γ(α+1)Γ(t)).
pub fn gl_partial_sum(alpha: f64, t: u64) -> Result<f64> {
    check_alpha(alpha)?;
    if t == 0 {
        return Err(domain("gl_partial_sum requires t >= 1"));
    }
    if alpha == 1.0 {
        return Ok(t as f64);
    }
    let r = log_gamma_ratio(t as f64, alpha)? - log_gamma(alpha + 1.0)?;
    Ok(r.exp())
}

/// |Σ_j w_j e^{ijω}| = (2|sin(ω/2)|)^{−α}.
pub fn gl_frequency_response(alpha: f64, omega: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(omega > 0.0 && omega <= std::f64::consts::PI) {
        return Err(domain(format!("omega must lie in (0, π], got {omega}")));
    }
    Ok((2.0 * (0.5 * omega).sin().abs()).powf(-alpha))
}

/// Direct convolution M_t = Σ_{i=1}^t w_{t−i} v_i, the reference for every
/// recurrence-based state.
pub fn gl_fractional_state(alpha: f64, values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = values.len();
    if t == 0 {
        return Err(domain("gl_fractional_state requires a nonempty sequence"));
    }
    let w = gl_weights(alpha, t - 1)?;
    let dim = values[0].len();
    let mut out = vec![0.0; dim];
    for (i, v) in values.iter().enumerate() {
        if v.len() != dim {
            return Err(crate::Error::Dimension { expected: dim, got: v.len() });
        }
        let wi = w.values[t - 1 - i];
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    Ok(out)
}
