use proptest::prelude::*;
use vort::gl_kernel::*;
use vort::numerics::{gamma, linear_fit, log_gamma};

#[test]
fn recurrence_matches_gamma_ratio() {
    let w = gl_weights(0.7, 500).unwrap();
    let lg_a = log_gamma(0.7).unwrap();
    for (j, &v) in w.values.iter().enumerate() {
        let jf = j as f64;
        let want = (log_gamma(jf + 0.7).unwrap() - lg_a - log_gamma(jf + 1.0).unwrap()).exp();
        assert!(((v - want) / want).abs() <= 1e-12, "j={j}: {v} vs {want}");
    }
}

#[test]
fn partial_sum_matches_direct_sum() {
    for &alpha in &[0.3, 0.5, 0.9] {
        let w = gl_weights(alpha, 99).unwrap();
        let direct: f64 = w.values.iter().sum();
        let closed = gl_partial_sum(alpha, 100).unwrap();
        assert!(((direct - closed) / direct).abs() <= 1e-10, "alpha={alpha}");
    }
}

#[test]
fn frequency_response_matches_truncated_series() {
    let (alpha, omega, n) = (0.5, 0.01, 1_000_000);
    let w = gl_weights(alpha, n).unwrap();
    let (mut re, mut im) = (0.0, 0.0);
    for (j, &v) in w.values.iter().enumerate() {
        let ph = omega * j as f64;
        re += v * ph.cos();
        im += v * ph.sin();
    }
    let series = re.hypot(im);
    let closed = gl_frequency_response(alpha, omega).unwrap();
    assert!(((series - closed) / closed).abs() <= 0.01, "{series} vs {closed}");
}

#[test]
fn fractional_state_constant_inputs() {
    let v = vec![vec![1.0]; 100];
    let s = gl_fractional_state(0.5, &v).unwrap();
    let want = gl_partial_sum(0.5, 100).unwrap();
    assert!((s[0] - want).abs() <= 1e-10 * want);
    assert_eq!(gl_fractional_state(0.5, &[vec![2.0, -1.0]]).unwrap(), vec![2.0, -1.0]);
    assert!(gl_fractional_state(0.5, &[]).is_err());
}

#[test]
fn stirling_asymptotics() {
    for &alpha in &[0.3, 0.5, 0.7, 0.9] {
        let w = gl_weights(alpha, 100_000).unwrap();
        let g = gamma(alpha).unwrap();
        for j in (1000..=100_000).step_by(97) {
            let ratio = w.values[j] / ((j as f64).powf(alpha - 1.0) / g);
            assert!((0.99..=1.01).contains(&ratio), "alpha={alpha}, j={j}: {ratio}");
        }
    }
}

#[test]
fn partial_sums_diverge() {
    let mut prev = 0.0;
    for t in (1..5000).step_by(7) {
        let s = gl_partial_sum(0.5, t).unwrap();
        assert!(s > prev);
        prev = s;
    }
    assert!(gl_partial_sum(0.5, 1_000_000).unwrap() > 100.0);
}

#[test]
fn growth_exponent_is_alpha() {
    for &alpha in &[0.3, 0.5, 0.7, 0.9] {
        let ts: Vec<f64> = (0..=40).map(|i| 10f64.powf(3.0 + 2.0 * i as f64 / 40.0)).collect();
        let x: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
        let y: Vec<f64> = ts.iter().map(|&t| gl_partial_sum(alpha, t.round() as u64).unwrap().ln()).collect();
        let fit = linear_fit(&x, &y);
        assert!((fit.slope - alpha).abs() <= 0.02, "alpha={alpha}: {}", fit.slope);
    }
}

#[test]
fn z_transform_within_tail_bound() {
    let (alpha, z, n) = (0.5f64, 0.9f64, 10_000);
    let w = gl_weights(alpha, n + 1).unwrap();
    let series: f64 = w.values[..=n].iter().enumerate().map(|(j, &v)| v * z.powi(j as i32)).sum();
    let closed = (1.0 - z).powf(-alpha);
    let tail = w.values[n + 1] * z.powi(n as i32 + 1) / (1.0 - z);
    assert!((series - closed).abs() <= tail + 1e-12, "{series} vs {closed}");
}

proptest! {
    #[test]
    fn weights_positive_decreasing(alpha in 0.01f64..0.999, j in 1usize..3000) {
        let w = gl_weights(alpha, j).unwrap();
        prop_assert_eq!(w.values[0], 1.0);
        prop_assert!(w.values.iter().all(|&v| v > 0.0));
        prop_assert!(w.values.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn partial_sum_hockey_stick(alpha in 0.05f64..1.0, t in 1u64..400) {
        let w = gl_weights(alpha, t as usize - 1).unwrap();
        let direct: f64 = w.values.iter().sum();
        let closed = gl_partial_sum(alpha, t).unwrap();
        prop_assert!(((direct - closed) / direct).abs() <= 1e-11);
    }
}
