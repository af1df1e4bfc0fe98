use proptest::prelude::*;
use vort::harness::{fit_mixture_from, fit_mixture_to_powerlaw};
use vort::numerics::{gamma, RngStream};
use vort::soe::build_soe;
use vort::theory_checks::*;

/// Composite Simpson in u = ln t.
fn oracle_integral(f: impl Fn(f64) -> f64, t: f64) -> f64 {
    let n = 200_000;
    let b = t.ln();
    let h = b / n as f64;
    let g = |u: f64| f(u.exp()) * u.exp();
    let mut s = g(0.0) + g(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(h * i as f64);
    }
    s * h / 3.0
}

#[test]
fn n_alpha_continuous_across_half() {
    let want = 100f64.ln();
    for a in [0.5 - 1e-9, 0.5 + 1e-9] {
        assert!((n_alpha(a, 100.0).unwrap() - want).abs() < 1e-6);
    }
    for (a, t) in [(0.3, 50.0), (0.8, 1e3), (0.95, 1e4)] {
        let o = oracle_integral(|s: f64| s.powf(2.0 * a - 2.0), t);
        assert!((n_alpha(a, t).unwrap() - o).abs() < 1e-8 * o);
    }
}

#[test]
fn single_exponential_example() {
    let mix = MixtureModel::new(vec![1.0], vec![1.0]).unwrap();
    let e = mixture_l2_error(&mix, 0.75, 1e4).unwrap();
    let o = oracle_integral(|s: f64| ((-s).exp() - s.powf(-0.25)).powi(2), 1e4);
    assert!((e - o).abs() < 1e-7 * o);
    let bound = n_alpha(0.75, 1e4).unwrap() - 2.0 * gamma(0.75).unwrap() - mix.cross_sum();
    assert!((separation_lower_bound(&mix, 0.75, 1e4).unwrap() - bound).abs() < 1e-12);
    assert!(e >= bound);
}

#[test]
fn half_order_rate_is_log() {
    let mix = MixtureModel::new(vec![0.0], vec![1.0]).unwrap();
    for t in [10.0, 1e3, 1e5] {
        let e = mixture_l2_error(&mix, 0.5, t).unwrap();
        assert!((e / t.ln() - 1.0).abs() < 1e-9, "T={t}");
    }
}

#[test]
fn separation_holds_on_random_mixtures() {
    let recs = separation_sweep(2024, 200).unwrap();
    assert_eq!(recs.len(), 1800);
    let bad: Vec<_> = recs.iter().filter(|r| !r.pass).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn bound_tracks_horizon_growth() {
    let mix = MixtureModel::new(vec![0.4, 0.3], vec![0.05, 2.0]).unwrap();
    let consts = 2.0 * mix.c_f() * gamma(0.75).unwrap() * mix.big_lambda().powf(-0.75) + mix.cross_sum();
    let b1 = separation_lower_bound(&mix, 0.75, 1e3).unwrap() + consts;
    let b2 = separation_lower_bound(&mix, 0.75, 4e3).unwrap() + consts;
    assert!((b2 / b1 - (4e3f64.sqrt() - 1.0) / (1e3f64.sqrt() - 1.0)).abs() < 1e-12);
}

#[test]
fn cross_term_bound_on_grid() {
    for a in [0.3, 0.55, 0.7, 0.9] {
        for lam in [0.01, 0.1, 1.0, 10.0] {
            for t in [10.0, 1e3, 1e5] {
                let (lhs, rhs) = cross_term(a, lam, t).unwrap();
                let o = oracle_integral(|s: f64| (-lam * s).exp() * s.powf(a - 1.0), t);
                assert!((lhs - o).abs() < 1e-8 * o.max(1e-300) + 1e-300);
                assert!(lhs <= rhs, "α={a} λ={lam} T={t}");
            }
        }
    }
}

#[test]
fn quantisation_bound_examples() {
    let sup = sup_abs_digamma(0.1).unwrap();
    let c = quantisation_bound_check(0.3, 0.8, 1.0, 0.1).unwrap();
    assert!((c.lhs - (1.0 / gamma(0.8).unwrap() - 1.0 / gamma(0.3).unwrap()).abs()).abs() < 1e-14);
    assert!((c.rhs - 0.5 * sup / gamma(0.8).unwrap()).abs() < 1e-14);
    assert!(c.holds);
    let (checked, bad, worst) = quantisation_grid_sweep(0.1, 20, 20, 10).unwrap();
    assert_eq!((checked, bad), (4000, 0));
    assert!(worst <= 1.0);
}

#[test]
fn quantisation_grid_error_scaling() {
    for k in [8, 16, 32, 64] {
        let e1 = quantisation_grid_error(0.1, k, 1e3).unwrap();
        let e2 = quantisation_grid_error(0.1, 2 * k, 1e3).unwrap();
        let r = e2 / e1;
        assert!((0.4..=0.6).contains(&r), "K={k}: ratio {r}");
    }
    assert!(quantisation_grid_error(0.1, 512, 1e3).unwrap() <= 1e-2);
    assert!(quantisation_grid_error(0.1, 4, 1.0).unwrap().is_finite());
}

#[test]
fn near_zero_limit() {
    let (r, ok) = near_zero_limit_check(100.0).unwrap();
    assert!(ok);
    assert!((r[0] - 1.0).abs() > (r[1] - 1.0).abs() && (r[1] - 1.0).abs() > (r[2] - 1.0).abs());
    let (r1, _) = near_zero_limit_check(1.0).unwrap();
    assert!((r1[2] - 1.0).abs() < 1e-3);
}

#[test]
fn floor_below_half() {
    let mut rng = RngStream::new(5);
    for _ in 0..20 {
        let m = 1 + rng.below(4) as usize;
        let mut rates: Vec<f64> = (0..m).map(|_| 10.0 + 40.0 * rng.uniform()).collect();
        rates[0] = 10.0;
        let weights: Vec<f64> = (0..m).map(|_| 0.2 * rng.uniform()).collect();
        let mix = MixtureModel::new(weights, rates).unwrap();
        let floor = 1.0 / (1.0 - 0.6) - 2.0 * mix.c_f() * gamma(0.3).unwrap() * 10f64.powf(-0.3) - mix.cross_sum();
        if floor <= 0.0 {
            continue;
        }
        // the floor is the T → ∞ statement; at finite T the missing tail of
        // N_α is T^{2α−1}/(1−2α)
        for t in [1e2, 1e4, 1e6, 1e9] {
            let e = mixture_l2_error(&mix, 0.3, t).unwrap();
            let tail = t.powf(-0.4) / 0.4;
            assert!(e >= floor - tail - 1e-9, "T={t} e={e} floor={floor}");
        }
        assert!(mixture_l2_error(&mix, 0.3, 1e9).unwrap() >= floor);
    }
}

#[test]
fn best_fit_mixture_diverges() {
    let prof = divergence_profile(0.7, 1000, 5, &[1e3, 1e4, 1e5]).unwrap();
    assert!(prof[0].1 < prof[1].1 && prof[1].1 < prof[2].1, "{prof:?}");
    assert!(prof[2].1 > 2.0 * prof[0].1);
}

#[test]
fn more_components_fit_better() {
    let f1 = fit_mixture_to_powerlaw(0.7, 1000, 1).unwrap();
    let f5 = fit_mixture_to_powerlaw(0.7, 1000, 5).unwrap();
    assert!(f5.residual < f1.residual);
    assert!(f1.residual <= f1.initial_residual);
}

#[test]
fn fit_from_soe_start_never_worsens() {
    let soe = build_soe(0.7, 1000, 1e-2).unwrap();
    let init = MixtureModel::new(soe.coeffs.clone(), soe.xi.clone()).unwrap();
    let fit = fit_mixture_from(&init, 0.7, 1000, 500).unwrap();
    assert!(fit.residual <= fit.initial_residual);
}

proptest! {
    #[test]
    fn cross_sum_identity(w in prop::collection::vec(0.0f64..1.0, 1..8), seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let rates: Vec<f64> = w.iter().map(|_| 0.01 + 10.0 * rng.uniform()).collect();
        let mix = MixtureModel::new(w, rates).unwrap();
        let c = mix.c_f();
        prop_assert!((c * c * mix.r() - mix.cross_sum()).abs() <= 1e-12 * mix.cross_sum().max(1e-300));
        prop_assert!(mix.big_lambda() > 0.0);
    }

    #[test]
    fn quant_bound_holds_randomly(a in 0.1f64..1.0, b in 0.1f64..1.0, lt in 0.0f64..9.2) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantisation_bound_check(lo, hi, lt.exp(), 0.1).unwrap().holds);
    }
}
