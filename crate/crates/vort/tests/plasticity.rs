use proptest::prelude::*;
use vort::numerics::RngStream;
use vort::plasticity::*;
use vort::soe::{build_soe_terms, TailPolicy};

const T: usize = 200;
const EPS: f64 = 1e-3;
const S: usize = 16;

fn kernel() -> OrderKernel {
    OrderKernel::new(build_soe_terms(0.5, T, EPS, S, TailPolicy::Horizon).unwrap())
}

fn random_trace(seed: u64, n: usize, nq: usize, d_k: usize) -> RetrievalTrace {
    let mut rng = RngStream::new(seed);
    let keys: Vec<Vec<f64>> = (0..n).map(|_| (0..d_k).map(|_| rng.gaussian()).collect()).collect();
    let queries = (0..nq)
        .map(|_| {
            let t = 2 + rng.below((n - 1) as u64) as usize;
            let source = rng.below(t as u64) as usize;
            let key = (0..d_k).map(|_| rng.gaussian()).collect();
            TraceQuery { t, source, key }
        })
        .collect();
    RetrievalTrace { keys, queries }
}

/// Straight-line loss with kernels rebuilt from scratch for every token.
fn oracle_loss(trace: &RetrievalTrace, alphas: &[f64]) -> f64 {
    let d_k = trace.keys[0].len() as f64;
    let mut loss = 0.0;
    for q in &trace.queries {
        let mut z = 0.0;
        let mut num = 0.0;
        for i in 0..q.t {
            let w = if alphas[i] >= 1.0 {
                1.0
            } else {
                build_soe_terms(alphas[i], T, EPS, S, TailPolicy::Horizon).unwrap().weight((q.t - i) as u64)
            };
            let s: f64 = q.key.iter().zip(&trace.keys[i]).map(|(a, b)| a * b).sum();
            let r = (s / d_k.sqrt()).exp() * w;
            z += r;
            if i == q.source {
                num = r;
            }
        }
        loss -= (num / z).ln();
    }
    loss
}

#[test]
fn single_candidate_has_zero_loss() {
    let trace = RetrievalTrace {
        keys: vec![vec![0.3, -1.0]],
        queries: vec![TraceQuery { t: 1, source: 0, key: vec![2.0, 0.5] }],
    };
    let k = kernel();
    assert_eq!(retrieval_loss(&trace, &[0.6], &k).unwrap(), 0.0);
    assert_eq!(loss_alpha_grad_all(&trace, &[0.6], &k).unwrap(), vec![0.0]);
}

#[test]
fn two_identical_candidates_give_ln2() {
    let trace = RetrievalTrace {
        keys: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        queries: vec![TraceQuery { t: 2, source: 1, key: vec![0.5, 0.5] }],
    };
    let l = retrieval_loss(&trace, &[1.0, 1.0], &kernel()).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn loss_matches_straight_line_oracle() {
    let k = kernel();
    let trace = random_trace(11, 50, 20, 6);
    let mut rng = RngStream::new(12);
    let alphas: Vec<f64> = (0..50).map(|i| if i % 7 == 0 { 1.0 } else { 0.1 + 0.85 * rng.uniform() }).collect();
    let got = retrieval_loss(&trace, &alphas, &k).unwrap();
    let want = oracle_loss(&trace, &alphas);
    assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn gradient_matches_finite_differences() {
    let k = kernel();
    let trace = random_trace(21, 40, 15, 5);
    let mut rng = RngStream::new(22);
    let alphas: Vec<f64> = (0..40).map(|_| 0.15 + 0.75 * rng.uniform()).collect();
    let g = loss_alpha_grad_all(&trace, &alphas, &k).unwrap();
    let h = 1e-5;
    for i in 0..40 {
        let mut ap = alphas.clone();
        let mut am = alphas.clone();
        ap[i] += h;
        am[i] -= h;
        let fd = (retrieval_loss(&trace, &ap, &k).unwrap() - retrieval_loss(&trace, &am, &k).unwrap()) / (2.0 * h);
        assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "token {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn tokens_outside_every_query_have_zero_gradient() {
    let k = kernel();
    let mut trace = random_trace(31, 30, 10, 4);
    for q in &mut trace.queries {
        q.t = q.t.min(20);
        q.source = q.source.min(q.t - 1);
    }
    let g = loss_alpha_grad_all(&trace, &[0.5; 30], &k).unwrap();
    assert!(g[20..].iter().all(|&x| x == 0.0));
    assert!(g[..20].iter().any(|&x| x != 0.0));
}

#[test]
fn boundary_flag_and_errors() {
    let k = kernel();
    let trace = random_trace(41, 10, 4, 3);
    let mut alphas = vec![0.5; 10];
    alphas[0] = 0.2;
    alphas[1] = 1.0;
    assert!(loss_alpha_grad(&trace, &alphas, &k, 0, 0.2).unwrap().1);
    assert!(loss_alpha_grad(&trace, &alphas, &k, 1, 0.2).unwrap().1);
    assert!(!loss_alpha_grad(&trace, &alphas, &k, 2, 0.2).unwrap().1);
    assert!(loss_alpha_grad(&trace, &alphas, &k, 10, 0.2).is_err());
    assert!(retrieval_loss(&trace, &alphas[..9], &k).is_err());
}

#[test]
fn quadratic_contracts_within_envelope() {
    let f = |a: f64| Ok(((a - 0.6).powi(2), 2.0 * (a - 0.6)));
    let cfg = PlasticityConfig { eta: 0.25, iterations: 20, delta: 0.1, l_hat: Some(2.0), mu_hat: Some(2.0) };
    let h = plasticity_descent(f, 0.95, &cfg).unwrap();
    let gap0 = h[0].f;
    for it in &h {
        assert!(it.f <= (1.0 - cfg.eta * 2.0).powi(it.l as i32) * gap0 + 1e-15);
    }
}

#[test]
fn planted_trace_descends_monotonically() {
    let k = kernel();
    let delta = 0.1;
    for seed in 0..3 {
        let trace = planted_trace(seed, 80, 16, 8);
        let obj = |a: f64| shared_order_objective(&trace, &k, a);
        let l_hat = 2.0 * estimate_smoothness(|a| Ok(obj(a)?.0), delta, 1.0 - 1e-3, 60).unwrap();
        let f_star = (0..=900).map(|i| obj(delta + 0.001 * i as f64).unwrap().0).fold(f64::INFINITY, f64::min);
        let eta = 1.0 / l_hat;
        let cfg = PlasticityConfig { eta, iterations: 60, delta, l_hat: Some(l_hat), mu_hat: None };
        let h = plasticity_descent(obj, 0.95, &cfg).unwrap();
        let mut mu_min = f64::INFINITY;
        for w in h.windows(2) {
            let g_map = (w[0].alpha - w[1].alpha) / eta;
            assert!(w[1].f <= w[0].f - 0.5 * eta * g_map * g_map + 1e-10, "seed {seed} iterate {}", w[0].l);
            let gap = w[0].f - f_star;
            if gap > 1e-6 {
                mu_min = mu_min.min(w[0].grad * w[0].grad / (2.0 * gap));
            }
        }
        assert!(h.last().unwrap().f - f_star < 1e-4, "seed {seed}");
        assert!(mu_min > 0.0 && mu_min.is_finite(), "seed {seed}: local PL ratio {mu_min}");
    }
}

proptest! {
    #[test]
    fn projection_stays_in_range(a in prop::collection::vec(0.0f64..1.5, 1..20), g in -50.0f64..50.0, eta in 0.0f64..2.0) {
        let mut a = a;
        let grad = vec![g; a.len()];
        project_step(&mut a, &grad, eta, 0.25);
        prop_assert!(a.iter().all(|&x| (0.25..=1.0).contains(&x)));
    }
}
