use proptest::prelude::*;
use vort::banks::{build_bank_kernels, BankKernel, RoutingConfig};
use vort::numerics::RngStream;
use vort::retrieval::*;
use vort::soe::TailPolicy;

fn kernels(delta: f64, k: usize, s: usize) -> Vec<BankKernel> {
    let cfg = RoutingConfig::new(delta, k, 1).unwrap();
    build_bank_kernels(&cfg, 400, 1e-3, s, TailPolicy::Horizon).unwrap()
}

fn gauss_vec(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.gaussian()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 { num } else { num / den }
}

#[test]
fn random_features_estimate_softmax_kernel() {
    let dk = 32;
    let fm = FeatureMap::new(dk, 256, 17);
    let mut rng = RngStream::new(3);
    let unit = |rng: &mut RngStream| {
        let v = gauss_vec(rng, dk, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for _ in 0..1000 {
        let q = unit(&mut rng);
        let k = unit(&mut rng);
        let est: f64 = fm.apply(&q).unwrap().iter().zip(fm.apply(&k).unwrap()).map(|(a, b)| a * b).sum();
        let exact = (q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()).exp();
        total += ((est - exact) / exact).abs();
    }
    assert!(total / 1000.0 <= 0.15, "{}", total / 1000.0);
}

#[test]
fn features_deterministic_and_positive() {
    let a = FeatureMap::new(8, 32, 9);
    let b = FeatureMap::new(8, 32, 9);
    let x = [3.0, -2.0, 0.5, 9.0, -7.0, 0.0, 1.0, 2.0];
    assert_eq!(a.apply(&x).unwrap(), b.apply(&x).unwrap());
    assert!(a.apply(&x).unwrap().iter().all(|&p| p > 0.0));
}

#[test]
fn single_step_is_rank_one() {
    let ks = kernels(0.3, 3, 5);
    let fm = FeatureMap::new(4, 6, 1);
    let mut acc = RetrievalAccumulators::new(ks.clone(), 6, 3);
    let key = [0.1, 0.4, -0.3, 0.2];
    let v = [1.0, -1.0, 2.0];
    accum_step(&mut acc, &fm, &key, &v, 2).unwrap();
    let phi = fm.apply(&key).unwrap();
    for (s, &c) in ks[1].coeffs.iter().enumerate() {
        let g = acc.g(2, s);
        for r in 0..6 {
            for j in 0..3 {
                assert!((g[r * 3 + j] - c * phi[r] * v[j]).abs() <= 1e-14 * c.max(1.0));
            }
        }
    }
    assert!(acc.g(1, 0).iter().all(|&x| x == 0.0));
}

#[test]
fn second_token_elsewhere_decays_first() {
    let ks = kernels(0.3, 3, 5);
    let fm = FeatureMap::new(4, 6, 1);
    let mut acc = RetrievalAccumulators::new(ks.clone(), 6, 2);
    accum_step(&mut acc, &fm, &[0.2, 0.1, 0.0, -0.5], &[1.0, 2.0], 1).unwrap();
    let before: Vec<Vec<f64>> = (0..5).map(|s| acc.g(1, s)).collect();
    accum_step(&mut acc, &fm, &[0.3, 0.3, 0.3, 0.3], &[5.0, 5.0], 3).unwrap();
    for (s, &r) in ks[0].rates.iter().enumerate() {
        let after = acc.g(1, s);
        for (a, b) in after.iter().zip(&before[s]) {
            assert!((a - r * b).abs() <= 1e-14 * b.abs().max(1e-300));
        }
    }
}

#[test]
fn long_trace_matches_dense_outer_products() {
    let ks = kernels(0.2, 3, 8);
    let fm = FeatureMap::new(6, 10, 4);
    let mut rng = RngStream::new(8);
    let mut acc = RetrievalAccumulators::new(ks.clone(), 10, 4);
    let mut hist = Vec::new();
    for _ in 0..300 {
        let key = gauss_vec(&mut rng, 6, 0.5);
        let v = gauss_vec(&mut rng, 4, 1.0);
        let b = 1 + rng.below(3) as usize;
        accum_step(&mut acc, &fm, &key, &v, b).unwrap();
        hist.push((fm.apply(&key).unwrap(), v, b));
    }
    let t = hist.len();
    for b in 1..=3 {
        for (s, (&c, &r)) in ks[b - 1].coeffs.iter().zip(&ks[b - 1].rates).enumerate() {
            let mut want = vec![0.0; 40];
            let mut want_b = vec![0.0; 10];
            for (i, (phi, v, bi)) in hist.iter().enumerate() {
                if *bi != b {
                    continue;
                }
                let w = c * r.powi((t - 1 - i) as i32);
                for x in 0..10 {
                    want_b[x] += w * phi[x];
                    for y in 0..4 {
                        want[x * 4 + y] += w * phi[x] * v[y];
                    }
                }
            }
            assert!(rel_err(&acc.g(b, s), &want) <= 1e-9, "bank {b} term {s}");
            assert!(rel_err(&acc.b(b, s), &want_b) <= 1e-9);
            assert!(acc.b(b, s).iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn empty_and_single_token_readout() {
    let ks = kernels(0.4, 2, 6);
    let fm = FeatureMap::new(4, 8, 2);
    let mut acc = RetrievalAccumulators::new(ks.clone(), 8, 3);
    assert_eq!(retrieve(&mut acc, &[0.1; 4], &fm).unwrap(), vec![0.0; 3]);

    let key = [0.3, -0.1, 0.2, 0.0];
    let q = [0.25, -0.05, 0.1, 0.1];
    let v = [1.0, 2.0, -3.0];
    acc.decay();
    acc.add_features(&fm.apply(&key).unwrap(), &v, 1).unwrap();
    let mut norms = Vec::new();
    for lag in 1..200u64 {
        acc.decay();
        let o = acc.retrieve_features(&fm.apply(&q).unwrap());
        let g: f64 = fm.apply(&q).unwrap().iter().zip(fm.apply(&key).unwrap()).map(|(a, b)| a * b).sum();
        let w = ks[0].weight(lag);
        let scale = w * g / (g * w + EPS0);
        for (oi, vi) in o.iter().zip(&v) {
            assert!((oi - scale * vi).abs() <= 1e-12);
        }
        norms.push(o.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    assert!(norms.windows(2).all(|p| p[1] <= p[0] + 1e-15));
}

#[test]
fn identical_values_shrink_toward_v() {
    let ks = kernels(0.4, 3, 6);
    let fm = FeatureMap::new(4, 8, 2);
    let mut rng = RngStream::new(1);
    let mut acc = RetrievalAccumulators::new(ks, 8, 2);
    for _ in 0..50 {
        let key = gauss_vec(&mut rng, 4, 0.4);
        accum_step(&mut acc, &fm, &key, &[2.0, -1.0], 1 + rng.below(3) as usize).unwrap();
    }
    let o = retrieve(&mut acc, &[0.1, 0.2, 0.3, 0.4], &fm).unwrap();
    let lam = o[0] / 2.0;
    assert!(lam > 0.0 && lam <= 1.0);
    assert!((o[1] + lam).abs() <= 1e-12);
}

#[test]
fn cost_per_token_tracks_k_s_dphi_dv() {
    let (k, s, dphi, dv) = (4, 10, 64, 32);
    let ks = kernels(0.4, k, s);
    let ks: Vec<BankKernel> = ks.into_iter().map(|mut b| {
        // equal term counts in every bank for the accounting
        if b.terms() == 1 {
            b.coeffs = vec![0.1; s];
            b.rates = vec![1.0; s];
        }
        b
    }).collect();
    let fm = FeatureMap::new(32, dphi, 5);
    let mut rng = RngStream::new(2);
    let mut acc = RetrievalAccumulators::new(ks, dphi, dv);
    let n = 200;
    for _ in 0..n {
        let key = gauss_vec(&mut rng, 32, 0.2);
        let v = gauss_vec(&mut rng, dv, 1.0);
        accum_step(&mut acc, &fm, &key, &v, 1 + rng.below(k as u64) as usize).unwrap();
        retrieve(&mut acc, &key, &fm).unwrap();
    }
    let per_token = acc.flops as f64 / n as f64;
    let nominal = (k * s * dphi * dv) as f64;
    assert!(per_token <= 2.0 * nominal && per_token >= 0.5 * nominal, "{per_token} vs {nominal}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn recurrence_equals_dense_readout(seed in any::<u64>(), t in 1usize..200, k in 1usize..=3, s in 1usize..=8, dphi in 1usize..=16, dv in 1usize..=8) {
        let ks = kernels(0.3, k, s);
        let dk = 5;
        let fm = FeatureMap::new(dk, dphi, seed ^ 0xabc);
        let mut rng = RngStream::new(seed);
        let mut acc = RetrievalAccumulators::new(ks.clone(), dphi, dv);
        let mut hist = Vec::new();
        for pos in 0..t {
            let key = gauss_vec(&mut rng, dk, 0.6);
            let value = gauss_vec(&mut rng, dv, 1.0);
            let bank = 1 + rng.below(k as u64) as usize;
            accum_step(&mut acc, &fm, &key, &value, bank).unwrap();
            hist.push(HistoryEntry { key, value, bank, position: pos as u64 });
        }
        acc.decay();
        let q = gauss_vec(&mut rng, dk, 0.6);
        let (_, den) = acc.readout_parts(&fm.apply(&q).unwrap());
        prop_assert!(den + acc.eps0 >= acc.eps0);
        let got = retrieve(&mut acc, &q, &fm).unwrap();
        let want = dense_retrieve(&hist, &q, t as u64, &fm, &ks, EPS0).unwrap();
        prop_assert!(rel_err(&got, &want) <= 1e-8, "{}", rel_err(&got, &want));
    }
}
