use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use vort::banks::{bank_fractional_state, bank_orders, bank_step, BankKernel, BankState};
use vort::cli::{verify_plasticity, verify_quantisation, verify_separation, VerifyLine, VerifyOptions};
use vort::gl_kernel::{gl_frequency_response, gl_partial_sum, gl_weights};
use vort::harness::{run_seeds, table_checks, ExperimentConfig};
use vort::numerics::{linear_fit, RngStream};
use vort::retrieval::{accum_step, retrieve, FeatureMap, RetrievalAccumulators};
use vort::soe::{build_soe, build_soe_terms, moment_oracle, TailPolicy};
use vort::tasks::TaskKind;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: &str, secs: f64) {
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{} {id} {name}: {detail} [{secs:.2}s]", if pass { "PASS" } else { "FAIL" });
    }

    fn verify(&mut self, id: &str, lines: &[VerifyLine], secs: f64, limit: f64) {
        for l in lines {
            self.line(id, &l.record.name, l.record.pass, &l.detail, secs);
        }
        self.line(id, "runtime", secs < limit, &format!("{secs:.2}s (< {limit}s)"), secs);
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn soe_certification(r: &mut Report) {
    let start = Instant::now();
    let a = build_soe(0.5, 1000, 4e-3);
    let secs = start.elapsed().as_secs_f64();
    match a {
        Ok(a) => {
            let err = a.certified_error.unwrap_or(f64::NAN);
            let w = gl_weights(0.5, 1000).unwrap();
            let swept = a.weights(1000).iter().zip(&w.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            r.line(
                "1",
                "soe_certification",
                a.terms() <= 15 && swept <= 4e-3,
                &format!("S={} error {swept:.3e} (certified {err:.3e}; need S <= 15, error <= 4e-3)", a.terms()),
                secs,
            );
        }
        Err(e) => r.line("1", "soe_certification", false, &e.to_string(), secs),
    }
    r.line("1", "runtime", secs < 1.0, &format!("{secs:.3}s (< 1s)"), secs);
}

fn geometric_rate(r: &mut Report) {
    let start = Instant::now();
    let eps = 1e-4;
    let mut xs = vec![];
    let mut ys = vec![];
    let mut l = 0.0;
    for s in 5..=30 {
        let a = build_soe_terms(0.5, 1000, eps, s, TailPolicy::Certified).unwrap();
        l = a.l;
        xs.push(s as f64);
        ys.push(a.certified_error.unwrap().ln());
    }
    let fit = linear_fit(&xs, &ys);
    let secs = start.elapsed().as_secs_f64();
    let literal = -std::f64::consts::PI.powi(2) / 6.9;
    let actual = -std::f64::consts::PI.powi(2) / l;
    let within = |target: f64| fit.slope < 0.0 && (fit.slope - target).abs() <= 0.5 * target.abs();
    r.line("2", "log_error_linear", fit.r2 >= 0.95, &format!("R2 {:.4} (>= 0.95)", fit.r2), secs);
    r.line(
        "2",
        "slope_vs_L_6.9",
        within(literal),
        &format!("slope {:.4} vs -pi^2/6.9 = {literal:.4} (within 50%)", fit.slope),
        secs,
    );
    r.line(
        "2",
        "slope_vs_actual_L",
        within(actual),
        &format!("informational: slope {:.4} vs -pi^2/L = {actual:.4} at the interval's L = {l:.2}", fit.slope),
        secs,
    );
    r.line("2", "runtime", secs < 10.0, &format!("{secs:.2}s (< 10s)"), secs);
}

fn moment_identity(r: &mut Report) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for a in [0.3, 0.5, 0.7] {
        // w_j = Γ(j+α)/(Γ(α)Γ(j+1)) by the product form
        let mut w = 1.0;
        let mut direct = vec![w];
        for j in 1..=50 {
            w *= (j as f64 - 1.0 + a) / j as f64;
            direct.push(w);
        }
        for j in [0usize, 1, 5, 20, 50] {
            worst = worst.max((moment_oracle(a, j as u64).unwrap() - direct[j]).abs());
            worst = worst.max((gl_weights(a, 50).unwrap().values[j] - direct[j]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line("3", "moment_identity", worst <= 1e-9, &format!("max deviation {worst:.2e} on 3x5 grid (<= 1e-9)"), secs);
    r.line("3", "runtime", secs < 5.0, &format!("{secs:.2}s (< 5s)"), secs);
}

fn recurrence_exactness(r: &mut Report) {
    let start = Instant::now();
    let mut rng = RngStream::new(2024);
    let mut bank_worst: f64 = 0.0;
    let mut ret_worst: f64 = 0.0;
    for trace in 0..100 {
        let k = 1 + rng.below(4) as usize;
        let delta = 0.05 + 0.8 * rng.uniform();
        let s = 1 + rng.below(12) as usize;
        let t_len = 20 + rng.below(280) as usize;
        let kernels: Vec<BankKernel> = bank_orders(delta, k)
            .into_iter()
            .map(|a| BankKernel::build(a, 300, 1e-3, s, TailPolicy::Horizon).unwrap())
            .collect();
        let d_v = 1 + rng.below(6) as usize;

        let mut state = BankState::new(kernels.clone(), d_v);
        let mut hist = vec![];
        for _ in 0..t_len {
            let v: Vec<f64> = (0..d_v).map(|_| rng.gaussian()).collect();
            let b = 1 + rng.below(k as u64) as usize;
            bank_step(&mut state, &v, b).unwrap();
            hist.push((v, b));
        }
        for b in 1..=k {
            let mut want = vec![0.0; d_v];
            for (i, (v, hb)) in hist.iter().enumerate() {
                if *hb == b {
                    let w = kernels[b - 1].weight((t_len - 1 - i) as u64);
                    for (o, x) in want.iter_mut().zip(v) {
                        *o += w * x;
                    }
                }
            }
            let got = bank_fractional_state(&state, b).unwrap();
            if want.iter().any(|x| *x != 0.0) {
                bank_worst = bank_worst.max(rel(&got, &want));
            }
        }

        let (d_k, d_phi) = (2 + rng.below(6) as usize, 4 + rng.below(12) as usize);
        let fm = FeatureMap::new(d_k, d_phi, trace);
        let mut acc = RetrievalAccumulators::new(kernels.clone(), d_phi, d_v);
        let mut seen: Vec<(Vec<f64>, Vec<f64>, usize)> = vec![];
        for t in 0..t_len {
            let key: Vec<f64> = (0..d_k).map(|_| 0.5 * rng.gaussian()).collect();
            let val: Vec<f64> = (0..d_v).map(|_| rng.gaussian()).collect();
            let b = 1 + rng.below(k as u64) as usize;
            accum_step(&mut acc, &fm, &key, &val, b).unwrap();
            seen.push((key, val, b));
            if t % 17 == 16 || t + 1 == t_len {
                let q: Vec<f64> = (0..d_k).map(|_| 0.5 * rng.gaussian()).collect();
                let got = retrieve(&mut acc, &q, &fm).unwrap();
                let phi_q = fm.apply(&q).unwrap();
                let mut num = vec![0.0; d_v];
                let mut den = 0.0;
                for (i, (key, val, b)) in seen.iter().enumerate() {
                    let phi_k = fm.apply(key).unwrap();
                    let sim: f64 = phi_q.iter().zip(&phi_k).map(|(a, b)| a * b).sum();
                    let a = sim * kernels[b - 1].weight((t - i) as u64);
                    den += a;
                    for (n, x) in num.iter_mut().zip(val) {
                        *n += a * x;
                    }
                }
                let want: Vec<f64> = num.iter().map(|x| x / (den + acc.eps0)).collect();
                ret_worst = ret_worst.max(rel(&got, &want));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line("4", "bank_recurrence", bank_worst <= 1e-9, &format!("max relative error {bank_worst:.2e} over 100 traces (<= 1e-9)"), secs);
    r.line("4", "retrieval_recurrence", ret_worst <= 1e-8, &format!("max relative error {ret_worst:.2e} over 100 traces (<= 1e-8)"), secs);
    r.line("4", "runtime", secs < 30.0, &format!("{secs:.2}s (< 30s)"), secs);
}

fn timed_verify(r: &mut Report, id: &str, limit: f64, f: fn(&VerifyOptions) -> vort::Result<Vec<VerifyLine>>) {
    let start = Instant::now();
    let lines = f(&VerifyOptions::default());
    let secs = start.elapsed().as_secs_f64();
    match lines {
        Ok(l) => r.verify(id, &l, secs, limit),
        Err(e) => r.line(id, "verify", false, &e.to_string(), secs),
    }
}

fn growth(r: &mut Report) {
    let start = Instant::now();
    let t_max = 10_000usize;
    for alpha in [0.3, 0.5, 0.7, 0.9] {
        let kernel = BankKernel::build(alpha, t_max, 1e-4, 40, TailPolicy::Certified).unwrap();
        let mut state = BankState::new(vec![kernel], 1);
        let (mut xs, mut ys) = (vec![], vec![]);
        for t in 1..=t_max {
            bank_step(&mut state, &[1.0], 1).unwrap();
            if t >= 100 && t % 10 == 0 {
                xs.push((t as f64).ln());
                ys.push(bank_fractional_state(&state, 1).unwrap()[0].abs().ln());
            }
        }
        let slope = linear_fit(&xs, &ys).slope;
        let exact: Vec<f64> = xs.iter().map(|x| gl_partial_sum(alpha, x.exp().round() as u64).unwrap().ln()).collect();
        let exact_slope = linear_fit(&xs, &exact).slope;
        r.line(
            "7",
            &format!("growth_alpha_{alpha}"),
            (slope - alpha).abs() <= 0.02,
            &format!("bank-state slope {slope:.4}, exact-state slope {exact_slope:.4} (alpha +- 0.02)"),
            start.elapsed().as_secs_f64(),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    r.line("7", "runtime", secs < 30.0, &format!("{secs:.2}s (< 30s)"), secs);
}

fn frequency_response(r: &mut Report) {
    let start = Instant::now();
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
    let e = ((series - closed) / closed).abs();
    let secs = start.elapsed().as_secs_f64();
    r.line("8", "truncated_series", e <= 0.01, &format!("{series:.5} vs {closed:.5}, relative {e:.2e} (<= 1%)"), secs);
    r.line("8", "runtime", secs < 10.0, &format!("{secs:.2}s (< 10s)"), secs);
}

fn experiments(r: &mut Report) {
    let start = Instant::now();
    let seeds = [1, 2, 3, 4, 5];
    for (id, task) in [("10", TaskKind::Zipf), ("10", TaskKind::Copy)] {
        let t0 = Instant::now();
        match run_seeds(task, "desk", &seeds) {
            Ok((_, summary)) => {
                let secs = t0.elapsed().as_secs_f64();
                for m in &summary.models {
                    let cells: Vec<String> = summary
                        .bucket_labels
                        .iter()
                        .zip(&m.buckets)
                        .map(|(l, b)| format!("{l} {:.1} [{:.1}, {:.1}]", b.mean, b.min, b.max))
                        .collect();
                    println!("     {:?} {:<16} {} overall {:.1}", task, m.name, cells.join("  "), m.overall.mean);
                }
                for c in table_checks(&summary) {
                    r.line(id, &c.name, c.pass, &c.detail, secs);
                }
            }
            Err(e) => r.line(id, &format!("{task:?}"), false, &e.to_string(), t0.elapsed().as_secs_f64()),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line("10", "runtime", secs <= 1800.0, &format!("{:.1} min (<= 30 min)", secs / 60.0), secs);
}

fn determinism(r: &mut Report) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut tiny = ExperimentConfig::desk(TaskKind::Copy, 0);
    tiny.n = 200;
    tiny.train_count = 4;
    tiny.test_count = 4;
    tiny.epochs = 1;
    tiny.plasticity.sequences = 2;
    tiny.plasticity.iterations = 3;
    fs::write(dir.path().join("tiny.json"), serde_json::to_string(&tiny).unwrap()).unwrap();
    let commands: [&[&str]; 7] = [
        &["kernel"],
        &["soe-convergence"],
        &["verify", "all"],
        &["fit-mixture", "--horizon", "300"],
        &["plasticity-trace"],
        &["experiment", "--config", "tiny.json", "--seed", "3,4", "--format", "json"],
        &["experiment", "--config", "tiny.json", "--seed", "3,4", "--format", "csv"],
    ];
    let run = |args: &[&str], out: &str| {
        Command::new(env!("CARGO_BIN_EXE_vort"))
            .args(args)
            .args(["--out", out])
            .current_dir(dir.path())
            .env_remove("VORT_OUT_DIR")
            .output()
            .map(|o| o.status.code())
    };
    let read = |p: &str| fs::read(Path::new(dir.path()).join(p)).ok();
    let mut bad = vec![];
    for (i, args) in commands.iter().enumerate() {
        let (a, b) = (format!("a{i}"), format!("b{i}"));
        let ok = run(args, &a).ok().flatten().is_some_and(|c| c <= 1) && run(args, &b).ok().flatten().is_some_and(|c| c <= 1);
        if !ok || read(&a).is_none() || read(&a) != read(&b) {
            bad.push(args.join(" "));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = if bad.is_empty() {
        format!("{} commands re-run byte-identical", commands.len())
    } else {
        format!("differing outputs: {}", bad.join("; "))
    };
    r.line("11", "determinism", bad.is_empty(), &detail, secs);
}

fn main() {
    let mut r = Report { passed: 0, failed: 0 };
    soe_certification(&mut r);
    geometric_rate(&mut r);
    moment_identity(&mut r);
    recurrence_exactness(&mut r);
    timed_verify(&mut r, "5", 5.0, verify_quantisation);
    timed_verify(&mut r, "6", 120.0, verify_separation);
    growth(&mut r);
    frequency_response(&mut r);
    timed_verify(&mut r, "9", 30.0, verify_plasticity);
    determinism(&mut r);
    experiments(&mut r);
    println!("acceptance: {} passed, {} failed", r.passed, r.failed);
}
