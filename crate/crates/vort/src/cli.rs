//! Command-line surface: kernel and SOE data, verification suites, the
//! experiment runner and report files with manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::gl_kernel::gl_weights;
use crate::harness::{
    fit_mixture_to_powerlaw, run_experiment, summarize, table_checks, ExperimentConfig, ExperimentReport,
    ExperimentSummary, TableCheck,
};
use crate::numerics::RngStream;
use crate::plasticity::{
    estimate_smoothness, loss_alpha_grad_all, planted_trace, plasticity_descent, retrieval_loss,
    shared_order_objective, OrderKernel, PlasticityConfig,
};
use crate::soe::{build_soe, build_soe_terms, moment_oracle, TailPolicy};
use crate::tasks::TaskKind;
use crate::theory_checks::{
    divergence_profile, near_zero_limit_check, quantisation_grid_error, quantisation_grid_sweep, separation_sweep,
    CheckRecord,
};

pub const OUT_DIR_ENV: &str = "VORT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "vort", version, about = "Power-law memory kernels: data emission, verification and experiments")]
pub struct Cli {
    /// Directory for outputs written without --out.
    #[arg(long, env = OUT_DIR_ENV, default_value = "vort-out", global = true)]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// GL weights w_j for one or more orders, with an e^{-0.025 j} reference.
    Kernel(KernelArgs),
    /// Maximum SOE error against the exact weights for a range of S.
    SoeConvergence(SoeArgs),
    /// Run a verification suite; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Train and evaluate the kernel comparison over several seeds.
    Experiment(ExperimentArgs),
    /// Least-squares M-term exponential fit to j^{α−1}/Γ(α).
    FitMixture(FitArgs),
    /// Projected-gradient iterates of the shared order on a planted trace.
    PlasticityTrace(TraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Output file; defaults to <out-dir>/<command>.<format>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7, 0.9])]
    pub alpha: Vec<f64>,
    /// Largest lag J.
    #[arg(long, default_value_t = 1000)]
    pub horizon: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SoeArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub horizon: usize,
    /// Tolerance that fixes the quadrature interval.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Largest S; the sweep runs S = 1..=terms.
    #[arg(long, default_value_t = 30)]
    pub terms: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Soe,
    Quantisation,
    Separation,
    Plasticity,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    /// SOE certification target.
    #[arg(long, default_value_t = 4e-3)]
    pub eps: f64,
    /// Largest admissible S for the SOE suite.
    #[arg(long, default_value_t = 15)]
    pub terms: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Zipf,
    Copy,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum, default_value = "zipf")]
    pub task: TaskArg,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3, 4, 5])]
    pub seed: Vec<u64>,
    /// JSON experiment config replacing the preset (unknown keys rejected).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub terms: Option<usize>,
    #[arg(long)]
    pub banks: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub horizon: usize,
    /// Number of components M.
    #[arg(long, default_value_t = 5)]
    pub terms: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Starting order.
    #[arg(long, default_value_t = 0.95)]
    pub alpha: f64,
    /// Trace length n.
    #[arg(long, default_value_t = 80)]
    pub horizon: usize,
    /// SOE terms of the order kernel.
    #[arg(long, default_value_t = 16)]
    pub terms: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 60)]
    pub iterations: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// One value of a table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// Column-named rows, written as CSV or as JSON with the same numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(x) => format!("{x}"),
                    Cell::Text(t) => t.clone(),
                })
                .collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Renders a table (plus optional extra JSON fields) in the chosen format.
pub fn render(table: &Table, extra: Option<Value>, format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(table.to_csv()),
        Format::Json => {
            let mut v = serde_json::to_value(table).map_err(|e| Error::Format(e.to_string()))?;
            if let (Some(Value::Object(x)), Value::Object(obj)) = (extra, &mut v) {
                obj.extend(x);
            }
            let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// SHA-256 over "blob <len>\0<content>", the git object layout.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the data file and its manifest. Refuses to replace an existing
/// file unless `force`.
pub fn write_output(path: &Path, content: &str, force: bool, command: &str, config: Value, timings: Value) -> Result<()> {
    let manifest = manifest_path(path);
    if !force && (path.exists() || manifest.exists()) {
        return Err(domain(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, content)?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let m = json!({
        "command": command,
        "config": config,
        "config_sha256": content_hash(config.to_string().as_bytes()),
        "content_sha256": content_hash(content.as_bytes()),
        "created_unix": created,
        "file": path.file_name().map(|f| f.to_string_lossy().to_string()),
        "timings": timings,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut s = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    fs::write(manifest, s)?;
    Ok(())
}

fn out_path(out: &Option<PathBuf>, dir: &Path, stem: &str, format: Format) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        dir.join(format!(
            "{stem}.{}",
            match format {
                Format::Csv => "csv",
                Format::Json => "json",
            }
        ))
    })
}

/// (j, w_j per order, e^{−0.025 j}) for j = 0..=J.
pub fn kernel_table(alphas: &[f64], horizon: usize) -> Result<Table> {
    if alphas.is_empty() {
        return Err(domain("need at least one alpha"));
    }
    let ws = alphas.iter().map(|&a| gl_weights(a, horizon)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = alphas.iter().map(|a| format!("w_alpha_{a}")).collect();
    let mut cols = vec!["j"];
    cols.extend(names.iter().map(|s| s.as_str()));
    cols.push("exp_0.025");
    let mut t = Table::new(&cols);
    for j in 0..=horizon {
        let mut row: Vec<Cell> = vec![(j as f64).into()];
        row.extend(ws.iter().map(|w| Cell::Num(w.get(j))));
        row.push((-0.025 * j as f64).exp().into());
        t.push(row);
    }
    Ok(t)
}

/// (S, max_{j≤T}|ŵ_j − w_j|, L) on the certified interval for tolerance ε.
pub fn soe_convergence_table(alpha: f64, horizon: usize, eps: f64, s_max: usize) -> Result<Table> {
    if s_max == 0 {
        return Err(domain("need at least one term"));
    }
    let mut t = Table::new(&["S", "max_error", "L"]);
    for s in 1..=s_max {
        let a = build_soe_terms(alpha, horizon, eps, s, TailPolicy::Certified)?;
        t.push(vec![(s as f64).into(), a.certified_error.unwrap_or(f64::NAN).into(), a.l.into()]);
    }
    Ok(t)
}

/// A verification line with its suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyLine {
    pub suite: String,
    pub record: CheckRecord,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub eps: f64,
    pub terms: usize,
    pub alpha: f64,
    pub horizon: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { eps: 4e-3, terms: 15, alpha: 0.5, horizon: 1000, delta: 0.1, seed: 7 }
    }
}

fn line(suite: &str, rec: CheckRecord, detail: String) -> VerifyLine {
    VerifyLine { suite: suite.into(), record: rec, detail }
}

/// Certified SOE within the S cap, and the moment identity on a small grid.
pub fn verify_soe(o: &VerifyOptions) -> Result<Vec<VerifyLine>> {
    let mut out = vec![];
    let params = [("alpha", o.alpha), ("T", o.horizon as f64), ("eps", o.eps), ("S_cap", o.terms as f64)];
    let at_cap = build_soe_terms(o.alpha, o.horizon, o.eps, o.terms.max(1), TailPolicy::Certified)?;
    let cap_err = at_cap.certified_error.unwrap_or(f64::NAN);
    match build_soe(o.alpha, o.horizon, o.eps) {
        Ok(a) => {
            let err = a.certified_error.unwrap_or(f64::NAN);
            let pass = a.terms() <= o.terms && err <= o.eps;
            out.push(line(
                "soe",
                CheckRecord::new("soe_certified", &params, err, o.eps, pass),
                format!("certified at S={} with error {err:.3e}; at S cap {} the error is {cap_err:.3e}", a.terms(), o.terms),
            ));
        }
        Err(e) => out.push(line(
            "soe",
            CheckRecord::new("soe_certified", &params, cap_err, o.eps, false),
            format!("{e}; at S cap {} the certified error is {cap_err:.3e}", o.terms),
        )),
    }
    let mut worst: f64 = 0.0;
    for a in [0.3, 0.5, 0.7] {
        let w = gl_weights(a, 50)?;
        for j in [0u64, 1, 5, 20, 50] {
            worst = worst.max((moment_oracle(a, j)? - w.get(j as usize)).abs());
        }
    }
    out.push(line("soe", CheckRecord::new("moment_identity", &[], worst, 1e-9, worst <= 1e-9), format!("max deviation {worst:.2e} over 3x5 grid")));
    Ok(out)
}

/// Pointwise bound grid, K-doubling ratios and the α → 0 limit.
pub fn verify_quantisation(o: &VerifyOptions) -> Result<Vec<VerifyLine>> {
    let mut out = vec![];
    let (checked, bad, worst) = quantisation_grid_sweep(o.delta, 20, 20, 10)?;
    out.push(line(
        "quantisation",
        CheckRecord::new("bound_grid", &[("delta", o.delta), ("points", checked as f64)], bad as f64, 0.0, bad == 0),
        format!("{bad} violations of {checked}; worst lhs/rhs {worst:.3}"),
    ));
    for k in [8usize, 16, 32, 64] {
        let r = quantisation_grid_error(o.delta, 2 * k, 1e3)? / quantisation_grid_error(o.delta, k, 1e3)?;
        out.push(line(
            "quantisation",
            CheckRecord::new("k_doubling", &[("K", k as f64), ("t", 1e3)], r, 0.5, (0.4..=0.6).contains(&r)),
            format!("error ratio {r:.4} in [0.4, 0.6]"),
        ));
    }
    let (ratios, ok) = near_zero_limit_check(100.0)?;
    out.push(line(
        "quantisation",
        CheckRecord::new("near_zero_limit", &[("alpha", 1e-4), ("t", 100.0)], ratios[2], 1.0, ok),
        format!("ratios {ratios:?}"),
    ));
    Ok(out)
}

/// 200 random mixtures against the energy bound, and divergence of the best
/// 5-term fit to g_0.7 made on [1, 10³].
pub fn verify_separation(o: &VerifyOptions) -> Result<Vec<VerifyLine>> {
    let recs = separation_sweep(o.seed, 200)?;
    let bad = recs.iter().filter(|r| !r.pass).count();
    let worst = recs.iter().map(|r| r.rhs - r.lhs).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![line(
        "separation",
        CheckRecord::new("energy_inequality", &[("mixtures", 200.0), ("seed", o.seed as f64)], bad as f64, 0.0, bad == 0),
        format!("{bad} violations of {}; max rhs-lhs {worst:.3e}", recs.len()),
    )];
    out.extend(recs.into_iter().filter(|r| !r.pass).map(|r| line("separation", r, "violation".into())));
    let prof = divergence_profile(0.7, 1000, 5, &[1e3, 1e4, 1e5])?;
    let inc = prof.windows(2).all(|w| w[1].1 > w[0].1);
    let ratio = prof[2].1 / prof[0].1;
    out.push(line(
        "separation",
        CheckRecord::new("fit_divergence", &[("alpha", 0.7), ("M", 5.0)], ratio, 2.0, inc && ratio > 2.0),
        format!("L2 error {:?}", prof.iter().map(|p| p.1).collect::<Vec<_>>()),
    ));
    Ok(out)
}

/// Quadratic envelope, descent on a planted retrieval trace with η = 1/L̂,
/// and the per-token α-gradient against central differences.
pub fn verify_plasticity(o: &VerifyOptions) -> Result<Vec<VerifyLine>> {
    let mut out = vec![];
    let cfg = PlasticityConfig { eta: 0.25, iterations: 20, delta: o.delta, l_hat: Some(2.0), mu_hat: Some(2.0) };
    let h = plasticity_descent(|a| Ok(((a - 0.6).powi(2), 2.0 * (a - 0.6))), 0.95, &cfg)?;
    let worst = h.iter().map(|it| it.f - 0.5f64.powi(it.l as i32) * h[0].f).fold(f64::NEG_INFINITY, f64::max);
    out.push(line(
        "plasticity",
        CheckRecord::new("quadratic_envelope", &[("eta", 0.25), ("mu", 2.0)], worst, 0.0, worst <= 1e-15),
        format!("max excess over (1-eta mu)^l envelope {worst:.2e}"),
    ));

    let kernel = OrderKernel::new(build_soe_terms(0.5, 200, 1e-3, 16, TailPolicy::Horizon)?);
    let trace = planted_trace(o.seed, 80, 16, 8);
    let obj = |a: f64| shared_order_objective(&trace, &kernel, a);
    let l_hat = 2.0 * estimate_smoothness(|a| Ok(obj(a)?.0), o.delta, 1.0 - 1e-3, 60)?;
    let eta = 1.0 / l_hat;
    let cfg = PlasticityConfig { eta, iterations: 60, delta: o.delta, l_hat: Some(l_hat), mu_hat: None };
    let h = plasticity_descent(obj, 0.95, &cfg)?;
    let rises = h.windows(2).map(|w| w[1].f - w[0].f).fold(f64::NEG_INFINITY, f64::max);
    out.push(line(
        "plasticity",
        CheckRecord::new("monotone_descent", &[("eta", eta), ("L_hat", l_hat)], rises, 0.0, rises <= 1e-12),
        format!("largest per-step change {rises:.3e}; F {:.6} -> {:.6}", h[0].f, h[h.len() - 1].f),
    ));

    let mut rng = RngStream::new(o.seed ^ 0xfd);
    let alphas: Vec<f64> = (0..trace.keys.len()).map(|_| 0.2 + 0.7 * rng.uniform()).collect();
    let g = loss_alpha_grad_all(&trace, &alphas, &kernel)?;
    let mut worst_rel: f64 = 0.0;
    for i in (0..alphas.len()).step_by(7) {
        let step = 1e-5;
        let (mut up, mut dn) = (alphas.clone(), alphas.clone());
        up[i] += step;
        dn[i] -= step;
        let fd = (retrieval_loss(&trace, &up, &kernel)? - retrieval_loss(&trace, &dn, &kernel)?) / (2.0 * step);
        worst_rel = worst_rel.max((fd - g[i]).abs() / fd.abs().max(1e-3));
    }
    out.push(line(
        "plasticity",
        CheckRecord::new("gradient_fd", &[("h", 1e-5)], worst_rel, 1e-4, worst_rel <= 1e-4),
        format!("max relative deviation {worst_rel:.2e}"),
    ));
    Ok(out)
}

pub fn verify(suite: Suite, o: &VerifyOptions) -> Result<Vec<VerifyLine>> {
    Ok(match suite {
        Suite::Soe => verify_soe(o)?,
        Suite::Quantisation => verify_quantisation(o)?,
        Suite::Separation => verify_separation(o)?,
        Suite::Plasticity => verify_plasticity(o)?,
        Suite::All => {
            let mut v = verify_soe(o)?;
            v.extend(verify_quantisation(o)?);
            v.extend(verify_separation(o)?);
            v.extend(verify_plasticity(o)?);
            v
        }
    })
}

pub fn verify_table(lines: &[VerifyLine]) -> Table {
    let mut t = Table::new(&["suite", "check", "lhs", "rhs", "pass"]);
    for l in lines {
        t.push(vec![
            l.suite.as_str().into(),
            l.record.name.as_str().into(),
            l.record.lhs.into(),
            l.record.rhs.into(),
            (if l.record.pass { 1.0 } else { 0.0 }).into(),
        ]);
    }
    t
}

/// Seed-mean table: one row per model, mean/min/max for every bucket and
/// overall.
pub fn summary_table(s: &ExperimentSummary) -> Table {
    let mut cols = vec!["model".to_string()];
    for label in s.bucket_labels.iter().map(|l| l.as_str()).chain(["overall"]) {
        for stat in ["mean", "min", "max"] {
            cols.push(format!("{label}_{stat}"));
        }
    }
    let mut t = Table { columns: cols, rows: vec![] };
    for m in &s.models {
        let mut row: Vec<Cell> = vec![m.name.as_str().into()];
        for st in m.buckets.iter().chain([&m.overall]) {
            row.extend([st.mean.into(), st.min.into(), st.max.into()]);
        }
        t.push(row);
    }
    t
}

/// Drops wall-clock fields so report data depends only on (config, seed).
pub fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !matches!(k.as_str(), "runtime_s" | "train_s"));
            m.values_mut().for_each(strip_timings);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

pub fn experiment_configs(a: &ExperimentArgs) -> Result<Vec<ExperimentConfig>> {
    let task = match a.task {
        TaskArg::Zipf => TaskKind::Zipf,
        TaskArg::Copy => TaskKind::Copy,
    };
    if a.seed.is_empty() {
        return Err(domain("need at least one seed"));
    }
    let base = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::preset(&a.preset, task, 0)?,
    };
    Ok(a.seed
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            if let Some(x) = a.terms {
                c.terms = x;
            }
            if let Some(x) = a.banks {
                c.banks = x;
            }
            if let Some(x) = a.delta {
                c.delta = x;
            }
            c
        })
        .collect())
}

/// Result of one CLI invocation: exit code plus a short stdout summary.
pub struct Outcome {
    pub code: u8,
    pub message: String,
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    serde_json::to_value(x).map_err(|e| Error::Format(e.to_string()))
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let dir = cli.out_dir.clone();
    let start = Instant::now();
    let ok = |message: String| Ok(Outcome { code: 0, message });
    match cli.command {
        Command::Kernel(a) => {
            let t = kernel_table(&a.alpha, a.horizon)?;
            let path = out_path(&a.output.out, &dir, "kernel", a.output.format);
            let cfg = json!({"alpha": a.alpha, "horizon": a.horizon, "format": a.output.format});
            write_output(&path, &render(&t, None, a.output.format)?, a.output.force, "kernel", cfg, json!({"total_s": start.elapsed().as_secs_f64()}))?;
            ok(format!("wrote {} rows to {}", t.rows.len(), path.display()))
        }
        Command::SoeConvergence(a) => {
            let t = soe_convergence_table(a.alpha, a.horizon, a.eps, a.terms)?;
            let path = out_path(&a.output.out, &dir, "soe-convergence", a.output.format);
            let cfg = json!({"alpha": a.alpha, "horizon": a.horizon, "eps": a.eps, "terms": a.terms, "format": a.output.format});
            write_output(&path, &render(&t, None, a.output.format)?, a.output.force, "soe-convergence", cfg, json!({"total_s": start.elapsed().as_secs_f64()}))?;
            ok(format!("wrote {} rows to {}", t.rows.len(), path.display()))
        }
        Command::Verify(a) => {
            let o = VerifyOptions { eps: a.eps, terms: a.terms, alpha: a.alpha, horizon: a.horizon, delta: a.delta, seed: a.seed };
            let lines = verify(a.suite, &o)?;
            let all = lines.iter().all(|l| l.record.pass);
            let t = verify_table(&lines);
            let extra = json!({"pass": all, "checks": to_value(&lines)?});
            let path = out_path(&a.out, &dir, "verify", a.format);
            let cfg = json!({"suite": a.suite, "eps": a.eps, "terms": a.terms, "alpha": a.alpha, "horizon": a.horizon, "delta": a.delta, "seed": a.seed, "format": a.format});
            write_output(&path, &render(&t, Some(extra), a.format)?, a.force, "verify", cfg, json!({"total_s": start.elapsed().as_secs_f64()}))?;
            let mut msg = String::new();
            for l in &lines {
                let _ = writeln!(msg, "{} {}/{}: {}", if l.record.pass { "PASS" } else { "FAIL" }, l.suite, l.record.name, l.detail);
            }
            let _ = write!(msg, "report: {}", path.display());
            Ok(Outcome { code: if all { 0 } else { 1 }, message: msg })
        }
        Command::Experiment(a) => {
            let cfgs = experiment_configs(&a)?;
            let path = out_path(&a.output.out, &dir, "experiment", a.output.format);
            if !a.output.force && path.exists() {
                return Err(domain(format!("{} exists; pass --force to overwrite", path.display())));
            }
            let reports = cfgs.iter().map(run_experiment).collect::<Result<Vec<ExperimentReport>>>()?;
            let summary = summarize(&reports)?;
            let checks = table_checks(&summary);
            let t = summary_table(&summary);
            let mut rep = to_value(&reports)?;
            strip_timings(&mut rep);
            let mut sum = to_value(&summary)?;
            strip_timings(&mut sum);
            let extra = json!({"checks": to_value(&checks)?, "summary": sum, "reports": rep});
            let timings = json!({
                "total_s": start.elapsed().as_secs_f64(),
                "per_seed_s": reports.iter().map(|r| r.runtime_s).collect::<Vec<_>>(),
            });
            write_output(&path, &render(&t, Some(extra), a.output.format)?, a.output.force, "experiment", to_value(&cfgs)?, timings)?;
            ok(format!("{}\n{}wrote {}", t.to_csv().trim_end(), format_checks(&checks), path.display()))
        }
        Command::FitMixture(a) => {
            let fit = fit_mixture_to_powerlaw(a.alpha, a.horizon, a.terms)?;
            let mut t = Table::new(&["component", "pi", "lambda"]);
            for (i, (p, l)) in fit.mixture.weights.iter().zip(&fit.mixture.rates).enumerate() {
                t.push(vec![(i as f64).into(), (*p).into(), (*l).into()]);
            }
            let extra = json!({"residual": fit.residual, "initial_residual": fit.initial_residual, "iterations": fit.iterations});
            let path = out_path(&a.output.out, &dir, "fit-mixture", a.output.format);
            let cfg = json!({"alpha": a.alpha, "horizon": a.horizon, "terms": a.terms, "format": a.output.format});
            write_output(&path, &render(&t, Some(extra), a.output.format)?, a.output.force, "fit-mixture", cfg, json!({"total_s": start.elapsed().as_secs_f64()}))?;
            ok(format!("residual {:.6e}; wrote {}", fit.residual, path.display()))
        }
        Command::PlasticityTrace(a) => {
            if a.horizon < 4 {
                return Err(domain("trace length must be >= 4"));
            }
            let kernel = OrderKernel::new(build_soe_terms(0.5, a.horizon.max(2), 1e-3, a.terms, TailPolicy::Horizon)?);
            let trace = planted_trace(a.seed, a.horizon, 16, 8);
            let obj = |x: f64| shared_order_objective(&trace, &kernel, x);
            let l_hat = 2.0 * estimate_smoothness(|x| Ok(obj(x)?.0), a.delta, 1.0 - 1e-3, 60)?;
            let cfg = PlasticityConfig { eta: 1.0 / l_hat, iterations: a.iterations, delta: a.delta, l_hat: Some(l_hat), mu_hat: None };
            let h = plasticity_descent(obj, a.alpha.clamp(a.delta, 1.0), &cfg)?;
            let mut t = Table::new(&["iteration", "alpha", "loss", "grad"]);
            for it in &h {
                t.push(vec![(it.l as f64).into(), it.alpha.into(), it.f.into(), it.grad.into()]);
            }
            let path = out_path(&a.output.out, &dir, "plasticity-trace", a.output.format);
            let c = json!({"seed": a.seed, "alpha": a.alpha, "horizon": a.horizon, "terms": a.terms, "delta": a.delta, "iterations": a.iterations, "eta": cfg.eta, "format": a.output.format});
            write_output(&path, &render(&t, Some(json!({"eta": cfg.eta, "l_hat": l_hat})), a.output.format)?, a.output.force, "plasticity-trace", c, json!({"total_s": start.elapsed().as_secs_f64()}))?;
            ok(format!("eta {:.4e}; final alpha {:.4}; wrote {}", cfg.eta, h[h.len() - 1].alpha, path.display()))
        }
    }
}

pub fn format_checks(checks: &[TableCheck]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(s, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s
}
