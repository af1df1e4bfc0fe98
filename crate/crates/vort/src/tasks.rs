//! Synthetic benchmarks: Zipf-lag retrieval and uniform-lag entity
//! label-copy.
//!
//! Embeddings have dimension d = d_key + d_label. Anchors (and entity first
//! mentions) carry r·(key + σ noise) in the key block and a codebook label
//! vector in the label block. Distractors are low-norm noise in both blocks.
//! Queries carry the anchor's key plus fresh noise.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::RngStream;

pub const MAGIC: &[u8; 8] = b"VORTSEQ1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Zipf,
    Copy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n: usize,
    pub count: usize,
    pub classes: usize,
    pub entities: usize,
    pub zipf_beta: f64,
    pub seed: u64,
    pub d: usize,
    /// Size of the key block; the label block takes the rest of d.
    pub d_key: usize,
    /// Zipf queries per sequence.
    pub queries: usize,
    /// Re-mentions per entity.
    pub mentions: usize,
    pub key_scale: f64,
    pub key_noise: f64,
    pub distractor_norm: f64,
    pub value_noise: f64,
    /// Seed of the label codebook, shared by train and test splits.
    pub codebook_seed: u64,
}

impl TaskConfig {
    pub fn zipf_desk(beta: f64, seed: u64) -> Self {
        TaskConfig {
            kind: TaskKind::Zipf,
            n: 2000,
            count: 16,
            classes: 16,
            entities: 20,
            zipf_beta: beta,
            seed,
            d: 32,
            d_key: 16,
            queries: 64,
            mentions: 5,
            key_scale: 3.0,
            key_noise: 0.1,
            distractor_norm: 0.3,
            value_noise: 0.3,
            codebook_seed: 0xc0de,
        }
    }

    pub fn copy_desk(seed: u64) -> Self {
        TaskConfig { kind: TaskKind::Copy, zipf_beta: 1.0, ..Self::zipf_desk(1.0, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(domain("sequence length must be >= 2"));
        }
        if self.classes < 2 || self.classes > self.d.saturating_sub(self.d_key) {
            return Err(domain(format!("need 2 <= C <= d - d_key, got C={}", self.classes)));
        }
        if self.d_key == 0 || self.d_key >= self.d {
            return Err(domain("key block must be a proper part of d"));
        }
        match self.kind {
            TaskKind::Zipf if !(self.zipf_beta > 0.0) => Err(domain("zipf beta must be positive")),
            TaskKind::Zipf if self.queries == 0 => Err(domain("need at least one query")),
            TaskKind::Copy if self.entities == 0 || self.mentions == 0 => {
                Err(domain("copy task needs E >= 1 and >= 1 mention"))
            }
            _ => Ok(()),
        }
    }

    /// Lag bucket edges scaled from the paper's (n = 10⁴: 100, 1000;
    /// n = 8000: 200, 2000) by n.
    pub fn bucket_edges(&self) -> Vec<usize> {
        let (base, edges) = match self.kind {
            TaskKind::Zipf => (10_000.0, [100.0, 1000.0]),
            TaskKind::Copy => (8000.0, [200.0, 2000.0]),
        };
        let f = self.n as f64 / base;
        edges.iter().map(|e| ((e * f).round() as usize).max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    /// Read point: sees tokens 0..t.
    pub t: usize,
    pub source: usize,
    pub label: usize,
    pub key: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub d: usize,
    pub classes: usize,
    /// n × d, row-major.
    pub tokens: Vec<f64>,
    pub entity_flags: Vec<u8>,
    pub entropy: Vec<f64>,
    pub queries: Vec<TaskQuery>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.entity_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_flags.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.d..(i + 1) * self.d]
    }

    pub fn lags(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.t - q.source).collect()
    }
}

/// C orthonormal vectors in R^m (C ≤ m), by Gram-Schmidt on Gaussians.
pub fn label_codebook(classes: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::derived(seed, 0xc0de_b00c);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut v: Vec<f64> = (0..m).map(|_| rng.gaussian()).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// P(D = d) ∝ d^{−β} on 1..=n_max, sampled on 1..=t by inverse CDF (the same
/// law as resampling draws that exceed t).
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    beta: f64,
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(beta: f64, n_max: usize) -> Self {
        let mut cdf = Vec::with_capacity(n_max + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for d in 1..=n_max {
            acc += (d as f64).powf(-beta);
            cdf.push(acc);
        }
        ZipfSampler { beta, cdf }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Probability of lag d under the law truncated at `max`.
    pub fn pmf(&self, d: usize, max: usize) -> f64 {
        if d == 0 || d > max {
            return 0.0;
        }
        (d as f64).powf(-self.beta) / self.cdf[max]
    }

    pub fn sample(&self, rng: &mut RngStream, max: usize) -> usize {
        let max = max.min(self.cdf.len() - 1);
        let u = rng.uniform() * self.cdf[max];
        // first d with cdf[d] > u
        let d = self.cdf[..=max].partition_point(|&c| c <= u);
        d.clamp(1, max)
    }
}

fn unit(rng: &mut RngStream, m: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..m).map(|_| rng.gaussian()).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

struct Builder<'a> {
    cfg: &'a TaskConfig,
    codebook: &'a [Vec<f64>],
    tokens: Vec<f64>,
    flags: Vec<u8>,
    entropy: Vec<f64>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a TaskConfig, codebook: &'a [Vec<f64>], rng: &mut RngStream) -> Self {
        let d = cfg.d;
        let mut tokens = vec![0.0; cfg.n * d];
        let kn = cfg.distractor_norm / (cfg.d_key as f64).sqrt();
        let vn = cfg.value_noise / ((d - cfg.d_key) as f64).sqrt();
        for row in tokens.chunks_exact_mut(d) {
            for (j, x) in row.iter_mut().enumerate() {
                *x = rng.gaussian() * if j < cfg.d_key { kn } else { vn };
            }
        }
        let h = (cfg.classes as f64).ln();
        Builder { cfg, codebook, tokens, flags: vec![0; cfg.n], entropy: vec![h; cfg.n] }
    }

    /// Writes the keyed token at position i. `label = None` leaves the label
    /// block zero.
    fn plant(&mut self, i: usize, key: &[f64], label: Option<usize>, rng: &mut RngStream) {
        let (d, dk) = (self.cfg.d, self.cfg.d_key);
        let row = &mut self.tokens[i * d..(i + 1) * d];
        for (j, x) in row[..dk].iter_mut().enumerate() {
            *x = self.cfg.key_scale * (key[j] + self.cfg.key_noise * rng.gaussian());
        }
        for (j, x) in row[dk..].iter_mut().enumerate() {
            *x = label.map_or(0.0, |y| self.codebook[y].get(j).copied().unwrap_or(0.0));
        }
        self.flags[i] = 1;
        self.entropy[i] = 0.0;
    }

    fn query_key(&self, key: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let mut q: Vec<f64> = key.iter().map(|k| self.cfg.key_scale * (k + self.cfg.key_noise * rng.gaussian())).collect();
        q.resize(self.cfg.d, 0.0);
        q
    }

    fn finish(self, mut queries: Vec<TaskQuery>) -> TaskSequence {
        queries.sort_by_key(|q| (q.t, q.source));
        TaskSequence {
            d: self.cfg.d,
            classes: self.cfg.classes,
            tokens: self.tokens,
            entity_flags: self.flags,
            entropy: self.entropy,
            queries,
        }
    }
}

fn zipf_sequence(cfg: &TaskConfig, codebook: &[Vec<f64>], sampler: &ZipfSampler, index: u64) -> TaskSequence {
    let mut rng = RngStream::derived(cfg.seed, index);
    let mut b = Builder::new(cfg, codebook, &mut rng);
    // anchor at a position: (key, label)
    let mut anchors: Vec<Option<(Vec<f64>, usize)>> = vec![None; cfg.n];
    let mut queries = Vec::with_capacity(cfg.queries);
    for _ in 0..cfg.queries {
        let t = cfg.n / 2 + rng.below((cfg.n - cfg.n / 2) as u64 + 1) as usize;
        let lag = sampler.sample(&mut rng, t);
        let source = t - lag;
        if anchors[source].is_none() {
            let key = unit(&mut rng, cfg.d_key);
            let label = rng.below(cfg.classes as u64) as usize;
            b.plant(source, &key, Some(label), &mut rng);
            anchors[source] = Some((key, label));
        }
        let (key, label) = anchors[source].clone().unwrap_or_default();
        queries.push(TaskQuery { t, source, label, key: b.query_key(&key, &mut rng) });
    }
    b.finish(queries)
}

fn copy_sequence(cfg: &TaskConfig, codebook: &[Vec<f64>], index: u64) -> TaskSequence {
    let mut rng = RngStream::derived(cfg.seed, index);
    let mut b = Builder::new(cfg, codebook, &mut rng);
    let mut taken = vec![false; cfg.n];
    let free_below = |rng: &mut RngStream, lo: usize, hi: usize, taken: &mut Vec<bool>| -> Option<usize> {
        for _ in 0..64 {
            let p = lo + rng.below((hi - lo) as u64) as usize;
            if !taken[p] {
                taken[p] = true;
                return Some(p);
            }
        }
        None
    };
    let mut queries = Vec::with_capacity(cfg.entities * cfg.mentions);
    let half = (cfg.n / 2).max(1);
    for _ in 0..cfg.entities {
        let Some(first) = free_below(&mut rng, 0, half, &mut taken) else { continue };
        let key = unit(&mut rng, cfg.d_key);
        let label = rng.below(cfg.classes as u64) as usize;
        b.plant(first, &key, Some(label), &mut rng);
        for _ in 0..cfg.mentions {
            // read point uniform on (first, n]; the re-mention is the query
            // itself and leaves no keyed token in the history
            let t = first + 1 + rng.below((cfg.n - first) as u64) as usize;
            if t < cfg.n {
                taken[t] = true;
            }
            queries.push(TaskQuery { t, source: first, label, key: b.query_key(&key, &mut rng) });
        }
    }
    b.finish(queries)
}

pub fn gen_zipf_task(cfg: &TaskConfig) -> Result<Vec<TaskSequence>> {
    cfg.validate()?;
    if cfg.kind != TaskKind::Zipf {
        return Err(domain("gen_zipf_task needs a zipf config"));
    }
    let codebook = label_codebook(cfg.classes, cfg.d - cfg.d_key, cfg.codebook_seed);
    let sampler = ZipfSampler::new(cfg.zipf_beta, cfg.n);
    Ok((0..cfg.count).map(|i| zipf_sequence(cfg, &codebook, &sampler, i as u64)).collect())
}

pub fn gen_entity_copy_task(cfg: &TaskConfig) -> Result<Vec<TaskSequence>> {
    cfg.validate()?;
    if cfg.kind != TaskKind::Copy {
        return Err(domain("gen_entity_copy_task needs a copy config"));
    }
    let codebook = label_codebook(cfg.classes, cfg.d - cfg.d_key, cfg.codebook_seed);
    Ok((0..cfg.count).map(|i| copy_sequence(cfg, &codebook, i as u64)).collect())
}

pub fn gen_task(cfg: &TaskConfig) -> Result<Vec<TaskSequence>> {
    match cfg.kind {
        TaskKind::Zipf => gen_zipf_task(cfg),
        TaskKind::Copy => gen_entity_copy_task(cfg),
    }
}

/// Partition of lag indices: bucket 0 is lag ≤ e₀, bucket b is
/// e_{b−1} < lag ≤ e_b, the last is lag > e_last.
pub fn bucket_lags(lags: &[usize], edges: &[usize]) -> Result<Vec<Vec<usize>>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(domain("bucket edges must be strictly increasing"));
    }
    let mut out = vec![Vec::new(); edges.len() + 1];
    for (i, &l) in lags.iter().enumerate() {
        out[edges.partition_point(|&e| e < l)].push(i);
    }
    Ok(out)
}

fn put_u32(w: &mut impl Write, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_u64(w: &mut impl Write, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Binary container: magic, u32 version, u64 config-JSON length, config
/// JSON, u64 sequence count, then per sequence u64 n, u32 d, u32 C,
/// u64 query count, tokens (f64), flags (u8), entropy (f64), and per query
/// u64 t, u64 source, u32 label, key (f64 × d). All little-endian.
pub fn write_sequences(w: &mut impl Write, cfg: &TaskConfig, seqs: &[TaskSequence]) -> Result<()> {
    let js = serde_json::to_vec(cfg).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u64(w, js.len() as u64)?;
    w.write_all(&js)?;
    put_u64(w, seqs.len() as u64)?;
    for s in seqs {
        put_u64(w, s.len() as u64)?;
        put_u32(w, s.d as u32)?;
        put_u32(w, s.classes as u32)?;
        put_u64(w, s.queries.len() as u64)?;
        put_f64s(w, &s.tokens)?;
        w.write_all(&s.entity_flags)?;
        put_f64s(w, &s.entropy)?;
        for q in &s.queries {
            put_u64(w, q.t as u64)?;
            put_u64(w, q.source as u64)?;
            put_u32(w, q.label as u32)?;
            put_f64s(w, &q.key)?;
        }
    }
    Ok(())
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.0.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated container: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap_or([0; 4])))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap_or([0; 8])))
    }

    fn len(&mut self, cap: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > cap {
            return Err(Error::Format(format!("length {n} exceeds {cap}")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.bytes(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap_or([0; 8]))).collect())
    }
}

pub fn read_sequences(r: &mut impl Read) -> Result<(TaskConfig, Vec<TaskSequence>)> {
    let mut rd = Reader(r);
    if rd.bytes(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let v = rd.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {v}")));
    }
    let n = rd.len(1 << 20)?;
    let cfg: TaskConfig = serde_json::from_slice(&rd.bytes(n)?).map_err(|e| Error::Format(e.to_string()))?;
    let count = rd.len(1 << 24)?;
    let mut seqs = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rd.len(1 << 28)?;
        let d = rd.u32()? as usize;
        let classes = rd.u32()? as usize;
        let nq = rd.len(1 << 28)?;
        let tokens = rd.f64s(n * d)?;
        let entity_flags = rd.bytes(n)?;
        let entropy = rd.f64s(n)?;
        let mut queries = Vec::with_capacity(nq);
        for _ in 0..nq {
            let t = rd.u64()? as usize;
            let source = rd.u64()? as usize;
            let label = rd.u32()? as usize;
            let key = rd.f64s(d)?;
            if source >= t || t > n || label >= classes {
                return Err(Error::Format(format!("invalid query t={t} source={source} label={label}")));
            }
            queries.push(TaskQuery { t, source, label, key });
        }
        seqs.push(TaskSequence { d, classes, tokens, entity_flags, entropy, queries });
    }
    Ok((cfg, seqs))
}

pub fn sequences_to_json(cfg: &TaskConfig, seqs: &[TaskSequence]) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a> {
        format: &'a str,
        version: u32,
        config: &'a TaskConfig,
        sequences: &'a [TaskSequence],
    }
    serde_json::to_string(&Doc { format: "vort-sequences", version: FORMAT_VERSION, config: cfg, sequences: seqs })
        .map_err(|e| Error::Format(e.to_string()))
}
