//! Latency of the two ways to rank for a user: reading history embeddings
//! from the store, or recomputing them through backbone, compressor and
//! fusion.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::backbone::{Backbone, ExtractionConfig};
use crate::corpus::{Split, SyntheticVideo, UserSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ranker::{encode_user, score_and_rank};
use crate::service::Snapshot;
use crate::store::FeatureStore;

pub const MIN_QUERIES: usize = 30;
const WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchPath {
    Store,
    Direct,
}

impl fmt::Display for BenchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchPath::Store => "store",
            BenchPath::Direct => "direct",
        })
    }
}

impl FromStr for BenchPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "store" => Ok(BenchPath::Store),
            "direct" => Ok(BenchPath::Direct),
            _ => Err(Error::Config(format!("unknown bench path {s:?} (store, direct)"))),
        }
    }
}

/// Everything both paths need.
pub struct BenchContext<'a> {
    pub store: &'a FeatureStore,
    pub snapshot: &'a Snapshot,
    pub model: &'a Model,
    pub backbone: &'a Backbone,
    pub extraction: &'a ExtractionConfig,
    pub videos: HashMap<u32, &'a SyntheticVideo>,
}

impl<'a> BenchContext<'a> {
    pub fn new(
        store: &'a FeatureStore,
        snapshot: &'a Snapshot,
        model: &'a Model,
        backbone: &'a Backbone,
        extraction: &'a ExtractionConfig,
        videos: &'a [SyntheticVideo],
    ) -> Self {
        Self {
            store,
            snapshot,
            model,
            backbone,
            extraction,
            videos: videos.iter().map(|v| (v.item_id.0, v)).collect(),
        }
    }

    fn rank(&self, zs: &[Vec<f64>], k: usize) -> Result<Vec<(u32, f64)>> {
        let u = encode_user(zs, self.snapshot.scorer().ranker())?;
        score_and_rank(&u, self.snapshot.scorer().rows(), k)
    }

    /// History embeddings read from the store.
    pub fn store_path(&self, history: &[u32], k: usize) -> Result<Vec<(u32, f64)>> {
        let recs = self.store.batch_get(history)?;
        let zs: Vec<Vec<f64>> = recs.iter().map(|r| r.z.iter().map(|&v| v as f64).collect()).collect();
        self.rank(&zs, k)
    }

    /// History embeddings recomputed from raw content.
    pub fn direct_path(&self, history: &[u32], k: usize) -> Result<Vec<(u32, f64)>> {
        let mut zs = Vec::with_capacity(history.len());
        for id in history {
            let v = self.videos.get(id).ok_or(Error::NotFound(vec![*id]))?;
            let states = self.backbone.extract(v, self.extraction)?;
            let (z, _) = self.model.embed_item(&states)?;
            // same rounding as the stored values
            zs.push(z.iter().map(|&x| x as f32 as f64).collect());
        }
        self.rank(&zs, k)
    }

    pub fn run(&self, path: BenchPath, history: &[u32], k: usize) -> Result<Vec<(u32, f64)>> {
        match path {
            BenchPath::Store => self.store_path(history, k),
            BenchPath::Direct => self.direct_path(history, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathStats {
    pub path: BenchPath,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<PathStats>,
    /// Queries whose top-k lists agreed across every timed path.
    pub agreeing: usize,
    pub n_queries: usize,
}

impl BenchReport {
    pub fn get(&self, path: BenchPath) -> Option<&PathStats> {
        self.rows.iter().find(|r| r.path == path)
    }

    /// p50(direct) / p50(store), when both ran.
    pub fn p50_ratio(&self) -> Option<f64> {
        Some(self.get(BenchPath::Direct)?.p50_us / self.get(BenchPath::Store)?.p50_us)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(e.to_string());
        wr.write_record(["path", "p50_us", "p95_us", "p99_us", "n"]).map_err(err)?;
        for r in &self.rows {
            wr.write_record([
                r.path.to_string(),
                format!("{:.1}", r.p50_us),
                format!("{:.1}", r.p95_us),
                format!("{:.1}", r.p99_us),
                r.n.to_string(),
            ])
            .map_err(err)?;
        }
        wr.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn summarize(path: BenchPath, mut samples_us: Vec<f64>) -> Result<PathStats> {
    if samples_us.len() < MIN_QUERIES {
        return Err(Error::Statistics(format!(
            "{} samples for path {path}, at least {MIN_QUERIES} needed",
            samples_us.len()
        )));
    }
    samples_us.sort_by(f64::total_cmp);
    Ok(PathStats {
        path,
        p50_us: percentile(&samples_us, 0.50),
        p95_us: percentile(&samples_us, 0.95),
        p99_us: percentile(&samples_us, 0.99),
        n: samples_us.len(),
    })
}

/// `n` test-time histories, cycling through `users`, each cut to the
/// `h_max` most recent items.
pub fn test_queries(users: &[UserSequence], h_max: usize, n: usize) -> Vec<Vec<u32>> {
    if users.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let h = users[i % users.len()].history_for(Split::Test);
            h[h.len().saturating_sub(h_max)..].iter().map(|id| id.0).collect()
        })
        .collect()
}

/// Times every path on every query, single-threaded, after a short warm-up.
pub fn latency_bench(ctx: &BenchContext, paths: &[BenchPath], queries: &[Vec<u32>], k: usize) -> Result<BenchReport> {
    if queries.len() < MIN_QUERIES {
        return Err(Error::Statistics(format!(
            "{} queries, at least {MIN_QUERIES} needed",
            queries.len()
        )));
    }
    if paths.is_empty() {
        return Err(Error::Config("no bench paths selected".into()));
    }
    for &p in paths {
        for q in queries.iter().take(WARMUP) {
            ctx.run(p, q, k)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(queries.len()); paths.len()];
    let mut agreeing = 0;
    for q in queries {
        let mut first: Option<Vec<u32>> = None;
        let mut same = true;
        for (i, &p) in paths.iter().enumerate() {
            let t = Instant::now();
            let out = ctx.run(p, q, k)?;
            samples[i].push(t.elapsed().as_secs_f64() * 1e6);
            let ids: Vec<u32> = out.iter().map(|(id, _)| *id).collect();
            match &first {
                None => first = Some(ids),
                Some(f) => same &= *f == ids,
            }
        }
        agreeing += same as usize;
    }
    let rows = paths
        .iter()
        .zip(samples)
        .map(|(&p, s)| summarize(p, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        rows,
        agreeing,
        n_queries: queries.len(),
    })
}
