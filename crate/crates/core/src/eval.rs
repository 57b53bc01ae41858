//! Leave-one-out evaluation with full-catalog ranking, and gate-weight
//! statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::corpus::{ItemId, Split, UserSequence};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::linalg::pairwise_sum;
use crate::ranker::{encode_user, score, RankerParams};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Anything that scores the whole catalog for a user history.
pub trait Scorer {
    /// Catalog item ids; `scores` returns one value per entry, in this order.
    fn catalog(&self) -> &[u32];
    fn scores(&self, history: &[ItemId]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
    pub mode: Option<FusionMode>,
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn labelled(mut self, mode: FusionMode, seed: u64) -> Self {
        self.mode = Some(mode);
        self.seed = Some(seed);
        self
    }

    /// Header row in report order: HR@k… then NDCG@k… per k.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["mode".to_string(), "seed".to_string(), "n_users".to_string()];
        for k in self.hr.keys() {
            cols.push(format!("hr@{k}"));
            cols.push(format!("ndcg@{k}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.mode.map(|m| m.to_string()).unwrap_or_default(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.n_users.to_string(),
        ];
        for (k, hr) in &self.hr {
            cols.push(format!("{hr:.6}"));
            cols.push(format!("{:.6}", self.ndcg[k]));
        }
        cols.join(",")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for (k, hr) in &self.hr {
            s.push_str(&format!("HR@{k:<3} {hr:.4}   NDCG@{k:<3} {:.4}\n", self.ndcg[k]));
        }
        s
    }
}

/// 1-based position of `target` after sorting candidates by descending score
/// and ascending id.
fn rank_of(target_score: f64, target: u32, scored: impl Iterator<Item = (u32, f64)>) -> usize {
    1 + scored
        .filter(|&(id, s)| id != target && (s > target_score || (s == target_score && id < target)))
        .count()
}

/// Ranks each user's held-out item of `split` against the full catalog
/// minus that user's training items.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    users: &[UserSequence],
    split: Split,
    ks: &[usize],
) -> Result<EvalReport> {
    if split == Split::Train {
        return Err(Error::Evaluation("the train split has no held-out item".into()));
    }
    let catalog = scorer.catalog();
    let position: HashMap<u32, usize> = catalog.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut hr: BTreeMap<usize, Vec<f64>> = ks.iter().map(|&k| (k, Vec::new())).collect();
    let mut ndcg: BTreeMap<usize, Vec<f64>> = ks.iter().map(|&k| (k, Vec::new())).collect();
    for u in users {
        let target = u.target(split).expect("val or test");
        let Some(&t_pos) = position.get(&target.0) else {
            return Err(Error::Evaluation(format!(
                "held-out item {target} of user {} is not in the catalog",
                u.user
            )));
        };
        let scores = scorer.scores(&u.history_for(split))?;
        let excluded: HashSet<u32> = u.train.iter().map(|i| i.0).filter(|&i| i != target.0).collect();
        let rank = rank_of(
            scores[t_pos],
            target.0,
            catalog
                .iter()
                .zip(&scores)
                .filter(|(id, _)| !excluded.contains(id))
                .map(|(&id, &s)| (id, s)),
        );
        for &k in ks {
            hr.get_mut(&k).expect("k registered").push(hr_at_k(rank, k));
            ndcg.get_mut(&k).expect("k registered").push(ndcg_at_k(rank, k));
        }
    }
    let agg = |m: BTreeMap<usize, Vec<f64>>| {
        m.into_iter()
            .map(|(k, v)| (k, if v.is_empty() { 0.0 } else { pairwise_sum(&v) / v.len() as f64 }))
            .collect()
    };
    Ok(EvalReport {
        hr: agg(hr),
        ndcg: agg(ndcg),
        n_users: users.len(),
        mode: None,
        seed: None,
    })
}

/// Scores a stored f32 embedding table through the user encoder.
pub struct EmbeddingScorer {
    ids: Vec<u32>,
    table: Vec<f32>,
    width: usize,
    index: HashMap<u32, usize>,
    ranker: RankerParams,
}

impl EmbeddingScorer {
    pub fn new(ids: Vec<u32>, table: Vec<f32>, ranker: RankerParams) -> Result<Self> {
        let width = ranker.d_z;
        if table.len() != ids.len() * width {
            return Err(Error::Shape(format!(
                "{} values for {} items of width {width}",
                table.len(),
                ids.len()
            )));
        }
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self {
            ids,
            table,
            width,
            index,
            ranker,
        })
    }

    pub fn ranker(&self) -> &RankerParams {
        &self.ranker
    }

    /// `(id, z)` for every catalog item in table order.
    pub fn rows(&self) -> impl Iterator<Item = (u32, &[f32])> {
        self.ids.iter().copied().zip(self.table.chunks_exact(self.width))
    }

    pub fn row(&self, id: u32) -> Option<&[f32]> {
        let i = *self.index.get(&id)?;
        Some(&self.table[i * self.width..(i + 1) * self.width])
    }

    pub fn user_vector(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        let start = history.len().saturating_sub(self.ranker.h_max);
        let mut missing = Vec::new();
        let mut zs = Vec::new();
        for id in &history[start..] {
            match self.row(id.0) {
                Some(z) => zs.push(z.iter().map(|&v| v as f64).collect::<Vec<f64>>()),
                None => missing.push(id.0),
            }
        }
        if !missing.is_empty() {
            return Err(Error::NotFound(missing));
        }
        encode_user(&zs, &self.ranker)
    }
}

impl Scorer for EmbeddingScorer {
    fn catalog(&self) -> &[u32] {
        &self.ids
    }

    fn scores(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        let u = self.user_vector(history)?;
        Ok(self.table.chunks_exact(self.width).map(|z| score(&u, z)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStat {
    pub layer: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub contribution_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub layers: Vec<LayerStat>,
    pub n_items: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-layer summary of gate weights, one row per item in `pis`.
pub fn gate_stats(layers: &[usize], pis: &[&[f64]]) -> Result<GateStats> {
    if pis.is_empty() {
        return Err(Error::MissingData("no gate weights to summarize".into()));
    }
    let n = layers.len();
    if let Some(bad) = pis.iter().find(|p| p.len() != n) {
        return Err(Error::Shape(format!(
            "gate weights of width {} for {n} layers",
            bad.len()
        )));
    }
    let means: Vec<f64> = (0..n)
        .map(|l| pairwise_sum(&pis.iter().map(|p| p[l]).collect::<Vec<_>>()) / pis.len() as f64)
        .collect();
    let total = pairwise_sum(&means);
    let stats = (0..n)
        .map(|l| {
            let mut col: Vec<f64> = pis.iter().map(|p| p[l]).collect();
            col.sort_by(f64::total_cmp);
            LayerStat {
                layer: layers[l],
                mean: means[l],
                median: quantile(&col, 0.5),
                q1: quantile(&col, 0.25),
                q3: quantile(&col, 0.75),
                min: col[0],
                max: col[col.len() - 1],
                contribution_pct: 100.0 * means[l] / total,
            }
        })
        .collect();
    Ok(GateStats {
        layers: stats,
        n_items: pis.len(),
    })
}

impl GateStats {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Format(e.to_string());
        wr.write_record(["layer", "mean", "median", "q1", "q3", "min", "max", "contribution_pct"])
            .map_err(io)?;
        for s in &self.layers {
            wr.write_record([
                format!("L{}", s.layer),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.median),
                format!("{:.6}", s.q1),
                format!("{:.6}", s.q3),
                format!("{:.6}", s.min),
                format!("{:.6}", s.max),
                format!("{:.4}", s.contribution_pct),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<u64> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::atomic::write_bytes(path, &buf)
    }

    /// Largest minus smallest mean contribution, in percentage points.
    pub fn spread_pct(&self) -> f64 {
        let it = self.layers.iter().map(|s| s.contribution_pct);
        it.clone().fold(f64::MIN, f64::max) - it.fold(f64::MAX, f64::min)
    }
}
