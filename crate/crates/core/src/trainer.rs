//! Joint training of the fusion stack and the ranker head.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Split, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingScorer};
use crate::linalg::{axpy, dot, pairwise_sum, snap_to_f32, softmax};
use crate::loss::{alignment_loss_grad, normalize, normalize_backward, softmax_xent, uniformity_loss_grad};
use crate::model::{ItemInput, Model};
use crate::params::{Group, Registry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// User sequences per step.
    pub batch_size: usize,
    pub lr_fusion: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub n_negatives: usize,
    /// (align, uniform, rec)
    pub loss_weights: [f64; 3],
    pub seed: u64,
    /// Multiplicative learning-rate decay applied every `lr_step_epochs`.
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub warmup_epochs: usize,
    /// Finite-difference spot check before the first step.
    pub spot_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr_fusion: 1e-4,
            lr_head: 1e-5,
            weight_decay: 0.1,
            grad_clip: 5.0,
            n_negatives: 64,
            loss_weights: [1.0, 1.0, 1.0],
            seed: 0,
            lr_gamma: 1.0,
            lr_step_epochs: 1,
            warmup_epochs: 0,
            spot_check: true,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale synthetic corpus.
    pub fn toy() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            lr_fusion: 1e-2,
            lr_head: 1e-3,
            lr_gamma: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_fusion > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.n_negatives == 0 || self.lr_step_epochs == 0 {
            return Err(Error::Config(
                "batch_size, n_negatives and lr_step_epochs must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 || self.lr_gamma <= 0.0 {
            return Err(Error::Config(
                "grad_clip and lr_gamma must be positive, weight_decay nonnegative".into(),
            ));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier for a 0-based epoch.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64;
        }
        self.lr_gamma
            .powi(((epoch - self.warmup_epochs) / self.lr_step_epochs) as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub uniform: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(align: f64, uniform: f64, rec: f64, w: [f64; 3]) -> Self {
        Self {
            align,
            uniform,
            rec,
            total: w[0] * align + w[1] * uniform + w[2] * rec,
        }
    }
}

/// Prepared inputs for every catalog item, addressable by id.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub ids: Vec<u32>,
    pub inputs: Vec<ItemInput>,
    index: HashMap<u32, usize>,
}

impl Catalog {
    pub fn new(ids: Vec<u32>, inputs: Vec<ItemInput>) -> Result<Self> {
        if ids.len() != inputs.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} item inputs",
                ids.len(),
                inputs.len()
            )));
        }
        let index: HashMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != ids.len() {
            return Err(Error::Input("duplicate item ids in catalog".into()));
        }
        Ok(Self { ids, inputs, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }
}

/// A user's training sequence as catalog positions.
#[derive(Clone, Debug)]
struct IndexedUser {
    train: Vec<usize>,
    train_sorted: Vec<usize>,
}

fn index_users(users: &[UserSequence], catalog: &Catalog) -> Result<Vec<IndexedUser>> {
    users
        .iter()
        .map(|u| {
            let mut missing = Vec::new();
            let train: Vec<usize> = u
                .train
                .iter()
                .filter_map(|i| {
                    let p = catalog.position(i.0);
                    if p.is_none() {
                        missing.push(i.0);
                    }
                    p
                })
                .collect();
            if !missing.is_empty() {
                return Err(Error::NotFound(missing));
            }
            if train.len() >= catalog.len() {
                return Err(Error::Input(format!(
                    "user {} has interacted with the whole catalog",
                    u.user
                )));
            }
            let mut train_sorted = train.clone();
            train_sorted.sort_unstable();
            Ok(IndexedUser {
                train,
                train_sorted,
            })
        })
        .collect()
}

/// One prediction: history → positive, with sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub history: Vec<usize>,
    pub pos: usize,
    pub negs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub targets: Vec<Target>,
    /// Index into `targets` of each sequence's last target.
    pub finals: Vec<usize>,
}

fn build_batch(
    users: &[&IndexedUser],
    n_items: usize,
    h_max: usize,
    n_neg: usize,
    final_only: bool,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let mut targets = Vec::new();
    let mut finals = Vec::new();
    // one pool per batch keeps the set of embedded items small
    let pool: Vec<usize> = (0..n_neg).map(|_| rng.gen_range(0..n_items)).collect();
    for u in users {
        let seen = |j: &usize| u.train_sorted.binary_search(j).is_ok();
        let negs: Vec<usize> = pool
            .iter()
            .map(|&j| {
                if !seen(&j) {
                    return j;
                }
                loop {
                    let k = rng.gen_range(0..n_items);
                    if !seen(&k) {
                        break k;
                    }
                }
            })
            .collect();
        let first = if final_only { u.train.len() - 1 } else { 0 };
        for t in first..u.train.len() {
            let history = u.train[t.saturating_sub(h_max)..t].to_vec();
            targets.push(Target {
                history,
                pos: u.train[t],
                negs: negs.clone(),
            });
        }
        finals.push(targets.len() - 1);
    }
    Batch { targets, finals }
}

/// Total loss and its gradient for parameters `p` on one batch.
pub fn loss_and_grad(
    model: &Model,
    p: &[f64],
    catalog: &Catalog,
    batch: &Batch,
    w: [f64; 3],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; p.len()];
    let loss = accumulate(model, p, catalog, batch, w, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Loss only; used by finite differences.
pub fn loss_only(model: &Model, p: &[f64], catalog: &Catalog, batch: &Batch, w: [f64; 3]) -> Result<LossBreakdown> {
    accumulate(model, p, catalog, batch, w, None)
}

fn accumulate(
    model: &Model,
    p: &[f64],
    catalog: &Catalog,
    batch: &Batch,
    w: [f64; 3],
    grad: Option<&mut Vec<f64>>,
) -> Result<LossBreakdown> {
    let cfg = model.config();
    let dzw = cfg.d_z;
    let h_max = cfg.h_max;
    let r = model.layout().ranker;

    let mut involved: Vec<usize> = batch
        .targets
        .iter()
        .flat_map(|t| t.history.iter().chain(std::iter::once(&t.pos)).chain(&t.negs))
        .copied()
        .collect();
    involved.sort_unstable();
    involved.dedup();
    let mut local = vec![usize::MAX; catalog.len()];
    for (i, &c) in involved.iter().enumerate() {
        local[c] = i;
    }
    let inputs: Vec<&ItemInput> = involved.iter().map(|&i| &catalog.inputs[i]).collect();
    let fw = model.forward(p, &inputs);
    let zrow = |c: usize| fw.z_row(local[c]);

    let n_t = batch.targets.len();
    let pos_logits = &p[r.pos..r.pos + h_max];
    let mut pooled = vec![0.0; n_t * dzw];
    let mut hist_w: Vec<Vec<f64>> = Vec::with_capacity(n_t);
    for (t, tg) in batch.targets.iter().enumerate() {
        let out = &mut pooled[t * dzw..(t + 1) * dzw];
        if tg.history.is_empty() {
            out.copy_from_slice(&p[r.cold..r.cold + dzw]);
            hist_w.push(Vec::new());
        } else {
            let k = tg.history.len();
            let wts = softmax(&pos_logits[h_max - k..]);
            for (wi, &c) in wts.iter().zip(&tg.history) {
                axpy(*wi, zrow(c), out);
            }
            hist_w.push(wts);
        }
    }
    let users = r.head.forward(p, &pooled, n_t);
    let urow = |t: usize| &users[t * dzw..(t + 1) * dzw];

    let mut d_users = vec![0.0; n_t * dzw];
    let mut dz = vec![0.0; involved.len() * dzw];

    let mut rec_terms = Vec::with_capacity(n_t);
    let rec_scale = w[2] / n_t as f64;
    for (t, tg) in batch.targets.iter().enumerate() {
        let u = urow(t);
        let items: Vec<usize> = std::iter::once(tg.pos).chain(tg.negs.iter().copied()).collect();
        let logits: Vec<f64> = items.iter().map(|&c| dot(u, zrow(c))).collect();
        let (l, g) = softmax_xent(&logits);
        rec_terms.push(l);
        for (&c, gj) in items.iter().zip(&g) {
            axpy(rec_scale * gj, zrow(c), &mut d_users[t * dzw..(t + 1) * dzw]);
            let lc = local[c];
            axpy(rec_scale * gj, u, &mut dz[lc * dzw..(lc + 1) * dzw]);
        }
    }
    let rec = pairwise_sum(&rec_terms) / n_t as f64;

    let n_s = batch.finals.len();
    let mut u_hat = Vec::with_capacity(n_s * dzw);
    let mut u_norm = Vec::with_capacity(n_s);
    let mut z_hat = Vec::with_capacity(n_s * dzw);
    let mut z_norm = Vec::with_capacity(n_s);
    for &t in &batch.finals {
        let (uh, un) = normalize(urow(t));
        let (zh, zn) = normalize(zrow(batch.targets[t].pos));
        u_hat.extend(uh);
        u_norm.push(un);
        z_hat.extend(zh);
        z_norm.push(zn);
    }
    let (align, d_uh_a, d_zh_a) = alignment_loss_grad(&u_hat, &z_hat, dzw)?;

    let mut uniq: Vec<usize> = batch.finals.iter().map(|&t| batch.targets[t].pos).collect();
    uniq.sort_unstable();
    uniq.dedup();
    let mut terms = Vec::new();
    let mut d_uh_u = None;
    if n_s >= 2 {
        let (l, g) = uniformity_loss_grad(&u_hat, dzw)?;
        terms.push(l);
        d_uh_u = Some(g);
    }
    let mut item_hat = Vec::with_capacity(uniq.len() * dzw);
    let mut item_norm = Vec::with_capacity(uniq.len());
    let mut d_ih_u = None;
    if uniq.len() >= 2 {
        for &c in &uniq {
            let (h, n) = normalize(zrow(c));
            item_hat.extend(h);
            item_norm.push(n);
        }
        let (l, g) = uniformity_loss_grad(&item_hat, dzw)?;
        terms.push(l);
        d_ih_u = Some(g);
    }
    let uniform = if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    };
    let loss = LossBreakdown::combine(align, uniform, rec, w);
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss: align {} uniform {} rec {}",
            loss.align, loss.uniform, loss.rec
        )));
    }
    let Some(grad) = grad else {
        return Ok(loss);
    };

    let u_w = if terms.is_empty() { 0.0 } else { w[1] / terms.len() as f64 };
    for (s, &t) in batch.finals.iter().enumerate() {
        let blk = s * dzw..(s + 1) * dzw;
        let mut d_hat: Vec<f64> = d_uh_a[blk.clone()].iter().map(|v| w[0] * v).collect();
        if let Some(g) = &d_uh_u {
            axpy(u_w, &g[blk.clone()], &mut d_hat);
        }
        let du = normalize_backward(&u_hat[blk.clone()], u_norm[s], &d_hat);
        axpy(1.0, &du, &mut d_users[t * dzw..(t + 1) * dzw]);

        let d_zh: Vec<f64> = d_zh_a[blk.clone()].iter().map(|v| w[0] * v).collect();
        let dzp = normalize_backward(&z_hat[blk], z_norm[s], &d_zh);
        let lc = local[batch.targets[t].pos];
        axpy(1.0, &dzp, &mut dz[lc * dzw..(lc + 1) * dzw]);
    }
    if let Some(g) = &d_ih_u {
        for (i, &c) in uniq.iter().enumerate() {
            let blk = i * dzw..(i + 1) * dzw;
            let d_hat: Vec<f64> = g[blk.clone()].iter().map(|v| u_w * v).collect();
            let dzi = normalize_backward(&item_hat[blk], item_norm[i], &d_hat);
            let lc = local[c];
            axpy(1.0, &dzi, &mut dz[lc * dzw..(lc + 1) * dzw]);
        }
    }

    let d_pooled = r
        .head
        .backward(p, grad, &pooled, &d_users, n_t, true)
        .expect("dx requested");
    for (t, tg) in batch.targets.iter().enumerate() {
        let dp = &d_pooled[t * dzw..(t + 1) * dzw];
        if tg.history.is_empty() {
            axpy(1.0, dp, &mut grad[r.cold..r.cold + dzw]);
            continue;
        }
        let wts = &hist_w[t];
        let k = wts.len();
        let dw: Vec<f64> = tg.history.iter().map(|&c| dot(zrow(c), dp)).collect();
        let inner = dot(wts, &dw);
        for (i, &c) in tg.history.iter().enumerate() {
            let lc = local[c];
            axpy(wts[i], dp, &mut dz[lc * dzw..(lc + 1) * dzw]);
            grad[r.pos + h_max - k + i] += wts[i] * (dw[i] - inner);
        }
    }
    model.backward(p, &inputs, &fw, &dz, grad);
    Ok(loss)
}

/// Scales `grad` in place so its global 2-norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], reg: &Registry, lr_fusion: f64, lr_head: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for spec in reg.specs() {
            let lr = match spec.group {
                Group::Fusion => lr_fusion,
                Group::Head => lr_head,
            };
            for i in spec.range() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * wd * params[i];
                params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradient differences are measured absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Which parameter entries a gradient check visits.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    Every,
    /// The largest-magnitude entry of each tensor plus `extra` random ones.
    Sample { extra: usize, seed: u64 },
}

/// Central-difference check of the analytic gradient at `p`.
pub fn check_gradients(
    model: &Model,
    p: &[f64],
    catalog: &Catalog,
    batch: &Batch,
    w: [f64; 3],
    coverage: Coverage,
) -> Result<Vec<GradCheck>> {
    let (_, grad) = loss_and_grad(model, p, catalog, batch, w)?;
    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::Every => None,
    };
    let mut work = p.to_vec();
    let mut out = Vec::new();
    for spec in model.registry().specs() {
        let range = spec.range();
        let picks: Vec<usize> = match (&coverage, rng.as_mut()) {
            (Coverage::Sample { extra, .. }, Some(rng)) => {
                let best = range
                    .clone()
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .expect("nonempty tensor");
                let mut v = vec![best];
                v.extend((0..*extra).map(|_| rng.gen_range(range.clone())));
                v
            }
            _ => range.clone().collect(),
        };
        for i in picks {
            let orig = work[i];
            work[i] = orig + FD_STEP;
            let up = loss_only(model, &work, catalog, batch, w)?.total;
            work[i] = orig - FD_STEP;
            let down = loss_only(model, &work, catalog, batch, w)?.total;
            work[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            out.push(GradCheck {
                tensor: spec.name.clone(),
                index: i - spec.offset,
                analytic: grad[i],
                numeric,
                rel_error: relative_error(grad[i], numeric),
            });
        }
    }
    Ok(out)
}

pub fn max_rel_error(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}

/// Training inputs: the prepared catalog and split user sequences.
pub struct TrainData<'a> {
    pub catalog: &'a Catalog,
    pub users: &'a [UserSequence],
}

impl TrainData<'_> {
    /// A micro-batch over the first `n_users` users, final target only.
    pub fn micro_batch(&self, h_max: usize, n_users: usize, n_neg: usize, seed: u64) -> Result<Batch> {
        let idx = index_users(&self.users[..n_users.min(self.users.len())], self.catalog)?;
        let refs: Vec<&IndexedUser> = idx.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(build_batch(&refs, self.catalog.len(), h_max, n_neg, true, &mut rng))
    }

    /// Every training target of the given users with sampled negatives.
    pub fn full_batch(&self, h_max: usize, users: std::ops::Range<usize>, n_neg: usize, seed: u64) -> Result<Batch> {
        let idx = index_users(&self.users[users], self.catalog)?;
        let refs: Vec<&IndexedUser> = idx.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(build_batch(&refs, self.catalog.len(), h_max, n_neg, false, &mut rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_hr10: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation HR@10.
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub spot_check: Vec<GradCheck>,
}

/// Embeds every catalog item with `p`, rounded to stored precision.
pub fn embed_catalog(model: &Model, p: &[f64], catalog: &Catalog) -> Vec<f32> {
    let mut out = Vec::with_capacity(catalog.len() * model.config().d_z);
    for chunk in catalog.inputs.chunks(512) {
        let refs: Vec<&ItemInput> = chunk.iter().collect();
        out.extend(model.forward(p, &refs).z.iter().map(|&v| v as f32));
    }
    out
}

/// HR@10 on the validation split for parameters `p`.
pub fn validation_hr10(model: &Model, p: &[f64], catalog: &Catalog, users: &[UserSequence]) -> Result<f64> {
    let table = embed_catalog(model, p, catalog);
    let ranker = crate::model::ranker_view(model.config(), &model.layout().ranker, p);
    let scorer = EmbeddingScorer::new(catalog.ids.clone(), table, ranker)?;
    Ok(evaluate(&scorer, users, Split::Val, &[10])?.hr_at(10))
}

/// Runs the epoch loop and returns the best-validation model.
pub fn train(
    model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let h_max = model.config().h_max;
    let users = index_users(data.users, data.catalog)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..users.len()).collect();

    let mut spot = Vec::new();
    if cfg.spot_check && cfg.epochs > 0 && users.len() >= 2 {
        order.shuffle(&mut rng);
        let refs = [&users[order[0]], &users[order[1]]];
        let batch = build_batch(&refs, data.catalog.len(), h_max, cfg.n_negatives.min(4), true, &mut rng);
        spot = check_gradients(
            &model,
            &model.params,
            data.catalog,
            &batch,
            cfg.loss_weights,
            Coverage::Sample { extra: 2, seed: cfg.seed },
        )?;
        let worst = max_rel_error(&spot);
        if !(worst < GRAD_TOLERANCE) {
            let bad = spot
                .iter()
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                .expect("nonempty check");
            return Err(Error::Numerical(format!(
                "gradient check failed: {}[{}] analytic {} numeric {} (relative error {worst:e})",
                bad.tensor, bad.index, bad.analytic, bad.numeric
            )));
        }
    }

    let mut params = model.params.clone();
    let mut opt = AdamW::new(params.len());
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let f = cfg.lr_factor(epoch);
        let mut parts: [Vec<f64>; 4] = Default::default();
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&IndexedUser> = chunk.iter().map(|&i| &users[i]).collect();
            let batch = build_batch(&refs, data.catalog.len(), h_max, cfg.n_negatives, false, &mut rng);
            let (loss, mut grad) = loss_and_grad(&model, &params, data.catalog, &batch, cfg.loss_weights)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            opt.step(
                &mut params,
                &grad,
                model.registry(),
                cfg.lr_fusion * f,
                cfg.lr_head * f,
                cfg.weight_decay,
            );
            snap_to_f32(&mut params);
            parts[0].push(loss.align);
            parts[1].push(loss.uniform);
            parts[2].push(loss.rec);
            parts[3].push(loss.total);
        }
        let mean = |v: &Vec<f64>| pairwise_sum(v) / v.len() as f64;
        let val_hr10 = validation_hr10(&model, &params, data.catalog, data.users)?;
        let log = EpochLog {
            epoch: epoch + 1,
            loss: LossBreakdown {
                align: mean(&parts[0]),
                uniform: mean(&parts[1]),
                rec: mean(&parts[2]),
                total: mean(&parts[3]),
            },
            val_hr10,
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|b| val_hr10 > b.0) {
            best = Some((val_hr10, epoch + 1, params.clone()));
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (Some(e), p),
        None => (None, model.params.clone()),
    };
    let config = model.config().clone();
    Ok(TrainOutcome {
        model: Model::from_params(config, params)?,
        history,
        best_epoch,
        spot_check: spot,
    })
}

pub fn write_training_log<W: Write>(history: &[EpochLog], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["epoch", "align", "uniform", "rec", "total", "val_hr10"])
        .map_err(err)?;
    for h in history {
        wr.write_record([
            h.epoch.to_string(),
            format!("{:.9}", h.loss.align),
            format!("{:.9}", h.loss.uniform),
            format!("{:.9}", h.loss.rec),
            format!("{:.9}", h.loss.total),
            format!("{:.6}", h.val_hr10),
        ])
        .map_err(err)?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_training_log(history: &[EpochLog], path: &Path) -> Result<u64> {
    let mut buf = Vec::new();
    write_training_log(history, &mut buf)?;
    crate::atomic::write_bytes(path, &buf)
}
