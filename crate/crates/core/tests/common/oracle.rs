//! Independent reference implementations shared by the test targets.

use std::collections::HashMap;

use linkedout::backbone::{LayerStates, TapState};
use linkedout::compressor::MergeConfig;
use linkedout::corpus::{ItemId, Split, UserId, UserSequence};
use linkedout::eval::Scorer;
use linkedout::fusion::FusionMode;
use linkedout::model::{Model, ModelConfig};
use linkedout::trainer::Catalog;
use linkedout::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    // a zero vector is orthogonal to everything
    if aa * bb == 0.0 {
        0.0
    } else {
        dot / (aa * bb).sqrt()
    }
}

/// Enumerates every (even, odd) pair, walks them from most to least similar
/// and folds the first `r` distinct even tokens into their partners.
pub fn merge_oracle(tokens: &[f64], d: usize, r: usize) -> Vec<f64> {
    let n = tokens.len() / d;
    let row = |i: usize| &tokens[i * d..(i + 1) * d];
    let mut pairs = Vec::new();
    for a in (0..n).step_by(2) {
        for b in (1..n).step_by(2) {
            pairs.push((cos(row(a), row(b)), a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut into: Vec<Option<usize>> = vec![None; n];
    let mut taken = 0;
    for &(_, a, b) in &pairs {
        if taken == r {
            break;
        }
        if into[a].is_none() {
            into[a] = Some(b);
            taken += 1;
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        if into[i].is_some() {
            continue;
        }
        let members: Vec<usize> = std::iter::once(i).chain((0..n).filter(|&a| into[a] == Some(i))).collect();
        for j in 0..d {
            if members.len() == 1 {
                out.push(row(i)[j]);
            } else {
                out.push(members.iter().map(|&m| row(m)[j]).sum::<f64>() / members.len() as f64);
            }
        }
    }
    out
}

pub const GRAD_ITEMS: usize = 12;

/// A model small enough to finite-difference every parameter.
pub fn grad_config(mode: FusionMode, d_c: usize) -> ModelConfig {
    ModelConfig {
        mode,
        d: 6,
        n_taps: 3,
        m: 2,
        d_c,
        d_z: 4,
        gate_hidden: 5,
        merge: MergeConfig { r: 1, passes: 2 },
        h_max: 3,
    }
}

fn grad_item(rng: &mut ChaCha8Rng, n_new: usize) -> LayerStates {
    let n_orig = 6;
    LayerStates {
        d: 6,
        tap_stride: 2,
        n_original: n_orig,
        n_new,
        taps: (0..3)
            .map(|t| TapState {
                layer_index: 2 * t,
                hidden: (0..(n_orig + n_new) * 6).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
            })
            .collect(),
    }
}

/// Random catalog and three users for a gradient check.
pub fn grad_fixture(model: &Model, seed: u64) -> (Catalog, Vec<UserSequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // items 0 and 5 generate nothing, so the learned empty token is exercised
    let inputs = (0..GRAD_ITEMS)
        .map(|i| {
            let n_new = if i % 5 == 0 { 0 } else { 1 + i % 3 };
            model.prepare(&grad_item(&mut rng, n_new)).unwrap()
        })
        .collect();
    let catalog = Catalog::new((0..GRAD_ITEMS as u32).collect(), inputs).unwrap();
    let users = (0..3)
        .map(|u| {
            let mut items: Vec<u32> = (0..GRAD_ITEMS as u32).collect();
            items.shuffle(&mut rng);
            let len = 3 + u;
            UserSequence {
                user: UserId(u as u32),
                train: items[..len].iter().map(|&i| ItemId(i)).collect(),
                val: ItemId(items[len]),
                test: ItemId(items[len + 1]),
            }
        })
        .collect();
    (catalog, users)
}

/// Fixed per-(history, item) scores drawn once, with deliberate ties.
pub struct TableScorer {
    pub ids: Vec<u32>,
    pub table: HashMap<Vec<u32>, Vec<f64>>,
}

impl Scorer for TableScorer {
    fn catalog(&self) -> &[u32] {
        &self.ids
    }

    fn scores(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        let key: Vec<u32> = history.iter().map(|i| i.0).collect();
        Ok(self.table[&key].clone())
    }
}

/// Sorts every candidate by (score desc, id asc) and reads off the rank.
pub fn oracle_rank(scorer: &TableScorer, u: &UserSequence, split: Split, exclude_train: bool) -> usize {
    let target = u.target(split).unwrap().0;
    let scores = scorer.scores(&u.history_for(split)).unwrap();
    let mut cands: Vec<(u32, f64)> = scorer
        .ids
        .iter()
        .zip(&scores)
        .filter(|(id, _)| !exclude_train || **id == target || !u.train.contains(&ItemId(**id)))
        .map(|(&id, &s)| (id, s))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    1 + cands.iter().position(|c| c.0 == target).unwrap()
}

/// Metric means straight from the definitions.
pub fn oracle_metrics(scorer: &TableScorer, users: &[UserSequence], split: Split, k: usize) -> (f64, f64) {
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for u in users {
        let rank = oracle_rank(scorer, u, split, true);
        if rank <= k {
            hr += 1.0;
            ndcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let n = users.len() as f64;
    (hr / n, ndcg / n)
}

/// Up to 10 items and 20 users with coarse, tie-heavy scores.
pub fn micro_case(rng: &mut ChaCha8Rng) -> (TableScorer, Vec<UserSequence>) {
    let n_items = rng.gen_range(3..=10);
    let n_users = rng.gen_range(1..=20);
    let mut ids: Vec<u32> = (0..n_items).map(|i| 100 + 7 * i).collect();
    ids.shuffle(rng);
    let mut users = Vec::new();
    let mut table = HashMap::new();
    for u in 0..n_users {
        let mut items = ids.clone();
        items.shuffle(rng);
        let len = rng.gen_range(3..=n_items as usize);
        let seq: Vec<ItemId> = items[..len].iter().map(|&i| ItemId(i)).collect();
        let user = UserSequence {
            user: UserId(u),
            train: seq[..len - 2].to_vec(),
            val: seq[len - 2],
            test: seq[len - 1],
        };
        for split in [Split::Val, Split::Test] {
            let key: Vec<u32> = user.history_for(split).iter().map(|i| i.0).collect();
            let row: Vec<f64> = (0..n_items).map(|_| rng.gen_range(0..4) as f64 * 0.5).collect();
            table.entry(key).or_insert(row);
        }
        users.push(user);
    }
    (TableScorer { ids, table }, users)
}

/// Scores every item uniformly at random, afresh on each call.
pub struct RandomScorer {
    pub ids: Vec<u32>,
    pub rng: std::cell::RefCell<ChaCha8Rng>,
}

impl RandomScorer {
    pub fn new(ids: Vec<u32>, seed: u64) -> Self {
        Self {
            ids,
            rng: std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Scorer for RandomScorer {
    fn catalog(&self) -> &[u32] {
        &self.ids
    }

    fn scores(&self, _: &[ItemId]) -> Result<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        Ok(self.ids.iter().map(|_| rng.gen::<f64>()).collect())
    }
}
