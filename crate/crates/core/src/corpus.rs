//! Seeded synthetic catalog and interaction logs.
//!
//! Every video carries two planted signals. Its texture sits in the first
//! content token, where a single embedding lookup exposes it. Its topic only
//! shows up in the multiset of the remaining tokens, so reading it requires
//! mixing information across positions. Users prefer one topic and, inside it,
//! one texture; a fixed share of each history is uniform noise.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub n_textures: usize,
    /// Inclusive (min, max) number of interactions per user.
    pub history_len_range: (usize, usize),
    pub seed: u64,
    /// Content tokens per video, texture token included.
    pub content_len: usize,
    /// Distinct vocabulary tokens reserved for each topic.
    pub topic_pool_size: usize,
    /// Probability that a non-texture content token comes from the topic pool.
    pub topic_token_prob: f64,
    /// Share of interactions drawn uniformly from the catalog.
    pub noise: f64,
    /// Extra sampling weight for in-topic items whose texture also matches.
    pub texture_affinity: f64,
    pub vocab_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_items: 2000,
            n_topics: 20,
            n_textures: 5,
            history_len_range: (5, 15),
            seed: 7,
            content_len: 12,
            topic_pool_size: 6,
            topic_token_prob: 0.6,
            noise: 0.2,
            texture_affinity: 3.0,
            vocab_size: 256,
        }
    }
}

impl CorpusConfig {
    fn texture_token(&self, texture: usize) -> u32 {
        texture as u32
    }

    fn topic_token(&self, topic: usize, slot: usize) -> u32 {
        (self.n_textures + topic * self.topic_pool_size + slot) as u32
    }

    fn filler_range(&self) -> (u32, u32) {
        (
            (self.n_textures + self.n_topics * self.topic_pool_size) as u32,
            self.vocab_size as u32,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_users == 0 {
            return bad("n_users must be at least 1".into());
        }
        if self.n_topics == 0 || self.n_textures == 0 {
            return bad("n_topics and n_textures must be at least 1".into());
        }
        if self.n_items < self.n_topics {
            return bad(format!(
                "n_items ({}) must be at least n_topics ({})",
                self.n_items, self.n_topics
            ));
        }
        let (lo, hi) = self.history_len_range;
        if lo < 2 || lo > hi {
            return bad(format!("history_len_range ({lo},{hi}) must satisfy 2 <= min <= max"));
        }
        if hi > self.n_items {
            return bad(format!("history max {hi} exceeds catalog size {}", self.n_items));
        }
        if self.content_len < 2 {
            return bad("content_len must be at least 2".into());
        }
        if self.topic_pool_size == 0 {
            return bad("topic_pool_size must be at least 1".into());
        }
        let (f_lo, f_hi) = self.filler_range();
        if f_lo >= f_hi {
            return bad(format!(
                "vocab_size {} leaves no filler tokens after {} reserved ids",
                self.vocab_size, f_lo
            ));
        }
        for (name, p) in [
            ("topic_token_prob", self.topic_token_prob),
            ("noise", self.noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.texture_affinity >= 0.0) {
            return bad("texture_affinity must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub item_id: ItemId,
    pub topic_id: u32,
    pub texture_id: u32,
    pub token_ids: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: u64,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub events: Vec<Interaction>,
}

/// One user's events after a leave-one-out split, in timestamp order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: UserId,
    pub train: Vec<ItemId>,
    pub val: ItemId,
    pub test: ItemId,
}

impl UserSequence {
    /// Items the model sees as history when predicting `split`.
    pub fn history_for(&self, split: Split) -> Vec<ItemId> {
        match split {
            Split::Train => Vec::new(),
            Split::Val => self.train.clone(),
            Split::Test => {
                let mut h = self.train.clone();
                h.push(self.val);
                h
            }
        }
    }

    pub fn target(&self, split: Split) -> Option<ItemId> {
        match split {
            Split::Train => None,
            Split::Val => Some(self.val),
            Split::Test => Some(self.test),
        }
    }
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_split(&self) -> bool {
        !self.events.is_empty() && self.events.iter().all(|e| e.split.is_some())
    }

    pub fn count(&self, split: Split) -> usize {
        self.events.iter().filter(|e| e.split == Some(split)).count()
    }

    /// Event indices grouped per user, each group in log order.
    fn per_user(&self) -> BTreeMap<UserId, Vec<usize>> {
        let mut map: BTreeMap<UserId, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            map.entry(e.user).or_default().push(i);
        }
        map
    }

    /// Per-user sequences in ascending user order. Requires a split log.
    pub fn user_sequences(&self) -> Result<Vec<UserSequence>> {
        let mut out = Vec::new();
        for (user, idx) in self.per_user() {
            let mut train = Vec::new();
            let mut val = None;
            let mut test = None;
            for &i in &idx {
                let e = &self.events[i];
                match e.split {
                    Some(Split::Train) => train.push(e.item),
                    Some(Split::Val) => val = Some(e.item),
                    Some(Split::Test) => test = Some(e.item),
                    None => {
                        return Err(Error::Input(format!("user {user} has unsplit events")));
                    }
                }
            }
            match (val, test) {
                (Some(val), Some(test)) => out.push(UserSequence {
                    user,
                    train,
                    val,
                    test,
                }),
                _ => {
                    return Err(Error::Input(format!(
                        "user {user} lacks a val or test event"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Generates the catalog and an unsplit interaction log.
pub fn generate_corpus(config: &CorpusConfig) -> Result<(Vec<SyntheticVideo>, InteractionLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut topics: Vec<usize> = (0..config.n_items).map(|i| i % config.n_topics).collect();
    topics.shuffle(&mut rng);
    let (filler_lo, filler_hi) = config.filler_range();

    let mut videos = Vec::with_capacity(config.n_items);
    for (i, &topic) in topics.iter().enumerate() {
        let texture = rng.gen_range(0..config.n_textures);
        let mut tokens = Vec::with_capacity(config.content_len);
        tokens.push(config.texture_token(texture));
        for _ in 1..config.content_len {
            if rng.gen::<f64>() < config.topic_token_prob {
                let slot = rng.gen_range(0..config.topic_pool_size);
                tokens.push(config.topic_token(topic, slot));
            } else {
                tokens.push(rng.gen_range(filler_lo..filler_hi));
            }
        }
        videos.push(SyntheticVideo {
            item_id: ItemId(i as u32),
            topic_id: topic as u32,
            texture_id: texture as u32,
            token_ids: tokens,
        });
    }

    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); config.n_topics];
    for (i, v) in videos.iter().enumerate() {
        by_topic[v.topic_id as usize].push(i);
    }

    let (lo, hi) = config.history_len_range;
    let mut events = Vec::new();
    let mut taken = vec![false; config.n_items];
    let mut weights = Vec::new();
    for u in 0..config.n_users {
        let pref_topic = rng.gen_range(0..config.n_topics);
        let pref_texture = rng.gen_range(0..config.n_textures) as u32;
        let len = rng.gen_range(lo..=hi);
        let mut chosen: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let pool = &by_topic[pref_topic];
            weights.clear();
            weights.extend(pool.iter().map(|&i| {
                if taken[i] {
                    0.0
                } else if videos[i].texture_id == pref_texture {
                    1.0 + config.texture_affinity
                } else {
                    1.0
                }
            }));
            let total: f64 = weights.iter().sum();
            let pick = if rng.gen::<f64>() >= config.noise && total > 0.0 {
                let mut r = rng.gen::<f64>() * total;
                let mut pick = None;
                for (&i, &w) in pool.iter().zip(&weights) {
                    if w > 0.0 {
                        pick = Some(i);
                        if r < w {
                            break;
                        }
                        r -= w;
                    }
                }
                pick.expect("positive total weight")
            } else {
                loop {
                    let i = rng.gen_range(0..config.n_items);
                    if !taken[i] {
                        break i;
                    }
                }
            };
            taken[pick] = true;
            chosen.push(pick);
        }
        for (t, &i) in chosen.iter().enumerate() {
            taken[i] = false;
            events.push(Interaction {
                user: UserId(u as u32),
                item: ItemId(i as u32),
                timestamp: t as u64,
                split: None,
            });
        }
    }
    Ok((videos, InteractionLog { events }))
}

/// Labels the last event of every user `test`, the second-last `val` and the
/// rest `train`. Event order is preserved.
pub fn split_leave_one_out(log: &InteractionLog) -> Result<InteractionLog> {
    let mut out = log.clone();
    for (user, idx) in log.per_user() {
        if idx.len() < 3 {
            return Err(Error::Split {
                user: user.0,
                count: idx.len(),
            });
        }
        let mut order = idx.clone();
        order.sort_by_key(|&i| log.events[i].timestamp);
        if order
            .windows(2)
            .any(|w| log.events[w[0]].timestamp == log.events[w[1]].timestamp)
        {
            return Err(Error::Input(format!(
                "user {user} has duplicate timestamps"
            )));
        }
        let n = order.len();
        for (rank, &i) in order.iter().enumerate() {
            out.events[i].split = Some(if rank == n - 1 {
                Split::Test
            } else if rank == n - 2 {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    Ok(out)
}

pub fn write_items_jsonl<W: Write>(videos: &[SyntheticVideo], mut w: W) -> std::io::Result<()> {
    for v in videos {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_items_jsonl<R: BufRead>(r: R) -> Result<Vec<SyntheticVideo>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<items>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: SyntheticVideo = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("items line {}: {e}", n + 1)))?;
        if v.token_ids.is_empty() {
            return Err(Error::Format(format!("item {} has no tokens", v.item_id)));
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct InteractionRow {
    user_id: u32,
    item_id: u32,
    timestamp: u64,
    split: String,
}

pub fn write_interactions_csv<W: Write>(log: &InteractionLog, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for e in &log.events {
        wtr.serialize(InteractionRow {
            user_id: e.user.0,
            item_id: e.item.0,
            timestamp: e.timestamp,
            split: e.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io("<interactions>", e))?;
    Ok(())
}

pub fn read_interactions_csv<R: std::io::Read>(r: R) -> Result<InteractionLog> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut events = Vec::new();
    for row in rdr.deserialize::<InteractionRow>() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let split = match row.split.as_str() {
            "" => None,
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            other => return Err(Error::Format(format!("unknown split label {other:?}"))),
        };
        events.push(Interaction {
            user: UserId(row.user_id),
            item: ItemId(row.item_id),
            timestamp: row.timestamp,
            split,
        });
    }
    Ok(InteractionLog { events })
}

pub const ITEMS_FILE: &str = "items.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.csv";

/// Writes `items.jsonl` and `interactions.csv` into `dir`.
pub fn save_corpus(dir: &Path, videos: &[SyntheticVideo], log: &InteractionLog) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::new();
    write_items_jsonl(videos, &mut items).map_err(|e| Error::io(dir, e))?;
    crate::atomic::write_bytes(&dir.join(ITEMS_FILE), &items)?;
    let mut inter = Vec::new();
    write_interactions_csv(log, &mut inter)?;
    crate::atomic::write_bytes(&dir.join(INTERACTIONS_FILE), &inter)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(Vec<SyntheticVideo>, InteractionLog)> {
    let items_path = dir.join(ITEMS_FILE);
    let f = std::fs::File::open(&items_path).map_err(|e| Error::io(&items_path, e))?;
    let videos = read_items_jsonl(std::io::BufReader::new(f))?;
    let log_path = dir.join(INTERACTIONS_FILE);
    let f = std::fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let log = read_interactions_csv(std::io::BufReader::new(f))?;
    Ok((videos, log))
}
