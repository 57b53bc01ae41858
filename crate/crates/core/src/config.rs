//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted
//! `section.field`. Lists are comma separated. Unset keys keep their
//! defaults; [`KEYS`] documents every key.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::ExtractionConfig;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::store::StoreOptions;

/// Every knob a subcommand may read.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub store: StoreOptions,
}

/// (key, description)
pub const KEYS: &[(&str, &str)] = &[
    ("corpus.n_users", "number of users"),
    ("corpus.n_items", "number of videos in the catalog"),
    ("corpus.n_topics", "latent topics"),
    ("corpus.n_textures", "texture classes, carried by the first content token"),
    ("corpus.history_len_min", "fewest interactions per user (at least 3)"),
    ("corpus.history_len_max", "most interactions per user"),
    ("corpus.seed", "corpus generator seed"),
    ("corpus.content_len", "content tokens per video"),
    ("corpus.topic_pool_size", "vocabulary tokens reserved per topic"),
    ("corpus.topic_token_prob", "chance a content token comes from the topic pool"),
    ("corpus.noise", "share of uniformly random interactions"),
    ("corpus.texture_affinity", "extra weight for in-topic items with the preferred texture"),
    ("corpus.vocab_size", "token ids used by the corpus"),
    ("backbone.n_layers", "transformer blocks"),
    ("backbone.d", "hidden width"),
    ("backbone.n_heads", "attention heads"),
    ("backbone.vocab_size", "backbone vocabulary"),
    ("backbone.max_seq", "longest token sequence"),
    ("backbone.tap_stride", "layer spacing between taps"),
    ("backbone.seed", "weight seed"),
    ("extraction.prompt", "prompt token ids, comma separated"),
    ("extraction.n_new", "greedy decode steps per item"),
    ("model.mode", "full, last_token_moe, mean_pool_moe or last_layer_last_token"),
    ("model.m", "learnable queries per pooling branch"),
    ("model.d_c", "compressed layer width (even)"),
    ("model.d_z", "item embedding width"),
    ("model.gate_hidden", "gate hidden width"),
    ("model.merge_r", "tokens removed per merge pass"),
    ("model.merge_passes", "merge passes"),
    ("model.h_max", "most recent history items read by the ranker"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "user sequences per step"),
    ("train.lr_fusion", "learning rate of compressor, experts, gate and projections"),
    ("train.lr_head", "learning rate of the ranker head"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.grad_clip", "global gradient norm clip"),
    ("train.n_negatives", "sampled negatives per positive"),
    ("train.loss_weights", "align, uniform, rec weights, comma separated"),
    ("train.seed", "initialisation and data order seed (also --seed)"),
    ("train.lr_gamma", "learning-rate decay factor"),
    ("train.lr_step_epochs", "epochs between decays"),
    ("train.warmup_epochs", "linear warm-up epochs"),
    ("train.spot_check", "finite-difference check before the first step (true/false)"),
    ("store.gate_weights", "keep gate weights in the feature store (true/false)"),
    ("store.per_layer", "keep per-layer features in the feature store (true/false)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `text` over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        if !seen.contains("extraction.prompt") && seen.contains("backbone.vocab_size") {
            let n_new = cfg.pipeline.extraction.n_new;
            cfg.pipeline.extraction = ExtractionConfig {
                n_new,
                ..ExtractionConfig::for_vocab(cfg.pipeline.backbone.vocab_size)
            };
        }
        cfg.pipeline.sync();
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let (c, b, x, m, t) = (&mut p.corpus, &mut p.backbone, &mut p.extraction, &mut p.model, &mut p.train);
        match key {
            "corpus.n_users" => c.n_users = parse(key, v)?,
            "corpus.n_items" => c.n_items = parse(key, v)?,
            "corpus.n_topics" => c.n_topics = parse(key, v)?,
            "corpus.n_textures" => c.n_textures = parse(key, v)?,
            "corpus.history_len_min" => c.history_len_range.0 = parse(key, v)?,
            "corpus.history_len_max" => c.history_len_range.1 = parse(key, v)?,
            "corpus.seed" => c.seed = parse(key, v)?,
            "corpus.content_len" => c.content_len = parse(key, v)?,
            "corpus.topic_pool_size" => c.topic_pool_size = parse(key, v)?,
            "corpus.topic_token_prob" => c.topic_token_prob = parse(key, v)?,
            "corpus.noise" => c.noise = parse(key, v)?,
            "corpus.texture_affinity" => c.texture_affinity = parse(key, v)?,
            "corpus.vocab_size" => c.vocab_size = parse(key, v)?,
            "backbone.n_layers" => b.n_layers = parse(key, v)?,
            "backbone.d" => b.d = parse(key, v)?,
            "backbone.n_heads" => b.n_heads = parse(key, v)?,
            "backbone.vocab_size" => b.vocab_size = parse(key, v)?,
            "backbone.max_seq" => b.max_seq = parse(key, v)?,
            "backbone.tap_stride" => b.tap_stride = parse(key, v)?,
            "backbone.seed" => b.seed = parse(key, v)?,
            "extraction.prompt" => x.prompt = parse_list(key, v)?,
            "extraction.n_new" => x.n_new = parse(key, v)?,
            "model.mode" => m.mode = v.parse()?,
            "model.m" => m.m = parse(key, v)?,
            "model.d_c" => m.d_c = parse(key, v)?,
            "model.d_z" => m.d_z = parse(key, v)?,
            "model.gate_hidden" => m.gate_hidden = parse(key, v)?,
            "model.merge_r" => m.merge.r = parse(key, v)?,
            "model.merge_passes" => m.merge.passes = parse(key, v)?,
            "model.h_max" => m.h_max = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr_fusion" => t.lr_fusion = parse(key, v)?,
            "train.lr_head" => t.lr_head = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.n_negatives" => t.n_negatives = parse(key, v)?,
            "train.loss_weights" => {
                let w: Vec<f64> = parse_list(key, v)?;
                t.loss_weights = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} takes exactly 3 values")))?;
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.lr_gamma" => t.lr_gamma = parse(key, v)?,
            "train.lr_step_epochs" => t.lr_step_epochs = parse(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "train.spot_check" => t.spot_check = parse(key, v)?,
            "store.gate_weights" => self.store.gate_weights = parse(key, v)?,
            "store.per_layer" => self.store.per_layer = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current values of every key, in [`KEYS`] order, as a loadable file.
    pub fn render(&self) -> String {
        let p = &self.pipeline;
        let (c, b, x, m, t) = (&p.corpus, &p.backbone, &p.extraction, &p.model, &p.train);
        let join = |v: &[String]| v.join(", ");
        let values: Vec<String> = vec![
            c.n_users.to_string(),
            c.n_items.to_string(),
            c.n_topics.to_string(),
            c.n_textures.to_string(),
            c.history_len_range.0.to_string(),
            c.history_len_range.1.to_string(),
            c.seed.to_string(),
            c.content_len.to_string(),
            c.topic_pool_size.to_string(),
            c.topic_token_prob.to_string(),
            c.noise.to_string(),
            c.texture_affinity.to_string(),
            c.vocab_size.to_string(),
            b.n_layers.to_string(),
            b.d.to_string(),
            b.n_heads.to_string(),
            b.vocab_size.to_string(),
            b.max_seq.to_string(),
            b.tap_stride.to_string(),
            b.seed.to_string(),
            join(&x.prompt.iter().map(u32::to_string).collect::<Vec<_>>()),
            x.n_new.to_string(),
            m.mode.to_string(),
            m.m.to_string(),
            m.d_c.to_string(),
            m.d_z.to_string(),
            m.gate_hidden.to_string(),
            m.merge.r.to_string(),
            m.merge.passes.to_string(),
            m.h_max.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr_fusion.to_string(),
            t.lr_head.to_string(),
            t.weight_decay.to_string(),
            t.grad_clip.to_string(),
            t.n_negatives.to_string(),
            join(&t.loss_weights.iter().map(f64::to_string).collect::<Vec<_>>()),
            t.seed.to_string(),
            t.lr_gamma.to_string(),
            t.lr_step_epochs.to_string(),
            t.warmup_epochs.to_string(),
            t.spot_check.to_string(),
            self.store.gate_weights.to_string(),
            self.store.per_layer.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for ((key, doc), value) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "# {doc}\n{key} = {value}");
        }
        out
    }
}
