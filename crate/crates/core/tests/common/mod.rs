#![allow(dead_code)]

pub mod oracle;

use linkedout::backbone::{Backbone, BackboneConfig, ExtractionConfig, LayerStates};
use linkedout::compressor::MergeConfig;
use linkedout::corpus::CorpusConfig;
use linkedout::model::ModelConfig;
use linkedout::pipeline::{build_corpus, extract_all, video_ids, CorpusData, PipelineConfig};
use linkedout::trainer::TrainConfig;

/// A pipeline small enough to train in well under a second.
pub fn tiny_config() -> PipelineConfig {
    let corpus = CorpusConfig {
        n_users: 80,
        n_items: 40,
        n_topics: 4,
        n_textures: 3,
        history_len_range: (4, 8),
        ..CorpusConfig::default()
    };
    let backbone = BackboneConfig {
        n_layers: 4,
        d: 16,
        n_heads: 2,
        ..BackboneConfig::default()
    };
    let model = ModelConfig {
        d: 16,
        n_taps: backbone.n_taps(),
        m: 2,
        d_c: 8,
        d_z: 8,
        gate_hidden: 6,
        merge: MergeConfig { r: 2, passes: 1 },
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 3,
        batch_size: 16,
        n_negatives: 8,
        ..TrainConfig::toy()
    };
    PipelineConfig {
        corpus,
        extraction: ExtractionConfig::for_vocab(backbone.vocab_size),
        backbone,
        model,
        train,
    }
}

pub struct Fixture {
    pub cfg: PipelineConfig,
    pub data: CorpusData,
    pub backbone: Backbone,
    pub ids: Vec<u32>,
    pub states: Vec<LayerStates>,
}

pub fn fixture(cfg: PipelineConfig) -> Fixture {
    cfg.validate().unwrap();
    let data = build_corpus(&cfg.corpus).unwrap();
    let backbone = Backbone::new(cfg.backbone.clone()).unwrap();
    let states = extract_all(&backbone, &data.videos, &cfg.extraction).unwrap();
    Fixture {
        ids: video_ids(&data.videos),
        cfg,
        data,
        backbone,
        states,
    }
}

pub fn tiny() -> Fixture {
    fixture(tiny_config())
}
