//! End-to-end orchestration shared by the CLI, the benchmarks and the tests.

use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig, ExtractionConfig, LayerStates};
use crate::corpus::{generate_corpus, split_leave_one_out, CorpusConfig, InteractionLog, Split, SyntheticVideo, UserSequence};
use crate::dump::{dump_path, read_dump, write_dump};
use crate::error::{Error, Result};
use crate::eval::{evaluate, gate_stats, EmbeddingScorer, EvalReport, GateStats, DEFAULT_KS};
use crate::fusion::FusionMode;
use crate::model::{ItemInput, Model, ModelConfig};
use crate::trainer::{embed_catalog, train, Catalog, EpochLog, TrainConfig, TrainData, TrainOutcome};

/// Every knob of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub backbone: BackboneConfig,
    pub extraction: ExtractionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let backbone = BackboneConfig::default();
        let extraction = ExtractionConfig::for_vocab(backbone.vocab_size);
        let model = ModelConfig {
            d: backbone.d,
            n_taps: backbone.n_taps(),
            ..ModelConfig::default()
        };
        Self {
            corpus,
            backbone,
            extraction,
            model,
            train: TrainConfig::toy(),
        }
    }
}

impl PipelineConfig {
    /// Keeps derived widths in step with the backbone.
    pub fn sync(&mut self) {
        self.model.d = self.backbone.d;
        self.model.n_taps = self.backbone.n_taps();
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.backbone.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d != self.backbone.d || self.model.n_taps != self.backbone.n_taps() {
            return Err(Error::Config(format!(
                "model expects width {} and {} taps, backbone gives {} and {}",
                self.model.d,
                self.model.n_taps,
                self.backbone.d,
                self.backbone.n_taps()
            )));
        }
        if self.corpus.vocab_size > self.backbone.vocab_size {
            return Err(Error::Config("corpus vocabulary exceeds the backbone's".into()));
        }
        Ok(())
    }
}

/// Generated catalog, split log and per-user sequences.
pub struct CorpusData {
    pub videos: Vec<SyntheticVideo>,
    pub log: InteractionLog,
    pub users: Vec<UserSequence>,
}

pub fn build_corpus(cfg: &CorpusConfig) -> Result<CorpusData> {
    let (videos, raw) = generate_corpus(cfg)?;
    from_log(videos, &raw)
}

/// Splits `log` when needed and derives user sequences.
pub fn from_log(videos: Vec<SyntheticVideo>, log: &InteractionLog) -> Result<CorpusData> {
    let log = if log.is_split() {
        log.clone()
    } else {
        split_leave_one_out(log)?
    };
    let users = log.user_sequences()?;
    Ok(CorpusData { videos, log, users })
}

/// Runs the backbone over every video.
pub fn extract_all(backbone: &Backbone, videos: &[SyntheticVideo], ex: &ExtractionConfig) -> Result<Vec<LayerStates>> {
    videos.iter().map(|v| backbone.extract(v, ex)).collect()
}

/// Extracts every video and writes one dump per item; returns total bytes.
pub fn extract_to_dir(backbone: &Backbone, videos: &[SyntheticVideo], ex: &ExtractionConfig, dir: &Path) -> Result<u64> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut total = 0;
    for v in videos {
        let states = backbone.extract(v, ex)?;
        let id = v.item_id.to_string();
        total += write_dump(&states, &id, &dump_path(dir, &id))?;
    }
    Ok(total)
}

/// Reads every dump in `dir` as `(item id, states)`, sorted by id.
pub fn read_dump_dir(dir: &Path) -> Result<Vec<(u32, LayerStates)>> {
    let mut out = Vec::new();
    for path in crate::dump::list_dumps(dir)? {
        let (id, states) = read_dump(&path)?;
        let id: u32 = id
            .parse()
            .map_err(|_| Error::Format(format!("item id {id:?} in {} is not numeric", path.display())))?;
        out.push((id, states));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

pub fn prepare_catalog(model: &Model, ids: Vec<u32>, states: &[LayerStates]) -> Result<Catalog> {
    let inputs = states.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    Catalog::new(ids, inputs)
}

pub fn video_ids(videos: &[SyntheticVideo]) -> Vec<u32> {
    videos.iter().map(|v| v.item_id.0).collect()
}

/// Scorer over the model's own embeddings, rounded to stored precision.
pub fn model_scorer(model: &Model, catalog: &Catalog) -> Result<EmbeddingScorer> {
    let table = embed_catalog(model, &model.params, catalog);
    EmbeddingScorer::new(catalog.ids.clone(), table, model.ranker_params())
}

pub fn evaluate_model(model: &Model, catalog: &Catalog, users: &[UserSequence], split: Split) -> Result<EvalReport> {
    let scorer = model_scorer(model, catalog)?;
    evaluate(&scorer, users, split, &DEFAULT_KS)
}

/// Gate weights for every catalog item, `catalog.len() × n_taps` row-major.
pub fn catalog_gate_weights(model: &Model, catalog: &Catalog) -> Result<Vec<f64>> {
    if !model.mode().has_gate() {
        return Err(Error::MissingData(format!("mode {} has no gate", model.mode())));
    }
    let mut out = Vec::with_capacity(catalog.len() * model.config().n_taps);
    for chunk in catalog.inputs.chunks(512) {
        let refs: Vec<&ItemInput> = chunk.iter().collect();
        let fw = model.forward(&model.params, &refs);
        for r in 0..refs.len() {
            out.extend_from_slice(fw.pi_row(r).expect("gated mode"));
        }
    }
    Ok(out)
}

/// Gate statistics over the whole catalog, labelled by backbone layer.
pub fn catalog_gate_stats(model: &Model, catalog: &Catalog, tap_layers: &[usize]) -> Result<GateStats> {
    let pis = catalog_gate_weights(model, catalog)?;
    let rows: Vec<&[f64]> = pis.chunks(tap_layers.len()).collect();
    gate_stats(tap_layers, &rows)
}

/// Trains one mode from scratch on already extracted states.
pub fn train_mode(
    cfg: &PipelineConfig,
    mode: FusionMode,
    seed: u64,
    ids: &[u32],
    states: &[LayerStates],
    users: &[UserSequence],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainOutcome, Catalog)> {
    let mcfg = ModelConfig {
        mode,
        ..cfg.model.clone()
    };
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let model = Model::new(mcfg, seed)?;
    let catalog = prepare_catalog(&model, ids.to_vec(), states)?;
    let data = TrainData {
        catalog: &catalog,
        users,
    };
    let out = train(model, &data, &tcfg, on_epoch)?;
    Ok((out, catalog))
}

/// One trained mode and its test-split report.
#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub mode: FusionMode,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains every mode for every seed from scratch and evaluates on test.
pub fn ablation_run(
    cfg: &PipelineConfig,
    modes: &[FusionMode],
    seeds: &[u64],
    ids: &[u32],
    states: &[LayerStates],
    users: &[UserSequence],
    mut progress: impl FnMut(&AblationEntry),
) -> Result<Vec<AblationEntry>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::new();
    for &seed in seeds {
        for &mode in modes {
            let (trained, catalog) = train_mode(cfg, mode, seed, ids, states, users, |_| {})?;
            let report = evaluate_model(&trained.model, &catalog, users, Split::Test)?.labelled(mode, seed);
            let entry = AblationEntry { mode, seed, report };
            progress(&entry);
            out.push(entry);
        }
    }
    Ok(out)
}

/// Mean HR/NDCG per mode, in the order modes first appear.
pub fn ablation_means(entries: &[AblationEntry]) -> Vec<(FusionMode, EvalReport)> {
    let mut modes: Vec<FusionMode> = Vec::new();
    for e in entries {
        if !modes.contains(&e.mode) {
            modes.push(e.mode);
        }
    }
    modes
        .into_iter()
        .map(|m| {
            let rows: Vec<&EvalReport> = entries.iter().filter(|e| e.mode == m).map(|e| &e.report).collect();
            let n = rows.len() as f64;
            let avg = |get: &dyn Fn(&EvalReport) -> &std::collections::BTreeMap<usize, f64>| {
                get(rows[0])
                    .keys()
                    .map(|k| (*k, rows.iter().map(|r| get(r)[k]).sum::<f64>() / n))
                    .collect()
            };
            let report = EvalReport {
                hr: avg(&|r| &r.hr),
                ndcg: avg(&|r| &r.ndcg),
                n_users: rows[0].n_users,
                mode: Some(m),
                seed: None,
            };
            (m, report)
        })
        .collect()
}

pub fn write_ablation_csv<W: std::io::Write>(entries: &[AblationEntry], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(e.to_string());
    let ks: Vec<usize> = entries
        .first()
        .map(|e| e.report.hr.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec!["mode".to_string(), "seed".to_string()];
    for k in &ks {
        header.push(format!("hr@{k}"));
        header.push(format!("ndcg@{k}"));
    }
    wr.write_record(&header).map_err(err)?;
    let mut row = |mode: String, seed: String, r: &EvalReport| -> Result<()> {
        let mut v = vec![mode, seed];
        for k in &ks {
            v.push(format!("{:.6}", r.hr[k]));
            v.push(format!("{:.6}", r.ndcg[k]));
        }
        wr.write_record(&v).map_err(err)
    };
    for e in entries {
        row(e.mode.to_string(), e.seed.to_string(), &e.report)?;
    }
    for (m, r) in ablation_means(entries) {
        row(m.to_string(), "mean".into(), &r)?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))
}
