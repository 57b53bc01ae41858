use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use linkedout::backbone::Backbone;
use linkedout::bench::{latency_bench, test_queries, BenchContext, BenchPath};
use linkedout::checkpoint::{hex, Checkpoint};
use linkedout::config::RunConfig;
use linkedout::corpus::{load_corpus, save_corpus, Split};
use linkedout::dump::{list_dumps, read_dump, verify_dir};
use linkedout::eval::{evaluate, EvalReport, GateStats, DEFAULT_KS};
use linkedout::fusion::FusionMode;
use linkedout::pipeline::{
    ablation_means, ablation_run, build_corpus, extract_to_dir, from_log, read_dump_dir, train_mode, write_ablation_csv,
    CorpusData, PipelineConfig,
};
use linkedout::service::{serve, Snapshot};
use linkedout::store::{build_store, FeatureStore};
use linkedout::trainer::save_training_log;
use linkedout::{Error, Result};

#[derive(Parser)]
#[command(name = "linkedout", version, about = "Layer-wise video features for sequential recommendation")]
struct Cli {
    /// Training seed (model initialisation and data order).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic catalog and interaction log.
    GenCorpus,
    /// Run the frozen backbone over every video and write layer dumps.
    Extract,
    /// Validate a directory of layer dumps.
    DumpVerify {
        #[arg(long)]
        dumps: Option<PathBuf>,
    },
    /// Train one fusion mode and write a checkpoint plus training log.
    Train {
        #[arg(long)]
        mode: Option<FusionMode>,
    },
    /// Embed every dumped item into a feature store.
    StoreBuild(ModelArgs),
    /// Print stored records as JSON lines.
    StoreGet {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(required = true, value_delimiter = ',')]
        ids: Vec<u32>,
    },
    /// Read every record of a feature store, optionally against a checkpoint.
    StoreVerify {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve line-delimited JSON ranking requests until interrupted.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Compare store lookups with direct recomputation.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "store,direct")]
        paths: Vec<BenchPath>,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Test-split HR@K and NDCG@K from the feature store.
    Eval(ModelArgs),
    /// Per-layer gate weight statistics from the feature store.
    GateStats {
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train every mode from scratch for several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<FusionMode>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

struct Ctx {
    cfg: PipelineConfig,
    run: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn store_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path("store.lnks"))
    }

    fn checkpoint_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path("model.lnkc"))
    }

    fn corpus(&self) -> Result<CorpusData> {
        let (videos, log) = load_corpus(&self.path("corpus"))?;
        from_log(videos, &log)
    }

    fn dumps(&self) -> Result<(Vec<u32>, Vec<linkedout::backbone::LayerStates>)> {
        let dir = self.path("dumps");
        let items = read_dump_dir(&dir)?;
        if items.is_empty() {
            return Err(Error::MissingData(format!("no dumps in {}", dir.display())));
        }
        Ok(items.into_iter().unzip())
    }

    fn open_pair(&self, args: &ModelArgs) -> Result<(FeatureStore, Checkpoint)> {
        let (ck, hash) = Checkpoint::load(&self.checkpoint_path(&args.checkpoint))?;
        let store = FeatureStore::open_for(&self.store_path(&args.store), &hash, ck.model.config().d_z)?;
        Ok((store, ck))
    }

    fn write_csv(&self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
        let path = self.path(name);
        let mut buf = Vec::new();
        fill(&mut buf)?;
        linkedout::atomic::write_bytes(&path, &buf)?;
        Ok(path)
    }
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn metric_table(rows: &[(String, &EvalReport)]) -> String {
    let mut s = format!("{:<24}", "mode");
    for k in DEFAULT_KS {
        s.push_str(&format!("{:>10}{:>10}", format!("HR@{k}"), format!("NDCG@{k}")));
    }
    s.push('\n');
    for (label, r) in rows {
        s.push_str(&format!("{label:<24}"));
        for k in DEFAULT_KS {
            s.push_str(&format!("{:>10.4}{:>10.4}", r.hr_at(k), r.ndcg_at(k)));
        }
        s.push('\n');
    }
    s
}

fn gate_table(g: &GateStats) -> String {
    let mut s = format!("{:<6}{:>8}{:>8}{:>8}{:>8}{:>9}\n", "layer", "mean", "median", "q1", "q3", "contrib");
    for l in &g.layers {
        s.push_str(&format!(
            "L{:<5}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8.1}%\n",
            l.layer, l.mean, l.median, l.q1, l.q3, l.contribution_pct
        ));
    }
    s
}

fn write_eval_csv(reports: &[&EvalReport], w: &mut Vec<u8>) -> Result<()> {
    if let Some(first) = reports.first() {
        w.extend_from_slice(first.csv_header().as_bytes());
        w.push(b'\n');
    }
    for r in reports {
        w.extend_from_slice(r.csv_row().as_bytes());
        w.push(b'\n');
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.pipeline.train.seed = seed;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let ctx = Ctx {
        cfg: run.pipeline.clone(),
        run,
        out: cli.out,
    };
    let cfg = &ctx.cfg;

    match cli.cmd {
        Cmd::GenCorpus => {
            let data = build_corpus(&cfg.corpus)?;
            let dir = ctx.path("corpus");
            save_corpus(&dir, &data.videos, &data.log)?;
            println!(
                "{} videos, {} users, {} events -> {}",
                data.videos.len(),
                data.users.len(),
                data.log.len(),
                dir.display()
            );
        }
        Cmd::Extract => {
            let data = ctx.corpus()?;
            let backbone = Backbone::new(cfg.backbone.clone())?;
            let dir = ctx.path("dumps");
            let t = Instant::now();
            let bytes = extract_to_dir(&backbone, &data.videos, &cfg.extraction, &dir)?;
            println!(
                "{} dumps, {bytes} bytes, backbone {} -> {} ({:.1}s)",
                data.videos.len(),
                backbone.checksum(),
                dir.display(),
                t.elapsed().as_secs_f64()
            );
        }
        Cmd::DumpVerify { dumps } => {
            let dir = dumps.unwrap_or_else(|| ctx.path("dumps"));
            let report = verify_dir(&dir)?;
            for (path, why) in &report.failures {
                eprintln!("invalid {}: {why}", path.display());
            }
            println!("{} valid, {} invalid", report.valid, report.failures.len());
            if !report.failures.is_empty() {
                return Err(Error::Corruption(format!("{} invalid dumps", report.failures.len())));
            }
        }
        Cmd::Train { mode } => {
            let data = ctx.corpus()?;
            let (ids, states) = ctx.dumps()?;
            let mode = mode.unwrap_or(cfg.model.mode);
            let seed = cfg.train.seed;
            let (out, catalog) = train_mode(cfg, mode, seed, &ids, &states, &data.users, |e| {
                println!(
                    "epoch {:>3}  loss {:.5} (align {:.4} uniform {:.4} rec {:.4})  val HR@10 {:.4}",
                    e.epoch, e.loss.total, e.loss.align, e.loss.uniform, e.loss.rec, e.val_hr10
                );
            })?;
            save_training_log(&out.history, &ctx.path("train_log.csv"))?;
            let report = linkedout::pipeline::evaluate_model(&out.model, &catalog, &data.users, Split::Test)?
                .labelled(mode, seed);
            let ck = Checkpoint {
                model: out.model,
                train: linkedout::trainer::TrainConfig { seed, ..cfg.train.clone() },
                corpus_seed: cfg.corpus.seed,
            };
            let path = ctx.checkpoint_path(&None);
            let hash = ck.save(&path)?;
            println!("best epoch {:?}; checkpoint {} ({})", out.best_epoch, path.display(), hex(&hash));
            print!("{}", metric_table(&[(mode.to_string(), &report)]));
        }
        Cmd::StoreBuild(args) => {
            let (ck, hash) = Checkpoint::load(&ctx.checkpoint_path(&args.checkpoint))?;
            let dir = ctx.path("dumps");
            let items = list_dumps(&dir)?.into_iter().map(|p| {
                let (id, states) = read_dump(&p)?;
                let id: u32 = id
                    .parse()
                    .map_err(|_| Error::Format(format!("item id {id:?} in {} is not numeric", p.display())))?;
                Ok((id, states))
            });
            let path = ctx.store_path(&args.store);
            let n = build_store(&ck.model, hash, &cfg.backbone.tap_layers(), items, ctx.run.store, &path)?;
            println!("{n} records -> {} (model {})", path.display(), hex(&hash));
        }
        Cmd::StoreGet { store, ids } => {
            let store = FeatureStore::open(&ctx.store_path(&store))?;
            for rec in store.batch_get(&ids)? {
                let line = serde_json::json!({
                    "id": rec.item_id,
                    "z": rec.z,
                    "gate_weights": rec.gate_weights,
                    "per_layer": rec.per_layer,
                });
                println!("{line}");
            }
        }
        Cmd::StoreVerify { store, checkpoint } => {
            let store = FeatureStore::open(&ctx.store_path(&store))?;
            if let Some(p) = checkpoint {
                let (ck, hash) = Checkpoint::load(&p)?;
                store.check_compatible(&hash, ck.model.config().d_z)?;
            }
            let n = store.verify()?;
            let m = store.meta();
            println!(
                "{n} records ok; mode {}, d_z {}, model {}",
                m.mode,
                m.d_z,
                hex(&m.model_version)
            );
        }
        Cmd::Serve { model, bind } => {
            let (store, ck) = ctx.open_pair(&model)?;
            let snapshot = Arc::new(Snapshot::from_store(&store, ck.model.ranker_params())?);
            // SAFETY: the handler only stores to an atomic.
            unsafe {
                libc::signal(libc::SIGINT, on_sigint as *const () as libc::sighandler_t);
            }
            let server = serve(snapshot, &bind)?;
            println!("serving {} items on {}", store.len(), server.addr());
            while !STOP.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(100));
            }
            server.shutdown();
            println!("stopped");
        }
        Cmd::Bench { model, paths, queries, k } => {
            let (store, ck) = ctx.open_pair(&model)?;
            let data = ctx.corpus()?;
            let backbone = Backbone::new(cfg.backbone.clone())?;
            let snapshot = Snapshot::from_store(&store, ck.model.ranker_params())?;
            let bench = BenchContext::new(&store, &snapshot, &ck.model, &backbone, &cfg.extraction, &data.videos);
            let qs = test_queries(&data.users, ck.model.config().h_max, queries);
            let report = latency_bench(&bench, &paths, &qs, k)?;
            let path = ctx.write_csv("bench.csv", |w| report.write_csv(w))?;
            println!("{:<8}{:>12}{:>12}{:>12}{:>8}", "path", "p50_us", "p95_us", "p99_us", "n");
            for r in &report.rows {
                println!("{:<8}{:>12.1}{:>12.1}{:>12.1}{:>8}", r.path.to_string(), r.p50_us, r.p95_us, r.p99_us, r.n);
            }
            if let Some(ratio) = report.p50_ratio() {
                println!("p50 direct / store = {ratio:.1}");
            }
            println!("identical top-{k}: {}/{}; report {}", report.agreeing, report.n_queries, path.display());
            if report.agreeing != report.n_queries {
                return Err(Error::Evaluation("paths disagree on some queries".into()));
            }
        }
        Cmd::Eval(args) => {
            let (store, ck) = ctx.open_pair(&args)?;
            let data = ctx.corpus()?;
            let scorer = store.scorer(ck.model.ranker_params())?;
            let report = evaluate(&scorer, &data.users, Split::Test, &DEFAULT_KS)?.labelled(ck.model.mode(), ck.train.seed);
            let path = ctx.write_csv("eval.csv", |w| write_eval_csv(&[&report], w))?;
            print!("{}", metric_table(&[(ck.model.mode().to_string(), &report)]));
            println!("{} users; report {}", report.n_users, path.display());
        }
        Cmd::GateStats { store } => {
            let store = FeatureStore::open(&ctx.store_path(&store))?;
            let stats = store.gate_stats()?;
            let path = ctx.path("gate_stats.csv");
            stats.save_csv(&path)?;
            print!("{}", gate_table(&stats));
            println!("{} items; spread {:.1} pp; report {}", stats.n_items, stats.spread_pct(), path.display());
        }
        Cmd::Ablate { modes, seeds } => {
            let data = ctx.corpus()?;
            let (ids, states) = ctx.dumps()?;
            let modes = modes.unwrap_or_else(|| FusionMode::ALL.to_vec());
            let base = cfg.train.seed;
            let seeds = seeds.unwrap_or_else(|| vec![base, base + 1, base + 2]);
            let entries = ablation_run(cfg, &modes, &seeds, &ids, &states, &data.users, |e| {
                println!("seed {} {:<24} HR@10 {:.4}", e.seed, e.mode.to_string(), e.report.hr_at(10));
            })?;
            let path = ctx.write_csv("ablation.csv", |w| write_ablation_csv(&entries, w))?;
            let means = ablation_means(&entries);
            let rows: Vec<(String, &EvalReport)> = means.iter().map(|(m, r)| (m.to_string(), r)).collect();
            println!("mean over {} seeds", seeds.len());
            print!("{}", metric_table(&rows));
            println!("report {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
