//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::oracle::{grad_config, grad_fixture, merge_oracle, micro_case, oracle_metrics, RandomScorer};
use linkedout::backbone::{Backbone, LayerStates};
use linkedout::bench::{latency_bench, test_queries, BenchContext, BenchPath};
use linkedout::checkpoint::{Checkpoint, Hash};
use linkedout::compressor::{attention_pool, compress_layer, token_merge, token_merge_sized, MergeConfig};
use linkedout::corpus::Split;
use linkedout::dump::{decode_dump, read_dump, write_dump};
use linkedout::eval::{evaluate, hr_at_k, ndcg_at_k, EvalReport};
use linkedout::fusion::{fuse, gate_forward, gate_logits, FusionMode, GateParams};
use linkedout::linalg::softmax;
use linkedout::model::{Model, ModelConfig};
use linkedout::pipeline::{build_corpus, evaluate_model, extract_all, train_mode, video_ids, CorpusData, PipelineConfig};
use linkedout::service::Snapshot;
use linkedout::store::{build_store, index_path, FeatureStore, StoreOptions};
use linkedout::trainer::{
    check_gradients, embed_catalog, max_rel_error, Catalog, Coverage, TrainData, TrainOutcome, FD_STEP, GRAD_TOLERANCE,
};
use linkedout::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// The default corpus with every item's layer states extracted.
struct Pipeline {
    cfg: PipelineConfig,
    data: CorpusData,
    backbone: Backbone,
    ids: Vec<u32>,
    states: Vec<LayerStates>,
}

/// The default-seed full-mode model and the artifacts built from it.
struct Trained {
    out: TrainOutcome,
    catalog: Catalog,
    test: EvalReport,
    checkpoint: Checkpoint,
    hash: Hash,
    _dir: tempfile::TempDir,
    store_path: PathBuf,
}

#[derive(Default)]
struct Shared {
    pipeline: OnceCell<Pipeline>,
    trained: OnceCell<Trained>,
}

impl Shared {
    fn pipeline(&self) -> &Pipeline {
        self.pipeline.get_or_init(|| {
            let t = Instant::now();
            let cfg = PipelineConfig::default();
            cfg.validate().unwrap();
            let data = build_corpus(&cfg.corpus).unwrap();
            let backbone = Backbone::new(cfg.backbone.clone()).unwrap();
            let states = extract_all(&backbone, &data.videos, &cfg.extraction).unwrap();
            eprintln!("  extracted {} items in {:.1} s", states.len(), t.elapsed().as_secs_f64());
            Pipeline {
                ids: video_ids(&data.videos),
                cfg,
                data,
                backbone,
                states,
            }
        })
    }

    fn trained(&self) -> &Trained {
        self.trained.get_or_init(|| {
            let p = self.pipeline();
            let t = Instant::now();
            let seed = p.cfg.train.seed;
            let (out, catalog) = train_mode(&p.cfg, FusionMode::Full, seed, &p.ids, &p.states, &p.data.users, |e| {
                eprintln!("  epoch {:>3} loss {:.5} val HR@10 {:.4}", e.epoch, e.loss.total, e.val_hr10)
            })
            .unwrap();
            let test = evaluate_model(&out.model, &catalog, &p.data.users, Split::Test).unwrap();
            eprintln!("  trained full mode in {:.1} s", t.elapsed().as_secs_f64());
            let dir = tempfile::tempdir().unwrap();
            let checkpoint = Checkpoint {
                model: out.model.clone(),
                train: p.cfg.train.clone(),
                corpus_seed: p.cfg.corpus.seed,
            };
            let hash = checkpoint.save(&dir.path().join("model.lnkc")).unwrap();
            let store_path = dir.path().join("store.lnks");
            build_items(p, &checkpoint.model, hash, &store_path);
            Trained {
                out,
                catalog,
                test,
                checkpoint,
                hash,
                _dir: dir,
                store_path,
            }
        })
    }
}

fn build_items(p: &Pipeline, model: &Model, hash: Hash, path: &Path) -> usize {
    let items = p.ids.iter().copied().zip(p.states.iter().cloned()).map(Ok);
    build_store(model, hash, &p.cfg.backbone.tap_layers(), items, StoreOptions::default(), path).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn gradient_correctness(_: &Shared) -> Outcome {
    ensure!(FD_STEP == 1e-5 && GRAD_TOLERANCE == 1e-4, "unexpected check settings");
    let mut worst = 0.0f64;
    let mut entries = 0;
    let cases = FusionMode::ALL.iter().map(|&m| (m, 4)).chain([(FusionMode::Full, 6), (FusionMode::MeanPoolMoe, 6)]);
    for (mode, d_c) in cases {
        for seed in 0..3u64 {
            let model = Model::new(grad_config(mode, d_c), 40 + seed).unwrap();
            let (catalog, users) = grad_fixture(&model, seed);
            let data = TrainData {
                catalog: &catalog,
                users: &users,
            };
            let batch = data.full_batch(3, 0..users.len(), 3, seed).map_err(|e| e.to_string())?;
            let checks = check_gradients(&model, &model.params, &catalog, &batch, [1.0, 1.0, 1.0], Coverage::Every)
                .map_err(|e| e.to_string())?;
            ensure!(checks.len() == model.registry().len(), "{mode}: not every parameter checked");
            for spec in model.registry().specs() {
                ensure!(
                    checks.iter().any(|c| c.tensor == spec.name && c.analytic != 0.0),
                    "{mode}: tensor {} receives no gradient",
                    spec.name
                );
            }
            let w = max_rel_error(&checks);
            ensure!(w < GRAD_TOLERANCE, "{mode} d_c {d_c} batch {seed}: relative error {w:.3e}");
            worst = worst.max(w);
            entries += checks.len();
        }
    }
    Ok(format!("{entries} entries over 6 configurations of the 4 modes, 3 batches each, worst relative error {worst:.2e}"))
}

fn simplex_and_fusion(_: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum = 0.0f64;
    for case in 0..1000 {
        let n = rng.gen_range(1..=8);
        let dz = rng.gen_range(1..=6);
        let hidden = rng.gen_range(1..=5);
        let p = GateParams {
            n_taps: n,
            d_z: dz,
            w1: rand_vec(&mut rng, n * dz * hidden, 3.0),
            b1: rand_vec(&mut rng, hidden, 1.0),
            w2: rand_vec(&mut rng, hidden * n, 30.0),
            b2: rand_vec(&mut rng, n, 30.0),
        };
        let h: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dz, 50.0)).collect();
        let pi = gate_forward(&h, &p).unwrap();
        ensure!(pi.iter().all(|&w| w >= 0.0), "case {case}: negative weight");
        let s = (pi.iter().sum::<f64>() - 1.0).abs();
        ensure!(s <= 1e-6, "case {case}: weights sum off by {s:e}");
        worst_sum = worst_sum.max(s);

        let logits = gate_logits(&h, &p).unwrap();
        let shift = rng.gen_range(-100.0..100.0);
        let shifted = softmax(&logits.iter().map(|l| l + shift).collect::<Vec<_>>());
        ensure!(pi.iter().zip(&shifted).all(|(a, b)| (a - b).abs() <= 1e-12), "case {case}: shift changed weights");

        let k = rng.gen_range(0..n);
        let onehot: Vec<f64> = (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        ensure!(fuse(&h, &onehot).unwrap() == h[k], "case {case}: one-hot did not select layer {k}");

        // linearity on dyadic values, where every product and sum is exact
        let hd: Vec<Vec<f64>> = (0..4).map(|_| (0..dz).map(|_| rng.gen_range(-8i32..8) as f64).collect()).collect();
        let (p1, p2, a) = ([0.5, 0.25, 0.125, 0.125], [0.0, 0.25, 0.25, 0.5], 0.25);
        let mix: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let (f1, f2) = (fuse(&hd, &p1).unwrap(), fuse(&hd, &p2).unwrap());
        let rhs: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        ensure!(fuse(&hd, &mix).unwrap() == rhs, "case {case}: fusion not linear");
    }
    Ok(format!("1000 cases, worst |sum - 1| {worst_sum:.1e}"))
}

fn compressor_properties(_: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..300 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=4);
        let t = rand_vec(&mut rng, n * d, 2.0);
        let r = rng.gen_range(1..=n / 2);
        let got = token_merge(&t, d, MergeConfig { r, passes: 1 }).unwrap();
        let want = merge_oracle(&t, d, r);
        ensure!(
            got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0)),
            "case {case}: merge differs from pair enumeration"
        );

        let n = rng.gen_range(4..=40);
        let t = rand_vec(&mut rng, n * d, 2.0);
        let cfg = MergeConfig { r: rng.gen_range(1..=2), passes: rng.gen_range(1..=2) };
        if cfg.output_len(n).is_ok() {
            let (out, sizes) = token_merge_sized(&t, d, cfg).unwrap();
            for j in 0..d {
                let before = (0..n).map(|i| t[i * d + j]).sum::<f64>() / n as f64;
                let after = sizes.iter().enumerate().map(|(i, s)| s * out[i * d + j]).sum::<f64>() / n as f64;
                let scale = (0..n).map(|i| t[i * d + j].abs()).sum::<f64>() / n as f64;
                ensure!((before - after).abs() <= 1e-6 * scale, "case {case}: mean moved from {before} to {after}");
            }
        }

        let q = rand_vec(&mut rng, 2 * d, 1.0);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let perm: Vec<f64> = order.iter().flat_map(|&i| t[i * d..(i + 1) * d].to_vec()).collect();
        let (a, _) = attention_pool(&t, &q, d).unwrap();
        let (b, _) = attention_pool(&perm, &q, d).unwrap();
        ensure!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0)), "case {case}: pooling depends on order");
    }

    let cfg = ModelConfig {
        mode: FusionMode::Full,
        d: 16,
        n_taps: 1,
        m: 4,
        d_c: 12,
        d_z: 8,
        gate_hidden: 4,
        ..ModelConfig::default()
    };
    let p = Model::new(cfg, 3).unwrap().compressor_params(0).unwrap();
    for n in [8, 64, 512] {
        let old: Vec<f32> = (0..n * 16).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        let new: Vec<f32> = (0..4 * 16).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        let e = compress_layer(&old, &new, &p, MergeConfig::default()).unwrap();
        ensure!(e.len() == 12, "{n} tokens gave width {}", e.len());
        let mut rev = Vec::new();
        for row in new.chunks(16).rev() {
            rev.extend_from_slice(row);
        }
        let e2 = compress_layer(&old, &rev, &p, MergeConfig::default()).unwrap();
        ensure!(
            e.iter().zip(&e2).all(|(x, y)| ((*x as f32) - (*y as f32)).abs() <= 1e-6 * (x.abs() as f32).max(1.0)),
            "{n} tokens: new-branch order changed the output"
        );
    }
    Ok("300 merge/conservation/permutation cases; widths fixed at 12 for 8, 64 and 512 tokens".into())
}

fn metric_oracle(s: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ks = [1, 3, 5, 10, 20];
    for case in 0..100 {
        let (scorer, users) = micro_case(&mut rng);
        for split in [Split::Val, Split::Test] {
            let report = evaluate(&scorer, &users, split, &ks).map_err(|e| e.to_string())?;
            for &k in &ks {
                let (hr, ndcg) = oracle_metrics(&scorer, &users, split, k);
                ensure!(report.hr_at(k) == hr && report.ndcg_at(k) == ndcg, "case {case} {split:?} @{k} differs");
            }
        }
    }
    ensure!(hr_at_k(1, 10) == 1.0 && hr_at_k(11, 10) == 0.0, "HR closed forms");
    ensure!(ndcg_at_k(1, 10) == 1.0 && ndcg_at_k(3, 10) == 0.5, "NDCG closed forms");

    let p = s.pipeline();
    let random = RandomScorer::new(p.ids.clone(), 99);
    let r = evaluate(&random, &p.data.users, Split::Test, &[10]).map_err(|e| e.to_string())?;
    let expected = 10.0 / p.ids.len() as f64;
    let sigma = (expected * (1.0 - expected) / p.data.users.len() as f64).sqrt();
    let hr = r.hr_at(10);
    ensure!((hr - expected).abs() <= 3.0 * sigma, "random HR@10 {hr:.5} outside {expected} +/- {:.5}", 3.0 * sigma);
    Ok(format!("100 micro-catalogs exact; random HR@10 {hr:.5} within {expected} +/- {:.5}", 3.0 * sigma))
}

fn ablation_ordering(s: &Shared) -> Outcome {
    let p = s.pipeline();
    let base = p.cfg.train.seed;
    let seeds = [base, base + 1, base + 2];
    let mut means = Vec::new();
    for mode in FusionMode::ALL {
        let mut sum = 0.0;
        for &seed in &seeds {
            let hr = if mode == FusionMode::Full && seed == base {
                s.trained().test.hr_at(10)
            } else {
                let t = Instant::now();
                let (out, catalog) = train_mode(&p.cfg, mode, seed, &p.ids, &p.states, &p.data.users, |_| {}).unwrap();
                let hr = evaluate_model(&out.model, &catalog, &p.data.users, Split::Test).unwrap().hr_at(10);
                eprintln!("  {mode} seed {seed}: HR@10 {hr:.4} ({:.0} s)", t.elapsed().as_secs_f64());
                hr
            };
            sum += hr;
        }
        means.push((mode, sum / seeds.len() as f64));
    }
    let get = |m: FusionMode| means.iter().find(|x| x.0 == m).unwrap().1;
    let full = get(FusionMode::Full);
    let last_token = get(FusionMode::LastTokenMoe);
    let last_layer = get(FusionMode::LastLayerLastToken);
    let table = means.iter().map(|(m, v)| format!("{m} {v:.4}")).collect::<Vec<_>>().join(", ");
    ensure!(full > last_token, "full {full:.4} not above last_token_moe {last_token:.4} ({table})");
    ensure!(full >= 1.15 * last_layer, "full/last-layer ratio {:.3} below 1.15 ({table})", full / last_layer);
    ensure!(means.iter().all(|&(m, v)| m == FusionMode::LastLayerLastToken || v > last_layer), "last layer not weakest ({table})");
    Ok(format!("{table}; full/last-layer {:.3}", full / last_layer))
}

fn store_equivalence(s: &Shared) -> Outcome {
    let p = s.pipeline();
    let t = s.trained();
    let model = &t.checkpoint.model;
    let store = FeatureStore::open_for(&t.store_path, &t.hash, model.config().d_z).map_err(|e| e.to_string())?;
    let snapshot = Snapshot::from_store(&store, model.ranker_params()).map_err(|e| e.to_string())?;
    let ctx = BenchContext::new(&store, &snapshot, model, &p.backbone, &p.cfg.extraction, &p.data.videos);
    let queries = test_queries(&p.data.users, model.config().h_max, 1000);
    ensure!(queries.len() == 1000, "only {} queries", queries.len());
    let report = latency_bench(&ctx, &[BenchPath::Store, BenchPath::Direct], &queries, 10).map_err(|e| e.to_string())?;
    let store_p50 = report.get(BenchPath::Store).unwrap().p50_us;
    let direct_p50 = report.get(BenchPath::Direct).unwrap().p50_us;
    let ratio = report.p50_ratio().unwrap();
    let detail = format!(
        "{}/{} identical top-10 over {} items; p50 store {store_p50:.0} us, direct {direct_p50:.0} us, ratio {ratio:.0}",
        report.agreeing,
        report.n_queries,
        store.len()
    );
    ensure!(report.agreeing == 1000, "{detail}");
    ensure!(store_p50 < 5000.0, "{detail}");
    ensure!(ratio >= 50.0, "{detail}");
    Ok(detail)
}

fn bits(s: &LayerStates) -> Vec<u32> {
    s.taps.iter().flat_map(|t| t.hidden.iter().map(|v| v.to_bits())).collect()
}

fn persistence(s: &Shared) -> Outcome {
    let p = s.pipeline();
    let t = s.trained();
    let dir = tempfile::tempdir().unwrap();

    for (id, states) in p.ids.iter().zip(&p.states).take(100) {
        let path = dir.path().join(format!("{id}.lnkd"));
        write_dump(states, &id.to_string(), &path).map_err(|e| e.to_string())?;
        let (back_id, back) = read_dump(&path).map_err(|e| e.to_string())?;
        ensure!(back_id == id.to_string() && bits(&back) == bits(states) && back == *states, "dump {id} changed");
    }
    let sample = std::fs::read(dir.path().join(format!("{}.lnkd", p.ids[0]))).unwrap();
    let mut v = sample.clone();
    v[4] = 2;
    ensure!(decode_dump(&v).is_err(), "dump version 2 accepted");

    let model = &t.checkpoint.model;
    let store = FeatureStore::open(&t.store_path).map_err(|e| e.to_string())?;
    ensure!(store.verify().map_err(|e| e.to_string())? == p.ids.len(), "store verification count");
    let table = embed_catalog(model, &model.params, &t.catalog);
    let fresh: Vec<(u32, &[f32])> = t.catalog.ids.iter().copied().zip(table.chunks(model.config().d_z)).collect();
    for (id, z) in &fresh {
        let rec = store.get(*id).map_err(|e| e.to_string())?;
        ensure!(
            rec.z.iter().map(|v| v.to_bits()).eq(z.iter().map(|v| v.to_bits())),
            "stored embedding of item {id} differs from a fresh forward pass"
        );
    }

    let rebuilt = dir.path().join("again.lnks");
    build_items(p, model, t.hash, &rebuilt);
    ensure!(std::fs::read(&rebuilt).unwrap() == std::fs::read(&t.store_path).unwrap(), "rebuilt store differs");
    ensure!(std::fs::read(index_path(&rebuilt)).unwrap() == std::fs::read(index_path(&t.store_path)).unwrap(), "rebuilt index differs");

    let mut other = t.hash;
    other[31] ^= 0xff;
    ensure!(matches!(FeatureStore::open_for(&rebuilt, &other, model.config().d_z), Err(Error::Version(_))), "foreign checkpoint accepted");
    let mut data = std::fs::read(&rebuilt).unwrap();
    data[4] = 2;
    std::fs::write(&rebuilt, &data).unwrap();
    ensure!(matches!(FeatureStore::open(&rebuilt), Err(Error::Version(_))), "store version 2 accepted");
    let mut ck = t.checkpoint.encode().map_err(|e| e.to_string())?;
    ck[4] = 2;
    ensure!(matches!(Checkpoint::decode(&ck), Err(Error::Version(_))), "checkpoint version 2 accepted");
    Ok(format!("100 dumps and {} store records bit-exact; rebuild byte-identical; version 2 files rejected", fresh.len()))
}

fn determinism(s: &Shared) -> Outcome {
    let run = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let cfg = common::tiny_config();
        let data = build_corpus(&cfg.corpus).unwrap();
        linkedout::corpus::save_corpus(&root.join("corpus"), &data.videos, &data.log).unwrap();
        let backbone = Backbone::new(cfg.backbone.clone()).unwrap();
        linkedout::pipeline::extract_to_dir(&backbone, &data.videos, &cfg.extraction, &root.join("dumps")).unwrap();
        let (ids, states): (Vec<u32>, Vec<_>) = linkedout::pipeline::read_dump_dir(&root.join("dumps")).unwrap().into_iter().unzip();
        let (out, _) = train_mode(&cfg, FusionMode::Full, cfg.train.seed, &ids, &states, &data.users, |_| {}).unwrap();
        let mut log = Vec::new();
        linkedout::trainer::write_training_log(&out.history, &mut log).unwrap();
        std::fs::write(root.join("train_log.csv"), log).unwrap();
        let ck = Checkpoint {
            model: out.model,
            train: cfg.train.clone(),
            corpus_seed: cfg.corpus.seed,
        };
        let hash = ck.save(&root.join("model.lnkc")).unwrap();
        let items = ids.iter().copied().zip(states).map(Ok);
        build_store(&ck.model, hash, &cfg.backbone.tap_layers(), items, StoreOptions::default(), &root.join("store.lnks")).unwrap();
        let store = FeatureStore::open(&root.join("store.lnks")).unwrap();
        let snap = Snapshot::from_store(&store, ck.model.ranker_params()).unwrap();
        let h_max = ck.model.config().h_max;
        let mut rankings = String::new();
        for u in &data.users {
            let h = u.history_for(Split::Test);
            let h: Vec<u32> = h[h.len().saturating_sub(h_max)..].iter().map(|i| i.0).collect();
            let req = linkedout::service::RankRequest {
                history: h,
                candidates: None,
                k: 10,
                cold_start_fallback: false,
            };
            for (id, score) in snap.rank(&req).unwrap() {
                rankings.push_str(&format!("{id}:{:016x} ", score.to_bits()));
            }
            rankings.push('\n');
        }
        std::fs::write(root.join("rankings.txt"), rankings).unwrap();

        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    let second = run(b.path());
    ensure!(first.len() == second.len(), "different file sets");
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        ensure!(na == nb && ba == bb, "{na} differs between runs");
    }

    // the default corpus regenerates identically as well
    let p = s.pipeline();
    let again = build_corpus(&p.cfg.corpus).unwrap();
    ensure!(again.videos == p.data.videos && again.log == p.data.log, "default corpus differs on regeneration");
    Ok(format!("{} artifacts byte-identical across two pipeline runs; default corpus regenerates identically", first.len()))
}

fn gate_analysis(s: &Shared) -> Outcome {
    let t = s.trained();
    let p = s.pipeline();
    let store = FeatureStore::open(&t.store_path).map_err(|e| e.to_string())?;
    let stats = store.gate_stats().map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    stats.write_csv(&mut csv).map_err(|e| e.to_string())?;
    let text = String::from_utf8(csv).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header = rows.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "contribution_pct").ok_or("no contribution column")?;
    let pcts: Vec<f64> = rows.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    ensure!(pcts.len() == p.cfg.backbone.n_taps(), "{} rows for {} taps", pcts.len(), p.cfg.backbone.n_taps());
    let total: f64 = pcts.iter().sum();
    ensure!((total - 100.0).abs() <= 0.1, "contributions sum to {total}");
    let spread = stats.spread_pct();
    let layout = stats.layers.iter().map(|l| format!("L{} {:.1}%", l.layer, l.contribution_pct)).collect::<Vec<_>>().join(", ");
    ensure!(spread >= 5.0, "spread {spread:.1} pp ({layout})");
    Ok(format!("{} rows summing to {total:.2}; spread {spread:.1} pp ({layout})", pcts.len()))
}

fn training_sanity(s: &Shared) -> Outcome {
    let p = s.pipeline();
    let t = s.trained();
    let losses: Vec<f64> = t.out.history.iter().take(5).map(|e| e.loss.total).collect();
    ensure!(losses.len() == 5, "only {} epochs", losses.len());
    let shown = losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" > ");
    ensure!(losses.windows(2).all(|w| w[1] < w[0]), "loss not strictly decreasing: {shown}");
    let random = 10.0 / p.ids.len() as f64;
    let hr = t.test.hr_at(10);
    ensure!(hr >= 10.0 * random, "test HR@10 {hr:.4} below 10x random {random}");
    Ok(format!("seed {} loss {shown}; test HR@10 {hr:.4} = {:.1}x random", p.cfg.train.seed, hr / random))
}

type Check = fn(&Shared) -> Outcome;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient correctness", gradient_correctness),
        ("simplex and fusion properties", simplex_and_fusion),
        ("compressor properties", compressor_properties),
        ("metric oracle equivalence", metric_oracle),
        ("ablation ordering", ablation_ordering),
        ("store and retrieve equivalence and latency", store_equivalence),
        ("persistence bit-exactness", persistence),
        ("determinism", determinism),
        ("gate analysis output", gate_analysis),
        ("training sanity", training_sanity),
    ];
    let shared = Shared::default();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1} s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1} s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
