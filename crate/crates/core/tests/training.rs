mod common;

use linkedout::fusion::FusionMode;
use linkedout::loss::{alignment_loss, rec_loss, uniformity_loss};
use linkedout::model::Model;
use linkedout::pipeline::{prepare_catalog, train_mode};
use linkedout::trainer::{clip_grad_norm, loss_and_grad, train, write_training_log, TrainConfig, TrainData};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

proptest! {
    #[test]
    fn alignment_is_the_mean_squared_pair_distance(rows in 1usize..8, width in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let want = (0..rows).map(|r| sq(&u[r * width..(r + 1) * width], &z[r * width..(r + 1) * width])).sum::<f64>() / rows as f64;
        let got = alignment_loss(&u, &z, width).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn uniformity_enumerates_every_pair(rows in 2usize..8, width in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut terms = Vec::new();
        for i in 0..rows {
            for j in i + 1..rows {
                terms.push((-2.0 * sq(&x[i * width..(i + 1) * width], &x[j * width..(j + 1) * width])).exp());
            }
        }
        let want = (terms.iter().sum::<f64>() / terms.len() as f64).ln();
        let got = uniformity_loss(&x, width).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn clipping_never_exceeds_the_ceiling(g in prop::collection::vec(-50.0f64..50.0, 1..40), clip in 0.1f64..20.0) {
        let mut clipped = g.clone();
        let norm = clip_grad_norm(&mut clipped, clip);
        let after = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= clip + 1e-9);
        if norm <= clip {
            prop_assert_eq!(clipped, g);
        }
    }
}

#[test]
fn five_random_embeddings_match_the_ten_pair_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..5 {
        for j in i + 1..5 {
            sum += (-2.0 * sq(&x[i * 3..i * 3 + 3], &x[j * 3..j * 3 + 3])).exp();
            pairs += 1;
        }
    }
    assert_eq!(pairs, 10);
    assert!((uniformity_loss(&x, 3).unwrap() - (sum / 10.0).ln()).abs() < 1e-14);
}

#[test]
fn rec_loss_on_hand_set_logits() {
    // u·pos = 2, u·negatives = 1 and 0
    let u = [1.0, 0.0];
    let (pos, n1, n2) = ([2.0, 5.0], [1.0, -3.0], [0.0, 7.0]);
    let want = -(2f64.exp() / (2f64.exp() + 1f64.exp() + 1.0)).ln();
    let got = rec_loss(&u, &pos, &[&n1, &n2]).unwrap();
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn total_loss_is_the_weighted_sum_of_parts() {
    let fx = common::tiny();
    let model = Model::new(fx.cfg.model.clone(), 3).unwrap();
    let catalog = prepare_catalog(&model, fx.ids.clone(), &fx.states).unwrap();
    let data = TrainData {
        catalog: &catalog,
        users: &fx.data.users,
    };
    let batch = data.full_batch(model.config().h_max, 0..12, 8, 5).unwrap();
    for w in [[1.0, 1.0, 1.0], [0.3, 2.0, 0.7], [0.0, 0.0, 1.0]] {
        let (l, _) = loss_and_grad(&model, &model.params, &catalog, &batch, w).unwrap();
        let sum = w[0] * l.align + w[1] * l.uniform + w[2] * l.rec;
        assert!((l.total - sum).abs() <= f64::EPSILON * sum.abs(), "{w:?}");
    }
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let fx = common::tiny();
    let model = Model::new(fx.cfg.model.clone(), 4).unwrap();
    let init = model.params.clone();
    let catalog = prepare_catalog(&model, fx.ids.clone(), &fx.states).unwrap();
    let data = TrainData {
        catalog: &catalog,
        users: &fx.data.users,
    };
    let cfg = TrainConfig {
        epochs: 0,
        ..fx.cfg.train.clone()
    };
    let out = train(model, &data, &cfg, |_| {}).unwrap();
    assert_eq!(out.model.params, init);
    assert!(out.history.is_empty() && out.best_epoch.is_none());
}

#[test]
fn zero_loss_weights_without_decay_leave_parameters_alone() {
    let fx = common::tiny();
    let model = Model::new(fx.cfg.model.clone(), 5).unwrap();
    let init = model.params.clone();
    let catalog = prepare_catalog(&model, fx.ids.clone(), &fx.states).unwrap();
    let data = TrainData {
        catalog: &catalog,
        users: &fx.data.users,
    };
    let cfg = TrainConfig {
        epochs: 1,
        loss_weights: [0.0; 3],
        weight_decay: 0.0,
        ..fx.cfg.train.clone()
    };
    let out = train(model, &data, &cfg, |_| {}).unwrap();
    assert_eq!(out.model.params, init);
}

#[test]
fn training_is_deterministic_and_checks_gradients_first() {
    let fx = common::tiny();
    let run = |seed| {
        let mut log = Vec::new();
        let (out, _) = train_mode(&fx.cfg, FusionMode::Full, seed, &fx.ids, &fx.states, &fx.data.users, |e| {
            log.push(e.clone())
        })
        .unwrap();
        (out, log)
    };
    let before = fx.backbone.checksum();
    let (a, log_a) = run(0);
    let (b, _) = run(0);
    let (c, _) = run(1);
    assert_eq!(fx.backbone.checksum(), before);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history, log_a);
    assert_eq!(a.model.params, b.model.params);
    assert_ne!(a.history, c.history);
    assert!(!a.spot_check.is_empty());
    assert!(a.spot_check.iter().all(|c| c.rel_error < 1e-4));
    assert_eq!(a.history.len(), 3);
    assert!(a.history.iter().all(|e| e.loss.total.is_finite()));

    let mut csv = Vec::new();
    write_training_log(&a.history, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,align,uniform,rec,total,val_hr10");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn every_mode_trains_on_the_tiny_pipeline() {
    let fx = common::tiny();
    for mode in FusionMode::ALL {
        let (out, catalog) = train_mode(&fx.cfg, mode, 2, &fx.ids, &fx.states, &fx.data.users, |_| {}).unwrap();
        assert_eq!(out.model.mode(), mode);
        assert_eq!(catalog.len(), fx.ids.len());
        assert!(out.best_epoch.is_some());
    }
}
