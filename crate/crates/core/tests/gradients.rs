mod common;

use common::oracle::{grad_config as config, grad_fixture as fixture};
use linkedout::fusion::FusionMode;
use linkedout::model::Model;
use linkedout::trainer::{
    check_gradients, loss_and_grad, max_rel_error, Coverage, TrainData, GRAD_TOLERANCE,
};

fn check_mode(mode: FusionMode, d_c: usize) {
    for seed in 0..3u64 {
        let model = Model::new(config(mode, d_c), 40 + seed).unwrap();
        let (catalog, users) = fixture(&model, seed);
        let data = TrainData {
            catalog: &catalog,
            users: &users,
        };
        let batch = data.full_batch(3, 0..users.len(), 3, seed).unwrap();
        let checks = check_gradients(
            &model,
            &model.params,
            &catalog,
            &batch,
            [1.0, 1.0, 1.0],
            Coverage::Every,
        )
        .unwrap();
        assert_eq!(checks.len(), model.registry().len());
        let worst = max_rel_error(&checks);
        eprintln!("{mode} d_c={d_c} seed {seed}: worst relative error {worst:.3e}");
        assert!(
            worst < GRAD_TOLERANCE,
            "{mode} seed {seed}: worst relative error {worst:e}"
        );
        for spec in model.registry().specs() {
            let moved = checks
                .iter()
                .filter(|c| c.tensor == spec.name)
                .any(|c| c.analytic != 0.0);
            assert!(moved, "{mode}: tensor {} receives no gradient", spec.name);
        }
    }
}

#[test]
fn full_mode_gradients_match_finite_differences() {
    check_mode(FusionMode::Full, 4);
}

#[test]
fn affine_shortcut_gradients_match_finite_differences() {
    check_mode(FusionMode::Full, 6);
}

#[test]
fn last_token_gradients_match_finite_differences() {
    check_mode(FusionMode::LastTokenMoe, 4);
}

#[test]
fn mean_pool_gradients_match_finite_differences() {
    check_mode(FusionMode::MeanPoolMoe, 6);
}

#[test]
fn last_layer_gradients_match_finite_differences() {
    check_mode(FusionMode::LastLayerLastToken, 4);
}

#[test]
fn zero_loss_weights_give_zero_gradient() {
    let model = Model::new(config(FusionMode::Full, 4), 1).unwrap();
    let (catalog, users) = fixture(&model, 9);
    let data = TrainData {
        catalog: &catalog,
        users: &users,
    };
    let batch = data.full_batch(3, 0..users.len(), 3, 0).unwrap();
    let (loss, grad) = loss_and_grad(&model, &model.params, &catalog, &batch, [0.0; 3]).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(grad.iter().all(|g| *g == 0.0));
}
