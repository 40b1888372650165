//! Training sanity: the optimizer can drive the model onto a single patch,
//! and short full-pipeline runs improve monotonically in the aggregate.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use atres::config::RunConfig;
use atres::dice::{dice_loss_on_tape, DICE_SMOOTH};
use atres::exec::{Exec, TapeExec};
use atres::image::load_image_png;
use atres::model::Model;
use atres::optim::AdamState;
use atres::patch::extract_training_patches;
use atres::synth::{generate_dataset, read_manifest};
use atres::tape::Tape;
use atres::tensor::Tensor;
use atres::train::train;

fn one_training_patch() -> (Tensor, Tensor) {
    let dir = tempfile::tempdir().expect("tempdir");
    generate_dataset(dir.path(), 1, 64, 33).expect("synth");
    let pairs = read_manifest(&dir.path().join("manifest.txt")).expect("manifest");
    let img = load_image_png(&pairs[0].0).expect("image");
    let mask = atres::image::load_mask_png(&pairs[0].1).expect("mask");
    let patches = extract_training_patches(&img, &mask, 32, 0.10, 220).expect("patches");
    let p = patches.into_iter().next().expect("at least one patch");
    let x = Tensor::new(vec![1, 3, 32, 32], p.data.data().to_vec()).expect("x");
    let y = Tensor::new(vec![1, 1, 32, 32], p.mask.data().to_vec()).expect("y");
    (x, y)
}

/// One optimizer step on one patch; returns 1 minus the Dice loss measured
/// before the update.
fn step(
    model: &mut Model,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
) -> f64 {
    let mut tape = Tape::new();
    let mut ex = TapeExec::train(&mut tape, rng);
    let xi = ex.source(x.clone()).expect("source");
    let yi = model.forward(&mut ex, xi).expect("forward");
    let params = ex.into_params();
    let ti = tape.leaf(y.clone(), false, "target").expect("target");
    let loss = dice_loss_on_tape(&mut tape, yi, ti, DICE_SMOOTH).expect("loss");
    let loss_value = f64::from(tape.value(loss).item().expect("scalar"));
    let mut grads = tape.backward(loss).expect("backward");
    let mut grad_map: HashMap<String, Vec<f32>> = HashMap::new();
    for (name, node) in &params {
        if let Some(g) = grads.take(*node) {
            grad_map.insert(name.clone(), g);
        }
    }
    adam.apply(model, &grad_map, lr).expect("adam");
    1.0 - loss_value
}

#[test]
fn overfits_a_single_patch() {
    let (x, y) = one_training_patch();
    let mut cfg = RunConfig::default();
    for kv in ["base_width=4", "depth=2", "sacu_dilations=1,2,4", "patch_size=32"] {
        cfg.set(kv).expect("config");
    }
    let mut model = Model::init(cfg.model_config(), 3).expect("init");
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut best = 0.0f64;
    for s in 0..200 {
        let dice = step(&mut model, &mut adam, &mut rng, &x, &y, 1e-3);
        best = best.max(dice);
        if dice > 0.99 {
            println!("single-patch dice {dice:.4} after {s} steps");
            return;
        }
    }
    panic!("failed to overfit one patch in 200 steps; best train dice {best:.4}");
}

#[test]
fn short_training_run_improves() {
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = generate_dataset(&dir.path().join("data"), 10, 64, 21).expect("synth");
    let mut cfg = RunConfig::default();
    for kv in [
        "patch_size=32",
        "base_width=4",
        "sacu_dilations=1,2,4",
        "epochs=5",
        "seed=4",
        "tile_size=32",
        "min_tissue=0.10",
    ] {
        cfg.set(kv).expect("config");
    }
    let outcome = train(&cfg, &manifest, &dir.path().join("run")).expect("train");
    assert_eq!(outcome.history.len(), 5);
    let first = outcome.history.first().expect("first epoch");
    let last = outcome.history.last().expect("last epoch");
    assert!(
        last.train_dice > first.train_dice,
        "train dice fell: {:.4} -> {:.4}",
        first.train_dice,
        last.train_dice
    );
    assert!(
        outcome.best_val_dice >= outcome.history[0].val_dice,
        "best val dice must be at least the first epoch's"
    );
    assert!(
        last.lr < cfg.lr,
        "cosine schedule must decay below the base rate"
    );
}
