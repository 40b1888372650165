//! Training loop: image-level dataset split, augmented mini-batches, Dice
//! loss with Adam and per-step cosine annealing, per-epoch validation, and
//! best-checkpoint retention.
//!
//! Everything that affects results is seeded, so a run writes a
//! bit-reproducible log (`train_log.txt`) and checkpoints. Wall-clock
//! timings go to a separate, non-canonical `timing.log`.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::dice::{dice_coefficient, dice_loss_on_tape, DICE_SMOOTH};
use crate::error::{Error, Result};
use crate::exec::{EvalExec, Exec, TapeExec};
use crate::image::{load_image_png, load_mask_png, Transform};
use crate::metrics::{confusion, dice_from_counts, macro_average};
use crate::model::Model;
use crate::optim::{AdamState, CosineSchedule};
use crate::patch::{augment, extract_training_patches, Patch};
use crate::stitch::{predict_full, threshold_map, Fill};
use crate::synth::read_manifest;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.75;
pub const VAL_FRACTION: f64 = 0.15;

// Distinct ChaCha streams per responsibility, all keyed by the run seed.
const STREAM_SPLIT: u64 = 11;
const STREAM_SHUFFLE_AUG: u64 = 12;
const STREAM_DROPOUT: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_dice: f64,
    pub val_dice: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Split image indices 75/15/10 (train/val/test) after a seeded shuffle.
/// Fractions floor; the remainder goes to test. Each part is sorted.
pub fn split_images(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SPLIT);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
    let n_val = (n as f64 * VAL_FRACTION).floor() as usize;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

fn write_split_manifest(path: &Path, pairs: &[(PathBuf, PathBuf)]) -> Result<()> {
    let mut text = String::new();
    for (img, mask) in pairs {
        text.push_str(&format!("{} {}\n", img.display(), mask.display()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn select(pairs: &[(PathBuf, PathBuf)], idx: &[usize]) -> Vec<(PathBuf, PathBuf)> {
    idx.iter().map(|&i| pairs[i].clone()).collect()
}

fn load_patches(
    pairs: &[(PathBuf, PathBuf)],
    cfg: &RunConfig,
) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for (img_path, mask_path) in pairs {
        let img = load_image_png(img_path)?;
        let mask = load_mask_png(mask_path)?;
        out.extend(extract_training_patches(
            &img,
            &mask,
            cfg.patch_size,
            cfg.min_tissue,
            cfg.white_threshold,
        )?);
    }
    Ok(out)
}

/// Stack patches into `[B,3,S,S]` inputs and `[B,1,S,S]` targets.
pub fn stack_patches(patches: &[Patch]) -> (Tensor, Tensor) {
    let b = patches.len();
    let s = patches[0].size;
    let mut x = Vec::with_capacity(b * 3 * s * s);
    let mut y = Vec::with_capacity(b * s * s);
    for p in patches {
        x.extend_from_slice(p.data.data());
        y.extend_from_slice(p.mask.data());
    }
    (
        Tensor::new(vec![b, 3, s, s], x).expect("sized buffer"),
        Tensor::new(vec![b, 1, s, s], y).expect("sized buffer"),
    )
}

/// One optimization step over a batch; returns the batch Dice coefficient.
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    dropout_rng: &mut ChaCha8Rng,
    x: Tensor,
    y: Tensor,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ex = TapeExec::train(&mut tape, dropout_rng);
    let xi = ex.source(x)?;
    let yi = model.forward(&mut ex, xi)?;
    let params = ex.into_params();
    let ti = tape.leaf(y, false, "target")?;
    let loss = dice_loss_on_tape(&mut tape, yi, ti, DICE_SMOOTH)?;
    let loss_value = f64::from(tape.value(loss).item()?);
    let mut grads = tape.backward(loss)?;
    let mut grad_map: HashMap<String, Vec<f32>> = HashMap::with_capacity(params.len());
    for (name, node) in &params {
        if let Some(g) = grads.take(*node) {
            grad_map.insert(name.clone(), g);
        }
    }
    adam.apply(model, &grad_map, lr)?;
    Ok(1.0 - loss_value)
}

/// Patch-level Dice (smoothed) averaged over a patch set, eval mode.
pub fn patch_dice(model: &mut Model, patches: &[Patch], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in patches.chunks(batch_size.max(1)) {
        let (x, _) = stack_patches(chunk);
        let pred = model.forward(&mut EvalExec, x)?;
        let s = chunk[0].size;
        let plane = s * s;
        for (i, p) in chunk.iter().enumerate() {
            let pred_i = Tensor::new(
                vec![1, 1, s, s],
                pred.data()[i * plane..(i + 1) * plane].to_vec(),
            )?;
            let mask_i = Tensor::new(vec![1, 1, s, s], p.mask.data().to_vec())?;
            sum += dice_coefficient(&pred_i, &mask_i, f64::from(DICE_SMOOTH))?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Dataset("no patches to evaluate".into()));
    }
    Ok(sum / count as f64)
}

/// Stitched full-image binary Dice against ground truth, macro-averaged.
/// Images where prediction and truth are both empty are skipped.
pub fn stitched_dice(
    model: &mut Model,
    pairs: &[(PathBuf, PathBuf)],
    tile: usize,
    fill: Fill,
    threshold: f32,
) -> Result<f64> {
    let mut per_image = Vec::new();
    for (img_path, mask_path) in pairs {
        let img = load_image_png(img_path)?;
        let truth = load_mask_png(mask_path)?;
        let mut predict =
            |t: &Tensor| model.forward(&mut EvalExec, t.clone());
        let prob = predict_full(&img, tile, fill, &mut predict)?;
        let binary = threshold_map(&prob, threshold)?;
        let counts = confusion(&binary, &truth)?;
        per_image.push(dice_from_counts(&counts));
    }
    macro_average(&per_image).ok_or_else(|| {
        Error::Dataset("no image defined a Dice value (all empty)".into())
    })
}

pub fn train(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs = read_manifest(manifest)?;
    let (train_idx, val_idx, test_idx) = split_images(pairs.len(), cfg.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Dataset(format!(
            "dataset of {} images leaves an empty split (train {}, val {}); need at least 7 images",
            pairs.len(),
            train_idx.len(),
            val_idx.len()
        )));
    }
    let train_pairs = select(&pairs, &train_idx);
    let val_pairs = select(&pairs, &val_idx);
    let test_pairs = select(&pairs, &test_idx);
    write_split_manifest(&out_dir.join("split_train.txt"), &train_pairs)?;
    write_split_manifest(&out_dir.join("split_val.txt"), &val_pairs)?;
    write_split_manifest(&out_dir.join("split_test.txt"), &test_pairs)?;
    let cfg_path = out_dir.join("run_config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let train_patches = load_patches(&train_pairs, cfg)?;
    if train_patches.is_empty() {
        return Err(Error::Dataset(format!(
            "no training patches remain: every candidate fell below the {:.0}% tissue threshold \
             (min_tissue {})",
            cfg.min_tissue * 100.0,
            cfg.min_tissue
        )));
    }
    let val_patches = load_patches(&val_pairs, cfg)?;
    if val_patches.is_empty() {
        return Err(Error::Dataset(
            "validation images produced no patches above the tissue threshold".into(),
        ));
    }

    let mut model = Model::init(cfg.model_config(), cfg.seed)?;
    let mut adam = AdamState::new();
    let steps_per_epoch = train_patches.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        total_steps: (steps_per_epoch * cfg.epochs) as u64,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE_AUG);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(STREAM_DROPOUT);

    let log_path = out_dir.join("train_log.txt");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let timing_path = out_dir.join("timing.log");
    let mut timing =
        fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;

    let best_path = out_dir.join("best.ckpt");
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let epoch_lr = schedule.lr(step);
        let mut order: Vec<usize> = (0..train_patches.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut dice_sum = 0.0f64;
        let mut dice_weight = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Patch> = chunk
                .iter()
                .map(|&i| {
                    let t = Transform::ALL[shuffle_rng.gen_range(0..Transform::ALL.len())];
                    augment(&train_patches[i], t)
                })
                .collect::<Result<_>>()?;
            let (x, y) = stack_patches(&batch);
            let lr = schedule.lr(step);
            let dc = train_step(&mut model, &mut adam, &mut dropout_rng, x, y, lr)?;
            dice_sum += dc * chunk.len() as f64;
            dice_weight += chunk.len();
            step += 1;
        }
        let train_dice = dice_sum / dice_weight as f64;
        let val_dice = patch_dice(&mut model, &val_patches, cfg.batch_size)?;

        let record = EpochRecord { epoch, lr: epoch_lr, train_dice, val_dice };
        writeln!(
            log,
            "epoch={} lr={:.8} train_dice={:.6} val_dice={:.6}",
            record.epoch, record.lr, record.train_dice, record.val_dice
        )
        .map_err(|e| Error::io(&log_path, e))?;
        history.push(record);

        if val_dice > best_val {
            best_val = val_dice;
            best_epoch = epoch;
            save_checkpoint(&best_path, &model, cfg.seed, epoch as u64, val_dice, Some(&adam))?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
            save_checkpoint(&path, &model, cfg.seed, epoch as u64, val_dice, Some(&adam))?;
        }

        let wall = t0.elapsed().as_secs_f64();
        writeln!(timing, "epoch={epoch} wall_time={wall:.3}s")
            .map_err(|e| Error::io(&timing_path, e))?;
        eprintln!(
            "epoch {epoch}/{}: lr {epoch_lr:.6} train {train_dice:.4} val {val_dice:.4} ({wall:.1}s)",
            cfg.epochs
        );
    }

    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(
        &final_path,
        &model,
        cfg.seed,
        cfg.epochs as u64,
        history.last().map(|r| r.val_dice).unwrap_or(f64::NAN),
        Some(&adam),
    )?;
    let _ = test_pairs; // recorded in split_test.txt for later predict/eval

    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_dice: best_val,
        best_checkpoint: best_path,
        log_path,
    })
}

/// Drop-in predictor closure around an eval-mode model.
pub fn model_predictor(model: &mut Model) -> impl FnMut(&Tensor) -> Result<Tensor> + '_ {
    move |tile: &Tensor| model.forward(&mut EvalExec, tile.clone())
}

/// Load a split manifest written by `train` (same format as the dataset
/// manifest, absolute paths).
pub fn load_split(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    read_manifest(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_fractions_disjoint_and_exhaustive() {
        for n in [7, 10, 40, 41, 100] {
            let (tr, va, te) = split_images(n, 3);
            assert_eq!(tr.len(), (n as f64 * 0.75).floor() as usize);
            assert_eq!(va.len(), (n as f64 * 0.15).floor() as usize);
            assert_eq!(tr.len() + va.len() + te.len(), n);
            let mut all: Vec<usize> =
                tr.iter().chain(&va).chain(&te).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "overlap or gap at n={n}");
        }
        let (tr, va, te) = split_images(40, 3);
        assert_eq!((tr.len(), va.len(), te.len()), (30, 6, 4));
    }

    #[test]
    fn split_depends_on_seed_but_not_on_repetition() {
        let a = split_images(20, 1);
        let b = split_images(20, 1);
        assert_eq!(a, b);
        let c = split_images(20, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn stacking_preserves_layout() {
        let patch = |v: f32| Patch {
            origin: (0, 0),
            size: 2,
            data: Tensor::filled(&[3, 2, 2], v),
            mask: Tensor::filled(&[1, 2, 2], 1.0),
            tissue_ratio: 1.0,
        };
        let (x, y) = stack_patches(&[patch(0.25), patch(0.75)]);
        assert_eq!(x.shape(), &[2, 3, 2, 2]);
        assert_eq!(y.shape(), &[2, 1, 2, 2]);
        assert!(x.data()[..12].iter().all(|&v| v == 0.25));
        assert!(x.data()[12..].iter().all(|&v| v == 0.75));
    }
}
