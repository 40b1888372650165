//! Dice overlap coefficient and Dice loss.
//!
//! `DC = (2·Σ(pred·target) + s) / (Σpred + Σtarget + s)` with smoothing
//! `s = 1` by default so empty masks never divide zero by zero. The loss is
//! `1 − DC`. A taped variant provides gradients for training; a plain f64
//! variant serves validation and evaluation.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Default smoothing constant added to numerator and denominator.
pub const DICE_SMOOTH: f32 = 1.0;

fn check_binary(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArg(format!(
            "{name} must be binary (all values 0 or 1)"
        )));
    }
    Ok(())
}

/// Differentiable Dice coefficient of a probability map against a binary
/// target, recorded on the tape. Returns a scalar node.
pub fn dice_coefficient_on_tape(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    smooth: f32,
) -> Result<NodeId> {
    check_binary("dice target", tape.value(target))?;
    let inter = tape.mul(pred, target)?;
    let inter_sum = tape.sum(inter)?;
    let num = tape.affine(inter_sum, 2.0, smooth)?;
    let pred_sum = tape.sum(pred)?;
    let target_sum = tape.sum(target)?;
    let den_sum = tape.add(pred_sum, target_sum)?;
    let den = tape.affine(den_sum, 1.0, smooth)?;
    tape.div(num, den)
}

/// Differentiable Dice loss `1 − DC` as a scalar node.
pub fn dice_loss_on_tape(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    smooth: f32,
) -> Result<NodeId> {
    let dc = dice_coefficient_on_tape(tape, pred, target, smooth)?;
    tape.affine(dc, -1.0, 1.0)
}

/// Dice coefficient in f64 for monitoring and evaluation. `target` must be
/// binary; `pred` may be a probability or binary map.
pub fn dice_coefficient(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    check_binary("dice target", target)?;
    let mut inter = 0.0f64;
    let mut pred_sum = 0.0f64;
    let mut target_sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += f64::from(p) * f64::from(t);
        pred_sum += f64::from(p);
        target_sum += f64::from(t);
    }
    Ok((2.0 * inter + smooth) / (pred_sum + target_sum + smooth))
}
