//! Pixelwise evaluation metrics over binary segmentation maps.
//!
//! Positive class = foreground (1). Metrics with an empty denominator return
//! `None` rather than a silent zero, and report aggregation averages
//! per-image values over whichever images define the metric.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Counts with the positive and negative classes exchanged.
    pub fn complement(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

fn as_binary(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArg(format!(
            "{name} must be binary (all values 0 or 1)"
        )));
    }
    Ok(())
}

/// Pixelwise confusion counts of a binary prediction against binary truth.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "confusion shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    as_binary("prediction", pred)?;
    as_binary("truth", truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p != 0.0, t != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp + c.tn, c.total())
}

pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tn, c.tn + c.fp)
}

pub fn dice_from_counts(c: &ConfusionCounts) -> Option<f64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// Unweighted mean over the defined entries; `None` if every entry is `None`.
pub fn macro_average(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dice::dice_coefficient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: &[f32], h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, 1, h, w], values.to_vec()).unwrap()
    }

    #[test]
    fn all_ones_against_itself() {
        let ones = Tensor::filled(&[1, 1, 10, 10], 1.0);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 100, fp: 0, tn: 0, fn_: 0 });
        assert_eq!(accuracy(&c), Some(1.0));
        assert_eq!(sensitivity(&c), Some(1.0));
        assert_eq!(dice_from_counts(&c), Some(1.0));
        assert_eq!(specificity(&c), None, "no negatives anywhere");
    }

    #[test]
    fn all_ones_against_all_zeros() {
        let ones = Tensor::filled(&[1, 1, 10, 10], 1.0);
        let zeros = Tensor::zeros(&[1, 1, 10, 10]);
        let c = confusion(&ones, &zeros).unwrap();
        assert_eq!(c.fp, 100);
        assert_eq!(c.tp + c.tn + c.fn_, 0);
    }

    #[test]
    fn checkerboard_against_inverse() {
        let a = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f32);
        let b = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4 + i % 4 + 1) % 2) as f32);
        let c = confusion(&a, &b).unwrap();
        assert_eq!(c.fp, 8);
        assert_eq!(c.fn_, 8);
        assert_eq!(c.tp + c.tn, 0);
    }

    #[test]
    fn balanced_counts_give_half_everywhere() {
        let c = ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 };
        assert_eq!(accuracy(&c), Some(0.5));
        assert_eq!(sensitivity(&c), Some(0.5));
        assert_eq!(specificity(&c), Some(0.5));
        assert_eq!(dice_from_counts(&c), Some(0.5));
    }

    #[test]
    fn complement_swaps_sensitivity_and_specificity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let c = ConfusionCounts {
                tp: rng.gen_range(0..20),
                fp: rng.gen_range(0..20),
                tn: rng.gen_range(0..20),
                fn_: rng.gen_range(0..20),
            };
            let d = c.complement();
            assert_eq!(sensitivity(&c), specificity(&d));
            assert_eq!(specificity(&c), sensitivity(&d));
            assert_eq!(accuracy(&c), accuracy(&d));
        }
    }

    #[test]
    fn counts_formula_agrees_with_set_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = Tensor::from_fn(&[1, 1, 6, 6], |_| f32::from(rng.gen::<bool>() as u8));
            let b = Tensor::from_fn(&[1, 1, 6, 6], |_| f32::from(rng.gen::<bool>() as u8));
            let c = confusion(&a, &b).unwrap();
            let from_counts = dice_from_counts(&c);
            let from_sets = dice_coefficient(&a, &b, 0.0).unwrap();
            match from_counts {
                None => assert!(from_sets.is_nan()),
                Some(v) => assert!((v - from_sets).abs() < 1e-9),
            }
        }
    }

    #[test]
    fn rejects_probability_maps() {
        let p = map(&[0.5, 1.0], 1, 2);
        let t = map(&[1.0, 1.0], 1, 2);
        assert!(confusion(&p, &t).is_err());
    }

    #[test]
    fn macro_average_skips_undefined() {
        assert_eq!(macro_average(&[Some(1.0), None, Some(0.5)]), Some(0.75));
        assert_eq!(macro_average(&[None, None]), None);
    }
}
