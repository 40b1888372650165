//! Randomized property tests for the algebraic invariants of the library:
//! Dice symmetry and bounds, threshold idempotence, exact tile coverage,
//! transform group laws, patch-filter monotonicity, and normalization.

use proptest::prelude::*;

use atres::dice::dice_coefficient;
use atres::image::{transform_image, ImageRgb, Transform};
use atres::metrics::macro_average;
use atres::patch::{augment, extract_training_patches};
use atres::stitch::{coverage_counts, threshold_map};
use atres::tensor::Tensor;

fn binary_tensor(h: usize, w: usize, bits: &[bool]) -> Tensor {
    Tensor::from_fn(&[1, 1, h, w], |i| if bits[i] { 1.0 } else { 0.0 })
}

fn image_from_bytes(w: usize, h: usize, bytes: &[u8]) -> ImageRgb {
    ImageRgb::new(w, h, bytes.to_vec()).expect("sized buffer")
}

proptest! {
    /// Dice on binary masks is symmetric (bitwise, both orders sum the same
    /// terms) and lies in (0, 1] with positive smoothing.
    #[test]
    fn dice_is_symmetric_and_bounded(
        (h, w) in (1usize..=10, 1usize..=10),
        seed_a in prop::collection::vec(prop::bool::ANY, 100),
        seed_b in prop::collection::vec(prop::bool::ANY, 100),
    ) {
        let a = binary_tensor(h, w, &seed_a[..h * w]);
        let b = binary_tensor(h, w, &seed_b[..h * w]);
        let ab = dice_coefficient(&a, &b, 0.0).unwrap();
        let ba = dice_coefficient(&b, &a, 0.0).unwrap();
        if ab.is_nan() {
            prop_assert!(ba.is_nan());
        } else {
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
        let smoothed = dice_coefficient(&a, &b, 1.0).unwrap();
        prop_assert!(smoothed > 0.0 && smoothed <= 1.0);
    }

    /// Thresholding an already-binary map changes nothing.
    #[test]
    fn threshold_is_idempotent(
        values in prop::collection::vec(0.0f32..=1.0, 1..=64),
        t in 0.01f32..0.99,
    ) {
        let map = Tensor::new(vec![1, 1, 1, values.len()], values).unwrap();
        let once = threshold_map(&map, t).unwrap();
        let twice = threshold_map(&once, t).unwrap();
        prop_assert_eq!(once, twice);
    }

    /// The 4-offset tiling covers every original pixel exactly 4 times for
    /// any image size and any even tile.
    #[test]
    fn coverage_is_exactly_four_everywhere(
        w in 1usize..=48,
        h in 1usize..=48,
        tile_pow in 1u32..=4,
    ) {
        let tile = 2usize.pow(tile_pow);
        let counts = coverage_counts(w, h, tile).unwrap();
        prop_assert_eq!(counts.len(), w * h);
        prop_assert!(counts.iter().all(|&c| c == 4.0));
    }

    /// Every flip/rotation composed with its inverse is the identity on
    /// arbitrary images.
    #[test]
    fn transforms_invert(
        w in 1usize..=12,
        h in 1usize..=12,
        bytes in prop::collection::vec(any::<u8>(), 3 * 12 * 12),
    ) {
        let img = image_from_bytes(w, h, &bytes[..3 * w * h]);
        for t in Transform::ALL {
            let back = transform_image(&transform_image(&img, t), t.inverse());
            prop_assert_eq!(back.pixels(), img.pixels(), "{:?}", t);
        }
    }

    /// Raising the tissue threshold never admits new patches, every emitted
    /// value stays in [0,1], and augmentation preserves the tissue ratio
    /// with flips being involutions.
    #[test]
    fn patch_filter_is_monotone_and_normalized(
        w in 4usize..=20,
        h in 4usize..=20,
        bytes in prop::collection::vec(any::<u8>(), 3 * 20 * 20),
        bits in prop::collection::vec(prop::bool::ANY, 20 * 20),
        lo in 0.0f64..0.5,
        hi_delta in 0.0f64..0.5,
    ) {
        let img = image_from_bytes(w, h, &bytes[..3 * w * h]);
        let mask = binary_tensor(h, w, &bits[..h * w]);
        let hi = lo + hi_delta;
        let low_set = extract_training_patches(&img, &mask, 8, lo, 220).unwrap();
        let high_set = extract_training_patches(&img, &mask, 8, hi, 220).unwrap();
        let low_origins: Vec<_> = low_set.iter().map(|p| p.origin).collect();
        for p in &high_set {
            prop_assert!(low_origins.contains(&p.origin), "filter not monotone");
        }
        for p in &low_set {
            prop_assert!(p.data.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            for t in Transform::ALL {
                let a = augment(p, t).unwrap();
                prop_assert_eq!(a.tissue_ratio, p.tissue_ratio);
            }
            let flipped = augment(&augment(p, Transform::HFlip).unwrap(), Transform::HFlip).unwrap();
            prop_assert_eq!(&flipped.data, &p.data);
            prop_assert_eq!(&flipped.mask, &p.mask);
        }
    }

    /// A macro average over partially-defined values stays inside the range
    /// of the defined ones and is None exactly when all are undefined.
    #[test]
    fn macro_average_stays_in_range(
        values in prop::collection::vec(prop::option::of(0.0f64..=1.0), 0..=12),
    ) {
        let avg = macro_average(&values);
        let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        match avg {
            None => prop_assert!(defined.is_empty()),
            Some(a) => {
                let lo = defined.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
            }
        }
    }
}
