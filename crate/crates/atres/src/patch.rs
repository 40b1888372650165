//! Training-patch extraction: overlapping grid planning, tissue-ratio
//! filtering, [0,1] normalization and geometric augmentation.

use crate::error::{Error, Result};
use crate::image::{transform_map, ImageRgb, Transform};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIZE: usize = 512;
pub const DEFAULT_MIN_TISSUE: f64 = 0.30;
/// A pixel is background when every channel reaches this brightness.
pub const DEFAULT_WHITE_THRESHOLD: u8 = 220;

/// Background test: white/near-white pixels are not tissue.
pub fn is_tissue(r: u8, g: u8, b: u8) -> bool {
    is_tissue_with(r, g, b, DEFAULT_WHITE_THRESHOLD)
}

pub fn is_tissue_with(r: u8, g: u8, b: u8, white_threshold: u8) -> bool {
    r.min(g).min(b) < white_threshold
}

/// One normalized training patch cut from a source image.
#[derive(Clone, Debug)]
pub struct Patch {
    /// Top-left (x, y) in source-image coordinates.
    pub origin: (usize, usize),
    pub size: usize,
    /// `[3, S, S]` values in [0, 1] (bytes / 255; grid padding is zero).
    pub data: Tensor,
    /// `[1, S, S]` values in {0, 1}; padding counts as background.
    pub mask: Tensor,
    /// Fraction of the patch classified as tissue before normalization.
    pub tissue_ratio: f64,
}

/// The overlapping-grid plan for one source image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub size: usize,
    pub stride: usize,
    /// Row-major sorted top-left corners in padded coordinates.
    pub origins: Vec<(usize, usize)>,
    pub source_width: usize,
    pub source_height: usize,
    /// Source extended with zeros on the right/bottom to these dimensions.
    pub padded_width: usize,
    pub padded_height: usize,
}

/// Round `extent` up so the stride grid fits whole patches.
fn padded_extent(extent: usize, size: usize, stride: usize) -> usize {
    let min = extent.max(size);
    min.div_ceil(stride) * stride
}

pub fn plan_patches(
    width: usize,
    height: usize,
    size: usize,
    stride: usize,
) -> Result<PatchPlan> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArg("image must be at least 1x1".into()));
    }
    if size == 0 || stride == 0 || stride > size {
        return Err(Error::InvalidArg(format!(
            "need 0 < stride <= size, got stride {stride}, size {size}"
        )));
    }
    let padded_width = padded_extent(width, size, stride);
    let padded_height = padded_extent(height, size, stride);
    let mut origins = Vec::new();
    let mut y = 0;
    while y + size <= padded_height {
        let mut x = 0;
        while x + size <= padded_width {
            origins.push((x, y));
            x += stride;
        }
        y += stride;
    }
    Ok(PatchPlan {
        size,
        stride,
        origins,
        source_width: width,
        source_height: height,
        padded_width,
        padded_height,
    })
}

/// Cut one normalized patch (with mask) at a planned origin. Regions beyond
/// the source are zero image data and background mask.
fn cut_patch(
    img: &ImageRgb,
    mask: &Tensor,
    origin: (usize, usize),
    size: usize,
    white_threshold: u8,
) -> Patch {
    let (ox, oy) = origin;
    let (w, h) = (img.width(), img.height());
    let area = size * size;
    let mut data = vec![0.0f32; 3 * area];
    let mut mask_data = vec![0.0f32; area];
    let mut tissue = 0usize;
    for py in 0..size {
        let sy = oy + py;
        if sy >= h {
            continue;
        }
        for px in 0..size {
            let sx = ox + px;
            if sx >= w {
                continue;
            }
            let (r, g, b) = img.get(sx, sy);
            let at = py * size + px;
            data[at] = f32::from(r) / 255.0;
            data[area + at] = f32::from(g) / 255.0;
            data[2 * area + at] = f32::from(b) / 255.0;
            mask_data[at] = mask.data()[sy * w + sx];
            if is_tissue_with(r, g, b, white_threshold) {
                tissue += 1;
            }
        }
    }
    Patch {
        origin,
        size,
        data: Tensor::new(vec![3, size, size], data).expect("sized buffer"),
        mask: Tensor::new(vec![1, size, size], mask_data).expect("sized buffer"),
        tissue_ratio: tissue as f64 / area as f64,
    }
}

/// Extract the 50%-overlap training patches whose tissue ratio clears
/// `min_tissue`. The mask must be a binary `[1, 1, H, W]` tensor matching
/// the image dimensions.
pub fn extract_training_patches(
    img: &ImageRgb,
    mask: &Tensor,
    size: usize,
    min_tissue: f64,
    white_threshold: u8,
) -> Result<Vec<Patch>> {
    let (n, c, mh, mw) = mask.dims4()?;
    if n != 1 || c != 1 || mh != img.height() || mw != img.width() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match image {}x{}",
            mask.shape(),
            img.width(),
            img.height()
        )));
    }
    if size < 2 || size % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "patch size must be even and at least 2, got {size}"
        )));
    }
    let plan = plan_patches(img.width(), img.height(), size, size / 2)?;
    let mut out = Vec::new();
    for &origin in &plan.origins {
        let patch = cut_patch(img, mask, origin, size, white_threshold);
        if patch.tissue_ratio >= min_tissue {
            out.push(patch);
        }
    }
    Ok(out)
}

/// Apply one geometric transform to patch data and mask identically.
pub fn augment(patch: &Patch, t: Transform) -> Result<Patch> {
    let data = transform_map(&patch.data, t)?;
    let mask = transform_map(&patch.mask, t)?;
    Ok(Patch {
        origin: patch.origin,
        size: patch.size,
        data,
        mask,
        tissue_ratio: patch.tissue_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white_image(w: usize, h: usize) -> ImageRgb {
        ImageRgb::filled(w, h, (255, 255, 255)).unwrap()
    }

    fn empty_mask(w: usize, h: usize) -> Tensor {
        Tensor::zeros(&[1, 1, h, w])
    }

    #[test]
    fn tissue_rule_examples() {
        assert!(!is_tissue(255, 255, 255));
        assert!(is_tissue(180, 60, 120));
        assert!(!is_tissue(225, 230, 221));
        assert!(is_tissue(219, 255, 255));
    }

    #[test]
    fn grid_for_1024_image_has_nine_candidates() {
        let plan = plan_patches(1024, 1024, 512, 256).unwrap();
        assert_eq!(plan.padded_width, 1024);
        assert_eq!(plan.origins.len(), 9);
        let xs: Vec<usize> = plan.origins.iter().map(|o| o.0).collect();
        assert_eq!(&xs[..3], &[0, 256, 512]);
    }

    #[test]
    fn grid_covers_every_source_pixel() {
        for (w, h, s) in [(300, 170, 64), (512, 512, 512), (65, 641, 32)] {
            let plan = plan_patches(w, h, s, s / 2).unwrap();
            assert!(plan.padded_width >= w && plan.padded_height >= h);
            let mut covered = vec![false; plan.padded_width * plan.padded_height];
            for &(ox, oy) in &plan.origins {
                assert!(ox + s <= plan.padded_width && oy + s <= plan.padded_height);
                for y in oy..oy + s {
                    for x in ox..ox + s {
                        covered[y * plan.padded_width + x] = true;
                    }
                }
            }
            assert!(covered.iter().all(|&c| c), "gap in grid {w}x{h} size {s}");
        }
    }

    #[test]
    fn all_white_image_yields_nothing() {
        let img = white_image(128, 128);
        let got =
            extract_training_patches(&img, &empty_mask(128, 128), 64, 0.30, 220).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn forty_percent_tissue_is_retained_and_normalized() {
        // Left 40% of a 10x10 image stained, rest white.
        let mut img = white_image(10, 10);
        let mut mask = empty_mask(10, 10);
        for y in 0..10 {
            for x in 0..4 {
                img.set(x, y, (180, 60, 120));
                mask.data_mut()[y * 10 + x] = 1.0;
            }
        }
        let got = extract_training_patches(&img, &mask, 10, 0.30, 220).unwrap();
        assert_eq!(got.len(), 1);
        let p = &got[0];
        assert!((p.tissue_ratio - 0.40).abs() < 1e-12);
        // Normalization: 255 -> exactly 1.0, 180 -> 180/255.
        assert_eq!(p.data.data()[9], 1.0);
        assert!((p.data.data()[0] - 180.0 / 255.0).abs() < 1e-7);
        assert_eq!(p.mask.data()[0], 1.0);
        assert_eq!(p.mask.data()[9], 0.0);
        // Raising the threshold above the ratio drops the patch.
        let none = extract_training_patches(&img, &mask, 10, 0.41, 220).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn denormalization_reproduces_bytes() {
        let mut img = white_image(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, ((x * 31) as u8, (y * 29) as u8, 200));
            }
        }
        let mut mask = empty_mask(8, 8);
        mask.data_mut().fill(1.0);
        let got = extract_training_patches(&img, &mask, 8, 0.0, 220).unwrap();
        let p = &got[0];
        for y in 0..8 {
            for x in 0..8 {
                let (r, _, _) = img.get(x, y);
                let v = p.data.data()[y * 8 + x];
                assert_eq!((f64::from(v) * 255.0).round() as u8, r);
            }
        }
    }

    #[test]
    fn padding_counts_as_background() {
        // 80x80 stained image, patch 64, stride 32: padded to 96, so the
        // corner patch at (32,32) hangs 16 pixels over the source.
        let img = ImageRgb::filled(80, 80, (150, 80, 160)).unwrap();
        let mut mask = empty_mask(80, 80);
        mask.data_mut().fill(1.0);
        let plan = plan_patches(80, 80, 64, 32).unwrap();
        assert_eq!(plan.padded_width, 96);
        let got = extract_training_patches(&img, &mask, 64, 0.0, 220).unwrap();
        let corner = got
            .iter()
            .find(|p| p.origin == (32, 32))
            .expect("corner patch planned");
        // Only the top-left 48x48 of that patch holds real pixels.
        assert!((corner.tissue_ratio - (48.0 * 48.0) / (64.0 * 64.0)).abs() < 1e-12);
        let area = 64 * 64;
        assert!(corner.data.data()[47] > 0.0, "real pixel keeps its value");
        assert_eq!(corner.data.data()[48], 0.0, "padded image pixel is zero");
        assert_eq!(corner.mask.data()[area - 1], 0.0, "padded mask is background");
        assert_eq!(corner.mask.data()[0], 1.0);
    }

    #[test]
    fn filter_monotone_in_threshold() {
        let mut img = white_image(64, 64);
        let mut mask = empty_mask(64, 64);
        // Diagonal band of tissue with varying widths.
        for y in 0..64usize {
            for x in 0..64usize {
                if x.abs_diff(y) < 12 {
                    img.set(x, y, (170, 90, 150));
                    mask.data_mut()[y * 64 + x] = 1.0;
                }
            }
        }
        let mut prev = usize::MAX;
        for threshold in [0.0, 0.1, 0.2, 0.3, 0.5, 0.9] {
            let n = extract_training_patches(&img, &mask, 32, threshold, 220)
                .unwrap()
                .len();
            assert!(n <= prev, "retained set grew at threshold {threshold}");
            prev = n;
        }
    }

    #[test]
    fn augmentation_preserves_mask_alignment_and_ratio() {
        let mut img = white_image(6, 6);
        let mut mask = empty_mask(6, 6);
        img.set(1, 0, (100, 50, 90));
        mask.data_mut()[1] = 1.0;
        let patches = extract_training_patches(&img, &mask, 6, 0.0, 220).unwrap();
        let p = &patches[0];
        for t in Transform::ALL {
            let a = augment(p, t).unwrap();
            assert_eq!(a.tissue_ratio, p.tissue_ratio);
            // The stained pixel and the mask move together.
            let stained = a
                .data
                .data()
                .iter()
                .take(36)
                .position(|&v| v < 0.9)
                .unwrap();
            let masked = a.mask.data().iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(stained, masked, "{t:?}");
        }
        let twice = augment(&augment(p, Transform::Rot180).unwrap(), Transform::Rot180).unwrap();
        assert_eq!(twice.data, p.data);
        assert_eq!(twice.mask, p.mask);
    }
}
