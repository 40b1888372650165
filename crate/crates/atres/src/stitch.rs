//! Full-image prediction by 4-offset padded tiling with averaging, plus
//! self-ensemble over geometric transforms and multi-model averaging.
//!
//! The image is padded by `tile/2` on all sides; for each offset in
//! `{0, tile/2}²` the working area is tiled with non-overlapping tiles (the
//! grid is extended right/bottom to a tile multiple, then discarded), every
//! tile is predicted, and the region matching the original image is cropped.
//! Each original pixel is therefore predicted exactly four times; the final
//! map is the mean of the four passes.

use crate::error::{Error, Result};
use crate::image::{transform_image, transform_map, ImageRgb, Transform};
use crate::tensor::Tensor;

/// Value used outside the original image extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    /// Black (0 after normalization); the default.
    Zero,
    /// Slide-background white (1 after normalization).
    White,
    /// Mirror the image about its borders.
    Reflect,
}

impl Fill {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fill::Zero => "zero",
            Fill::White => "white",
            Fill::Reflect => "reflect",
        }
    }

    pub fn parse(s: &str) -> Result<Fill> {
        match s {
            "zero" => Ok(Fill::Zero),
            "white" => Ok(Fill::White),
            "reflect" => Ok(Fill::Reflect),
            other => Err(Error::InvalidArg(format!(
                "unknown padding fill '{other}' (expected zero, white or reflect)"
            ))),
        }
    }
}

/// A tile prediction function: `[1, 3, T, T]` normalized input to
/// `[1, 1, T, T]` probabilities.
pub type TilePredictor<'a> = dyn FnMut(&Tensor) -> Result<Tensor> + 'a;

/// Mirror index into `[0, extent)` reflecting about the borders without
/// repeating the edge sample. Folds periodically, so any overhang is
/// defined — offset grids sample up to a full tile past the image before
/// the excess is discarded.
fn reflect_index(i: isize, extent: usize) -> usize {
    let n = extent as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Sample the normalized source image at padded-canvas coordinates
/// (the real image occupies `[pad, pad+H) × [pad, pad+W)`).
fn sample(src: &Tensor, c: usize, gy: isize, gx: isize, fill: Fill) -> f32 {
    let (_, _, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
    let inside = gy >= 0 && gx >= 0 && (gy as usize) < h && (gx as usize) < w;
    if inside {
        return src.data()[(c * h + gy as usize) * w + gx as usize];
    }
    match fill {
        Fill::Zero => 0.0,
        Fill::White => 1.0,
        Fill::Reflect => {
            let ry = reflect_index(gy, h);
            let rx = reflect_index(gx, w);
            src.data()[(c * h + ry) * w + rx]
        }
    }
}

fn check_predictor_output(out: &Tensor, tile: usize) -> Result<()> {
    if out.shape() != [1, 1, tile, tile] {
        return Err(Error::ShapeMismatch(format!(
            "tile predictor returned {:?}, expected [1, 1, {tile}, {tile}]",
            out.shape()
        )));
    }
    Ok(())
}

/// Sum of the four offset passes over the original extent (f64 accumulator).
/// `predict_full` divides this by four; the coverage check feeds an all-ones
/// predictor through the same geometry and expects exactly 4 everywhere.
fn stitch_sum(
    img: &ImageRgb,
    tile: usize,
    fill: Fill,
    predict: &mut TilePredictor,
) -> Result<Vec<f64>> {
    if tile < 2 || tile % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "tile size must be even and at least 2, got {tile}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let pad = tile / 2;
    if fill == Fill::Reflect && (pad >= h || pad >= w) {
        return Err(Error::InvalidArg(format!(
            "reflect padding needs the image ({w}x{h}) larger than the pad ({pad})"
        )));
    }
    let src = img.to_tensor();
    // Padded canvas extents (image plus pad on all four sides).
    let ch = h + tile;
    let cw = w + tile;
    let mut acc = vec![0.0f64; h * w];
    let mut tile_buf = vec![0.0f32; 3 * tile * tile];
    for &(oy, ox) in &[(0usize, 0usize), (0, pad), (pad, 0), (pad, pad)] {
        let work_h = (ch - oy).div_ceil(tile) * tile;
        let work_w = (cw - ox).div_ceil(tile) * tile;
        let mut ty = 0;
        while ty < work_h {
            let mut tx = 0;
            while tx < work_w {
                // Canvas coordinates of this tile's top-left corner.
                let cy0 = (oy + ty) as isize;
                let cx0 = (ox + tx) as isize;
                for c in 0..3 {
                    for r in 0..tile {
                        for q in 0..tile {
                            // Shift canvas coords into image coords (-pad).
                            let gy = cy0 + r as isize - pad as isize;
                            let gx = cx0 + q as isize - pad as isize;
                            tile_buf[(c * tile + r) * tile + q] =
                                sample(&src, c, gy, gx, fill);
                        }
                    }
                }
                let input = Tensor::new(vec![1, 3, tile, tile], tile_buf.clone())
                    .expect("sized buffer");
                let out = predict(&input)?;
                check_predictor_output(&out, tile)?;
                // Add the part of this tile that overlaps the original image.
                for r in 0..tile {
                    let iy = cy0 + r as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for q in 0..tile {
                        let ix = cx0 + q as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc[iy as usize * w + ix as usize] +=
                            f64::from(out.data()[r * tile + q]);
                    }
                }
                tx += tile;
            }
            ty += tile;
        }
    }
    Ok(acc)
}

/// Average of the four offset passes as a `[1, 1, H, W]` probability map.
pub fn predict_full(
    img: &ImageRgb,
    tile: usize,
    fill: Fill,
    predict: &mut TilePredictor,
) -> Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    let acc = stitch_sum(img, tile, fill, predict)?;
    let data: Vec<f32> = acc.iter().map(|&v| (v / 4.0) as f32).collect();
    Tensor::new(vec![1, 1, h, w], data)
}

/// How many times each original pixel is predicted by the offset scheme.
pub fn coverage_counts(width: usize, height: usize, tile: usize) -> Result<Vec<f64>> {
    let img = ImageRgb::filled(width, height, (0, 0, 0))?;
    let ones = Tensor::filled(&[1, 1, tile, tile], 1.0);
    stitch_sum(&img, tile, Fill::Zero, &mut |_t: &Tensor| Ok(ones.clone()))
}

/// Binarize a probability map: `value >= t` maps to 1 (ties inclusive).
pub fn threshold_map(map: &Tensor, t: f32) -> Result<Tensor> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArg(format!(
            "threshold must lie strictly inside (0,1), got {t}"
        )));
    }
    if map.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArg(
            "threshold input must be a probability map in [0,1]".into(),
        ));
    }
    let data = map
        .data()
        .iter()
        .map(|&v| if v >= t { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(map.shape().to_vec(), data)
}

/// Mean of `predict_full` over the six transforms, each mapped back to the
/// original frame before averaging.
pub fn self_ensemble(
    img: &ImageRgb,
    tile: usize,
    fill: Fill,
    predict: &mut TilePredictor,
) -> Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    let mut acc = vec![0.0f64; h * w];
    for t in Transform::ALL {
        let timg = transform_image(img, t);
        let map = predict_full(&timg, tile, fill, predict)?;
        let back = transform_map(&map, t.inverse())?;
        debug_assert_eq!(back.shape(), &[1, 1, h, w]);
        for (a, &v) in acc.iter_mut().zip(back.data()) {
            *a += f64::from(v);
        }
    }
    let data: Vec<f32> = acc.iter().map(|&v| (v / 6.0) as f32).collect();
    Tensor::new(vec![1, 1, h, w], data)
}

/// Pixelwise mean of probability maps, summed left to right.
pub fn model_ensemble(maps: &[Tensor]) -> Result<Tensor> {
    if maps.len() < 2 {
        return Err(Error::InvalidArg(
            "model ensemble needs at least two maps".into(),
        ));
    }
    let shape = maps[0].shape().to_vec();
    for m in &maps[1..] {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "ensemble map shapes differ: {:?} vs {:?}",
                shape,
                m.shape()
            )));
        }
    }
    let n = maps.len() as f32;
    let mut data = maps[0].data().to_vec();
    for m in &maps[1..] {
        for (d, &v) in data.iter_mut().zip(m.data()) {
            *d += v;
        }
    }
    for d in &mut data {
        *d /= n;
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::sigmoid_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..w * h * 3).map(|_| rng.gen::<u8>()).collect();
        ImageRgb::new(w, h, pixels).unwrap()
    }

    /// Pixelwise toy model: sigmoid of a fixed linear combination of the
    /// three channels (exactly translation- and transform-equivariant).
    fn pointwise_predictor(tile: usize) -> impl FnMut(&Tensor) -> Result<Tensor> {
        move |input: &Tensor| {
            let area = tile * tile;
            let d = input.data();
            let mut out = vec![0.0f32; area];
            for i in 0..area {
                let z = 1.9 * d[i] - 1.3 * d[area + i] + 0.7 * d[2 * area + i] - 0.2;
                out[i] = sigmoid_scalar(z);
            }
            Tensor::new(vec![1, 1, tile, tile], out)
        }
    }

    #[test]
    fn coverage_is_exactly_four() {
        for (w, h) in [(31, 17), (64, 64), (40, 96), (33, 129), (97, 51)] {
            let counts = coverage_counts(w, h, 32).unwrap();
            assert!(
                counts.iter().all(|&c| c == 4.0),
                "coverage wrong for {w}x{h}"
            );
        }
    }

    #[test]
    fn constant_predictor_stitches_to_constant() {
        let img = random_image(50, 38, 1);
        let constant = Tensor::filled(&[1, 1, 16, 16], 0.7);
        let map = predict_full(&img, 16, Fill::Zero, &mut |_t: &Tensor| {
            Ok(constant.clone())
        })
        .unwrap();
        assert!(map.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn pointwise_predictor_is_seam_free() {
        let img = random_image(45, 29, 2);
        let tile = 16;
        let map = predict_full(&img, tile, Fill::Zero, &mut pointwise_predictor(tile)).unwrap();
        // Direct dense evaluation of the same pointwise function.
        let src = img.to_tensor();
        let (w, h) = (img.width(), img.height());
        let area = w * h;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let z = 1.9 * src.data()[i] - 1.3 * src.data()[area + i]
                    + 0.7 * src.data()[2 * area + i]
                    - 0.2;
                let want = sigmoid_scalar(z);
                let got = map.data()[i];
                assert!(
                    (got - want).abs() < 1e-6,
                    "seam at ({x},{y}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn threshold_rules() {
        let map = Tensor::new(vec![1, 1, 1, 4], vec![0.4, 0.5, 0.6, 0.0]).unwrap();
        let bin = threshold_map(&map, 0.5).unwrap();
        assert_eq!(bin.data(), &[0.0, 1.0, 1.0, 0.0]);
        let again = threshold_map(&bin, 0.5).unwrap();
        assert_eq!(again, bin, "thresholding is idempotent");
        assert!(threshold_map(&map, 0.0).is_err());
        assert!(threshold_map(&map, 1.0).is_err());
        let zeros = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(threshold_map(&zeros, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_ensemble_on_uniform_image_equals_single() {
        let img = ImageRgb::filled(24, 24, (120, 80, 160)).unwrap();
        let tile = 16;
        let single =
            predict_full(&img, tile, Fill::Zero, &mut pointwise_predictor(tile)).unwrap();
        let ens = self_ensemble(&img, tile, Fill::Zero, &mut pointwise_predictor(tile)).unwrap();
        for (a, b) in ens.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn self_ensemble_is_noop_for_equivariant_predictor() {
        let img = random_image(30, 22, 3);
        let tile = 16;
        let single =
            predict_full(&img, tile, Fill::Zero, &mut pointwise_predictor(tile)).unwrap();
        let ens = self_ensemble(&img, tile, Fill::Zero, &mut pointwise_predictor(tile)).unwrap();
        for (a, b) in ens.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn model_ensemble_rules() {
        let a = Tensor::new(vec![1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        let b = Tensor::new(vec![1, 1, 1, 2], vec![0.8, 0.9]).unwrap();
        let m = model_ensemble(&[a.clone(), b.clone()]).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-7);
        let swapped = model_ensemble(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(m, swapped, "mean is order-invariant");
        let same = model_ensemble(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same, a, "identical maps average to themselves bitwise");
        assert!(model_ensemble(&[a.clone()]).is_err());
        let c = Tensor::zeros(&[1, 1, 2, 1]);
        assert!(model_ensemble(&[a, c]).is_err());
    }

    #[test]
    fn fill_modes() {
        // A 6x6 image, tile 4 (pad 2): with White fill the tiles see 1.0
        // outside; with Reflect they see mirrored content. Use a predictor
        // that reports the tile's top-left value to observe the padding.
        let mut img = ImageRgb::filled(6, 6, (0, 0, 0)).unwrap();
        img.set(1, 1, (255, 255, 255));
        let probe = |input: &Tensor| {
            let v = input.data()[0];
            Ok(Tensor::filled(&[1, 1, 4, 4], v.clamp(0.0, 1.0)))
        };
        // Offset (0,0) first tile sees canvas (-2,-2): zero -> 0, white -> 1,
        // reflect -> mirrored (2,2) which is black, and mirrored (1,1) check
        // via a different offset is covered by the seam test above.
        let mut p = probe;
        let z = predict_full(&img, 4, Fill::Zero, &mut p).unwrap();
        let mut p = probe;
        let w = predict_full(&img, 4, Fill::White, &mut p).unwrap();
        assert!(z.data()[0] < w.data()[0]);
        let mut p = probe;
        let r = predict_full(&img, 4, Fill::Reflect, &mut p).unwrap();
        assert!(r.data()[0] <= 1.0);

        // Reflect on an image smaller than the pad is rejected.
        let tiny = ImageRgb::filled(3, 3, (0, 0, 0)).unwrap();
        let mut big_probe = |input: &Tensor| {
            let v = input.data()[0];
            Ok(Tensor::filled(&[1, 1, 16, 16], v.clamp(0.0, 1.0)))
        };
        assert!(predict_full(&tiny, 16, Fill::Reflect, &mut big_probe).is_err());
        assert!(predict_full(&tiny, 16, Fill::Zero, &mut big_probe).is_ok());
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        // Overhang beyond one fold: the furthest offset-grid tile reaches a
        // full tile past the image, e.g. index 255 against extent 128.
        assert_eq!(reflect_index(255, 128), 1);
        assert_eq!(reflect_index(2 * 127, 128), 0);
        assert_eq!(reflect_index(-5, 3), 1);
        assert_eq!(reflect_index(1, 1), 0);
        // Every index an offset grid can produce stays in range.
        for i in -128..512isize {
            assert!(reflect_index(i, 128) < 128);
        }
    }

    #[test]
    fn reflect_stitch_handles_full_tile_overhang() {
        // Tile as large as the image: the (pad,pad) offset grid samples a
        // full tile past the border, which must fold without panicking.
        let img = ImageRgb::filled(32, 32, (100, 120, 140)).unwrap();
        let tile = 32;
        let out = Tensor::filled(&[1, 1, tile, tile], 0.25);
        let mut predict = |_: &Tensor| Ok(out.clone());
        let map = predict_full(&img, tile, Fill::Reflect, &mut predict).unwrap();
        assert!(map.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
