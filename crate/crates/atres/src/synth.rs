//! Seeded synthetic dataset generator: pale-background images with textured
//! pink/purple blobs and matching binary masks.
//!
//! Background pixels keep every channel at 232 or above, so the tissue
//! predicate classifies them as background; stained blob pixels are clamped
//! below the white threshold. Dense blobs additionally carry pale interior
//! regions ("lumina") that keep the background palette while staying inside
//! the mask — the mask is the blob union — so labels there cannot be
//! recovered from single-pixel color and need spatial context. Each dense
//! image holds one large hollow blob whose central lumen is tens of pixels
//! wide: deep inside it the nearest stained pixel is beyond a small
//! receptive field, so only long-range models can fill the core correctly.
//! Every fifth image is "sparse": one tiny blob whose area stays far below
//! 30% of any training patch, exercising the patch filter.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{save_image_png, save_mask_png, ImageRgb};
use crate::tensor::Tensor;

struct Lumen {
    cx: f64,
    cy: f64,
    radius: f64,
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amps: [f64; 3],
    phases: [f64; 3],
    color: (f64, f64, f64),
    lumina: Vec<Lumen>,
}

const WOBBLE_FREQS: [f64; 3] = [2.0, 3.0, 5.0];

impl Blob {
    fn boundary_radius(&self, theta: f64) -> f64 {
        let mut r = 1.0;
        for i in 0..3 {
            r += self.amps[i] * (WOBBLE_FREQS[i] * theta + self.phases[i]).sin();
        }
        self.radius * r
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let d2 = dx * dx + dy * dy;
        let reach = self.radius * 1.3;
        if d2 > reach * reach {
            return false;
        }
        d2.sqrt() <= self.boundary_radius(dy.atan2(dx))
    }

    fn in_lumen(&self, x: f64, y: f64) -> bool {
        self.lumina.iter().any(|l| {
            let dx = x - l.cx;
            let dy = y - l.cy;
            dx * dx + dy * dy <= l.radius * l.radius
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum BlobRole {
    /// Tiny solid blob for sparse images; stays below any patch filter.
    Sparse,
    /// Large blob with one big central lumen. The lumen is wide enough that
    /// its core is farther from stained tissue than a small receptive field
    /// can see, so filling it requires long-range context.
    Hollow,
    /// Mid-sized blob with a few small pale spots.
    Textured,
}

fn random_blob(rng: &mut ChaCha8Rng, size: f64, role: BlobRole) -> Blob {
    let radius = match role {
        BlobRole::Sparse => rng.gen_range(6.0..10.0),
        BlobRole::Hollow => rng.gen_range(0.28 * size..0.36 * size),
        BlobRole::Textured => rng.gen_range(0.14 * size..0.22 * size),
    };
    let margin = (radius * 1.3 + 2.0).min(size / 2.0 - 1.0);
    let purple = rng.gen_bool(0.5);
    let color = if purple {
        (
            rng.gen_range(135.0..165.0),
            rng.gen_range(70.0..110.0),
            rng.gen_range(155.0..190.0),
        )
    } else {
        (
            rng.gen_range(210.0..235.0),
            rng.gen_range(120.0..160.0),
            rng.gen_range(160.0..190.0),
        )
    };
    let cx = rng.gen_range(margin..size - margin);
    let cy = rng.gen_range(margin..size - margin);
    // Pale interior spots stay in the deep interior: the wobble never dips
    // below 0.83·radius, so center distance + lumen radius ≤ 0.78·radius
    // keeps them strictly inside the stained boundary.
    let lumina = match role {
        BlobRole::Sparse => Vec::new(),
        BlobRole::Hollow => {
            let lr = radius * rng.gen_range(0.58..0.68);
            let dist = rng.gen_range(0.0..0.08 * radius);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            vec![Lumen {
                cx: cx + dist * theta.cos(),
                cy: cy + dist * theta.sin(),
                radius: lr,
            }]
        }
        BlobRole::Textured => (0..rng.gen_range(1..=2))
            .map(|_| {
                let lr = radius * rng.gen_range(0.10..0.22);
                let dist = rng.gen_range(0.0..0.78 * radius - lr);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                Lumen {
                    cx: cx + dist * theta.cos(),
                    cy: cy + dist * theta.sin(),
                    radius: lr,
                }
            })
            .collect(),
    };
    Blob {
        cx,
        cy,
        radius,
        amps: [
            rng.gen_range(0.02..0.08),
            rng.gen_range(0.01..0.05),
            rng.gen_range(0.01..0.04),
        ],
        phases: [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ],
        color,
        lumina,
    }
}

/// Deterministically generate one image/mask pair of the dataset.
fn generate_one(index: usize, size: usize, seed: u64) -> (ImageRgb, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let sparse = index % 5 == 4;
    let s = size as f64;

    let base = (
        rng.gen_range(244..=250i32),
        rng.gen_range(240..=247i32),
        rng.gen_range(243..=250i32),
    );
    let blobs: Vec<Blob> = if sparse {
        vec![random_blob(&mut rng, s, BlobRole::Sparse)]
    } else {
        // The hollow blob goes last: the pixel loop gives the last blob
        // priority, so overlapping textured blobs never stain its lumen and
        // the pale core keeps its full width.
        let extra = rng.gen_range(1..=2);
        let mut v: Vec<Blob> = (0..extra)
            .map(|_| random_blob(&mut rng, s, BlobRole::Textured))
            .collect();
        v.push(random_blob(&mut rng, s, BlobRole::Hollow));
        v
    };

    let mut img = ImageRgb::filled(size, size, (0, 0, 0)).expect("positive size");
    let mut mask = Tensor::zeros(&[1, 1, size, size]);
    for y in 0..size {
        for x in 0..size {
            let hit = blobs
                .iter()
                .rev()
                .find(|b| b.contains(x as f64 + 0.5, y as f64 + 0.5));
            let rgb = match hit {
                None => {
                    // Pale tint, every channel kept at 232 or above.
                    let j = rng.gen_range(-4..=3);
                    (
                        (base.0 + j).clamp(232, 255) as u8,
                        (base.1 + j).clamp(232, 255) as u8,
                        (base.2 + j).clamp(232, 255) as u8,
                    )
                }
                Some(b) => {
                    mask.data_mut()[y * size + x] = 1.0;
                    if b.in_lumen(x as f64 + 0.5, y as f64 + 0.5) {
                        // Pale interior spot: background palette, but still
                        // inside the labeled blob.
                        let j = rng.gen_range(-4..=3);
                        (
                            (base.0 + j).clamp(232, 255) as u8,
                            (base.1 + j).clamp(232, 255) as u8,
                            (base.2 + j).clamp(232, 255) as u8,
                        )
                    } else {
                        let speckle = rng.gen_bool(0.08);
                        let scale = if speckle { 0.55 } else { 1.0 };
                        let j = rng.gen_range(-18.0..18.0);
                        let ch = |c: f64| ((c + j) * scale).clamp(30.0, 219.0) as u8;
                        (ch(b.color.0), ch(b.color.1), ch(b.color.2))
                    }
                }
            };
            img.set(x, y, rgb);
        }
    }
    (img, mask)
}

/// Generate `count` image/mask pairs under `dir` plus a manifest file.
/// Layout: `images/img_NNN.png`, `masks/mask_NNN.png`, `manifest.txt` with
/// one space-separated relative path pair per line.
pub fn generate_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::InvalidArg("dataset needs at least one image".into()));
    }
    if size < 16 || size % 8 != 0 {
        return Err(Error::InvalidArg(format!(
            "image size must be a multiple of 8 and at least 16, got {size}"
        )));
    }
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let (img, mask) = generate_one(i, size, seed);
        let img_rel = format!("images/img_{i:03}.png");
        let mask_rel = format!("masks/mask_{i:03}.png");
        save_image_png(&img, &dir.join(&img_rel))?;
        save_mask_png(&mask, &dir.join(&mask_rel))?;
        manifest.push_str(&format!("{img_rel} {mask_rel}\n"));
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Read a manifest of space-separated image/mask path pairs, resolved
/// relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(img), Some(mask), None) => {
                pairs.push((base.join(img), base.join(mask)));
            }
            _ => {
                return Err(Error::Dataset(format!(
                    "manifest {} line {}: expected 'image mask', got '{line}'",
                    path.display(),
                    ln + 1
                )))
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest {} lists no image/mask pairs",
            path.display()
        )));
    }
    Ok(pairs)
}

/// True for the deterministic sparse cadence used by the generator.
pub fn is_sparse_index(index: usize) -> bool {
    index % 5 == 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::load_image_png;
    use crate::patch::{extract_training_patches, is_tissue};

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(a.path(), 4, 64, 7).unwrap();
        generate_dataset(b.path(), 4, 64, 7).unwrap();
        for i in 0..4 {
            for sub in [format!("images/img_{i:03}.png"), format!("masks/mask_{i:03}.png")] {
                let x = fs::read(a.path().join(&sub)).unwrap();
                let y = fs::read(b.path().join(&sub)).unwrap();
                assert_eq!(x, y, "{sub} differs between equal-seed runs");
            }
        }
        let c = tempfile::tempdir().unwrap();
        generate_dataset(c.path(), 1, 64, 8).unwrap();
        assert_ne!(
            fs::read(a.path().join("images/img_000.png")).unwrap(),
            fs::read(c.path().join("images/img_000.png")).unwrap(),
            "different seeds must differ"
        );
    }

    #[test]
    fn masks_relate_to_tissue_predicate() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 6, 64, 3).unwrap();
        let pairs = read_manifest(&dir.path().join("manifest.txt")).unwrap();
        for (i, (img_path, mask_path)) in pairs.iter().enumerate() {
            let img = load_image_png(img_path).unwrap();
            let mask = crate::image::load_mask_png(mask_path).unwrap();
            let mut foreground = 0usize;
            let mut pale_labeled = 0usize;
            for y in 0..64 {
                for x in 0..64 {
                    let (r, g, b) = img.get(x, y);
                    let m = mask.data()[y * 64 + x] == 1.0;
                    // Stained color implies labeled; the converse fails only
                    // at the pale interior spots dense blobs carry.
                    if is_tissue(r, g, b) {
                        assert!(m, "stained pixel outside the mask at ({x},{y})");
                    }
                    if m {
                        foreground += 1;
                        if !is_tissue(r, g, b) {
                            pale_labeled += 1;
                        }
                    }
                }
            }
            assert!(foreground > 0, "every generated image has some foreground");
            if is_sparse_index(i) {
                assert_eq!(pale_labeled, 0, "sparse blobs carry no pale spots");
            } else {
                assert!(
                    pale_labeled > 0,
                    "dense image {i} should contain pale labeled spots"
                );
                assert!(
                    (pale_labeled as f64) < 0.5 * foreground as f64,
                    "pale spots must stay a minority of the blob area"
                );
            }
        }
    }

    #[test]
    fn sparse_images_survive_no_patch_filter() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 10, 128, 11).unwrap();
        let pairs = read_manifest(&dir.path().join("manifest.txt")).unwrap();
        let mut dense_patches = 0usize;
        for (i, (img_path, mask_path)) in pairs.iter().enumerate() {
            let img = load_image_png(img_path).unwrap();
            let mask = crate::image::load_mask_png(mask_path).unwrap();
            let got = extract_training_patches(&img, &mask, 64, 0.30, 220).unwrap();
            if is_sparse_index(i) {
                assert!(got.is_empty(), "sparse image {i} leaked {} patches", got.len());
            } else {
                dense_patches += got.len();
            }
        }
        assert!(dense_patches >= 8, "dense images too thin: {dense_patches} patches");
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(dir.path(), 3, 64, 1).unwrap();
        let pairs = read_manifest(&manifest).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|(i, m)| i.exists() && m.exists()));

        let bad = dir.path().join("bad.txt");
        fs::write(&bad, "only_one_path\n").unwrap();
        assert!(read_manifest(&bad).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(dir.path(), 0, 64, 1).is_err());
        assert!(generate_dataset(dir.path(), 1, 63, 1).is_err());
    }
}
