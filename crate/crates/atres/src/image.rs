//! RGB image container, PNG input/output and the flip/rotation transform
//! group shared by augmentation and self-ensemble inference.
//!
//! Masks are 8-bit PNGs holding exactly 0 or 255; probability maps are
//! 16-bit grayscale PNGs with `value = round(p · 65535)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArg("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidArg(format!(
                "image buffer holds {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(ImageRgb { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: (u8, u8, u8)) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&[rgb.0, rgb.1, rgb.2]);
        }
        ImageRgb::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = (y * self.width + x) * 3;
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: (u8, u8, u8)) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb.0;
        self.pixels[i + 1] = rgb.1;
        self.pixels[i + 2] = rgb.2;
    }

    /// Normalized NCHW tensor `[1, 3, H, W]` with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = self.get(x, y);
                let at = y * w + x;
                data[at] = f32::from(r) / 255.0;
                data[w * h + at] = f32::from(g) / 255.0;
                data[2 * w * h + at] = f32::from(b) / 255.0;
            }
        }
        Tensor::new(vec![1, 3, h, w], data).expect("buffer sized to shape")
    }
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

pub fn load_image_png(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageRgb::new(w, h, img.into_raw())
}

pub fn save_image_png(img: &ImageRgb, path: &Path) -> Result<()> {
    let buf: image::RgbImage = image::ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.pixels.clone(),
    )
    .expect("buffer sized to dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Load a binary mask PNG (values exactly 0 or 255) as `[1, 1, H, W]` in {0, 1}.
pub fn load_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for &v in img.as_raw() {
        match v {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    message: format!("mask must contain only 0 and 255, found {other}"),
                })
            }
        }
    }
    Tensor::new(vec![1, 1, h, w], data)
}

/// Save a binary `[1, 1, H, W]` map as an 8-bit PNG holding 0/255.
pub fn save_mask_png(mask: &Tensor, path: &Path) -> Result<()> {
    let (n, c, h, w) = mask.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "mask must be [1,1,H,W], got {:?}",
            mask.shape()
        )));
    }
    let mut bytes = Vec::with_capacity(h * w);
    for &v in mask.data() {
        if v == 0.0 {
            bytes.push(0u8);
        } else if v == 1.0 {
            bytes.push(255u8);
        } else {
            return Err(Error::InvalidArg(format!(
                "binary mask contains non-binary value {v}"
            )));
        }
    }
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Save a probability `[1, 1, H, W]` map as 16-bit grayscale PNG.
pub fn save_prob_png(map: &Tensor, path: &Path) -> Result<()> {
    let (n, c, h, w) = map.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "probability map must be [1,1,H,W], got {:?}",
            map.shape()
        )));
    }
    let mut words = Vec::with_capacity(h * w);
    for &v in map.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArg(format!(
                "probability map value {v} outside [0,1]"
            )));
        }
        words.push((f64::from(v) * 65535.0).round() as u16);
    }
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, words).expect("sized buffer");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Load a 16-bit grayscale PNG back into `[1, 1, H, W]` with values `/65535`.
pub fn load_prob_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img
        .as_raw()
        .iter()
        .map(|&v| (f64::from(v) / 65535.0) as f32)
        .collect();
    Tensor::new(vec![1, 1, h, w], data)
}

/// The six geometric transforms used for augmentation and self-ensemble.
/// Rotations are clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::HFlip,
        Transform::VFlip,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
        }
    }

    pub fn parse(s: &str) -> Result<Transform> {
        Transform::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArg(format!("unknown transform '{s}'")))
    }

    pub fn inverse(&self) -> Transform {
        match self {
            Transform::Rot90 => Transform::Rot270,
            Transform::Rot270 => Transform::Rot90,
            other => *other,
        }
    }

    /// Output (height, width) for a source of (height, width).
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rot90 | Transform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source (row, col) feeding destination (row, col). `h`/`w` are the
    /// SOURCE dimensions.
    fn src_index(&self, dr: usize, dc: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (dr, dc),
            Transform::Rot90 => (h - 1 - dc, dr),
            Transform::Rot180 => (h - 1 - dr, w - 1 - dc),
            Transform::Rot270 => (dc, w - 1 - dr),
            Transform::HFlip => (dr, w - 1 - dc),
            Transform::VFlip => (h - 1 - dr, dc),
        }
    }
}

/// Qualitative-inspection overlay: the source image with predicted-positive
/// pixels blended halfway toward red.
pub fn overlay_mask(img: &ImageRgb, mask: &Tensor) -> Result<ImageRgb> {
    let (h, w) = (img.height, img.width);
    if mask.shape() != [1, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "overlay mask must be [1,1,{h},{w}], got {:?}",
            mask.shape()
        )));
    }
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            if mask.data()[r * w + c] != 0.0 {
                let (pr, pg, pb) = img.get(c, r);
                out.set(
                    c,
                    r,
                    (
                        ((u16::from(pr) + 255) / 2) as u8,
                        (u16::from(pg) / 2) as u8,
                        (u16::from(pb) / 2) as u8,
                    ),
                );
            }
        }
    }
    Ok(out)
}

pub fn transform_image(img: &ImageRgb, t: Transform) -> ImageRgb {
    let (h, w) = (img.height, img.width);
    let (oh, ow) = t.out_dims(h, w);
    let mut out = vec![0u8; oh * ow * 3];
    for dr in 0..oh {
        for dc in 0..ow {
            let (sr, sc) = t.src_index(dr, dc, h, w);
            let s = (sr * w + sc) * 3;
            let d = (dr * ow + dc) * 3;
            out[d..d + 3].copy_from_slice(&img.pixels[s..s + 3]);
        }
    }
    ImageRgb { width: ow, height: oh, pixels: out }
}

/// Apply a transform to the two trailing (spatial) axes of a tensor of any
/// leading shape, e.g. `[N, C, H, W]` maps and patches.
pub fn transform_map(map: &Tensor, t: Transform) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "transform needs at least 2 axes, got {shape:?}"
        )));
    }
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let (oh, ow) = t.out_dims(h, w);
    let mut out_shape = shape.to_vec();
    let rank = out_shape.len();
    out_shape[rank - 2] = oh;
    out_shape[rank - 1] = ow;
    let mut out = vec![0.0f32; planes * oh * ow];
    let src = map.data();
    for p in 0..planes {
        let sbase = p * h * w;
        let dbase = p * oh * ow;
        for dr in 0..oh {
            for dc in 0..ow {
                let (sr, sc) = t.src_index(dr, dc, h, w);
                out[dbase + dr * ow + dc] = src[sbase + sr * w + sc];
            }
        }
    }
    Tensor::new(out_shape, out)
}
