//! Flat key=value run configuration covering every tunable of the pipeline.
//! Unknown keys are rejected; defaults follow the reference training recipe
//! (512-pixel patches with 50% overlap, 30% tissue threshold, Adam at 1e-3
//! with cosine annealing, batch size 4, 100 epochs, 0.5 threshold).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Transform;
use crate::layers::SACU_DILATIONS;
use crate::model::{ModelConfig, Variant};
use crate::stitch::Fill;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub variant: Variant,
    pub base_width: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub dropout_rate: f32,
    pub sacu_dilations: Vec<usize>,
    pub patch_size: usize,
    pub min_tissue: f64,
    pub white_threshold: u8,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tile_size: usize,
    pub threshold: f32,
    pub fill: Fill,
    pub ensemble_transforms: Vec<Transform>,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::AtResUnet,
            base_width: 8,
            depth: 3,
            in_channels: 3,
            dropout_rate: 0.25,
            sacu_dilations: SACU_DILATIONS.to_vec(),
            patch_size: 512,
            min_tissue: 0.30,
            white_threshold: 220,
            lr: 0.001,
            epochs: 100,
            batch_size: 4,
            tile_size: 512,
            threshold: 0.5,
            fill: Fill::Zero,
            ensemble_transforms: Transform::ALL.to_vec(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            base_width: self.base_width,
            depth: self.depth,
            in_channels: self.in_channels,
            out_channels: 1,
            dropout_rate: self.dropout_rate,
            patch_size: self.patch_size,
            sacu_dilations: self.sacu_dilations.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.min_tissue) {
            return Err(Error::Config(format!(
                "min_tissue must lie in [0,1], got {}",
                self.min_tissue
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie strictly inside (0,1), got {}",
                self.threshold
            )));
        }
        if self.tile_size < 2 || self.tile_size % 2 != 0 {
            return Err(Error::Config(format!(
                "tile_size must be even and at least 2, got {}",
                self.tile_size
            )));
        }
        if self.ensemble_transforms.is_empty() {
            return Err(Error::Config("ensemble_transforms must not be empty".into()));
        }
        Ok(())
    }

    /// Parse config text over the defaults. Every key may appear once.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", ln + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("duplicate config key '{k}'")));
            }
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Apply a single override using the same `key=value` grammar as the
    /// config file.
    pub fn set(&mut self, entry: &str) -> Result<()> {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be key=value, got '{entry}'")))?;
        self.apply(key.trim(), value.trim())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: '{value}'")))
        }
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "base_width" => self.base_width = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "sacu_dilations" => {
                let mut ds = Vec::new();
                for part in value.split(',') {
                    ds.push(num::<usize>(key, part.trim())?);
                }
                self.sacu_dilations = ds;
            }
            "patch_size" => self.patch_size = num(key, value)?,
            "min_tissue" => self.min_tissue = num(key, value)?,
            "white_threshold" => self.white_threshold = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "tile_size" => self.tile_size = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "fill" => self.fill = Fill::parse(value)?,
            "ensemble_transforms" => {
                let mut ts = Vec::new();
                for part in value.split(',') {
                    ts.push(Transform::parse(part.trim())?);
                }
                self.ensemble_transforms = ts;
            }
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let dilations: Vec<String> =
            self.sacu_dilations.iter().map(|d| d.to_string()).collect();
        let transforms: Vec<&str> =
            self.ensemble_transforms.iter().map(|t| t.as_str()).collect();
        format!(
            "variant={}\nbase_width={}\ndepth={}\nin_channels={}\ndropout_rate={}\n\
             sacu_dilations={}\npatch_size={}\nmin_tissue={}\nwhite_threshold={}\n\
             lr={}\nepochs={}\nbatch_size={}\ntile_size={}\nthreshold={}\nfill={}\n\
             ensemble_transforms={}\ncheckpoint_every={}\nseed={}\n",
            self.variant.as_str(),
            self.base_width,
            self.depth,
            self.in_channels,
            self.dropout_rate,
            dilations.join(","),
            self.patch_size,
            self.min_tissue,
            self.white_threshold,
            self.lr,
            self.epochs,
            self.batch_size,
            self.tile_size,
            self.threshold,
            self.fill.as_str(),
            transforms.join(","),
            self.checkpoint_every,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.patch_size, 512);
        assert_eq!(c.min_tissue, 0.30);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.dropout_rate, 0.25);
        assert_eq!(c.sacu_dilations, vec![1, 2, 4, 8, 16, 32]);
        assert_eq!(c.variant, Variant::AtResUnet);
        c.validate().unwrap();
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "# desk run\nvariant = unet\npatch_size=64\nepochs = 12\nseed=5\n\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.variant, Variant::Unet);
        assert_eq!(c.patch_size, 64);
        assert_eq!(c.epochs, 12);
        assert_eq!(c.seed, 5);
        assert_eq!(c.batch_size, 4, "untouched keys keep defaults");
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert!(RunConfig::parse("learning_rate=0.1\n").is_err());
        assert!(RunConfig::parse("epochs=5\nepochs=6\n").is_err());
        assert!(RunConfig::parse("epochs=banana\n").is_err());
        assert!(RunConfig::parse("threshold=1.5\n").is_err());
        assert!(RunConfig::parse("patch_size=100\n").is_err(), "not a power of two");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.variant = Variant::ResUnet;
        c.patch_size = 64;
        c.tile_size = 128;
        c.epochs = 7;
        c.ensemble_transforms = vec![Transform::Identity, Transform::HFlip];
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.variant, Variant::ResUnet);
        assert_eq!(back.ensemble_transforms.len(), 2);
    }
}
