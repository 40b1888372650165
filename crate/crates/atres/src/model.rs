//! Encoder-decoder segmentation networks.
//!
//! Three nested variants share one skeleton:
//!
//! * `Unet`: per encoder level conv3x3 -> relu -> batchnorm -> dropout ->
//!   maxpool, a bottleneck at 1/2^depth resolution, and a decoder of
//!   upsample -> concat skip -> conv3x3 -> relu, finished by a 1x1 conv and
//!   sigmoid.
//! * `ResUnet`: adds an input-to-output residual around each encoder-side
//!   conv block (1x1 projection when widths differ).
//! * `AtResUnet`: additionally inserts a series dilated-convolution unit
//!   plus a channel-reducing 1x1 conv at every level, bottleneck and decoder
//!   included.
//!
//! Channel width doubles per level from `base_width`. The skip connection
//! is the full encoder level output right before pooling.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::{
    init_rng, BatchNorm2d, Conv2d, ParamKind, Params, Sacu, SACU_DILATIONS,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Unet,
    ResUnet,
    AtResUnet,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::ResUnet => "resunet",
            Variant::AtResUnet => "atresunet",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "unet" => Ok(Variant::Unet),
            "resunet" => Ok(Variant::ResUnet),
            "atresunet" => Ok(Variant::AtResUnet),
            other => Err(Error::InvalidArg(format!(
                "unknown variant '{other}' (expected unet, resunet or atresunet)"
            ))),
        }
    }

    fn has_residual(&self) -> bool {
        !matches!(self, Variant::Unet)
    }

    fn has_sacu(&self) -> bool {
        matches!(self, Variant::AtResUnet)
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_width: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f32,
    pub patch_size: usize,
    pub sacu_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::AtResUnet,
            base_width: 8,
            depth: 3,
            in_channels: 3,
            out_channels: 1,
            dropout_rate: 0.25,
            patch_size: 512,
            sacu_dilations: SACU_DILATIONS.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 {
            return Err(Error::InvalidArg(
                "base_width and depth must be positive".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArg("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArg(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.sacu_dilations.is_empty() || self.sacu_dilations.contains(&0) {
            return Err(Error::InvalidArg(
                "dilation schedule must be a non-empty list of positive integers".into(),
            ));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < (1 << self.depth) {
            return Err(Error::InvalidArg(format!(
                "patch_size must be a power of two no smaller than {}, got {}",
                1usize << self.depth,
                self.patch_size
            )));
        }
        Ok(())
    }
}

enum Residual {
    None,
    Identity,
    Proj(Conv2d),
}

/// Encoder level and bottleneck block: conv3x3 -> relu, optional series unit
/// with 1x1 reduction, optional residual from the block input, then batch
/// norm and (encoder only) dropout. Pooling is applied by the caller so the
/// pre-pool output can double as the skip connection.
struct EncoderLevel {
    conv: Conv2d,
    sacu: Option<Sacu>,
    reduce: Option<Conv2d>,
    residual: Residual,
    bn: BatchNorm2d,
}

impl EncoderLevel {
    fn build(
        name: &str,
        cfg: &ModelConfig,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2d::init(format!("{name}.conv"), c_in, c_out, 3, 1, rng);
        let (sacu, reduce) = if cfg.variant.has_sacu() {
            (
                Some(Sacu::init(&format!("{name}.sacu"), c_out, &cfg.sacu_dilations, rng)),
                Some(Conv2d::init(format!("{name}.reduce"), c_out, c_out, 1, 1, rng)),
            )
        } else {
            (None, None)
        };
        let residual = if !cfg.variant.has_residual() {
            Residual::None
        } else if c_in == c_out {
            Residual::Identity
        } else {
            Residual::Proj(Conv2d::init(format!("{name}.res"), c_in, c_out, 1, 1, rng))
        };
        EncoderLevel { conv, sacu, reduce, residual, bn: BatchNorm2d::init(format!("{name}.bn"), c_out) }
    }

    fn forward<E: Exec>(&mut self, ex: &mut E, x: E::V, dropout_rate: f32) -> Result<E::V> {
        let shortcut = x.clone();
        let mut y = ex.conv2d(x, &self.conv)?;
        y = ex.relu(y)?;
        if let Some(sacu) = &mut self.sacu {
            y = sacu.forward(ex, y)?;
            let reduce = self.reduce.as_ref().expect("series unit always pairs with 1x1");
            y = ex.conv2d(y, reduce)?;
            y = ex.relu(y)?;
        }
        y = match &self.residual {
            Residual::None => y,
            Residual::Identity => ex.add(y, shortcut)?,
            Residual::Proj(p) => {
                let s = ex.conv2d(shortcut, p)?;
                ex.add(y, s)?
            }
        };
        y = ex.batchnorm(y, &mut self.bn)?;
        ex.dropout(y, dropout_rate)
    }
}

impl Params for EncoderLevel {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.conv.visit(f);
        if let Some(s) = &self.sacu {
            s.visit(f);
        }
        if let Some(r) = &self.reduce {
            r.visit(f);
        }
        if let Residual::Proj(p) = &self.residual {
            p.visit(f);
        }
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.conv.visit_mut(f);
        if let Some(s) = &mut self.sacu {
            s.visit_mut(f);
        }
        if let Some(r) = &mut self.reduce {
            r.visit_mut(f);
        }
        if let Residual::Proj(p) = &mut self.residual {
            p.visit_mut(f);
        }
        self.bn.visit_mut(f);
    }
}

/// Decoder level: upsample -> concat skip -> conv3x3 -> relu, plus the
/// series unit and 1x1 reduction in the dilated variant.
struct DecoderLevel {
    conv: Conv2d,
    sacu: Option<Sacu>,
    reduce: Option<Conv2d>,
}

impl DecoderLevel {
    fn build(
        name: &str,
        cfg: &ModelConfig,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2d::init(format!("{name}.conv"), c_in, c_out, 3, 1, rng);
        let (sacu, reduce) = if cfg.variant.has_sacu() {
            (
                Some(Sacu::init(&format!("{name}.sacu"), c_out, &cfg.sacu_dilations, rng)),
                Some(Conv2d::init(format!("{name}.reduce"), c_out, c_out, 1, 1, rng)),
            )
        } else {
            (None, None)
        };
        DecoderLevel { conv, sacu, reduce }
    }

    fn forward<E: Exec>(&mut self, ex: &mut E, x: E::V, skip: E::V) -> Result<E::V> {
        let up = ex.upsample2x(x)?;
        let cat = ex.concat(up, skip)?;
        let mut y = ex.conv2d(cat, &self.conv)?;
        y = ex.relu(y)?;
        if let Some(sacu) = &mut self.sacu {
            y = sacu.forward(ex, y)?;
            let reduce = self.reduce.as_ref().expect("series unit always pairs with 1x1");
            y = ex.conv2d(y, reduce)?;
            y = ex.relu(y)?;
        }
        Ok(y)
    }
}

impl Params for DecoderLevel {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.conv.visit(f);
        if let Some(s) = &self.sacu {
            s.visit(f);
        }
        if let Some(r) = &self.reduce {
            r.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.conv.visit_mut(f);
        if let Some(s) = &mut self.sacu {
            s.visit_mut(f);
        }
        if let Some(r) = &mut self.reduce {
            r.visit_mut(f);
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    enc: Vec<EncoderLevel>,
    bottleneck: EncoderLevel,
    dec: Vec<DecoderLevel>,
    head: Conv2d,
}

impl Model {
    /// Build a model with seeded He-normal initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut enc = Vec::with_capacity(config.depth);
        for lvl in 0..config.depth {
            let c_in = if lvl == 0 { config.in_channels } else { config.width(lvl - 1) };
            enc.push(EncoderLevel::build(
                &format!("enc{lvl}"),
                &config,
                c_in,
                config.width(lvl),
                &mut rng,
            ));
        }
        let bottleneck = EncoderLevel::build(
            "bott",
            &config,
            config.width(config.depth - 1),
            config.width(config.depth),
            &mut rng,
        );
        let mut dec = Vec::with_capacity(config.depth);
        for lvl in (0..config.depth).rev() {
            dec.push(DecoderLevel::build(
                &format!("dec{lvl}"),
                &config,
                config.width(lvl + 1) + config.width(lvl),
                config.width(lvl),
                &mut rng,
            ));
        }
        let head = Conv2d::init("head", config.base_width, config.out_channels, 1, 1, &mut rng);
        Ok(Model { config, enc, bottleneck, dec, head })
    }

    /// Run the network. Output spatial size equals input size; values are
    /// sigmoid probabilities in [0, 1].
    pub fn forward<E: Exec>(&mut self, ex: &mut E, x: E::V) -> Result<E::V> {
        let shape = ex.shape(&x);
        let (c, h, w) = match shape.as_slice() {
            &[_, c, h, w] => (c, h, w),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "model input must be 4-d NCHW, got {s:?}"
                )))
            }
        };
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let divisor = 1usize << self.config.depth;
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::InvalidArg(format!(
                "input spatial size {h}x{w} must be divisible by {divisor}"
            )));
        }

        let dropout = self.config.dropout_rate;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for lvl in &mut self.enc {
            let pre_pool = lvl.forward(ex, cur, dropout)?;
            cur = ex.maxpool2x2(pre_pool.clone())?;
            skips.push(pre_pool);
        }
        cur = self.bottleneck.forward(ex, cur, 0.0)?;
        for dl in &mut self.dec {
            let skip = skips.pop().expect("one skip per decoder level");
            cur = dl.forward(ex, cur, skip)?;
        }
        let logits = ex.conv2d(cur, &self.head)?;
        ex.sigmoid(logits)
    }

    /// Deep copy (parameters, statistics and config).
    pub fn clone_model(&self) -> Model {
        Model {
            config: self.config.clone(),
            enc: self
                .enc
                .iter()
                .map(|l| EncoderLevel {
                    conv: l.conv.clone(),
                    sacu: l.sacu.clone(),
                    reduce: l.reduce.clone(),
                    residual: match &l.residual {
                        Residual::None => Residual::None,
                        Residual::Identity => Residual::Identity,
                        Residual::Proj(p) => Residual::Proj(p.clone()),
                    },
                    bn: l.bn.clone(),
                })
                .collect(),
            bottleneck: EncoderLevel {
                conv: self.bottleneck.conv.clone(),
                sacu: self.bottleneck.sacu.clone(),
                reduce: self.bottleneck.reduce.clone(),
                residual: match &self.bottleneck.residual {
                    Residual::None => Residual::None,
                    Residual::Identity => Residual::Identity,
                    Residual::Proj(p) => Residual::Proj(p.clone()),
                },
                bn: self.bottleneck.bn.clone(),
            },
            dec: self
                .dec
                .iter()
                .map(|l| DecoderLevel {
                    conv: l.conv.clone(),
                    sacu: l.sacu.clone(),
                    reduce: l.reduce.clone(),
                })
                .collect(),
            head: self.head.clone(),
        }
    }

    /// Names of all parameters (trainable and running stats) in visit order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _, _| names.push(name.to_string()));
        names
    }
}

impl Params for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for lvl in &self.enc {
            lvl.visit(f);
        }
        self.bottleneck.visit(f);
        for lvl in &self.dec {
            lvl.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for lvl in &mut self.enc {
            lvl.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        for lvl in &mut self.dec {
            lvl.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
