//! Trainable layers and the series dilated-convolution unit.
//!
//! Layers own their parameters as plain tensors plus a full dotted path name
//! assigned at build time (e.g. `enc0.sacu.s3.conv`). Parameter enumeration
//! walks structures in construction order, so optimizer state, checkpoints
//! and gradient lookups all agree on one stable naming scheme.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::exec::Exec;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Default dilation schedule of the series unit.
pub const SACU_DILATIONS: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and checked by gradcheck.
    Trainable,
    /// Batch-norm running statistics: saved/restored but never differentiated.
    RunningStat,
}

/// Stable-order parameter traversal.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));
}

/// Number of trainable scalars reachable from a parameter holder.
pub fn trainable_count(p: &dyn Params) -> usize {
    let mut n = 0;
    p.visit(&mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            n += t.numel();
        }
    });
    n
}

/// 2-d convolution layer; square kernel, stride 1, zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl Conv2d {
    /// He-normal weight init, zero bias.
    pub fn init(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f32).sqrt();
        let dist = Normal::new(0.0f32, std).expect("std is positive and finite");
        Conv2d {
            name: name.into(),
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| dist.sample(rng)),
            bias: Tensor::zeros(&[c_out]),
            dilation,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Zero padding that preserves spatial size at stride 1.
    pub fn same_pad(&self) -> usize {
        self.dilation * (self.kernel_size() - 1) / 2
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{}.weight", self.name), ParamKind::Trainable, &self.weight);
        f(&format!("{}.bias", self.name), ParamKind::Trainable, &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{}.weight", self.name), ParamKind::Trainable, &mut self.weight);
        f(&format!("{}.bias", self.name), ParamKind::Trainable, &mut self.bias);
    }
}

/// Per-channel batch normalization with running statistics for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn init(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[f32], var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

impl Params for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{}.gamma", self.name), ParamKind::Trainable, &self.gamma);
        f(&format!("{}.beta", self.name), ParamKind::Trainable, &self.beta);
        f(&format!("{}.running_mean", self.name), ParamKind::RunningStat, &self.running_mean);
        f(&format!("{}.running_var", self.name), ParamKind::RunningStat, &self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), ParamKind::Trainable, &mut self.gamma);
        f(&format!("{}.beta", self.name), ParamKind::Trainable, &mut self.beta);
        f(&format!("{}.running_mean", self.name), ParamKind::RunningStat, &mut self.running_mean);
        f(&format!("{}.running_var", self.name), ParamKind::RunningStat, &mut self.running_var);
    }
}

/// One step of the series unit: a dilated 3x3 conv with batch norm and relu.
#[derive(Clone, Debug)]
pub struct SacuBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

/// Series of dilated residual convolutions applied at one width:
/// `x <- relu(bn(conv_d(x))) + x` for each dilation `d` in the schedule.
/// Width is preserved throughout, and with zero conv weights every step is
/// the identity.
#[derive(Clone, Debug)]
pub struct Sacu {
    pub blocks: Vec<SacuBlock>,
}

impl Sacu {
    pub fn init(
        name: &str,
        channels: usize,
        dilations: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| SacuBlock {
                conv: Conv2d::init(format!("{name}.s{i}.conv"), channels, channels, 3, d, rng),
                bn: BatchNorm2d::init(format!("{name}.s{i}.bn"), channels),
            })
            .collect();
        Sacu { blocks }
    }

    pub fn forward<E: Exec>(&mut self, ex: &mut E, x: E::V) -> Result<E::V> {
        let mut cur = x;
        for blk in &mut self.blocks {
            let y = ex.conv2d(cur.clone(), &blk.conv)?;
            let y = ex.batchnorm(y, &mut blk.bn)?;
            let y = ex.relu(y)?;
            cur = ex.add(y, cur)?;
        }
        Ok(cur)
    }

    /// Chebyshev radius of the unit's receptive field around one output
    /// pixel: each step widens it by `dilation * (k-1)/2` on every side.
    pub fn receptive_radius(&self) -> usize {
        self.blocks.iter().map(|b| b.conv.same_pad()).sum()
    }
}

impl Params for Sacu {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for blk in &self.blocks {
            blk.conv.visit(f);
            blk.bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for blk in &mut self.blocks {
            blk.conv.visit_mut(f);
            blk.bn.visit_mut(f);
        }
    }
}

/// Set every trainable tensor reachable from `p` to zero.
pub fn zero_trainable(p: &mut dyn Params) {
    p.visit_mut(&mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            t.data_mut().fill(0.0);
        }
    });
}

/// Seeded RNG used for all parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
