//! Execution backends for the network graph.
//!
//! Model code is generic over [`Exec`], so one description of the
//! architecture serves both execution styles:
//!
//! * [`TapeExec`] records every op on an autodiff tape (training and
//!   anything else that needs gradients). In train mode it uses batch
//!   statistics, updates batch-norm running estimates and applies dropout;
//!   in eval mode it uses running statistics and no dropout.
//! * [`EvalExec`] computes tensors directly with no history, which keeps
//!   inference over large tiles at a flat memory footprint. Always eval
//!   semantics.
//!
//! Both backends reject non-finite values op by op.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub trait Exec {
    type V: Clone;

    /// Bring an input tensor into this backend.
    fn source(&mut self, t: Tensor) -> Result<Self::V>;
    fn shape(&self, v: &Self::V) -> Vec<usize>;
    fn conv2d(&mut self, x: Self::V, layer: &Conv2d) -> Result<Self::V>;
    fn batchnorm(&mut self, x: Self::V, layer: &mut BatchNorm2d) -> Result<Self::V>;
    fn relu(&mut self, x: Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: Self::V) -> Result<Self::V>;
    fn maxpool2x2(&mut self, x: Self::V) -> Result<Self::V>;
    fn upsample2x(&mut self, x: Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    /// Inverted dropout at the given rate; identity in eval semantics.
    fn dropout(&mut self, x: Self::V, rate: f32) -> Result<Self::V>;
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
    /// Eval semantics, but the source tensor tracks gradients — for input
    /// sensitivity probes such as receptive-field measurement.
    Probe,
}

/// Tape-recording backend. Parameters become named leaves on first use; the
/// name-to-node map lets the training step pair gradients with parameters
/// after `backward`.
pub struct TapeExec<'a> {
    tape: &'a mut Tape,
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    params: HashMap<String, NodeId>,
}

impl<'a> TapeExec<'a> {
    /// Training semantics: batch statistics, running-stat updates, dropout
    /// driven by `rng`, gradients for every parameter leaf.
    pub fn train(tape: &'a mut Tape, rng: &'a mut ChaCha8Rng) -> Self {
        TapeExec { tape, mode: Mode::Train, rng: Some(rng), params: HashMap::new() }
    }

    /// Eval semantics on a tape (used to cross-check the direct backend).
    pub fn eval(tape: &'a mut Tape) -> Self {
        TapeExec { tape, mode: Mode::Eval, rng: None, params: HashMap::new() }
    }

    /// Eval semantics with a gradient-tracked source: backward from a scalar
    /// of the output yields d(out)/d(input), whose support is the receptive
    /// field. Parameters stay gradient-free.
    pub fn probe(tape: &'a mut Tape) -> Self {
        TapeExec { tape, mode: Mode::Probe, rng: None, params: HashMap::new() }
    }

    /// Hand back the parameter-name-to-leaf map once the graph is built.
    pub fn into_params(self) -> HashMap<String, NodeId> {
        self.params
    }

    fn param_leaf(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        let requires_grad = self.mode == Mode::Train;
        let id = self.tape.leaf(value.clone(), requires_grad, name)?;
        if self.params.insert(name.to_string(), id).is_some() {
            return Err(Error::Autodiff(format!(
                "parameter '{name}' bound to the tape twice"
            )));
        }
        Ok(id)
    }
}

impl Exec for TapeExec<'_> {
    type V = NodeId;

    fn source(&mut self, t: Tensor) -> Result<NodeId> {
        self.tape.leaf(t, self.mode == Mode::Probe, "input")
    }

    fn shape(&self, v: &NodeId) -> Vec<usize> {
        self.tape.value(*v).shape().to_vec()
    }

    fn conv2d(&mut self, x: NodeId, layer: &Conv2d) -> Result<NodeId> {
        let w = self.param_leaf(&format!("{}.weight", layer.name), &layer.weight)?;
        let b = self.param_leaf(&format!("{}.bias", layer.name), &layer.bias)?;
        self.tape.conv2d(x, w, b, layer.dilation, 1, layer.same_pad())
    }

    fn batchnorm(&mut self, x: NodeId, layer: &mut BatchNorm2d) -> Result<NodeId> {
        let g = self.param_leaf(&format!("{}.gamma", layer.name), &layer.gamma)?;
        let be = self.param_leaf(&format!("{}.beta", layer.name), &layer.beta)?;
        match self.mode {
            Mode::Train => {
                let (out, mean, var) = self.tape.batchnorm_train(x, g, be, layer.eps)?;
                layer.update_running(&mean, &var);
                Ok(out)
            }
            Mode::Eval | Mode::Probe => self.tape.batchnorm_eval(
                x,
                g,
                be,
                layer.running_mean.data(),
                layer.running_var.data(),
                layer.eps,
            ),
        }
    }

    fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.tape.relu(x)
    }

    fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.tape.sigmoid(x)
    }

    fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.tape.maxpool2x2(x)
    }

    fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.tape.upsample2x(x)
    }

    fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.tape.concat_channels(a, b)
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.tape.add(a, b)
    }

    fn dropout(&mut self, x: NodeId, rate: f32) -> Result<NodeId> {
        if self.mode != Mode::Train || rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let rng = self.rng.as_deref_mut().ok_or_else(|| {
            Error::Autodiff("training-mode dropout needs an rng".into())
        })?;
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..self.tape.value(x).numel())
            .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
            .collect();
        self.tape.dropout(x, mask)
    }
}

/// Direct tensor evaluation: no history, eval semantics throughout.
pub struct EvalExec;

impl EvalExec {
    fn checked(&self, op: &str, t: Tensor) -> Result<Tensor> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        Ok(t)
    }
}

impl Exec for EvalExec {
    type V = Tensor;

    fn source(&mut self, t: Tensor) -> Result<Tensor> {
        self.checked("input", t)
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv2d(&mut self, x: Tensor, layer: &Conv2d) -> Result<Tensor> {
        let (n, c_in, h, w) = x.dims4()?;
        let ws = layer.weight.shape();
        if ws[1] != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv '{}' expects {} input channels, got {c_in}",
                layer.name, ws[1]
            )));
        }
        let geom = ConvGeom {
            batch: n,
            c_in,
            h,
            w,
            c_out: ws[0],
            k: ws[2],
            dilation: layer.dilation,
            stride: 1,
            pad: layer.same_pad(),
        };
        let out = kernels::conv2d_forward(x.data(), layer.weight.data(), layer.bias.data(), geom)?;
        self.checked(
            "conv2d",
            Tensor::new(vec![n, ws[0], geom.out_h(), geom.out_w()], out)?,
        )
    }

    fn batchnorm(&mut self, x: Tensor, layer: &mut BatchNorm2d) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let out = kernels::batchnorm_eval_forward(
            x.data(),
            layer.gamma.data(),
            layer.beta.data(),
            layer.running_mean.data(),
            layer.running_var.data(),
            n,
            c,
            h * w,
            layer.eps,
        );
        self.checked("batchnorm(eval)", Tensor::new(vec![n, c, h, w], out)?)
    }

    fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        self.checked("relu", Tensor::new(shape, kernels::relu(x.data()))?)
    }

    fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        self.checked("sigmoid", Tensor::new(shape, kernels::sigmoid(x.data()))?)
    }

    fn maxpool2x2(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (out, _) = kernels::maxpool2x2_forward(x.data(), n, c, h, w)?;
        self.checked("maxpool2x2", Tensor::new(vec![n, c, h / 2, w / 2], out)?)
    }

    fn upsample2x(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let out = kernels::upsample2x_forward(x.data(), n, c, h, w);
        self.checked("upsample2x", Tensor::new(vec![n, c, 2 * h, 2 * w], out)?)
    }

    fn concat(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (n, ca, h, w) = a.dims4()?;
        let (nb, cb, hb, wb) = b.dims4()?;
        if n != nb || h != hb || w != wb {
            return Err(Error::ShapeMismatch(format!(
                "concat operands disagree outside the channel axis: \
                 [{n},{ca},{h},{w}] vs [{nb},{cb},{hb},{wb}]"
            )));
        }
        let out = kernels::concat_channels_forward(a.data(), b.data(), n, ca, cb, h * w);
        self.checked("concat_channels", Tensor::new(vec![n, ca + cb, h, w], out)?)
    }

    fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if !a.same_shape(&b) {
            return Err(Error::ShapeMismatch(format!(
                "add operands have shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.checked("add", Tensor::new(a.shape().to_vec(), out)?)
    }

    fn dropout(&mut self, x: Tensor, _rate: f32) -> Result<Tensor> {
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_rng;

    #[test]
    fn tape_and_direct_conv_agree_bitwise() {
        let mut rng = init_rng(5);
        let layer = Conv2d::init("c", 2, 3, 3, 2, &mut rng);
        let x = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f32 * 0.13).sin());

        let mut direct = EvalExec;
        let dv = direct.conv2d(x.clone(), &layer).unwrap();

        let mut tape = Tape::new();
        let mut ex = TapeExec::eval(&mut tape);
        let xi = ex.source(x).unwrap();
        let yi = ex.conv2d(xi, &layer).unwrap();
        assert_eq!(tape.value(yi), &dv);
    }

    #[test]
    fn train_mode_batchnorm_updates_running_stats() {
        let mut layer = BatchNorm2d::init("bn", 1);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let mut rng = init_rng(0);
        let mut ex = TapeExec::train(&mut tape, &mut rng);
        let xi = ex.source(x).unwrap();
        ex.batchnorm(xi, &mut layer).unwrap();
        // mean 2.5, biased var 1.25, blended with momentum 0.9.
        assert!((layer.running_mean.data()[0] - 0.25).abs() < 1e-6);
        assert!((layer.running_var.data()[0] - (0.9 + 0.125)).abs() < 1e-6);
    }

    #[test]
    fn dropout_identity_in_eval_active_in_train() {
        let x = Tensor::filled(&[1, 1, 4, 4], 1.0);
        let mut tape = Tape::new();
        let mut ex = TapeExec::eval(&mut tape);
        let xi = ex.source(x.clone()).unwrap();
        let yi = ex.dropout(xi, 0.25).unwrap();
        assert_eq!(xi, yi);

        let mut tape = Tape::new();
        let mut rng = init_rng(3);
        let mut ex = TapeExec::train(&mut tape, &mut rng);
        let xi = ex.source(x).unwrap();
        let yi = ex.dropout(xi, 0.25).unwrap();
        let vals = tape.value(yi).data();
        assert!(vals.iter().any(|&v| v == 0.0), "some units must drop");
        let scale = 1.0 / 0.75;
        assert!(vals.iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-6));
    }

    #[test]
    fn probe_mode_tracks_input_gradients() {
        let mut rng = init_rng(4);
        let layer = Conv2d::init("c", 1, 1, 3, 1, &mut rng);
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32 * 0.1);

        let mut tape = Tape::new();
        let mut ex = TapeExec::probe(&mut tape);
        let xi = ex.source(x.clone()).unwrap();
        let yi = ex.conv2d(xi, &layer).unwrap();
        let root = tape.sum(yi).unwrap();
        let mut grads = tape.backward(root).unwrap();
        assert!(grads.take(xi).is_some(), "probe must reach the input");

        let mut tape = Tape::new();
        let mut ex = TapeExec::eval(&mut tape);
        let xi = ex.source(x).unwrap();
        let yi = ex.conv2d(xi, &layer).unwrap();
        let root = tape.sum(yi).unwrap();
        let mut grads = tape.backward(root).unwrap();
        assert!(grads.take(xi).is_none(), "eval input carries no gradient");
    }

    #[test]
    fn duplicate_parameter_binding_is_an_error() {
        let mut rng = init_rng(9);
        let layer = Conv2d::init("c", 1, 1, 3, 1, &mut rng);
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let mut tape = Tape::new();
        let mut ex = TapeExec::eval(&mut tape);
        let xi = ex.source(x).unwrap();
        let y = ex.conv2d(xi, &layer).unwrap();
        assert!(ex.conv2d(y, &layer).is_err());
    }
}
