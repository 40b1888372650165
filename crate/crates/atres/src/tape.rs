//! Reverse-mode autodiff over a flat operation tape.
//!
//! Every forward op appends a node holding its output tensor plus what it
//! needs for the backward sweep (input ids, pooling argmaxes, batch-norm
//! context). `backward` walks the tape once in reverse, accumulating
//! gradients in creation order so results are deterministic.
//!
//! Both forward outputs and backward gradients are scanned for NaN/Inf as
//! they are produced; the first non-finite value aborts with
//! [`Error::NonFinite`] naming the op, instead of letting garbage spread.

use crate::error::{Error, Result};
use crate::kernels::{self, BnContext, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op {
    Leaf {
        name: String,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    MaxPool2x2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        ctx: BnContext,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
        exact: f64,
    },
    AffineScalar {
        x: NodeId,
        mul: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id. Interior
/// gradients are dropped once redistributed; only leaves keep theirs.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn op_label(&self, idx: usize) -> String {
        match &self.nodes[idx].op {
            Op::Leaf { name } => format!("leaf '{name}'"),
            Op::Conv2d { .. } => "conv2d".into(),
            Op::Relu { .. } => "relu".into(),
            Op::Sigmoid { .. } => "sigmoid".into(),
            Op::MaxPool2x2 { .. } => "maxpool2x2".into(),
            Op::Upsample2x { .. } => "upsample2x".into(),
            Op::ConcatChannels { .. } => "concat_channels".into(),
            Op::BnTrain { .. } => "batchnorm(train)".into(),
            Op::BnEval { .. } => "batchnorm(eval)".into(),
            Op::Dropout { .. } => "dropout".into(),
            Op::Add { .. } => "add".into(),
            Op::Mul { .. } => "mul".into(),
            Op::Div { .. } => "div".into(),
            Op::Sum { .. } => "sum".into(),
            Op::AffineScalar { .. } => "affine".into(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        self.nodes.push(Node { value, op, needs_grad });
        let idx = self.nodes.len() - 1;
        if !self.nodes[idx].value.is_finite() {
            return Err(Error::NonFinite { op: self.op_label(idx) });
        }
        Ok(NodeId(idx))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        name: impl Into<String>,
    ) -> Result<NodeId> {
        self.push(value, Op::Leaf { name: name.into() }, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        dilation: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let ws = self.value(weight).shape();
        let (c_out, wc_in, kh, kw) = match ws {
            &[a, b, c, d] => (a, b, c, d),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "conv weight must be 4-d, got {s:?}"
                )))
            }
        };
        if kh != kw {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel must be square, got {kh}x{kw}"
            )));
        }
        if wc_in != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {wc_in} input channels, got {c_in}"
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let geom = ConvGeom {
            batch: n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            dilation,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            geom,
        )?;
        let value = Tensor::new(vec![n, c_out, geom.out_h(), geom.out_w()], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(value, Op::Conv2d { input, weight, bias, geom }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::relu(self.value(x).data());
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::sigmoid(self.value(x).data());
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), n, c, h, w)?;
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let needs = self.needs(x);
        self.push(value, Op::MaxPool2x2 { x, argmax }, needs)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n, c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let needs = self.needs(x);
        self.push(value, Op::Upsample2x { x }, needs)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if n != nb || h != hb || w != wb {
            return Err(Error::ShapeMismatch(format!(
                "concat operands disagree outside the channel axis: \
                 [{n},{ca},{h},{w}] vs [{nb},{cb},{hb},{wb}]"
            )));
        }
        let out = kernels::concat_channels_forward(
            self.value(a).data(),
            self.value(b).data(),
            n,
            ca,
            cb,
            h * w,
        );
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatChannels { a, b }, needs)
    }

    /// Training-mode batch norm. Also returns the batch mean and (biased)
    /// variance per channel so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_bn_params(gamma, beta, c)?;
        let (out, ctx) = kernels::batchnorm_train_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            eps,
        );
        let mean = ctx.mean.clone();
        let var = ctx.var.clone();
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(value, Op::BnTrain { x, gamma, beta, ctx }, needs)?;
        Ok((id, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm running stats must have {c} channels"
            )));
        }
        let out = kernels::batchnorm_eval_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            n,
            c,
            h * w,
            eps,
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BnEval {
                x,
                gamma,
                beta,
                running_mean: running_mean.to_vec(),
                running_var: running_var.to_vec(),
                eps,
            },
            needs,
        )
    }

    fn check_bn_params(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<()> {
        for id in [gamma, beta] {
            if self.value(id).shape() != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "batchnorm scale/shift must have shape [{c}], got {:?}",
                    self.value(id).shape()
                )));
            }
        }
        Ok(())
    }

    /// Apply a precomputed inverted-dropout mask (entries are 0 or 1/keep).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f32>) -> Result<NodeId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch(format!(
                "dropout mask has {} entries for {} elements",
                mask.len(),
                self.value(x).numel()
            )));
        }
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f32, f32) -> f32,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::ShapeMismatch(format!(
                "{what} operands have shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op(a, b), needs)
    }

    /// Full-tensor sum to a scalar, accumulated in f64.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let exact = kernels::sum_f64(self.value(x).data());
        let needs = self.needs(x);
        self.push(Tensor::scalar(exact as f32), Op::Sum { x, exact }, needs)
    }

    /// Scalar node value at full accumulator precision: a sum node reports
    /// its f64 accumulation before the f32 rounding its stored value went
    /// through; any other scalar node reports its stored value.
    pub fn scalar_f64(&self, id: NodeId) -> Result<f64> {
        if let Op::Sum { exact, .. } = self.nodes[id.0].op {
            return Ok(exact);
        }
        Ok(f64::from(self.value(id).item()?))
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine(&mut self, x: NodeId, mul: f32, add: f32) -> Result<NodeId> {
        let out: Vec<f32> = self.value(x).data().iter().map(|&v| mul * v + add).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::AffineScalar { x, mul }, needs)
    }

    /// Reverse sweep from a scalar root. May be called once per tape.
    pub fn backward(&mut self, root: NodeId) -> Result<Grads> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "backward root {} is not on this tape (len {})",
                root.0,
                self.nodes.len()
            )));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("{} (backward)", self.op_label(i)),
                });
            }
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let (di, dw, db) = kernels::conv2d_backward(
                        self.nodes[input.0].value.data(),
                        self.nodes[weight.0].value.data(),
                        &g,
                        *geom,
                    );
                    let (input, weight, bias) = (*input, *weight, *bias);
                    self.send(&mut grads, input, di);
                    self.send(&mut grads, weight, dw);
                    self.send(&mut grads, bias, db);
                }
                Op::Relu { x } => {
                    let d = kernels::relu_backward(self.nodes[x.0].value.data(), &g);
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
                Op::Sigmoid { x } => {
                    let d = kernels::sigmoid_backward(self.nodes[i].value.data(), &g);
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let d =
                        kernels::maxpool2x2_backward(&g, argmax, self.nodes[x.0].value.numel());
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
                Op::Upsample2x { x } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let d = kernels::upsample2x_backward(&g, n, c, h, w);
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
                Op::ConcatChannels { a, b } => {
                    let (n, ca, h, w) = self.nodes[a.0].value.dims4()?;
                    let cb = self.nodes[b.0].value.dims4()?.1;
                    let (da, db) = kernels::concat_channels_backward(&g, n, ca, cb, h * w);
                    let (a, b) = (*a, *b);
                    self.send(&mut grads, a, da);
                    self.send(&mut grads, b, db);
                }
                Op::BnTrain { x, gamma, beta, ctx } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let (dx, dg, db) = kernels::batchnorm_train_backward(
                        &g,
                        ctx,
                        self.nodes[gamma.0].value.data(),
                        n,
                        c,
                        h * w,
                    );
                    let _ = w;
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    self.send(&mut grads, x, dx);
                    self.send(&mut grads, gamma, dg);
                    self.send(&mut grads, beta, db);
                }
                Op::BnEval { x, gamma, beta, running_mean, running_var, eps } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let (dx, dg, db) = kernels::batchnorm_eval_backward(
                        &g,
                        self.nodes[x.0].value.data(),
                        self.nodes[gamma.0].value.data(),
                        running_mean,
                        running_var,
                        n,
                        c,
                        h * w,
                        *eps,
                    );
                    let _ = w;
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    self.send(&mut grads, x, dx);
                    self.send(&mut grads, gamma, dg);
                    self.send(&mut grads, beta, db);
                }
                Op::Dropout { x, mask } => {
                    let d: Vec<f32> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.send(&mut grads, b, g.clone());
                    self.send(&mut grads, a, g);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f32> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    let (a, b) = (*a, *b);
                    self.send(&mut grads, a, da);
                    self.send(&mut grads, b, db);
                }
                Op::Div { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let da: Vec<f32> = g.iter().zip(bv).map(|(gv, y)| gv / y).collect();
                    let db: Vec<f32> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect();
                    let (a, b) = (*a, *b);
                    self.send(&mut grads, a, da);
                    self.send(&mut grads, b, db);
                }
                Op::Sum { x, .. } => {
                    let d = vec![g[0]; self.nodes[x.0].value.numel()];
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
                Op::AffineScalar { x, mul } => {
                    let mul = *mul;
                    let d: Vec<f32> = g.iter().map(|gv| gv * mul).collect();
                    let x = *x;
                    self.send(&mut grads, x, d);
                }
            }
        }
        Ok(Grads { grads })
    }

    /// Accumulate a gradient contribution into `target`'s slot, skipping
    /// nodes that do not require gradients.
    fn send(&self, grads: &mut [Option<Vec<f32>>], target: NodeId, v: Vec<f32>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            slot @ None => *slot = Some(v),
            Some(cur) => {
                for (c, x) in cur.iter_mut().zip(&v) {
                    *c += x;
                }
            }
        }
    }
}
