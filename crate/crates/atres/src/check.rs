//! Finite-difference gradient checking.
//!
//! The numeric side perturbs one parameter at a time and evaluates the loss
//! through the ordinary f32 forward pass; the difference quotient itself is
//! formed in f64. Comparison uses a per-tensor max norm: the largest
//! element-wise deviation divided by the largest gradient magnitude seen on
//! either side (with a small floor so all-zero gradients compare cleanly).
//!
//! Central differences assume the loss is smooth within `±epsilon` of the
//! operating point, so checked inputs must keep relu arguments away from
//! zero and max-pool windows free of near-ties. [`conditioned_seeds`]
//! screens candidate seeds for exactly those margins before a seed is used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Default perturbation size for central differences.
pub const FD_EPSILON: f32 = 1e-3;

/// Default acceptance threshold for the max-norm relative error.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Floor for the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-4;

/// Gradient-check outcome for a single leaf tensor.
#[derive(Clone, Debug)]
pub struct LeafReport {
    pub name: String,
    pub rel_err: f64,
}

/// Compare tape gradients against central differences for every element of
/// every listed leaf. `build` reconstructs the scalar loss from fresh leaf
/// nodes; it runs once for the analytic sweep and twice per element for the
/// numeric one, so it must be deterministic.
pub fn fd_gradcheck(
    inputs: &[(String, Tensor)],
    epsilon: f32,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<Vec<LeafReport>> {
    let forward = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = make_leaves(&mut tape, inputs, values)?;
        let root = build(&mut tape, &ids)?;
        // Read a sum root at f64 accumulator precision; the f32 rounding of
        // the stored scalar would otherwise dominate the central difference
        // whenever the loss magnitude is large.
        tape.value(root).item()?;
        tape.scalar_f64(root)
    };

    // Analytic gradients.
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let ids = make_leaves(&mut tape, inputs, &base)?;
    let root = build(&mut tape, &ids)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Autodiff(format!(
            "gradcheck loss must be scalar, got {:?}",
            tape.value(root).shape()
        )));
    }
    let grads = tape.backward(root)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (li, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[li]).ok_or_else(|| {
            Error::Autodiff(format!("no gradient reached leaf '{name}'"))
        })?;
        let mut max_dev = 0.0f64;
        let mut max_mag = 0.0f64;
        let mut values = base.clone();
        for ei in 0..tensor.numel() {
            let orig = values[li].data()[ei];
            let plus = orig + epsilon;
            let minus = orig - epsilon;
            values[li].data_mut()[ei] = plus;
            let f_plus = forward(&values)?;
            values[li].data_mut()[ei] = minus;
            let f_minus = forward(&values)?;
            values[li].data_mut()[ei] = orig;
            // Divide by the step as actually represented in f32, not the
            // nominal 2*epsilon, so representation error does not pollute
            // the quotient.
            let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let a = analytic[ei] as f64;
            max_dev = max_dev.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
        }
        reports.push(LeafReport {
            name: name.clone(),
            rel_err: max_dev / max_mag.max(DENOM_FLOOR),
        });
    }
    Ok(reports)
}

fn make_leaves(
    tape: &mut Tape,
    inputs: &[(String, Tensor)],
    values: &[Tensor],
) -> Result<Vec<NodeId>> {
    inputs
        .iter()
        .zip(values)
        .map(|((name, _), v)| tape.leaf(v.clone(), true, name.clone()))
        .collect()
}

/// Push values away from zero so a relu seen immediately afterwards stays on
/// one side of its kink under `±epsilon` perturbations.
pub fn condition_away_from_zero(t: &mut Tensor, margin: f32) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
}

/// Make every 2x2 pooling window hold clearly distinct values: snap to a
/// coarse grid, then add a distinct sub-grid offset per window slot.
pub fn condition_pool_windows(t: &mut Tensor) -> Result<()> {
    let (n, c, h, w) = t.dims4()?;
    let data = t.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let v = &mut data[(p * h + y) * w + x];
                let slot = (y % 2) * 2 + x % 2;
                *v = (*v / 0.1).round() * 0.1 + slot as f32 * 0.025;
            }
        }
    }
    Ok(())
}

/// All leaf tensors plus fixed context (dropout mask, eval-mode statistics)
/// for one micro-network instance.
pub struct MicroCase {
    pub inputs: Vec<(String, Tensor)>,
    mask: Vec<f32>,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

/// Intermediate probes used to screen a seed for FD-safe margins.
struct MicroProbes {
    loss: NodeId,
    relu_in: NodeId,
    pool_in: NodeId,
}

const MN: usize = 1; // batch
const MC: usize = 2; // channels
const MH: usize = 4; // height/width
const BN_EPS: f32 = 1e-5;

impl MicroCase {
    /// Draw one instance of the micro-network from a seed.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = |shape: &[usize], rng: &mut ChaCha8Rng, scale: f32| {
            Tensor::from_fn(shape, |_| (rng.gen::<f32>() * 2.0 - 1.0) * scale)
        };
        let x = t(&[MN, MC, MH, MH], &mut rng, 1.0);
        let w1 = t(&[MC, MC, 3, 3], &mut rng, 0.35);
        let b1 = t(&[MC], &mut rng, 0.1);
        let g1 = Tensor::from_fn(&[MC], |_| 0.7 + 0.6 * rng.gen::<f32>());
        let be1 = t(&[MC], &mut rng, 0.2);
        let w2 = t(&[MC, MC, 3, 3], &mut rng, 0.35);
        let b2 = t(&[MC], &mut rng, 0.1);
        let g2 = Tensor::from_fn(&[MC], |_| 0.7 + 0.6 * rng.gen::<f32>());
        let be2 = t(&[MC], &mut rng, 0.2);
        let target = t(&[MN, 2 * MC, MH, MH], &mut rng, 0.8);
        let ruler = Tensor::from_fn(&[4], |_| 0.5 + rng.gen::<f32>());
        let mask: Vec<f32> = (0..MN * 2 * MC * MH * MH)
            .map(|_| if rng.gen::<f32>() < 0.75 { 1.0 / 0.75 } else { 0.0 })
            .collect();
        let running_mean: Vec<f32> = (0..MC).map(|_| 0.4 * rng.gen::<f32>() - 0.2).collect();
        let running_var: Vec<f32> = (0..MC).map(|_| 0.5 + rng.gen::<f32>()).collect();
        MicroCase {
            inputs: vec![
                ("input".into(), x),
                ("conv1.weight".into(), w1),
                ("conv1.bias".into(), b1),
                ("bn1.gamma".into(), g1),
                ("bn1.beta".into(), be1),
                ("conv2.weight".into(), w2),
                ("conv2.bias".into(), b2),
                ("bn2.gamma".into(), g2),
                ("bn2.beta".into(), be2),
                ("target".into(), target),
                ("ruler".into(), ruler),
            ],
            mask,
            running_mean,
            running_var,
        }
    }

    /// One network touching every tape op: conv (both dilations), train- and
    /// eval-mode batch norm, relu, residual add, mul, max-pool, upsample,
    /// concat, dropout, sigmoid, and a normalized-overlap loss built from
    /// sum/affine/div.
    ///
    /// The tail recenters and amplifies the sigmoid output before reducing
    /// it. That keeps every leaf's largest gradient on the same order as the
    /// largest intermediate value, which is what bounds the f32 rounding
    /// noise the finite-difference quotient has to live with.
    fn build(&self, tape: &mut Tape, ids: &[NodeId]) -> Result<MicroProbes> {
        let [x, w1, b1, g1, be1, w2, b2, g2, be2, target, ruler] = ids else {
            return Err(Error::Autodiff("micro-network expects 11 leaves".into()));
        };
        let c1 = tape.conv2d(*x, *w1, *b1, 1, 1, 1)?;
        let (bn1, _, _) = tape.batchnorm_train(c1, *g1, *be1, BN_EPS)?;
        let r1 = tape.relu(bn1)?;
        let res = tape.add(r1, *x)?;
        let c2 = tape.conv2d(res, *w2, *b2, 2, 1, 2)?;
        let bn2 = tape.batchnorm_eval(
            c2,
            *g2,
            *be2,
            &self.running_mean,
            &self.running_var,
            BN_EPS,
        )?;
        let m = tape.mul(bn2, *x)?;
        // Feed conv1's raw output in a second time. Training-mode batch norm
        // cancels a per-channel constant shift, so without this extra
        // consumer the conv1 bias gradient would be identically zero and its
        // check would only measure FD noise against the denominator floor.
        let m = tape.add(m, c1)?;
        let pooled = tape.maxpool2x2(m)?;
        let up = tape.upsample2x(pooled)?;
        let cat = tape.concat_channels(up, res)?;
        let dropped = tape.dropout(cat, self.mask.clone())?;
        let p = tape.sigmoid(dropped)?;

        let centered = tape.affine(p, 10.0, -5.0)?;
        let inter = tape.mul(centered, *target)?;
        let num = tape.sum(inter)?;
        let r2 = tape.mul(*ruler, *ruler)?;
        let den = tape.sum(r2)?;
        let den = tape.affine(den, 1.0, 1.0)?;
        let loss = tape.div(num, den)?;
        Ok(MicroProbes { loss, relu_in: bn1, pool_in: m })
    }

    /// True when the case is fit for finite differences: relu arguments and
    /// pool-window gaps leave room for the perturbation without crossing a
    /// kink, and every checked leaf has at least one gradient element large
    /// enough to resolve against f32 rounding noise.
    pub fn margins_ok(&self, margin: f32, min_grad: f32) -> Result<bool> {
        let mut tape = Tape::new();
        let values: Vec<Tensor> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let ids = make_leaves(&mut tape, &self.inputs, &values)?;
        let probes = self.build(&mut tape, &ids)?;
        if tape.value(probes.relu_in).data().iter().any(|v| v.abs() < margin) {
            return Ok(false);
        }
        let pin = tape.value(probes.pool_in);
        let (n, c, h, w) = pin.dims4()?;
        let data = pin.data();
        for p in 0..n * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut vals = [0.0f32; 4];
                    for (s, v) in vals.iter_mut().enumerate() {
                        *v = data[(p * h + 2 * oy + s / 2) * w + 2 * ox + s % 2];
                    }
                    let mut best = vals[0];
                    let mut second = f32::NEG_INFINITY;
                    for &v in &vals[1..] {
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                    if best - second < margin {
                        return Ok(false);
                    }
                }
            }
        }
        let grads = tape.backward(probes.loss)?;
        for id in &ids {
            let healthy = grads
                .get(*id)
                .is_some_and(|g| g.iter().any(|v| v.abs() >= min_grad));
            if !healthy {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn check(&self, epsilon: f32) -> Result<Vec<LeafReport>> {
        fd_gradcheck(&self.inputs, epsilon, |tape, ids| {
            Ok(self.build(tape, ids)?.loss)
        })
    }
}

/// First `count` seeds at or after `start` whose micro-network keeps safe
/// margins around relu kinks and pool ties and gives every leaf a gradient
/// the FD probe can resolve. Deterministic.
pub fn conditioned_seeds(start: u64, count: usize) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(count);
    let mut seed = start;
    while out.len() < count {
        if MicroCase::generate(seed).margins_ok(0.02, 1.0)? {
            out.push(seed);
        }
        seed += 1;
    }
    Ok(out)
}

/// Result of checking one seed's micro-network.
#[derive(Clone, Debug)]
pub struct SeedReport {
    pub seed: u64,
    pub leaves: Vec<LeafReport>,
}

impl SeedReport {
    pub fn worst(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_err).fold(0.0, f64::max)
    }
}

/// Run the composite gradient check over `count` conditioned seeds.
pub fn run_suite(start: u64, count: usize, epsilon: f32) -> Result<Vec<SeedReport>> {
    let mut reports = Vec::with_capacity(count);
    for seed in conditioned_seeds(start, count)? {
        let case = MicroCase::generate(seed);
        reports.push(SeedReport { seed, leaves: case.check(epsilon)? });
    }
    Ok(reports)
}

/// Gradient-check outcome for one isolated op.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| lo + rng.gen::<f32>() * (hi - lo))
}

/// Check one op in isolation: apply it to conditioned random leaves, read the
/// result out through a fixed random weighting, and compare against central
/// differences. Returns the worst relative error across the op's leaves.
fn check_op(
    name: &str,
    epsilon: f32,
    inputs: Vec<(String, Tensor)>,
    readout: Tensor,
    apply: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<OpReport> {
    let reports = fd_gradcheck(&inputs, epsilon, |tape, ids| {
        let out = apply(tape, ids)?;
        if tape.value(out).numel() == 1 {
            return Ok(out);
        }
        let c = tape.leaf(readout.clone(), false, "readout")?;
        let weighted = tape.mul(out, c)?;
        tape.sum(weighted)
    })?;
    let max_rel_err = reports.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(OpReport { op: name.to_string(), max_rel_err })
}

/// Finite-difference every differentiable op in isolation: convolution at
/// each dilation in the series unit, the pointwise and pooling ops, both
/// batchnorm modes, pass-through dropout, and the Dice loss. One seed drives
/// all the random inputs; each op draws from its own stream.
pub fn op_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    let mut stream = 1000u64;
    let rng_for = |s: &mut u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(*s);
        *s += 1;
        rng
    };

    for dilation in SACU_CHECK_DILATIONS {
        let mut rng = rng_for(&mut stream);
        let s = (2 * dilation + 2).clamp(8, 34);
        let x = uniform(&mut rng, &[1, 2, s, s], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
        let b = uniform(&mut rng, &[2], -0.2, 0.2);
        let c = uniform(&mut rng, &[1, 2, s, s], 0.5, 1.5);
        // The readout is linear in every single coordinate, so the central
        // difference has no truncation error and a larger step only damps
        // the f32 forward-rounding noise (which the widest dilations would
        // otherwise amplify through their thousands of probed elements).
        reports.push(check_op(
            &format!("conv2d_d{dilation}"),
            1e-2,
            vec![("x".into(), x), ("w".into(), w), ("b".into(), b)],
            c,
            move |t, ids| t.conv2d(ids[0], ids[1], ids[2], dilation, 1, dilation),
        )?);
    }

    {
        let mut rng = rng_for(&mut stream);
        let a = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let b = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let c = uniform(&mut rng, &[1, 3, 6, 6], 0.5, 1.5);
        reports.push(check_op(
            "add",
            FD_EPSILON,
            vec![("a".into(), a), ("b".into(), b)],
            c,
            |t, ids| t.add(ids[0], ids[1]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let a = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let b = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let c = uniform(&mut rng, &[1, 3, 6, 6], 0.5, 1.5);
        reports.push(check_op(
            "mul",
            FD_EPSILON,
            vec![("a".into(), a), ("b".into(), b)],
            c,
            |t, ids| t.mul(ids[0], ids[1]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let a = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        // Denominator bounded away from zero keeps the quotient's curvature
        // small enough for the central-difference step.
        let b = uniform(&mut rng, &[1, 3, 6, 6], 0.6, 1.6);
        let c = uniform(&mut rng, &[1, 3, 6, 6], 0.5, 1.5);
        reports.push(check_op(
            "div",
            FD_EPSILON,
            vec![("a".into(), a), ("b".into(), b)],
            c,
            |t, ids| t.div(ids[0], ids[1]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let mut x = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        condition_away_from_zero(&mut x, 0.02);
        let c = uniform(&mut rng, &[1, 3, 6, 6], 0.5, 1.5);
        reports.push(check_op(
            "relu",
            FD_EPSILON,
            vec![("x".into(), x)],
            c,
            |t, ids| t.relu(ids[0]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let x = uniform(&mut rng, &[1, 3, 6, 6], -2.0, 2.0);
        let c = uniform(&mut rng, &[1, 3, 6, 6], 0.5, 1.5);
        reports.push(check_op(
            "sigmoid",
            FD_EPSILON,
            vec![("x".into(), x)],
            c,
            |t, ids| t.sigmoid(ids[0]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let mut x = uniform(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
        condition_pool_windows(&mut x)?;
        let c = uniform(&mut rng, &[1, 2, 4, 4], 0.5, 1.5);
        reports.push(check_op(
            "maxpool2x2",
            FD_EPSILON,
            vec![("x".into(), x)],
            c,
            |t, ids| t.maxpool2x2(ids[0]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let x = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let c = uniform(&mut rng, &[1, 2, 10, 10], 0.5, 1.5);
        reports.push(check_op(
            "upsample2x",
            FD_EPSILON,
            vec![("x".into(), x)],
            c,
            |t, ids| t.upsample2x(ids[0]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let a = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let b = uniform(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
        let c = uniform(&mut rng, &[1, 5, 5, 5], 0.5, 1.5);
        reports.push(check_op(
            "concat_channels",
            FD_EPSILON,
            vec![("a".into(), a), ("b".into(), b)],
            c,
            |t, ids| t.concat_channels(ids[0], ids[1]),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let x = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
        let beta = uniform(&mut rng, &[3], -0.5, 0.5);
        let c = uniform(&mut rng, &[2, 3, 5, 5], 0.5, 1.5);
        // Normalization couples every element of a channel, so one probe
        // refreshes the f32 rounding of all its outputs; a larger step damps
        // that noise while the 1/n-suppressed curvature keeps truncation
        // error far below tolerance.
        reports.push(check_op(
            "batchnorm_train",
            1e-2,
            vec![("x".into(), x), ("gamma".into(), gamma), ("beta".into(), beta)],
            c,
            |t, ids| Ok(t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?.0),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let x = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
        let beta = uniform(&mut rng, &[3], -0.5, 0.5);
        let mean: Vec<f32> = (0..3).map(|_| rng.gen::<f32>() * 0.6 - 0.3).collect();
        let var: Vec<f32> = (0..3).map(|_| 0.5 + rng.gen::<f32>()).collect();
        let c = uniform(&mut rng, &[2, 3, 5, 5], 0.5, 1.5);
        // Larger step for the same noise reason as the train-mode case; the
        // op is linear in x given fixed stats, so truncation error is zero.
        reports.push(check_op(
            "batchnorm_eval",
            1e-2,
            vec![("x".into(), x), ("gamma".into(), gamma), ("beta".into(), beta)],
            c,
            move |t, ids| t.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let x = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let c = uniform(&mut rng, &[1, 3, 6, 6], 0.5, 1.5);
        let ones = vec![1.0f32; 108];
        reports.push(check_op(
            "dropout_off",
            FD_EPSILON,
            vec![("x".into(), x)],
            c,
            move |t, ids| t.dropout(ids[0], ones.clone()),
        )?);
    }
    {
        let mut rng = rng_for(&mut stream);
        let z = uniform(&mut rng, &[1, 1, 6, 6], -2.0, 2.0);
        let target = Tensor::from_fn(&[1, 1, 6, 6], |_| {
            if rng.gen_bool(0.4) { 1.0 } else { 0.0 }
        });
        let c = Tensor::scalar(1.0);
        // The loss is a smooth low-curvature rational, so a larger step keeps
        // the f32 forward-readout noise well below the central difference.
        reports.push(check_op(
            "dice_loss",
            1e-2,
            vec![("z".into(), z)],
            c,
            move |t, ids| {
                let p = t.sigmoid(ids[0])?;
                let target = t.leaf(target.clone(), false, "target")?;
                crate::dice::dice_loss_on_tape(t, p, target, 1.0)
            },
        )?);
    }

    Ok(reports)
}

const SACU_CHECK_DILATIONS: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| (rng.gen::<f32>() * 2.0 - 1.0) * scale)
    }

    fn assert_passes(reports: &[LeafReport]) {
        for r in reports {
            assert!(
                r.rel_err < FD_TOLERANCE,
                "leaf {} rel err {:.3e} over tolerance",
                r.name,
                r.rel_err
            );
        }
    }

    #[test]
    fn isolated_op_suite_passes_on_one_seed() {
        let reports = op_suite(7).unwrap();
        assert_eq!(reports.len(), 6 + 12, "expected every op to be covered");
        for r in &reports {
            assert!(
                r.max_rel_err < FD_TOLERANCE,
                "op {} rel err {:.3e} over tolerance",
                r.op,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn conv_gradients_match_fd() {
        for (seed, dilation) in [(11u64, 1usize), (12, 2)] {
            let inputs = vec![
                ("x".to_string(), rand_tensor(&[1, 2, 6, 6], seed, 1.0)),
                ("w".to_string(), rand_tensor(&[2, 2, 3, 3], seed + 100, 0.4)),
                ("b".to_string(), rand_tensor(&[2], seed + 200, 0.1)),
            ];
            let reports = fd_gradcheck(&inputs, FD_EPSILON, |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], dilation, 1, dilation)?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum(sq)?;
                tape.affine(s, 0.01, 0.0)
            })
            .unwrap();
            assert_passes(&reports);
        }
    }

    #[test]
    fn batchnorm_train_gradients_match_fd() {
        // Weighting by a random tensor (rather than a uniform one) keeps the
        // input gradient away from batch norm's null space, where the mean
        // and variance terms would cancel it to nothing.
        let weights = rand_tensor(&[2, 2, 2, 2], 20, 1.0);
        let inputs = vec![
            ("x".to_string(), rand_tensor(&[2, 2, 2, 2], 21, 1.0)),
            ("gamma".to_string(), rand_tensor(&[2], 22, 1.0)),
            ("beta".to_string(), rand_tensor(&[2], 23, 0.5)),
        ];
        let reports = fd_gradcheck(&inputs, FD_EPSILON, |tape, ids| {
            let (y, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2], BN_EPS)?;
            let k = tape.leaf(weights.clone(), false, "weights")?;
            let wy = tape.mul(y, k)?;
            tape.sum(wy)
        })
        .unwrap();
        assert_passes(&reports);
    }

    #[test]
    fn batchnorm_eval_gradients_match_fd() {
        let weights = rand_tensor(&[1, 2, 3, 3], 30, 1.0);
        let inputs = vec![
            ("x".to_string(), rand_tensor(&[1, 2, 3, 3], 31, 1.0)),
            ("gamma".to_string(), rand_tensor(&[2], 32, 1.0)),
            ("beta".to_string(), rand_tensor(&[2], 33, 0.5)),
        ];
        let reports = fd_gradcheck(&inputs, FD_EPSILON, |tape, ids| {
            let y = tape.batchnorm_eval(ids[0], ids[1], ids[2], &[0.1, -0.2], &[0.9, 1.2], BN_EPS)?;
            let k = tape.leaf(weights.clone(), false, "weights")?;
            let wy = tape.mul(y, k)?;
            tape.sum(wy)
        })
        .unwrap();
        assert_passes(&reports);
    }

    #[test]
    fn maxpool_gradients_match_fd_on_conditioned_input() {
        let mut x = rand_tensor(&[1, 2, 4, 4], 41, 1.0);
        condition_pool_windows(&mut x).unwrap();
        let inputs = vec![("x".to_string(), x)];
        let reports = fd_gradcheck(&inputs, FD_EPSILON, |tape, ids| {
            let y = tape.maxpool2x2(ids[0])?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum(sq)?;
            tape.affine(s, 0.1, 0.0)
        })
        .unwrap();
        assert_passes(&reports);
    }

    #[test]
    fn relu_gradients_match_fd_away_from_kink() {
        let mut x = rand_tensor(&[2, 1, 4, 4], 51, 1.0);
        condition_away_from_zero(&mut x, 0.05);
        let inputs = vec![("x".to_string(), x)];
        let reports = fd_gradcheck(&inputs, FD_EPSILON, |tape, ids| {
            let y = tape.relu(ids[0])?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum(sq)?;
            tape.affine(s, 0.1, 0.0)
        })
        .unwrap();
        assert_passes(&reports);
    }

    #[test]
    fn upsample_concat_dropout_gradients_match_fd() {
        let mask: Vec<f32> = (0..2 * 4 * 4)
            .map(|i| if i % 4 == 0 { 0.0 } else { 4.0 / 3.0 })
            .collect();
        let weights = rand_tensor(&[1, 2, 4, 4], 60, 0.8);
        let inputs = vec![
            ("a".to_string(), rand_tensor(&[1, 1, 2, 2], 61, 1.0)),
            ("b".to_string(), rand_tensor(&[1, 1, 4, 4], 62, 1.0)),
        ];
        let reports = fd_gradcheck(&inputs, FD_EPSILON, |tape, ids| {
            let up = tape.upsample2x(ids[0])?;
            let cat = tape.concat_channels(up, ids[1])?;
            let dropped = tape.dropout(cat, mask.clone())?;
            let p = tape.sigmoid(dropped)?;
            let centered = tape.affine(p, 6.0, -3.0)?;
            let k = tape.leaf(weights.clone(), false, "weights")?;
            let wp = tape.mul(centered, k)?;
            tape.sum(wp)
        })
        .unwrap();
        assert_passes(&reports);
    }

    #[test]
    fn composite_suite_passes_three_seeds() {
        let reports = run_suite(0, 3, FD_EPSILON).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!(
                r.worst() < FD_TOLERANCE,
                "seed {} worst rel err {:.3e}",
                r.seed,
                r.worst()
            );
        }
    }

    #[test]
    fn screening_rejects_tied_pool_windows() {
        // A constant input yields all-tied windows and a zero relu argument,
        // both of which must fail the margin probe.
        let mut case = MicroCase::generate(0);
        for (_, t) in case.inputs.iter_mut() {
            for v in t.data_mut() {
                *v = 0.3;
            }
        }
        assert!(!case.margins_ok(0.02, 1.0).unwrap());
    }
}

