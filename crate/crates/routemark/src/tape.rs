//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A `Tape` records every operation in creation order; creation order is a
//! topological order, so `backward` is a single reverse sweep. Leaves are
//! either trainable (parameters, attack images) or constants (frozen
//! weights, inputs, targets). Gradients are only propagated into nodes
//! that can reach a trainable leaf, so frozen subgraphs cost no backward
//! work and provably receive no gradient.
//!
//! A tape is confined to one thread; independent tapes (one per batch
//! element) may run concurrently.

use std::sync::Arc;

use crate::tensor::{
    avgpool2x_backward, avgpool2x_forward, conv2d_backward_bias, conv2d_backward_input,
    conv2d_backward_weight, conv2d_forward, matmul_backward, matmul_forward, upsample2x_backward,
    upsample2x_forward, EngineError, Tensor, WarpPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf { trainable: bool },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f32),
    Matmul(VarId, VarId),
    Conv2d { x: VarId, w: VarId, b: Option<VarId>, stride: usize, pad: usize },
    Upsample2x(VarId),
    AvgPool2x(VarId),
    LeakyRelu(VarId, f32),
    Sigmoid(VarId),
    Mean(VarId),
    SpatialMean(VarId),
    Mse(VarId, VarId),
    SumSquares(VarId),
    BceWithLogits { logits: VarId, targets: Arc<Vec<f32>> },
    Warp { x: VarId, plan: Arc<WarpPlan> },
    Clamp01(VarId),
    Reshape(VarId),
    /// Value computed outside the tape; gradient passes through unchanged.
    StraightThrough(VarId),
}

impl Op {
    fn inputs(&self) -> [Option<VarId>; 3] {
        use Op::*;
        match *self {
            Leaf { .. } => [None, None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | Mse(a, b) => {
                [Some(a), Some(b), None]
            }
            Conv2d { x, w, b, .. } => [Some(x), Some(w), b],
            Scale(a, _)
            | Upsample2x(a)
            | AvgPool2x(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Mean(a)
            | SpatialMean(a)
            | SumSquares(a)
            | Clamp01(a)
            | Reshape(a)
            | StraightThrough(a) => [Some(a), None, None],
            BceWithLogits { logits, .. } => [Some(logits), None, None],
            Warp { x, .. } => [Some(x), None, None],
        }
    }
}

pub struct Tape {
    pub(crate) values: Vec<Tensor>,
    pub(crate) ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    /// Skip the per-op finite scan (left on everywhere by default).
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new(), grads: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` loss wrt a leaf, if one was produced.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn op(&self, id: VarId) -> &Op {
        &self.ops[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor, op_name: &'static str) -> Result<VarId, EngineError> {
        if self.check_finite && !value.all_finite() {
            return Err(EngineError::NonFinite { op: op_name });
        }
        let needs = match op {
            Op::Leaf { trainable } => trainable,
            ref o => o
                .inputs()
                .iter()
                .flatten()
                .any(|&i| self.needs_grad[i.0]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        self.grads.push(None);
        Ok(VarId(self.values.len() - 1))
    }

    /// A trainable leaf: gradients will be produced for it.
    pub fn param(&mut self, value: Tensor) -> Result<VarId, EngineError> {
        self.push(Op::Leaf { trainable: true }, value, "param")
    }

    /// A constant leaf: no gradient flows into or through it alone.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId, EngineError> {
        self.push(Op::Leaf { trainable: false }, value, "constant")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, EngineError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, EngineError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, EngineError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, a: VarId, factor: f32) -> Result<VarId, EngineError> {
        let va = &self.values[a.0];
        let data = va.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Scale(a, factor), out, "scale")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, EngineError> {
        let out = matmul_forward(&self.values[a.0], &self.values[b.0])?;
        self.push(Op::Matmul(a, b), out, "matmul")
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, EngineError> {
        let bias = b.map(|id| &self.values[id.0]);
        let out = conv2d_forward(&self.values[x.0], &self.values[w.0], bias, stride, pad)?;
        self.push(Op::Conv2d { x, w, b, stride, pad }, out, "conv2d")
    }

    pub fn upsample2x(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let out = upsample2x_forward(&self.values[a.0])?;
        self.push(Op::Upsample2x(a), out, "upsample2x")
    }

    pub fn avgpool2x(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let out = avgpool2x_forward(&self.values[a.0])?;
        self.push(Op::AvgPool2x(a), out, "avgpool2x")
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f32) -> Result<VarId, EngineError> {
        let va = &self.values[a.0];
        let data = va.data().iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::LeakyRelu(a, slope), out, "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let va = &self.values[a.0];
        let data = va.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let va = &self.values[a.0];
        if va.numel() == 0 {
            return Err(EngineError::Invalid("mean of empty tensor".into()));
        }
        let m = va.data().iter().sum::<f32>() / va.numel() as f32;
        self.push(Op::Mean(a), Tensor::scalar(m), "mean")
    }

    /// Per-channel spatial mean: (C,H,W) -> (C).
    pub fn spatial_mean(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let va = &self.values[a.0];
        let (c, h, w) = match va.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(EngineError::ShapeMismatch {
                    op: "spatial_mean",
                    detail: format!("expected (C,H,W), got {s:?}"),
                })
            }
        };
        let hw = (h * w) as f32;
        let data = (0..c)
            .map(|ci| va.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f32>() / hw)
            .collect();
        let out = Tensor::new(vec![c], data)?;
        self.push(Op::SpatialMean(a), out, "spatial_mean")
    }

    /// Mean squared difference, producing a scalar.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId, EngineError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "mse",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let n = va.numel() as f32;
        let s: f32 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Op::Mse(a, b), Tensor::scalar(s / n), "mse")
    }

    /// Sum of squared elements, producing a scalar.
    pub fn sum_squares(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let s: f32 = self.values[a.0].data().iter().map(|x| x * x).sum();
        self.push(Op::SumSquares(a), Tensor::scalar(s), "sum_squares")
    }

    /// Numerically stable mean binary cross-entropy between logits and
    /// 0/1 targets: mean_m [ max(u,0) - t*u + ln(1 + e^{-|u|}) ].
    pub fn bce_with_logits(&mut self, logits: VarId, targets: &[f32]) -> Result<VarId, EngineError> {
        let u = &self.values[logits.0];
        if u.numel() != targets.len() {
            return Err(EngineError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{} logits vs {} targets", u.numel(), targets.len()),
            });
        }
        let m = targets.len() as f32;
        let s: f32 = u
            .data()
            .iter()
            .zip(targets)
            .map(|(&u, &t)| u.max(0.0) - t * u + (-u.abs()).exp().ln_1p())
            .sum();
        self.push(
            Op::BceWithLogits { logits, targets: Arc::new(targets.to_vec()) },
            Tensor::scalar(s / m),
            "bce_with_logits",
        )
    }

    /// Applies a precomputed spatial warp plan per channel.
    pub fn warp(&mut self, x: VarId, plan: Arc<WarpPlan>) -> Result<VarId, EngineError> {
        let out = plan.apply(&self.values[x.0])?;
        self.push(Op::Warp { x, plan }, out, "warp")
    }

    pub fn clamp01(&mut self, a: VarId) -> Result<VarId, EngineError> {
        let va = &self.values[a.0];
        let data = va.data().iter().map(|x| x.clamp(0.0, 1.0)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Clamp01(a), out, "clamp01")
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId, EngineError> {
        let out = self.values[a.0].reshaped(shape)?;
        self.push(Op::Reshape(a), out, "reshape")
    }

    /// Records `value` as the output of a non-differentiable transform of
    /// `x`; the backward pass treats it as identity (straight-through).
    /// Shapes must match.
    pub fn straight_through(&mut self, x: VarId, value: Tensor) -> Result<VarId, EngineError> {
        if self.values[x.0].shape() != value.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "straight_through",
                detail: format!("{:?} vs {:?}", self.values[x.0].shape(), value.shape()),
            });
        }
        self.push(Op::StraightThrough(x), value, "straight_through")
    }

    /// Reverse sweep from a scalar loss. Gradients of trainable leaves are
    /// retained and readable via [`grad`](Self::grad); intermediate
    /// gradients are dropped as soon as they have been consumed.
    pub fn backward(&mut self, loss: VarId) -> Result<(), EngineError> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(EngineError::NonScalarLoss(lv.shape().to_vec()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.needs_grad[loss.0] {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if matches!(self.ops[id], Op::Leaf { .. }) {
                continue; // keep leaf grads for the caller
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.backprop_node(id, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VarId, g: Tensor) {
        if !self.needs_grad[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, id: usize, g: &Tensor) -> Result<(), EngineError> {
        let op = self.ops[id].clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?;
                self.accumulate(b, neg);
            }
            Op::Mul(a, b) => {
                if self.needs_grad[a.0] {
                    let vb = &self.values[b.0];
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(vb.data()).map(|(gv, bv)| gv * bv).collect(),
                    )?;
                    self.accumulate(a, ga);
                }
                if self.needs_grad[b.0] {
                    let va = &self.values[a.0];
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(gv, av)| gv * av).collect(),
                    )?;
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, f) => {
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * f).collect())?;
                self.accumulate(a, ga);
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = matmul_backward(g, &self.values[a.0], &self.values[b.0])?;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.needs_grad[x.0] {
                    let gx = conv2d_backward_input(
                        g,
                        &self.values[w.0],
                        self.values[x.0].shape(),
                        stride,
                        pad,
                    )?;
                    self.accumulate(x, gx);
                }
                if self.needs_grad[w.0] {
                    let gw = conv2d_backward_weight(
                        g,
                        &self.values[x.0],
                        self.values[w.0].shape(),
                        stride,
                        pad,
                    )?;
                    self.accumulate(w, gw);
                }
                if let Some(bid) = b {
                    if self.needs_grad[bid.0] {
                        self.accumulate(bid, conv2d_backward_bias(g)?);
                    }
                }
            }
            Op::Upsample2x(a) => self.accumulate(a, upsample2x_backward(g)?),
            Op::AvgPool2x(a) => self.accumulate(a, avgpool2x_backward(g)?),
            Op::LeakyRelu(a, slope) => {
                let va = &self.values[a.0];
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gv, &x)| if x >= 0.0 { *gv } else { slope * gv })
                        .collect(),
                )?;
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.values[id];
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect(),
                )?;
                self.accumulate(a, ga);
            }
            Op::Mean(a) => {
                let n = self.values[a.0].numel() as f32;
                let gv = g.data()[0] / n;
                self.accumulate(a, Tensor::full(self.values[a.0].shape(), gv));
            }
            Op::SpatialMean(a) => {
                let shape = self.values[a.0].shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let hw = (h * w) as f32;
                let mut gin = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    let gv = g.data()[ci] / hw;
                    gin[ci * h * w..(ci + 1) * h * w].fill(gv);
                }
                self.accumulate(a, Tensor::new(shape, gin)?);
            }
            Op::Mse(a, b) => {
                let gv = g.data()[0];
                let n = self.values[a.0].numel() as f32;
                if self.needs_grad[a.0] {
                    let ga = Tensor::new(
                        self.values[a.0].shape().to_vec(),
                        self.values[a.0]
                            .data()
                            .iter()
                            .zip(self.values[b.0].data())
                            .map(|(x, y)| 2.0 * (x - y) / n * gv)
                            .collect(),
                    )?;
                    self.accumulate(a, ga);
                }
                if self.needs_grad[b.0] {
                    let gb = Tensor::new(
                        self.values[b.0].shape().to_vec(),
                        self.values[a.0]
                            .data()
                            .iter()
                            .zip(self.values[b.0].data())
                            .map(|(x, y)| -2.0 * (x - y) / n * gv)
                            .collect(),
                    )?;
                    self.accumulate(b, gb);
                }
            }
            Op::SumSquares(a) => {
                let gv = g.data()[0];
                let ga = Tensor::new(
                    self.values[a.0].shape().to_vec(),
                    self.values[a.0].data().iter().map(|x| 2.0 * x * gv).collect(),
                )?;
                self.accumulate(a, ga);
            }
            Op::BceWithLogits { logits, targets } => {
                let gv = g.data()[0];
                let m = targets.len() as f32;
                let ga = Tensor::new(
                    self.values[logits.0].shape().to_vec(),
                    self.values[logits.0]
                        .data()
                        .iter()
                        .zip(targets.iter())
                        .map(|(&u, &t)| (stable_sigmoid(u) - t) / m * gv)
                        .collect(),
                )?;
                self.accumulate(logits, ga);
            }
            Op::Warp { x, plan } => self.accumulate(x, plan.apply_transpose(g)?),
            Op::Clamp01(a) => {
                let va = &self.values[a.0];
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gv, &x)| if (0.0..=1.0).contains(&x) { *gv } else { 0.0 })
                        .collect(),
                )?;
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.reshaped(self.values[a.0].shape().to_vec())?;
                self.accumulate(a, ga);
            }
            Op::StraightThrough(a) => self.accumulate(a, g.clone()),
        }
        Ok(())
    }
}

pub(crate) fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_zero_is_half_with_quarter_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        let loss = tape.mean(y).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn mse_of_tensor_with_itself_has_zero_gradient() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = tape.param(Tensor::randn(&[5], 1.0, &mut rng)).unwrap();
        let loss = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss).unwrap();
        for &g in tape.grad(x).unwrap().data() {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0)).unwrap();
        let b = tape.constant(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(a, b).unwrap();
        let loss = tape.mean(y).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(a).unwrap().data()[0] - 3.0).abs() < 1e-7);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(EngineError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let err = tape.constant(Tensor::from_vec(vec![f32::NAN])).unwrap_err();
        assert!(matches!(err, EngineError::NonFinite { .. }));
    }

    #[test]
    fn bce_examples_are_stable() {
        // All-zero logits: ln 2 regardless of the key.
        let mut tape = Tape::new();
        let u = tape.param(Tensor::from_vec(vec![0.0; 7])).unwrap();
        let l = tape.bce_with_logits(u, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);

        // Saturated correct logit: tiny loss, no overflow.
        let mut tape = Tape::new();
        let u = tape.param(Tensor::from_vec(vec![20.0])).unwrap();
        let l = tape.bce_with_logits(u, &[1.0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && v > 0.0 && (v - 2.061e-9).abs() < 2e-10, "got {v}");

        // Saturated wrong logit: loss ~ 20, still finite.
        let mut tape = Tape::new();
        let u = tape.param(Tensor::from_vec(vec![20.0])).unwrap();
        let l = tape.bce_with_logits(u, &[0.0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && (v - 20.0).abs() < 1e-4, "got {v}");
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // y = x + x has dy/dx = 2.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.mean(y).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 2.0).abs() < 1e-7);
    }
}
