//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass plus the
//! bookkeeping needed to replay it backwards. Gradients accumulate
//! additively, so a value feeding several consumers receives the sum of
//! their contributions. Backward visits nodes in reverse recording order,
//! which is a valid topological order because an op can only reference
//! earlier nodes.

use std::sync::Arc;

use crate::error::TensorError;
use crate::ops;
use crate::ops::{BnSaved, RunningStats};
use crate::tensor::{Elem, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

enum Op<T: Elem> {
    Leaf,
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: ValueId,
        scale: ValueId,
        shift: ValueId,
        saved: BnSaved<T>,
    },
    Dropout {
        input: ValueId,
        mask: Arc<Vec<T>>,
    },
    Relu {
        input: ValueId,
    },
    AvgPool {
        input: ValueId,
        window: usize,
    },
    Concat {
        a: ValueId,
        b: ValueId,
        ca: usize,
        cb: usize,
    },
    Crop {
        input: ValueId,
        full_h: usize,
        full_w: usize,
    },
    SoftmaxCe {
        logits: ValueId,
        probs: Tensor<T>,
        targets: Arc<Vec<u32>>,
        mask: Arc<Vec<bool>>,
        n_valid: usize,
    },
    L1 {
        pred: ValueId,
        target: Tensor<T>,
        mask: Arc<Vec<bool>>,
        n_valid: usize,
    },
    ReduceDot {
        input: ValueId,
        coeffs: Tensor<T>,
    },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<T: Elem> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    /// Gradient of the loss w.r.t. the given value, if one was propagated.
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

fn accumulate<T: Elem>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    *slot = Some(match slot.take() {
        None => add,
        Some(cur) => {
            debug_assert_eq!(cur.shape(), add.shape());
            let data = cur
                .data()
                .iter()
                .zip(add.data())
                .map(|(&a, &b)| a + b)
                .collect();
            Tensor::from_vec(cur.shape().to_vec(), data).unwrap()
        }
    });
}

pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The tensor held at `id`.
    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record an input value. `requires_grad` marks trainable parameters;
    /// plain data should pass `false` so backward skips dead branches.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> ValueId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId, TensorError> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn deconv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId, TensorError> {
        let out = ops::deconv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Deconv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Batch norm in train mode. Updates `running` in place as a side
    /// effect of recording; the running stats are not differentiated.
    pub fn batch_norm_train(
        &mut self,
        input: ValueId,
        scale: ValueId,
        shift: ValueId,
        running: &mut RunningStats<T>,
        eps: T,
        momentum: T,
    ) -> Result<ValueId, TensorError> {
        let (out, saved) = ops::batch_norm_train(
            self.value(input),
            self.value(scale),
            self.value(shift),
            running,
            eps,
            momentum,
        )?;
        let ng = self.needs(input) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                saved,
            },
            ng,
        ))
    }

    /// Inverted dropout with an explicit seed; rate 0 keeps everything.
    pub fn dropout(
        &mut self,
        input: ValueId,
        rate: f64,
        seed: u64,
    ) -> Result<ValueId, TensorError> {
        let mask = Arc::new(ops::dropout_mask::<T>(
            self.value(input).numel(),
            rate,
            seed,
        )?);
        let out = ops::mul_mask(self.value(input), &mask);
        let ng = self.needs(input);
        Ok(self.push(out, Op::Dropout { input, mask }, ng))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu(self.value(input));
        let ng = self.needs(input);
        self.push(out, Op::Relu { input }, ng)
    }

    pub fn avg_pool(&mut self, input: ValueId, window: usize) -> Result<ValueId, TensorError> {
        let out = ops::avg_pool(self.value(input), window)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::AvgPool { input, window }, ng))
    }

    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b, ca, cb }, ng))
    }

    pub fn crop(&mut self, input: ValueId, new_h: usize, new_w: usize) -> ValueId {
        let (_, _, full_h, full_w) = self.value(input).dims4().expect("crop input");
        let out = ops::crop_hw(self.value(input), new_h, new_w);
        let ng = self.needs(input);
        self.push(
            out,
            Op::Crop {
                input,
                full_h,
                full_w,
            },
            ng,
        )
    }

    /// Masked softmax cross-entropy, mean over valid pixels; scalar output.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: Arc<Vec<u32>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<ValueId, TensorError> {
        let (loss, probs, n_valid) =
            ops::softmax_cross_entropy(self.value(logits), &targets, &mask)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                mask,
                n_valid,
            },
            ng,
        ))
    }

    /// Masked mean absolute error; scalar output. The target is constant.
    pub fn l1_loss(
        &mut self,
        pred: ValueId,
        target: Tensor<T>,
        mask: Arc<Vec<bool>>,
    ) -> Result<ValueId, TensorError> {
        let (loss, n_valid) = ops::l1_loss(self.value(pred), &target, &mask)?;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target,
                mask,
                n_valid,
            },
            ng,
        ))
    }

    /// Weighted sum to a scalar; turns any tensor into a loss for testing.
    pub fn reduce_dot(
        &mut self,
        input: ValueId,
        coeffs: Tensor<T>,
    ) -> Result<ValueId, TensorError> {
        let s = ops::reduce_dot(self.value(input), &coeffs)?;
        let ng = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::ReduceDot { input, coeffs }, ng))
    }

    /// Propagate gradients from a scalar loss back to every contributing
    /// value. Nodes that no trainable leaf feeds into are skipped.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>, TensorError> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if slots[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = slots[idx].clone().unwrap();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &g,
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *pad,
                    );
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], dx);
                    }
                    if self.needs(*weight) {
                        accumulate(&mut slots[weight.0], dw);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut slots[bias.0], db);
                    }
                }
                Op::Deconv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = ops::deconv2d_backward(
                        &g,
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *pad,
                    );
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], dx);
                    }
                    if self.needs(*weight) {
                        accumulate(&mut slots[weight.0], dw);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut slots[bias.0], db);
                    }
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    saved,
                } => {
                    let (dx, dscale, dshift) =
                        ops::batch_norm_train_backward(&g, saved, self.value(*scale));
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], dx);
                    }
                    if self.needs(*scale) {
                        accumulate(&mut slots[scale.0], dscale);
                    }
                    if self.needs(*shift) {
                        accumulate(&mut slots[shift.0], dshift);
                    }
                }
                Op::Dropout { input, mask } => {
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], ops::mul_mask(&g, mask));
                    }
                }
                Op::Relu { input } => {
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], ops::relu_backward(&g, self.value(*input)));
                    }
                }
                Op::AvgPool { input, window } => {
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], ops::avg_pool_backward(&g, *window));
                    }
                }
                Op::Concat { a, b, ca, cb } => {
                    let (da, db) = ops::concat_channels_backward(&g, *ca, *cb);
                    if self.needs(*a) {
                        accumulate(&mut slots[a.0], da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut slots[b.0], db);
                    }
                }
                Op::Crop {
                    input,
                    full_h,
                    full_w,
                } => {
                    if self.needs(*input) {
                        accumulate(
                            &mut slots[input.0],
                            ops::crop_hw_backward(&g, *full_h, *full_w),
                        );
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                    mask,
                    n_valid,
                } => {
                    if self.needs(*logits) {
                        let dz = ops::softmax_cross_entropy_backward(
                            g.item(),
                            probs,
                            targets,
                            mask,
                            *n_valid,
                        );
                        accumulate(&mut slots[logits.0], dz);
                    }
                }
                Op::L1 {
                    pred,
                    target,
                    mask,
                    n_valid,
                } => {
                    if self.needs(*pred) {
                        let dp = ops::l1_loss_backward(
                            g.item(),
                            self.value(*pred),
                            target,
                            mask,
                            *n_valid,
                        );
                        accumulate(&mut slots[pred.0], dp);
                    }
                }
                Op::ReduceDot { input, coeffs } => {
                    if self.needs(*input) {
                        accumulate(&mut slots[input.0], coeffs.map(|c| c * g.item()));
                    }
                }
            }
        }
        Ok(Gradients { slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::el;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[1, 1, 2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn reduce_dot_gradient_is_coeffs() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[4], &[1., 2., 3., 4.]), true);
        let c = t64(&[4], &[0.5, -1., 2., 0.]);
        let loss = tape.reduce_dot(x, c.clone()).unwrap();
        assert_eq!(tape.value(loss).item(), 0.5 - 2.0 + 6.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), c.data());
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // x used twice via concat(x, x): grad = coeffs_a + coeffs_b per element
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 1, 2], &[3., -1.]), true);
        let cat = tape.concat(x, x).unwrap();
        let loss = tape
            .reduce_dot(cat, t64(&[1, 2, 1, 2], &[1., 10., 100., 1000.]))
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[101., 1010.]);
    }

    #[test]
    fn relu_gate_blocks_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[-2., 0., 5.]), true);
        let r = tape.relu(x);
        let loss = tape.reduce_dot(r, t64(&[3], &[1., 1., 1.])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn non_required_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]), false);
        let w = tape.leaf(t64(&[1, 1, 1, 1], &[2.]), true);
        let b = tape.leaf(t64(&[1], &[0.]), true);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        let loss = tape.reduce_dot(y, Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().item(), 10.0);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let mut tape = Tape::<f32>::new();
        let xv: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = tape.leaf(t_from(&[1, 1, 4, 4], &xv), false);
        let w = tape.leaf(Tensor::full(&[2, 1, 3, 3], 0.11f32), true);
        let b = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(y);
        let p = tape.avg_pool(r, 2).unwrap();
        let loss = tape.reduce_dot(p, Tensor::full(&[1, 2, 2, 2], 0.25f32)).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert!(g1.get(w).unwrap().bit_eq(g2.get(w).unwrap()));
        assert!(g1.get(b).unwrap().bit_eq(g2.get(b).unwrap()));
    }

    fn t_from<T: Elem>(shape: &[usize], data: &[T]) -> Tensor<T> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dropout_backward_uses_same_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[100], 1.0), true);
        let d = tape.dropout(x, 0.5, 99).unwrap();
        let loss = tape.reduce_dot(d, Tensor::full(&[100], 1.0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        // gradient equals the forward mask exactly: 0 where dropped, 2 where kept
        for (&fwd, &bwd) in tape.value(d).data().iter().zip(grads.get(x).unwrap().data()) {
            assert_eq!(fwd, bwd);
        }
    }

    #[test]
    fn eval_path_has_no_tape_interaction() {
        // eval-mode bn is a pure function; confirm value output is independent
        // of any tape history by running against fresh inputs
        let x = t64(&[1, 1, 1, 2], &[0.5, -0.5]);
        let rs = RunningStats {
            mean: vec![0.0],
            var: vec![1.0],
        };
        let scale = Tensor::full(&[1], 1.0);
        let shift = Tensor::zeros(&[1]);
        let y = ops::batch_norm_eval(&x, &scale, &shift, &rs, el(1e-5)).unwrap();
        assert!((y.data()[0] - 0.5 / (1.00001f64).sqrt()).abs() < 1e-12);
    }
}
