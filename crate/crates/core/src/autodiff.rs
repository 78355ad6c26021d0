//! Reverse-mode differentiation over a recording tape.
//!
//! Every differentiable operator in the crate is written once against
//! [`Tape`]; plain evaluation simply never calls [`Tape::backward`]. Values
//! are shared through `Rc`, so the backward closures only capture metadata
//! (pad modes, index tables) and read their inputs from the tape.

use std::cell::RefCell;
use std::hash::{Hash, Hasher};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::ops::attend::{attend, attend_backward, AttendPhases, BiasIndex, KeySet};
use crate::ops::conv::{conv2d, conv2d_backward, conv2d_depthwise, conv2d_depthwise_backward, PadMode};
use crate::ops::linalg::{
    add_bias, bias_backward, gelu, gelu_backward, linear_project, matmul_backward, softmax_rows,
    softmax_rows_backward,
};
use crate::ops::pool::{avg_pool_adaptive, avg_pool_backward, max_pool_argmax, max_pool_backward};
use crate::ops::spatial::{gather_rows, gather_sources, pixel_shuffle, pixel_unshuffle, scatter_rows};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct BackCtx<'a, T> {
    grad: &'a Tensor<T>,
    inputs: &'a [Rc<Tensor<T>>],
    needs: &'a [bool],
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

/// Recording of a computation, in creation order.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    discrete: RefCell<std::collections::hash_map::DefaultHasher>,
    probe: RefCell<Option<WeightProbe<T>>>,
    reach: std::cell::Cell<usize>,
}

/// Observer installed with [`Tape::set_probe`]; receives every attention
/// call's normalized weights as `(call, query, weights)`.
pub type WeightProbe<T> = Box<dyn FnMut(usize, usize, &[T])>;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            discrete: RefCell::new(Default::default()),
            probe: RefCell::new(None),
            reach: std::cell::Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, leaf_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = leaf_grad || parents.iter().any(|&p| nodes[p].needs_grad);
        let backward = if needs_grad { backward } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn op(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        self.push(value, parents.iter().map(|v| v.0).collect(), Some(backward), false)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn set_probe(&self, probe: WeightProbe<T>) {
        *self.probe.borrow_mut() = Some(probe);
    }

    pub fn take_probe(&self) -> Option<WeightProbe<T>> {
        self.probe.borrow_mut().take()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Hash of every discrete choice made so far (rounded gather sources,
    /// max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn discrete_signature(&self) -> u64 {
        self.discrete.borrow().finish()
    }

    /// Largest per-axis distance between an output pixel of any gather so
    /// far and the pixel it read from.
    pub fn gather_reach(&self) -> usize {
        self.reach.get()
    }

    fn note_discrete(&self, choices: &[usize]) {
        choices.hash(&mut *self.discrete.borrow_mut());
    }

    /// Reverse sweep from a scalar (one-element) output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return shape_err("backward", format!("loss has shape {:?}", nodes[loss.0].value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<Rc<Tensor<T>>> = node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let ctx = BackCtx {
                grad: &grad,
                inputs: &inputs,
                needs: &needs,
            };
            let parent_grads = backward(&ctx)?;
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    // ---- operators ------------------------------------------------------

    /// `x · w`, counted as a linear projection.
    pub fn matmul(&self, x: Var, w: Var) -> Result<Var> {
        let out = linear_project(&self.value(x), &self.value(w))?;
        Ok(self.op(
            out,
            &[x, w],
            Box::new(|c| {
                let (dx, dw) = matmul_backward(&c.inputs[0], &c.inputs[1], c.grad, c.needs)?;
                Ok(vec![dx, dw])
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.op(out, &[a, b], Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())]))))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.op(
            out,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.scale(-T::one()))])),
        ))
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return shape_err("scale_by", format!("scale has shape {:?}", sv.shape()));
        }
        let out = self.value(x).scale(sv.item());
        Ok(self.op(
            out,
            &[x, s],
            Box::new(|c| {
                let dx = c.needs[0].then(|| c.grad.scale(c.inputs[1].item()));
                let ds = if c.needs[1] {
                    let dot: T = c.grad.data().iter().zip(c.inputs[0].data()).map(|(&g, &v)| g * v).sum();
                    Some(Tensor::full(c.inputs[1].shape(), dot))
                } else {
                    None
                };
                Ok(vec![dx, ds])
            }),
        ))
    }

    pub fn mul_const(&self, x: Var, k: T) -> Result<Var> {
        let out = self.value(x).scale(k);
        Ok(self.op(out, &[x], Box::new(move |c| Ok(vec![Some(c.grad.scale(k))]))))
    }

    /// Adds a `[D]` bias to every row / pixel of a tensor whose last axis is `D`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = add_bias(&self.value(x), &self.value(b))?;
        Ok(self.op(
            out,
            &[x, b],
            Box::new(|c| {
                let d = c.inputs[1].len();
                Ok(vec![Some(c.grad.clone()), c.needs[1].then(|| bias_backward(c.grad, d))])
            }),
        ))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = softmax_rows(&self.value(x))?;
        let p = out.clone();
        Ok(self.op(out, &[x], Box::new(move |c| Ok(vec![Some(softmax_rows_backward(&p, c.grad)?)]))))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let out = gelu(&self.value(x));
        Ok(self.op(out, &[x], Box::new(|c| Ok(vec![Some(gelu_backward(&c.inputs[0], c.grad)?)]))))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let orig = self.shape(x);
        Ok(self.op(out, &[x], Box::new(move |c| Ok(vec![Some(c.grad.reshape(&orig)?)]))))
    }

    pub fn conv2d_depthwise(&self, x: Var, kernel: Var, pad: PadMode) -> Result<Var> {
        let out = conv2d_depthwise(&self.value(x), &self.value(kernel), pad)?;
        Ok(self.op(
            out,
            &[x, kernel],
            Box::new(move |c| {
                let (dx, dk) = conv2d_depthwise_backward(&c.inputs[0], &c.inputs[1], pad, c.grad)?;
                Ok(vec![Some(dx), Some(dk)])
            }),
        ))
    }

    pub fn conv2d(&self, x: Var, weight: Var, pad: PadMode) -> Result<Var> {
        let out = conv2d(&self.value(x), &self.value(weight), pad)?;
        Ok(self.op(
            out,
            &[x, weight],
            Box::new(move |c| {
                let (dx, dw) = conv2d_backward(&c.inputs[0], &c.inputs[1], pad, c.grad)?;
                Ok(vec![Some(dx), Some(dw)])
            }),
        ))
    }

    pub fn avg_pool(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = avg_pool_adaptive(&self.value(x), out_h, out_w)?;
        Ok(self.op(
            out,
            &[x],
            Box::new(|c| Ok(vec![Some(avg_pool_backward(c.inputs[0].shape(), c.grad)?)])),
        ))
    }

    pub fn max_pool(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let arg = max_pool_argmax(&xv, out_h, out_w)?;
        self.note_discrete(&arg);
        let c = xv.shape()[2];
        let data = arg.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(vec![out_h, out_w, c], data)?;
        let arg: Arc<[usize]> = arg.into();
        Ok(self.op(
            out,
            &[x],
            Box::new(move |c| Ok(vec![Some(max_pool_backward(c.inputs[0].shape(), &arg, c.grad)?)])),
        ))
    }

    /// Pixel gather at rounded, clamped coordinates. Rounding is piecewise
    /// constant, so no gradient flows into `coords`.
    pub fn gather_hw(&self, x: Var, coords: Var) -> Result<Var> {
        let xv = self.value(x);
        let (h, w, ch) = xv.dims3("gather_hw")?;
        let src = gather_sources(&self.value(coords), h, w)?;
        self.note_discrete(&src);
        let far = src
            .iter()
            .enumerate()
            .map(|(i, &s)| (i / w).abs_diff(s / w).max((i % w).abs_diff(s % w)))
            .max()
            .unwrap_or(0);
        self.reach.set(self.reach.get().max(far));
        let out = gather_rows(&xv, &src, ch);
        let src: Arc<[usize]> = src.into();
        Ok(self.op(
            out,
            &[x, coords],
            Box::new(move |c| Ok(vec![Some(scatter_rows(c.inputs[0].shape(), &src, c.grad)), None])),
        ))
    }

    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(&self.value(x), r)?;
        Ok(self.op(out, &[x], Box::new(move |c| Ok(vec![Some(pixel_unshuffle(c.grad, r)?)]))))
    }

    /// Indexed attention of `q` over rows of `k`/`v`; see [`crate::ops::attend`].
    pub fn attend(
        &self,
        q: Var,
        k: Var,
        v: Var,
        keys: &KeySet,
        bias: Option<(Var, &BiasIndex)>,
        phases: AttendPhases,
    ) -> Result<Var> {
        let bias_val = bias.map(|(b, _)| self.value(b));
        let call = self.len();
        let mut probe_slot = self.probe.borrow_mut();
        let mut forward = probe_slot.as_mut().map(|p| move |i: usize, w: &[T]| p(call, i, w));
        let out = attend(
            &self.value(q),
            &self.value(k),
            &self.value(v),
            keys,
            bias_val.as_deref().zip(bias.map(|(_, i)| i)),
            phases,
            forward.as_mut().map(|f| f as &mut dyn FnMut(usize, &[T])),
        )?;
        drop(probe_slot);
        let keys = keys.clone();
        let bias_idx = bias.map(|(_, i)| i.clone());
        let mut parents = vec![q, k, v];
        if let Some((b, _)) = bias {
            parents.push(b);
        }
        Ok(self.op(
            out,
            &parents,
            Box::new(move |c| {
                let bias = bias_idx.as_ref().map(|i| (&*c.inputs[3], i));
                let g = attend_backward(&c.inputs[0], &c.inputs[1], &c.inputs[2], &keys, bias, c.grad)?;
                let mut out = vec![Some(g.dq), Some(g.dk), Some(g.dv)];
                if bias.is_some() {
                    out.push(g.dbias);
                }
                Ok(out)
            }),
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.op(
            out,
            &[x],
            Box::new(|c| Ok(vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))])),
        ))
    }

    /// `Σ x ∘ weights` against a fixed weight tensor.
    pub fn dot_const(&self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return shape_err("dot_const", format!("{:?} vs {:?}", xv.shape(), weights.shape()));
        }
        let s: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let w = weights.clone();
        Ok(self.op(Tensor::scalar(s), &[x], Box::new(move |c| Ok(vec![Some(w.scale(c.grad.item()))]))))
    }

    /// Mean absolute error against a fixed target.
    pub fn l1_loss(&self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err("l1_loss", format!("{:?} vs {:?}", xv.shape(), target.shape()));
        }
        let n = T::of_usize(xv.len());
        let s: T = xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let t = target.clone();
        Ok(self.op(
            Tensor::scalar(s / n),
            &[x],
            Box::new(move |c| {
                let g = c.grad.item() / n;
                let d = c.inputs[0].zip_map(&t, "l1_loss", |a, b| {
                    if a > b {
                        g
                    } else if a < b {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                Ok(vec![Some(d)])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0], &[1.0]]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let y2 = tape.scale_by(y, y).unwrap();
        let g = tape.backward(y2).unwrap();
        // d/dx (Σx)^2 = 2Σx = 4
        assert_eq!(g.wrt(x).data(), &[4.0, 4.0, 4.0]);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
