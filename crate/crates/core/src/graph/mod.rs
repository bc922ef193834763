//! Reverse-mode autodiff over dynamically shaped `ndarray` tensors.
//!
//! A [`Graph`] is a disposable tape: model code pushes operations eagerly
//! (values are computed on push), `backward` then walks the tape once in
//! reverse and accumulates gradients into every node that needs them.
//! Parameter leaves are bound through `ParamStore::bind`, which records the
//! (slot, node) pair so an optimizer can collect parameter gradients after
//! the backward pass. All reductions run in a fixed serial order, so a step
//! is bit-reproducible for a given seed.

mod agg;
mod conv;
mod dense;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, IxDyn};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    SelectRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<NodeId>,
    },
    RowMix {
        pred: NodeId,
        use_pred: Vec<bool>,
    },
    DotConst {
        x: NodeId,
        w: ArrayD<T>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<T>,
        invstd: Array1<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Resize {
        x: NodeId,
        rows: Vec<(usize, usize, T)>,
        cols: Vec<(usize, usize, T)>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    AttentionPool {
        f: NodeId,
        m: NodeId,
    },
    BilinearPool {
        x: NodeId,
    },
    SignedSqrt {
        x: NodeId,
    },
    L2NormRows {
        x: NodeId,
        norms: Vec<T>,
    },
    SoftAssign {
        f: NodeId,
        bank: NodeId,
        inv_temp: T,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    CosineLogits {
        x: NodeId,
        w: NodeId,
        scale: NodeId,
        x_norms: Vec<T>,
        w_norms: Vec<T>,
    },
    MeanRowsGroups {
        x: NodeId,
        groups: Vec<Vec<usize>>,
    },
    NegSqDist {
        q: NodeId,
        p: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Array2<T>,
    },
    BceMean {
        pred: NodeId,
        target: ArrayD<T>,
    },
}

pub struct Graph<T: Scalar> {
    vals: Vec<ArrayD<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    needs: Vec<bool>,
    ops: Vec<Op<T>>,
    /// (parameter slot, leaf node) bindings recorded by `ParamStore::bind`.
    pub(crate) bound: Vec<(usize, NodeId)>,
    pub training: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Graph {
            vals: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
            bound: Vec::new(),
            training,
        }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.vals[id.0]
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.vals[id.0];
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    pub(crate) fn push(&mut self, val: ArrayD<T>, op: Op<T>, needs: bool) -> NodeId {
        self.vals.push(val);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs);
        NodeId(self.vals.len() - 1)
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    /// Constant leaf; gradients are not tracked through it.
    pub fn input(&mut self, val: ArrayD<T>) -> NodeId {
        self.push(val, Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is available after `backward`.
    pub fn variable(&mut self, val: ArrayD<T>) -> NodeId {
        self.push(val, Op::Leaf, true)
    }

    pub(crate) fn bind(&mut self, slot: usize, val: ArrayD<T>, trainable: bool) -> NodeId {
        let id = self.push(val, Op::Leaf, trainable);
        self.bound.push((slot, id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.vals[a.0].shape(),
            self.vals[b.0].shape(),
            "add operands must agree in shape"
        );
        let val = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.any_needs(&[a, b]);
        self.push(val, Op::Add { a, b }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let val = self.vals[x.0].mapv(|v| v * c);
        let needs = self.needs[x.0];
        self.push(val, Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut val = self.vals[x.0].clone();
        if let Some(slice) = val.as_slice_mut() {
            let zero = T::zero();
            for v in slice {
                if *v < zero {
                    *v = zero;
                }
            }
        } else {
            val.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
        let needs = self.needs[x.0];
        self.push(val, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let val = self.vals[x.0].mapv(|v| one / (one + (-v).exp()));
        let needs = self.needs[x.0];
        self.push(val, Op::Sigmoid { x }, needs)
    }

    /// Gather rows (leading-axis slices) of `x` in the given order.
    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let src = &self.vals[x.0];
        let mut shape = src.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        shape[0] = idx.len();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let src_sl = src.as_slice().expect("standard layout");
            let out_sl = out.as_slice_mut().expect("standard layout");
            for (o, &i) in idx.iter().enumerate() {
                out_sl[o * row..(o + 1) * row].copy_from_slice(&src_sl[i * row..(i + 1) * row]);
            }
        }
        let needs = self.needs[x.0];
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Stack inputs along the leading axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_rows needs at least one input");
        let tail = self.vals[xs[0].0].shape()[1..].to_vec();
        let mut rows = 0usize;
        for &x in xs {
            assert_eq!(self.vals[x.0].shape()[1..], tail[..], "trailing dims must agree");
            rows += self.vals[x.0].shape()[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let stride: usize = tail.iter().product();
        let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
        {
            let out_sl = out.as_slice_mut().expect("standard layout");
            let mut at = 0usize;
            for &x in xs {
                let src = self.vals[x.0].as_slice().expect("standard layout");
                out_sl[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
            debug_assert_eq!(at, rows * stride);
        }
        let needs = self.any_needs(xs);
        self.push(out, Op::ConcatRows { xs: xs.to_vec() }, needs)
    }

    /// Per-row choice between a differentiable prediction and a fixed tensor
    /// of the same shape. Rows with `use_pred[n] == false` come from `fixed`
    /// and block gradient flow.
    pub fn row_mix(&mut self, pred: NodeId, fixed: &ArrayD<T>, use_pred: &[bool]) -> NodeId {
        let src = &self.vals[pred.0];
        assert_eq!(src.shape(), fixed.shape(), "row_mix shapes must agree");
        assert_eq!(src.shape()[0], use_pred.len(), "row_mix mask length");
        let row: usize = src.shape()[1..].iter().product();
        let mut out = fixed.clone();
        {
            let src_sl = src.as_slice().expect("standard layout");
            let out_sl = out.as_slice_mut().expect("standard layout");
            for (n, &take) in use_pred.iter().enumerate() {
                if take {
                    out_sl[n * row..(n + 1) * row].copy_from_slice(&src_sl[n * row..(n + 1) * row]);
                }
            }
        }
        let needs = self.needs[pred.0];
        self.push(
            out,
            Op::RowMix {
                pred,
                use_pred: use_pred.to_vec(),
            },
            needs,
        )
    }

    /// Scalar projection `sum(x * w)` against a constant; the reduction used
    /// by gradient-check harnesses.
    pub fn dot_const(&mut self, x: NodeId, w: ArrayD<T>) -> NodeId {
        assert_eq!(self.vals[x.0].shape(), w.shape());
        let s = self.vals[x.0]
            .iter()
            .zip(w.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let val = ArrayD::from_elem(IxDyn(&[]), s);
        let needs = self.needs[x.0];
        self.push(val, Op::DotConst { x, w }, needs)
    }

    /// Run reverse-mode accumulation from a scalar loss node. Consumes the
    /// tape's operation records; a graph supports one backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::Numerical(format!(
                "backward root must be scalar, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let shape = self.vals[loss.0].raw_dim();
        self.grads[loss.0] = Some(ArrayD::from_elem(shape, T::one()));
        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            backward_op(&self.vals, &mut self.grads, &self.needs, i, op, g);
        }
        Ok(())
    }
}

pub(crate) fn accumulate<T: Scalar>(
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    id: NodeId,
    delta: ArrayD<T>,
) {
    if !needs[id.0] {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn backward_op<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    out: usize,
    op: Op<T>,
    g: ArrayD<T>,
) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(grads, needs, a, g.clone());
            accumulate(grads, needs, b, g);
        }
        Op::Scale { x, c } => {
            accumulate(grads, needs, x, g.mapv(|v| v * c));
        }
        Op::Relu { x } => {
            let mut dx = g;
            dx.zip_mut_with(&vals[x.0], |d, &v| {
                if v <= T::zero() {
                    *d = T::zero();
                }
            });
            accumulate(grads, needs, x, dx);
        }
        Op::Sigmoid { x } => {
            let mut dx = g;
            dx.zip_mut_with(&vals[out], |d, &y| *d = *d * y * (T::one() - y));
            accumulate(grads, needs, x, dx);
        }
        Op::SelectRows { x, idx } => {
            if needs[x.0] {
                let mut dx = ArrayD::zeros(vals[x.0].raw_dim());
                let row: usize = vals[x.0].shape()[1..].iter().product();
                {
                    let g_sl = g.as_slice().expect("standard layout");
                    let dx_sl = dx.as_slice_mut().expect("standard layout");
                    for (o, &i) in idx.iter().enumerate() {
                        for r in 0..row {
                            dx_sl[i * row + r] += g_sl[o * row + r];
                        }
                    }
                }
                accumulate(grads, needs, x, dx);
            }
        }
        Op::ConcatRows { xs } => {
            let g_sl = g.as_slice().expect("standard layout");
            let mut at = 0usize;
            for x in xs {
                let len = vals[x.0].len();
                if needs[x.0] {
                    let delta = ArrayD::from_shape_vec(
                        vals[x.0].raw_dim(),
                        g_sl[at..at + len].to_vec(),
                    )
                    .expect("shape preserved");
                    accumulate(grads, needs, x, delta);
                }
                at += len;
            }
        }
        Op::RowMix { pred, use_pred } => {
            if needs[pred.0] {
                let mut dp = g;
                let row: usize = vals[pred.0].shape()[1..].iter().product();
                {
                    let dp_sl = dp.as_slice_mut().expect("standard layout");
                    for (n, &take) in use_pred.iter().enumerate() {
                        if !take {
                            dp_sl[n * row..(n + 1) * row].fill(T::zero());
                        }
                    }
                }
                accumulate(grads, needs, pred, dp);
            }
        }
        Op::DotConst { x, w } => {
            let gval = *g.iter().next().expect("scalar grad");
            accumulate(grads, needs, x, w.mapv(|v| v * gval));
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            conv::backward_conv2d(vals, grads, needs, out, x, w, b, stride, pad, g);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            batch_stats,
        } => {
            conv::backward_batch_norm(
                vals,
                grads,
                needs,
                x,
                gamma,
                beta,
                &mean,
                &invstd,
                batch_stats,
                g,
            );
        }
        Op::MaxPool { x, argmax } => {
            conv::backward_max_pool(vals, grads, needs, x, &argmax, g);
        }
        Op::Resize { x, rows, cols } => {
            conv::backward_resize(vals, grads, needs, x, &rows, &cols, g);
        }
        Op::GlobalAvgPool { x } => {
            agg::backward_global_avg_pool(vals, grads, needs, x, g);
        }
        Op::AttentionPool { f, m } => {
            agg::backward_attention_pool(vals, grads, needs, f, m, g);
        }
        Op::BilinearPool { x } => {
            agg::backward_bilinear_pool(vals, grads, needs, x, g);
        }
        Op::SignedSqrt { x } => {
            agg::backward_signed_sqrt(vals, grads, needs, x, g);
        }
        Op::L2NormRows { x, norms } => {
            agg::backward_l2_norm_rows(vals, grads, needs, out, x, &norms, g);
        }
        Op::SoftAssign { f, bank, inv_temp } => {
            agg::backward_soft_assign(vals, grads, needs, out, f, bank, inv_temp, g);
        }
        Op::Linear { x, w, b } => {
            dense::backward_linear(vals, grads, needs, x, w, b, g);
        }
        Op::CosineLogits {
            x,
            w,
            scale,
            x_norms,
            w_norms,
        } => {
            dense::backward_cosine_logits(vals, grads, needs, x, w, scale, &x_norms, &w_norms, g);
        }
        Op::MeanRowsGroups { x, groups } => {
            dense::backward_mean_rows_groups(vals, grads, needs, x, &groups, g);
        }
        Op::NegSqDist { q, p } => {
            dense::backward_neg_sqdist(vals, grads, needs, q, p, g);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            dense::backward_cross_entropy(grads, needs, logits, &targets, &probs, g);
        }
        Op::BceMean { pred, target } => {
            dense::backward_bce_mean(vals, grads, needs, pred, &target, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn add_scale_backward() {
        let mut g = Graph::<f64>::new(true);
        let a = g.variable(array![1.0, 2.0].into_dyn());
        let b = g.variable(array![3.0, 4.0].into_dyn());
        let s = g.add(a, b);
        let s2 = g.scale(s, 2.0);
        let w = ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0);
        let loss = g.dot_const(s2, w);
        assert_eq!(g.scalar(loss), 20.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn relu_masks_negative_side() {
        let mut g = Graph::<f64>::new(true);
        let x = g.variable(array![-1.0, 2.0].into_dyn());
        let y = g.relu(x);
        let w = ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0);
        let loss = g.dot_const(y, w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.variable(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].into_dyn());
        let y = g.select_rows(x, &[2, 0]);
        assert_eq!(
            g.value(y).as_slice().unwrap(),
            &[5.0, 6.0, 1.0, 2.0],
            "rows gathered in order"
        );
        let w = ArrayD::from_elem(ndarray::IxDyn(&[2, 2]), 1.0);
        let loss = g.dot_const(y, w);
        g.backward(loss).unwrap();
        assert_eq!(
            g.grad(x).unwrap().as_slice().unwrap(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn row_mix_routes_gradient_only_to_predicted_rows() {
        let mut g = Graph::<f64>::new(true);
        let pred = g.variable(array![[1.0], [2.0]].into_dyn());
        let fixed = array![[10.0], [20.0]].into_dyn();
        let y = g.row_mix(pred, &fixed, &[true, false]);
        assert_eq!(g.value(y).as_slice().unwrap(), &[1.0, 20.0]);
        let w = ArrayD::from_elem(ndarray::IxDyn(&[2, 1]), 1.0);
        let loss = g.dot_const(y, w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(pred).unwrap().as_slice().unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new(true);
        let x = g.variable(array![1.0, 2.0].into_dyn());
        assert!(g.backward(x).is_err());
    }
}
