//! Parameter storage and reusable layer builders.
//!
//! Parameters live in a [`ParamStore`] keyed by [`ParamId`] and tagged with a
//! [`ParamGroup`]. Layers hold ids plus hyper-parameters and know how to
//! splice themselves into a [`Graph`]; binding a parameter clones its current
//! value into a leaf node and records the pair so an optimizer can harvest
//! gradients after `backward`. Freezing a group makes its leaves constant,
//! stops batch-norm running-stat updates, and turns any optimizer step that
//! covers the group into an error.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::{lit, Scalar};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    PoseHead,
    Aggregator,
    Classifier,
    Generator,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::PoseHead => "pose_head",
            ParamGroup::Aggregator => "aggregator",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Generator => "generator",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by optimizers.
    Trainable,
    /// State carried by layers (batch-norm running stats); never optimized.
    Buffer,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub value: ArrayD<T>,
}

/// Owns every tensor of a model. Cloning snapshots the full state.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    frozen: BTreeSet<ParamGroup>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        kind: ParamKind,
        value: ArrayD<T>,
    ) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.frozen.iter().copied()
    }

    /// Number of scalar entries held by trainable parameters of a group.
    pub fn trainable_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group && p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Clone a trainable parameter into the graph and record the binding.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        let p = &self.params[id.0];
        let trainable = p.kind == ParamKind::Trainable && !self.is_frozen(p.group) && g.training;
        g.bind(id.0, p.value.clone(), trainable)
    }

    /// Gradients of bound parameters, summed over duplicate bindings and
    /// ordered by `ParamId`.
    pub fn collect_grads(&self, g: &Graph<T>) -> Vec<(ParamId, ArrayD<T>)> {
        let mut acc: std::collections::BTreeMap<usize, ArrayD<T>> =
            std::collections::BTreeMap::new();
        for &(slot, node) in g.bound_slots() {
            if let Some(grad) = g.grad(node) {
                match acc.get_mut(&slot) {
                    Some(sum) => *sum += grad,
                    None => {
                        acc.insert(slot, grad.clone());
                    }
                }
            }
        }
        acc.into_iter().map(|(s, v)| (ParamId(s), v)).collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub(crate) fn bound_slots(&self) -> &[(usize, NodeId)] {
        &self.bound
    }
}

/// He fan-out normal initialization for convolution kernels.
pub fn he_conv<T: Scalar>(
    rng: &mut ChaCha20Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> ArrayD<T> {
    let std = (2.0 / (c_out * k * k) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| {
        lit::<T>(normal_sample(rng) * std)
    })
}

/// He fan-out normal initialization for linear weights `(out, in)`.
pub fn he_linear<T: Scalar>(rng: &mut ChaCha20Rng, out: usize, input: usize) -> ArrayD<T> {
    let std = (2.0 / out as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[out, input]), |_| lit::<T>(normal_sample(rng) * std))
}

/// Standard normal via Box-Muller; keeps the seed path free of distribution
/// crate version details.
pub fn normal_sample(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Convolution layer descriptor.
#[derive(Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            group,
            ParamKind::Trainable,
            he_conv::<T>(rng, c_out, c_in, k),
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                group,
                ParamKind::Trainable,
                ArrayD::zeros(IxDyn(&[c_out])),
            )
        });
        Conv2dLayer {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = store.bind(g, self.weight);
        let b = self.bias.map(|id| store.bind(g, id));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization layer with running statistics buffers.
#[derive(Clone)]
pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub group: ParamGroup,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        channels: usize,
    ) -> Self {
        let gamma = store.register(
            format!("{name}.gamma"),
            group,
            ParamKind::Trainable,
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
        );
        let beta = store.register(
            format!("{name}.beta"),
            group,
            ParamKind::Trainable,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_mean = store.register(
            format!("{name}.running_mean"),
            group,
            ParamKind::Buffer,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_var = store.register(
            format!("{name}.running_var"),
            group,
            ParamKind::Buffer,
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
        );
        BatchNorm2dLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            group,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train mode uses batch statistics and folds them into the running
    /// buffers; frozen groups and eval graphs use the running statistics.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
    ) -> NodeId {
        let gamma = store.bind(g, self.gamma);
        let beta = store.bind(g, self.beta);
        let rm = store
            .value(self.running_mean)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let rv = store
            .value(self.running_var)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let use_batch = g.training && !store.is_frozen(self.group);
        let count = {
            let s = g.value(x).shape();
            s[0] * s[2] * s[3]
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, &rm, &rv, lit::<T>(self.eps), use_batch);
        if let Some((mean, var)) = stats {
            let mom = lit::<T>(self.momentum);
            let keep = T::one() - mom;
            // Unbiased variance goes into the running buffer.
            let unbias = if count > 1 {
                lit::<T>(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            update_running(store.value_mut(self.running_mean), &mean, keep, mom, T::one());
            update_running(store.value_mut(self.running_var), &var, keep, mom, unbias);
        }
        y
    }
}

fn update_running<T: Scalar>(buf: &mut ArrayD<T>, batch: &Array1<T>, keep: T, mom: T, scale: T) {
    for (b, &v) in buf.iter_mut().zip(batch.iter()) {
        *b = *b * keep + v * scale * mom;
    }
}

/// Fully connected layer descriptor.
#[derive(Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            group,
            ParamKind::Trainable,
            he_linear::<T>(rng, output, input),
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                group,
                ParamKind::Trainable,
                ArrayD::zeros(IxDyn(&[output])),
            )
        });
        LinearLayer { weight, bias }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = store.bind(g, self.weight);
        let b = self.bias.map(|id| store.bind(g, id));
        g.linear(x, w, b)
    }
}

/// Byte-level equality of a group's tensors across two stores; used by the
/// freezing audits.
pub fn group_values_equal<T: Scalar>(
    a: &ParamStore<T>,
    b: &ParamStore<T>,
    group: ParamGroup,
) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::invalid("stores have different layouts"));
    }
    for (id, pa) in a.iter() {
        if pa.group != group {
            continue;
        }
        let pb = b.param(id);
        if pa.value.shape() != pb.value.shape() {
            return Ok(false);
        }
        let same = pa
            .value
            .iter()
            .zip(pb.value.iter())
            .all(|(&x, &y)| x == y || (x.is_nan() && y.is_nan()));
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn frozen_group_binds_as_constant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(1, "init", 0);
        let layer = LinearLayer::new(&mut store, &mut rng, "fc", ParamGroup::PoseHead, 3, 2, true);
        let mut g = Graph::new(true);
        let w = store.bind(&mut g, layer.weight);
        assert!(g.needs_grad(w));
        store.freeze(ParamGroup::PoseHead);
        let mut g2 = Graph::new(true);
        let w2 = store.bind(&mut g2, layer.weight);
        assert!(!g2.needs_grad(w2));
    }

    #[test]
    fn bn_running_stats_update_only_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2dLayer::new(&mut store, "bn", ParamGroup::Backbone, 2);
        let x = ndarray::Array4::from_elem((2, 2, 3, 3), 4.0).into_dyn();

        let mut g = Graph::new(false);
        let xi = g.input(x.clone());
        bn.apply(&mut g, &mut store, xi);
        assert_eq!(store.value(bn.running_mean)[[0]], 0.0);

        let mut g = Graph::new(true);
        let xi = g.input(x);
        bn.apply(&mut g, &mut store, xi);
        assert!((store.value(bn.running_mean)[[0]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn trainable_count_ignores_buffers() {
        let mut store = ParamStore::<f64>::new();
        let _bn = BatchNorm2dLayer::new(&mut store, "bn", ParamGroup::Backbone, 8);
        assert_eq!(store.trainable_count(ParamGroup::Backbone), 16);
    }
}
