//! SGD and Adam over parameter groups, with staged step-decay schedules.
//!
//! An optimizer is constructed over an explicit set of [`ParamGroup`]s.
//! Stepping it while any covered group is frozen in the store is an error;
//! that is the enforcement half of the two-phase training contract.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{ParamGroup, ParamStore};
use crate::scalar::{lit, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyper-parameters as they appear in configuration files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: 0.9,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.9,
            weight_decay,
        }
    }
}

/// Staged step decay: training runs `stages` stages of `epochs_per_stage`
/// epochs, multiplying the learning rate by `gamma` after each stage.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub epochs_per_stage: usize,
    pub stages: usize,
    pub gamma: f64,
}

impl ScheduleSpec {
    pub fn new(epochs_per_stage: usize, stages: usize, gamma: f64) -> Self {
        ScheduleSpec {
            epochs_per_stage,
            stages,
            gamma,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_per_stage * self.stages
    }

    /// Learning-rate multiplier for a zero-based epoch index.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let stage = (epoch / self.epochs_per_stage.max(1)).min(self.stages.saturating_sub(1));
        self.gamma.powi(stage as i32)
    }
}

enum State<T: Scalar> {
    Sgd {
        velocity: BTreeMap<usize, ArrayD<T>>,
    },
    Adam {
        m: BTreeMap<usize, ArrayD<T>>,
        v: BTreeMap<usize, ArrayD<T>>,
        t: u64,
    },
}

/// Gradient-descent driver over the trainable parameters of a group set.
pub struct Optimizer<T: Scalar> {
    spec: OptimizerSpec,
    groups: BTreeSet<ParamGroup>,
    lr: f64,
    state: State<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(spec: OptimizerSpec, groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        let state = match spec.kind {
            OptimizerKind::Sgd => State::Sgd {
                velocity: BTreeMap::new(),
            },
            OptimizerKind::Adam => State::Adam {
                m: BTreeMap::new(),
                v: BTreeMap::new(),
                t: 0,
            },
        };
        Optimizer {
            spec,
            groups: groups.into_iter().collect(),
            lr: spec.lr,
            state,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn covers(&self, group: ParamGroup) -> bool {
        self.groups.contains(&group)
    }

    /// Apply one update from the gradients recorded in `graph`.
    ///
    /// Errors if any covered group has been frozen in the store; the caller
    /// must rebuild its optimizers after freezing instead of reusing one that
    /// spans immutable parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, graph: &Graph<T>) -> Result<()> {
        for &group in &self.groups {
            if store.is_frozen(group) {
                return Err(Error::FrozenParamUpdate(group.to_string()));
            }
        }
        let grads = store.collect_grads(graph);
        let lr = lit::<T>(self.lr);
        let wd = lit::<T>(self.spec.weight_decay);
        match &mut self.state {
            State::Sgd { velocity } => {
                let mom = lit::<T>(self.spec.momentum);
                for (id, mut grad) in grads {
                    if !self.groups.contains(&store.param(id).group) {
                        continue;
                    }
                    if self.spec.weight_decay != 0.0 {
                        grad.zip_mut_with(store.value(id), |g, &w| *g += wd * w);
                    }
                    let vel = velocity
                        .entry(id.index())
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    vel.zip_mut_with(&grad, |v, &g| *v = *v * mom + g);
                    store
                        .value_mut(id)
                        .zip_mut_with(vel, |w, &v| *w = *w - lr * v);
                }
            }
            State::Adam { m, v, t } => {
                *t += 1;
                let beta1 = lit::<T>(0.9);
                let beta2 = lit::<T>(0.999);
                let eps = lit::<T>(1e-8);
                let bc1 = T::one() - lit::<T>(0.9f64.powi(*t as i32));
                let bc2 = T::one() - lit::<T>(0.999f64.powi(*t as i32));
                for (id, mut grad) in grads {
                    if !self.groups.contains(&store.param(id).group) {
                        continue;
                    }
                    if self.spec.weight_decay != 0.0 {
                        grad.zip_mut_with(store.value(id), |g, &w| *g += wd * w);
                    }
                    let m_t = m
                        .entry(id.index())
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    let v_t = v
                        .entry(id.index())
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    m_t.zip_mut_with(&grad, |a, &g| *a = beta1 * *a + (T::one() - beta1) * g);
                    v_t.zip_mut_with(&grad, |a, &g| *a = beta2 * *a + (T::one() - beta2) * g * g);
                    let value = store.value_mut(id);
                    for ((w, &mi), &vi) in value.iter_mut().zip(m_t.iter()).zip(v_t.iter()) {
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Check that a loss value is usable before stepping; training aborts
    /// loudly on NaN/inf rather than propagating poison.
    pub fn guard_finite(&self, label: &str, value: T) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!(
                "{label} is not finite ({value}); aborting training"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LinearLayer, ParamId, ParamKind};
    use crate::util::rng_for;
    use ndarray::arr2;

    fn quadratic_step(opt: &mut Optimizer<f64>, store: &mut ParamStore<f64>, wid: ParamId) -> f64 {
        // loss = 0.5 * sum(w^2): gradient is w itself.
        let mut g = Graph::new(true);
        let w = store.bind(&mut g, wid);
        let half = g.scale(w, 0.5);
        let probe = store.value(wid).clone();
        let loss = g.dot_const(half, probe);
        let val = g.scalar(loss);
        g.backward(loss).unwrap();
        opt.step(store, &g).unwrap();
        val
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let wid = store.register(
            "w",
            ParamGroup::Classifier,
            ParamKind::Trainable,
            arr2(&[[1.0, -2.0], [3.0, 0.5]]).into_dyn(),
        );
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1, 0.0), [ParamGroup::Classifier]);
        let first = quadratic_step(&mut opt, &mut store, wid);
        let mut last = first;
        // momentum makes single steps non-monotone; check overall convergence
        for _ in 0..60 {
            last = quadratic_step(&mut opt, &mut store, wid);
        }
        assert!(last < first * 0.05, "first {first}, last {last}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let wid = store.register(
            "w",
            ParamGroup::Generator,
            ParamKind::Trainable,
            arr2(&[[2.0, -1.0]]).into_dyn(),
        );
        let mut opt = Optimizer::new(OptimizerSpec::adam(0.05, 0.0), [ParamGroup::Generator]);
        let first = quadratic_step(&mut opt, &mut store, wid);
        let mut last = first;
        for _ in 0..60 {
            last = quadratic_step(&mut opt, &mut store, wid);
        }
        assert!(last < first * 0.2);
    }

    #[test]
    fn step_on_frozen_group_errors() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(3, "init", 0);
        let layer =
            LinearLayer::new(&mut store, &mut rng, "head", ParamGroup::PoseHead, 2, 2, false);
        store.freeze(ParamGroup::PoseHead);
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1, 0.0), [ParamGroup::PoseHead]);
        let mut g = Graph::new(true);
        let w = store.bind(&mut g, layer.weight);
        let probe = store.value(layer.weight).clone();
        let loss = g.dot_const(w, probe);
        g.backward(loss).unwrap();
        let err = opt.step(&mut store, &g).unwrap_err();
        assert!(matches!(err, Error::FrozenParamUpdate(_)));
    }

    #[test]
    fn schedule_decays_by_stage() {
        let s = ScheduleSpec::new(10, 3, 0.1);
        assert_eq!(s.total_epochs(), 30);
        assert!((s.lr_factor(0) - 1.0).abs() < 1e-12);
        assert!((s.lr_factor(9) - 1.0).abs() < 1e-12);
        assert!((s.lr_factor(10) - 0.1).abs() < 1e-12);
        assert!((s.lr_factor(29) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn guard_rejects_nan() {
        let opt = Optimizer::<f64>::new(OptimizerSpec::sgd(0.1, 0.0), [ParamGroup::Backbone]);
        assert!(opt.guard_finite("loss", f64::NAN).is_err());
        assert!(opt.guard_finite("loss", 1.0).is_ok());
    }
}
