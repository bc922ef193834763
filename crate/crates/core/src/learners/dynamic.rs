//! Dynamic few-shot learning: cosine-classifier base training, then a
//! second stage that freezes the feature extractor and trains a weight
//! generator on simulated ("fake") novel classes drawn from the base set.

use super::transfer::transfer_train;
use super::{finite_or_abort, MetricsLog, MetricsRow, TrainConfig, TrainOutputs};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{ClassifierHead, Model};
use crate::nn::ParamGroup;
use crate::optim::{Optimizer, OptimizerSpec};
use crate::scalar::Scalar;
use crate::util::rng_for;
use ndarray::{Array2, Ix2};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Generate classification weights for a group of support rows: the
/// L2-normalized support mean passed through the learned linear transform.
pub(crate) fn generated_weights<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    features: NodeId,
    groups: Vec<Vec<usize>>,
) -> Result<NodeId> {
    let generator = model
        .generator
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no weight generator"))?;
    let means = g.mean_rows_groups(features, groups);
    let unit = g.l2_normalize_rows(means);
    let w = model.store.bind(g, generator.weight);
    Ok(g.linear(unit, w, None))
}

/// Two-stage training. Stage 1 is cosine-classifier base training; stage 2
/// freezes every feature parameter plus the base classifier and trains only
/// the generator, classifying held-out images against generated fake-novel
/// weights joined with the sampled base classes' real weights.
pub fn dynamic_train<T: Scalar>(
    model: &mut Model<T>,
    bundle: &DatasetBundle<T>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(Vec<MetricsRow>, Option<f64>)> {
    let (mut rows, _stage1_best) = transfer_train(model, bundle, cfg, outputs)?;

    let spec = cfg.dynamic;
    let class_ids: Vec<u32> = bundle.splits.base.iter().copied().collect();
    if class_ids.len() < spec.fake_novel + spec.base_per_batch {
        return Err(Error::data(format!(
            "{} base classes cannot supply {} fake-novel + {} base classes per batch",
            class_ids.len(),
            spec.fake_novel,
            spec.base_per_batch
        )));
    }

    // freeze everything except the generator
    model.freeze_features();
    model.store.freeze(ParamGroup::Classifier);

    // cache frozen features of the representation set once
    let refs: Vec<&_> = bundle.repre.iter().collect();
    let cached = model.extract_features(&refs)?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in bundle.repre.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let base_index: BTreeMap<u32, usize> = class_ids
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();

    let (cls_weight, cls_scale) = match model.classifier.as_ref() {
        Some(ClassifierHead::Cosine { linear, scale }) => (linear.weight, *scale),
        _ => {
            return Err(Error::invalid(
                "dynamic training expects a cosine classifier",
            ))
        }
    };

    let mut opt = Optimizer::new(
        OptimizerSpec::adam(spec.lr, 0.0),
        [ParamGroup::Generator],
    );
    let mut log = MetricsLog::new(
        outputs
            .metrics_path
            .as_ref()
            .map(|p| p.with_extension("stage2.csv"))
            .as_deref(),
    )?;
    let mut best: Option<(f64, crate::nn::ParamStore<T>)> = None;
    let steps_per_epoch = (class_ids.len() / (spec.fake_novel + spec.base_per_batch)).max(1);

    for epoch in 0..spec.epochs {
        let mut sums = (0.0f64, 0.0f64);
        for step in 0..steps_per_epoch {
            let tag = (epoch * steps_per_epoch + step) as u64;
            let mut rng = rng_for(cfg.seed, "dynamic_stage2", tag);
            let mut order = class_ids.clone();
            order.shuffle(&mut rng);
            let fake: Vec<u32> = order[..spec.fake_novel].to_vec();
            let base: Vec<u32> = order[spec.fake_novel..spec.fake_novel + spec.base_per_batch].to_vec();

            // assemble the step's feature matrix and grouping
            let mut feat_rows: Vec<usize> = Vec::new();
            let mut gen_groups: Vec<Vec<usize>> = Vec::new();
            let mut test_rows_local: Vec<usize> = Vec::new();
            let mut targets: Vec<usize> = Vec::new();
            for (fi, cid) in fake.iter().enumerate() {
                let mut members = by_class[cid].clone();
                members.shuffle(&mut rng);
                members.truncate(spec.images_per_class.min(members.len()));
                let k_gen = cfg.episode.k_shot.min(members.len().saturating_sub(1)).max(1);
                let mut group = Vec::new();
                for (j, &m) in members.iter().enumerate() {
                    let local = feat_rows.len();
                    feat_rows.push(m);
                    if j < k_gen {
                        group.push(local);
                    } else {
                        test_rows_local.push(local);
                        targets.push(fi);
                    }
                }
                gen_groups.push(group);
            }
            for (bi, cid) in base.iter().enumerate() {
                let mut members = by_class[cid].clone();
                members.shuffle(&mut rng);
                members.truncate(spec.images_per_class.min(members.len()));
                for &m in &members {
                    let local = feat_rows.len();
                    feat_rows.push(m);
                    test_rows_local.push(local);
                    targets.push(spec.fake_novel + bi);
                }
            }
            if targets.is_empty() {
                return Err(Error::data("dynamic stage-2 batch has no test samples"));
            }
            let mut feats = Array2::<T>::zeros((feat_rows.len(), cached.ncols()));
            for (local, &global) in feat_rows.iter().enumerate() {
                feats.row_mut(local).assign(&cached.row(global));
            }

            let mut g = Graph::new(true);
            let x = g.input(feats.into_dyn());
            let gen_w = generated_weights(&mut g, model, x, gen_groups)?;
            let base_w_full = model.store.bind(&mut g, cls_weight);
            let base_rows: Vec<usize> = base.iter().map(|c| base_index[c]).collect();
            let base_w = g.select_rows(base_w_full, &base_rows);
            let joint = g.concat_rows(&[gen_w, base_w]);
            let test = g.select_rows(x, &test_rows_local);
            let scale = model.store.bind(&mut g, cls_scale);
            let logits = g.cosine_logits(test, joint, scale);
            let ce = g.cross_entropy(logits, &targets);
            let loss = finite_or_abort("generator loss", g.scalar(ce))?;

            let lv = g.value(logits).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let mut correct = 0usize;
            for (row, &t) in targets.iter().enumerate() {
                let mut bestk = 0usize;
                for k in 1..lv.ncols() {
                    if lv[(row, k)] > lv[(row, bestk)] {
                        bestk = k;
                    }
                }
                if bestk == t {
                    correct += 1;
                }
            }
            g.backward(ce)?;
            opt.step(&mut model.store, &g)?;
            sums.0 += loss;
            sums.1 += 100.0 * correct as f64 / targets.len() as f64;
        }
        let n = steps_per_epoch as f64;
        log.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss_fewshot: sums.0 / n,
            loss_pose: 0.0,
            accuracy: sums.1 / n,
        })?;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == spec.epochs {
            if let Some(acc) = stage2_validation(model, bundle, cfg)? {
                log.push(MetricsRow {
                    epoch,
                    split: "val".into(),
                    loss_fewshot: 0.0,
                    loss_pose: 0.0,
                    accuracy: acc,
                })?;
                if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                    best = Some((acc, model.store.clone()));
                }
            }
        }
    }
    let best_acc = best.map(|(acc, store)| {
        model.store = store;
        acc
    });
    outputs.save_checkpoint(model, "final.ckpt")?;
    rows.extend(log.rows.clone());
    log.finish()?;
    Ok((rows, best_acc))
}

/// All-way generated-weight classification accuracy on validation classes.
fn stage2_validation<T: Scalar>(
    model: &mut Model<T>,
    bundle: &DatasetBundle<T>,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let refer = bundle.refer_of(&bundle.splits.validation);
    let query = bundle.query_of(&bundle.splits.validation);
    if refer.is_empty() || query.is_empty() {
        return Ok(None);
    }
    let refer_feats = model.extract_features(&refer)?;
    let query_feats = model.extract_features(&query)?;
    let refer_labels: Vec<u32> = refer.iter().map(|s| s.class_id).collect();
    let query_labels: Vec<u32> = query.iter().map(|s| s.class_id).collect();
    let preds = generate_and_classify(model, &refer_feats, &refer_labels, &query_feats)?;
    let classes: Vec<u32> = {
        let mut c = refer_labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    let correct = preds
        .iter()
        .zip(query_labels.iter())
        .filter(|&(p, t)| classes[*p] == *t)
        .count();
    let _ = cfg;
    Ok(Some(100.0 * correct as f64 / query_labels.len() as f64))
}

/// Inference path: generate weights for each class from its reference
/// features, then classify queries by scaled cosine similarity. Returns the
/// index of the predicted class in the sorted class list.
pub fn generate_and_classify<T: Scalar>(
    model: &Model<T>,
    refer_feats: &Array2<T>,
    refer_labels: &[u32],
    query_feats: &Array2<T>,
) -> Result<Vec<usize>> {
    let mut classes: Vec<u32> = refer_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let groups: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| {
            refer_labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| (l == c).then_some(i))
                .collect()
        })
        .collect();
    let (_, cls_scale) = match model.classifier.as_ref() {
        Some(ClassifierHead::Cosine { linear, scale }) => (linear.weight, *scale),
        _ => {
            return Err(Error::invalid(
                "dynamic inference expects a cosine classifier",
            ))
        }
    };
    let mut g = Graph::new(false);
    let refs = g.input(refer_feats.clone().into_dyn());
    let gen_w = generated_weights(&mut g, model, refs, groups)?;
    let q = g.input(query_feats.clone().into_dyn());
    let scale = model.store.bind(&mut g, cls_scale);
    let logits = g.cosine_logits(q, gen_w, scale);
    let lv = g.value(logits).view().into_dimensionality::<Ix2>().unwrap();
    Ok((0..lv.nrows())
        .map(|row| {
            let mut best = 0usize;
            for k in 1..lv.ncols() {
                if lv[(row, k)] > lv[(row, best)] {
                    best = k;
                }
            }
            best
        })
        .collect())
}
