//! Transfer learning: standard classification pre-training on base classes,
//! then a fresh linear classifier fine-tuned on the frozen representation of
//! the novel classes.

use super::proto::{check_annotations, heatmap_spec_for_batch, trainable_groups};
use super::{
    designate_annotated, finite_or_abort, validation_accuracy, BestTracker, MetricsLog,
    MetricsRow, TrainConfig, TrainOutputs,
};
use crate::data::{DatasetBundle, ImageSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{batch_images, Aggregator, ClassifierHead, Model, NovelHead};
use crate::nn::{LinearLayer, ParamGroup, ParamStore};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::scalar::{lit, Scalar};
use crate::util::rng_for;
use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

fn class_index_map(ids: impl Iterator<Item = u32>) -> BTreeMap<u32, usize> {
    let mut sorted: Vec<u32> = ids.collect();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.into_iter().enumerate().map(|(i, c)| (c, i)).collect()
}

/// Base-phase classification training: linear classifier + softmax
/// cross-entropy over base classes, jointly with the feature extractor (and
/// the pose head through the total loss, when one is present).
pub fn transfer_train<T: Scalar>(
    model: &mut Model<T>,
    bundle: &DatasetBundle<T>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(Vec<MetricsRow>, Option<f64>)> {
    cfg.validate()?;
    let pool = &bundle.repre;
    if pool.is_empty() {
        return Err(Error::data("representation set is empty"));
    }
    let class_map = class_index_map(pool.iter().map(|s| s.class_id));
    let annotated = if model.spec.aggregator.has_pose_head()
        || model.spec.aggregator == Aggregator::PoseGt
    {
        designate_annotated(pool, cfg.annotation_fraction, cfg.seed)
    } else {
        Default::default()
    };
    check_annotations(model, pool, &annotated)?;

    let mut groups = trainable_groups(model);
    groups.push(ParamGroup::Classifier);
    let mut opt = Optimizer::new(cfg.optimizer, groups);
    let mut log = MetricsLog::new(outputs.metrics_path.as_deref())?;
    let mut best = BestTracker::new();
    let total_epochs = cfg.schedule.total_epochs();

    for epoch in 0..total_epochs {
        opt.set_lr(cfg.optimizer.lr * cfg.schedule.lr_factor(epoch));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = rng_for(cfg.seed, "transfer_shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch-norm needs more than a single sample
            }
            let samples: Vec<&ImageSample<T>> = chunk.iter().map(|&i| &pool[i]).collect();
            let mask: Vec<bool> = chunk.iter().map(|i| annotated.contains(i)).collect();
            let targets: Vec<usize> = samples.iter().map(|s| class_map[&s.class_id]).collect();
            let images = batch_images(&samples, model.spec.backbone.input_size)?;
            let (spec, gt) = heatmap_spec_for_batch(model, &samples, &mask)?;

            let mut g = Graph::new(true);
            let plan = model.aggregate_features(&mut g, &images, spec)?;
            let logits = match model.classifier.as_ref() {
                Some(ClassifierHead::Linear(l)) => l.apply(&mut g, &model.store, plan.features),
                Some(ClassifierHead::Cosine { linear, scale }) => {
                    let w = model.store.bind(&mut g, linear.weight);
                    let s = model.store.bind(&mut g, *scale);
                    g.cosine_logits(plan.features, w, s)
                }
                None => return Err(Error::invalid("transfer model has no classifier")),
            };
            let ce = g.cross_entropy(logits, &targets);

            let annotated_rows: Vec<usize> = mask
                .iter()
                .enumerate()
                .filter_map(|(i, &a)| a.then_some(i))
                .collect();
            let mut pose_scalar = 0.0;
            let total_node = match (plan.predicted_heatmaps, &gt) {
                (Some(pred), Some(gt_arr)) if cfg.alpha > 0.0 && !annotated_rows.is_empty() => {
                    let sel = g.select_rows(pred, &annotated_rows);
                    let mut sel_gt = ndarray::Array4::<T>::zeros((
                        annotated_rows.len(),
                        gt_arr.shape()[1],
                        gt_arr.shape()[2],
                        gt_arr.shape()[3],
                    ));
                    for (o, &r) in annotated_rows.iter().enumerate() {
                        sel_gt
                            .index_axis_mut(Axis(0), o)
                            .assign(&gt_arr.index_axis(Axis(0), r));
                    }
                    let pose = g.bce_mean(sel, sel_gt.into_dyn());
                    pose_scalar = g.scalar(pose).to_f64();
                    let scaled = g.scale(pose, lit::<T>(cfg.alpha));
                    g.add(ce, scaled)
                }
                _ => ce,
            };

            let few_shot = finite_or_abort("classification loss", g.scalar(ce))?;
            finite_or_abort("total loss", g.scalar(total_node))?;
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
            g.backward(total_node)?;
            opt.step(&mut model.store, &g)?;
            sums.0 += few_shot;
            sums.1 += pose_scalar;
            sums.2 += 100.0 * correct as f64 / targets.len() as f64;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        log.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss_fewshot: sums.0 / n,
            loss_pose: sums.1 / n,
            accuracy: sums.2 / n,
        })?;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == total_epochs {
            if let Some(acc) = validation_accuracy(model, bundle)? {
                log.push(MetricsRow {
                    epoch,
                    split: "val".into(),
                    loss_fewshot: 0.0,
                    loss_pose: 0.0,
                    accuracy: acc,
                })?;
                best.observe(acc, model);
            }
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            outputs.save_checkpoint(model, &format!("epoch_{:04}.ckpt", epoch + 1))?;
        }
    }
    let best_acc = best.restore(model);
    model.freeze_pose_head();
    model.meta.base_trained = true;
    outputs.save_checkpoint(model, "final.ckpt")?;
    log.finish()?;
    Ok((log.rows, best_acc))
}

/// Learn a fresh linear classifier over the novel classes on the frozen
/// representation. Base-phase parameters are untouched; pose-layout features
/// come from predicted heatmaps since novel classes carry no annotations.
pub fn transfer_finetune<T: Scalar>(
    model: &mut Model<T>,
    refer: &[&ImageSample<T>],
    cfg: &TrainConfig,
) -> Result<()> {
    if !model.meta.base_trained {
        return Err(Error::NotTrained(
            "transfer fine-tuning requires completed base training".into(),
        ));
    }
    if refer.is_empty() {
        return Err(Error::data("reference set is empty"));
    }
    model.freeze_features();
    let feats = model.extract_features(refer)?;
    let labels: Vec<u32> = refer.iter().map(|s| s.class_id).collect();
    let head = fit_linear_head(
        &feats,
        &labels,
        cfg.finetune.epochs,
        cfg.finetune.lr,
        cfg.finetune.batch,
        cfg.seed,
    )?;
    model.novel_head = Some(head);
    Ok(())
}

/// Train a softmax linear classifier on fixed feature vectors with Adam.
/// Used for novel-class fine-tuning and per-trial adaptation in evaluation.
pub fn fit_linear_head<T: Scalar>(
    features: &Array2<T>,
    labels: &[u32],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<NovelHead<T>> {
    let class_map = class_index_map(labels.iter().copied());
    let class_ids: Vec<u32> = class_map.keys().copied().collect();
    let targets: Vec<usize> = labels.iter().map(|c| class_map[c]).collect();
    let d = features.ncols();
    let k = class_ids.len();

    let mut store = ParamStore::<T>::new();
    let mut rng = rng_for(seed, "finetune_init", 0);
    let layer = LinearLayer::new(
        &mut store,
        &mut rng,
        "novel_head",
        ParamGroup::Classifier,
        d,
        k,
        true,
    );
    let mut opt = Optimizer::new(
        OptimizerSpec::adam(lr, 0.0),
        [ParamGroup::Classifier],
    );
    let n = features.nrows();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = rng_for(seed, "finetune_shuffle", epoch as u64);
        order.shuffle(&mut erng);
        for chunk in order.chunks(batch.max(1)) {
            let mut xb = Array2::<T>::zeros((chunk.len(), d));
            let mut tb = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                xb.row_mut(row).assign(&features.row(i));
                tb.push(targets[i]);
            }
            let mut g = Graph::new(true);
            let x = g.input(xb.into_dyn());
            let logits = layer.apply(&mut g, &store, x);
            let ce = g.cross_entropy(logits, &tb);
            finite_or_abort("finetune loss", g.scalar(ce))?;
            g.backward(ce)?;
            opt.step(&mut store, &g)?;
        }
    }
    let weight = store
        .value(layer.weight)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let bias = match layer.bias {
        Some(b) => store
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned(),
        None => Array1::zeros(k),
    };
    Ok(NovelHead {
        class_ids,
        weight,
        bias,
    })
}
