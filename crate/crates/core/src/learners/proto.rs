//! Prototypical-network training: episodic base training with class-mean
//! prototypes and negative squared-distance logits, including the
//! partial-annotation protocol and disjoint pose supervision.

use super::{
    designate_annotated, finite_or_abort, validation_accuracy, BestTracker, MetricsLog,
    MetricsRow, TrainConfig, TrainOutputs,
};
use crate::data::{hflip_sample, sample_episode, DatasetBundle, Episode, ImageSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{batch_images, Aggregator, HeatmapSpec, Model};
use crate::nn::ParamGroup;
use crate::optim::Optimizer;
use crate::scalar::{lit, Scalar};
use crate::util::{derive_seed, rng_for};
use ndarray::{Array4, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub few_shot: f64,
    pub pose: f64,
    pub total: f64,
    pub query_accuracy: f64,
}

pub(crate) fn trainable_groups<T: Scalar>(model: &Model<T>) -> Vec<ParamGroup> {
    let mut groups = vec![ParamGroup::Backbone];
    if model.pose_head.is_some() && !model.store.is_frozen(ParamGroup::PoseHead) {
        groups.push(ParamGroup::PoseHead);
    }
    if model.upn_bank.is_some() {
        groups.push(ParamGroup::Aggregator);
    }
    groups
}

/// Check that the designated annotated samples actually carry the
/// annotations their supervision needs.
pub(crate) fn check_annotations<T: Scalar>(
    model: &Model<T>,
    pool: &[ImageSample<T>],
    annotated: &BTreeSet<usize>,
) -> Result<()> {
    match model.spec.aggregator {
        Aggregator::Pose | Aggregator::AvgMultitask | Aggregator::PoseGt => {
            for &i in annotated {
                if pool[i].keypoints.is_none() {
                    return Err(Error::data(format!(
                        "sample {i} is designated annotated but has no keypoints"
                    )));
                }
            }
        }
        Aggregator::Bbn => {
            for &i in annotated {
                if pool[i].bbox.is_none() {
                    return Err(Error::data(format!(
                        "sample {i} is designated annotated but has no bounding box"
                    )));
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Assemble the heatmap source for a batch under the two-phase protocol:
/// annotated rows use rasterized ground truth, the rest use predictions.
pub(crate) fn heatmap_spec_for_batch<T: Scalar>(
    model: &Model<T>,
    samples: &[&ImageSample<T>],
    annotated_mask: &[bool],
) -> Result<(HeatmapSpec<T>, Option<Array4<T>>)> {
    let agg = model.spec.aggregator;
    let needs_gt = agg.has_pose_head() || agg == Aggregator::PoseGt;
    if !needs_gt {
        return Ok((HeatmapSpec::NotNeeded, None));
    }
    let hw = model.final_hw();
    let channels = agg.heatmap_channels(model.spec.num_parts);
    let mut gt = Array4::<T>::zeros((samples.len(), channels, hw, hw));
    for (n, s) in samples.iter().enumerate() {
        if annotated_mask[n] {
            let hm = if agg == Aggregator::Bbn {
                crate::data::rasterize_bbox(s, hw, hw)?
            } else {
                crate::data::rasterize_parts(s, hw, hw)?
            };
            gt.index_axis_mut(Axis(0), n).assign(&hm.values);
        }
    }
    let spec = match agg {
        Aggregator::PoseGt => HeatmapSpec::Ground(gt.clone()),
        Aggregator::Pose | Aggregator::Bbn => HeatmapSpec::Mixed {
            gt: gt.clone(),
            use_pred: annotated_mask.iter().map(|&a| !a).collect(),
        },
        // multitask: classification features ignore heatmaps
        _ => HeatmapSpec::NotNeeded,
    };
    Ok((spec, Some(gt)))
}

/// One optimizer step on a sampled episode. Prototypes are per-class means
/// of support features; query logits are negative squared distances; the
/// total objective adds `alpha` times the pixel-wise heatmap loss over the
/// batch's annotated samples.
pub fn proto_train_step<T: Scalar>(
    model: &mut Model<T>,
    pool: &[ImageSample<T>],
    episode: &Episode,
    annotated: &BTreeSet<usize>,
    cfg: &TrainConfig,
    opt: &mut Optimizer<T>,
) -> Result<StepLosses> {
    episode.validate()?;
    let n_support = episode.support.len();
    let all: Vec<(usize, usize)> = episode
        .support
        .iter()
        .chain(episode.query.iter())
        .copied()
        .collect();
    let samples: Vec<&ImageSample<T>> = all.iter().map(|&(i, _)| &pool[i]).collect();
    let annotated_mask: Vec<bool> = all.iter().map(|&(i, _)| annotated.contains(&i)).collect();
    let images = batch_images(&samples, model.spec.backbone.input_size)?;
    let (spec, gt) = heatmap_spec_for_batch(model, &samples, &annotated_mask)?;

    let mut g = Graph::new(true);
    let plan = model.aggregate_features(&mut g, &images, spec)?;

    // per-class support groups by batch row
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); episode.n_way];
    for (row, &(_, class_idx)) in episode.support.iter().enumerate() {
        groups[class_idx].push(row);
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::data("episode has an empty class"));
    }
    let protos = g.mean_rows_groups(plan.features, groups);
    let query_rows: Vec<usize> = (n_support..all.len()).collect();
    let query_feats = g.select_rows(plan.features, &query_rows);
    let logits = g.neg_sqdist(query_feats, protos);
    let targets: Vec<usize> = episode.query.iter().map(|&(_, c)| c).collect();
    let ce = g.cross_entropy(logits, &targets);

    let annotated_rows: Vec<usize> = annotated_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| a.then_some(i))
        .collect();
    let mut pose_scalar = 0.0f64;
    let total_node = match (plan.predicted_heatmaps, &gt) {
        (Some(pred), Some(gt_arr)) if cfg.alpha > 0.0 && !annotated_rows.is_empty() => {
            let sel_pred = g.select_rows(pred, &annotated_rows);
            let mut sel_gt = Array4::<T>::zeros((
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
            let pose = g.bce_mean(sel_pred, sel_gt.into_dyn());
            pose_scalar = g.scalar(pose).to_f64();
            let scaled = g.scale(pose, lit::<T>(cfg.alpha));
            g.add(ce, scaled)
        }
        _ => ce,
    };

    let few_shot = finite_or_abort("few-shot loss", g.scalar(ce))?;
    let total = finite_or_abort("total loss", g.scalar(total_node))?;
    if !pose_scalar.is_finite() {
        return Err(Error::Numerical("pose loss is not finite".into()));
    }

    // query accuracy before the update
    let logit_vals = g.value(logits).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mut correct = 0usize;
    for (row, &t) in targets.iter().enumerate() {
        let mut best = 0usize;
        for k in 1..episode.n_way {
            if logit_vals[(row, k)] > logit_vals[(row, best)] {
                best = k;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    let query_accuracy = 100.0 * correct as f64 / targets.len().max(1) as f64;

    g.backward(total_node)?;
    opt.step(&mut model.store, &g)?;
    Ok(StepLosses {
        few_shot,
        pose: pose_scalar,
        total,
        query_accuracy,
    })
}

/// Episodic base training over the representation set with validation-driven
/// model selection; freezes the pose head when training ends.
pub fn proto_train<T: Scalar>(
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
    let annotated = if model.spec.aggregator.has_pose_head()
        || model.spec.aggregator == Aggregator::PoseGt
    {
        designate_annotated(pool, cfg.annotation_fraction, cfg.seed)
    } else {
        BTreeSet::new()
    };
    check_annotations(model, pool, &annotated)?;

    let mut opt = Optimizer::new(cfg.optimizer, trainable_groups(model));
    let mut log = MetricsLog::new(outputs.metrics_path.as_deref())?;
    let mut best = BestTracker::new();
    let per_episode = cfg.episode.n_way * (cfg.episode.k_shot + cfg.episode.q_query);
    let episodes_per_epoch = (pool.len() / per_episode).max(1);
    let total_epochs = cfg.schedule.total_epochs();

    for epoch in 0..total_epochs {
        opt.set_lr(cfg.optimizer.lr * cfg.schedule.lr_factor(epoch));
        let mut sums = (0.0, 0.0, 0.0);
        for step in 0..episodes_per_epoch {
            let ep_seed = derive_seed(cfg.seed, "episode", (epoch * episodes_per_epoch + step) as u64);
            let episode = sample_episode(
                pool,
                cfg.episode.n_way,
                cfg.episode.k_shot,
                cfg.episode.q_query,
                ep_seed,
            )?;
            let losses = if cfg.hflip {
                let flipped = flip_pool(pool, &episode, cfg.seed, epoch, step);
                proto_train_step(model, &flipped, &episode, &annotated, cfg, &mut opt)?
            } else {
                proto_train_step(model, pool, &episode, &annotated, cfg, &mut opt)?
            };
            sums.0 += losses.few_shot;
            sums.1 += losses.pose;
            sums.2 += losses.query_accuracy;
        }
        let n = episodes_per_epoch as f64;
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

fn flip_pool<T: Scalar>(
    pool: &[ImageSample<T>],
    episode: &Episode,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Vec<ImageSample<T>> {
    let mut rng = rng_for(seed, "hflip", (epoch * 100_000 + step) as u64);
    let mut out = pool.to_vec();
    for &(i, _) in episode.support.iter().chain(episode.query.iter()) {
        if rng.gen_bool(0.5) {
            out[i] = hflip_sample(&out[i]);
        }
    }
    out
}

/// Joint training from two disjoint pools: classification episodes come from
/// `classify_pool` and always use predicted heatmaps for features, while the
/// heatmap loss is computed on batches from the annotated `pose_pool`.
pub fn train_with_disjoint_pose<T: Scalar>(
    model: &mut Model<T>,
    classify_pool: &[ImageSample<T>],
    pose_pool: &[ImageSample<T>],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(Vec<MetricsRow>, Option<f64>)> {
    cfg.validate()?;
    if model.spec.aggregator != Aggregator::Pose {
        return Err(Error::invalid(
            "disjoint pose supervision applies to the pose aggregator",
        ));
    }
    if pose_pool.is_empty() {
        return Err(Error::data(
            "pose pool is empty but the pose aggregator needs heatmap supervision",
        ));
    }
    for (i, s) in pose_pool.iter().enumerate() {
        if s.keypoints.is_none() {
            return Err(Error::data(format!("pose pool sample {i} has no keypoints")));
        }
    }

    let mut opt = Optimizer::new(cfg.optimizer, trainable_groups(model));
    let mut log = MetricsLog::new(outputs.metrics_path.as_deref())?;
    let per_episode = cfg.episode.n_way * (cfg.episode.k_shot + cfg.episode.q_query);
    let episodes_per_epoch = (classify_pool.len() / per_episode).max(1);
    let hw = model.final_hw();
    let channels = model.spec.num_parts;

    for epoch in 0..cfg.schedule.total_epochs() {
        opt.set_lr(cfg.optimizer.lr * cfg.schedule.lr_factor(epoch));
        let mut sums = (0.0, 0.0, 0.0);
        for step in 0..episodes_per_epoch {
            let tag = (epoch * episodes_per_epoch + step) as u64;
            let episode = sample_episode(
                classify_pool,
                cfg.episode.n_way,
                cfg.episode.k_shot,
                cfg.episode.q_query,
                derive_seed(cfg.seed, "episode", tag),
            )?;
            let n_support = episode.support.len();
            let all: Vec<(usize, usize)> = episode
                .support
                .iter()
                .chain(episode.query.iter())
                .copied()
                .collect();
            let samples: Vec<&ImageSample<T>> =
                all.iter().map(|&(i, _)| &classify_pool[i]).collect();
            let images = batch_images(&samples, model.spec.backbone.input_size)?;

            // pose batch from the disjoint annotated pool
            let mut pose_idx: Vec<usize> = (0..pose_pool.len()).collect();
            let mut rng = rng_for(cfg.seed, "pose_batch", tag);
            pose_idx.shuffle(&mut rng);
            pose_idx.truncate(cfg.pose_batch.min(pose_pool.len()).max(1));
            let pose_samples: Vec<&ImageSample<T>> =
                pose_idx.iter().map(|&i| &pose_pool[i]).collect();
            let pose_images = batch_images(&pose_samples, model.spec.backbone.input_size)?;
            let mut gt = Array4::<T>::zeros((pose_samples.len(), channels, hw, hw));
            for (n, s) in pose_samples.iter().enumerate() {
                let hm = crate::data::rasterize_parts(s, hw, hw)?;
                gt.index_axis_mut(Axis(0), n).assign(&hm.values);
            }

            let mut g = Graph::new(true);
            let plan = model.aggregate_features(&mut g, &images, HeatmapSpec::Predicted)?;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); episode.n_way];
            for (row, &(_, class_idx)) in episode.support.iter().enumerate() {
                groups[class_idx].push(row);
            }
            let protos = g.mean_rows_groups(plan.features, groups);
            let query_rows: Vec<usize> = (n_support..all.len()).collect();
            let query_feats = g.select_rows(plan.features, &query_rows);
            let logits = g.neg_sqdist(query_feats, protos);
            let targets: Vec<usize> = episode.query.iter().map(|&(_, c)| c).collect();
            let ce = g.cross_entropy(logits, &targets);

            // second forward pass over the pose batch shares parameters;
            // gradients from both branches sum into the backbone
            let xp = g.input(pose_images.into_dyn());
            let taps = model.backbone.apply(&mut g, &mut model.store, xp)?;
            let head = model
                .pose_head
                .as_ref()
                .expect("pose aggregator has a head")
                .clone();
            let pred = head.apply(&mut g, &mut model.store, taps.tap)?;
            let pose = g.bce_mean(pred, gt.into_dyn());
            let scaled = g.scale(pose, lit::<T>(cfg.alpha));
            let total_node = g.add(ce, scaled);

            let few_shot = finite_or_abort("few-shot loss", g.scalar(ce))?;
            let pose_val = finite_or_abort("pose loss", g.scalar(pose))?;
            finite_or_abort("total loss", g.scalar(total_node))?;
            let logit_vals = g.value(logits).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let mut correct = 0usize;
            for (row, &t) in targets.iter().enumerate() {
                let mut bestk = 0usize;
                for k in 1..episode.n_way {
                    if logit_vals[(row, k)] > logit_vals[(row, bestk)] {
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
            sums.1 += pose_val;
            sums.2 += 100.0 * correct as f64 / targets.len().max(1) as f64;
        }
        let n = episodes_per_epoch as f64;
        log.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss_fewshot: sums.0 / n,
            loss_pose: sums.1 / n,
            accuracy: sums.2 / n,
        })?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            outputs.save_checkpoint(model, &format!("epoch_{:04}.ckpt", epoch + 1))?;
        }
    }
    model.freeze_pose_head();
    model.meta.base_trained = true;
    outputs.save_checkpoint(model, "final.ckpt")?;
    log.finish()?;
    Ok((log.rows, None))
}
