//! Few-shot learners and their training loops.
//!
//! All three algorithms share the two-phase heatmap protocol: during base
//! training, classification features for annotated images come from
//! ground-truth heatmaps while the pose head learns under the pixel-wise log
//! loss; unannotated images use predicted heatmaps. When base training ends
//! the pose head is frozen — its parameters become immutable (enforced by
//! optimizer errors) and every later phase computes features from predicted
//! heatmaps only.

mod dynamic;
mod presets;
mod proto;
pub(crate) mod transfer;

pub use dynamic::{dynamic_train, generate_and_classify as dynamic_generate_predict};
pub use presets::NAMES as PRESET_NAMES;
pub use proto::{proto_train, proto_train_step, train_with_disjoint_pose, StepLosses};
pub use transfer::{fit_linear_head, transfer_finetune, transfer_train};

/// Scalar form of the total objective (re-exported; defined with the pose
/// loss machinery).
pub use crate::pose::total_loss;

use crate::backbone::BackboneConfig;
use crate::data::{DatasetBundle, GtHeatmapStyle, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Aggregator, Algorithm, Model, ModelSpec};
use crate::optim::{OptimizerSpec, ScheduleSpec};
use crate::scalar::Scalar;
use crate::util::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        // 20-way 5-shot with 15 queries per class
        EpisodeSpec {
            n_way: 20,
            k_shot: 5,
            q_query: 15,
        }
    }
}

/// Stage-2 settings for dynamic few-shot learning.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicSpec {
    pub fake_novel: usize,
    pub base_per_batch: usize,
    pub images_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for DynamicSpec {
    fn default() -> Self {
        // 16 fake-novel + 4 base classes, 20 images each; 200 epochs of Adam
        DynamicSpec {
            fake_novel: 16,
            base_per_batch: 4,
            images_per_class: 20,
            epochs: 200,
            lr: 0.001,
        }
    }
}

/// Novel-classifier fine-tuning budget for transfer learning.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            epochs: 40,
            lr: 0.001,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub aggregator: Aggregator,
    #[serde(default)]
    pub alpha: f64,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub episode: EpisodeSpec,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub annotation_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_temperature")]
    pub upn_temperature: f64,
    #[serde(default)]
    pub dynamic: DynamicSpec,
    #[serde(default)]
    pub finetune: FinetuneSpec,
    #[serde(default)]
    pub gt_heatmap: GtHeatmapStyle,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default = "default_pose_batch")]
    pub pose_batch: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_batch_size() -> usize {
    64
}
fn default_one() -> f64 {
    1.0
}
fn default_eval_every() -> usize {
    20
}
fn default_temperature() -> f64 {
    1.0
}
fn default_pose_batch() -> usize {
    400
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pose_supervised = self.aggregator.has_pose_head();
        if pose_supervised && self.alpha <= 0.0 {
            return Err(Error::invalid(format!(
                "aggregator {} trains a heatmap loss and needs alpha > 0",
                self.aggregator
            )));
        }
        if !(self.annotation_fraction > 0.0 && self.annotation_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "annotation_fraction must lie in (0, 1], got {}",
                self.annotation_fraction
            )));
        }
        if self.aggregator == Aggregator::PoseGt && self.annotation_fraction < 1.0 {
            return Err(Error::invalid(
                "the ground-truth-pose oracle needs annotation_fraction = 1",
            ));
        }
        if self.upn_temperature <= 0.0 {
            return Err(Error::invalid("upn_temperature must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        Ok(())
    }
}

/// One metrics row: `epoch,split,loss_fewshot,loss_pose,accuracy`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss_fewshot: f64,
    pub loss_pose: f64,
    pub accuracy: f64,
}

/// Line-oriented training log, kept in memory and optionally mirrored to a
/// file as rows arrive.
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    file: Option<std::fs::File>,
}

impl MetricsLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                let mut f = std::fs::File::create(p)?;
                writeln!(f, "epoch,split,loss_fewshot,loss_pose,accuracy")?;
                Some(f)
            }
            None => None,
        };
        Ok(MetricsLog {
            rows: Vec::new(),
            file,
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{},{},{},{},{}",
                row.epoch, row.split, row.loss_fewshot, row.loss_pose, row.accuracy
            )?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn none() -> Self {
        TrainOutputs::default()
    }

    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            metrics_path: Some(dir.join("metrics.csv")),
            checkpoint_dir: Some(dir.to_path_buf()),
        }
    }

    pub(crate) fn save_checkpoint<T: Scalar>(&self, model: &Model<T>, name: &str) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            crate::checkpoint::save(model, &dir.join(name))?;
        }
        Ok(())
    }
}

pub struct TrainResult<T: Scalar> {
    pub model: Model<T>,
    pub metrics: Vec<MetricsRow>,
    pub best_val_accuracy: Option<f64>,
}

/// Designate the fixed annotated subset of the representation set: exactly
/// `ceil(fraction * n)` images per class, chosen once per run.
pub fn designate_annotated<T: Scalar>(
    repre: &[ImageSample<T>],
    fraction: f64,
    seed: u64,
) -> BTreeSet<usize> {
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, s) in repre.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut annotated = BTreeSet::new();
    for (cid, mut members) in by_class {
        let take = ((fraction * members.len() as f64).ceil() as usize)
            .max(1)
            .min(members.len());
        let mut rng = rng_for(seed, "annotated", cid as u64);
        members.shuffle(&mut rng);
        annotated.extend(members.into_iter().take(take));
    }
    annotated
}

/// Entry point: build a model for the bundle and run the configured
/// algorithm's base training (both stages, for dynamic).
pub fn train<T: Scalar>(
    bundle: &DatasetBundle<T>,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    let spec = ModelSpec {
        backbone: backbone.clone(),
        algorithm: cfg.algorithm,
        aggregator: cfg.aggregator,
        num_parts: bundle.num_parts,
        num_base_classes: bundle.splits.base.len(),
        upn_temperature: cfg.upn_temperature,
    };
    let mut model = Model::new(spec, cfg.seed)?;
    model.meta.provenance = serde_json::to_string(&(backbone, cfg))
        .map_err(|e| Error::invalid(format!("provenance serialization: {e}")))?;
    match cfg.algorithm {
        Algorithm::Proto => proto::proto_train(&mut model, bundle, cfg, outputs)
            .map(|(metrics, best)| TrainResult {
                model,
                metrics,
                best_val_accuracy: best,
            }),
        Algorithm::Transfer => transfer::transfer_train(&mut model, bundle, cfg, outputs)
            .map(|(metrics, best)| TrainResult {
                model,
                metrics,
                best_val_accuracy: best,
            }),
        Algorithm::Dynamic => dynamic::dynamic_train(&mut model, bundle, cfg, outputs)
            .map(|(metrics, best)| TrainResult {
                model,
                metrics,
                best_val_accuracy: best,
            }),
    }
}

/// Multi-task training is the pose-supervised loop with average-pooled
/// classification features; the head contributes only the auxiliary loss.
pub fn multitask_train<T: Scalar>(
    bundle: &DatasetBundle<T>,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult<T>> {
    if cfg.aggregator != Aggregator::AvgMultitask {
        return Err(Error::invalid(
            "multitask_train expects the avg_multitask aggregator",
        ));
    }
    train(bundle, backbone, cfg, outputs)
}

/// Nearest-centroid accuracy probe used for validation-driven model
/// selection across all learners.
pub(crate) fn centroid_probe_accuracy<T: Scalar>(
    model: &mut Model<T>,
    refer: &[&ImageSample<T>],
    query: &[&ImageSample<T>],
) -> Result<f64> {
    let refer_feats = model.extract_features(refer)?;
    let query_feats = model.extract_features(query)?;
    let refer_labels: Vec<u32> = refer.iter().map(|s| s.class_id).collect();
    let query_labels: Vec<u32> = query.iter().map(|s| s.class_id).collect();
    crate::evaluate::centroid_accuracy(&refer_feats, &refer_labels, &query_feats, &query_labels)
}

/// Validation accuracy on the bundle's validation classes; `None` when the
/// bundle has no validation split.
pub(crate) fn validation_accuracy<T: Scalar>(
    model: &mut Model<T>,
    bundle: &DatasetBundle<T>,
) -> Result<Option<f64>> {
    let refer = bundle.refer_of(&bundle.splits.validation);
    let query = bundle.query_of(&bundle.splits.validation);
    if refer.is_empty() || query.is_empty() {
        return Ok(None);
    }
    centroid_probe_accuracy(model, &refer, &query).map(Some)
}

/// Shared best-model tracking: snapshot the store when validation improves.
pub(crate) struct BestTracker<T: Scalar> {
    pub best_accuracy: Option<f64>,
    snapshot: Option<crate::nn::ParamStore<T>>,
}

impl<T: Scalar> BestTracker<T> {
    pub fn new() -> Self {
        BestTracker {
            best_accuracy: None,
            snapshot: None,
        }
    }

    pub fn observe(&mut self, accuracy: f64, model: &Model<T>) {
        if self.best_accuracy.map_or(true, |b| accuracy > b) {
            self.best_accuracy = Some(accuracy);
            self.snapshot = Some(model.store.clone());
        }
    }

    pub fn restore(self, model: &mut Model<T>) -> Option<f64> {
        if let Some(store) = self.snapshot {
            model.store = store;
        }
        self.best_accuracy
    }
}

pub(crate) fn finite_or_abort<T: Scalar>(label: &str, value: T) -> Result<f64> {
    let v = value.to_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "{label} is not finite ({v}); aborting training"
        )))
    }
}

/// Named hyper-parameter presets mirroring the reference schedules, plus
/// desk-scale synthetic presets.
pub fn preset(name: &str) -> Result<(BackboneConfig, TrainConfig)> {
    presets::lookup(name)
}
