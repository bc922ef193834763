//! Named hyper-parameter presets.
//!
//! The `cub-*` and `fgvc-*` presets carry the reference schedules for each
//! learner/aggregator/backbone combination (SGD rows use momentum 0.9; the
//! pose-loss weight is 100 for the 4-layer backbone and 200 for the modified
//! ResNet18 on birds, 50 on aircraft, and 10 for box normalization). The
//! `synth-*` presets are desk-scale schedules tuned for the bundled
//! synthetic benchmark.

use super::{DynamicSpec, EpisodeSpec, FinetuneSpec, TrainConfig};
use crate::backbone::BackboneConfig;
use crate::data::GtHeatmapStyle;
use crate::error::{Error, Result};
use crate::model::{Aggregator, Algorithm};
use crate::optim::{OptimizerKind, OptimizerSpec, ScheduleSpec};

pub const NAMES: &[&str] = &[
    "cub-transfer-avg-convnet4",
    "cub-transfer-pn-convnet4",
    "cub-transfer-pngt-convnet4",
    "cub-proto-avg-convnet4",
    "cub-proto-mt-convnet4",
    "cub-proto-bp-convnet4",
    "cub-proto-bbn-convnet4",
    "cub-proto-upn-convnet4",
    "cub-proto-pn-convnet4",
    "cub-proto-pngt-convnet4",
    "cub-dynamic-avg-convnet4",
    "cub-dynamic-pn-convnet4",
    "cub-dynamic-pngt-convnet4",
    "cub-transfer-avg-resnet18",
    "cub-transfer-pn-resnet18",
    "cub-transfer-pngt-resnet18",
    "cub-proto-avg-resnet18",
    "cub-proto-mt-resnet18",
    "cub-proto-bp-resnet18",
    "cub-proto-bbn-resnet18",
    "cub-proto-upn-resnet18",
    "cub-proto-pn-resnet18",
    "cub-proto-pngt-resnet18",
    "cub-dynamic-avg-resnet18",
    "cub-dynamic-pn-resnet18",
    "cub-dynamic-pngt-resnet18",
    "fgvc-proto-avg-convnet4",
    "fgvc-proto-pn-convnet4",
    "fgvc-proto-avg-resnet18",
    "fgvc-proto-pn-resnet18",
    "synth-proto-avg-convnet4",
    "synth-proto-pn-convnet4",
    "synth-proto-pngt-convnet4",
    "synth-proto-mt-convnet4",
    "synth-proto-bp-convnet4",
    "synth-proto-upn-convnet4",
    "synth-proto-bbn-convnet4",
    "synth-transfer-avg-convnet4",
    "synth-transfer-pn-convnet4",
    "synth-dynamic-avg-convnet4",
    "synth-dynamic-pn-convnet4",
];

struct Row {
    algorithm: Algorithm,
    aggregator: Aggregator,
    alpha: f64,
    kind: OptimizerKind,
    lr: f64,
    gamma: f64,
    epochs_per_stage: usize,
    stages: usize,
    weight_decay: f64,
}

fn config(row: Row, seed: u64) -> TrainConfig {
    TrainConfig {
        algorithm: row.algorithm,
        aggregator: row.aggregator,
        alpha: row.alpha,
        optimizer: OptimizerSpec {
            kind: row.kind,
            lr: row.lr,
            momentum: 0.9,
            weight_decay: row.weight_decay,
        },
        schedule: ScheduleSpec::new(row.epochs_per_stage, row.stages, row.gamma),
        episode: EpisodeSpec::default(),
        batch_size: 64,
        annotation_fraction: 1.0,
        seed,
        eval_every: 20,
        upn_temperature: 1.0,
        dynamic: DynamicSpec::default(),
        finetune: FinetuneSpec::default(),
        gt_heatmap: GtHeatmapStyle::Binary,
        hflip: false,
        pose_batch: 400,
        checkpoint_every: 0,
    }
}

pub fn lookup(name: &str) -> Result<(BackboneConfig, TrainConfig)> {
    use Aggregator::*;
    use Algorithm::*;
    use OptimizerKind::*;

    let (backbone, synth) = if name.ends_with("-resnet18") {
        (BackboneConfig::resnet18mod(), false)
    } else if name.ends_with("-convnet4") {
        (BackboneConfig::convnet4(), name.starts_with("synth-"))
    } else {
        return Err(Error::invalid(format!("unknown preset '{name}'")));
    };

    let row = match name {
        // birds, 4-layer backbone
        "cub-transfer-avg-convnet4" => Row { algorithm: Transfer, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 200, stages: 2, weight_decay: 5e-4 },
        "cub-transfer-pn-convnet4" => Row { algorithm: Transfer, aggregator: Pose, alpha: 100.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 200, stages: 2, weight_decay: 5e-4 },
        "cub-transfer-pngt-convnet4" => Row { algorithm: Transfer, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 200, stages: 2, weight_decay: 5e-4 },
        "cub-proto-avg-convnet4" => Row { algorithm: Proto, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 400, stages: 2, weight_decay: 5e-4 },
        "cub-proto-mt-convnet4" => Row { algorithm: Proto, aggregator: AvgMultitask, alpha: 100.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 600, stages: 2, weight_decay: 1e-3 },
        "cub-proto-bp-convnet4" => Row { algorithm: Proto, aggregator: Bilinear, alpha: 0.0, kind: Adam, lr: 0.001, gamma: 1.0, epochs_per_stage: 800, stages: 1, weight_decay: 0.0 },
        "cub-proto-bbn-convnet4" => Row { algorithm: Proto, aggregator: Bbn, alpha: 10.0, kind: Sgd, lr: 0.01, gamma: 0.1, epochs_per_stage: 400, stages: 2, weight_decay: 5e-4 },
        "cub-proto-upn-convnet4" => Row { algorithm: Proto, aggregator: Upn, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 600, stages: 2, weight_decay: 1e-3 },
        "cub-proto-pn-convnet4" => Row { algorithm: Proto, aggregator: Pose, alpha: 100.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 600, stages: 2, weight_decay: 1e-3 },
        "cub-proto-pngt-convnet4" => Row { algorithm: Proto, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 400, stages: 2, weight_decay: 5e-4 },
        "cub-dynamic-avg-convnet4" => Row { algorithm: Dynamic, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 200, stages: 2, weight_decay: 5e-4 },
        "cub-dynamic-pn-convnet4" => Row { algorithm: Dynamic, aggregator: Pose, alpha: 100.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 100, stages: 2, weight_decay: 5e-4 },
        "cub-dynamic-pngt-convnet4" => Row { algorithm: Dynamic, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 50, stages: 2, weight_decay: 5e-4 },
        // birds, modified ResNet18
        "cub-transfer-avg-resnet18" => Row { algorithm: Transfer, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 100, stages: 2, weight_decay: 1e-3 },
        "cub-transfer-pn-resnet18" => Row { algorithm: Transfer, aggregator: Pose, alpha: 200.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 100, stages: 2, weight_decay: 1e-3 },
        "cub-transfer-pngt-resnet18" => Row { algorithm: Transfer, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 100, stages: 2, weight_decay: 1e-3 },
        "cub-proto-avg-resnet18" => Row { algorithm: Proto, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 300, stages: 2, weight_decay: 1e-3 },
        "cub-proto-mt-resnet18" => Row { algorithm: Proto, aggregator: AvgMultitask, alpha: 200.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 300, stages: 2, weight_decay: 5e-3 },
        "cub-proto-bp-resnet18" => Row { algorithm: Proto, aggregator: Bilinear, alpha: 0.0, kind: Adam, lr: 0.001, gamma: 1.0, epochs_per_stage: 600, stages: 1, weight_decay: 1e-3 },
        "cub-proto-bbn-resnet18" => Row { algorithm: Proto, aggregator: Bbn, alpha: 10.0, kind: Adam, lr: 0.1, gamma: 0.5, epochs_per_stage: 160, stages: 5, weight_decay: 0.0 },
        "cub-proto-upn-resnet18" => Row { algorithm: Proto, aggregator: Upn, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 200, stages: 2, weight_decay: 5e-3 },
        "cub-proto-pn-resnet18" => Row { algorithm: Proto, aggregator: Pose, alpha: 200.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 300, stages: 2, weight_decay: 5e-3 },
        "cub-proto-pngt-resnet18" => Row { algorithm: Proto, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 300, stages: 2, weight_decay: 5e-3 },
        "cub-dynamic-avg-resnet18" => Row { algorithm: Dynamic, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 100, stages: 2, weight_decay: 1e-3 },
        "cub-dynamic-pn-resnet18" => Row { algorithm: Dynamic, aggregator: Pose, alpha: 200.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 25, stages: 3, weight_decay: 1e-3 },
        "cub-dynamic-pngt-resnet18" => Row { algorithm: Dynamic, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 25, stages: 3, weight_decay: 1e-3 },
        // aircraft (disjoint pose supervision; alpha 50, 400-image pose batches)
        "fgvc-proto-avg-convnet4" => Row { algorithm: Proto, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 500, stages: 2, weight_decay: 1e-3 },
        "fgvc-proto-pn-convnet4" => Row { algorithm: Proto, aggregator: Pose, alpha: 50.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 500, stages: 2, weight_decay: 1e-3 },
        "fgvc-proto-avg-resnet18" => Row { algorithm: Proto, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 300, stages: 2, weight_decay: 1e-3 },
        "fgvc-proto-pn-resnet18" => Row { algorithm: Proto, aggregator: Pose, alpha: 50.0, kind: Sgd, lr: 0.1, gamma: 0.1, epochs_per_stage: 300, stages: 2, weight_decay: 5e-3 },
        // desk-scale synthetic benchmark
        "synth-proto-avg-convnet4" => Row { algorithm: Proto, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-proto-pn-convnet4" => Row { algorithm: Proto, aggregator: Pose, alpha: 100.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-proto-pngt-convnet4" => Row { algorithm: Proto, aggregator: PoseGt, alpha: 0.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-proto-mt-convnet4" => Row { algorithm: Proto, aggregator: AvgMultitask, alpha: 100.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-proto-bp-convnet4" => Row { algorithm: Proto, aggregator: Bilinear, alpha: 0.0, kind: Adam, lr: 0.001, gamma: 1.0, epochs_per_stage: 30, stages: 1, weight_decay: 0.0 },
        "synth-proto-upn-convnet4" => Row { algorithm: Proto, aggregator: Upn, alpha: 0.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-proto-bbn-convnet4" => Row { algorithm: Proto, aggregator: Bbn, alpha: 10.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-transfer-avg-convnet4" => Row { algorithm: Transfer, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-transfer-pn-convnet4" => Row { algorithm: Transfer, aggregator: Pose, alpha: 100.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-dynamic-avg-convnet4" => Row { algorithm: Dynamic, aggregator: Avg, alpha: 0.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        "synth-dynamic-pn-convnet4" => Row { algorithm: Dynamic, aggregator: Pose, alpha: 100.0, kind: Sgd, lr: 0.05, gamma: 0.1, epochs_per_stage: 15, stages: 2, weight_decay: 5e-4 },
        other => return Err(Error::invalid(format!("unknown preset '{other}'"))),
    };

    let mut cfg = config(row, 0);
    if synth {
        // small episodes and a lighter dynamic stage 2 at desk scale
        cfg.episode = EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            q_query: 5,
        };
        cfg.eval_every = 10;
        cfg.dynamic = DynamicSpec {
            fake_novel: 6,
            base_per_batch: 3,
            images_per_class: 8,
            epochs: 60,
            lr: 0.001,
        };
    }
    Ok((backbone, cfg))
}
