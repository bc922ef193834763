//! Part-location estimation: the two-convolution heatmap head, the
//! pixel-wise log loss that supervises it, and PCK evaluation.

use crate::data::{BBox, HeatmapKind, Keypoint, PartHeatmap};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{BatchNorm2dLayer, Conv2dLayer, ParamGroup, ParamStore};
use crate::scalar::{lit, log_clamp, Scalar};
use ndarray::{Array4, Axis, Ix4};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Channel plan of the heatmap head: Conv(3x3) -> BN -> ReLU -> Conv(3x3)
/// -> sigmoid. The backbone pairings are 64 -> 30 -> M for the 4-layer
/// network and 256 -> 64 -> M for the modified ResNet18.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseHeadConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_parts: usize,
}

impl PoseHeadConfig {
    pub fn for_convnet4(num_parts: usize) -> Self {
        PoseHeadConfig {
            in_channels: 64,
            hidden_channels: 30,
            num_parts,
        }
    }

    pub fn for_resnet18mod(num_parts: usize) -> Self {
        PoseHeadConfig {
            in_channels: 256,
            hidden_channels: 64,
            num_parts,
        }
    }
}

/// The pose estimator network. When the tap resolution differs from the
/// final feature map's, the hidden activation is bilinearly resized before
/// the second convolution so the heatmap lands at the final map's H x W.
#[derive(Clone)]
pub struct PoseHead {
    pub config: PoseHeadConfig,
    conv1: Conv2dLayer,
    bn: BatchNorm2dLayer,
    conv2: Conv2dLayer,
    pub out_hw: usize,
}

impl PoseHead {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        config: PoseHeadConfig,
        out_hw: usize,
    ) -> Self {
        let group = ParamGroup::PoseHead;
        let conv1 = Conv2dLayer::new(
            store,
            rng,
            "pose_head.conv1",
            group,
            config.in_channels,
            config.hidden_channels,
            3,
            1,
            1,
            false,
        );
        let bn = BatchNorm2dLayer::new(store, "pose_head.bn", group, config.hidden_channels);
        let conv2 = Conv2dLayer::new(
            store,
            rng,
            "pose_head.conv2",
            group,
            config.hidden_channels,
            config.num_parts,
            3,
            1,
            1,
            true,
        );
        PoseHead {
            config,
            conv1,
            bn,
            conv2,
            out_hw,
        }
    }

    /// Splice the head into a graph. `tap` is the backbone's intermediate
    /// map; the returned node holds sigmoid heatmaps `(N, M, out_hw, out_hw)`.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        tap: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(tap).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                format!("(N, {}, H', W')", self.config.in_channels),
                format!("{shape:?}"),
            ));
        }
        let c1 = self.conv1.apply(g, store, tap)?;
        let b = self.bn.apply(g, store, c1);
        let mut x = g.relu(b);
        if shape[2] != self.out_hw || shape[3] != self.out_hw {
            x = g.resize_bilinear(x, self.out_hw, self.out_hw);
        }
        let c2 = self.conv2.apply(g, store, x)?;
        Ok(g.sigmoid(c2))
    }

    /// Plain forward pass for a batch of intermediate maps.
    pub fn predict<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        intermediate: &Array4<T>,
        training: bool,
    ) -> Result<Vec<PartHeatmap<T>>> {
        let mut g = Graph::new(training);
        let tap = g.input(intermediate.clone().into_dyn());
        let m = self.apply(&mut g, store, tap)?;
        let m4 = g.value(m).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        Ok((0..intermediate.shape()[0])
            .map(|n| PartHeatmap {
                values: m4.index_axis(Axis(0), n).to_owned(),
                kind: HeatmapKind::Predicted,
            })
            .collect())
    }
}

/// Mean pixel-wise binary log loss between a predicted heatmap and a binary
/// target: `-(1/(M*H*W)) sum [m* log m + (1 - m*) log(1 - m)]`. Predictions
/// are clamped to `[1e-7, 1 - 1e-7]` before the logs.
pub fn pose_loss<T: Scalar>(pred: &PartHeatmap<T>, target: &PartHeatmap<T>) -> Result<T> {
    if pred.values.shape() != target.values.shape() {
        return Err(Error::shape(
            format!("{:?}", target.values.shape()),
            format!("{:?}", pred.values.shape()),
        ));
    }
    let clamp = log_clamp::<T>();
    let hi = T::one() - clamp;
    let count = T::from_usize(pred.values.len()).unwrap();
    let mut loss = T::zero();
    for (&p, &t) in pred.values.iter().zip(target.values.iter()) {
        let pc = p.max(clamp).min(hi);
        loss -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
    }
    Ok(loss / count)
}

/// Predicted keypoint of one heatmap channel: the argmax cell (first in
/// row-major order on ties) mapped back to image pixels at the cell center.
pub fn channel_argmax_pixel<T: Scalar>(
    channel: ndarray::ArrayView2<'_, T>,
    img_h: f64,
    img_w: f64,
) -> (f64, f64) {
    let (gh, gw) = (channel.nrows(), channel.ncols());
    let mut best = T::neg_infinity();
    let mut best_rc = (0usize, 0usize);
    for r in 0..gh {
        for c in 0..gw {
            if channel[(r, c)] > best {
                best = channel[(r, c)];
                best_rc = (r, c);
            }
        }
    }
    let (r, c) = best_rc;
    let y = (r as f64 + 0.5) * img_h / gh as f64;
    let x = (c as f64 + 0.5) * img_w / gw as f64;
    (x, y)
}

/// Fraction of visible parts whose predicted location falls within
/// `tau * bbox diagonal` of the ground truth keypoint.
pub fn pck<T: Scalar>(
    pred: &PartHeatmap<T>,
    keypoints: &[Keypoint],
    bbox: &BBox,
    img_h: f64,
    img_w: f64,
    tau: f64,
) -> Result<f64> {
    let parts = pred.values.shape()[0];
    if keypoints.len() != parts {
        return Err(Error::shape(
            format!("{parts} keypoints"),
            format!("{}", keypoints.len()),
        ));
    }
    let diag = bbox.diagonal();
    let mut visible = 0usize;
    let mut correct = 0usize;
    for (i, kp) in keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        visible += 1;
        let (px, py) = channel_argmax_pixel(pred.values.index_axis(Axis(0), i), img_h, img_w);
        let dist = ((px - kp.x).powi(2) + (py - kp.y).powi(2)).sqrt();
        if dist <= tau * diag {
            correct += 1;
        }
    }
    if visible == 0 {
        return Err(Error::data("pck requires at least one visible part"));
    }
    Ok(correct as f64 / visible as f64)
}

/// PCK evaluated over a threshold grid; rows serialize as
/// `threshold,accuracy`.
#[derive(Clone, Debug, PartialEq)]
pub struct PckTable {
    pub rows: Vec<(f64, f64)>,
}

impl PckTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "threshold,accuracy")?;
        for (t, a) in &self.rows {
            writeln!(out, "{t},{a}")?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let mut parts = line.split(',');
            let t = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(format!("bad pck row: {line}")))?;
            let a = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(format!("bad pck row: {line}")))?;
            rows.push((t, a));
        }
        Ok(PckTable { rows })
    }
}

/// Default threshold grid 0.05..=0.5.
pub fn pck_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

/// Scalar form of the total training objective,
/// `L_total = L_fewshot + alpha * L_pose`. NaN inputs abort loudly.
pub fn total_loss<T: Scalar>(few_shot_loss: T, pose_loss: T, alpha: f64) -> Result<T> {
    if !few_shot_loss.is_finite() || !pose_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (few_shot {few_shot_loss}, pose {pose_loss})"
        )));
    }
    Ok(few_shot_loss + lit::<T>(alpha) * pose_loss)
}
