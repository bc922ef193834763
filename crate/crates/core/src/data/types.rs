//! Domain types shared across dataset handling and evaluation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array3;
use std::collections::BTreeSet;

/// One part annotation in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Axis-aligned box in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn diagonal(&self) -> f64 {
        (self.width().powi(2) + self.height().powi(2)).sqrt()
    }
}

/// An image with class label, optional part keypoints, and optional box.
/// Pixels are `(H, W, 3)` reals in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageSample<T: Scalar> {
    pub image: Array3<T>,
    pub class_id: u32,
    pub keypoints: Option<Vec<Keypoint>>,
    pub bbox: Option<BBox>,
    /// Relative path when the sample came from (or goes to) disk.
    pub path: Option<String>,
}

impl<T: Scalar> ImageSample<T> {
    pub fn img_h(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn img_w(&self) -> usize {
        self.image.shape()[1]
    }

    /// Check the documented invariants: visible keypoints inside bounds and
    /// a positive-area in-bounds box.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.img_h() as f64, self.img_w() as f64);
        if let Some(kps) = &self.keypoints {
            for (i, kp) in kps.iter().enumerate() {
                if kp.visible && !(kp.x >= 0.0 && kp.x < w && kp.y >= 0.0 && kp.y < h) {
                    return Err(Error::data(format!(
                        "keypoint {i} at ({}, {}) outside {w}x{h} image",
                        kp.x, kp.y
                    )));
                }
            }
        }
        if let Some(b) = &self.bbox {
            if b.width() <= 0.0 || b.height() <= 0.0 {
                return Err(Error::data(format!(
                    "bbox has non-positive extent: {b:?}"
                )));
            }
            if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w || b.y_max > h {
                return Err(Error::data(format!(
                    "bbox {b:?} outside {w}x{h} image"
                )));
            }
        }
        Ok(())
    }
}

/// Disjoint base / validation / novel class partition.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub base: BTreeSet<u32>,
    pub validation: BTreeSet<u32>,
    pub novel: BTreeSet<u32>,
}

impl SplitAssignment {
    pub fn contains(&self, id: u32) -> bool {
        self.base.contains(&id) || self.validation.contains(&id) || self.novel.contains(&id)
    }
}

/// The three working sets of one experiment: base-class training samples,
/// and the reference/query split of the validation and novel classes.
#[derive(Clone, Debug)]
pub struct DatasetBundle<T: Scalar> {
    pub repre: Vec<ImageSample<T>>,
    pub refer: Vec<ImageSample<T>>,
    pub query: Vec<ImageSample<T>>,
    pub num_parts: usize,
    pub splits: SplitAssignment,
}

impl<T: Scalar> DatasetBundle<T> {
    /// Reference samples restricted to one side of the class split.
    pub fn refer_of(&self, classes: &BTreeSet<u32>) -> Vec<&ImageSample<T>> {
        self.refer
            .iter()
            .filter(|s| classes.contains(&s.class_id))
            .collect()
    }

    pub fn query_of(&self, classes: &BTreeSet<u32>) -> Vec<&ImageSample<T>> {
        self.query
            .iter()
            .filter(|s| classes.contains(&s.class_id))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapKind {
    GroundTruth,
    Predicted,
}

/// `(M, H, W)` part-location map in `[0, 1]`. Ground truth is binary with at
/// most one active cell per channel; predictions are sigmoid-valued.
#[derive(Clone, Debug)]
pub struct PartHeatmap<T: Scalar> {
    pub values: Array3<T>,
    pub kind: HeatmapKind,
}

impl<T: Scalar> PartHeatmap<T> {
    pub fn num_parts(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        for &v in self.values.iter() {
            if v < T::zero() || v > T::one() {
                return Err(Error::data(format!("heatmap value {v} outside [0, 1]")));
            }
            if self.kind == HeatmapKind::GroundTruth && v != T::zero() && v != T::one() {
                return Err(Error::data(format!(
                    "ground-truth heatmap value {v} is not binary"
                )));
            }
        }
        Ok(())
    }
}

/// One N-way K-shot task. Entries are `(index into the source pool, class
/// index in 0..n_way)`; supports and queries never share a pool index.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.support.len() != self.n_way * self.k_shot {
            return Err(Error::data(format!(
                "expected {} support entries, got {}",
                self.n_way * self.k_shot,
                self.support.len()
            )));
        }
        if self.query.len() != self.n_way * self.q_query {
            return Err(Error::data(format!(
                "expected {} query entries, got {}",
                self.n_way * self.q_query,
                self.query.len()
            )));
        }
        let sup: BTreeSet<usize> = self.support.iter().map(|&(i, _)| i).collect();
        for &(i, _) in &self.query {
            if sup.contains(&i) {
                return Err(Error::data(format!(
                    "pool index {i} appears in both support and query"
                )));
            }
        }
        Ok(())
    }
}
