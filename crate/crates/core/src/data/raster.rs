//! Rasterization of annotations onto the feature-map grid.

use super::types::{HeatmapKind, ImageSample, PartHeatmap};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// How ground-truth heatmaps are drawn. The paper-faithful default is a
/// single active cell per visible part; the Gaussian variant is an
/// experimental knob with no reference semantics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "style")]
pub enum GtHeatmapStyle {
    Binary,
    Gaussian { sigma: f64 },
}

impl Default for GtHeatmapStyle {
    fn default() -> Self {
        GtHeatmapStyle::Binary
    }
}

/// Rasterize part keypoints to a binary `(M, grid_h, grid_w)` map: each
/// visible part activates exactly the cell containing its proportionally
/// rescaled coordinate (floor); invisible parts yield all-zero channels.
pub fn rasterize_parts<T: Scalar>(
    sample: &ImageSample<T>,
    grid_h: usize,
    grid_w: usize,
) -> Result<PartHeatmap<T>> {
    rasterize_parts_with(sample, grid_h, grid_w, GtHeatmapStyle::Binary)
}

pub fn rasterize_parts_with<T: Scalar>(
    sample: &ImageSample<T>,
    grid_h: usize,
    grid_w: usize,
    style: GtHeatmapStyle,
) -> Result<PartHeatmap<T>> {
    let keypoints = sample
        .keypoints
        .as_ref()
        .ok_or_else(|| Error::data("sample has no part keypoints"))?;
    let (img_h, img_w) = (sample.img_h() as f64, sample.img_w() as f64);
    let mut values = Array3::<T>::zeros((keypoints.len(), grid_h, grid_w));
    for (i, kp) in keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        if !(kp.x >= 0.0 && kp.x < img_w && kp.y >= 0.0 && kp.y < img_h) {
            return Err(Error::data(format!(
                "keypoint {i} at ({}, {}) outside {img_w}x{img_h} image",
                kp.x, kp.y
            )));
        }
        let gx = kp.x * grid_w as f64 / img_w;
        let gy = kp.y * grid_h as f64 / img_h;
        match style {
            GtHeatmapStyle::Binary => {
                let c = (gx.floor() as usize).min(grid_w - 1);
                let r = (gy.floor() as usize).min(grid_h - 1);
                values[(i, r, c)] = T::one();
            }
            GtHeatmapStyle::Gaussian { sigma } => {
                // continuous peak at the scaled keypoint, cell centers at +0.5
                for r in 0..grid_h {
                    for c in 0..grid_w {
                        let dy = (r as f64 + 0.5) - gy;
                        let dx = (c as f64 + 0.5) - gx;
                        let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        values[(i, r, c)] = lit::<T>(v);
                    }
                }
            }
        }
    }
    Ok(PartHeatmap {
        values,
        kind: HeatmapKind::GroundTruth,
    })
}

/// Rasterize the bounding box to a two-channel map: channel 0 marks cells
/// whose centers fall inside the scaled box, channel 1 is the complement.
pub fn rasterize_bbox<T: Scalar>(
    sample: &ImageSample<T>,
    grid_h: usize,
    grid_w: usize,
) -> Result<PartHeatmap<T>> {
    let bbox = sample
        .bbox
        .as_ref()
        .ok_or_else(|| Error::data("sample has no bounding box"))?;
    let (img_h, img_w) = (sample.img_h() as f64, sample.img_w() as f64);
    let mut values = Array3::<T>::zeros((2, grid_h, grid_w));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let px = (c as f64 + 0.5) * img_w / grid_w as f64;
            let py = (r as f64 + 0.5) * img_h / grid_h as f64;
            let inside =
                px >= bbox.x_min && px <= bbox.x_max && py >= bbox.y_min && py <= bbox.y_max;
            if inside {
                values[(0, r, c)] = T::one();
            } else {
                values[(1, r, c)] = T::one();
            }
        }
    }
    Ok(PartHeatmap {
        values,
        kind: HeatmapKind::GroundTruth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::{BBox, Keypoint};
    use ndarray::Array3 as A3;

    fn sample_with(
        keypoints: Option<Vec<Keypoint>>,
        bbox: Option<BBox>,
        h: usize,
        w: usize,
    ) -> ImageSample<f64> {
        ImageSample {
            image: A3::zeros((h, w, 3)),
            class_id: 0,
            keypoints,
            bbox,
            path: None,
        }
    }

    #[test]
    fn center_keypoint_lands_in_center_cell() {
        let s = sample_with(
            Some(vec![Keypoint { x: 50.0, y: 50.0, visible: true }]),
            None,
            100,
            100,
        );
        let hm = rasterize_parts(&s, 10, 10).unwrap();
        assert_eq!(hm.values[(0, 5, 5)], 1.0);
        assert_eq!(hm.values.sum(), 1.0);
    }

    #[test]
    fn origin_keypoint_lands_in_origin_cell() {
        let s = sample_with(
            Some(vec![Keypoint { x: 0.0, y: 0.0, visible: true }]),
            None,
            64,
            64,
        );
        let hm = rasterize_parts(&s, 8, 8).unwrap();
        assert_eq!(hm.values[(0, 0, 0)], 1.0);
    }

    #[test]
    fn invisible_parts_leave_zero_channels() {
        let s = sample_with(
            Some(vec![
                Keypoint { x: 1.0, y: 1.0, visible: false },
                Keypoint { x: 2.0, y: 2.0, visible: false },
            ]),
            None,
            32,
            32,
        );
        let hm = rasterize_parts(&s, 4, 4).unwrap();
        assert_eq!(hm.values.sum(), 0.0);
        assert!(hm.validate().is_ok());
    }

    #[test]
    fn missing_or_out_of_bounds_keypoints_error() {
        let s = sample_with(None, None, 32, 32);
        assert!(rasterize_parts(&s, 4, 4).is_err());
        let s = sample_with(
            Some(vec![Keypoint { x: 40.0, y: 1.0, visible: true }]),
            None,
            32,
            32,
        );
        assert!(rasterize_parts(&s, 4, 4).is_err());
    }

    #[test]
    fn full_cover_bbox_fills_foreground_channel() {
        let s = sample_with(
            None,
            Some(BBox { x_min: 0.0, y_min: 0.0, x_max: 64.0, y_max: 64.0 }),
            64,
            64,
        );
        let hm = rasterize_bbox(&s, 4, 4).unwrap();
        assert_eq!(hm.values.index_axis(ndarray::Axis(0), 0).sum(), 16.0);
        assert_eq!(hm.values.index_axis(ndarray::Axis(0), 1).sum(), 0.0);
    }

    #[test]
    fn left_half_bbox_marks_left_columns() {
        let s = sample_with(
            None,
            Some(BBox { x_min: 0.0, y_min: 0.0, x_max: 32.0, y_max: 64.0 }),
            64,
            64,
        );
        let hm = rasterize_bbox(&s, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if c < 2 { 1.0 } else { 0.0 };
                assert_eq!(hm.values[(0, r, c)], expect, "cell ({r}, {c})");
            }
        }
    }

    #[test]
    fn bbox_channels_sum_to_one_everywhere() {
        let s = sample_with(
            None,
            Some(BBox { x_min: 10.0, y_min: 20.0, x_max: 47.0, y_max: 55.0 }),
            64,
            64,
        );
        let hm = rasterize_bbox(&s, 7, 7).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                assert_eq!(hm.values[(0, r, c)] + hm.values[(1, r, c)], 1.0);
            }
        }
    }

    #[test]
    fn bbox_missing_is_an_error() {
        let s = sample_with(None, None, 16, 16);
        assert!(rasterize_bbox(&s, 4, 4).is_err());
    }

    #[test]
    fn gaussian_style_peaks_near_keypoint_and_stays_in_range() {
        let s = sample_with(
            Some(vec![Keypoint { x: 31.5, y: 15.5, visible: true }]),
            None,
            64,
            64,
        );
        let hm = rasterize_parts_with(&s, 8, 8, GtHeatmapStyle::Gaussian { sigma: 1.0 }).unwrap();
        let mut best = (0usize, 0usize);
        let mut best_v = -1.0;
        for r in 0..8 {
            for c in 0..8 {
                assert!(hm.values[(0, r, c)] >= 0.0 && hm.values[(0, r, c)] <= 1.0);
                if hm.values[(0, r, c)] > best_v {
                    best_v = hm.values[(0, r, c)];
                    best = (r, c);
                }
            }
        }
        assert_eq!(best, (1, 3));
    }
}
