//! Feature aggregators: turning a feature map (and optionally a part
//! heatmap) into a representation vector.
//!
//! The pure functions here run the same graph ops training uses, so there is
//! a single implementation of each formula. Pose attention pooling divides
//! each per-part weighted sum by `eps + sum(m_i)` with `eps = 1e-5` fixed;
//! an all-zero channel therefore yields an exactly computable near-zero
//! block and needs no special casing.

use crate::data::PartHeatmap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::{lit, Scalar};
use ndarray::{Array1, Array2, Array3, ArrayD, Ix2};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Vector layout, determining both the length and how downstream analyses
/// may slice it. Pose-style layouts concatenate per-part blocks of size C.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "layout")]
pub enum Layout {
    Avg { channels: usize },
    Pose { channels: usize, parts: usize },
    Bilinear { channels: usize },
    Upn { channels: usize, parts: usize },
    Bbn { channels: usize },
}

impl Layout {
    pub fn len(&self) -> usize {
        match *self {
            Layout::Avg { channels } => channels,
            Layout::Pose { channels, parts } => channels * parts,
            Layout::Bilinear { channels } => channels * channels,
            Layout::Upn { channels, parts } => channels * parts,
            Layout::Bbn { channels } => 2 * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-part block structure, when the layout has one.
    pub fn part_blocks(&self) -> Option<(usize, usize)> {
        match *self {
            Layout::Pose { channels, parts } | Layout::Upn { channels, parts } => {
                Some((parts, channels))
            }
            Layout::Bbn { channels } => Some((2, channels)),
            _ => None,
        }
    }
}

/// A pooled feature vector plus its layout tag.
#[derive(Clone, Debug)]
pub struct RepresentationVector<T: Scalar> {
    pub values: Array1<T>,
    pub layout: Layout,
}

impl<T: Scalar> RepresentationVector<T> {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.layout.len() {
            return Err(Error::shape(
                format!("{} values for {:?}", self.layout.len(), self.layout),
                format!("{}", self.values.len()),
            ));
        }
        Ok(())
    }
}

/// Learned category-agnostic pose vectors for unsupervised normalization.
#[derive(Clone, Debug)]
pub struct PoseVectorBank<T: Scalar> {
    pub vectors: Array2<T>,
}

impl<T: Scalar> PoseVectorBank<T> {
    pub fn init(rng: &mut ChaCha20Rng, parts: usize, channels: usize) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        let vectors = Array2::from_shape_fn((parts, channels), |_| {
            lit::<T>(crate::nn::normal_sample(rng) * std)
        });
        PoseVectorBank { vectors }
    }

    pub fn num_parts(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn channels(&self) -> usize {
        self.vectors.ncols()
    }
}

fn single_batch<T: Scalar>(f: &Array3<T>) -> ArrayD<T> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    f.clone()
        .into_shape_with_order((1, c, h, w))
        .unwrap()
        .into_dyn()
}

fn extract_row<T: Scalar>(out: &ArrayD<T>) -> Array1<T> {
    out.view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .row(0)
        .to_owned()
}

/// Global average pooling: `v_c = mean_hw F(c, h, w)`.
pub fn avg_pool<T: Scalar>(f: &Array3<T>) -> RepresentationVector<T> {
    let mut g = Graph::new(false);
    let fi = g.input(single_batch(f));
    let v = g.global_avg_pool(fi);
    RepresentationVector {
        values: extract_row(g.value(v)),
        layout: Layout::Avg {
            channels: f.shape()[0],
        },
    }
}

/// Pose-normalized pooling: each heatmap channel acts as a spatial attention
/// mask and the per-part vectors concatenate in part order.
pub fn pose_normalize<T: Scalar>(
    f: &Array3<T>,
    m: &PartHeatmap<T>,
) -> Result<RepresentationVector<T>> {
    let mut g = Graph::new(false);
    let fi = g.input(single_batch(f));
    let mi = g.input(single_batch(&m.values));
    let v = g.attention_pool(fi, mi)?;
    let layout = if m.num_parts() == 2 {
        Layout::Bbn {
            channels: f.shape()[0],
        }
    } else {
        Layout::Pose {
            channels: f.shape()[0],
            parts: m.num_parts(),
        }
    };
    Ok(RepresentationVector {
        values: extract_row(g.value(v)),
        layout,
    })
}

/// Bilinear pooling: spatial sum of outer products, then signed square root
/// and L2 normalization (skipped below norm 1e-12).
pub fn bilinear_pool<T: Scalar>(f: &Array3<T>) -> RepresentationVector<T> {
    let mut g = Graph::new(false);
    let fi = g.input(single_batch(f));
    let b = g.bilinear_pool(fi);
    let s = g.signed_sqrt(b);
    let z = g.l2_normalize_rows(s);
    RepresentationVector {
        values: extract_row(g.value(z)),
        layout: Layout::Bilinear {
            channels: f.shape()[0],
        },
    }
}

/// Raw bilinear descriptor before signed-sqrt/L2 post-processing.
pub fn bilinear_pool_raw<T: Scalar>(f: &Array3<T>) -> Array1<T> {
    let mut g = Graph::new(false);
    let fi = g.input(single_batch(f));
    let b = g.bilinear_pool(fi);
    extract_row(g.value(b))
}

/// Unsupervised pose normalization: soft-assign each location to the bank
/// vectors by feature distance, then attention-pool with the assignments.
pub fn upn_pool<T: Scalar>(
    f: &Array3<T>,
    bank: &PoseVectorBank<T>,
    temperature: T,
) -> Result<RepresentationVector<T>> {
    if bank.channels() != f.shape()[0] {
        return Err(Error::shape(
            format!("bank with {} channels", f.shape()[0]),
            format!("{}", bank.channels()),
        ));
    }
    let mut g = Graph::new(false);
    let fi = g.input(single_batch(f));
    let bi = g.input(bank.vectors.clone().into_dyn());
    let a = g.soft_assign(fi, bi, temperature)?;
    let v = g.attention_pool(fi, a)?;
    Ok(RepresentationVector {
        values: extract_row(g.value(v)),
        layout: Layout::Upn {
            channels: f.shape()[0],
            parts: bank.num_parts(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HeatmapKind;
    use crate::util::rng_for;
    use ndarray::Array3;
    use rand::Rng;

    fn map_1x2x2(vals: [f64; 4]) -> Array3<f64> {
        Array3::from_shape_vec((1, 2, 2), vals.to_vec()).unwrap()
    }

    #[test]
    fn avg_pool_examples() {
        let f = Array3::from_elem((3, 4, 4), 2.0);
        let v = avg_pool(&f);
        v.validate().unwrap();
        assert!(v.values.iter().all(|&x| (x - 2.0f64).abs() < 1e-12));

        let v = avg_pool(&map_1x2x2([1.0, 2.0, 3.0, 4.0]));
        assert!((v.values[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_is_linear() {
        let mut rng = rng_for(0, "agg", 0);
        let f = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0f64..1.0));
        let g = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0f64..1.0));
        let combo = &f * 0.3 + &g * 1.7;
        let lhs = avg_pool(&combo);
        let rhs_f = avg_pool(&f);
        let rhs_g = avg_pool(&g);
        for i in 0..2 {
            let expect = 0.3 * rhs_f.values[i] + 1.7 * rhs_g.values[i];
            assert!((lhs.values[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_normalize_zero_channel_gives_zero_block() {
        let f = map_1x2x2([1.0, 2.0, 3.0, 4.0]);
        let m = PartHeatmap {
            values: Array3::zeros((3, 2, 2)),
            kind: HeatmapKind::GroundTruth,
        };
        let v = pose_normalize(&f, &m).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pose_normalize_diagonal_mask_example() {
        let f = map_1x2x2([1.0, 2.0, 3.0, 4.0]);
        let mut mv = Array3::zeros((1, 2, 2));
        mv[(0, 0, 0)] = 1.0;
        mv[(0, 1, 1)] = 1.0;
        let m = PartHeatmap {
            values: mv,
            kind: HeatmapKind::GroundTruth,
        };
        let v = pose_normalize(&f, &m).unwrap();
        let expect = 5.0 / (1e-5 + 2.0);
        assert!((v.values[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn pose_normalize_uniform_mask_matches_avg_pool() {
        let mut rng = rng_for(1, "agg", 1);
        let f = Array3::from_shape_fn((4, 5, 5), |_| rng.gen_range(-1.0f64..1.0));
        let m = PartHeatmap {
            values: Array3::from_elem((3, 5, 5), 0.8),
            kind: HeatmapKind::Predicted,
        };
        let v = pose_normalize(&f, &m).unwrap();
        let a = avg_pool(&f);
        for part in 0..3 {
            for c in 0..4 {
                let rel = (v.values[part * 4 + c] - a.values[c]).abs()
                    / a.values[c].abs().max(1e-12);
                assert!(rel < 1e-4, "part {part} channel {c}: rel {rel}");
            }
        }
    }

    #[test]
    fn pose_normalize_scale_invariant_up_to_epsilon() {
        let mut rng = rng_for(2, "agg", 2);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0f64..1.0));
        let base = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(0.1f64..0.9));
        let scaled = &base * 3.7;
        let v1 = pose_normalize(
            &f,
            &PartHeatmap { values: base, kind: HeatmapKind::Predicted },
        )
        .unwrap();
        let v2 = pose_normalize(
            &f,
            &PartHeatmap { values: scaled, kind: HeatmapKind::Predicted },
        )
        .unwrap();
        for (a, b) in v1.values.iter().zip(v2.values.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn pose_normalize_equivariant_to_joint_spatial_permutation() {
        let mut rng = rng_for(3, "agg", 3);
        let f = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0f64..1.0));
        let m = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(0.0f64..1.0));
        // joint permutation: transpose the spatial grid of both tensors
        let ft = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| f[(c, j, i)]);
        let mt = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| m[(c, j, i)]);
        let v1 = pose_normalize(
            &f,
            &PartHeatmap { values: m, kind: HeatmapKind::Predicted },
        )
        .unwrap();
        let v2 = pose_normalize(
            &ft,
            &PartHeatmap { values: mt, kind: HeatmapKind::Predicted },
        )
        .unwrap();
        for (a, b) in v1.values.iter().zip(v2.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn part_permutation_permutes_blocks() {
        let mut rng = rng_for(4, "agg", 4);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0f64..1.0));
        let m = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(0.0f64..1.0));
        let perm = [3usize, 1, 0, 2];
        let mut mp = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            mp.index_axis_mut(ndarray::Axis(0), dst)
                .assign(&m.index_axis(ndarray::Axis(0), src));
        }
        let v = pose_normalize(
            &f,
            &PartHeatmap { values: m, kind: HeatmapKind::Predicted },
        )
        .unwrap();
        let vp = pose_normalize(
            &f,
            &PartHeatmap { values: mp, kind: HeatmapKind::Predicted },
        )
        .unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(vp.values[dst * 3 + c], v.values[src * 3 + c]);
            }
        }
    }

    #[test]
    fn bilinear_single_channel_sums_squares() {
        let raw = bilinear_pool_raw(&map_1x2x2([1.0, 2.0, 3.0, 4.0]));
        assert!((raw[0] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_output_dimensions_and_unit_norm() {
        let mut rng = rng_for(5, "agg", 5);
        let f = Array3::from_shape_fn((64, 3, 3), |_| rng.gen_range(-1.0f64..1.0));
        let v = bilinear_pool(&f);
        v.validate().unwrap();
        assert_eq!(v.values.len(), 4096);
        let norm: f64 = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_raw_matrix_is_symmetric_psd() {
        let mut rng = rng_for(6, "agg", 6);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0f64..1.0));
        let raw = bilinear_pool_raw(&f);
        let b = raw.into_shape_with_order((3, 3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((b[(i, j)] - b[(j, i)]).abs() < 1e-10);
            }
        }
        // PSD: x^T B x >= 0 on random probes
        for probe in 0..20 {
            let x: Vec<f64> = (0..3)
                .map(|k| ((probe * 3 + k) as f64 * 0.713).sin())
                .collect();
            let mut quad = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    quad += x[i] * b[(i, j)] * x[j];
                }
            }
            assert!(quad >= -1e-10);
        }
    }

    #[test]
    fn bilinear_zero_map_yields_zero_vector() {
        let v = bilinear_pool(&Array3::<f64>::zeros((2, 3, 3)));
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn upn_single_part_matches_avg_pool() {
        let mut rng = rng_for(7, "agg", 7);
        let f = Array3::from_shape_fn((5, 4, 4), |_| rng.gen_range(-1.0f64..1.0));
        let bank = PoseVectorBank {
            vectors: Array2::from_elem((1, 5), 0.3),
        };
        let v = upn_pool(&f, &bank, 1.0).unwrap();
        let a = avg_pool(&f);
        for c in 0..5 {
            let rel = (v.values[c] - a.values[c]).abs() / a.values[c].abs().max(1.0);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn upn_separated_clusters_recover_their_means() {
        // two spatial halves carry distinct constant features matching
        // the two bank vectors; a cold temperature hardens the assignment
        let mut f = Array3::<f64>::zeros((2, 2, 4));
        for j in 0..4 {
            let left = j < 2;
            f[(0, 0, j)] = if left { 1.0 } else { 0.0 };
            f[(1, 0, j)] = if left { 0.0 } else { 1.0 };
            f[(0, 1, j)] = if left { 1.0 } else { 0.0 };
            f[(1, 1, j)] = if left { 0.0 } else { 1.0 };
        }
        let bank = PoseVectorBank {
            vectors: ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        };
        let v = upn_pool(&f, &bank, 0.01).unwrap();
        // part 0 mean ~ (1, 0); part 1 mean ~ (0, 1), up to the eps guard
        assert!((v.values[0] - 1.0).abs() < 1e-4);
        assert!(v.values[1].abs() < 1e-4);
        assert!(v.values[2].abs() < 1e-4);
        assert!((v.values[3] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn upn_rejects_bad_temperature_and_bank() {
        let f = Array3::<f64>::zeros((2, 2, 2));
        let bank = PoseVectorBank {
            vectors: Array2::zeros((3, 2)),
        };
        assert!(upn_pool(&f, &bank, 0.0).is_err());
        let wrong = PoseVectorBank {
            vectors: Array2::<f64>::zeros((3, 5)),
        };
        assert!(upn_pool(&f, &wrong, 1.0).is_err());
    }
}
