//! The full learner assembly: backbone, optional pose head, aggregator,
//! classifier and weight-generator heads, plus batched feature extraction.

use crate::aggregate::Layout;
use crate::backbone::{Arch, Backbone, BackboneConfig, BackboneTaps};
use crate::data::{rasterize_bbox, rasterize_parts, ImageSample, PartHeatmap};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{LinearLayer, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::pose::{PoseHead, PoseHeadConfig};
use crate::scalar::{lit, Scalar};
use crate::util::rng_for;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Transfer,
    Proto,
    Dynamic,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::Transfer => f.write_str("transfer"),
            Algorithm::Proto => f.write_str("proto"),
            Algorithm::Dynamic => f.write_str("dynamic"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Avg,
    Pose,
    PoseGt,
    Bilinear,
    Upn,
    Bbn,
    AvgMultitask,
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Aggregator::Avg => "avg",
            Aggregator::Pose => "pose",
            Aggregator::PoseGt => "pose_gt",
            Aggregator::Bilinear => "bilinear",
            Aggregator::Upn => "upn",
            Aggregator::Bbn => "bbn",
            Aggregator::AvgMultitask => "avg_multitask",
        };
        f.write_str(s)
    }
}

impl Aggregator {
    /// Does this aggregator train (and use) the heatmap head?
    pub fn has_pose_head(self) -> bool {
        matches!(self, Aggregator::Pose | Aggregator::Bbn | Aggregator::AvgMultitask)
    }

    /// Does classification attention come from heatmaps?
    pub fn uses_heatmap_attention(self) -> bool {
        matches!(self, Aggregator::Pose | Aggregator::PoseGt | Aggregator::Bbn)
    }

    /// Number of heatmap channels given the dataset's part count.
    pub fn heatmap_channels(self, num_parts: usize) -> usize {
        match self {
            Aggregator::Bbn => 2,
            _ => num_parts,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub algorithm: Algorithm,
    pub aggregator: Aggregator,
    pub num_parts: usize,
    pub num_base_classes: usize,
    pub upn_temperature: f64,
}

impl ModelSpec {
    pub fn feature_layout(&self) -> Result<Layout> {
        let profile = self.backbone.profile()?;
        let c = profile.final_channels;
        Ok(match self.aggregator {
            Aggregator::Avg | Aggregator::AvgMultitask => Layout::Avg { channels: c },
            Aggregator::Pose | Aggregator::PoseGt => Layout::Pose {
                channels: c,
                parts: self.num_parts,
            },
            Aggregator::Bilinear => Layout::Bilinear { channels: c },
            Aggregator::Upn => Layout::Upn {
                channels: c,
                parts: self.num_parts,
            },
            Aggregator::Bbn => Layout::Bbn { channels: c },
        })
    }
}

/// Base-class classifier: plain linear for transfer, scaled cosine for
/// dynamic few-shot learning.
#[derive(Clone)]
pub enum ClassifierHead {
    Linear(LinearLayer),
    Cosine { linear: LinearLayer, scale: ParamId },
}

/// Classifier learned on novel classes during transfer fine-tuning. Lives
/// outside the parameter store so base-phase parameters stay untouched.
#[derive(Clone, Debug)]
pub struct NovelHead<T: Scalar> {
    pub class_ids: Vec<u32>,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub pose_frozen: bool,
    pub base_trained: bool,
    pub seed: u64,
    /// Resolved training configuration, for provenance hashes.
    pub provenance: String,
}

/// Where classification heatmaps come from when splicing a batch.
pub enum HeatmapSpec<T: Scalar> {
    NotNeeded,
    Predicted,
    Ground(Array4<T>),
    Mixed { gt: Array4<T>, use_pred: Vec<bool> },
}

/// Nodes of one batched forward pass.
pub struct FeaturePlan {
    pub features: NodeId,
    pub predicted_heatmaps: Option<NodeId>,
    pub taps: BackboneTaps,
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub pose_head: Option<PoseHead>,
    pub upn_bank: Option<ParamId>,
    pub classifier: Option<ClassifierHead>,
    pub generator: Option<LinearLayer>,
    pub novel_head: Option<NovelHead<T>>,
    pub store: ParamStore<T>,
    pub meta: ModelMeta,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.backbone.validate()?;
        if spec.num_parts == 0 && spec.aggregator.uses_heatmap_attention() {
            return Err(Error::invalid("pose aggregators require num_parts > 0"));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let backbone = Backbone::build(&mut store, &mut rng, &spec.backbone)?;
        let profile = spec.backbone.profile()?;

        let pose_head = spec.aggregator.has_pose_head().then(|| {
            let channels = spec.aggregator.heatmap_channels(spec.num_parts);
            let hidden = match spec.backbone.arch {
                Arch::ConvNet4 => 30,
                Arch::ResNet18Mod => 64,
            };
            let cfg = PoseHeadConfig {
                in_channels: profile.tap_channels,
                hidden_channels: hidden,
                num_parts: channels,
            };
            PoseHead::build(&mut store, &mut rng, cfg, profile.final_hw)
        });

        let upn_bank = (spec.aggregator == Aggregator::Upn).then(|| {
            let bank = crate::aggregate::PoseVectorBank::<T>::init(
                &mut rng,
                spec.num_parts,
                profile.final_channels,
            );
            store.register(
                "upn.bank",
                ParamGroup::Aggregator,
                ParamKind::Trainable,
                bank.vectors.into_dyn(),
            )
        });

        let layout = spec.feature_layout()?;
        let d = layout.len();
        let classifier = match spec.algorithm {
            Algorithm::Proto => None,
            Algorithm::Transfer => Some(ClassifierHead::Linear(LinearLayer::new(
                &mut store,
                &mut rng,
                "classifier",
                ParamGroup::Classifier,
                d,
                spec.num_base_classes.max(1),
                true,
            ))),
            Algorithm::Dynamic => {
                let linear = LinearLayer::new(
                    &mut store,
                    &mut rng,
                    "classifier",
                    ParamGroup::Classifier,
                    d,
                    spec.num_base_classes.max(1),
                    false,
                );
                let scale = store.register(
                    "classifier.scale",
                    ParamGroup::Classifier,
                    ParamKind::Trainable,
                    ArrayD::from_elem(IxDyn(&[1]), lit::<T>(10.0)),
                );
                Some(ClassifierHead::Cosine { linear, scale })
            }
        };

        let generator = (spec.algorithm == Algorithm::Dynamic).then(|| {
            // identity init: an untrained generator emits the normalized
            // support mean unchanged
            let mut eye = Array2::<T>::zeros((d, d));
            for i in 0..d {
                eye[(i, i)] = T::one();
            }
            let weight = store.register(
                "generator.weight",
                ParamGroup::Generator,
                ParamKind::Trainable,
                eye.into_dyn(),
            );
            LinearLayer { weight, bias: None }
        });

        Ok(Model {
            spec,
            backbone,
            pose_head,
            upn_bank,
            classifier,
            generator,
            novel_head: None,
            store,
            meta: ModelMeta {
                pose_frozen: false,
                base_trained: false,
                seed,
                provenance: String::new(),
            },
        })
    }

    pub fn feature_layout(&self) -> Layout {
        self.spec.feature_layout().expect("validated at build")
    }

    pub fn final_hw(&self) -> usize {
        self.spec.backbone.profile().expect("validated").final_hw
    }

    /// Freeze the pose estimator: its parameters become constants, its batch
    /// norm switches to running statistics, and optimizer steps covering the
    /// group raise an error.
    pub fn freeze_pose_head(&mut self) {
        self.store.freeze(ParamGroup::PoseHead);
        self.meta.pose_frozen = true;
    }

    /// Freeze every feature-producing group (backbone, pose head,
    /// aggregator); used before fine-tuning and generator training.
    pub fn freeze_features(&mut self) {
        self.store.freeze(ParamGroup::Backbone);
        self.store.freeze(ParamGroup::PoseHead);
        self.store.freeze(ParamGroup::Aggregator);
        self.meta.pose_frozen = true;
    }

    /// Splice one batch into a graph: backbone, optional heatmap prediction,
    /// and the aggregated feature vectors `(N, d)`.
    pub fn aggregate_features(
        &mut self,
        g: &mut Graph<T>,
        images: &Array4<T>,
        heatmaps: HeatmapSpec<T>,
    ) -> Result<FeaturePlan> {
        let x = g.input(images.clone().into_dyn());
        let taps = self.backbone.apply(g, &mut self.store, x)?;
        let predicted = match &self.pose_head {
            Some(head) => Some(head.apply(g, &mut self.store, taps.tap)?),
            None => None,
        };
        let features = match self.spec.aggregator {
            Aggregator::Avg | Aggregator::AvgMultitask => g.global_avg_pool(taps.final_map),
            Aggregator::Bilinear => {
                let b = g.bilinear_pool(taps.final_map);
                let s = g.signed_sqrt(b);
                g.l2_normalize_rows(s)
            }
            Aggregator::Upn => {
                let bank = self
                    .upn_bank
                    .ok_or_else(|| Error::invalid("upn model without bank"))?;
                let bank_node = self.store.bind(g, bank);
                let a = g.soft_assign(
                    taps.final_map,
                    bank_node,
                    lit::<T>(self.spec.upn_temperature),
                )?;
                g.attention_pool(taps.final_map, a)?
            }
            Aggregator::Pose | Aggregator::Bbn | Aggregator::PoseGt => {
                let m = match heatmaps {
                    HeatmapSpec::Predicted => predicted.ok_or_else(|| {
                        Error::invalid("predicted heatmaps requested but model has no pose head")
                    })?,
                    HeatmapSpec::Ground(gt) => g.input(gt.into_dyn()),
                    HeatmapSpec::Mixed { gt, use_pred } => {
                        let pred = predicted.ok_or_else(|| {
                            Error::invalid("mixed heatmaps need a pose head")
                        })?;
                        g.row_mix(pred, &gt.into_dyn(), &use_pred)
                    }
                    HeatmapSpec::NotNeeded => {
                        return Err(Error::invalid(
                            "heatmap-attention aggregator needs a heatmap source",
                        ))
                    }
                };
                g.attention_pool(taps.final_map, m)?
            }
        };
        Ok(FeaturePlan {
            features,
            predicted_heatmaps: predicted,
            taps,
        })
    }

    /// Ground-truth heatmaps for a batch at the final-map resolution:
    /// keypoint rasterization for pose layouts, box rasterization for bbN.
    pub fn ground_heatmaps(&self, samples: &[&ImageSample<T>]) -> Result<Array4<T>> {
        let hw = self.final_hw();
        let channels = self.spec.aggregator.heatmap_channels(self.spec.num_parts);
        let mut out = Array4::<T>::zeros((samples.len(), channels, hw, hw));
        for (n, s) in samples.iter().enumerate() {
            let hm = if self.spec.aggregator == Aggregator::Bbn {
                rasterize_bbox(s, hw, hw)?
            } else {
                rasterize_parts(s, hw, hw)?
            };
            out.index_axis_mut(Axis(0), n).assign(&hm.values);
        }
        Ok(out)
    }

    /// Evaluation-path features for a sample set, chunked to bound memory.
    /// Pose and bbN layouts use predicted heatmaps (novel classes carry no
    /// annotations); the ground-truth oracle uses rasterized keypoints.
    pub fn extract_features(&mut self, samples: &[&ImageSample<T>]) -> Result<Array2<T>> {
        let d = self.feature_layout().len();
        let mut out = Array2::<T>::zeros((samples.len(), d));
        for (chunk_idx, chunk) in samples.chunks(32).enumerate() {
            let images = batch_images(chunk, self.spec.backbone.input_size)?;
            let spec = match self.spec.aggregator {
                Aggregator::Pose | Aggregator::Bbn => HeatmapSpec::Predicted,
                Aggregator::PoseGt => HeatmapSpec::Ground(self.ground_heatmaps(chunk)?),
                _ => HeatmapSpec::NotNeeded,
            };
            let mut g = Graph::new(false);
            let plan = self.aggregate_features(&mut g, &images, spec)?;
            let feats = g.value(plan.features).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            for (i, row) in feats.rows().into_iter().enumerate() {
                out.row_mut(chunk_idx * 32 + i).assign(&row);
            }
        }
        Ok(out)
    }

    /// Predicted heatmaps for a sample set (eval mode).
    pub fn predict_heatmaps(&mut self, samples: &[&ImageSample<T>]) -> Result<Vec<PartHeatmap<T>>> {
        let head = self
            .pose_head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no pose head"))?
            .clone();
        let mut result = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let images = batch_images(chunk, self.spec.backbone.input_size)?;
            let mut g = Graph::new(false);
            let x = g.input(images.into_dyn());
            let taps = self.backbone.apply(&mut g, &mut self.store, x)?;
            let m = head.apply(&mut g, &mut self.store, taps.tap)?;
            let m4 = g.value(m).view().into_dimensionality::<Ix4>().unwrap().to_owned();
            for n in 0..chunk.len() {
                result.push(PartHeatmap {
                    values: m4.index_axis(Axis(0), n).to_owned(),
                    kind: crate::data::HeatmapKind::Predicted,
                });
            }
        }
        Ok(result)
    }
}

/// Stack samples into an `(N, 3, S, S)` batch, converting from the stored
/// `(H, W, 3)` layout. Errors if a sample's size does not match the
/// backbone's input size (load with `resize_to` to fix that upstream).
pub fn batch_images<T: Scalar>(
    samples: &[&ImageSample<T>],
    input_size: usize,
) -> Result<Array4<T>> {
    let mut out = Array4::<T>::zeros((samples.len(), 3, input_size, input_size));
    for (n, s) in samples.iter().enumerate() {
        if s.img_h() != input_size || s.img_w() != input_size {
            return Err(Error::shape(
                format!("{input_size}x{input_size} image"),
                format!("{}x{}", s.img_h(), s.img_w()),
            ));
        }
        for y in 0..input_size {
            for x in 0..input_size {
                for c in 0..3 {
                    out[(n, c, y, x)] = s.image[(y, x, c)];
                }
            }
        }
    }
    Ok(out)
}

/// Zero the `part`-th C-sized block of every row; the part-removal probe
/// used by importance analysis.
pub fn zero_part_block<T: Scalar>(features: &mut Array2<T>, layout: Layout, part: usize) -> Result<()> {
    let (parts, channels) = layout
        .part_blocks()
        .ok_or_else(|| Error::invalid(format!("layout {layout:?} has no part blocks")))?;
    if part >= parts {
        return Err(Error::invalid(format!(
            "part index {part} out of range for {parts} parts"
        )));
    }
    for mut row in features.rows_mut() {
        for c in 0..channels {
            row[part * channels + c] = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{gen_synthetic, SyntheticConfig};

    fn spec(aggregator: Aggregator, algorithm: Algorithm) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::convnet4(),
            algorithm,
            aggregator,
            num_parts: 3,
            num_base_classes: 4,
            upn_temperature: 1.0,
        }
    }

    fn tiny_bundle() -> crate::data::DatasetBundle<f32> {
        let cfg = SyntheticConfig {
            num_classes: 8,
            images_per_class: 3,
            num_parts: 3,
            image_size: 84,
            ..SyntheticConfig::default()
        };
        gen_synthetic(&cfg, 42).unwrap()
    }

    #[test]
    fn feature_dims_match_layouts() {
        for (agg, want) in [
            (Aggregator::Avg, 64usize),
            (Aggregator::Pose, 192),
            (Aggregator::PoseGt, 192),
            (Aggregator::Bilinear, 4096),
            (Aggregator::Upn, 192),
            (Aggregator::Bbn, 128),
            (Aggregator::AvgMultitask, 64),
        ] {
            let m = Model::<f32>::new(spec(agg, Algorithm::Proto), 0).unwrap();
            assert_eq!(m.feature_layout().len(), want, "{agg}");
        }
    }

    #[test]
    fn extract_features_shapes_and_finiteness() {
        let bundle = tiny_bundle();
        let refs: Vec<&_> = bundle.repre.iter().take(5).collect();
        for agg in [
            Aggregator::Avg,
            Aggregator::Pose,
            Aggregator::PoseGt,
            Aggregator::Bilinear,
            Aggregator::Upn,
            Aggregator::Bbn,
        ] {
            let mut m = Model::<f32>::new(spec(agg, Algorithm::Proto), 1).unwrap();
            let f = m.extract_features(&refs).unwrap();
            assert_eq!(f.nrows(), 5);
            assert_eq!(f.ncols(), m.feature_layout().len());
            assert!(f.iter().all(|v| v.is_finite()), "{agg}");
        }
    }

    #[test]
    fn pose_head_exists_only_where_needed() {
        assert!(Model::<f32>::new(spec(Aggregator::Pose, Algorithm::Proto), 0)
            .unwrap()
            .pose_head
            .is_some());
        assert!(Model::<f32>::new(spec(Aggregator::AvgMultitask, Algorithm::Proto), 0)
            .unwrap()
            .pose_head
            .is_some());
        assert!(Model::<f32>::new(spec(Aggregator::PoseGt, Algorithm::Proto), 0)
            .unwrap()
            .pose_head
            .is_none());
        assert!(Model::<f32>::new(spec(Aggregator::Avg, Algorithm::Proto), 0)
            .unwrap()
            .pose_head
            .is_none());
    }

    #[test]
    fn generator_identity_preserves_direction() {
        let m = Model::<f32>::new(spec(Aggregator::Avg, Algorithm::Dynamic), 0).unwrap();
        let gen = m.generator.as_ref().unwrap();
        let w = m.store.value(gen.weight);
        let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
        for i in 0..w2.nrows() {
            for j in 0..w2.ncols() {
                assert_eq!(w2[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_part_block_zeroes_exactly_one_block() {
        let layout = Layout::Pose { channels: 3, parts: 4 };
        let mut f = Array2::<f64>::from_elem((2, 12), 1.0);
        zero_part_block(&mut f, layout, 2).unwrap();
        for row in f.rows() {
            for (i, &v) in row.iter().enumerate() {
                let expect = if (6..9).contains(&i) { 0.0 } else { 1.0 };
                assert_eq!(v, expect);
            }
        }
        assert!(zero_part_block(&mut f, layout, 4).is_err());
        let avg = Layout::Avg { channels: 12 };
        assert!(zero_part_block(&mut f, avg, 0).is_err());
    }

    #[test]
    fn bbn_heatmaps_have_two_channels() {
        let bundle = tiny_bundle();
        let mut m = Model::<f32>::new(spec(Aggregator::Bbn, Algorithm::Proto), 3).unwrap();
        let refs: Vec<&_> = bundle.repre.iter().take(2).collect();
        let gt = m.ground_heatmaps(&refs).unwrap();
        assert_eq!(gt.shape(), &[2, 2, 10, 10]);
        let hm = m.predict_heatmaps(&refs).unwrap();
        assert_eq!(hm[0].values.shape(), &[2, 10, 10]);
    }
}
