//! Feature-map extractors with an exposed intermediate tap.
//!
//! Two architectures are supported:
//!
//! * `ConvNet4` — four Conv(3x3, pad 1)-BN-ReLU stages at 64 channels with
//!   2x2 max pooling after the first three stages. An 84x84 input walks the
//!   ladder 84 -> 42 -> 21 -> 10 (the odd size floors) and the final map is
//!   64x10x10; the forward pass asserts that shape and fails loudly if it
//!   ever drifts. The default tap sits after stage 2 (64 channels, 21x21).
//! * `ResNet18Mod` — a standard 18-layer residual stack where the last
//!   block's first convolution and its downsampling shortcut use stride 1,
//!   keeping the output at 14x14, followed by an appended 1x1 convolution
//!   with batch normalization (no trailing nonlinearity) that reduces 512
//!   channels to 32. The default tap sits after block 3 (256 channels).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{BatchNorm2dLayer, Conv2dLayer, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, Axis, Ix4};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ConvNet4,
    #[serde(rename = "resnet18mod")]
    ResNet18Mod,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::ConvNet4 => f.write_str("convnet4"),
            Arch::ResNet18Mod => f.write_str("resnet18mod"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub input_size: usize,
    pub tap_point: String,
}

impl BackboneConfig {
    pub fn convnet4() -> Self {
        BackboneConfig {
            arch: Arch::ConvNet4,
            input_size: 84,
            tap_point: "stage2".into(),
        }
    }

    pub fn resnet18mod() -> Self {
        BackboneConfig {
            arch: Arch::ResNet18Mod,
            input_size: 224,
            tap_point: "block3".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            Arch::ConvNet4 => {
                if self.input_size != 84 {
                    return Err(Error::invalid(format!(
                        "convnet4 profile requires input_size 84, got {}",
                        self.input_size
                    )));
                }
                if !matches!(
                    self.tap_point.as_str(),
                    "stage1" | "stage2" | "stage3" | "stage4"
                ) {
                    return Err(Error::invalid(format!(
                        "unknown convnet4 tap point '{}'",
                        self.tap_point
                    )));
                }
            }
            Arch::ResNet18Mod => {
                if self.input_size != 224 {
                    return Err(Error::invalid(format!(
                        "resnet18mod profile requires input_size 224, got {}",
                        self.input_size
                    )));
                }
                if !matches!(
                    self.tap_point.as_str(),
                    "block1" | "block2" | "block3" | "block4"
                ) {
                    return Err(Error::invalid(format!(
                        "unknown resnet18mod tap point '{}'",
                        self.tap_point
                    )));
                }
            }
        }
        Ok(())
    }

    /// Static shape bookkeeping for the configured architecture.
    pub fn profile(&self) -> Result<BackboneProfile> {
        self.validate()?;
        Ok(match self.arch {
            Arch::ConvNet4 => {
                // spatial size after each stage: 42, 21, 10, 10
                let sizes = [42usize, 21, 10, 10];
                let stage = self.tap_point[5..].parse::<usize>().unwrap();
                BackboneProfile {
                    tap_channels: 64,
                    tap_hw: sizes[stage - 1],
                    final_channels: 64,
                    final_hw: 10,
                }
            }
            Arch::ResNet18Mod => {
                let (tap_channels, tap_hw) = match self.tap_point.as_str() {
                    "block1" => (64, 56),
                    "block2" => (128, 28),
                    "block3" => (256, 14),
                    _ => (512, 14),
                };
                BackboneProfile {
                    tap_channels,
                    tap_hw,
                    final_channels: 32,
                    final_hw: 14,
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneProfile {
    pub tap_channels: usize,
    pub tap_hw: usize,
    pub final_channels: usize,
    pub final_hw: usize,
}

/// Intermediate and final feature maps for one image.
#[derive(Clone, Debug)]
pub struct FeatureMaps<T: Scalar> {
    pub intermediate: Array3<T>,
    pub final_map: Array3<T>,
}

/// Tap and final nodes produced by a backbone forward inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct BackboneTaps {
    pub tap: NodeId,
    pub final_map: NodeId,
}

#[derive(Clone)]
struct ConvBlock {
    conv: Conv2dLayer,
    bn: BatchNorm2dLayer,
    pool: bool,
}

#[derive(Clone)]
struct BasicBlock {
    conv1: Conv2dLayer,
    bn1: BatchNorm2dLayer,
    conv2: Conv2dLayer,
    bn2: BatchNorm2dLayer,
    down: Option<(Conv2dLayer, BatchNorm2dLayer)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let g = ParamGroup::Backbone;
        let conv1 = Conv2dLayer::new(
            store,
            rng,
            &format!("{name}.conv1"),
            g,
            c_in,
            c_out,
            3,
            stride,
            1,
            false,
        );
        let bn1 = BatchNorm2dLayer::new(store, &format!("{name}.bn1"), g, c_out);
        let conv2 = Conv2dLayer::new(
            store,
            rng,
            &format!("{name}.conv2"),
            g,
            c_out,
            c_out,
            3,
            1,
            1,
            false,
        );
        let bn2 = BatchNorm2dLayer::new(store, &format!("{name}.bn2"), g, c_out);
        let down = (stride != 1 || c_in != c_out).then(|| {
            let conv = Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.down.conv"),
                g,
                c_in,
                c_out,
                1,
                stride,
                0,
                false,
            );
            let bn = BatchNorm2dLayer::new(store, &format!("{name}.down.bn"), g, c_out);
            (conv, bn)
        });
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        }
    }

    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let c1 = self.conv1.apply(g, store, x)?;
        let b1 = self.bn1.apply(g, store, c1);
        let r1 = g.relu(b1);
        let c2 = self.conv2.apply(g, store, r1)?;
        let b2 = self.bn2.apply(g, store, c2);
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let c = conv.apply(g, store, x)?;
                bn.apply(g, store, c)
            }
            None => x,
        };
        let sum = g.add(b2, shortcut);
        Ok(g.relu(sum))
    }
}

#[derive(Clone)]
enum Net {
    ConvNet4 {
        stages: Vec<ConvBlock>,
        tap_stage: usize,
    },
    ResNet18Mod {
        stem_conv: Conv2dLayer,
        stem_bn: BatchNorm2dLayer,
        layers: Vec<Vec<BasicBlock>>,
        reduce_conv: Conv2dLayer,
        reduce_bn: BatchNorm2dLayer,
        tap_layer: usize,
    },
}

/// A backbone network bound to parameters in some store.
#[derive(Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    net: Net,
}

impl Backbone {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        config: &BackboneConfig,
    ) -> Result<Self> {
        config.validate()?;
        let group = ParamGroup::Backbone;
        let net = match config.arch {
            Arch::ConvNet4 => {
                let mut stages = Vec::new();
                for i in 0..4 {
                    let c_in = if i == 0 { 3 } else { 64 };
                    let conv = Conv2dLayer::new(
                        store,
                        rng,
                        &format!("backbone.stage{}.conv", i + 1),
                        group,
                        c_in,
                        64,
                        3,
                        1,
                        1,
                        false,
                    );
                    let bn = BatchNorm2dLayer::new(
                        store,
                        &format!("backbone.stage{}.bn", i + 1),
                        group,
                        64,
                    );
                    stages.push(ConvBlock {
                        conv,
                        bn,
                        pool: i < 3,
                    });
                }
                Net::ConvNet4 {
                    stages,
                    tap_stage: config.tap_point[5..].parse().unwrap(),
                }
            }
            Arch::ResNet18Mod => {
                let stem_conv = Conv2dLayer::new(
                    store, rng, "backbone.stem.conv", group, 3, 64, 7, 2, 3, false,
                );
                let stem_bn = BatchNorm2dLayer::new(store, "backbone.stem.bn", group, 64);
                let plan = [
                    (64usize, 64usize, 1usize),
                    (64, 128, 2),
                    (128, 256, 2),
                    // last block keeps stride 1 so the map stays 14x14
                    (256, 512, 1),
                ];
                let mut layers = Vec::new();
                for (li, &(c_in, c_out, stride)) in plan.iter().enumerate() {
                    let blocks = vec![
                        BasicBlock::new(
                            store,
                            rng,
                            &format!("backbone.layer{}.0", li + 1),
                            c_in,
                            c_out,
                            stride,
                        ),
                        BasicBlock::new(
                            store,
                            rng,
                            &format!("backbone.layer{}.1", li + 1),
                            c_out,
                            c_out,
                            1,
                        ),
                    ];
                    layers.push(blocks);
                }
                let reduce_conv = Conv2dLayer::new(
                    store, rng, "backbone.reduce.conv", group, 512, 32, 1, 1, 0, false,
                );
                let reduce_bn = BatchNorm2dLayer::new(store, "backbone.reduce.bn", group, 32);
                Net::ResNet18Mod {
                    stem_conv,
                    stem_bn,
                    layers,
                    reduce_conv,
                    reduce_bn,
                    tap_layer: config.tap_point[5..].parse().unwrap(),
                }
            }
        };
        Ok(Backbone {
            config: config.clone(),
            net,
        })
    }

    /// Splice the backbone into a graph, returning the tap and final nodes.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        images: NodeId,
    ) -> Result<BackboneTaps> {
        let shape = g.value(images).shape().to_vec();
        let expect = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != expect || shape[3] != expect {
            return Err(Error::shape(
                format!("(N, 3, {expect}, {expect})"),
                format!("{shape:?}"),
            ));
        }
        match &self.net {
            Net::ConvNet4 { stages, tap_stage } => {
                let mut x = images;
                let mut tap = None;
                for (i, block) in stages.iter().enumerate() {
                    let c = block.conv.apply(g, store, x)?;
                    let b = block.bn.apply(g, store, c);
                    x = g.relu(b);
                    if block.pool {
                        x = g.max_pool(x, 2, 2, 0);
                    }
                    if i + 1 == *tap_stage {
                        tap = Some(x);
                    }
                }
                let out_shape = g.value(x).shape().to_vec();
                if out_shape[1..] != [64, 10, 10] {
                    return Err(Error::shape("(N, 64, 10, 10)", format!("{out_shape:?}")));
                }
                Ok(BackboneTaps {
                    tap: tap.expect("tap stage within range"),
                    final_map: x,
                })
            }
            Net::ResNet18Mod {
                stem_conv,
                stem_bn,
                layers,
                reduce_conv,
                reduce_bn,
                tap_layer,
            } => {
                let c = stem_conv.apply(g, store, images)?;
                let b = stem_bn.apply(g, store, c);
                let r = g.relu(b);
                let mut x = g.max_pool(r, 3, 2, 1);
                let mut tap = None;
                for (li, blocks) in layers.iter().enumerate() {
                    for block in blocks {
                        x = block.apply(g, store, x)?;
                    }
                    if li + 1 == *tap_layer {
                        tap = Some(x);
                    }
                }
                let rc = reduce_conv.apply(g, store, x)?;
                let out = reduce_bn.apply(g, store, rc);
                let out_shape = g.value(out).shape().to_vec();
                if out_shape[1..] != [32, 14, 14] {
                    return Err(Error::shape("(N, 32, 14, 14)", format!("{out_shape:?}")));
                }
                Ok(BackboneTaps {
                    tap: tap.expect("tap layer within range"),
                    final_map: out,
                })
            }
        }
    }

    /// Plain forward pass producing per-image feature maps.
    pub fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        images: &Array4<T>,
        training: bool,
    ) -> Result<Vec<FeatureMaps<T>>> {
        let mut g = Graph::new(training);
        let x = g.input(images.clone().into_dyn());
        let taps = self.apply(&mut g, store, x)?;
        let inter = g
            .value(taps.tap)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let fin = g
            .value(taps.final_map)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        Ok((0..images.shape()[0])
            .map(|n| FeatureMaps {
                intermediate: inter.index_axis(Axis(0), n).to_owned(),
                final_map: fin.index_axis(Axis(0), n).to_owned(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use ndarray::Array4;

    #[test]
    fn convnet4_profile_shapes() {
        let cfg = BackboneConfig::convnet4();
        let p = cfg.profile().unwrap();
        assert_eq!(p.tap_channels, 64);
        assert_eq!(p.tap_hw, 21);
        assert_eq!(p.final_channels, 64);
        assert_eq!(p.final_hw, 10);
    }

    #[test]
    fn convnet4_emits_64x10x10() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(0, "init", 0);
        let cfg = BackboneConfig::convnet4();
        let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
        let images = Array4::<f32>::from_elem((2, 3, 84, 84), 0.3);
        let maps = bb.forward(&mut store, &images, true).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].final_map.shape(), &[64, 10, 10]);
        assert_eq!(maps[0].intermediate.shape(), &[64, 21, 21]);
    }

    #[test]
    fn wrong_input_size_reports_expected_and_actual() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(0, "init", 0);
        let cfg = BackboneConfig::convnet4();
        let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
        let images = Array4::<f32>::zeros((1, 3, 64, 64));
        let err = bb.forward(&mut store, &images, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("84"), "{msg}");
        assert!(msg.contains("64"), "{msg}");
    }

    #[test]
    fn zero_input_stays_finite_in_both_modes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(1, "init", 0);
        let cfg = BackboneConfig::convnet4();
        let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
        let images = Array4::<f32>::zeros((2, 3, 84, 84));
        for training in [true, false] {
            let maps = bb.forward(&mut store, &images, training).unwrap();
            assert!(maps[0].final_map.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn invalid_tap_point_rejected() {
        let mut cfg = BackboneConfig::convnet4();
        cfg.tap_point = "stage9".into();
        assert!(cfg.validate().is_err());
        cfg.tap_point = "block3".into();
        assert!(cfg.validate().is_err());
    }
}
