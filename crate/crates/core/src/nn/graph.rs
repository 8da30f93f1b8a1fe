//! Declarative network layouts.
//!
//! A [`LayerGraph`] is a flat layer list executed in order. Residual links
//! add an earlier output (optionally through a 1×1 projection) onto the
//! output of a later layer. Tap points name the layers whose outputs feed a
//! consensus head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    CnnSmall,
    Cnn,
    Resnet,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::CnnSmall => "cnn_small",
            Arch::Cnn => "cnn",
            Arch::Resnet => "resnet",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn_small" => Ok(Arch::CnnSmall),
            "cnn" => Ok(Arch::Cnn),
            "resnet" => Ok(Arch::Resnet),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    FullyConnected,
    Consensus,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::FullyConnected => "fully_connected",
            HeadKind::Consensus => "consensus",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully_connected" | "fc" | "base" => Ok(HeadKind::FullyConnected),
            "consensus" | "dc" => Ok(HeadKind::Consensus),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu,
    MaxPool {
        factor: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// 1×1 strided convolution (followed by batch norm) on a shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    /// Layer whose output is the shortcut; `None` is the network input.
    pub source: Option<usize>,
    /// Layer whose output receives the shortcut.
    pub target: usize,
    pub projection: Option<Projection>,
}

/// Output shape of a layer: a feature block or a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Block { channels: usize, size: usize },
    Flat(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub arch: Arch,
    pub head: HeadKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub layers: Vec<Layer>,
    pub residuals: Vec<Residual>,
    pub tap_points: Vec<usize>,
}

/// Hidden widths of the fully connected head of each backbone.
pub fn fc_widths(arch: Arch) -> (usize, usize) {
    match arch {
        Arch::CnnSmall => (64, 32),
        Arch::Cnn | Arch::Resnet => (256, 128),
    }
}

struct Builder {
    layers: Vec<Layer>,
    residuals: Vec<Residual>,
    taps: Vec<usize>,
    channels: usize,
}

impl Builder {
    fn last(&self) -> usize {
        self.layers.len() - 1
    }

    fn conv_bn(&mut self, out: usize, stride: usize) {
        self.layers.push(Layer::Conv {
            in_channels: self.channels,
            out_channels: out,
            kernel: 3,
            stride,
        });
        self.layers.push(Layer::BatchNorm { channels: out });
        self.channels = out;
    }

    fn conv_bn_act(&mut self, out: usize) {
        self.conv_bn(out, 1);
        self.layers.push(Layer::LeakyRelu);
    }

    fn pool(&mut self) {
        self.layers.push(Layer::MaxPool { factor: 2 });
    }

    fn tap(&mut self) {
        self.taps.push(self.last());
    }

    /// Two 3×3 convolutions with an identity or projected shortcut. A
    /// downsampling block max-pools before its first convolution and
    /// projects the shortcut with a 1×1 stride-2 convolution.
    fn residual_block(&mut self, out: usize, downsample: bool) {
        let source = self.layers.len().checked_sub(1);
        let cin = self.channels;
        if downsample {
            self.pool();
        }
        self.conv_bn_act(out);
        self.conv_bn(out, 1);
        let projection = (downsample || cin != out).then_some(Projection {
            in_channels: cin,
            out_channels: out,
            stride: if downsample { 2 } else { 1 },
        });
        self.residuals.push(Residual {
            source,
            target: self.last(),
            projection,
        });
        self.layers.push(Layer::LeakyRelu);
    }
}

impl LayerGraph {
    /// Backbone for `arch` with the requested head. Consensus heads tap the
    /// end of every pooled stage (CNNs) or the stem and every residual
    /// stage (ResNet).
    pub fn build(
        arch: Arch,
        head: HeadKind,
        in_channels: usize,
        num_classes: usize,
        input_size: usize,
    ) -> Result<Self> {
        if in_channels == 0 || num_classes == 0 {
            return Err(Error::Config("channels and classes must be positive".into()));
        }
        let mut b = Builder {
            layers: Vec::new(),
            residuals: Vec::new(),
            taps: Vec::new(),
            channels: in_channels,
        };
        match arch {
            Arch::CnnSmall => {
                for ch in [16, 32, 64, 128] {
                    b.conv_bn_act(ch);
                    b.pool();
                    b.tap();
                }
            }
            Arch::Cnn => {
                for (stage, ch) in [32, 64, 128, 256].into_iter().enumerate() {
                    b.conv_bn_act(ch);
                    if stage >= 2 {
                        b.conv_bn_act(ch);
                    }
                    b.pool();
                    b.tap();
                }
            }
            Arch::Resnet => {
                b.conv_bn_act(32);
                b.pool();
                b.tap();
                for ch in [64, 128, 256] {
                    b.residual_block(ch, true);
                    b.residual_block(ch, false);
                    b.tap();
                }
            }
        }
        if head == HeadKind::FullyConnected {
            let (h1, h2) = fc_widths(arch);
            let mut probe = LayerGraph {
                arch,
                head,
                in_channels,
                num_classes,
                input_size,
                layers: b.layers.clone(),
                residuals: b.residuals.clone(),
                tap_points: b.taps.clone(),
            };
            let Shape::Block { size, .. } = *probe.shapes()?.last().expect("non-empty backbone") else {
                unreachable!("backbones end in a feature block")
            };
            if size >= 4 && size % 2 == 0 {
                b.pool();
            }
            probe.layers = b.layers.clone();
            let Shape::Block { channels, size } = *probe.shapes()?.last().expect("non-empty") else {
                unreachable!()
            };
            b.layers.push(Layer::Flatten);
            let mut features = channels * size * size;
            for width in [h1, h2] {
                b.layers.push(Layer::Linear {
                    in_features: features,
                    out_features: width,
                });
                b.layers.push(Layer::LeakyRelu);
                features = width;
            }
            b.layers.push(Layer::Linear {
                in_features: features,
                out_features: num_classes,
            });
        }
        let graph = LayerGraph {
            arch,
            head,
            in_channels,
            num_classes,
            input_size,
            layers: b.layers,
            residuals: b.residuals,
            tap_points: b.taps,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let input = Shape::Block {
            channels: self.in_channels,
            size: self.input_size,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = shapes.last().copied().unwrap_or(input);
            let bad = |what: &str| Error::Config(format!("layer {i} ({layer:?}): {what} (input {prev:?})"));
            let out = match (*layer, prev) {
                (
                    Layer::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                    },
                    Shape::Block { channels, size },
                ) => {
                    if in_channels != channels {
                        return Err(bad("channel mismatch"));
                    }
                    Shape::Block {
                        channels: out_channels,
                        size: super::conv::conv_output_size(size, kernel, stride),
                    }
                }
                (Layer::BatchNorm { channels: c }, Shape::Block { channels, .. }) if c == channels => prev,
                (Layer::LeakyRelu, _) => prev,
                (Layer::MaxPool { factor }, Shape::Block { channels, size }) => {
                    if factor == 0 || size % factor != 0 {
                        return Err(bad("pool factor does not divide size"));
                    }
                    Shape::Block {
                        channels,
                        size: size / factor,
                    }
                }
                (Layer::Flatten, Shape::Block { channels, size }) => Shape::Flat(channels * size * size),
                (
                    Layer::Linear {
                        in_features,
                        out_features,
                    },
                    Shape::Flat(n),
                ) if n == in_features => Shape::Flat(out_features),
                _ => return Err(bad("incompatible input")),
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Checks residual shapes, tap ordering and head layout.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let input = Shape::Block {
            channels: self.in_channels,
            size: self.input_size,
        };
        for r in &self.residuals {
            let src = match r.source {
                Some(s) if s < r.target => shapes[s],
                None => input,
                _ => return Err(Error::Config(format!("residual {r:?} does not point forward"))),
            };
            let dst = *shapes
                .get(r.target)
                .ok_or_else(|| Error::Config(format!("residual target {} out of range", r.target)))?;
            let projected = match (src, r.projection) {
                (Shape::Block { channels, size }, Some(p)) => {
                    if p.in_channels != channels {
                        return Err(Error::Config(format!("projection {p:?} expects {channels} channels")));
                    }
                    Shape::Block {
                        channels: p.out_channels,
                        size: super::conv::conv_output_size(size, 1, p.stride),
                    }
                }
                (s, None) => s,
                _ => return Err(Error::Config("projection on a flat shortcut".into())),
            };
            if projected != dst {
                return Err(Error::Config(format!(
                    "residual {r:?} joins {projected:?} onto {dst:?}"
                )));
            }
        }
        if self.tap_points.is_empty() || self.tap_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "tap points must be non-empty and strictly increasing".into(),
            ));
        }
        for &t in &self.tap_points {
            if !matches!(shapes.get(t), Some(Shape::Block { .. })) {
                return Err(Error::Config(format!("tap {t} is not a feature block")));
            }
        }
        if self.head == HeadKind::FullyConnected && shapes.last() != Some(&Shape::Flat(self.num_classes)) {
            return Err(Error::Config(
                "fully connected head must end in num_classes outputs".into(),
            ));
        }
        Ok(())
    }

    /// Channel count at each tap point.
    pub fn tap_channels(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        self.tap_points
            .iter()
            .map(|&t| match shapes[t] {
                Shape::Block { channels, .. } => Ok(channels),
                Shape::Flat(_) => Err(Error::Config(format!("tap {t} is flat"))),
            })
            .collect()
    }

    /// Index of the last backbone layer (the last tap for consensus graphs).
    pub fn backbone_end(&self) -> usize {
        match self.head {
            HeadKind::Consensus => *self.tap_points.last().expect("validated"),
            HeadKind::FullyConnected => self.layers.len() - 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builder_validates() {
        for arch in [Arch::CnnSmall, Arch::Cnn, Arch::Resnet] {
            for head in [HeadKind::Consensus, HeadKind::FullyConnected] {
                for size in [16, 64] {
                    let g = LayerGraph::build(arch, head, 1, 10, size).unwrap();
                    assert_eq!(g.tap_points.len(), 4, "{arch} {head}");
                }
            }
        }
    }

    #[test]
    fn convs_are_followed_by_batch_norm_and_leaky_relu_is_the_only_activation() {
        for arch in [Arch::CnnSmall, Arch::Cnn, Arch::Resnet] {
            for head in [HeadKind::Consensus, HeadKind::FullyConnected] {
                let g = LayerGraph::build(arch, head, 3, 10, 64).unwrap();
                for (i, layer) in g.layers.iter().enumerate() {
                    if let Layer::Conv { out_channels, .. } = layer {
                        assert_eq!(
                            g.layers[i + 1],
                            Layer::BatchNorm {
                                channels: *out_channels
                            }
                        );
                    }
                }
                // residual projections carry their own batch norm; only
                // 1x1 stride-2 projections appear
                for r in &g.residuals {
                    if let Some(p) = r.projection {
                        assert_eq!(p.stride, 2);
                    }
                }
            }
        }
    }

    #[test]
    fn resnet_taps_stem_and_stages() {
        let g = LayerGraph::build(Arch::Resnet, HeadKind::Consensus, 1, 10, 64).unwrap();
        assert_eq!(g.tap_channels().unwrap(), vec![32, 64, 128, 256]);
        assert_eq!(g.residuals.len(), 6);
        assert_eq!(g.residuals.iter().filter(|r| r.projection.is_some()).count(), 3);
    }

    #[test]
    fn rejects_broken_residual() {
        let mut g = LayerGraph::build(Arch::Resnet, HeadKind::Consensus, 1, 10, 64).unwrap();
        g.residuals[0].projection = None;
        assert!(g.validate().is_err());
        let mut g = LayerGraph::build(Arch::CnnSmall, HeadKind::Consensus, 1, 10, 64).unwrap();
        g.tap_points = vec![7, 3];
        assert!(g.validate().is_err());
    }

    #[test]
    fn unknown_arch_name() {
        assert!("vgg".parse::<Arch>().is_err());
        assert_eq!("cnn_small".parse::<Arch>().unwrap(), Arch::CnnSmall);
    }
}
