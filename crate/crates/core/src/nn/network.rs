use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batchnorm::{BatchNorm, Mode, RunningUpdate};
use super::conv::conv2d;
use super::graph::{Arch, HeadKind, Layer, LayerGraph};
use super::loss::softmax_cross_entropy;
use super::pool::maxpool2d;
use crate::autodiff::{Tape, Var};
use crate::consensus::{sum_scores, ConsensusHead, HeadConfig, PrototypeCount, INIT_STD, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
enum LayerParams {
    None,
    Conv {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
    },
    BatchNorm(BatchNorm),
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Clone, Debug)]
struct ProjectionParams {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    bn: BatchNorm,
}

/// A backbone with either a fully connected or a consensus head, together
/// with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    graph: LayerGraph,
    head_config: HeadConfig,
    seed: u64,
    store: ParamStore<T>,
    layers: Vec<LayerParams>,
    projections: Vec<Option<ProjectionParams>>,
    head: Option<ConsensusHead>,
}

/// Everything a forward pass produces.
pub struct ForwardOutput<'t, T: Scalar> {
    /// `[N, K]`; `K = c + 1` for a consensus head with the opt-out prototype.
    pub logits: Var<'t, T>,
    /// Weighted per-tap score vectors (consensus heads only).
    pub layer_scores: Vec<Var<'t, T>>,
    pub taps: Vec<Var<'t, T>>,
    /// Batch-norm running statistics to commit after a training pass.
    pub updates: Vec<RunningUpdate<T>>,
}

impl<T: Scalar> Network<T> {
    /// Instantiates `arch` for 64×64 inputs.
    pub fn build(
        arch: Arch,
        head: HeadKind,
        in_channels: usize,
        num_classes: usize,
        head_config: HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        let graph = LayerGraph::build(arch, head, in_channels, num_classes, 64)?;
        Self::from_graph(graph, head_config, seed)
    }

    /// Allocates and initializes parameters for `graph`. Convolution, linear,
    /// `h` and prototype tensors are drawn from `N(0, 0.02)`; batch norm
    /// starts at the identity.
    pub fn from_graph(graph: LayerGraph, head_config: HeadConfig, seed: u64) -> Result<Self> {
        graph.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(graph.layers.len());
        for (i, layer) in graph.layers.iter().enumerate() {
            let p = match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => LayerParams::Conv {
                    weight: store.add(
                        format!("layer{i}.conv.weight"),
                        Tensor::randn([out_channels, in_channels, kernel, kernel], INIT_STD, &mut rng),
                    ),
                    bias: store.add(
                        format!("layer{i}.conv.bias"),
                        Tensor::randn([out_channels], INIT_STD, &mut rng),
                    ),
                    stride,
                },
                Layer::BatchNorm { channels } => {
                    LayerParams::BatchNorm(BatchNorm::new(&mut store, &format!("layer{i}.bn"), channels))
                }
                Layer::Linear {
                    in_features,
                    out_features,
                } => LayerParams::Linear {
                    weight: store.add(
                        format!("layer{i}.linear.weight"),
                        Tensor::randn([out_features, in_features], INIT_STD, &mut rng),
                    ),
                    bias: store.add(
                        format!("layer{i}.linear.bias"),
                        Tensor::randn([out_features], INIT_STD, &mut rng),
                    ),
                },
                Layer::LeakyRelu | Layer::MaxPool { .. } | Layer::Flatten => LayerParams::None,
            };
            layers.push(p);
        }
        let projections = graph
            .residuals
            .iter()
            .enumerate()
            .map(|(r, link)| {
                link.projection.map(|p| ProjectionParams {
                    weight: store.add(
                        format!("residual{r}.proj.weight"),
                        Tensor::randn([p.out_channels, p.in_channels, 1, 1], INIT_STD, &mut rng),
                    ),
                    bias: store.add(
                        format!("residual{r}.proj.bias"),
                        Tensor::randn([p.out_channels], INIT_STD, &mut rng),
                    ),
                    stride: p.stride,
                    bn: BatchNorm::new(&mut store, &format!("residual{r}.proj.bn"), p.out_channels),
                })
            })
            .collect();
        let head = match graph.head {
            HeadKind::Consensus => Some(ConsensusHead::new(
                &mut store,
                &graph.tap_channels()?,
                graph.num_classes,
                head_config.clone(),
                &mut rng,
            )?),
            HeadKind::FullyConnected => None,
        };
        Ok(Network {
            graph,
            head_config,
            seed,
            store,
            layers,
            projections,
            head,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn consensus_head(&self) -> Option<&ConsensusHead> {
        self.head.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    /// Width of the logit vector.
    pub fn output_dim(&self) -> usize {
        match &self.head {
            Some(h) => h.output_dim(),
            None => self.graph.num_classes,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Same architecture with another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            graph: self.graph.clone(),
            head_config: self.head_config.clone(),
            seed: self.seed,
            store: self.store.cast(),
            layers: self.layers.clone(),
            projections: self.projections.clone(),
            head: self.head.clone(),
        }
    }

    /// Runs the network on `x: [N, C, H, W]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<ForwardOutput<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.graph.in_channels {
            return Err(Error::shape("network input", &shape, &[self.graph.in_channels]));
        }
        let store = &self.store;
        let mut outputs: Vec<Var<'t, T>> = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        let end = self.graph.backbone_end();
        for (i, (layer, params)) in self.graph.layers.iter().zip(&self.layers).enumerate().take(end + 1) {
            let input = outputs.last().copied().unwrap_or(x);
            let mut out = match (layer, params) {
                (Layer::Conv { .. }, LayerParams::Conv { weight, bias, stride }) => conv2d(
                    input,
                    tape.param(store, *weight),
                    Some(tape.param(store, *bias)),
                    *stride,
                )?,
                (Layer::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => {
                    let (y, upd) = bn.forward(tape, store, input, mode)?;
                    updates.extend(upd);
                    y
                }
                (Layer::LeakyRelu, _) => input.leaky_relu(T::lit(LEAKY_SLOPE)),
                (Layer::MaxPool { factor }, _) => maxpool2d(input, *factor)?,
                (Layer::Flatten, _) => input.flatten()?,
                (Layer::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                    input.linear(tape.param(store, *weight), Some(tape.param(store, *bias)))?
                }
                _ => unreachable!("parameters are built from the same layer list"),
            };
            for (link, proj) in self.graph.residuals.iter().zip(&self.projections) {
                if link.target != i {
                    continue;
                }
                let src = link.source.map_or(x, |s| outputs[s]);
                let shortcut = match proj {
                    Some(p) => {
                        let y = conv2d(
                            src,
                            tape.param(store, p.weight),
                            Some(tape.param(store, p.bias)),
                            p.stride,
                        )?;
                        let (y, upd) = p.bn.forward(tape, store, y, mode)?;
                        updates.extend(upd);
                        y
                    }
                    None => src,
                };
                out = out.add(shortcut)?;
            }
            outputs.push(out);
        }
        let taps: Vec<Var<'t, T>> = self.graph.tap_points.iter().map(|&t| outputs[t]).collect();
        let (logits, layer_scores) = match &self.head {
            Some(head) => {
                let scores = head.per_layer_prediction(tape, store, &taps)?;
                (sum_scores(&scores)?, scores)
            }
            None => (*outputs.last().expect("non-empty network"), Vec::new()),
        };
        Ok(ForwardOutput {
            logits,
            layer_scores,
            taps,
            updates,
        })
    }

    /// Commits running statistics from a training pass.
    pub fn apply_updates(&mut self, updates: &[RunningUpdate<T>]) {
        for u in updates {
            u.apply(&mut self.store);
        }
    }

    /// Training loss for `logits` produced by this network.
    pub fn loss<'t>(&self, logits: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
        let drop_opt_out = self.head.as_ref().is_some_and(|h| {
            h.config.prototype_count == PrototypeCount::ClassesPlusOne && !h.config.softmax_over_opt_out
        });
        if drop_opt_out {
            softmax_cross_entropy(logits.slice_cols(0, self.num_classes())?, targets)
        } else {
            softmax_cross_entropy(logits, targets)
        }
    }

    /// Logits restricted to the real classes, in eval mode.
    pub fn class_logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.forward(tape, x, Mode::Eval)?;
        if self.output_dim() == self.num_classes() {
            Ok(out.logits)
        } else {
            out.logits.slice_cols(0, self.num_classes())
        }
    }

    /// Eval-mode argmax over the real classes.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let tape = Tape::frozen();
        let out = self.forward(&tape, tape.constant(x.clone()), Mode::Eval)?;
        Ok(out.logits.value().argmax_rows(self.num_classes()))
    }
}
