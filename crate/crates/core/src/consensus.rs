//! The consensus classification head.
//!
//! For every tapped layer `l` with output block `x_l: [N, C_l, H, W]`:
//!
//! 1. **Summarize**: apply `h_l` (square linear map, then leaky ReLU) to the
//!    channel vector at each spatial position and sum over positions,
//!    giving `[N, C_l]`.
//! 2. **Align**: score the summary against the layer's prototypes, one per
//!    class plus one opt-out prototype, giving `[N, c+1]`.
//! 3. **Consensus**: the logits are `Σ_l w_l · scores_l`.
//!
//! Setting `w = [0, …, 0, 1]`, a dot-product score and an identity `h`
//! turns the head into an ordinary linear classifier on the spatially
//! summed last block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const COSINE_EPS: f64 = 1e-8;

/// Score between a summary and a prototype. Larger means closer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Cosine,
    /// Negated Euclidean distance.
    Euclidean,
    /// A learned linear layer in place of prototypes.
    FullyConnected,
    /// Plain inner product; reproduces a conventional linear classifier.
    Dot,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Cosine => "cosine",
            Distance::Euclidean => "euclidean",
            Distance::FullyConnected => "fully_connected",
            Distance::Dot => "dot",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "euclidean" => Ok(Distance::Euclidean),
            "fully_connected" | "fc" => Ok(Distance::FullyConnected),
            "dot" => Ok(Distance::Dot),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

/// Number of prototypes per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrototypeCount {
    /// One per class.
    #[serde(rename = "c")]
    Classes,
    /// One per class plus an opt-out prototype.
    #[serde(rename = "c+1")]
    ClassesPlusOne,
}

impl PrototypeCount {
    pub fn count(self, num_classes: usize) -> usize {
        match self {
            PrototypeCount::Classes => num_classes,
            PrototypeCount::ClassesPlusOne => num_classes + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub distance: Distance,
    pub prototype_count: PrototypeCount,
    /// `h_l` = linear + leaky ReLU when set, identity otherwise.
    pub use_nonlinearity_h: bool,
    /// Per-tap weights `w_l`; `None` means all ones.
    pub layer_weights: Option<Vec<f64>>,
    /// Whether the opt-out logit takes part in the training softmax.
    pub softmax_over_opt_out: bool,
    /// Multiplier on cosine scores. Off by default.
    pub temperature: Option<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            distance: Distance::Cosine,
            prototype_count: PrototypeCount::ClassesPlusOne,
            use_nonlinearity_h: true,
            layer_weights: None,
            softmax_over_opt_out: true,
            temperature: None,
        }
    }
}

impl HeadConfig {
    /// Short tag for result tables, e.g. `cosine/c+1/h`.
    pub fn tag(&self) -> String {
        let protos = match self.prototype_count {
            PrototypeCount::Classes => "c",
            PrototypeCount::ClassesPlusOne => "c+1",
        };
        let h = if self.use_nonlinearity_h { "h" } else { "no_h" };
        format!("{}/{}/{}", self.distance, protos, h)
    }
}

/// Parameters of one tapped layer.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub channels: usize,
    /// Square weight `[C, C]` and bias `[C]` of `h_l`.
    pub h: Option<(ParamId, ParamId)>,
    /// `[K, C]`. For [`Distance::FullyConnected`] these are the linear
    /// layer's weight rows.
    pub prototypes: ParamId,
    pub fc_bias: Option<ParamId>,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct ConsensusHead {
    pub config: HeadConfig,
    pub num_classes: usize,
    pub banks: Vec<PrototypeBank>,
}

impl ConsensusHead {
    /// Allocates one bank per tap, all weights drawn from `N(0, 0.02)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        tap_channels: &[usize],
        num_classes: usize,
        config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if tap_channels.is_empty() {
            return Err(Error::Config("consensus head needs at least one tap".into()));
        }
        if let Some(w) = &config.layer_weights {
            if w.len() != tap_channels.len() {
                return Err(Error::Config(format!(
                    "{} layer weights for {} taps",
                    w.len(),
                    tap_channels.len()
                )));
            }
            if w.iter().any(|&x| x.is_nan() || x < 0.0) {
                return Err(Error::Config("layer weights must be non-negative".into()));
            }
        }
        let k = config.prototype_count.count(num_classes);
        let banks = tap_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let h = config.use_nonlinearity_h.then(|| {
                    (
                        store.add(format!("head.{l}.h.weight"), Tensor::randn([c, c], INIT_STD, rng)),
                        store.add(format!("head.{l}.h.bias"), Tensor::randn([c], INIT_STD, rng)),
                    )
                });
                let prototypes = store.add(format!("head.{l}.prototypes"), Tensor::randn([k, c], INIT_STD, rng));
                let fc_bias = (config.distance == Distance::FullyConnected)
                    .then(|| store.add(format!("head.{l}.fc.bias"), Tensor::randn([k], INIT_STD, rng)));
                PrototypeBank {
                    channels: c,
                    h,
                    prototypes,
                    fc_bias,
                    weight: config.layer_weights.as_ref().map_or(1.0, |w| w[l]),
                }
            })
            .collect();
        Ok(ConsensusHead {
            config,
            num_classes,
            banks,
        })
    }

    /// Width of the score vectors.
    pub fn output_dim(&self) -> usize {
        self.config.prototype_count.count(self.num_classes)
    }

    fn bank(&self, layer: usize) -> Result<&PrototypeBank> {
        self.banks
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no prototype bank for tap {layer}")))
    }

    /// Spatial sum of `h_l` over the channel vectors of `x: [N, C, H, W]`.
    pub fn summarize<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        layer: usize,
    ) -> Result<Var<'t, T>> {
        let bank = self.bank(layer)?;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != bank.channels {
            return Err(Error::shape("summarize", &shape, &[bank.channels]));
        }
        let rows = x.channels_last()?;
        let mapped = match bank.h {
            Some((w, b)) => rows
                .linear(tape.param(store, w), Some(tape.param(store, b)))?
                .leaky_relu(T::lit(LEAKY_SLOPE)),
            None => rows,
        };
        mapped.group_sum(shape[0])
    }

    /// Scores `summary: [N, C]` against the layer's prototypes.
    pub fn align<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        summary: Var<'t, T>,
        layer: usize,
    ) -> Result<Var<'t, T>> {
        let bank = self.bank(layer)?;
        let protos = tape.param(store, bank.prototypes);
        let summary_shape = summary.shape();
        if summary_shape.len() != 2 || summary_shape[1] != bank.channels {
            return Err(Error::shape("align", &summary_shape, &[bank.channels]));
        }
        match self.config.distance {
            Distance::Cosine => {
                let cos = summary.cosine_similarity(protos, T::lit(COSINE_EPS))?;
                Ok(match self.config.temperature {
                    Some(t) => cos.scale(T::lit(t)),
                    None => cos,
                })
            }
            Distance::Euclidean => summary.neg_pairwise_distance(protos),
            Distance::Dot => summary.linear(protos, None),
            Distance::FullyConnected => {
                let bias = bank.fc_bias.map(|b| tape.param(store, b));
                summary.linear(protos, bias)
            }
        }
    }

    /// Weighted score vectors `w_l · D_l(S_l(x_l))`, one per tap.
    pub fn per_layer_prediction<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        taps: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        if taps.len() != self.banks.len() {
            return Err(Error::invalid(format!(
                "{} tap outputs for {} prototype banks",
                taps.len(),
                self.banks.len()
            )));
        }
        taps.iter()
            .enumerate()
            .map(|(l, &x)| {
                let summary = self.summarize(tape, store, x, l)?;
                let scores = self.align(tape, store, summary, l)?;
                let w = self.banks[l].weight;
                Ok(if w == 1.0 { scores } else { scores.scale(T::lit(w)) })
            })
            .collect()
    }

    /// Sum of the per-layer score vectors.
    pub fn consensus_forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        taps: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let layers = self.per_layer_prediction(tape, store, taps)?;
        sum_scores(&layers)
    }
}

/// Left-to-right sum of equally shaped score vectors.
pub fn sum_scores<'t, T: Scalar>(scores: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let (first, rest) = scores
        .split_first()
        .ok_or_else(|| Error::invalid("no score vectors to sum"))?;
    rest.iter().try_fold(*first, |acc, &s| acc.add(s))
}
