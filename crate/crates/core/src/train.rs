//! Training loop, plateau scheduling, and evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::consensus::HeadConfig;
use crate::data::{prepare, BatchStream, ImageSet, PerturbationSpec};
use crate::error::{Error, Result};
use crate::nn::{Arch, HeadKind, Mode, Network};
use crate::optim::{Adam, AdamConfig};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum absolute gain in validation accuracy that counts as progress.
    pub plateau_threshold: f64,
    pub plateau_cooldown: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub arch: Arch,
    pub head_kind: HeadKind,
    pub head_config: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            initial_lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            plateau_cooldown: 1,
            val_fraction: 0.2,
            seed: 0,
            arch: Arch::CnnSmall,
            head_kind: HeadKind::Consensus,
            head_config: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} not in (0, 1)", self.val_fraction));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} not in (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        Ok(())
    }
}

/// Disjoint, exhaustive split with `round(n · val_fraction)` validation
/// images. Both parts keep the original order.
pub fn split(set: &ImageSet, val_fraction: f64, seed: u64) -> Result<(ImageSet, ImageSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let n = set.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::invalid(format!(
            "splitting {n} images at {val_fraction} leaves a part empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = order.split_at_mut(n_val);
    val.sort_unstable();
    train.sort_unstable();
    Ok((set.select(train), set.select(val)))
}

/// Reduce-on-plateau for a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub cooldown: usize,
    best: Option<f64>,
    bad_epochs: usize,
    cooldown_left: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, threshold: f64, cooldown: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            threshold,
            cooldown,
            best: None,
            bad_epochs: 0,
            cooldown_left: 0,
        }
    }

    /// Records one epoch's score and returns the learning rate to use next.
    pub fn step(&mut self, score: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if score <= best + self.threshold => self.bad_epochs += 1,
            _ => {
                self.best = Some(score);
                self.bad_epochs = 0;
            }
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad_epochs = 0;
        }
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.cooldown_left = self.cooldown;
            return lr * self.factor;
        }
        lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub spec: PerturbationSpec,
    pub accuracy: f64,
    pub layer_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub tests: Vec<TestRecord>,
}

impl TrainLog {
    /// One JSON object per line: every epoch, then every test result.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        for t in &self.tests {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

pub struct TrainOutput {
    /// Weights after the last epoch.
    pub model: Network<f32>,
    /// Weights from the epoch with the highest validation accuracy.
    pub best: Network<f32>,
    pub log: TrainLog,
}

/// Trains on `data` after holding out a validation split. `on_epoch` sees
/// each record as soon as it is produced.
pub fn train(config: &TrainConfig, data: &ImageSet, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutput> {
    config.validate()?;
    let (train_set, val_set) = split(data, config.val_fraction, config.seed)?;
    let mut net = Network::<f32>::build(
        config.arch,
        config.head_kind,
        data.channels(),
        data.num_classes,
        config.head_config.clone(),
        config.seed,
    )?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.initial_lr,
        ..AdamConfig::default()
    });
    let mut scheduler = PlateauScheduler::new(
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_threshold,
        config.plateau_cooldown,
    );
    let stream = BatchStream::new(&train_set, config.batch_size, config.seed)?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Network<f32>)> = None;
    for epoch in 0..config.epochs {
        let lr = adam.lr();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in stream.epoch(epoch).enumerate() {
            let batch = batch?;
            let tape = Tape::new();
            let x = tape.constant(batch.images);
            let out = net.forward(&tape, x, Mode::Train)?;
            let loss = net.loss(out.logits, &batch.labels)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&tape, net.store_mut());
            net.apply_updates(&out.updates);
            adam.step(net.store_mut())?;
            loss_sum += value * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let val_accuracy = evaluate(&net, &val_set, &PerturbationSpec::none())?.accuracy;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy,
            lr,
        };
        on_epoch(&record);
        log.epochs.push(record);
        if best.as_ref().is_none_or(|(score, _)| val_accuracy > *score) {
            best = Some((val_accuracy, net.clone()));
            log.best_epoch = Some(epoch);
        }
        adam.set_lr(scheduler.step(val_accuracy, lr));
    }
    let best = best.map_or_else(|| net.clone(), |(_, n)| n);
    Ok(TrainOutput { model: net, best, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy of each tap's own score vector (consensus heads only).
    pub layer_accuracies: Vec<f64>,
}

/// Accuracy of `net` on `set` after applying `spec`. The argmax only ranges
/// over the real classes.
pub fn evaluate(net: &Network<f32>, set: &ImageSet, spec: &PerturbationSpec) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let c = net.num_classes();
    let taps = net.consensus_head().map_or(0, |_| net.graph().tap_points.len());
    let mut correct = 0usize;
    let mut layer_correct = vec![0usize; taps];
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(set.len());
        let batch = prepare(&set.range(start, end), spec, start)?;
        let tape = Tape::frozen();
        let out = net.forward(&tape, tape.constant(batch.images), Mode::Eval)?;
        let hits = |pred: Vec<usize>| pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        correct += hits(out.logits.value().argmax_rows(c));
        for (acc, s) in layer_correct.iter_mut().zip(&out.layer_scores) {
            *acc += hits(s.value().argmax_rows(c));
        }
    }
    let n = set.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        layer_accuracies: layer_correct.into_iter().map(|k| k as f64 / n).collect(),
    })
}
