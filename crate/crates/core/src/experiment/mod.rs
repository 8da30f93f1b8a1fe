//! Declarative experiments: configuration, cached training, result files,
//! and reports.

pub mod report;
pub mod results;
pub mod runner;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::DeepFoolConfig;
use crate::consensus::{Distance, HeadConfig, PrototypeCount};
use crate::data::{self, make_quadrants, DatasetName, ImageSet, PerturbationKind, PerturbationSpec, Split};
use crate::error::{Error, Result};
use crate::nn::{Arch, HeadKind};
use crate::train::TrainConfig;

pub use report::{report, welch_t_test, Report, WelchTest};
pub use results::{ResultRow, ResultWriter};
pub use runner::{run_ablation, run_attack, run_quadrants, run_sweep, AttackRow};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "CONSENSUS_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub plateau_cooldown: usize,
    pub val_fraction: f64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSettings {
            epochs: 10,
            batch_size: t.batch_size,
            initial_lr: t.initial_lr,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            plateau_threshold: t.plateau_threshold,
            plateau_cooldown: t.plateau_cooldown,
            val_fraction: t.val_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    /// Weights after the last epoch.
    #[default]
    Final,
    /// Weights with the best validation accuracy.
    Best,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Every combination of distance × prototype count × `h` instead of
    /// one change at a time from the full head.
    pub full_factorial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub overshoot: f64,
    pub clip: bool,
    /// Number of before/after pairs written to a PGM grid per model.
    pub export_pairs: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let d = DeepFoolConfig::default();
        AttackSettings {
            n_samples: 100,
            seed: 0,
            max_iter: d.max_iter,
            overshoot: d.overshoot,
            clip: d.clip,
            export_pairs: 0,
        }
    }
}

impl AttackSettings {
    pub fn deepfool(&self) -> DeepFoolConfig {
        DeepFoolConfig {
            max_iter: self.max_iter,
            overshoot: self.overshoot,
            clip: self.clip,
        }
    }
}

/// One experiment. Every field has a default, and the defaults describe a
/// reduced-scale run (10k training images, 2 seeds, 10 epochs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment_id: String,
    pub dataset: DatasetName,
    /// Replace the dataset by its 40-class quadrant version.
    pub quadrants: bool,
    pub arch: Arch,
    pub head: HeadKind,
    pub head_config: HeadConfig,
    pub training: TrainingSettings,
    pub seeds: Vec<u64>,
    /// Training images drawn from the training split; `None` keeps all.
    pub train_samples: Option<usize>,
    /// Test images drawn from the test split; `None` keeps all.
    pub test_samples: Option<usize>,
    pub data_seed: u64,
    /// Perturbation kinds swept after the unperturbed baseline.
    pub perturbations: Vec<PerturbationKind>,
    /// Per-kind magnitude lists replacing the built-in grids.
    pub grid: BTreeMap<PerturbationKind, Vec<f64>>,
    pub perturb_seed: u64,
    pub checkpoint: CheckpointChoice,
    pub output_dir: PathBuf,
    /// Where trained models are cached; defaults to `<output_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    /// Seeds trained concurrently.
    pub workers: usize,
    pub ablation: AblationSettings,
    pub attack: AttackSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment_id: "sweep".into(),
            dataset: DatasetName::Mnist,
            quadrants: false,
            arch: Arch::CnnSmall,
            head: HeadKind::Consensus,
            head_config: HeadConfig::default(),
            training: TrainingSettings::default(),
            seeds: vec![0, 1],
            train_samples: Some(10_000),
            test_samples: None,
            data_seed: 0,
            perturbations: PerturbationKind::ALL.to_vec(),
            grid: BTreeMap::new(),
            perturb_seed: 0,
            checkpoint: CheckpointChoice::Final,
            output_dir: PathBuf::from("results"),
            checkpoint_dir: None,
            data_root: None,
            workers: 1,
            ablation: AblationSettings::default(),
            attack: AttackSettings::default(),
        }
    }
}

/// The fields that determine a trained model.
#[derive(Serialize)]
struct ModelKey<'a> {
    dataset: DatasetName,
    quadrants: bool,
    arch: Arch,
    head: HeadKind,
    head_config: Option<&'a HeadConfig>,
    training: &'a TrainingSettings,
    train_samples: Option<usize>,
    data_seed: u64,
}

/// The fields that determine a result row apart from its seed and
/// perturbation.
#[derive(Serialize)]
struct RowKey<'a> {
    experiment_id: &'a str,
    model: ModelKey<'a>,
    test_samples: Option<usize>,
    perturb_seed: u64,
    checkpoint: CheckpointChoice,
}

fn digest(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty() || self.experiment_id.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("bad experiment_id `{}`", self.experiment_id)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        for (kind, mags) in &self.grid {
            for &m in mags {
                PerturbationSpec::new(*kind, m, 0)?;
            }
        }
        self.train_config(0).validate()
    }

    fn model_key(&self) -> ModelKey<'_> {
        ModelKey {
            dataset: self.dataset,
            quadrants: self.quadrants,
            arch: self.arch,
            head: self.head,
            head_config: (self.head == HeadKind::Consensus).then_some(&self.head_config),
            training: &self.training,
            train_samples: self.train_samples,
            data_seed: self.data_seed,
        }
    }

    /// Identifies the model trained for `seed`; shared across experiments.
    pub fn model_hash(&self, seed: u64) -> String {
        digest(&(self.model_key(), seed))
    }

    /// Identifies the configuration behind a result row.
    pub fn config_hash(&self) -> String {
        digest(&RowKey {
            experiment_id: &self.experiment_id,
            model: self.model_key(),
            test_samples: self.test_samples,
            perturb_seed: self.perturb_seed,
            checkpoint: self.checkpoint,
        })
    }

    pub fn attack_hash(&self) -> String {
        digest(&(self.config_hash(), &self.attack))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            initial_lr: t.initial_lr,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            plateau_threshold: t.plateau_threshold,
            plateau_cooldown: t.plateau_cooldown,
            val_fraction: t.val_fraction,
            seed,
            arch: self.arch,
            head_kind: self.head,
            head_config: self.head_config.clone(),
        }
    }

    /// Unperturbed baseline first, then each kind's non-identity magnitudes.
    pub fn grid_specs(&self) -> Vec<PerturbationSpec> {
        let mut specs = vec![PerturbationSpec::none()];
        for &kind in &self.perturbations {
            if kind == PerturbationKind::None {
                continue;
            }
            let mags = self.grid.get(&kind).map_or(kind.sweep_grid(), |v| v.as_slice());
            for &m in mags {
                if m != kind.identity_magnitude() {
                    specs.push(PerturbationSpec {
                        kind,
                        magnitude: m,
                        seed: self.perturb_seed,
                    });
                }
            }
        }
        specs
    }

    /// Column value distinguishing head variants.
    pub fn ablation_tag(&self) -> String {
        match self.head {
            HeadKind::Consensus => self.head_config.tag(),
            HeadKind::FullyConnected => "-".into(),
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoints"))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(default_data_root)
    }

    /// Training and test sets at native resolution (or on the canvas for
    /// quadrants), subsampled as configured.
    pub fn load_data(&self) -> Result<(ImageSet, ImageSet)> {
        let root = self.data_root();
        let load = |split| {
            data::load(&root, self.dataset, split).map_err(|e| match e {
                Error::MissingDataset(path) => Error::MissingDataset(format!(
                    "{path}\n  download the IDX files of `{}` and place them in {} \
                     (or point {DATA_ENV} at another root)",
                    self.dataset,
                    root.join(self.dataset.dir()).display()
                )),
                other => other,
            })
        };
        let mut train = load(Split::Train)?;
        let mut test = load(Split::Test)?;
        if let Some(n) = self.train_samples {
            train = train.subset(n, self.data_seed);
        }
        if let Some(n) = self.test_samples {
            test = test.subset(n, self.data_seed.wrapping_add(1));
        }
        if self.quadrants {
            train = make_quadrants(&train, self.data_seed)?;
            test = make_quadrants(&test, self.data_seed.wrapping_add(1))?;
        }
        Ok((train, test))
    }

    /// Head variants compared by an ablation run.
    pub fn ablation_variants(&self) -> Vec<HeadConfig> {
        let base = HeadConfig {
            layer_weights: self.head_config.layer_weights.clone(),
            softmax_over_opt_out: self.head_config.softmax_over_opt_out,
            temperature: self.head_config.temperature,
            ..HeadConfig::default()
        };
        if self.ablation.full_factorial {
            let mut out = Vec::new();
            for distance in [Distance::Cosine, Distance::Euclidean, Distance::FullyConnected] {
                for prototype_count in [PrototypeCount::ClassesPlusOne, PrototypeCount::Classes] {
                    for use_nonlinearity_h in [true, false] {
                        out.push(HeadConfig {
                            distance,
                            prototype_count,
                            use_nonlinearity_h,
                            ..base.clone()
                        });
                    }
                }
            }
            return out;
        }
        vec![
            base.clone(),
            HeadConfig {
                distance: Distance::Euclidean,
                ..base.clone()
            },
            HeadConfig {
                distance: Distance::FullyConnected,
                ..base.clone()
            },
            HeadConfig {
                prototype_count: PrototypeCount::Classes,
                ..base.clone()
            },
            HeadConfig {
                use_nonlinearity_h: false,
                ..base
            },
        ]
    }
}

/// `$CONSENSUS_DATA`, or `data` under the current directory.
pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}
