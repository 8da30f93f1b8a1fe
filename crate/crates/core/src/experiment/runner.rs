//! Sweep, ablation, quadrant, and attack runs with cached models and
//! resumable result files.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::results::{read_rows, ResultRow, ResultWriter};
use super::{CheckpointChoice, RunConfig};
use crate::adversarial::{perturbation_density, write_pgm_grid};
use crate::consensus::HeadConfig;
use crate::data::{ImageSet, PerturbationSpec};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{HeadKind, Network};
use crate::train::{evaluate, train};

/// Trains (or loads from the cache) the model for `seed`.
pub fn trained_model(config: &RunConfig, seed: u64, train_set: &ImageSet) -> Result<Network<f32>> {
    let dir = config.checkpoint_dir();
    let key = config.model_hash(seed);
    let path = |what: &str| dir.join(format!("{key}.{what}"));
    let wanted = match config.checkpoint {
        CheckpointChoice::Final => path("final.ckpt"),
        CheckpointChoice::Best => path("best.ckpt"),
    };
    if wanted.exists() {
        log::info!("loading cached model {}", wanted.display());
        return checkpoint::load(&wanted);
    }
    fs::create_dir_all(&dir)?;
    log::info!(
        "training {}/{}/{} seed {seed} on {} images for {} epochs",
        config.arch,
        config.head,
        config.ablation_tag(),
        train_set.len(),
        config.training.epochs
    );
    let start = Instant::now();
    let out = train(&config.train_config(seed), train_set, |r| {
        log::info!(
            "  epoch {:>2}: loss {:.4}, val acc {:.4}, lr {:.0e}",
            r.epoch,
            r.train_loss,
            r.val_accuracy,
            r.lr
        );
    })?;
    log::info!("trained in {:.0}s", start.elapsed().as_secs_f64());
    out.log.write_jsonl(&path("log.jsonl"))?;
    save_atomic(&out.best, &path("best.ckpt"))?;
    save_atomic(&out.model, &path("final.ckpt"))?;
    Ok(match config.checkpoint {
        CheckpointChoice::Final => out.model,
        CheckpointChoice::Best => out.best,
    })
}

fn save_atomic(net: &Network<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    checkpoint::save(net, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct Timing<'a> {
    experiment_id: &'a str,
    model: &'a str,
    seed: u64,
    what: String,
    seconds: f64,
}

fn record_timing(config: &RunConfig, seed: u64, what: String, seconds: f64) -> Result<()> {
    let path = config
        .output_dir
        .join(format!("{}.timings.jsonl", config.experiment_id));
    let line = serde_json::to_string(&Timing {
        experiment_id: &config.experiment_id,
        model: &config.model_hash(seed),
        seed,
        what,
        seconds,
    })?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn results_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join(format!("{}.csv", config.experiment_id))
}

fn same_model(row_arch: &str, row_head: &str, row_ablation: &str, config: &RunConfig) -> bool {
    row_arch == config.arch.to_string() && row_head == config.head.to_string() && row_ablation == config.ablation_tag()
}

/// Runs `jobs` on `workers` threads; the first error wins.
fn run_jobs<J: Sync>(jobs: &[J], workers: usize, f: impl Fn(&J) -> Result<()> + Sync) -> Result<()> {
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()).max(1) {
            s.spawn(|| loop {
                if failure.lock().expect("no panics while locked").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { return };
                if let Err(e) = f(job) {
                    failure.lock().expect("no panics while locked").get_or_insert(e);
                    return;
                }
            });
        }
    });
    match failure.into_inner().expect("no panics while locked") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Trains one model per seed and evaluates it on every grid point. Rows
/// already present for the same configuration hash are kept and skipped,
/// so an interrupted run picks up where it stopped.
pub fn run_sweep(config: &RunConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let path = results_path(config);
    let hash = config.config_hash();
    let existing: Vec<ResultRow> = read_rows(&path)?;
    if let Some(r) = existing
        .iter()
        .find(|r| same_model(&r.arch, &r.head, &r.ablation, config) && r.config_hash != hash)
    {
        return Err(Error::Inconsistent(format!(
            "{} already holds {} rows from configuration {}, this run is {hash}",
            path.display(),
            r.model(),
            r.config_hash
        )));
    }
    let done: HashSet<(u64, String)> = existing
        .iter()
        .filter(|r| r.config_hash == hash)
        .map(|r| (r.seed, format!("{}:{}", r.perturb_kind, r.magnitude)))
        .collect();
    let specs = config.grid_specs();
    let key = |seed: u64, s: &PerturbationSpec| (seed, format!("{}:{}", s.kind, s.magnitude));

    // (seed, [(row index, spec)]) for every seed with missing rows.
    let mut jobs: Vec<(u64, Vec<(usize, PerturbationSpec)>)> = Vec::new();
    let mut index = 0;
    for &seed in &config.seeds {
        let todo: Vec<(usize, PerturbationSpec)> = specs
            .iter()
            .filter(|s| !done.contains(&key(seed, s)))
            .map(|s| {
                index += 1;
                (index - 1, *s)
            })
            .collect();
        if !todo.is_empty() {
            jobs.push((seed, todo));
        }
    }

    if !jobs.is_empty() {
        fs::create_dir_all(&config.output_dir)?;
        let (train_set, test_set) = config.load_data()?;
        let writer = Mutex::new(ResultWriter::open(&path)?);
        run_jobs(&jobs, config.workers, |(seed, todo)| {
            let start = Instant::now();
            let net = trained_model(config, *seed, &train_set)?;
            record_timing(config, *seed, "train".into(), start.elapsed().as_secs_f64())?;
            for (i, spec) in todo {
                let start = Instant::now();
                let eval = evaluate(&net, &test_set, spec)?;
                log::info!(
                    "{} seed {seed} {} {}: accuracy {:.4}",
                    config.ablation_tag(),
                    spec.kind,
                    spec.magnitude,
                    eval.accuracy
                );
                record_timing(
                    config,
                    *seed,
                    format!("eval {} {}", spec.kind, spec.magnitude),
                    start.elapsed().as_secs_f64(),
                )?;
                let row = ResultRow {
                    experiment_id: config.experiment_id.clone(),
                    arch: config.arch.to_string(),
                    head: config.head.to_string(),
                    ablation: config.ablation_tag(),
                    seed: *seed,
                    perturb_kind: spec.kind,
                    magnitude: spec.magnitude,
                    accuracy: eval.accuracy,
                    layer_accuracies: ResultRow::join_layers(&eval.layer_accuracies),
                    epochs: config.training.epochs,
                    config_hash: hash.clone(),
                };
                writer.lock().expect("no panics while locked").submit(*i, row)?;
            }
            Ok(())
        })?;
    }

    let rows: Vec<ResultRow> = read_rows(&path)?;
    let mut mine: Vec<ResultRow> = Vec::new();
    for &seed in &config.seeds {
        for s in &specs {
            if let Some(r) = rows.iter().find(|r| {
                r.config_hash == hash && (r.seed, format!("{}:{}", r.perturb_kind, r.magnitude)) == key(seed, s)
            }) {
                mine.push(r.clone());
            }
        }
    }
    Ok(mine)
}

/// A consensus model on the 40-class quadrant task, unperturbed.
pub fn run_quadrants(config: &RunConfig) -> Result<Vec<ResultRow>> {
    let config = RunConfig {
        quadrants: true,
        perturbations: Vec::new(),
        ..config.clone()
    };
    run_sweep(&config)
}

/// One sweep per head variant.
pub fn run_ablation(config: &RunConfig) -> Result<Vec<(HeadConfig, Vec<ResultRow>)>> {
    config
        .ablation_variants()
        .into_iter()
        .map(|variant| {
            let c = RunConfig {
                head: HeadKind::Consensus,
                head_config: variant.clone(),
                ..config.clone()
            };
            Ok((variant, run_sweep(&c)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub experiment_id: String,
    pub arch: String,
    pub head: String,
    pub ablation: String,
    pub seed: u64,
    pub n_samples: usize,
    pub successes: usize,
    pub failures: usize,
    pub skipped: usize,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub config_hash: String,
}

#[derive(Serialize)]
struct AttackSample<'a> {
    model: &'a str,
    seed: u64,
    index: usize,
    iterations: usize,
    original_class: usize,
    adversarial_class: usize,
    success: bool,
    perturbation_norm: f64,
}

/// DeepFool on every seed's model. Per-sample records go to a JSONL file
/// next to the CSV.
pub fn run_attack(config: &RunConfig) -> Result<Vec<AttackRow>> {
    config.validate()?;
    let path = config.output_dir.join(format!("{}.attack.csv", config.experiment_id));
    let hash = config.attack_hash();
    let existing: Vec<AttackRow> = read_rows(&path)?;
    if let Some(r) = existing
        .iter()
        .find(|r| same_model(&r.arch, &r.head, &r.ablation, config) && r.config_hash != hash)
    {
        return Err(Error::Inconsistent(format!(
            "{} already holds attack rows from configuration {}, this run is {hash}",
            path.display(),
            r.config_hash
        )));
    }
    let todo: Vec<(usize, u64)> = config
        .seeds
        .iter()
        .filter(|&&s| !existing.iter().any(|r| r.config_hash == hash && r.seed == s))
        .enumerate()
        .map(|(i, &s)| (i, s))
        .collect();
    if !todo.is_empty() {
        fs::create_dir_all(&config.output_dir)?;
        let (train_set, test_set) = config.load_data()?;
        let writer = Mutex::new(ResultWriter::open(&path)?);
        let samples_path = config
            .output_dir
            .join(format!("{}.attack_samples.jsonl", config.experiment_id));
        let samples = Mutex::new(OpenOptions::new().create(true).append(true).open(samples_path)?);
        let model_name = format!("{}/{}/{}", config.arch, config.head, config.ablation_tag());
        run_jobs(&todo, config.workers, |&(i, seed)| {
            let net = trained_model(config, seed, &train_set)?;
            let start = Instant::now();
            let mut pairs = Vec::new();
            let mut lines = String::new();
            let report = perturbation_density(
                &net,
                &test_set,
                config.attack.n_samples,
                config.attack.seed,
                &config.attack.deepfool(),
                |index, r| {
                    if r.success && pairs.len() < config.attack.export_pairs {
                        pairs.push((r.original.clone(), r.perturbed.clone()));
                    }
                    let s = AttackSample {
                        model: &model_name,
                        seed,
                        index,
                        iterations: r.iterations,
                        original_class: r.original_class,
                        adversarial_class: r.adversarial_class,
                        success: r.success,
                        perturbation_norm: r.perturbation_norm(),
                    };
                    lines.push_str(&serde_json::to_string(&s).expect("plain record"));
                    lines.push('\n');
                },
            )?;
            samples
                .lock()
                .expect("no panics while locked")
                .write_all(lines.as_bytes())?;
            record_timing(config, seed, "attack".into(), start.elapsed().as_secs_f64())?;
            if !pairs.is_empty() {
                let pgm = config
                    .output_dir
                    .join(format!("{}.{}.pgm", config.experiment_id, config.model_hash(seed)));
                write_pgm_grid(&pgm, &pairs)?;
            }
            log::info!(
                "{model_name} seed {seed}: rho {:.4} ± {:.4} over {} successes ({} failures)",
                report.mean,
                report.std,
                report.successes,
                report.failures
            );
            let row = AttackRow {
                experiment_id: config.experiment_id.clone(),
                arch: config.arch.to_string(),
                head: config.head.to_string(),
                ablation: config.ablation_tag(),
                seed,
                n_samples: config.attack.n_samples,
                successes: report.successes,
                failures: report.failures,
                skipped: report.skipped,
                rho_mean: report.mean,
                rho_std: report.std,
                config_hash: hash.clone(),
            };
            writer.lock().expect("no panics while locked").submit(i, row)
        })?;
    }
    let rows: Vec<AttackRow> = read_rows(&path)?;
    Ok(config
        .seeds
        .iter()
        .filter_map(|&s| rows.iter().find(|r| r.config_hash == hash && r.seed == s).cloned())
        .collect())
}
