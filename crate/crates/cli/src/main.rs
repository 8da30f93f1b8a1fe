use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use consensus_core::consensus::{Distance, PrototypeCount};
use consensus_core::data::{DatasetName, PerturbationKind, PerturbationSpec};
use consensus_core::experiment::report::{render_table, summarize};
use consensus_core::experiment::runner::trained_model;
use consensus_core::experiment::{
    report, run_ablation, run_attack, run_quadrants, run_sweep, CheckpointChoice, ResultRow, RunConfig, DATA_ENV,
};
use consensus_core::nn::{Arch, HeadKind};
use consensus_core::train::evaluate;
use consensus_core::{Error, Result};

/// Layer-consensus classifiers: training, perturbation sweeps, ablations,
/// quadrant and DeepFool studies.
#[derive(Parser, Debug)]
#[command(name = "consensus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed (or load it from the checkpoint cache) and
    /// report its unperturbed test accuracy.
    Train(RunArgs),
    /// Train and evaluate every seed across the perturbation grid.
    Sweep(RunArgs),
    /// Sweep every consensus-head variant.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// All 12 combinations of distance, prototype count and h instead of
        /// one change at a time.
        #[arg(long)]
        full_factorial: bool,
    },
    /// The 40-class digit-and-quadrant task.
    Quadrants(RunArgs),
    /// DeepFool perturbation density on sampled test images.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Aggregate every result CSV in a directory into summary tables,
    /// per-model series and Welch t-tests.
    Report {
        /// Directory holding result CSVs.
        #[arg(default_value = "results")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Prototypes {
    #[value(name = "c")]
    Classes,
    #[value(name = "c+1")]
    ClassesPlusOne,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Checkpoint {
    Final,
    Best,
}

/// A sample cap: a count or `all`.
#[derive(Clone, Copy, Debug)]
struct Cap(Option<usize>);

impl FromStr for Cap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(Cap(None));
        }
        s.parse()
            .map(|n| Cap(Some(n)))
            .map_err(|_| format!("expected a count or `all`, got `{s}`"))
    }
}

/// `kind=m1,m2,...`
#[derive(Clone, Debug)]
struct GridEntry(PerturbationKind, Vec<f64>);

impl FromStr for GridEntry {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, mags) = s
            .split_once('=')
            .ok_or_else(|| format!("expected kind=m1,m2,..., got `{s}`"))?;
        let kind = kind.parse().map_err(|e: Error| e.to_string())?;
        let mags = mags
            .split(',')
            .map(|m| m.trim().parse::<f64>().map_err(|_| format!("bad magnitude `{m}`")))
            .collect::<std::result::Result<_, _>>()?;
        Ok(GridEntry(kind, mags))
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    experiment_id: Option<String>,
    /// mnist, fashion_mnist or emnist.
    #[arg(long)]
    dataset: Option<DatasetName>,
    /// cnn_small, cnn or resnet.
    #[arg(long)]
    arch: Option<Arch>,
    /// consensus or fully_connected.
    #[arg(long)]
    head: Option<HeadKind>,
    /// cosine, euclidean, fully_connected or dot.
    #[arg(long)]
    distance: Option<Distance>,
    #[arg(long, value_enum)]
    prototypes: Option<Prototypes>,
    /// Whether each tap passes through its learned nonlinearity h.
    #[arg(long)]
    use_nonlinearity_h: Option<bool>,
    /// Per-tap weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    layer_weights: Option<Vec<f64>>,
    /// Whether the opt-out logit takes part in the training softmax.
    #[arg(long)]
    softmax_over_opt_out: Option<bool>,
    /// Comma-separated seeds, one model each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Training images to draw (count or `all`).
    #[arg(long)]
    train_samples: Option<Cap>,
    /// Test images to draw (count or `all`).
    #[arg(long)]
    test_samples: Option<Cap>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Comma-separated perturbation kinds to sweep.
    #[arg(long, value_delimiter = ',')]
    perturbations: Option<Vec<PerturbationKind>>,
    /// Magnitudes for one kind, e.g. `translate=0,10,20`. Repeatable.
    #[arg(long)]
    grid: Vec<GridEntry>,
    #[arg(long)]
    perturb_seed: Option<u64>,
    /// Which weights to evaluate.
    #[arg(long, value_enum)]
    checkpoint: Option<Checkpoint>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Model cache (default: <output-dir>/checkpoints).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Directory holding one sub-directory of IDX files per dataset.
    #[arg(long, env = DATA_ENV)]
    data_root: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Test images attacked per model.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Seed for drawing the attacked images.
    #[arg(long)]
    attack_seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    overshoot: Option<f64>,
    /// Keep perturbed pixels inside [0, 1].
    #[arg(long)]
    clip: Option<bool>,
    /// Original/adversarial pairs written to a PGM grid.
    #[arg(long)]
    export_pairs: Option<usize>,
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        set!(c.experiment_id, self.experiment_id.clone());
        set!(c.dataset, self.dataset);
        set!(c.arch, self.arch);
        set!(c.head, self.head);
        set!(c.head_config.distance, self.distance);
        set!(
            c.head_config.prototype_count,
            self.prototypes.map(|p| match p {
                Prototypes::Classes => PrototypeCount::Classes,
                Prototypes::ClassesPlusOne => PrototypeCount::ClassesPlusOne,
            })
        );
        set!(c.head_config.use_nonlinearity_h, self.use_nonlinearity_h);
        if let Some(w) = &self.layer_weights {
            c.head_config.layer_weights = Some(w.clone());
        }
        set!(c.head_config.softmax_over_opt_out, self.softmax_over_opt_out);
        set!(c.seeds, self.seeds.clone());
        set!(c.training.epochs, self.epochs);
        set!(c.training.batch_size, self.batch_size);
        set!(c.training.initial_lr, self.lr);
        set!(c.training.val_fraction, self.val_fraction);
        set!(c.train_samples, self.train_samples.map(|c| c.0));
        set!(c.test_samples, self.test_samples.map(|c| c.0));
        set!(c.data_seed, self.data_seed);
        set!(c.perturbations, self.perturbations.clone());
        for GridEntry(kind, mags) in &self.grid {
            c.grid.insert(*kind, mags.clone());
        }
        set!(c.perturb_seed, self.perturb_seed);
        set!(
            c.checkpoint,
            self.checkpoint.map(|k| match k {
                Checkpoint::Final => CheckpointChoice::Final,
                Checkpoint::Best => CheckpointChoice::Best,
            })
        );
        set!(c.output_dir, self.output_dir.clone());
        if let Some(dir) = &self.checkpoint_dir {
            c.checkpoint_dir = Some(dir.clone());
        }
        if let Some(dir) = &self.data_root {
            c.data_root = Some(dir.clone());
        }
        set!(c.workers, self.workers);
        c.validate()?;
        Ok(c)
    }
}

impl AttackArgs {
    fn apply(&self, c: &mut RunConfig) {
        set!(c.attack.n_samples, self.n_samples);
        set!(c.attack.seed, self.attack_seed);
        set!(c.attack.max_iter, self.max_iter);
        set!(c.attack.overshoot, self.overshoot);
        set!(c.attack.clip, self.clip);
        set!(c.attack.export_pairs, self.export_pairs);
    }
}

/// Prints the resolved configuration instead of running when asked to.
fn prepare(args: &RunArgs) -> Result<Option<RunConfig>> {
    let config = args.resolve()?;
    if args.print_config {
        print!("{}", config.to_toml()?);
        return Ok(None);
    }
    Ok(Some(config))
}

fn print_rows(rows: &[ResultRow]) -> Result<()> {
    if !rows.is_empty() {
        print!("{}", render_table(&summarize(rows)?));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let Some(config) = prepare(&args)? else { return Ok(()) };
            let (train_set, test_set) = config.load_data()?;
            for &seed in &config.seeds {
                let net = trained_model(&config, seed, &train_set)?;
                let eval = evaluate(&net, &test_set, &PerturbationSpec::none())?;
                println!(
                    "{}/{}/{} seed {seed}: test accuracy {:.4} ({} parameters, checkpoint {})",
                    config.arch,
                    config.head,
                    config.ablation_tag(),
                    eval.accuracy,
                    net.num_parameters(),
                    config
                        .checkpoint_dir()
                        .join(format!(
                            "{}.{}.ckpt",
                            config.model_hash(seed),
                            match config.checkpoint {
                                CheckpointChoice::Final => "final",
                                CheckpointChoice::Best => "best",
                            }
                        ))
                        .display()
                );
                if !eval.layer_accuracies.is_empty() {
                    let layers: Vec<String> = eval.layer_accuracies.iter().map(|a| format!("{a:.4}")).collect();
                    println!("  per-layer accuracy: {}", layers.join(" "));
                }
            }
        }
        Command::Sweep(args) => {
            let Some(config) = prepare(&args)? else { return Ok(()) };
            print_rows(&run_sweep(&config)?)?;
        }
        Command::Ablate { run, full_factorial } => {
            let Some(mut config) = prepare(&run)? else {
                return Ok(());
            };
            config.ablation.full_factorial |= full_factorial;
            for (variant, rows) in run_ablation(&config)? {
                println!("== {}", variant.tag());
                print_rows(&rows)?;
            }
        }
        Command::Quadrants(args) => {
            let Some(config) = prepare(&args)? else { return Ok(()) };
            print_rows(&run_quadrants(&config)?)?;
        }
        Command::Attack { run, attack } => {
            let mut config = run.resolve()?;
            attack.apply(&mut config);
            if run.print_config {
                print!("{}", config.to_toml()?);
                return Ok(());
            }
            println!(
                "{:<40} {:>4} {:>9} {:>8} {:>10} {:>10}",
                "model", "seed", "attacked", "failed", "rho mean", "rho std"
            );
            for r in run_attack(&config)? {
                println!(
                    "{:<40} {:>4} {:>9} {:>8} {:>10.5} {:>10.5}",
                    format!("{}/{}/{}", r.arch, r.head, r.ablation),
                    r.seed,
                    r.successes + r.failures,
                    r.failures,
                    r.rho_mean,
                    r.rho_std
                );
            }
        }
        Command::Report { dir } => {
            print!("{}", render_table(&report(&dir)?));
            println!(
                "summary.csv, welch.csv, summary.txt and series_*.csv written to {}",
                dir.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingDataset(_) | Error::Idx { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
