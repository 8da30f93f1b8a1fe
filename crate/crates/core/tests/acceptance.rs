//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The MNIST-scale criteria train through the experiment runner with
//! models and result files cached under `target/acceptance`, so only the
//! first run pays for training. Set `CONSENSUS_DATA` to the dataset root
//! (default: `data/` at the workspace root).

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{check_network, check_op, randn};
use consensus_core::adversarial::{deepfool, Affine, DeepFoolConfig};
use consensus_core::autodiff::Tape;
use consensus_core::consensus::{Distance, HeadConfig, PrototypeCount};
use consensus_core::data::{ImageSet, PerturbationKind, PerturbationSpec};
use consensus_core::experiment::{run_attack, run_quadrants, run_sweep, ResultRow, RunConfig, DATA_ENV};
use consensus_core::nn::batchnorm::batchnorm_train;
use consensus_core::nn::{conv2d, maxpool2d, softmax_cross_entropy, Arch, HeadKind, LayerGraph, Mode, Network};
use consensus_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn out_dir() -> PathBuf {
    workspace().join("target/acceptance")
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| workspace().join("data"), PathBuf::from)
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<Outcome> {
    type Op = Box<
        dyn for<'t> Fn(&[consensus_core::autodiff::Var<'t, f64>]) -> Result<consensus_core::autodiff::Var<'t, f64>>,
    >;
    let ops: Vec<(&str, Vec<Tensor<f64>>, Op)> = vec![
        (
            "matmul",
            vec![randn(&[3, 4], 1), randn(&[4, 5], 2)],
            Box::new(|v| v[0].matmul(v[1])),
        ),
        (
            "leaky_relu",
            vec![randn(&[20], 1)],
            Box::new(|v| Ok(v[0].leaky_relu(0.01))),
        ),
        (
            "conv",
            vec![randn(&[2, 2, 6, 6], 1), randn(&[3, 2, 3, 3], 2), randn(&[3], 3)],
            Box::new(|v| conv2d(v[0], v[1], Some(v[2]), 2)),
        ),
        (
            "maxpool",
            vec![randn(&[2, 2, 4, 4], 1)],
            Box::new(|v| maxpool2d(v[0], 2)),
        ),
        (
            "batchnorm",
            vec![randn(&[3, 2, 2, 2], 1), randn(&[2], 2), randn(&[2], 3)],
            Box::new(|v| Ok(batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        ("group_sum", vec![randn(&[6, 3], 1)], Box::new(|v| v[0].group_sum(2))),
        (
            "cosine",
            vec![randn(&[3, 4], 1), randn(&[5, 4], 2)],
            Box::new(|v| v[0].cosine_similarity(v[1], 1e-8)),
        ),
        (
            "euclidean",
            vec![randn(&[3, 4], 1), randn(&[5, 4], 2)],
            Box::new(|v| v[0].neg_pairwise_distance(v[1])),
        ),
        (
            "cross_entropy",
            vec![randn(&[4, 10], 1)],
            Box::new(|v| softmax_cross_entropy(v[0], &[0, 3, 9, 3])),
        ),
    ];
    let mut worst_op: (f64, &str) = (0.0, "");
    for (name, inputs, f) in &ops {
        let e = check_op(inputs, 1e-6, |v| f(v));
        if e > worst_op.0 {
            worst_op = (e, name);
        }
    }
    let mut worst_net: (f64, String) = (0.0, String::new());
    for arch in [Arch::CnnSmall, Arch::Cnn, Arch::Resnet] {
        for head in [HeadKind::Consensus, HeadKind::FullyConnected] {
            let graph = LayerGraph::build(arch, head, 1, 3, 16)?;
            let net = Network::<f64>::from_graph(graph, HeadConfig::default(), 7)?;
            let e = check_network(&net, &randn(&[2, 1, 16, 16], 3), &[0, 2], Mode::Train, 4, 1e-9);
            if e > worst_net.0 {
                worst_net = (e, format!("{arch}/{head}"));
            }
        }
    }
    Ok(verdict(
        worst_op.0 < 1e-6 && worst_net.0 < 1e-3,
        format!(
            "worst per-op rel. err {:.1e} ({}) < 1e-6, worst network rel. err {:.1e} ({}) < 1e-3",
            worst_op.0, worst_op.1, worst_net.0, worst_net.1
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn conventional_mode() -> Result<Outcome> {
    let graph = LayerGraph::build(Arch::CnnSmall, HeadKind::Consensus, 1, 10, 16)?;
    let taps = graph.tap_points.len();
    let mut weights = vec![0.0; taps];
    weights[taps - 1] = 1.0;
    let config = HeadConfig {
        distance: Distance::Dot,
        prototype_count: PrototypeCount::Classes,
        use_nonlinearity_h: false,
        layer_weights: Some(weights),
        ..HeadConfig::default()
    };
    let mut net = Network::<f64>::from_graph(graph, config, 3)?;
    let bank = net.consensus_head().expect("consensus head").banks[taps - 1].clone();
    let w = randn(&[10, bank.channels], 17);
    net.store_mut().set(bank.prototypes, w.clone());

    let x = randn(&[4, 1, 16, 16], 5);
    let tape = Tape::new();
    let out = net.forward(&tape, tape.constant(x), Mode::Eval)?;
    let logits = out.logits.value();
    let tap = out.taps[taps - 1].value();
    let (n, c) = (tap.shape()[0], tap.shape()[1]);
    let hw = tap.shape()[2] * tap.shape()[3];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let features: Vec<f64> = (0..c)
            .map(|ch| tap.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum())
            .collect();
        for k in 0..10 {
            let reference: f64 = (0..c).map(|ch| w.at(&[k, ch]) * features[ch]).sum();
            worst = worst.max((logits.at(&[i, k]) - reference).abs() / reference.abs().max(1.0));
        }
    }
    Ok(verdict(
        worst <= 1e-6,
        format!("max deviation from the linear classifier {worst:.1e} <= 1e-6"),
    ))
}

// ---------------------------------------------------------------- 3

fn invariants() -> Result<Outcome> {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Spatial permutation of a tap block leaves every summary unchanged.
    let graph = LayerGraph::build(Arch::CnnSmall, HeadKind::Consensus, 1, 10, 16)?;
    let net = Network::<f64>::from_graph(graph, HeadConfig::default(), 1)?;
    let head = net.consensus_head().expect("consensus head");
    let c = head.banks[0].channels;
    let block = Tensor::<f64>::randn([2, c, 3, 4], 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..12).collect();
    perm.shuffle(&mut rng);
    let permuted = Tensor::from_fn([2, c, 3, 4], |i| block.data()[i / 12 * 12 + perm[i % 12]]);
    let tape = Tape::new();
    let a = head.summarize(&tape, net.store(), tape.constant(block), 0)?.value();
    let b = head.summarize(&tape, net.store(), tape.constant(permuted), 0)?.value();
    if a != b {
        failures.push("summary changed under spatial permutation");
    }

    // Consensus equals the plain sum of the per-layer scores.
    let tape = Tape::new();
    let out = net.forward(&tape, tape.constant(randn(&[3, 1, 16, 16], 2)), Mode::Eval)?;
    let mut sum = Tensor::<f64>::zeros(out.logits.shape());
    for s in &out.layer_scores {
        sum.add_assign(&s.value());
    }
    if *out.logits.value() != sum {
        failures.push("consensus differs from the sum of layer scores");
    }

    // Identity-magnitude perturbations return the input untouched.
    let images = Tensor::from_fn([3, 1, 28, 28], |_| rng.gen_range(0..=255) as f32);
    let set = ImageSet::new(images, vec![1, 2, 3], 10, "random")?;
    for kind in PerturbationKind::ALL {
        let spec = PerturbationSpec::new(kind, kind.identity_magnitude(), 9)?;
        if spec.apply(&set, 0)?.images != set.images {
            failures.push("identity perturbation altered pixels");
        }
    }

    // Cosine scores ignore power-of-two rescaling of the summary.
    let summary = Tensor::<f64>::randn([4, c], 1.0, &mut rng);
    let tape = Tape::new();
    let base = head
        .align(&tape, net.store(), tape.constant(summary.clone()), 0)?
        .value();
    for k in [-6, -1, 1, 9] {
        let scaled = summary.scale(2f64.powi(k));
        if head.align(&tape, net.store(), tape.constant(scaled), 0)?.value() != base {
            failures.push("cosine scores changed under rescaling");
        }
    }

    Ok(if failures.is_empty() {
        verdict(
            true,
            "permutation invariance, decomposition, identity perturbations, cosine scale invariance (all exact)",
        )
    } else {
        failures.dedup();
        verdict(false, failures.join("; "))
    })
}

// ------------------------------------------------------- MNIST scale

fn desk(experiment: &str, arch: Arch, head: HeadKind) -> RunConfig {
    let out = out_dir();
    let mut c = RunConfig {
        experiment_id: experiment.into(),
        arch,
        head,
        seeds: vec![0],
        train_samples: Some(10_000),
        perturbations: Vec::new(),
        checkpoint_dir: Some(out.join("checkpoints")),
        output_dir: out,
        data_root: Some(data_root()),
        ..RunConfig::default()
    };
    c.training.epochs = 10;
    c
}

fn accuracy(rows: &[ResultRow], kind: PerturbationKind, magnitude: f64) -> f64 {
    rows.iter()
        .find(|r| r.perturb_kind == kind && r.magnitude == magnitude)
        .map_or(f64::NAN, |r| r.accuracy)
}

fn unperturbed_accuracy() -> Result<Outcome> {
    let rows = run_sweep(&desk("unperturbed", Arch::CnnSmall, HeadKind::Consensus))?;
    let acc = accuracy(&rows, PerturbationKind::None, 0.0);
    Ok(verdict(
        acc >= 0.95,
        format!("consensus cnn_small, 10k train, 10 epochs: test accuracy {acc:.4} >= 0.95"),
    ))
}

fn translation_gap() -> Result<Outcome> {
    let run = |head| {
        let mut c = desk("translation", Arch::CnnSmall, head);
        c.perturbations = vec![PerturbationKind::Translate];
        c.grid = BTreeMap::from([(PerturbationKind::Translate, vec![20.0])]);
        run_sweep(&c).map(|rows| accuracy(&rows, PerturbationKind::Translate, 20.0))
    };
    let dc = run(HeadKind::Consensus)?;
    let base = run(HeadKind::FullyConnected)?;
    Ok(verdict(
        dc - base >= 0.30,
        format!(
            "20px translation: consensus {dc:.4} vs base {base:.4}, gap {:.1} points >= 30",
            (dc - base) * 100.0
        ),
    ))
}

fn quadrants() -> Result<Outcome> {
    let run = |head| {
        let mut c = desk("quadrants", Arch::Cnn, head);
        c.train_samples = Some(20_000);
        run_quadrants(&c).map(|rows| accuracy(&rows, PerturbationKind::None, 0.0))
    };
    let dc = run(HeadKind::Consensus)?;
    let base = run(HeadKind::FullyConnected)?;
    Ok(verdict(
        dc >= 0.97 && (dc - base).abs() <= 0.01,
        format!(
            "40-class quadrants, cnn: consensus {dc:.4} >= 0.97, base {base:.4}, |diff| {:.2} <= 1 point",
            (dc - base).abs() * 100.0
        ),
    ))
}

fn affine_oracle() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (classes, dim) = (10, 64);
    let model = Affine {
        weight: (0..classes)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        bias: (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let x = Tensor::from_fn([dim], |_| rng.gen_range(0.0..1.0f32));
    let f: Vec<f64> = model
        .weight
        .iter()
        .zip(&model.bias)
        .map(|(w, b)| w.iter().zip(x.data()).map(|(w, &x)| w * x as f64).sum::<f64>() + b)
        .collect();
    let k0 = (0..classes).fold(0, |best, k| if f[k] > f[best] { k } else { best });
    let closed = (0..classes)
        .filter(|&k| k != k0)
        .map(|k| {
            let dw: f64 = model.weight[k]
                .iter()
                .zip(&model.weight[k0])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (f[k0] - f[k]).abs() / dw.sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    let found = deepfool(&model, &x, &DeepFoolConfig::default())?.perturbation_norm();
    Ok((found - closed).abs() / closed)
}

fn deepfool_density() -> Result<Outcome> {
    let oracle = affine_oracle()?;
    let run = |head| {
        let mut c = desk("deepfool", Arch::Resnet, head);
        c.attack.n_samples = 100;
        run_attack(&c).map(|rows| rows[0].rho_mean)
    };
    let dc = run(HeadKind::Consensus)?;
    let base = run(HeadKind::FullyConnected)?;
    let ratio = dc / base;
    Ok(verdict(
        ratio > 2.0 && oracle < 0.05,
        format!(
            "resnet, 100 test images: rho consensus {dc:.4} / base {base:.4} = {ratio:.2} > 2; affine oracle deviation {:.2}% < 5%",
            oracle * 100.0
        ),
    ))
}

fn ablation() -> Result<Outcome> {
    let endpoints = [
        PerturbationKind::Translate,
        PerturbationKind::Magnify,
        PerturbationKind::Noise,
        PerturbationKind::Blur,
    ];
    let run = |distance| {
        let mut c = desk("ablation", Arch::CnnSmall, HeadKind::Consensus);
        c.head_config.distance = distance;
        c.perturbations = endpoints.to_vec();
        c.grid = endpoints.iter().map(|&k| (k, vec![k.endpoint()])).collect();
        run_sweep(&c)
    };
    let cosine = run(Distance::Cosine)?;
    let euclidean = run(Distance::Euclidean)?;
    let fc = run(Distance::FullyConnected)?;
    let magnify = |rows: &[ResultRow]| accuracy(rows, PerturbationKind::Magnify, 2.0);
    let mut passed = magnify(&cosine) >= magnify(&euclidean);
    let mut detail = format!(
        "magnify 2: cosine {:.4} >= euclidean {:.4}; fc < cosine at",
        magnify(&cosine),
        magnify(&euclidean)
    );
    for k in endpoints {
        let (f, c) = (accuracy(&fc, k, k.endpoint()), accuracy(&cosine, k, k.endpoint()));
        passed &= f < c;
        detail.push_str(&format!(" {k} {} ({f:.4} < {c:.4})", k.endpoint()));
    }
    Ok(verdict(passed, detail))
}

fn determinism() -> Result<Outcome> {
    let csv = |tag: &str| -> Result<Vec<u8>> {
        let dir = out_dir().join("determinism").join(tag);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let mut c = desk("determinism", Arch::CnnSmall, HeadKind::Consensus);
        c.output_dir = dir.clone();
        c.checkpoint_dir = None;
        c.train_samples = Some(2000);
        c.test_samples = Some(500);
        c.training.epochs = 1;
        c.perturbations = vec![PerturbationKind::Translate, PerturbationKind::Noise];
        c.grid = BTreeMap::from([
            (PerturbationKind::Translate, vec![8.0]),
            (PerturbationKind::Noise, vec![30.0]),
        ]);
        run_sweep(&c)?;
        Ok(fs::read(dir.join("determinism.csv"))?)
    };
    let (a, b) = (csv("a")?, csv("b")?);
    Ok(verdict(
        !a.is_empty() && a == b,
        format!("two independent runs wrote identical CSVs ({} bytes)", a.len()),
    ))
}

type Check = fn() -> Result<Outcome>;

#[test]
fn acceptance_criteria() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let criteria: [(u8, &str, Check); 9] = [
        (1, "gradient correctness", gradients),
        (2, "conventional-mode equivalence", conventional_mode),
        (3, "exact invariants", invariants),
        (9, "determinism", determinism),
        (4, "unperturbed accuracy", unperturbed_accuracy),
        (5, "translation robustness gap", translation_gap),
        (8, "ablation direction", ablation),
        (7, "deepfool perturbation density", deepfool_density),
        (6, "quadrants", quadrants),
    ];
    let mut lines = Vec::new();
    for (number, name, run) in criteria {
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let line = format!(
            "criterion {number} [{}] {name}: {} ({:.0}s)",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        report(&line);
        lines.push((number, outcome.passed, line));
    }
    lines.sort_by_key(|l| l.0);
    let summary: Vec<&str> = lines.iter().map(|l| l.2.as_str()).collect();
    fs::create_dir_all(out_dir()).expect("output directory");
    fs::write(out_dir().join("summary.txt"), summary.join("\n") + "\n").expect("summary written");
    report("");
    for line in &summary {
        report(line);
    }
    let failed: Vec<u8> = lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
