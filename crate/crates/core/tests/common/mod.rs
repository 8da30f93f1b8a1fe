//! Central-difference gradient checks.

#![allow(dead_code)]

use consensus_core::autodiff::{Tape, Var};
use consensus_core::nn::{Mode, Network};
use consensus_core::{Result, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Checks every input of `f` by contracting its output with fixed random
/// weights. Returns the worst normwise relative error over the inputs.
pub fn check_op<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&vars).expect("op runs").shape();
        randn(&shape, 991)
    };
    let loss_of = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&vars).expect("op runs");
        out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars).expect("op runs");
    let loss = out.mul(tape.constant(weights.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = loss_of(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = loss_of(&xs);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn network_loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], mode: Mode) -> f64 {
    let tape = Tape::new();
    let out = net.forward(&tape, tape.constant(x.clone()), mode).unwrap();
    net.loss(out.logits, labels).unwrap().value().item()
}

/// Compares parameter and input gradients of the training loss against
/// central differences at `per_tensor` sampled coordinates of every
/// trainable tensor. Returns the normwise relative error over all sampled
/// coordinates.
pub fn check_network(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    per_tensor: usize,
    h: f64,
) -> f64 {
    let pairs = network_pairs(net, x, labels, mode, per_tensor, h);
    let (a, n): (Vec<f64>, Vec<f64>) = pairs.iter().map(|(_, a, n)| (*a, *n)).unzip();
    rel_err(&a, &n)
}

/// `(tensor name, analytic, numeric)` for every sampled coordinate.
pub fn network_pairs(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    per_tensor: usize,
    h: f64,
) -> Vec<(String, f64, f64)> {
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = net.forward(&tape, input, mode).unwrap();
    let loss = net.loss(out.logits, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = net.store().clone();
    grads.accumulate_into(&tape, &mut store);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = Vec::new();
    let mut probe = net.clone();
    for id in net.store().ids().collect::<Vec<_>>() {
        let entry = net.store().entry(id);
        if !entry.trainable {
            continue;
        }
        let g = store.grad(id).expect("every trainable tensor gets a gradient").clone();
        let n = entry.value.numel();
        for j in index::sample(&mut rng, n, per_tensor.min(n)) {
            let orig = probe.store().get(id).data()[j];
            probe.store_mut().get_mut(id).data_mut()[j] = orig + h;
            let up = network_loss(&probe, x, labels, mode);
            probe.store_mut().get_mut(id).data_mut()[j] = orig - h;
            let down = network_loss(&probe, x, labels, mode);
            probe.store_mut().get_mut(id).data_mut()[j] = orig;
            pairs.push((entry.name.clone(), g.data()[j], (up - down) / (2.0 * h)));
        }
    }
    let gx = grads.get(input).expect("input gradient");
    for j in index::sample(&mut rng, x.numel(), per_tensor.min(x.numel())) {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let up = network_loss(net, &xp, labels, mode);
        xp.data_mut()[j] -= 2.0 * h;
        let down = network_loss(net, &xp, labels, mode);
        pairs.push(("input".to_string(), gx.data()[j], (up - down) / (2.0 * h)));
    }
    pairs
}
