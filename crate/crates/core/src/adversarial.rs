//! DeepFool and the perturbation-density metric.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{prepare, ImageSet, PerturbationSpec};
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::tensor::Tensor;

/// Something DeepFool can attack: class scores and their input gradients.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Scores of the attacked classes for one input, and the gradient of
    /// each score with respect to the input (`num_classes` rows, each
    /// flattened like `x`).
    fn scores_and_gradients(&self, x: &Tensor<f32>) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;

    fn scores(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.scores_and_gradients(x)?.0)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// `f(x) = W x + b` over flattened inputs.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Classifier for Affine {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn scores_and_gradients(&self, x: &Tensor<f32>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let scores = self
            .weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| {
                if w.len() != x.numel() {
                    return Err(Error::shape("affine classifier", &[w.len()], x.shape()));
                }
                Ok(w.iter().zip(x.data()).map(|(w, &x)| w * x as f64).sum::<f64>() + b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((scores, self.weight.clone()))
    }
}

/// The real-class logits of a network in eval mode. The opt-out logit of a
/// consensus head is not attacked.
impl Classifier for Network<f32> {
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn scores_and_gradients(&self, x: &Tensor<f32>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = Network::num_classes(self);
        let per = x.numel();
        let mut shape = x.shape().to_vec();
        if shape.len() == 3 {
            shape.insert(0, 1);
        }
        if shape.len() != 4 || shape[0] != 1 {
            return Err(Error::invalid(format!(
                "attack input must be a single image, got {:?}",
                x.shape()
            )));
        }
        shape[0] = c;
        let replicated = Tensor::new(shape, x.data().repeat(c))?;
        let tape = Tape::frozen();
        let input = tape.leaf(replicated);
        let out = self.forward(&tape, input, Mode::Eval)?;
        let k = self.output_dim();
        let seed = Tensor::from_fn([c, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
        let logits = out.logits.value();
        let scores = logits.data()[..c].iter().map(|&v| v as f64).collect();
        let grads = tape.backward_with(out.logits, seed)?;
        let g = grads.get(input).ok_or(Error::NotDifferentiable)?;
        let rows = g
            .data()
            .chunks(per)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        Ok((scores, rows))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepFoolConfig {
    pub max_iter: usize,
    pub overshoot: f64,
    /// Clamp perturbed pixels to `[0, 1]`.
    pub clip: bool,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig {
            max_iter: 50,
            overshoot: 0.02,
            clip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub original: Tensor<f32>,
    pub perturbed: Tensor<f32>,
    /// `perturbed − original`.
    pub perturbation: Tensor<f32>,
    pub iterations: usize,
    pub original_class: usize,
    pub adversarial_class: usize,
    pub success: bool,
}

impl AttackResult {
    pub fn perturbation_norm(&self) -> f64 {
        l2(self.perturbation.data())
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Multiclass DeepFool. Each iteration linearizes every boundary around
/// the current point and steps to the closest one; the accumulated step is
/// scaled by `1 + overshoot`.
pub fn deepfool<C: Classifier + ?Sized>(model: &C, x: &Tensor<f32>, config: &DeepFoolConfig) -> Result<AttackResult> {
    let n = x.numel();
    let original_scores = model.scores(x)?;
    let k0 = argmax(&original_scores);
    let mut r_tot = vec![0.0f64; n];
    let mut current = x.clone();
    let mut label = k0;
    let mut iterations = 0;
    let build = |r_tot: &[f64]| -> Result<Tensor<f32>> {
        let data = x
            .data()
            .iter()
            .zip(r_tot)
            .map(|(&v, &r)| {
                let p = (v as f64 + (1.0 + config.overshoot) * r) as f32;
                if config.clip {
                    p.clamp(0.0, 1.0)
                } else {
                    p
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    while label == k0 && iterations < config.max_iter {
        let (f, grads) = model.scores_and_gradients(&current)?;
        let mut best: Option<(f64, usize, f64)> = None;
        for k in (0..f.len()).filter(|&k| k != k0) {
            let w_norm = grads[k]
                .iter()
                .zip(&grads[k0])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if w_norm == 0.0 {
                continue;
            }
            let dist = (f[k] - f[k0]).abs() / w_norm;
            if best.is_none_or(|(d, _, _)| dist < d) {
                best = Some((dist, k, w_norm));
            }
        }
        let (dist, l, w_norm) = best.ok_or(Error::NotDifferentiable)?;
        let step = (dist + 1e-4) / w_norm;
        for ((r, a), b) in r_tot.iter_mut().zip(&grads[l]).zip(&grads[k0]) {
            *r += step * (a - b);
        }
        iterations += 1;
        current = build(&r_tot)?;
        label = argmax(&model.scores(&current)?);
    }
    let perturbation = Tensor::new(
        x.shape().to_vec(),
        current.data().iter().zip(x.data()).map(|(p, o)| p - o).collect(),
    )?;
    Ok(AttackResult {
        original: x.clone(),
        perturbed: current,
        perturbation,
        iterations,
        original_class: k0,
        adversarial_class: label,
        success: label != k0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    /// Mean of `‖r̂‖ / ‖x‖` over successful attacks.
    pub mean: f64,
    /// Sample standard deviation of the same ratios.
    pub std: f64,
    pub successes: usize,
    pub failures: usize,
    /// Zero-norm inputs that were not attacked.
    pub skipped: usize,
    pub ratios: Vec<f64>,
}

/// `n` distinct test indices drawn with `seed`, ascending.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::invalid(format!("cannot sample {n} of {len} images")));
    }
    let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), len, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn summarize_ratios(ratios: Vec<f64>, failures: usize, skipped: usize) -> DensityReport {
    let n = ratios.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / n as f64
    };
    let std = if n < 2 {
        0.0
    } else {
        (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    DensityReport {
        mean,
        std,
        successes: n,
        failures,
        skipped,
        ratios,
    }
}

/// Attacks `n_samples` seed-chosen images of `set` (canvas-embedded and
/// normalized first) and averages `‖r̂‖ / ‖x‖` over the successes.
/// `on_result` sees every attack as it finishes.
pub fn perturbation_density<C: Classifier + ?Sized>(
    model: &C,
    set: &ImageSet,
    n_samples: usize,
    seed: u64,
    config: &DeepFoolConfig,
    mut on_result: impl FnMut(usize, &AttackResult),
) -> Result<DensityReport> {
    let mut ratios = Vec::new();
    let (mut failures, mut skipped) = (0, 0);
    for i in sample_indices(set.len(), n_samples, seed)? {
        let batch = prepare(&set.range(i, i + 1), &PerturbationSpec::none(), i)?;
        let x = batch.images;
        let norm = l2(x.data());
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        let result = deepfool(model, &x, config)?;
        on_result(i, &result);
        if result.success {
            ratios.push(result.perturbation_norm() / norm);
        } else {
            failures += 1;
        }
    }
    Ok(summarize_ratios(ratios, failures, skipped))
}

/// Binary PGM with one row per pair: original on the left, perturbed on the
/// right. Values in `[0, 1]` map to `0..=255`; the rest is clamped.
pub fn write_pgm_grid(path: &Path, pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<()> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::invalid("no images to export"));
    };
    let s = first.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (cols, rows) = (2 * w + 1, pairs.len() * h);
    let mut pixels = vec![0u8; cols * rows];
    for (p, (a, b)) in pairs.iter().enumerate() {
        for (side, img) in [a, b].into_iter().enumerate() {
            if img.numel() < h * w {
                return Err(Error::invalid("pair images differ in size"));
            }
            for r in 0..h {
                for c in 0..w {
                    let v = (img.data()[r * w + c].clamp(0.0, 1.0) * 255.0).round() as u8;
                    pixels[(p * h + r) * cols + side * (w + 1) + c] = v;
                }
            }
        }
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(v: &[f32]) -> Tensor<f32> {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn binary_affine_matches_projection_distance() {
        // f0 − f1 = 3x + 4y − 1, so the boundary is 5 away per unit margin.
        let model = Affine {
            weight: vec![vec![3.0, 4.0], vec![0.0, 0.0]],
            bias: vec![-1.0, 0.0],
        };
        let x = point(&[2.0, 1.0]);
        let cfg = DeepFoolConfig::default();
        let r = deepfool(&model, &x, &cfg).unwrap();
        let exact = (3.0 * 2.0 + 4.0 * 1.0 - 1.0f64).abs() / 5.0;
        let found = r.perturbation_norm() / (1.0 + cfg.overshoot);
        assert!(r.success);
        assert!((found - exact).abs() / exact < 0.05, "{found} vs {exact}");
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn linear_model_needs_one_iteration_to_the_nearest_boundary() {
        let model = Affine {
            weight: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            bias: vec![0.0, 0.0, 0.0],
        };
        let x = point(&[1.0, 0.5]);
        let r = deepfool(&model, &x, &DeepFoolConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!((r.original_class, r.adversarial_class), (0, 1));
        let exact = 0.5 / 2f64.sqrt();
        assert!((r.perturbation_norm() / 1.02 - exact).abs() / exact < 0.05);
    }

    #[test]
    fn perturbation_is_exactly_the_difference() {
        let model = Affine {
            weight: vec![vec![0.3, -0.7, 0.2], vec![-0.1, 0.4, 0.5]],
            bias: vec![0.1, 0.0],
        };
        let x = point(&[0.9, 0.1, 0.3]);
        let r = deepfool(&model, &x, &DeepFoolConfig::default()).unwrap();
        for ((p, o), d) in r
            .perturbed
            .data()
            .iter()
            .zip(r.original.data())
            .zip(r.perturbation.data())
        {
            assert_eq!(p - o, *d);
        }
        assert!(r.success);
        assert_ne!(argmax(&model.scores(&r.perturbed).unwrap()), r.original_class);
    }

    #[test]
    fn constant_model_is_not_differentiable() {
        let model = Affine {
            weight: vec![vec![0.0], vec![0.0]],
            bias: vec![1.0, 0.0],
        };
        assert!(matches!(
            deepfool(&model, &point(&[1.0]), &DeepFoolConfig::default()),
            Err(Error::NotDifferentiable)
        ));
    }

    #[test]
    fn exhausted_budget_is_a_failure() {
        let model = Affine {
            weight: vec![vec![1.0], vec![0.0]],
            bias: vec![0.0, 0.0],
        };
        let cfg = DeepFoolConfig {
            max_iter: 0,
            ..Default::default()
        };
        let r = deepfool(&model, &point(&[1.0]), &cfg).unwrap();
        assert!(!r.success);
        assert_eq!(r.perturbation_norm(), 0.0);
    }

    #[test]
    fn density_of_one_sample() {
        let rep = summarize_ratios(vec![0.2 / 2.0], 0, 0);
        assert!((rep.mean - 0.1).abs() < 1e-15);
        assert_eq!(rep.std, 0.0);
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let a = Tensor::full([1, 1, 2, 3], 1.0f32);
        write_pgm_grid(&path, &[(a.clone(), a)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n7 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 14);
    }
}
