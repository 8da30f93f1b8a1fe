//! Test-time perturbations, applied in 0–255 space on the canvas.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    None,
    Translate,
    Magnify,
    Noise,
    Blur,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::Translate,
        PerturbationKind::Magnify,
        PerturbationKind::Noise,
        PerturbationKind::Blur,
    ];

    /// Magnitudes swept for robustness curves.
    pub fn sweep_grid(self) -> &'static [f64] {
        match self {
            PerturbationKind::None => &[0.0],
            PerturbationKind::Translate => &[0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            PerturbationKind::Magnify => &[1.0, 1.25, 1.5, 1.75, 2.0],
            PerturbationKind::Noise => &[0.0, 10.0, 20.0, 30.0],
            PerturbationKind::Blur => &[0.0, 0.4, 0.8, 1.2, 1.6],
        }
    }

    /// Strongest magnitude shown for each kind: 20px, 2×, σ=30, σ=1.5.
    pub fn endpoint(self) -> f64 {
        match self {
            PerturbationKind::None => 0.0,
            PerturbationKind::Translate => 20.0,
            PerturbationKind::Magnify => 2.0,
            PerturbationKind::Noise => 30.0,
            PerturbationKind::Blur => 1.5,
        }
    }

    /// The magnitude that leaves images untouched.
    pub fn identity_magnitude(self) -> f64 {
        match self {
            PerturbationKind::Magnify => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationKind::None => "none",
            PerturbationKind::Translate => "translate",
            PerturbationKind::Magnify => "magnify",
            PerturbationKind::Noise => "noise",
            PerturbationKind::Blur => "blur",
        })
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PerturbationKind::None),
            "translate" => Ok(PerturbationKind::Translate),
            "magnify" => Ok(PerturbationKind::Magnify),
            "noise" => Ok(PerturbationKind::Noise),
            "blur" => Ok(PerturbationKind::Blur),
            _ => Err(Error::invalid(format!("unknown perturbation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, magnitude: f64, seed: u64) -> Result<Self> {
        let spec = PerturbationSpec { kind, magnitude, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        PerturbationSpec {
            kind: PerturbationKind::None,
            magnitude: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::invalid(format!(
                "{} magnitude {} must be ≥ 0",
                self.kind, self.magnitude
            )));
        }
        if self.kind == PerturbationKind::Magnify && self.magnitude < 1.0 {
            return Err(Error::invalid(format!("magnify scale {} must be ≥ 1", self.magnitude)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.kind == PerturbationKind::None || self.magnitude == self.kind.identity_magnitude()
    }

    /// Image `i` of `set` is treated as image `first_index + i` of the
    /// whole evaluation set when drawing random signs or noise.
    pub fn apply(&self, set: &ImageSet, first_index: usize) -> Result<ImageSet> {
        self.validate()?;
        if self.is_identity() {
            return Ok(set.clone());
        }
        let (c, h, w) = (set.channels(), set.height(), set.width());
        let mut out = set.images.data().to_vec();
        for (i, img) in out.chunks_mut(c * h * w).enumerate() {
            let mut rng = image_rng(self.seed, first_index + i);
            match self.kind {
                PerturbationKind::None => {}
                PerturbationKind::Translate => {
                    let t = self.magnitude.round() as isize;
                    let dy = if rng.gen::<bool>() { t } else { -t };
                    let dx = if rng.gen::<bool>() { t } else { -t };
                    for plane in img.chunks_mut(h * w) {
                        translate(plane, h, w, dy, dx);
                    }
                }
                PerturbationKind::Magnify => {
                    for plane in img.chunks_mut(h * w) {
                        magnify(plane, h, w, self.magnitude);
                    }
                }
                PerturbationKind::Noise => add_gaussian_noise(img, self.magnitude, &mut rng),
                PerturbationKind::Blur => {
                    for plane in img.chunks_mut(h * w) {
                        gaussian_blur(plane, h, w, self.magnitude);
                    }
                }
            }
        }
        Ok(ImageSet {
            images: Tensor::new(set.images.shape().to_vec(), out)?,
            labels: set.labels.clone(),
            num_classes: set.num_classes,
            name: set.name.clone(),
        })
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Moves content by `dy` rows and `dx` columns. Vacated pixels become 0 and
/// content leaving the plane is dropped.
pub fn translate(plane: &mut [f32], h: usize, w: usize, dy: isize, dx: isize) {
    if dy == 0 && dx == 0 {
        return;
    }
    let src = plane.to_vec();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (sr, sc) = (r - dy, c - dx);
            let inside = (0..h as isize).contains(&sr) && (0..w as isize).contains(&sc);
            plane[(r * w as isize + c) as usize] = if inside {
                src[(sr * w as isize + sc) as usize]
            } else {
                0.0
            };
        }
    }
}

/// Nearest-neighbour zoom by `scale` about the plane center, cropped back
/// to the same size: `src = floor((dst − c) / scale + c)` with `c = size / 2`.
pub fn magnify(plane: &mut [f32], h: usize, w: usize, scale: f64) {
    if scale == 1.0 {
        return;
    }
    let src = plane.to_vec();
    let index = |dst: usize, size: usize| {
        let c = size as f64 / 2.0;
        let s = ((dst as f64 - c) / scale + c).floor();
        (s.max(0.0) as usize).min(size - 1)
    };
    for r in 0..h {
        let sr = index(r, h);
        for c in 0..w {
            plane[r * w + c] = src[sr * w + index(c, w)];
        }
    }
}

/// Adds `N(0, std)` to each pixel and clamps to `[0, 255]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(pixels: &mut [f32], std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    for p in pixels {
        *p = (*p as f64 + normal.sample(rng)).clamp(0.0, 255.0) as f32;
    }
}

/// Normalized sampled Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(std: f64) -> Vec<f64> {
    let radius = (3.0 * std).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * std * std)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(plane: &mut [f32], h: usize, w: usize, std: f64) {
    if std == 0.0 {
        return;
    }
    let k = gaussian_kernel(std);
    let radius = (k.len() / 2) as isize;
    let src: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sc = c as isize + j as isize - radius;
                if (0..w as isize).contains(&sc) {
                    acc += kv * src[r * w + sc as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sr = r as isize + j as isize - radius;
                if (0..h as isize).contains(&sr) {
                    acc += kv * tmp[sr as usize * w + c];
                }
            }
            plane[r * w + c] = acc.clamp(0.0, 255.0) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas(f: impl Fn(usize, usize) -> f32) -> ImageSet {
        ImageSet::new(Tensor::from_fn([1, 1, 64, 64], |i| f(i / 64, i % 64)), vec![0], 10, "t").unwrap()
    }

    fn random_set(n: usize, seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSet::new(
            Tensor::from_fn([n, 1, 64, 64], |_| rng.gen_range(0..=255) as f32),
            vec![0; n],
            10,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn identity_magnitudes_are_bit_exact() {
        let set = random_set(3, 0);
        for kind in PerturbationKind::ALL {
            let spec = PerturbationSpec::new(kind, kind.identity_magnitude(), 11).unwrap();
            assert_eq!(spec.apply(&set, 0).unwrap(), set, "{kind}");
        }
    }

    #[test]
    fn hot_pixel_moves_by_plus_plus() {
        let mut plane = vec![0.0; 64 * 64];
        plane[32 * 64 + 32] = 255.0;
        translate(&mut plane, 64, 64, 20, 20);
        assert_eq!(plane[52 * 64 + 52], 255.0);
        assert_eq!(plane.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn translation_clips_and_is_seeded() {
        let mut plane = vec![1.0; 4];
        translate(&mut plane, 2, 2, 5, 0);
        assert_eq!(plane, vec![0.0; 4]);
        let set = random_set(4, 1);
        let spec = PerturbationSpec::new(PerturbationKind::Translate, 20.0, 3).unwrap();
        assert_eq!(spec.apply(&set, 0).unwrap(), spec.apply(&set, 0).unwrap());
    }

    #[test]
    fn chunking_does_not_change_stochastic_output() {
        let set = random_set(6, 2);
        let spec = PerturbationSpec::new(PerturbationKind::Noise, 30.0, 8).unwrap();
        let whole = spec.apply(&set, 0).unwrap();
        let tail = spec.apply(&set.range(2, 6), 2).unwrap();
        assert_eq!(whole.range(2, 6), tail);
    }

    #[test]
    fn magnify_doubles_a_centered_square() {
        let set = canvas(|r, c| {
            if (31..33).contains(&r) && (31..33).contains(&c) {
                255.0
            } else {
                0.0
            }
        });
        let out = PerturbationSpec::new(PerturbationKind::Magnify, 2.0, 0)
            .unwrap()
            .apply(&set, 0)
            .unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let inside = (30..34).contains(&r) && (30..34).contains(&c);
                assert_eq!(out.images.at(&[0, 0, r, c]) == 255.0, inside, "({r},{c})");
            }
        }
    }

    #[test]
    fn noise_has_the_requested_spread_and_stays_in_range() {
        let set = ImageSet::new(Tensor::full([4, 1, 64, 64], 128.0), vec![0; 4], 10, "t").unwrap();
        let out = PerturbationSpec::new(PerturbationKind::Noise, 30.0, 4)
            .unwrap()
            .apply(&set, 0)
            .unwrap();
        let d: Vec<f64> = out.images.data().iter().map(|&v| v as f64 - 128.0).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 30.0).abs() < 2.0, "{sd}");
        let extreme = ImageSet::new(Tensor::full([1, 1, 64, 64], 250.0), vec![0], 10, "t").unwrap();
        let out = PerturbationSpec::new(PerturbationKind::Noise, 100.0, 4)
            .unwrap()
            .apply(&extreme, 0)
            .unwrap();
        assert!(out.images.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn blur_keeps_constant_interior() {
        let mut plane = vec![100.0f32; 32 * 32];
        gaussian_blur(&mut plane, 32, 32, 1.5);
        for r in 5..27 {
            for c in 5..27 {
                assert!((plane[r * 32 + c] - 100.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn blurred_delta_is_the_kernel_outer_product() {
        let mut plane = vec![0.0f32; 33 * 33];
        plane[16 * 33 + 16] = 255.0;
        gaussian_blur(&mut plane, 33, 33, 1.5);
        // Kernel evaluated directly: radius 5, weights exp(-x²/4.5).
        let raw: Vec<f64> = (-5..=5).map(|x: i32| (-(x * x) as f64 / 4.5).exp()).collect();
        let z: f64 = raw.iter().sum();
        for dr in -5i32..=5 {
            for dc in -5i32..=5 {
                let want = 255.0 * raw[(dr + 5) as usize] / z * raw[(dc + 5) as usize] / z;
                let got = plane[((16 + dr) * 33 + 16 + dc) as usize] as f64;
                assert!((got - want).abs() < 1e-4, "({dr},{dc}) {got} vs {want}");
            }
        }
        assert_eq!(plane[10 * 33 + 16], 0.0);
    }

    #[test]
    fn invalid_magnitudes_are_rejected() {
        assert!(PerturbationSpec::new(PerturbationKind::Magnify, 0.5, 0).is_err());
        assert!(PerturbationSpec::new(PerturbationKind::Noise, -1.0, 0).is_err());
    }
}
