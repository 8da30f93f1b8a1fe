//! The 40-class quadrant task: a digit placed in one of four canvas
//! quadrants, labelled by both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageSet, CANVAS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const QUADRANTS: usize = 4;

/// Top-left corner of quadrant `q` (0 = top-left, 1 = top-right,
/// 2 = bottom-left, 3 = bottom-right) for a `size`×`size` source.
pub fn quadrant_origin(q: usize, size: usize) -> (usize, usize) {
    let half = CANVAS / 2;
    let pad = (half - size) / 2;
    let row = if q >= 2 { half } else { 0 };
    let col = if q % 2 == 1 { half } else { 0 };
    (row + pad, col + pad)
}

pub fn quadrant_label(digit: usize, quadrant: usize) -> usize {
    digit * QUADRANTS + quadrant
}

/// Places each 28×28 image centered in a uniformly drawn quadrant of a
/// 64×64 canvas.
pub fn make_quadrants(set: &ImageSet, seed: u64) -> Result<ImageSet> {
    let (c, h, w) = (set.channels(), set.height(), set.width());
    if h != 28 || w != 28 {
        return Err(Error::invalid(format!("quadrant sources must be 28×28, got {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = CANVAS * CANVAS;
    let mut out = vec![0.0f32; set.len() * c * plane];
    let mut labels = Vec::with_capacity(set.len());
    for (i, src) in set.images.data().chunks(c * h * w).enumerate() {
        let q = rng.gen_range(0..QUADRANTS);
        let (top, left) = quadrant_origin(q, h);
        for ch in 0..c {
            let dst = &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            let s = &src[ch * h * w..(ch + 1) * h * w];
            for r in 0..h {
                let d = (top + r) * CANVAS + left;
                dst[d..d + w].copy_from_slice(&s[r * w..(r + 1) * w]);
            }
        }
        labels.push(quadrant_label(set.labels[i], q));
    }
    ImageSet::new(
        Tensor::new([set.len(), c, CANVAS, CANVAS], out)?,
        labels,
        set.num_classes * QUADRANTS,
        format!("{}_quadrants", set.name),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn label_mapping() {
        assert_eq!(quadrant_label(0, 0), 0);
        assert_eq!(quadrant_label(1, 0), 4);
        assert_eq!(quadrant_label(9, 3), 39);
    }

    #[test]
    fn origins_center_the_digit_in_each_quadrant() {
        assert_eq!(quadrant_origin(0, 28), (2, 2));
        assert_eq!(quadrant_origin(1, 28), (2, 34));
        assert_eq!(quadrant_origin(2, 28), (34, 2));
        assert_eq!(quadrant_origin(3, 28), (34, 34));
    }

    #[test]
    fn digit_is_placed_where_its_label_says() {
        let set = ImageSet::new(
            Tensor::full([20, 1, 28, 28], 200.0),
            (0..20).map(|i| i % 10).collect(),
            10,
            "d",
        )
        .unwrap();
        let out = make_quadrants(&set, 1).unwrap();
        assert_eq!(out.num_classes, 40);
        for i in 0..20 {
            let q = out.labels[i] % 4;
            assert_eq!(out.labels[i] / 4, set.labels[i]);
            let (top, left) = quadrant_origin(q, 28);
            let img = out.images.slice_outer(i, i + 1);
            assert_eq!(img.at(&[0, 0, top, left]), 200.0);
            assert_eq!(img.at(&[0, 0, top + 27, left + 27]), 200.0);
            assert_eq!(img.sum(), 200.0 * 784.0);
        }
    }

    #[test]
    fn quadrants_are_roughly_uniform_per_digit() {
        let n = 4000;
        let set = ImageSet::new(Tensor::zeros([n, 1, 28, 28]), (0..n).map(|i| i % 10).collect(), 10, "d").unwrap();
        let out = make_quadrants(&set, 7).unwrap();
        let chi = ChiSquared::new(3.0).unwrap();
        for digit in 0..10 {
            let mut counts = [0f64; 4];
            for &l in out.labels.iter().filter(|&&l| l / 4 == digit) {
                counts[l % 4] += 1.0;
            }
            let expected = counts.iter().sum::<f64>() / 4.0;
            let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
            assert!(1.0 - chi.cdf(stat) > 0.001, "digit {digit}: {counts:?}");
        }
    }
}
