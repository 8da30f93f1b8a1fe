//! Dataset ingestion, canvas embedding, perturbations, and batching.

pub mod idx;
pub mod perturb;
pub mod quadrants;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use perturb::{PerturbationKind, PerturbationSpec};
pub use quadrants::make_quadrants;

/// Side length of the black background every image is placed on.
pub const CANVAS: usize = 64;

/// Images in 0–255 intensity units with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl ImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if images.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::invalid("pixel outside [0, 255]"));
        }
        Ok(ImageSet {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            images: self.images.select_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> ImageSet {
        ImageSet {
            images: self.images.slice_outer(start, end),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// `n` images drawn without replacement, kept in their original order.
    pub fn subset(&self, n: usize, seed: u64) -> ImageSet {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.len(), n).into_vec();
        picked.sort_unstable();
        self.select(&picked)
    }
}

/// Centers every image on a black `size`×`size` canvas at offset
/// `floor((size − H) / 2)`.
pub fn embed_canvas(set: &ImageSet, size: usize) -> Result<ImageSet> {
    let (h, w) = (set.height(), set.width());
    if h > size || w > size {
        return Err(Error::invalid(format!(
            "{h}×{w} image does not fit a {size}×{size} canvas"
        )));
    }
    if h == size && w == size {
        return Ok(set.clone());
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let planes = set.len() * set.channels();
    let mut out = vec![0.0f32; planes * size * size];
    for (src, dst) in set.images.data().chunks(h * w).zip(out.chunks_mut(size * size)) {
        for r in 0..h {
            let d = (top + r) * size + left;
            dst[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
    }
    Ok(ImageSet {
        images: Tensor::new([set.len(), set.channels(), size, size], out)?,
        labels: set.labels.clone(),
        num_classes: set.num_classes,
        name: set.name.clone(),
    })
}

/// Maps 0–255 intensities to `[0, 1]`.
pub fn normalize(images: &Tensor<f32>) -> Tensor<f32> {
    images.map(|v| v / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Datasets distributed as IDX files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    /// The balanced split (47 classes).
    Emnist,
}

impl DatasetName {
    pub fn dir(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion_mnist",
            DatasetName::Emnist => "emnist",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => 10,
            DatasetName::Emnist => 47,
        }
    }

    fn file_prefix(self) -> &'static str {
        match self {
            DatasetName::Emnist => "emnist-balanced-",
            _ => "",
        }
    }

    fn split_tag(self, split: Split) -> &'static str {
        match (self, split) {
            (_, Split::Train) => "train",
            (DatasetName::Emnist, Split::Test) => "test",
            (_, Split::Test) => "t10k",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion_mnist" | "fashion-mnist" | "fashionmnist" => Ok(DatasetName::FashionMnist),
            "emnist" => Ok(DatasetName::Emnist),
            _ => Err(Error::invalid(format!("unknown dataset `{s}`"))),
        }
    }
}

/// Paths of the image and label files of one split under `root`.
pub fn idx_paths(root: &Path, name: DatasetName, split: Split) -> (PathBuf, PathBuf) {
    let dir = root.join(name.dir());
    let stem = format!("{}{}", name.file_prefix(), name.split_tag(split));
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

/// Pairs an image file `[N, H, W]` with a label file `[N]`.
pub fn read_idx(images: &Path, labels: &Path, num_classes: usize, name: &str) -> Result<ImageSet> {
    let img = idx::read(images)?;
    let lab = idx::read(labels)?;
    let bad = |path: &Path, reason: String| Error::Idx {
        path: path.to_path_buf(),
        offset: 3,
        reason,
    };
    if img.dims.len() != 3 {
        return Err(bad(images, format!("expected rank 3, got {}", img.dims.len())));
    }
    if lab.dims.len() != 1 {
        return Err(bad(labels, format!("expected rank 1, got {}", lab.dims.len())));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(bad(
            labels,
            format!("{} labels for {} images", lab.dims[0], img.dims[0]),
        ));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let pixels = img.data.iter().map(|&b| b as f32).collect();
    let labels_usize: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    ImageSet::new(Tensor::new([n, 1, h, w], pixels)?, labels_usize, num_classes, name)
}

/// Loads one split at native resolution. EMNIST images are stored
/// transposed and are flipped back here.
pub fn load(root: &Path, name: DatasetName, split: Split) -> Result<ImageSet> {
    let (images, labels) = idx_paths(root, name, split);
    let set = read_idx(&images, &labels, name.num_classes(), name.dir())?;
    if name == DatasetName::Emnist {
        let (n, h, w) = (set.len(), set.height(), set.width());
        let src = set.images.data();
        let t = Tensor::from_fn([n, 1, w, h], |i| {
            let (img, rest) = (i / (w * h), i % (w * h));
            let (r, c) = (rest / h, rest % h);
            src[img * h * w + c * w + r]
        });
        return ImageSet::new(t, set.labels, set.num_classes, set.name);
    }
    Ok(set)
}

/// Writes a single-channel set back to an IDX pair. Pixels are rounded.
pub fn write_idx(set: &ImageSet, images: &Path, labels: &Path) -> Result<()> {
    if set.channels() != 1 {
        return Err(Error::invalid("IDX export supports single-channel images"));
    }
    if set.num_classes > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    idx::write(
        images,
        &idx::IdxArray {
            dims: vec![set.len(), set.height(), set.width()],
            data: set.images.data().iter().map(|&v| v.round() as u8).collect(),
        },
    )?;
    idx::write(
        labels,
        &idx::IdxArray {
            dims: vec![set.len()],
            data: set.labels.iter().map(|&l| l as u8).collect(),
        },
    )
}

/// One normalized mini-batch on the canvas.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Shuffled, unperturbed training batches. Each epoch uses its own
/// permutation derived from the seed.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    set: &'a ImageSet,
    batch_size: usize,
    seed: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(set: &'a ImageSet, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(BatchStream { set, batch_size, seed })
    }

    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.set.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn num_batches(&self) -> usize {
        self.set.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.order(epoch);
        let bs = self.batch_size;
        (0..self.num_batches()).map(move |b| {
            let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
            prepare(&self.set.select(idx), &PerturbationSpec::none(), 0)
        })
    }
}

/// Canvas embedding, then the perturbation in 0–255 space, then
/// normalization. `first_index` is the position of `set`'s first image in
/// its parent set, so stochastic perturbations do not depend on chunking.
pub fn prepare(set: &ImageSet, spec: &PerturbationSpec, first_index: usize) -> Result<Batch> {
    let canvas = embed_canvas(set, CANVAS)?;
    let perturbed = spec.apply(&canvas, first_index)?;
    Ok(Batch {
        images: normalize(&perturbed.images),
        labels: perturbed.labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit(n: usize, h: usize, value: f32) -> ImageSet {
        ImageSet::new(Tensor::full([n, 1, h, h], value), vec![0; n], 10, "t").unwrap()
    }

    #[test]
    fn digit_lands_on_rows_18_to_45() {
        let out = embed_canvas(&digit(1, 28, 255.0), 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let inside = (18..46).contains(&r) && (18..46).contains(&c);
                assert_eq!(out.images.at(&[0, 0, r, c]) != 0.0, inside, "({r},{c})");
            }
        }
    }

    #[test]
    fn black_stays_black_and_full_size_is_identity() {
        let out = embed_canvas(&digit(2, 28, 0.0), 64).unwrap();
        assert!(out.images.data().iter().all(|&v| v == 0.0));
        let full = digit(1, 64, 7.0);
        assert_eq!(embed_canvas(&full, 64).unwrap(), full);
        assert!(embed_canvas(&digit(1, 65, 0.0), 64).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let t = normalize(&Tensor::new([2], vec![255.0, 0.0]).unwrap());
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn same_seed_same_batches() {
        let set = ImageSet::new(
            Tensor::from_fn([10, 1, 2, 2], |i| (i / 4) as f32),
            (0..10).collect(),
            10,
            "t",
        )
        .unwrap();
        let a = BatchStream::new(&set, 3, 5).unwrap();
        let b = BatchStream::new(&set, 3, 5).unwrap();
        assert_eq!(a.order(0), b.order(0));
        assert_ne!(a.order(0), a.order(1));
        let labels: Vec<usize> = a.epoch(0).flat_map(|b| b.unwrap().labels).collect();
        assert_eq!(labels, a.order(0));
        let first = a.epoch(0).next().unwrap().unwrap();
        assert_eq!(first.images.shape(), &[3, 1, 64, 64]);
        assert_eq!(first.labels.len(), 3);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(ImageSet::new(Tensor::zeros([1, 1, 2, 2]), vec![10], 10, "t").is_err());
        assert!(ImageSet::new(Tensor::full([1, 1, 2, 2], 256.0), vec![0], 10, "t").is_err());
    }

    #[test]
    fn subset_is_seeded_and_ordered() {
        let set = ImageSet::new(Tensor::zeros([50, 1, 1, 1]), (0..50).map(|i| i % 10).collect(), 10, "t").unwrap();
        let a = set.subset(20, 1);
        assert_eq!(a, set.subset(20, 1));
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn idx_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let set = ImageSet::new(Tensor::from_fn([3, 1, 4, 4], |i| i as f32), vec![1, 2, 3], 10, "t").unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&set, &i, &l).unwrap();
        assert_eq!(read_idx(&i, &l, 10, "t").unwrap(), set);
    }
}
