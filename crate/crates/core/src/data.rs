//! Labeled image datasets: MNIST IDX files and synthetic blobs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Pixel normalization `(p / 255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: MNIST_MEAN,
            std: MNIST_STD,
        }
    }
}

impl Normalization {
    pub fn apply(&self, pixel: u8) -> f32 {
        (pixel as f32 / 255.0 - self.mean) / self.std
    }
}

/// Images stored item-major as `(n, c, h, w)` floats, with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    dims: [usize; 3],
    images: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(dims: [usize; 3], images: Vec<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let item: usize = dims.iter().product();
        if item == 0 {
            return Err(Error::dim("dataset item dims must be positive"));
        }
        if images.len() != item * labels.len() {
            return Err(Error::CountMismatch {
                images: images.len() / item,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Malformed(format!("label {bad} not below {classes} classes")));
        }
        Ok(Self {
            dims,
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.dims.iter().product::<usize>();
        &self.images[i * len..(i + 1) * len]
    }

    /// Gathers the given items into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let [c, h, w] = self.dims;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor4::new([indices.len(), c, h, w], data)?, labels))
    }

    /// First `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let item = self.dims.iter().product::<usize>();
        Self {
            dims: self.dims,
            images: self.images[..n * item].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = bytes.get(..4).ok_or_else(|| Error::Truncated("IDX magic".into()))?;
    if found != expected.to_be_bytes() {
        return Err(Error::BadMagic {
            expected: expected.to_be_bytes().to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Raw IDX image file contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "image payload has {} of {need} bytes",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::Malformed(format!("{} trailing bytes after images", body.len() - need)));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Truncated(format!("label payload has {} of {count} bytes", body.len())));
    }
    if body.len() > count {
        return Err(Error::Malformed(format!("{} trailing bytes after labels", body.len() - count)));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a normalized single-channel dataset from IDX bytes.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], norm: Normalization, split: Split) -> Result<LabeledDataset> {
    let imgs = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if imgs.count != labels.len() {
        return Err(Error::CountMismatch {
            images: imgs.count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    LabeledDataset::new(
        [1, imgs.rows, imgs.cols],
        imgs.pixels.iter().map(|&p| norm.apply(p)).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        classes,
        split,
    )
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images: &Path, labels: &Path, norm: Normalization, split: Split) -> Result<LabeledDataset> {
    dataset_from_idx(&read(images)?, &read(labels)?, norm, split)
}

/// File names of the four MNIST files inside a data directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

impl MnistFiles {
    pub fn paths(&self, dir: &Path) -> [PathBuf; 4] {
        [
            dir.join(&self.train_images),
            dir.join(&self.train_labels),
            dir.join(&self.test_images),
            dir.join(&self.test_labels),
        ]
    }
}

/// Loads `(train, test)` from a directory holding the four MNIST files.
pub fn load_mnist_dir(dir: &Path, files: &MnistFiles, norm: Normalization) -> Result<(LabeledDataset, LabeledDataset)> {
    let [ti, tl, vi, vl] = files.paths(dir);
    Ok((
        load_idx(&ti, &tl, norm, Split::Train)?,
        load_idx(&vi, &vl, norm, Split::Test)?,
    ))
}

/// Parameters of a synthetic blob dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub classes: usize,
    pub samples: usize,
    /// Half-width of the uniform per-pixel noise around each class prototype.
    pub noise: f32,
}

/// Class `i % classes` for sample `i`; each class has a random `±1`
/// prototype image and samples add uniform noise to it.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.classes == 0 {
        return Err(Error::dim("synthetic dataset needs at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let item: usize = spec.dims.iter().product();
    let prototypes: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..item).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect();
    let mut images = Vec::with_capacity(item * spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        labels.push(class);
        images.extend(
            prototypes[class]
                .iter()
                .map(|&p| p + if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 }),
        );
    }
    LabeledDataset::new(spec.dims, images, labels, spec.classes, Split::Synthetic)
}
