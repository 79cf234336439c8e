//! Datasets: MNIST IDX files and a synthetic Gaussian-blob generator.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Float, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]`, stored as `[n, c, h, w]` f32, with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    /// `[c, h, w]` of one image.
    pub image_shape: [usize; 3],
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        image_shape: [usize; 3],
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} pixel values do not make {} images of {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            image_shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the given examples into `[len, c, h, w]` with their labels.
    pub fn batch<F: Float>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| F::from_f64(f64::from(v))));
        }
        let [c, h, w] = self.image_shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.image_len()].to_vec(),
            image_shape: self.image_shape,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Per-epoch example orders drawn from one seeded stream.
pub struct Shuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl Shuffler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: seed::rng(seed, "shuffle"),
            order: (0..len).collect(),
        }
    }

    /// A fresh permutation of `0..len`.
    pub fn epoch(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

fn idx_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| idx_error(path, offset, "file ends inside the header"))
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(idx_error(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let rows = read_be_u32(bytes, 8, path)? as usize;
    let cols = read_be_u32(bytes, 12, path)? as usize;
    if rows != 28 || cols != 28 {
        return Err(idx_error(
            path,
            8,
            format!("expected 28x28 images, got {rows}x{cols}"),
        ));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(idx_error(
            path,
            bytes.len(),
            format!("truncated: {n} images need {need} bytes"),
        ));
    }
    let pixels = bytes[16..need]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Ok((n, rows, cols, pixels))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(idx_error(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(idx_error(
            path,
            bytes.len(),
            format!("truncated: {n} labels need {} bytes", 8 + n),
        ));
    }
    if let Some(pos) = bytes[8..8 + n].iter().position(|&b| b > 9) {
        return Err(idx_error(
            path,
            8 + pos,
            format!("label {} is not a digit", bytes[8 + pos]),
        ));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

/// Reads an MNIST-style image/label file pair. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| idx_error(p, 0, e.to_string()));
    let (n, rows, cols, pixels) = parse_images(&read(images_path)?, images_path)?;
    let labels = parse_labels(&read(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(idx_error(
            labels_path,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    Dataset::new(pixels, [1, rows, cols], labels, 10, split)
}

/// File names of the standard MNIST distribution under `root`.
pub fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        root.join(format!("{prefix}-images-idx3-ubyte")),
        root.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(root, split);
    load_idx(&images, &labels, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_examples: usize,
    pub test_examples: usize,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    /// Pixel noise standard deviation around each class template.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

/// Class templates: one bright Gaussian blob per class at a seeded position.
fn templates(num_classes: usize, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let [c, h, w] = shape;
    let sigma = (h.min(w) as f64 / 5.0).max(0.75);
    (0..num_classes)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.0)).collect();
            let mut t = Vec::with_capacity(c * h * w);
            for gain in &gains {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        t.push((gain * (-d2 / (2.0 * sigma * sigma)).exp()) as f32);
                    }
                }
            }
            t
        })
        .collect()
}

/// `num_examples` images drawn around per-class blob templates, clamped to
/// `[0, 1]`. Labels cycle through the classes before shuffling.
pub fn synthetic(
    num_examples: usize,
    num_classes: usize,
    image_shape: [usize; 3],
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if num_examples == 0 || num_classes == 0 {
        return Err(Error::InvalidInput(
            "synthetic data needs positive sizes".into(),
        ));
    }
    let mut trng = seed::rng(seed, "synthetic-templates");
    let templates = templates(num_classes, image_shape, &mut trng);
    let label = match split {
        Split::Train => "synthetic-train",
        Split::Test => "synthetic-test",
    };
    let mut rng = seed::rng(seed, label);
    let mut labels: Vec<usize> = (0..num_examples).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(num_examples * image_shape.iter().product::<usize>());
    for &y in &labels {
        for &v in &templates[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            images.push((f64::from(v) + noise * z).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new(images, image_shape, labels, num_classes, split)
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        Ok((
            synthetic(
                self.train_examples,
                self.num_classes,
                self.image_shape,
                self.noise,
                seed,
                Split::Train,
            )?,
            synthetic(
                self.test_examples,
                self.num_classes,
                self.image_shape,
                self.noise,
                seed,
                Split::Test,
            )?,
        ))
    }
}
