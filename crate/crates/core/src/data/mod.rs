//! Datasets: the image type, labelled splits, loaders for IDX and CIFAR-10
//! binaries, the synthetic blob generator, batching and image export.

mod blobs;
mod cifar;
mod export;
mod idx;
mod manifest;

pub use blobs::{synth_blobs, BlobConfig};
pub use cifar::{load_cifar10_binary, CIFAR_RECORD_LEN};
pub use export::{read_image, read_png, read_ppm, write_image, write_png, write_ppm};
pub use idx::{load_idx, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use manifest::{DatasetManifest, DatasetSource, Splits};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// `H x W x C` image with intensities in `[0, 1]`, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Largest absolute per-value difference.
    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean absolute per-value difference.
    pub fn mean_l1_distance(&self, other: &Image) -> f64 {
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        total / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledExample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub examples: Vec<LabelledExample>,
    pub classes: usize,
}

/// One minibatch: stacked images, labels and the dataset indices they came
/// from (used to key per-image perturbation draws).
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(
        name: impl Into<String>,
        examples: Vec<LabelledExample>,
        classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if let Some(first) = examples.first() {
            let shape = first.image.shape();
            for (i, ex) in examples.iter().enumerate() {
                if ex.image.shape() != shape {
                    return Err(Error::Shape(format!(
                        "{name}: example {i} has shape {:?}, expected {:?}",
                        ex.image.shape(),
                        shape
                    )));
                }
                if ex.label >= classes {
                    return Err(Error::LabelOutOfRange {
                        label: ex.label,
                        classes,
                    });
                }
            }
        }
        Ok(DatasetSplit {
            name,
            examples,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.examples.first().map(|e| e.image.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }

    /// SHA-256 over shapes, exact intensity bits and labels, in order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.classes as u64).to_le_bytes());
        hasher.update((self.examples.len() as u64).to_le_bytes());
        for e in &self.examples {
            for d in e.image.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in e.image.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
            hasher.update((e.label as u64).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Stacks the examples at `indices` into a `[N, H, W, C]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let images: Vec<Image> = indices
            .iter()
            .map(|&i| self.examples[i].image.clone())
            .collect();
        let labels = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok(Batch {
            images: images_to_tensor(&images)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    /// One epoch of minibatches. `shuffle_seed = None` keeps dataset order;
    /// the last batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptySplit(self.name.clone()));
        }
        let order = self.epoch_order(shuffle_seed);
        order.chunks(batch_size).map(|c| self.gather(c)).collect()
    }

    pub fn epoch_order(&self, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut rng_for(&[stream::SHUFFLE, seed]));
        }
        order
    }

    /// Class-stratified selection of `per_class` examples (or all of a class
    /// if it has fewer), keeping dataset order within the result.
    pub fn subsample_stratified(&self, per_class: usize, seed: u64) -> DatasetSplit {
        let mut keep = Vec::new();
        for class in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.examples[i].label == class)
                .collect();
            members.shuffle(&mut rng_for(&[stream::SPLIT, seed, class as u64, 1]));
            keep.extend(members.into_iter().take(per_class));
        }
        keep.sort_unstable();
        DatasetSplit {
            name: format!("{}-sub", self.name),
            examples: keep.into_iter().map(|i| self.examples[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// Disjoint class-stratified train/val/test split. Each fraction is
    /// applied per class; test takes the remainder.
    pub fn split_stratified(
        &self,
        train_fraction: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
        if !(0.0..=1.0).contains(&train_fraction)
            || !(0.0..=1.0).contains(&val_fraction)
            || train_fraction + val_fraction > 1.0
        {
            return Err(Error::InvalidParam(format!(
                "split fractions {train_fraction}/{val_fraction} are not a partition"
            )));
        }
        let mut parts: [Vec<usize>; 3] = Default::default();
        for class in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.examples[i].label == class)
                .collect();
            members.shuffle(&mut rng_for(&[stream::SPLIT, seed, class as u64]));
            let n = members.len();
            let n_train = (n as f64 * train_fraction).round() as usize;
            let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train);
            parts[0].extend_from_slice(&members[..n_train]);
            parts[1].extend_from_slice(&members[n_train..n_train + n_val]);
            parts[2].extend_from_slice(&members[n_train + n_val..]);
        }
        let make = |mut idx: Vec<usize>, suffix: &str| {
            idx.sort_unstable();
            DatasetSplit {
                name: format!("{}-{suffix}", self.name),
                examples: idx.into_iter().map(|i| self.examples[i].clone()).collect(),
                classes: self.classes,
            }
        };
        let [a, b, c] = parts;
        Ok((make(a, "train"), make(b, "val"), make(c, "test")))
    }
}

pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptySplit("empty image list".into()))?;
    let mut data = Vec::with_capacity(first.data.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "mixed image shapes {:?} and {:?}",
                first.shape(),
                img.shape()
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(
        vec![images.len(), first.height, first.width, first.channels],
        data,
    )
}

pub fn tensor_to_images(batch: &Tensor) -> Result<Vec<Image>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [N,H,W,C], got {s:?}")));
    }
    Ok((0..s[0])
        .map(|i| Image {
            height: s[1],
            width: s[2],
            channels: s[3],
            data: batch.row(i).to_vec(),
        })
        .collect())
}
