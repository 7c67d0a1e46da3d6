//! Chunked inference helpers shared by attacks, calibration and evaluation.

use crate::data::{images_to_tensor, DatasetSplit, Image};
use crate::error::{Error, Result};
use crate::tensor::ModelState;

/// Examples per forward pass when scoring whole splits.
pub const EVAL_CHUNK: usize = 128;

pub fn predict_images(model: &ModelState, images: &[Image]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        preds.extend(model.predict(&images_to_tensor(chunk)?)?);
    }
    Ok(preds)
}

pub fn predict_split(model: &ModelState, split: &DatasetSplit) -> Result<Vec<usize>> {
    let images: Vec<Image> = split.examples.iter().map(|e| e.image.clone()).collect();
    predict_images(model, &images)
}

/// Per-example correctness indicators.
pub fn correct(preds: &[usize], labels: &[usize]) -> Vec<bool> {
    preds.iter().zip(labels).map(|(p, l)| p == l).collect()
}

pub fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    correct(preds, labels).iter().filter(|&&c| c).count() as f64 / labels.len() as f64
}

pub fn accuracy(model: &ModelState, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.clone()));
    }
    Ok(accuracy_of(&predict_split(model, split)?, &split.labels()))
}
