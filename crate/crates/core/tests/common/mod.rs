#![allow(dead_code)]

pub mod gradcheck;

use plab::data::{BlobConfig, DatasetManifest, DatasetSplit};
use plab::tensor::{Architecture, ModelState, Tensor};
use plab::train::{train, TrainConfig};

pub struct Desk {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub model: ModelState,
}

/// Small blobs problem with a briefly trained SmallCNN.
pub fn trained_blobs(per_class: usize, epochs: usize) -> Desk {
    trained_on(
        BlobConfig {
            per_class,
            ..BlobConfig::default()
        },
        epochs,
    )
}

pub fn trained_on(cfg: BlobConfig, epochs: usize) -> Desk {
    let (train_split, val, test) = DatasetManifest::blobs(cfg).load().unwrap();
    let [h, w, c] = train_split.image_shape().unwrap();
    let init = ModelState::init(Architecture::small_cnn(h, w, c, train_split.classes), 11).unwrap();
    let (model, _) = train(
        &init,
        &train_split,
        None,
        &TrainConfig::standard(epochs, 0.05, 32, 3),
    )
    .unwrap();
    Desk {
        train: train_split,
        val,
        test,
        model,
    }
}

/// Two-class linear model with logits `x . W + b`.
pub fn linear_binary(
    w0: &[f64],
    w1: &[f64],
    b: [f64; 2],
    h: usize,
    w: usize,
    c: usize,
) -> ModelState {
    let d = w0.len();
    let mut weights = vec![0.0; d * 2];
    for i in 0..d {
        weights[i * 2] = w0[i];
        weights[i * 2 + 1] = w1[i];
    }
    ModelState::from_params(
        Architecture::linear(h, w, c, 2),
        vec![
            Tensor::new(vec![d, 2], weights).unwrap(),
            Tensor::new(vec![2], b.to_vec()).unwrap(),
        ],
    )
    .unwrap()
}
