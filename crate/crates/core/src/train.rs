//! Training regimes over minibatch SGD.
//!
//! Every regime computes the clean cross-entropy `L_s` on each minibatch.
//! Once `epoch > delay` the adversarial and natural regimes also build a
//! perturbed copy of the batch, evaluate `L_r` on it and descend on
//! `(L_s + L_r) / 2`. Epochs are numbered from 1.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::data::{images_to_tensor, tensor_to_images, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::perturb::{perturb_all, PerturbationSpec};
use crate::rng::{derive_seed, stream};
use crate::tensor::{sgd_step, Graph, ModelState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    Adversarial { attack: AttackConfig },
    Natural { perturbation: PerturbationSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Clean-only warm-up epochs; the robust loss is active once `epoch > delay`.
    pub delay: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn standard(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::Standard,
            epochs,
            delay: 1.min(epochs.saturating_sub(1)),
            lr,
            batch_size,
            seed,
        }
    }

    pub fn with_mode(&self, mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be at least 1".into()));
        }
        if self.delay >= self.epochs {
            return Err(Error::InvalidParam(format!(
                "delay {} must be < epochs {}",
                self.delay, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        if let TrainMode::Adversarial { attack } = &self.mode {
            attack.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_standard: f64,
    pub loss_robust: Option<f64>,
    pub loss_combined: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str =
        "epoch,loss_standard,loss_robust,loss_combined,train_accuracy,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.loss_standard,
                opt(e.loss_robust),
                e.loss_combined,
                e.train_accuracy,
                opt(e.val_accuracy)
            ));
        }
        out
    }
}

/// Builds the robust copy of one minibatch.
fn perturbed_batch(
    model: &ModelState,
    cfg: &TrainConfig,
    epoch: usize,
    batch_no: usize,
    images: &Tensor,
    labels: &[usize],
    indices: &[usize],
) -> Result<Tensor> {
    match &cfg.mode {
        TrainMode::Standard => unreachable!("standard mode has no robust batch"),
        TrainMode::Adversarial { attack } => {
            let attack = AttackConfig {
                seed: derive_seed(&[
                    stream::PGD,
                    cfg.seed,
                    attack.seed,
                    epoch as u64,
                    batch_no as u64,
                ]),
                ..attack.clone()
            };
            pgd(model, images, labels, &attack)
        }
        TrainMode::Natural { perturbation } => {
            // Fresh draws every epoch; disjoint from evaluation streams.
            let spec = perturbation.reseeded(derive_seed(&[
                stream::TRAIN_PERTURB,
                cfg.seed,
                perturbation.seed,
                epoch as u64,
            ]));
            let clean = tensor_to_images(images)?;
            images_to_tensor(&perturb_all(&clean, &spec, indices)?)
        }
    }
}

/// Trains `model` on `train` according to `cfg`. `val`, when given, is scored
/// after every epoch; it never influences the parameters.
pub fn train(
    model: &ModelState,
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit(train.name.clone()));
    }
    let mut model = model.clone();
    let mut trace = TrainTrace::default();
    for epoch in 1..=cfg.epochs {
        let robust = !matches!(cfg.mode, TrainMode::Standard) && epoch > cfg.delay;
        let batches =
            train.batches(cfg.batch_size, Some(derive_seed(&[cfg.seed, epoch as u64])))?;
        // Per-example losses indexed by dataset position, summed in that
        // order so epoch means do not depend on the shuffle.
        let mut per_s = vec![0.0; train.len()];
        let mut per_r = vec![0.0; train.len()];
        let mut hits = 0usize;
        for (batch_no, batch) in batches.iter().enumerate() {
            let robust_input = if robust {
                Some(perturbed_batch(
                    &model,
                    cfg,
                    epoch,
                    batch_no,
                    &batch.images,
                    &batch.labels,
                    &batch.indices,
                )?)
            } else {
                None
            };

            let mut graph = Graph::new();
            let params = model.param_leaves(&mut graph, true);
            let input = graph.leaf(batch.images.clone(), false);
            let logits = model.build(&mut graph, input, &params)?;
            let loss_s = graph.softmax_xent(logits, &batch.labels)?;
            let (root, robust_logits) = match robust_input {
                Some(perturbed) => {
                    let pin = graph.leaf(perturbed, false);
                    let plogits = model.build(&mut graph, pin, &params)?;
                    let loss_r = graph.softmax_xent(plogits, &batch.labels)?;
                    let sum = graph.add(loss_s, loss_r)?;
                    (graph.scale(sum, 0.5), Some(plogits))
                }
                None => (loss_s, None),
            };
            if !graph.value(root).item().is_finite() {
                return Err(Error::Diverged { epoch });
            }
            for (&i, l) in batch
                .indices
                .iter()
                .zip(per_example_xent(graph.value(logits), &batch.labels))
            {
                per_s[i] = l;
            }
            if let Some(plogits) = robust_logits {
                for (&i, l) in batch
                    .indices
                    .iter()
                    .zip(per_example_xent(graph.value(plogits), &batch.labels))
                {
                    per_r[i] = l;
                }
            }
            hits += graph
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();

            graph.backward(root)?;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&p| graph.take_grad(p).expect("parameter gradient"))
                .collect();
            model = sgd_step(&model, &grads, cfg.lr)?;
        }
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let n = train.len() as f64;
        let loss_standard = per_s.iter().sum::<f64>() / n;
        let loss_robust = robust.then(|| per_r.iter().sum::<f64>() / n);
        trace.epochs.push(EpochStats {
            epoch,
            loss_standard,
            loss_robust,
            loss_combined: loss_robust.map_or(loss_standard, |r| 0.5 * (loss_standard + r)),
            train_accuracy: hits as f64 / n,
            val_accuracy: match val {
                Some(v) if !v.is_empty() => Some(accuracy(&model, v)?),
                _ => None,
            },
        });
    }
    Ok((model, trace))
}

fn per_example_xent(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            max + sum.ln() - row[label]
        })
        .collect()
}

fn require(cfg: &TrainConfig, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!(
            "{name} called with mode {:?}",
            cfg.mode
        )))
    }
}

pub fn train_standard(
    model: &ModelState,
    split: &DatasetSplit,
    val: Option<&DatasetSplit>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    require(
        cfg,
        matches!(cfg.mode, TrainMode::Standard),
        "train_standard",
    )?;
    train(model, split, val, cfg)
}

pub fn train_adversarial(
    model: &ModelState,
    split: &DatasetSplit,
    val: Option<&DatasetSplit>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    require(
        cfg,
        matches!(cfg.mode, TrainMode::Adversarial { .. }),
        "train_adversarial",
    )?;
    train(model, split, val, cfg)
}

pub fn train_natural(
    model: &ModelState,
    split: &DatasetSplit,
    val: Option<&DatasetSplit>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    require(
        cfg,
        matches!(cfg.mode, TrainMode::Natural { .. }),
        "train_natural",
    )?;
    train(model, split, val, cfg)
}
