//! l-infinity iterative gradient-sign attacks. BIM starts from the clean
//! input; PGD starts from a uniform point in the epsilon ball. Both project
//! onto the ball and the unit box after every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, tensor_to_images, DatasetSplit, Image};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_of, predict_images, EVAL_CHUNK};
use crate::rng::{rng_for, stream};
use crate::tensor::{ModelState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-infinity budget in intensity units.
    pub epsilon: f64,
    /// Per-step size; `None` means `2.5 * epsilon / steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn bim(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size: None,
            steps,
            random_start: false,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        AttackConfig {
            epsilon,
            step_size: None,
            steps,
            random_start: true,
            seed,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..self.clone()
        }
    }

    pub fn effective_step_size(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None if self.steps == 0 => 0.0,
            None => 2.5 * self.epsilon / self.steps as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "attack epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.effective_step_size() > 0.0) {
            return Err(Error::InvalidParam("attack step size must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy after the start point and after each step.
#[derive(Debug, Clone, Default)]
pub struct AttackTrace {
    pub losses: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(batch: &Tensor) -> Result<()> {
    if batch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParam("attack input outside [0, 1]".into()));
    }
    Ok(())
}

fn run(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mut trace: Option<&mut AttackTrace>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(batch)?;
    if cfg.epsilon == 0.0 {
        return Ok(batch.clone());
    }
    let eps = cfg.epsilon;
    let step = cfg.effective_step_size();
    let clean = batch.data();
    let lo: Vec<f64> = clean.iter().map(|x| (x - eps).max(0.0)).collect();
    let hi: Vec<f64> = clean.iter().map(|x| (x + eps).min(1.0)).collect();

    let mut adv = batch.clone();
    if cfg.random_start {
        let mut rng = rng_for(&[stream::PGD, cfg.seed]);
        for (i, v) in adv.data_mut().iter_mut().enumerate() {
            *v = (*v + rng.gen_range(-eps..=eps)).clamp(lo[i], hi[i]);
        }
    }
    for k in 0..=cfg.steps {
        if k == cfg.steps && trace.is_none() {
            break;
        }
        let lg = model.loss_and_grads(&adv, labels, false, k < cfg.steps)?;
        if let Some(t) = trace.as_deref_mut() {
            t.losses.push(lg.loss);
        }
        if k == cfg.steps {
            break;
        }
        let grad = lg.input_grad.expect("input gradient requested");
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "input gradient at attack step {k}"
            )));
        }
        for (i, (v, g)) in adv.data_mut().iter_mut().zip(grad.data()).enumerate() {
            *v = (*v + step * sign(*g)).clamp(lo[i], hi[i]);
        }
    }
    Ok(adv)
}

/// Basic iterative method: `steps` signed-gradient ascent steps on the
/// cross-entropy of the true labels from the clean input.
pub fn bim(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let cfg = AttackConfig {
        random_start: false,
        ..cfg.clone()
    };
    run(model, batch, labels, &cfg, None)
}

/// BIM from a uniform random start inside the epsilon ball.
pub fn pgd(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let cfg = AttackConfig {
        random_start: true,
        ..cfg.clone()
    };
    run(model, batch, labels, &cfg, None)
}

/// Runs the attack as configured (random start per `cfg.random_start`) and
/// records the loss after every iterate.
pub fn attack_with_trace(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackTrace)> {
    let mut trace = AttackTrace::default();
    let adv = run(model, batch, labels, cfg, Some(&mut trace))?;
    Ok((adv, trace))
}

pub fn attack(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    run(model, batch, labels, cfg, None)
}

/// Attacks a whole split in chunks. Chunk `j` uses seed `(cfg.seed, j)` so
/// the result is independent of how the caller iterates.
pub fn attack_split(
    model: &ModelState,
    split: &DatasetSplit,
    cfg: &AttackConfig,
) -> Result<Vec<Image>> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.clone()));
    }
    let mut out = Vec::with_capacity(split.len());
    for (j, chunk) in split.examples.chunks(EVAL_CHUNK).enumerate() {
        let images: Vec<Image> = chunk.iter().map(|e| e.image.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let chunk_cfg = AttackConfig {
            seed: crate::rng::derive_seed(&[cfg.seed, j as u64]),
            ..cfg.clone()
        };
        let adv = attack(model, &images_to_tensor(&images)?, &labels, &chunk_cfg)?;
        out.extend(tensor_to_images(&adv)?);
    }
    Ok(out)
}

/// `accuracy(clean) - accuracy(attacked)` over the split.
pub fn attack_drop(model: &ModelState, split: &DatasetSplit, cfg: &AttackConfig) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.clone()));
    }
    let labels = split.labels();
    let clean: Vec<Image> = split.examples.iter().map(|e| e.image.clone()).collect();
    let clean_acc = accuracy_of(&predict_images(model, &clean)?, &labels);
    if cfg.epsilon == 0.0 {
        return Ok(0.0);
    }
    let adv = attack_split(model, split, cfg)?;
    let adv_acc = accuracy_of(&predict_images(model, &adv)?, &labels);
    Ok(clean_acc - adv_acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Architecture;

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(&[seed]);
        let data = (0..n * 8 * 8 * 3)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::new(vec![n, 8, 8, 3], data).unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let model = ModelState::init(Architecture::small_cnn(8, 8, 3, 3), 1).unwrap();
        let batch = random_batch(3, 2);
        for cfg in [AttackConfig::bim(0.0, 10), AttackConfig::pgd(0.0, 10, 4)] {
            assert_eq!(attack(&model, &batch, &[0, 1, 2], &cfg).unwrap(), batch);
        }
    }

    #[test]
    fn linf_bound_and_box_hold() {
        let model = ModelState::init(Architecture::small_cnn(8, 8, 3, 3), 1).unwrap();
        let batch = random_batch(4, 3);
        for cfg in [AttackConfig::bim(0.03, 7), AttackConfig::pgd(0.05, 3, 9)] {
            let adv = attack(&model, &batch, &[0, 1, 2, 0], &cfg).unwrap();
            for (a, x) in adv.data().iter().zip(batch.data()) {
                assert!((a - x).abs() <= cfg.epsilon + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn single_step_is_signed_gradient() {
        let model = ModelState::init(Architecture::small_cnn(8, 8, 3, 3), 5).unwrap();
        let batch = random_batch(2, 6);
        let labels = [2, 1];
        let cfg = AttackConfig {
            step_size: Some(0.02),
            ..AttackConfig::bim(0.02, 1)
        };
        let adv = bim(&model, &batch, &labels, &cfg).unwrap();
        let g = model
            .loss_and_grads(&batch, &labels, false, true)
            .unwrap()
            .input_grad
            .unwrap();
        for ((a, x), gv) in adv.data().iter().zip(batch.data()).zip(g.data()) {
            let expected = (x + 0.02 * sign(*gv)).clamp(0.0, 1.0);
            assert_eq!(*a, expected);
        }
    }

    #[test]
    fn pgd_is_seeded() {
        let model = ModelState::init(Architecture::small_cnn(8, 8, 3, 2), 5).unwrap();
        let batch = random_batch(2, 7);
        let a = pgd(&model, &batch, &[0, 1], &AttackConfig::pgd(0.05, 3, 11)).unwrap();
        let b = pgd(&model, &batch, &[0, 1], &AttackConfig::pgd(0.05, 3, 11)).unwrap();
        let c = pgd(&model, &batch, &[0, 1], &AttackConfig::pgd(0.05, 3, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn default_step_size() {
        assert!((AttackConfig::bim(0.04, 10).effective_step_size() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_budget() {
        let model = ModelState::init(Architecture::small_cnn(8, 8, 3, 2), 5).unwrap();
        let batch = random_batch(1, 7);
        assert!(bim(&model, &batch, &[0], &AttackConfig::bim(-0.1, 3)).is_err());
    }
}
