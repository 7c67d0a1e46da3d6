use super::{ModelState, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `theta - lr * grad` for every parameter tensor.
pub fn sgd_step(model: &ModelState, grads: &[Tensor], lr: f64) -> Result<ModelState> {
    if grads.len() != model.params().len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            model.params().len()
        )));
    }
    let mut next = model.clone();
    for (i, (p, g)) in next.params_mut().iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (v, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gv;
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Architecture;

    fn scalar_model(theta: f64) -> ModelState {
        // 1x1x1 input, one unit: weight [1,1] and bias [1].
        ModelState::from_params(
            Architecture::linear(1, 1, 1, 1),
            vec![
                Tensor::new(vec![1, 1], vec![theta]).unwrap(),
                Tensor::zeros(&[1]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_rate_is_bit_exact_noop() {
        let model = ModelState::init(Architecture::small_cnn(8, 8, 1, 3), 3).unwrap();
        let grads: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::full(p.shape(), 1.234))
            .collect();
        assert_eq!(sgd_step(&model, &grads, 0.0).unwrap(), model);
    }

    #[test]
    fn scalar_arithmetic() {
        let model = scalar_model(1.0);
        let grads = vec![
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::zeros(&[1]),
        ];
        let next = sgd_step(&model, &grads, 0.1).unwrap();
        assert!((next.params()[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(theta) = 3 (theta - 2.5)^2, minimizer 2.5.
        let mut model = scalar_model(-4.0);
        for _ in 0..200 {
            let t = model.params()[0].item();
            let grads = vec![
                Tensor::new(vec![1, 1], vec![6.0 * (t - 2.5)]).unwrap(),
                Tensor::zeros(&[1]),
            ];
            model = sgd_step(&model, &grads, 0.05).unwrap();
        }
        assert!((model.params()[0].item() - 2.5).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = scalar_model(1.0);
        assert!(sgd_step(&model, &[Tensor::zeros(&[2])], 0.1).is_err());
        assert!(sgd_step(&model, &[Tensor::zeros(&[1]), Tensor::zeros(&[1])], 0.1).is_err());
    }
}
