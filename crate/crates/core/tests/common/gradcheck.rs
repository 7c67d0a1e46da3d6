//! Central-difference gradient checks shared by the autodiff tests and the
//! acceptance suite.

use plab::tensor::{Architecture, Graph, ModelState, NodeId, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct GradReport {
    pub instances: usize,
    pub coords: usize,
    pub failures: Vec<String>,
}

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const ABS: f64 = 1e-7;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS || diff <= REL * analytic.abs().max(numeric.abs())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so ReLU is differentiable under `H`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairwise distinct values (gaps of at least 0.05) so max-pool windows
/// have a unique winner under `H`.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .iter()
        .map(|&r| (r as f64 + rng.gen_range(0.0..0.5)) * 0.1 - 0.05 * n as f64)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One op under test: builds a scalar from the given leaves.
type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Reduces any batched node to a scalar through a fixed random linear
/// functional, so every output element carries a distinct weight.
fn project(g: &mut Graph, node: NodeId, weights: &Tensor) -> NodeId {
    let w = g.leaf(weights.clone(), false);
    let b = g.leaf(Tensor::zeros(&[1]), false);
    let d = g.dense(node, w, b).unwrap();
    g.sum(d)
}

fn projection_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let d: usize = shape[1..].iter().product();
    random_tensor(rng, &[d, 1])
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let root = build(&mut g, &ids);
    g.value(root).item()
}

/// Compares analytic gradients of every input against central differences
/// on up to `max_coords` random coordinates per input.
fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    build: &Build,
    max_coords: usize,
    what: &str,
    report: &mut GradReport,
) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids);
    g.backward(root).unwrap();
    let grads: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).unwrap().clone()).collect();
    for (k, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        coords.shuffle(rng);
        coords.truncate(max_coords);
        for &i in &coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * H);
            let analytic = grads[k].data()[i];
            if !close(analytic, numeric) {
                report.failures.push(format!(
                    "{what}: input {k} coordinate {i}: analytic {analytic} vs numeric {numeric}"
                ));
            }
            report.coords += 1;
        }
    }
}

/// Every graph op on random shapes, eight op instances per loop.
pub fn op_suite(seed: u64, loops: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for _ in 0..loops {
        let n = rng.gen_range(1..3);
        let h = rng.gen_range(2..6);
        let w = rng.gen_range(2..6);
        let ci = rng.gen_range(1..4);
        let co = rng.gen_range(1..4);

        // conv3x3
        let x = random_tensor(&mut rng, &[n, h, w, ci]);
        let k = random_tensor(&mut rng, &[3, 3, ci, co]);
        let b = random_tensor(&mut rng, &[co]);
        let proj = projection_for(&mut rng, &[n, h, w, co]);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.conv3x3(ids[0], ids[1], ids[2]).unwrap();
            project(g, y, &proj)
        };
        check(&mut rng, &[x, k, b], &build, 40, "conv3x3", &mut report);

        // relu
        let x = away_from_zero(&mut rng, &[n, h, w, ci]);
        let proj = projection_for(&mut rng, &[n, h, w, ci]);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.relu(ids[0]);
            project(g, y, &proj)
        };
        check(&mut rng, &[x], &build, 40, "relu", &mut report);

        // maxpool2
        let x = distinct(&mut rng, &[n, 2 * h, 2 * w + 1, ci]);
        let proj = projection_for(&mut rng, &[n, h, w, ci]);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.maxpool2(ids[0]).unwrap();
            project(g, y, &proj)
        };
        check(&mut rng, &[x], &build, 40, "maxpool2", &mut report);

        // dense (flattening a 4-d input)
        let x = random_tensor(&mut rng, &[n, h, w, ci]);
        let wt = random_tensor(&mut rng, &[h * w * ci, co]);
        let b = random_tensor(&mut rng, &[co]);
        let proj = projection_for(&mut rng, &[n, co]);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
            project(g, y, &proj)
        };
        check(&mut rng, &[x, wt, b], &build, 40, "dense", &mut report);

        // softmax cross-entropy
        let classes = rng.gen_range(2..6);
        let z = random_tensor(&mut rng, &[n + 1, classes])
            .reshape(vec![n + 1, classes])
            .unwrap();
        let labels: Vec<usize> = (0..=n).map(|_| rng.gen_range(0..classes)).collect();
        let z = Tensor::new(
            z.shape().to_vec(),
            z.data().iter().map(|v| 3.0 * v).collect(),
        )
        .unwrap();
        let build = move |g: &mut Graph, ids: &[NodeId]| g.softmax_xent(ids[0], &labels).unwrap();
        check(&mut rng, &[z], &build, 40, "softmax_xent", &mut report);

        // add, scale, sum
        let a = random_tensor(&mut rng, &[n, h, w]);
        let b = random_tensor(&mut rng, &[n, h, w]);
        let proj = projection_for(&mut rng, &[n, h, w]);
        let factor = rng.gen_range(-2.0..2.0);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.add(ids[0], ids[1]).unwrap();
            let t = g.scale(s, factor);
            project(g, t, &proj)
        };
        check(&mut rng, &[a, b], &build, 40, "add/scale", &mut report);

        let a = random_tensor(&mut rng, &[n, h]);
        let build = |g: &mut Graph, ids: &[NodeId]| g.sum(ids[0]);
        check(&mut rng, &[a], &build, 40, "sum", &mut report);

        // the same leaf used twice: gradients accumulate
        let a = random_tensor(&mut rng, &[n, w]);
        let proj = projection_for(&mut rng, &[n, w]);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let r = g.relu(ids[0]);
            let s = g.add(ids[0], r).unwrap();
            project(g, s, &proj)
        };
        let a = Tensor::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
                .collect(),
        )
        .unwrap();
        check(&mut rng, &[a], &build, 40, "fan-out", &mut report);

        report.instances += 8;
    }
    report
}

fn model_loss(model: &ModelState, x: &Tensor, labels: &[usize]) -> f64 {
    model.loss_and_grads(x, labels, false, false).unwrap().loss
}

/// Loss gradients of randomly initialised SmallCNNs with respect to inputs
/// and parameters.
pub fn model_suite(seed: u64, trials: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let arch = Architecture::small_cnn(4, 4, 2, 3);
        let model = ModelState::init(arch.clone(), trial).unwrap();
        let x = random_tensor(&mut rng, &[2, 4, 4, 2]);
        let labels = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
        let lg = model.loss_and_grads(&x, &labels, true, true).unwrap();
        let input_grad = lg.input_grad.unwrap();
        for _ in 0..10 {
            let i = rng.gen_range(0..x.len());
            let mut p = x.clone();
            p.data_mut()[i] += H;
            let mut m = x.clone();
            m.data_mut()[i] -= H;
            let numeric =
                (model_loss(&model, &p, &labels) - model_loss(&model, &m, &labels)) / (2.0 * H);
            if !close(input_grad.data()[i], numeric) {
                report.failures.push(format!(
                    "trial {trial} input {i}: {} vs {numeric}",
                    input_grad.data()[i]
                ));
            }
            report.coords += 1;
        }
        let grads = lg.param_grads.unwrap();
        for (t, g) in grads.iter().enumerate() {
            for _ in 0..5 {
                let i = rng.gen_range(0..g.len());
                let shift = |delta: f64| {
                    let mut params = model.params().to_vec();
                    params[t].data_mut()[i] += delta;
                    ModelState::from_params(arch.clone(), params).unwrap()
                };
                let numeric = (model_loss(&shift(H), &x, &labels)
                    - model_loss(&shift(-H), &x, &labels))
                    / (2.0 * H);
                if !close(g.data()[i], numeric) {
                    report.failures.push(format!(
                        "trial {trial} param {t}[{i}]: {} vs {numeric}",
                        g.data()[i]
                    ));
                }
                report.coords += 1;
            }
        }
        report.instances += 1;
    }
    report
}
