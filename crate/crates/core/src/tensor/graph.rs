use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// A single-use computation tape. Nodes are appended in evaluation order, so
/// the node list is already a topological order and `backward` walks it in
/// reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Adds a leaf. Gradients are only ever computed along paths that reach a
    /// leaf created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to `id`, if the node
    /// was on a differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.grad.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes.get_mut(id.0).and_then(|n| n.grad.take())
    }

    /// 3x3 convolution, stride 1, zero padding 1. Input `[N,H,W,Cin]`,
    /// kernel `[3,3,Cin,Cout]`, bias `[Cout]`.
    pub fn conv3x3(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        if x.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "conv3x3 expects a [N,H,W,C] input, got {:?}",
                x.shape()
            )));
        }
        let cin = x.shape()[3];
        if k.shape() != [3, 3, cin, k.shape().get(3).copied().unwrap_or(0)] {
            return Err(Error::Shape(format!(
                "conv3x3 kernel {:?} does not fit input channels {}",
                k.shape(),
                cin
            )));
        }
        let cout = k.shape()[3];
        if b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv3x3 bias {:?} does not match {} filters",
                b.shape(),
                cout
            )));
        }
        let out = conv3x3_forward(x, k, b);
        let needs = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            },
            out,
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let needs = self.needs(&[input]);
        self.push(Op::Relu(input), out, needs)
    }

    /// 2x2 max pooling with stride 2 over `[N,H,W,C]`; odd trailing rows or
    /// columns are dropped.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "maxpool2 expects a [N,H,W,C] input, got {:?}",
                x.shape()
            )));
        }
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "maxpool2 input {:?} is too small",
                x.shape()
            )));
        }
        let xd = x.data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((img * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        let o = ((img * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let out = Tensor {
            shape: vec![n, oh, ow, c],
            data: out,
        };
        let needs = self.needs(&[input]);
        Ok(self.push(Op::MaxPool2 { input, argmax }, out, needs))
    }

    /// Fully connected layer. Every dimension after the first is flattened,
    /// weight is `[D, O]`, bias `[O]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        if x.shape().is_empty() {
            return Err(Error::Shape("dense expects a batched input".into()));
        }
        let n = x.shape()[0];
        let d: usize = x.shape()[1..].iter().product();
        if wt.shape().len() != 2 || wt.shape()[0] != d {
            return Err(Error::Shape(format!(
                "dense weight {:?} does not fit {} input features",
                wt.shape(),
                d
            )));
        }
        let o = wt.shape()[1];
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "dense bias {:?} does not match {} units",
                b.shape(),
                o
            )));
        }
        let (xd, wd, bd) = (x.data(), wt.data(), b.data());
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let row = &mut out[i * o..(i + 1) * o];
            row.copy_from_slice(bd);
            for (j, &v) in xd[i * d..(i + 1) * d].iter().enumerate() {
                for (r, wv) in row.iter_mut().zip(&wd[j * o..(j + 1) * o]) {
                    *r += v * wv;
                }
            }
        }
        let out = Tensor {
            shape: vec![n, o],
            data: out,
        };
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            out,
            needs,
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "softmax_xent logits {:?} vs {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let (n, k) = (z.shape()[0], z.shape()[1]);
        if n == 0 {
            return Err(Error::Shape("softmax_xent on an empty batch".into()));
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            total += log_z - row[label];
        }
        let out = Tensor::scalar(total / n as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, needs))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let needs = self.needs(&[a]);
        self.push(Op::Scale(a, factor), out, needs)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(total), needs)
    }

    /// Reverse pass from a scalar root. Every node reachable from the root
    /// along a differentiable path receives its gradient exactly once.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let Some(root_node) = self.nodes.get(root.0) else {
            return Err(Error::BackwardBeforeForward(root.0));
        };
        if root_node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {:?}",
                root_node.value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(upstream) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &upstream);
            self.nodes[id].grad = Some(upstream);
            for (target, g) in contributions {
                debug_assert_eq!(g.shape(), self.nodes[target.0].value.shape());
                match &mut self.nodes[target.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[id];
        let wants = |n: NodeId| self.nodes[n.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => {
                let (dx, dk, db) = conv3x3_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                if wants(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::Relu(input) => {
                if wants(*input) {
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    out.push((
                        *input,
                        Tensor {
                            shape: x.shape().to_vec(),
                            data,
                        },
                    ));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants(*input) {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx.data[src] += gv;
                    }
                    out.push((*input, dx));
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let n = x.shape()[0];
                let d = wt.shape()[0];
                let o = wt.shape()[1];
                let (xd, wd, gd) = (x.data(), wt.data(), g.data());
                if wants(*input) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let grow = &gd[i * o..(i + 1) * o];
                        for j in 0..d {
                            dx[i * d + j] = wd[j * o..(j + 1) * o]
                                .iter()
                                .zip(grow)
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    out.push((
                        *input,
                        Tensor {
                            shape: x.shape().to_vec(),
                            data: dx,
                        },
                    ));
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; d * o];
                    for i in 0..n {
                        let grow = &gd[i * o..(i + 1) * o];
                        for j in 0..d {
                            let v = xd[i * d + j];
                            for (acc, gv) in dw[j * o..(j + 1) * o].iter_mut().zip(grow) {
                                *acc += v * gv;
                            }
                        }
                    }
                    out.push((
                        *weight,
                        Tensor {
                            shape: vec![d, o],
                            data: dw,
                        },
                    ));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for (acc, gv) in db.iter_mut().zip(&gd[i * o..(i + 1) * o]) {
                            *acc += gv;
                        }
                    }
                    out.push((
                        *bias,
                        Tensor {
                            shape: vec![o],
                            data: db,
                        },
                    ));
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let coef = g.item() / n as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * coef).collect();
                    for (i, &label) in labels.iter().enumerate() {
                        dz[i * k + label] -= coef;
                    }
                    out.push((*logits, Tensor { shape, data: dz }));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale(a, factor) => {
                if wants(*a) {
                    let data = g.data().iter().map(|v| v * factor).collect();
                    out.push((
                        *a,
                        Tensor {
                            shape: g.shape().to_vec(),
                            data,
                        },
                    ));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    out.push((*a, Tensor::full(self.value(*a).shape(), g.item())));
                }
            }
        }
        out
    }
}

fn conv3x3_forward(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (n, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = k.shape()[3];
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let mut out = vec![0.0; n * h * w * co];
    for img in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let obase = ((img * h + y) * w + xx) * co;
                let o = &mut out[obase..obase + co];
                o.copy_from_slice(bd);
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let ix = xx + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let ix = ix - 1;
                        let ibase = ((img * h + iy) * w + ix) * ci;
                        let kbase = (ky * 3 + kx) * ci * co;
                        for c in 0..ci {
                            let v = xd[ibase + c];
                            let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                            for (acc, kv) in o.iter_mut().zip(krow) {
                                *acc += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![n, h, w, co],
        data: out,
    }
}

fn conv3x3_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = k.shape()[3];
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut dx = if want_dx {
        vec![0.0; xd.len()]
    } else {
        Vec::new()
    };
    let mut dk = if want_dk {
        vec![0.0; kd.len()]
    } else {
        Vec::new()
    };
    let mut db = vec![0.0; co];
    for img in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let gbase = ((img * h + y) * w + xx) * co;
                let grow = &gd[gbase..gbase + co];
                for (acc, gv) in db.iter_mut().zip(grow) {
                    *acc += gv;
                }
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let ix = xx + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let ix = ix - 1;
                        let ibase = ((img * h + iy) * w + ix) * ci;
                        let kbase = (ky * 3 + kx) * ci * co;
                        for c in 0..ci {
                            let off = kbase + c * co;
                            if want_dk {
                                let v = xd[ibase + c];
                                for (acc, gv) in dk[off..off + co].iter_mut().zip(grow) {
                                    *acc += v * gv;
                                }
                            }
                            if want_dx {
                                let s: f64 =
                                    kd[off..off + co].iter().zip(grow).map(|(a, b)| a * b).sum();
                                dx[ibase + c] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = want_dx.then(|| Tensor {
        shape: x.shape().to_vec(),
        data: dx,
    });
    let dk = want_dk.then(|| Tensor {
        shape: k.shape().to_vec(),
        data: dk,
    });
    (
        dx,
        dk,
        Tensor {
            shape: vec![co],
            data: db,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap(),
            true,
        );
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_on_missing_root_is_an_error() {
        let mut g = Graph::new();
        assert!(matches!(
            g.backward(NodeId(0)),
            Err(Error::BackwardBeforeForward(0))
        ));
    }

    #[test]
    fn xent_of_equal_logits_is_ln_classes() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::full(&[3, 10], 0.7), false);
        let l = g.softmax_xent(z, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot_over_n() {
        let logits = vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.5];
        let labels = [2usize, 0];
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![2, 3], logits.clone()).unwrap(), true);
        let l = g.softmax_xent(z, &labels).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap().data();
        for i in 0..2 {
            let row = &logits[i * 3..i * 3 + 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let p = row[j].exp() / denom;
                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                assert!((grad[i * 3 + j] - (p - onehot) / 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn xent_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[1, 3]), false);
        assert!(matches!(
            g.softmax_xent(z, &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn xent_vanishes_with_growing_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut g = Graph::new();
            let z = g.leaf(
                Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap(),
                false,
            );
            let node = g.softmax_xent(z, &[0]).unwrap();
            let l = g.value(node).item();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn no_gradient_without_requires_grad() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2], 1.0), false);
        let b = g.leaf(Tensor::full(&[2], 2.0), true);
        let s = g.add(a, b).unwrap();
        let s = g.sum(s);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
    }
}
