use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"PLAB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv3x3 { filters: usize },
    Relu,
    MaxPool2,
    Dense { units: usize },
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv3x3 { .. } => "conv3x3",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Dense { .. } => "dense",
        }
    }

    fn code(&self) -> (u8, u32) {
        match *self {
            Layer::Conv3x3 { filters } => (1, filters as u32),
            Layer::Relu => (2, 0),
            Layer::MaxPool2 => (3, 0),
            Layer::Dense { units } => (4, units as u32),
        }
    }

    fn from_code(code: u8, size: u32) -> Option<Layer> {
        Some(match code {
            1 => Layer::Conv3x3 {
                filters: size as usize,
            },
            2 => Layer::Relu,
            3 => Layer::MaxPool2,
            4 => Layer::Dense {
                units: size as usize,
            },
            _ => return None,
        })
    }
}

/// Input geometry plus an ordered layer list. The last layer must be dense;
/// its width is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// conv3x3(16)-ReLU-maxpool2-conv3x3(32)-ReLU-maxpool2-dense(classes).
    pub fn small_cnn(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Architecture {
            input: [height, width, channels],
            layers: vec![
                Layer::Conv3x3 { filters: 16 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv3x3 { filters: 32 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Dense { units: classes },
            ],
        }
    }

    /// A single dense layer on the flattened image.
    pub fn linear(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Architecture {
            input: [height, width, channels],
            layers: vec![Layer::Dense { units: classes }],
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Shapes of every parameter tensor in declaration order, validating the
    /// layer stack along the way.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [mut h, mut w, mut c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidParam(format!(
                "input shape {:?} has a zero dimension",
                self.input
            )));
        }
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |detail: String| Error::Layer {
                index,
                kind: layer.kind(),
                detail,
            };
            match *layer {
                Layer::Conv3x3 { filters } => {
                    if flat.is_some() {
                        return Err(fail("convolution after a dense layer".into()));
                    }
                    if filters == 0 {
                        return Err(fail("zero filters".into()));
                    }
                    shapes.push(vec![3, 3, c, filters]);
                    shapes.push(vec![filters]);
                    c = filters;
                }
                Layer::Relu => {}
                Layer::MaxPool2 => {
                    if flat.is_some() {
                        return Err(fail("pooling after a dense layer".into()));
                    }
                    if h < 2 || w < 2 {
                        return Err(fail(format!("spatial size {h}x{w} too small to pool")));
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Dense { units } => {
                    if units == 0 {
                        return Err(fail("zero units".into()));
                    }
                    let d = flat.unwrap_or(h * w * c);
                    shapes.push(vec![d, units]);
                    shapes.push(vec![units]);
                    flat = Some(units);
                }
            }
        }
        if !matches!(self.layers.last(), Some(Layer::Dense { .. })) {
            return Err(Error::InvalidParam(
                "architecture must end with a dense layer".into(),
            ));
        }
        Ok(shapes)
    }
}

/// Classifier parameters. The parameter list is fixed by the architecture at
/// construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Architecture,
    params: Vec<Tensor>,
}

pub struct LossAndGrads {
    pub loss: f64,
    pub logits: Tensor,
    pub param_grads: Option<Vec<Tensor>>,
    pub input_grad: Option<Tensor>,
}

impl ModelState {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let params = arch
            .param_shapes()?
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Ok(ModelState { arch, params })
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()?
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor {
                    shape: shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(ModelState { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(ModelState { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Adds the parameters to `graph` as leaves.
    pub fn param_leaves(&self, graph: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.clone(), requires_grad))
            .collect()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(Error::Layer {
                index: 0,
                kind: "input",
                detail: format!(
                    "batch shape {:?} does not match [N, {}, {}, {}]",
                    shape, self.arch.input[0], self.arch.input[1], self.arch.input[2]
                ),
            });
        }
        Ok(())
    }

    /// Builds the forward pass on `graph` and returns the logits node.
    pub fn build(&self, graph: &mut Graph, input: NodeId, params: &[NodeId]) -> Result<NodeId> {
        self.check_batch(graph.value(input).shape())?;
        let mut cur = input;
        let mut p = params.iter();
        for (index, layer) in self.arch.layers.iter().enumerate() {
            let wrap = |e: Error| match e {
                Error::Shape(detail) => Error::Layer {
                    index,
                    kind: layer.kind(),
                    detail,
                },
                other => other,
            };
            let mut next_param = || {
                p.next().copied().ok_or(Error::Layer {
                    index,
                    kind: layer.kind(),
                    detail: "missing parameter node".into(),
                })
            };
            cur = match layer {
                Layer::Conv3x3 { .. } => {
                    let (k, b) = (next_param()?, next_param()?);
                    graph.conv3x3(cur, k, b).map_err(wrap)?
                }
                Layer::Relu => graph.relu(cur),
                Layer::MaxPool2 => graph.maxpool2(cur).map_err(wrap)?,
                Layer::Dense { .. } => {
                    let (w, b) = (next_param()?, next_param()?);
                    graph.dense(cur, w, b).map_err(wrap)?
                }
            };
        }
        Ok(cur)
    }

    /// Logits `[N, classes]` for a `[N, H, W, C]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone(), false);
        let params = self.param_leaves(&mut graph, false);
        let out = self.build(&mut graph, input, &params)?;
        Ok(graph.value(out).clone())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.argmax_rows())
    }

    /// Mean cross-entropy of the batch plus the requested gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[usize],
        want_params: bool,
        want_input: bool,
    ) -> Result<LossAndGrads> {
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone(), want_input);
        let params = self.param_leaves(&mut graph, want_params);
        let logits = self.build(&mut graph, input, &params)?;
        let loss = graph.softmax_xent(logits, labels)?;
        graph.backward(loss)?;
        let param_grads = want_params.then(|| {
            params
                .iter()
                .zip(&self.params)
                .map(|(id, p)| {
                    graph
                        .take_grad(*id)
                        .unwrap_or_else(|| Tensor::zeros(p.shape()))
                })
                .collect()
        });
        let input_grad = if want_input {
            graph.take_grad(input)
        } else {
            None
        };
        Ok(LossAndGrads {
            loss: graph.value(loss).item(),
            logits: graph.value(logits).clone(),
            param_grads,
            input_grad,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_scalars());
        out.extend_from_slice(MAGIC);
        for d in self.arch.input {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.arch.layers.len() as u32).to_le_bytes());
        for layer in &self.arch.layers {
            let (code, size) = layer.code();
            out.push(code);
            out.extend_from_slice(&size.to_le_bytes());
        }
        out.extend_from_slice(&(self.num_scalars() as u64).to_le_bytes());
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(5)? != MAGIC {
            return Err(Error::Checkpoint("missing PLAB1 magic".into()));
        }
        let input = [
            cur.u32()? as usize,
            cur.u32()? as usize,
            cur.u32()? as usize,
        ];
        let nlayers = cur.u32()? as usize;
        let mut layers = Vec::with_capacity(nlayers.min(1024));
        for _ in 0..nlayers {
            let code = cur.take(1)?[0];
            let size = cur.u32()?;
            layers.push(
                Layer::from_code(code, size)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown layer code {code}")))?,
            );
        }
        let arch = Architecture { input, layers };
        let shapes = arch.param_shapes()?;
        let count = cur.u64()? as usize;
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "descriptor implies {expected} parameters, header says {count}"
            )));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            params.push(Tensor { shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(ModelState { arch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
