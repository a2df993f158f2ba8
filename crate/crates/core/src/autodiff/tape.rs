//! Operation tape for reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products; leaves
//! registered with [`Tape::param`] scatter their gradient into a flat parameter
//! vector at a fixed offset, so several networks (or several passes of the same
//! network) can share one tape as long as they share one parameter layout.

use serde::{Deserialize, Serialize};

use super::tensor::TensorBuf;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity used between MLP layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given the pre-activation input and the activation output.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                // y = x·sigmoid(x), so the sigmoid is recovered without another exp.
                let s = if x == 0.0 { 0.5 } else { y / x };
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Square(NodeId),
    Sum(NodeId),
    Mse(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: TensorBuf,
    op: Op,
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<f64>,
    nodes: Vec<Option<TensorBuf>>,
}

impl Gradients {
    /// Gradient with respect to the flat parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Gradient with respect to any recorded node (`None` if it received none).
    pub fn node(&self, id: NodeId) -> Option<&TensorBuf> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}

// Kernels shared with the tape-free forward paths so both are bit-identical.

pub(crate) fn matmul(a: &TensorBuf, b: &TensorBuf, context: &str) -> Result<TensorBuf> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 || b.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: vec![k, n],
            got: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, (a.data(), k, 1), (b.data(), n, 1), &mut out);
    TensorBuf::matrix(m, n, out)
}

/// `c += A · B` for an `m×k` by `k×n` product into row-major `c`. Operands
/// are `(data, row stride, column stride)`, which lets transposes be views.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let span =
        |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(
        a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2) && c.len() >= m * n
    );
    // SAFETY: the assertion above keeps every strided access in bounds and
    // `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn add_bias(a: &TensorBuf, bias: &TensorBuf, context: &str) -> Result<TensorBuf> {
    let n = a.cols();
    if bias.len() != n {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: vec![n],
            got: bias.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: TensorBuf, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn get(&self, id: NodeId) -> Result<&TensorBuf> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    /// Most recently recorded node.
    pub fn last(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &TensorBuf {
        &self.nodes[id.0].value
    }

    /// Records a constant input. Gradients reach it but go nowhere else.
    pub fn leaf(&mut self, value: TensorBuf) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a slice of the flat parameter vector starting at `offset`.
    pub fn param(&mut self, offset: usize, value: TensorBuf) -> NodeId {
        self.push(value, Op::Param { offset })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.get(a)?, self.get(b)?, "matmul")?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = add_bias(self.get(a)?, self.get(bias)?, "add_bias")?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.zip_map(self.get(b)?, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.zip_map(self.get(b)?, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.zip_map(self.get(b)?, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.get(a)?.map(|x| x * c);
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        let v = self.get(a)?.map(|x| kind.apply(x));
        Ok(self.push(v, Op::Act(a, kind)))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.map(|x| x * x);
        Ok(self.push(v, Op::Square(a)))
    }

    /// Sum of all entries, as a one-element buffer.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = TensorBuf::scalar(self.get(a)?.sum());
        Ok(self.push(v, Op::Sum(a)))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.get(a)?, self.get(b)?);
        va.expect_shape(vb.shape(), "mse")?;
        let n = va.len() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(TensorBuf::scalar(s / n), Op::Mse(a, b)))
    }

    /// Recomputes every node from its inputs and reports whether the stored
    /// values are reproduced bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut tape = Tape::new();
        for node in &self.nodes {
            let id = match node.op {
                Op::Leaf => tape.leaf(node.value.clone()),
                Op::Param { offset } => tape.param(offset, node.value.clone()),
                Op::MatMul(a, b) => tape.matmul(a, b)?,
                Op::AddBias(a, b) => tape.add_bias(a, b)?,
                Op::Add(a, b) => tape.add(a, b)?,
                Op::Sub(a, b) => tape.sub(a, b)?,
                Op::Mul(a, b) => tape.mul(a, b)?,
                Op::Scale(a, c) => tape.scale(a, c)?,
                Op::Act(a, k) => tape.activation(a, k)?,
                Op::Square(a) => tape.square(a)?,
                Op::Sum(a) => tape.sum(a)?,
                Op::Mse(a, b) => tape.mse(a, b)?,
            };
            let same = tape
                .value(id)
                .data()
                .iter()
                .zip(node.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Propagates the given output gradients back through the tape.
    ///
    /// `seeds` pairs recorded nodes with the gradient flowing into them (for a
    /// scalar loss this is a single `(loss, [1.0])`). Parameter gradients are
    /// accumulated into a vector of length `n_params`. A tape can be
    /// differentiated once; [`Tape::reset`] makes it reusable.
    pub fn backward(
        &mut self,
        seeds: &[(NodeId, &TensorBuf)],
        n_params: usize,
    ) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;

        let mut grads: Vec<Option<TensorBuf>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let v = self.get(*id)?;
            g.expect_shape(v.shape(), "backward seed")?;
            accumulate(&mut grads[id.0], g);
        }

        let mut params = vec![0.0; n_params];
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::Param { offset } => {
                    let end = offset + g.len();
                    if end > n_params {
                        return Err(Error::ShapeMismatch {
                            context: "parameter gradient".into(),
                            expected: vec![n_params],
                            got: vec![end],
                        });
                    }
                    for (p, &v) in params[offset..end].iter_mut().zip(g.data()) {
                        *p += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                    // dA = G · Bᵀ and dB = Aᵀ · G, transposes taken as stride swaps.
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, (gd, n, 1), (bd, 1, n), &mut ga);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, (ad, 1, k), (gd, n, 1), &mut gb);
                    accumulate(&mut grads[a.0], &TensorBuf::new(va.shape().to_vec(), ga)?);
                    accumulate(&mut grads[b.0], &TensorBuf::new(vb.shape().to_vec(), gb)?);
                }
                Op::AddBias(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    let n = vb.len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[b.0], &TensorBuf::new(vb.shape().to_vec(), gb)?);
                    accumulate(&mut grads[a.0], &g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.zip_map(vb, "mul backward", |x, y| x * y)?;
                    let gb = g.zip_map(va, "mul backward", |x, y| x * y)?;
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g.map(|v| v * c)),
                Op::Act(a, kind) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads[a.0], &TensorBuf::new(x.shape().to_vec(), data)?);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip_map(x, "square backward", |gv, xv| 2.0 * gv * xv)?;
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Sum(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &TensorBuf::filled(x.shape(), g.data()[0]));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let c = 2.0 * g.data()[0] / va.len() as f64;
                    let ga = va.zip_map(vb, "mse backward", |x, y| c * (x - y))?;
                    accumulate(&mut grads[b.0], &ga.map(|v| -v));
                    accumulate(&mut grads[a.0], &ga);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn accumulate(slot: &mut Option<TensorBuf>, g: &TensorBuf) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g.clone()),
    }
}
