//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! The forward pass appends nodes to a [`Tape`]; each node stores its value and
//! whatever the backward rule needs. [`Tape::backward`] walks the tape in
//! reverse and accumulates adjoints, so a node used twice receives the sum of
//! both contributions.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: Option<NodeId>,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Slice {
        x: NodeId,
        row0: usize,
        col0: usize,
    },
    Assemble {
        parts: Vec<(NodeId, usize, usize)>,
    },
    CausalSoftmax(NodeId),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every parameter leaf with respect to one scalar loss.
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Trainable leaf; always present in the result of [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value)
    }

    fn expect_matrix(&self, id: NodeId, what: &str) -> Result<()> {
        if !self.value(id).is_matrix() {
            return Err(Error::Shape(format!(
                "{what} expects a matrix, got {:?}",
                self.value(id).shape()
            )));
        }
        Ok(())
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        self.expect_matrix(a, "matmul")?;
        self.expect_matrix(b, "matmul")?;
        let v = matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `x · wᵀ` for a weight stored as `(fan_out, fan_in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.matmul_t(x, false, w, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        Ok(self.push(Op::AddBias { x, bias }, out))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(Op::Gelu(a), v)
    }

    /// Row-wise layer normalization with learnable scale and optional shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let gv = self.value(gamma);
        if gv.rank() != 1 || gv.len() != c {
            return Err(Error::Shape(format!(
                "layer norm scale {:?} for width {c}",
                gv.shape()
            )));
        }
        if let Some(b) = beta {
            if self.value(b).shape() != gv.shape() {
                return Err(Error::Shape("layer norm shift/scale shape mismatch".into()));
            }
        }
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let g = gv.data();
        let b = beta.map(|b| self.value(b).data());
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + b.map_or(0.0, |b| b[j]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
        ))
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if !lv.is_matrix() || targets.len() != n {
            return Err(Error::Shape(format!(
                "cross entropy: logits {:?} vs {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!(
                "target {bad} out of range for {c} classes"
            )));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (row, &t) in probs.data_mut().chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let lse = max + z.ln();
            total += lse - (max + row[t].ln());
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let loss = Tensor::scalar(total / n as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            loss,
        ))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if !tv.is_matrix() {
            return Err(Error::Shape("gather needs a matrix table".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Input(format!(
                "index {bad} out of range for {} rows",
                tv.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::matrix(ids.len(), tv.cols(), data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    /// Copies the `rows × cols` block starting at `(row0, col0)`.
    pub fn slice(
        &mut self,
        x: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() || row0 + rows > xv.rows() || col0 + cols > xv.cols() {
            return Err(Error::Shape(format!(
                "slice [{row0}+{rows}, {col0}+{cols}] outside {:?}",
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            data.extend_from_slice(&xv.row(i)[col0..col0 + cols]);
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::Slice { x, row0, col0 }, v))
    }

    /// Places each part at its `(row0, col0)` offset in a zero matrix of
    /// `shape`. Parts may not overlap.
    pub fn assemble(
        &mut self,
        shape: (usize, usize),
        parts: &[(NodeId, usize, usize)],
    ) -> Result<NodeId> {
        let mut out = Tensor::zeros(&[shape.0, shape.1]);
        let width = shape.1;
        for &(p, r0, c0) in parts {
            let pv = self.value(p);
            if !pv.is_matrix() || r0 + pv.rows() > shape.0 || c0 + pv.cols() > shape.1 {
                return Err(Error::Shape(format!(
                    "part {:?} at ({r0},{c0}) outside {shape:?}",
                    pv.shape()
                )));
            }
            for i in 0..pv.rows() {
                let dst = (r0 + i) * width + c0;
                out.data_mut()[dst..dst + pv.cols()].copy_from_slice(pv.row(i));
            }
        }
        Ok(self.push(
            Op::Assemble {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Row softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let n = av.rows();
        if !av.is_matrix() || av.cols() != n {
            return Err(Error::Shape(format!(
                "causal softmax needs square, got {:?}",
                av.shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let row = &av.row(i)[..=i];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.data_mut()[i * n..i * n + i + 1];
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(row) {
                *d = (s - max).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        Ok(self.push(Op::CausalSoftmax(a), out))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf appears in
    /// the result; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match (ta, tb) {
                        (false, false) => {
                            (matmul(&g, false, bv, true)?, matmul(av, true, &g, false)?)
                        }
                        (false, true) => {
                            (matmul(&g, false, bv, false)?, matmul(&g, true, av, false)?)
                        }
                        (true, false) => {
                            (matmul(bv, false, &g, true)?, matmul(av, false, &g, false)?)
                        }
                        (true, true) => (matmul(bv, true, &g, true)?, matmul(&g, true, av, true)?),
                    };
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone())?;
                    accumulate(&mut adj, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |d, y| d * y)?;
                    let gb = g.zip_map(self.value(*a), |d, x| d * x)?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c))?,
                Op::AddBias { x, bias } => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut adj, *bias, Tensor::vector(gb))?;
                    accumulate(&mut adj, *x, g)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = g.cols();
                    let gam = self.value(*gamma).data();
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    let mut gx = Tensor::zeros(g.shape());
                    let rows = g.data().chunks(c).zip(xhat.data().chunks(c));
                    for (r, ((grow, hrow), xrow)) in
                        rows.zip(gx.data_mut().chunks_mut(c)).enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            ggamma[j] += grow[j] * hrow[j];
                            gbeta[j] += grow[j];
                            let dh = grow[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let k = rstd[r] / c as f64;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            xrow[j] = k * (c as f64 * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut adj, *gamma, Tensor::vector(ggamma))?;
                    if let Some(b) = beta {
                        accumulate(&mut adj, *b, Tensor::vector(gbeta))?;
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len();
                    let c = probs.cols();
                    let scale = g.item() / n as f64;
                    let mut gl = probs.clone();
                    for (row, &t) in gl.data_mut().chunks_mut(c).zip(targets) {
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut adj, *logits, gl)?;
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    for (row, &id) in g.data().chunks(c).zip(ids) {
                        for (d, v) in gt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *table, gt)?;
                }
                Op::Slice { x, row0, col0 } => {
                    let xv = self.value(*x);
                    let w = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    for i in 0..g.rows() {
                        let dst = (row0 + i) * w + col0;
                        gx.data_mut()[dst..dst + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Assemble { parts } => {
                    let w = g.cols();
                    for &(p, r0, c0) in parts {
                        let pv = self.value(p);
                        let mut data = Vec::with_capacity(pv.len());
                        for i in 0..pv.rows() {
                            let src = (r0 + i) * w + c0;
                            data.extend_from_slice(&g.data()[src..src + pv.cols()]);
                        }
                        accumulate(&mut adj, p, Tensor::new(pv.shape(), data)?)?;
                    }
                }
                Op::CausalSoftmax(a) => {
                    let p = &node.value;
                    let n = p.rows();
                    let mut ga = Tensor::zeros(p.shape());
                    for i in 0..n {
                        let (prow, grow) = (&p.row(i)[..=i], &g.row(i)[..=i]);
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            ga.data_mut()[i * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut adj, *a, Tensor::full(av.shape(), g.item()))?;
                }
            }
        }

        let map = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, n)| {
                let g = adj[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { map })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut adj[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// A scalar objective over a list of parameter tensors.
pub trait Differentiable {
    fn parameters(&self) -> &[Tensor];
    fn parameters_mut(&mut self) -> &mut [Tensor];
    fn loss(&self) -> Result<f64>;
    /// Loss and one gradient per parameter tensor, in order.
    fn loss_and_grad(&self) -> Result<(f64, Vec<Tensor>)>;
}

/// Compares analytic gradients against central differences on up to
/// `coords_per_param` sampled coordinates of each parameter tensor. Returns
/// the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<D: Differentiable>(
    obj: &mut D,
    eps: f64,
    coords_per_param: usize,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Input(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let (loss, grads) = obj.loss_and_grad()?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for (p, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_param).into_vec()
        };
        for i in coords {
            let orig = obj.parameters()[p].data()[i];
            obj.parameters_mut()[p].data_mut()[i] = orig + eps;
            let up = obj.loss()?;
            obj.parameters_mut()[p].data_mut()[i] = orig - eps;
            let down = obj.loss()?;
            obj.parameters_mut()[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Divergence(
                    "non-finite loss during finite differences".into(),
                ));
            }
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad.data()[i];
            let denom = 1.0f64.max(analytic.abs()).max(numeric.abs());
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
