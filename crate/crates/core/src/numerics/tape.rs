use std::collections::BTreeMap;

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::variational::{kl_grad, kl_terms, sigmoid, softplus_unchecked};

/// Value written above the diagonal by [`Graph::causal_mask_fill`].
pub const CAUSAL_FILL: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;
/// Row-parallel matmul kicks in above this many multiply-adds.
const PAR_MATMUL_WORK: usize = 1 << 16;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalMaskFill(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Reparam {
        mu: Var,
        rho: Var,
        eps: Vec<f64>,
    },
    KlGaussian {
        mu: Var,
        rho: Var,
        prior_mean: Vec<f64>,
        prior_sigma: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// A recording of tensor operations. With gradients enabled every op keeps
/// what its backward pass needs; [`Graph::backward`] then walks the nodes in
/// reverse creation order, which is a reverse topological order because a
/// node can only reference nodes created before it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` on it yields zeros.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
            name: Some(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape_err(&self, op: &str, a: Var, b: Var) -> Error {
        Error::structural(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 || k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::default(); m * n];
        let exec = if m * k * n >= PAR_MATMUL_WORK {
            Exec::Rayon
        } else {
            Exec::Sequential
        };
        exec.for_each_chunk(&mut out, n, |off, row| {
            let i = off / n;
            let mut acc = vec![0.0f64; n];
            for kk in 0..k {
                let x = av[i * k + kk].to_f64();
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                for (s, &y) in acc.iter_mut().zip(brow) {
                    *s += x * y.to_f64();
                }
            }
            for (o, s) in row.iter_mut().zip(&acc) {
                *o = T::from_f64(*s);
            }
        });
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::structural(format!(
                "transpose needs a 2-D tensor, got {:?}",
                self.value(a).shape()
            )));
        }
        let (r, c) = self.dims(a);
        let av = self.value(a).data();
        let mut out = vec![T::default(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<T>> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(name, a, b));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64())))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of an `r x c` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(row).len() != c {
            return Err(self.shape_err("add_row", x, row));
        }
        let xv = self.value(x).data();
        let bv = self.value(row).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(T::from_f64(xv[i * c + j].to_f64() + bv[j].to_f64()));
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|v| T::from_f64(v.to_f64() * factor)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, factor), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        let mut e = vec![0.0f64; c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ej, v) in e.iter_mut().zip(row) {
                *ej = (v.to_f64() - m).exp();
                z += *ej;
            }
            out.extend(e.iter().map(|ej| T::from_f64(ej / z)));
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                let xhat = (row[j].to_f64() - mean) * rstd;
                out.push(T::from_f64(xhat * gv[j].to_f64() + bv[j].to_f64()));
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t
            .data()
            .iter()
            .map(|v| {
                let x = v.to_f64();
                T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            })
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), &[a])
    }

    /// Gathers rows `ids` of a `V x d` table into an `len(ids) x d` tensor.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Replaces entries `(i, j)` with `j > i` by [`CAUSAL_FILL`].
    pub fn causal_mask_fill(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for j in (i + 1)..c {
                out[i * c + j] = T::from_f64(CAUSAL_FILL);
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::CausalMaskFill(a), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::structural(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(self.shape_err("concat_cols", parts[0], parts[parts.len() - 1]));
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(self.shape_err("concat_rows", parts[0], parts[parts.len() - 1]));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean token cross-entropy over rows whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::structural(format!(
                "cross_entropy: {} targets for logits of shape {:?}",
                targets.len(),
                self.value(logits).shape()
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f64; r * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..r {
            let t = targets[i];
            if t == ignore_index {
                continue;
            }
            if t >= c {
                return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
            }
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (pj, v) in p.iter_mut().zip(row) {
                *pj = (v.to_f64() - m).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            total += z.ln() + m - row[t].to_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every target is ignored"));
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reparameterized draw `mu + softplus(rho) * eps`, elementwise.
    pub fn reparam(&mut self, mu: Var, rho: Var, eps: Vec<f64>) -> Result<Var> {
        if self.value(mu).shape() != self.value(rho).shape() || eps.len() != self.value(mu).len() {
            return Err(self.shape_err("reparam", mu, rho));
        }
        let out = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(rho).data())
            .zip(&eps)
            .map(|((m, r), e)| T::from_f64(m.to_f64() + softplus_unchecked(r.to_f64()) * e))
            .collect();
        let shape = self.value(mu).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Reparam { mu, rho, eps }, &[mu, rho]))
    }

    /// Summed closed-form `KL(N(mu, softplus(rho)^2) || N(prior_mean, prior_sigma^2))`.
    pub fn kl_gaussian(&mut self, mu: Var, rho: Var, prior_mean: Vec<f64>, prior_sigma: f64) -> Result<Var> {
        if self.value(mu).shape() != self.value(rho).shape() || prior_mean.len() != self.value(mu).len() {
            return Err(self.shape_err("kl_gaussian", mu, rho));
        }
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(rho).data())
            .zip(&prior_mean)
            .map(|((m, r), pm)| kl_terms(m.to_f64(), softplus_unchecked(r.to_f64()), *pm, prior_sigma))
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlGaussian {
                mu,
                rho,
                prior_mean,
                prior_sigma,
            },
            &[mu, rho],
        ))
    }

    /// Reverse pass from a one-element `loss`. Returns the gradient of every
    /// named leaf; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(name)) = (&node.op, &node.name) {
                let shape = node.value.shape().to_vec();
                let t = match &grads[idx] {
                    Some(g) => Tensor::from_parts(shape, g.iter().map(|&x| T::from_f64(x)).collect()),
                    None => Tensor::zeros(shape),
                };
                out.insert(name.clone(), t);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn vals(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.to_f64_vec()
    }

    fn backprop_node(&self, node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.vals(*a);
                let bv = self.vals(*b);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let x = av[i * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Mul(a, b) => {
                let av = self.vals(*a);
                let bv = self.vals(*b);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let c = self.dims(*x).1;
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.accumulate(grads, *row, |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % c] += v;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * f));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Softmax(a) => {
                let (r, c) = self.dims(*a);
                let y = node.value.to_f64_vec();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (r, c) = self.dims(*x);
                let xv = self.vals(*x);
                let gv = self.vals(*gain);
                let xhat: Vec<f64> = (0..r * c).map(|k| (xv[k] - mean[k / c]) * rstd[k / c]).collect();
                self.accumulate(grads, *bias, |gb| {
                    for (k, v) in g.iter().enumerate() {
                        gb[k % c] += v;
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (k, v) in g.iter().enumerate() {
                        gg[k % c] += v * xhat[k];
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[i * c + j] * gv[j]).collect();
                        let xh = &xhat[i * c..(i + 1) * c];
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.vals(*a);
                self.accumulate(grads, *a, |ga| {
                    for (i, &x) in xv.iter().enumerate() {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.dims(*table).1;
                self.accumulate(grads, *table, |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[t * d + j];
                        }
                    }
                });
            }
            Op::CausalMaskFill(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c.min(i + 1) {
                            ga[i * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.dims(*x).1;
                let (r, len) = node.value.dims2();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, c) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    self.accumulate(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * c + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(o, v)| *o += v)
                    });
                    off += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                let c = self.dims(*logits).1;
                let w = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..c {
                            gl[i * c + j] += w * probs[i * c + j];
                        }
                        gl[i * c + t] -= w;
                    }
                });
            }
            Op::Reparam { mu, rho, eps } => {
                self.accumulate(grads, *mu, |gm| gm.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                let rv = self.vals(*rho);
                self.accumulate(grads, *rho, |gr| {
                    for i in 0..gr.len() {
                        gr[i] += g[i] * eps[i] * sigmoid(rv[i]);
                    }
                });
            }
            Op::KlGaussian {
                mu,
                rho,
                prior_mean,
                prior_sigma,
            } => {
                let mv = self.vals(*mu);
                let rv = self.vals(*rho);
                let parts: Vec<(f64, f64)> = (0..mv.len())
                    .map(|i| kl_grad(mv[i], rv[i], prior_mean[i], *prior_sigma))
                    .collect();
                self.accumulate(grads, *mu, |gm| {
                    for (o, p) in gm.iter_mut().zip(&parts) {
                        *o += g[0] * p.0;
                    }
                });
                self.accumulate(grads, *rho, |gr| {
                    for (o, p) in gr.iter_mut().zip(&parts) {
                        *o += g[0] * p.1;
                    }
                });
            }
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
