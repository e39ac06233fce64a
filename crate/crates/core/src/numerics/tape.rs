//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! and the information its adjoint rule needs. [`Tape::backward`] walks the
//! nodes once in reverse order. Gradients are accumulated into zero-initialised
//! buffers, so fan-out sums additively.

use std::collections::HashMap;

use super::{NumericsError, ParamId, ParamSet, Tensor};

/// Smallest and largest values a sigmoid output may take. Chosen so that
/// `1 + 4 * sigmoid(x)` also stays strictly inside `(1, 5)`.
pub const SIGMOID_FLOOR: f64 = 8.881_784_197_001_252e-16; // 2^-50
pub const SIGMOID_CEIL: f64 = 1.0 - SIGMOID_FLOOR;

/// Probability clamp applied before logarithms in the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<f64>,
        normed: Vec<f64>,
    },
    Sum(Var),
    BceMean(Var, Vec<f64>),
    MseMean(Var, Vec<f64>),
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a single forward pass. Build a fresh tape per pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    bindings: Vec<(ParamId, Var)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::raw(tensor.shape().to_vec(), tensor.into_data());
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::raw(tensor.shape().to_vec(), tensor.into_data());
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter once per tape; repeated calls return the same handle.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = params.get(id);
        let value = Tensor::raw(t.shape().to_vec(), t.data().to_vec());
        let v = self.push(value, Op::Leaf, t.requires_grad());
        self.param_vars.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::raw(t.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), NumericsError> {
        match self.shape(v) {
            [b, m, n] => Ok((*b, *m, *n)),
            other => Err(NumericsError::Rank {
                op,
                expected: 3,
                shape: other.to_vec(),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Batched product `[B×m×k]·[B×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (bs, m, k) = self.dims3(a, "batch_matmul")?;
        let (bs2, k2, n) = self.dims3(b, "batch_matmul")?;
        if bs != bs2 || k != k2 {
            return Err(NumericsError::Shape {
                op: "batch_matmul",
                left: vec![bs, m, k],
                right: vec![bs2, k2, n],
            });
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::raw(vec![bs, m, n], out),
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 value.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (bs, m, n) = match shape.as_slice() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            _ => {
                return Err(NumericsError::Rank {
                    op: "transpose",
                    expected: 2,
                    shape,
                })
            }
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..bs {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(new_shape, out), Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` value.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).len() != n {
            return Err(NumericsError::Shape {
                op: "add_row_bias",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::raw(vec![m, n], data), Op::AddRowBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |a| scale * a + shift)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Logistic function, clamped to `[SIGMOID_FLOOR, SIGMOID_CEIL]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |a| {
            0.5 * a * (1.0 + (GELU_C * (a + 0.044_715 * a * a * a)).tanh())
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax over the entries whose mask flag is `true`; the others
    /// get weight exactly zero. A fully masked row yields zeros.
    pub fn masked_softmax_rows(
        &mut self,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(NumericsError::Shape {
                    op: "masked_softmax_rows",
                    left: vec![m, n],
                    right: vec![mask.len()],
                });
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                dst[j] = (row[j] - max).exp();
                total += dst[j];
            }
            for j in (0..n).filter(|&j| keep(j)) {
                dst[j] /= total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::Softmax(x), rg))
    }

    /// Selects rows of an `[r×c]` table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        if indices.is_empty() {
            return Err(NumericsError::Contract("gather_rows: no indices".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::raw(vec![indices.len(), c], out),
            Op::GatherRows(table, indices.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of an `[m×n]` value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(NumericsError::Contract(format!(
                "slice_cols: range {start}..{end} invalid for width {n}"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(vec![m, w], out), Op::SliceCols(x, start), rg))
    }

    /// Horizontal concatenation of `[m×nᵢ]` values.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.dims2(p, "concat_cols")?;
            if mi != m {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: vec![mi, ni],
                });
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::raw(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for v in [gain, bias] {
            if self.value(v).len() != n {
                return Err(NumericsError::Shape {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let xh = (row[j] - mean) * s;
                normed[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::raw(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            },
            rg,
        ))
    }

    /// Sum of all elements, as a one-element value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy between probabilities and 0/1 targets.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
    /// logarithm; the adjoint is evaluated at the clamped point.
    pub fn bce_mean(&mut self, probs: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(NumericsError::Shape {
                op: "bce_mean",
                left: p.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = clamp_prob(p);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let loss = total / targets.len() as f64;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean(probs, targets.to_vec()),
            rg,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse_mean(&mut self, pred: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        let p = self.value(pred);
        if p.len() != targets.len() {
            return Err(NumericsError::Shape {
                op: "mse_mean",
                left: p.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(targets)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let loss = total / targets.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseMean(pred, targets.to_vec()),
            rg,
        ))
    }

    /// `Σ cᵢ·xᵢ` over same-shaped values, summed left to right.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var, NumericsError> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| NumericsError::Contract("combine: no terms".into()))?;
        for &(v, _) in &terms[1..] {
            self.same_shape(first, v, "combine")?;
        }
        let n = self.value(first).len();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = terms[0].1 * self.value(terms[0].0).data()[i];
            for &(v, c) in &terms[1..] {
                acc += c * self.value(v).data()[i];
            }
            *o = acc;
        }
        let shape = self.shape(first).to_vec();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::raw(shape, out), Op::Combine(terms.to_vec()), rg))
    }

    /// Runs every recorded adjoint rule once, from `loss` back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.apply_adjoint(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            bindings: self.bindings.clone(),
        })
    }

    /// Backward pass followed by accumulation into the bound parameters.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<(), NumericsError> {
        self.backward(loss)?.accumulate_into(params)
    }

    fn apply_adjoint(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                send(*a, &mut |ga| gemm_nt(g, val(*b), ga, m, n, k));
                send(*b, &mut |gb| gemm_tn(val(*a), g, gb, k, m, n));
            }
            Op::BatchMatMul(a, b) => {
                let s = self.shape(*a);
                let (bs, m, k) = (s[0], s[1], s[2]);
                let n = self.shape(*b)[2];
                send(*a, &mut |ga| {
                    for t in 0..bs {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &val(*b)[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                send(*b, &mut |gb| {
                    for t in 0..bs {
                        gemm_tn(
                            &val(*a)[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let bs = if r == 3 { s[0] } else { 1 };
                send(*x, &mut |gx| {
                    for b in 0..bs {
                        let base = b * m * n;
                        for p in 0..m {
                            for q in 0..n {
                                gx[base + p * n + q] += g[base + q * m + p];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => send(*x, &mut |gx| add_assign(gx, g)),
            Op::Add(a, b) => {
                send(*a, &mut |ga| add_assign(ga, g));
                send(*b, &mut |gb| add_assign(gb, g));
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).len();
                send(*x, &mut |gx| add_assign(gx, g));
                send(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                send(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * bi;
                    }
                });
                send(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Affine(x, c) => send(*x, &mut |gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::Tanh(x) => {
                let y = node.value.data();
                send(*x, &mut |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, &mut |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Gelu(x) => send(*x, &mut |gx| {
                for ((o, gi), &a) in gx.iter_mut().zip(g).zip(val(*x)) {
                    let inner = GELU_C * (a + 0.044_715 * a * a * a);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * a * a);
                    *o += gi * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner);
                }
            }),
            Op::Softmax(x) => {
                let n = self.shape(*x)[1];
                let y = node.value.data();
                send(*x, &mut |gx| {
                    for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            or[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let c = self.shape(*table)[1];
                send(*table, &mut |gt| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_assign(&mut gt[row * c..(row + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let n = self.shape(*x)[1];
                let w = node.value.shape()[1];
                send(*x, &mut |gx| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_assign(&mut gx[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    send(p, &mut |gp| {
                        for (r, gr) in g.chunks(total).enumerate() {
                            add_assign(&mut gp[r * w..(r + 1) * w], &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            } => {
                let n = self.value(*gain).len();
                let gv = val(*gain);
                send(*gain, &mut |gg| {
                    for (gr, xr) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                send(*bias, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_assign(gb, gr);
                    }
                });
                send(*x, &mut |gx| {
                    for (r, (gr, xr)) in g.chunks(n).zip(normed.chunks(n)).enumerate() {
                        let dxh: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Sum(x) => send(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::BceMean(p, y) => {
                let scale = g[0] / y.len() as f64;
                send(*p, &mut |gp| {
                    for ((o, &pi), &yi) in gp.iter_mut().zip(val(*p)).zip(y) {
                        let pc = clamp_prob(pi);
                        *o += scale * (pc - yi) / (pc * (1.0 - pc));
                    }
                });
            }
            Op::MseMean(p, y) => {
                let scale = 2.0 * g[0] / y.len() as f64;
                send(*p, &mut |gp| {
                    for ((o, &pi), &yi) in gp.iter_mut().zip(val(*p)).zip(y) {
                        *o += scale * (pi - yi);
                    }
                });
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    send(v, &mut |gv| {
                        for (o, gi) in gv.iter_mut().zip(g) {
                            *o += c * gi;
                        }
                    });
                }
            }
        }
    }
}

/// Adjoints from one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a
    /// differentiable path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    /// Adds the gradient of every bound parameter into its tensor.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<(), NumericsError> {
        for &(id, v) in &self.bindings {
            let tensor = params.get_mut(id);
            match self.wrt(v) {
                Some(g) => tensor.accumulate_grad(g)?,
                None if tensor.grad().is_none() => tensor.zero_grad(),
                None => {}
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
