use std::rc::Rc;

use rand::Rng;

use super::{SparsePattern, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    ClampMax(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        freeze_stats: bool,
    },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatFlat(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    CumsumRows(Var),
    NormalizeRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kl(Var, Var),
    PatternScores {
        q: Var,
        k: Var,
        pattern: Rc<SparsePattern>,
        heads: usize,
        scale: f64,
    },
    SegmentSoftmax {
        x: Var,
        pattern: Rc<SparsePattern>,
    },
    PatternMix {
        p: Var,
        v: Var,
        pattern: Rc<SparsePattern>,
        heads: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of one forward pass.
///
/// Nodes are appended in execution order, which is a topological order of
/// the computation; [`Tape::backward`] walks it in exact reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const PROB_TOL: f64 = 1e-6;

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn check_probs(name: &str, x: &[f64]) -> Result<()> {
    if let Some(v) = x
        .iter()
        .find(|&&v| !v.is_finite() || !(-PROB_TOL..=1.0 + PROB_TOL).contains(&v))
    {
        return Err(Error::Domain(format!(
            "{name} contains {v}, outside [0, 1]"
        )));
    }
    Ok(())
}

/// Accumulation buffer of `v`, or None when `v` needs no gradient.
fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "{what}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let out = transpose_data(self.value(x).data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn map_op(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_op(x, Op::Scale(x, s), |e| e * s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Relu(x), |e| e.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Square(x), |e| e * e)
    }

    /// Elementwise `min(x, c)`; the gradient passes only where `x < c`.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, Op::ClampMax(x, c), |e| e.min(c))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(Error::dim(format!(
                "mul_const: {} factors for {} elements",
                c.len(),
                self.value(x).numel()
            )));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    /// `x[T×d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "add_row_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::dim(format!(
                "bias has {} entries for {c} columns",
                self.value(bias).numel()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for (o, &bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRowBias(x, bias), rg))
    }

    /// Fully connected layer `x·w + b` with `w` of shape in×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Softmax over the last extent, stabilised by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let c = *v.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::Numeric("log-softmax input is not finite".into()));
        }
        let c = *v.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
            for (oo, &e) in o.iter_mut().zip(row) {
                *oo = e - lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmaxRows(x), rg))
    }

    /// Normalises every column of `x[T×d]` over the temporal axis, then
    /// applies the per-channel affine `gain`, `bias`.
    ///
    /// With `freeze_stats` the backward pass treats mean and variance as
    /// constants; the forward value is unchanged.
    pub fn instance_norm_temporal(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        freeze_stats: bool,
    ) -> Result<Var> {
        let (t, d) = self.matrix_dims(x, "instance_norm")?;
        if t == 0 {
            return Err(Error::EmptyInput("instance norm over zero frames".into()));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(
                "instance_norm gain/bias must have one entry per channel",
            ));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut mean = vec![0.0; d];
        for row in xv.chunks(d) {
            for (m, &e) in mean.iter_mut().zip(row) {
                *m += e;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; d];
        for row in xv.chunks(d) {
            for ((s, &e), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (e - m) * (e - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / t as f64 + eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; t * d];
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for c in 0..d {
                let h = (xv[i * d + c] - mean[c]) * inv_std[c];
                xhat[i * d + c] = h;
                out[i * d + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                freeze_stats,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!(
                "gather_rows index {bad} out of {r} rows"
            )));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, idx), rg))
    }

    /// Adds row `i` of `x` into row `idx[i]` of a zero matrix with `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, out_rows: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "scatter_add_rows")?;
        if idx.len() != r {
            return Err(Error::dim(format!(
                "scatter_add_rows: {} indices for {r} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::dim(format!(
                "scatter_add_rows target {bad} out of {out_rows} rows"
            )));
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; out_rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] += v[i * c + j];
            }
        }
        let t = Tensor::new(vec![out_rows, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ScatterAddRows(x, idx), rg))
    }

    /// Selects flat elements; the result is a vector of `idx.len()`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::dim(format!(
                "gather_elems index {bad} out of {}",
                v.len()
            )));
        }
        let out = idx.iter().map(|&i| v[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::GatherElems(x, idx), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let r = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::vector(out), Op::ConcatFlat(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Running sum along the last extent.
    pub fn cumsum_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            for j in 1..row.len() {
                row[j] += row[j - 1];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::CumsumRows(x), rg)
    }

    /// Divides every last-dim slice by its sum.
    pub fn normalize_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Numeric(format!(
                    "cannot renormalise a slice summing to {s}"
                )));
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NormalizeRows(x), rg))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (t, c) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != t {
            return Err(Error::dim(format!(
                "{} labels for {t} frames",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
        }
        let v = self.value(logits);
        if !v.is_finite() {
            return Err(Error::Numeric("cross-entropy logits are not finite".into()));
        }
        let mut probs = vec![0.0; t * c];
        let mut loss = 0.0;
        for (i, (row, p)) in v.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            softmax_row(row, p);
        }
        let value = Tensor::scalar(loss / t.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ p·log(p/d)` over all elements, with `0·log 0 = 0`.
    pub fn kl_from_probs(&mut self, p: Var, d: Var) -> Result<Var> {
        self.same_shape(p, d, "kl_from_probs")?;
        check_probs("kl_from_probs P", self.value(p).data())?;
        check_probs("kl_from_probs D", self.value(d).data())?;
        let s = self
            .value(p)
            .data()
            .iter()
            .zip(self.value(d).data())
            .map(|(&pv, &dv)| if pv > 0.0 { pv * (pv / dv).ln() } else { 0.0 })
            .sum();
        let rg = self.rg(p) || self.rg(d);
        Ok(self.push(Tensor::scalar(s), Op::Kl(p, d), rg))
    }

    /// Per-head scaled dot products for every entry of `pattern`.
    ///
    /// `q` is `Tq×d`, `k` is `Tk×d`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`. The result is `heads × nnz`.
    pub fn pattern_scores(
        &mut self,
        q: Var,
        k: Var,
        pattern: Rc<SparsePattern>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (tq, d) = self.matrix_dims(q, "pattern_scores q")?;
        let (tk, d2) = self.matrix_dims(k, "pattern_scores k")?;
        if d != d2 || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "q/k widths {d}/{d2} incompatible with {heads} heads"
            )));
        }
        if pattern.n_rows() != tq || pattern.n_cols() != tk {
            return Err(Error::dim(format!(
                "pattern {}x{} does not fit q rows {tq}, k rows {tk}",
                pattern.n_rows(),
                pattern.n_cols()
            )));
        }
        let dk = d / heads;
        let nnz = pattern.nnz();
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; heads * nnz];
        for i in 0..tq {
            for e in pattern.row_range(i) {
                let j = pattern.keys()[e];
                for h in 0..heads {
                    let qs = &qv[i * d + h * dk..i * d + (h + 1) * dk];
                    let ks = &kv[j * d + h * dk..j * d + (h + 1) * dk];
                    out[h * nnz + e] = scale * qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            Tensor::new(vec![heads, nnz], out)?,
            Op::PatternScores {
                q,
                k,
                pattern,
                heads,
                scale,
            },
            rg,
        ))
    }

    /// Softmax over every (head, query-row) segment of a `heads × nnz` score tensor.
    pub fn segment_softmax(&mut self, x: Var, pattern: Rc<SparsePattern>) -> Result<Var> {
        let (heads, nnz) = self.matrix_dims(x, "segment_softmax")?;
        if nnz != pattern.nnz() {
            return Err(Error::dim(
                "segment_softmax: score width differs from pattern nnz",
            ));
        }
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::Numeric("attention scores are not finite".into()));
        }
        let mut out = vec![0.0; heads * nnz];
        for h in 0..heads {
            for r in 0..pattern.n_rows() {
                let range = pattern.row_range(r);
                let (a, b) = (h * nnz + range.start, h * nnz + range.end);
                softmax_row(&v.data()[a..b], &mut out[a..b]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![heads, nnz], out)?,
            Op::SegmentSoftmax { x, pattern },
            rg,
        ))
    }

    /// Per-head weighted sum of value rows: `out[i, head h] = Σ_e p[h, e]·v[key(e), head h]`.
    pub fn pattern_mix(
        &mut self,
        p: Var,
        v: Var,
        pattern: Rc<SparsePattern>,
        heads: usize,
    ) -> Result<Var> {
        let (ph, nnz) = self.matrix_dims(p, "pattern_mix p")?;
        let (tk, d) = self.matrix_dims(v, "pattern_mix v")?;
        if ph != heads || nnz != pattern.nnz() || tk != pattern.n_cols() || d % heads != 0 {
            return Err(Error::dim(
                "pattern_mix: probabilities, values and pattern disagree",
            ));
        }
        let dk = d / heads;
        let tq = pattern.n_rows();
        let (pv, vv) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![0.0; tq * d];
        for i in 0..tq {
            for e in pattern.row_range(i) {
                let j = pattern.keys()[e];
                for h in 0..heads {
                    let w = pv[h * nnz + e];
                    let o = &mut out[i * d + h * dk..i * d + (h + 1) * dk];
                    let vs = &vv[j * d + h * dk..j * d + (h + 1) * dk];
                    for (oo, &x) in o.iter_mut().zip(vs) {
                        *oo += w * x;
                    }
                }
            }
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![tq, d], out)?,
            Op::PatternMix {
                p,
                v,
                pattern,
                heads,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from `root`, seeded with ones.
    ///
    /// Every leaf created with `requires_grad` that `root` depends on gets a
    /// populated gradient; leaves it does not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Internal("backward root not on this tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                if !n.requires_grad || !matches!(n.op, Op::Leaf) {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; n.value.numel()]);
                Some(Tensor::new(n.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$b:ident| $body:block) => {
                if let Some($b) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[1];
                with_grad!(*a, |ga| {
                    let bt = transpose_data(val(*b), k, n);
                    matmul_into(g, &bt, ga, m, n, k);
                });
                with_grad!(*b, |gb| {
                    let at = transpose_data(val(*a), m, k);
                    matmul_into(&at, g, gb, k, m, n);
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = transpose_data(g, s[0], s[1]);
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |ga| {
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += y * bv;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += y * av;
                    }
                });
            }
            Op::Scale(x, s) => with_grad!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }),
            Op::AddRowBias(x, bias) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
                with_grad!(*bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MulConst(x, c) => with_grad!(*x, |gx| {
                for ((a, &b), &m) in gx.iter_mut().zip(g).zip(c) {
                    *a += b * m;
                }
            }),
            Op::Relu(x) => with_grad!(*x, |gx| {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > 0.0 {
                        *a += b;
                    }
                }
            }),
            Op::Log(x) => with_grad!(*x, |gx| {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *a += b / xv;
                }
            }),
            Op::Abs(x) => with_grad!(*x, |gx| {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *a += b * if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }),
            Op::Square(x) => with_grad!(*x, |gx| {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *a += 2.0 * xv * b;
                }
            }),
            Op::ClampMax(x, c) => with_grad!(*x, |gx| {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv < *c {
                        *a += b;
                    }
                }
            }),
            Op::SoftmaxRows(x) => with_grad!(*x, |gx| {
                let c = *node.value.shape().last().unwrap_or(&1);
                for ((gr, yr), gxr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gg), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += y * (gg - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(x) => with_grad!(*x, |gx| {
                let c = *node.value.shape().last().unwrap_or(&1);
                for ((gr, yr), gxr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((o, &gg), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += gg - y.exp() * s;
                    }
                }
            }),
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                freeze_stats,
            } => {
                let d = inv_std.len();
                let t = xhat.len() / d;
                with_grad!(*gain, |gg| {
                    for i in 0..t {
                        for c in 0..d {
                            gg[c] += g[i * d + c] * xhat[i * d + c];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for i in 0..t {
                        for c in 0..d {
                            gb[c] += g[i * d + c];
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    let gain_v = val(*gain);
                    for c in 0..d {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for i in 0..t {
                            let dh = g[i * d + c] * gain_v[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * d + c];
                        }
                        for i in 0..t {
                            let dh = g[i * d + c] * gain_v[c];
                            gx[i * d + c] += if *freeze_stats {
                                inv_std[c] * dh
                            } else {
                                inv_std[c] / t as f64
                                    * (t as f64 * dh - sum_dh - xhat[i * d + c] * sum_dh_h)
                            };
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => with_grad!(*x, |gx| {
                let c = node.value.cols();
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[r * c + j];
                    }
                }
            }),
            Op::ScatterAddRows(x, idx) => with_grad!(*x, |gx| {
                let c = node.value.cols();
                for (r, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[dst * c + j];
                    }
                }
            }),
            Op::GatherElems(x, idx) => with_grad!(*x, |gx| {
                for (&i, &gg) in idx.iter().zip(g) {
                    gx[i] += gg;
                }
            }),
            Op::Reshape(x) => with_grad!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }),
            Op::SliceCols(x, start) => with_grad!(*x, |gx| {
                let (r, len) = (node.value.rows(), node.value.cols());
                let c = nodes[x.0].value.cols();
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g[i * len + j];
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    with_grad!(p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    with_grad!(p, |gp| {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(a, b)| *a += b);
                    });
                    off += n;
                }
            }
            Op::SumAll(x) => with_grad!(*x, |gx| {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }),
            Op::MeanAll(x) => with_grad!(*x, |gx| {
                let n = gx.len().max(1) as f64;
                gx.iter_mut().for_each(|a| *a += g[0] / n);
            }),
            Op::CumsumRows(x) => with_grad!(*x, |gx| {
                let c = *node.value.shape().last().unwrap_or(&1);
                for (gr, gxr) in g.chunks(c).zip(gx.chunks_mut(c)) {
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        acc += gr[j];
                        gxr[j] += acc;
                    }
                }
            }),
            Op::NormalizeRows(x) => with_grad!(*x, |gx| {
                let c = *node.value.shape().last().unwrap_or(&1);
                let xv = val(*x);
                for ((gr, (yr, xr)), gxr) in g
                    .chunks(c)
                    .zip(out.chunks(c).zip(xv.chunks(c)))
                    .zip(gx.chunks_mut(c))
                {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, &gg) in gxr.iter_mut().zip(gr) {
                        *o += (gg - dot) / s;
                    }
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => with_grad!(*logits, |gl| {
                let t = labels.len();
                let c = probs.len() / t.max(1);
                let s = g[0] / t.max(1) as f64;
                for i in 0..t {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * c + j] += s * (probs[i * c + j] - onehot);
                    }
                }
            }),
            Op::Kl(p, d) => {
                let (pv, dv) = (val(*p), val(*d));
                with_grad!(*p, |gp| {
                    for ((a, &pp), &dd) in gp.iter_mut().zip(pv).zip(dv) {
                        if pp > 0.0 {
                            *a += g[0] * ((pp / dd).ln() + 1.0);
                        }
                    }
                });
                with_grad!(*d, |gd| {
                    for ((a, &pp), &dd) in gd.iter_mut().zip(pv).zip(dv) {
                        if pp > 0.0 {
                            *a -= g[0] * pp / dd;
                        }
                    }
                });
            }
            Op::PatternScores {
                q,
                k,
                pattern,
                heads,
                scale,
            } => {
                let d = nodes[q.0].value.cols();
                let dk = d / heads;
                let nnz = pattern.nnz();
                let (qv, kv) = (val(*q), val(*k));
                with_grad!(*q, |gq| {
                    for i in 0..pattern.n_rows() {
                        for e in pattern.row_range(i) {
                            let j = pattern.keys()[e];
                            for h in 0..*heads {
                                let w = scale * g[h * nnz + e];
                                for c in h * dk..(h + 1) * dk {
                                    gq[i * d + c] += w * kv[j * d + c];
                                }
                            }
                        }
                    }
                });
                with_grad!(*k, |gk| {
                    for i in 0..pattern.n_rows() {
                        for e in pattern.row_range(i) {
                            let j = pattern.keys()[e];
                            for h in 0..*heads {
                                let w = scale * g[h * nnz + e];
                                for c in h * dk..(h + 1) * dk {
                                    gk[j * d + c] += w * qv[i * d + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, pattern } => with_grad!(*x, |gx| {
                let nnz = pattern.nnz();
                let heads = node.value.rows();
                for h in 0..heads {
                    for r in 0..pattern.n_rows() {
                        let range = pattern.row_range(r);
                        let (a, b) = (h * nnz + range.start, h * nnz + range.end);
                        let dot: f64 = g[a..b].iter().zip(&out[a..b]).map(|(x, y)| x * y).sum();
                        for e in a..b {
                            gx[e] += out[e] * (g[e] - dot);
                        }
                    }
                }
            }),
            Op::PatternMix {
                p,
                v,
                pattern,
                heads,
            } => {
                let d = nodes[v.0].value.cols();
                let dk = d / heads;
                let nnz = pattern.nnz();
                let (pv, vv) = (val(*p), val(*v));
                with_grad!(*p, |gp| {
                    for i in 0..pattern.n_rows() {
                        for e in pattern.row_range(i) {
                            let j = pattern.keys()[e];
                            for h in 0..*heads {
                                let mut s = 0.0;
                                for c in h * dk..(h + 1) * dk {
                                    s += g[i * d + c] * vv[j * d + c];
                                }
                                gp[h * nnz + e] += s;
                            }
                        }
                    }
                });
                with_grad!(*v, |gv| {
                    for i in 0..pattern.n_rows() {
                        for e in pattern.row_range(i) {
                            let j = pattern.keys()[e];
                            for h in 0..*heads {
                                let w = pv[h * nnz + e];
                                for c in h * dk..(h + 1) * dk {
                                    gv[j * d + c] += w * g[i * d + c];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}
