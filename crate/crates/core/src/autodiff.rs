//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`GradTape`] records one forward pass. Nodes are appended in evaluation
//! order, so a reverse sweep over the node list is a valid topological order.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{alignment, input, usage, Result};
use crate::tensor::{ParamSet, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Linear { x: Var, w: Var, b: Var },
    Tanh(Var),
    Relu(Var),
    StackCols(Vec<Var>),
    Concat(Vec<Var>),
    RowNormalize { x: Var, scale: f64 },
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    WeightedSqDist { x: Var, anchor: Vec<f64>, weights: Vec<f64>, scale: f64 },
    Square(Var),
    Sum(Var),
    Add(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded operation graph for a single forward pass.
#[derive(Debug)]
pub struct GradTape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// `input · weight + bias`, with `input` of shape `[batch, d_in]`.
pub fn forward_linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.shape().len() != 2 || weight.shape().len() != 2 || bias.shape().len() != 1 {
        return Err(alignment(format!(
            "linear expects 2-D input/weight and 1-D bias, got {:?} {:?} {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = weight.shape()[1];
    if weight.shape()[0] != d_in || bias.shape()[0] != d_out {
        return Err(alignment(format!(
            "linear shapes do not conform: {:?} x {:?} + {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; n * d_out];
    for r in 0..n {
        let orow = &mut out[r * d_out..(r + 1) * d_out];
        orow.copy_from_slice(b);
        for i in 0..d_in {
            let xi = x[r * d_in + i];
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * d_out..(i + 1) * d_out];
            for (o, &wij) in orow.iter_mut().zip(wrow) {
                *o += xi * wij;
            }
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Row-wise log-softmax, stabilised by subtracting the row maximum.
pub fn log_prob(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(alignment(format!("log_prob expects 2-D logits, got {:?}", logits.shape())));
    }
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(vec![logits.rows(), k], out)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let (m, tail) = log_sum_exp_split(row);
        total += (m - row[y]) + tail;
    }
    Ok(total / labels.len() as f64)
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for e in &mut out[start..start + k] {
            *e /= s;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let (m, tail) = log_sum_exp_split(row);
    m + tail
}

/// Returns `(m, ln(1 + Σ_{j≠argmax} e^{v_j - m}))` with `m` the row maximum;
/// keeping the two parts apart preserves precision when the maximum dominates.
fn log_sum_exp_split(row: &[f64]) -> (f64, f64) {
    let (arg, m) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    (m, rest.ln_1p())
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(alignment(format!("expected 2-D logits, got {:?}", logits.shape())));
    }
    if labels.len() != logits.rows() {
        return Err(alignment(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if labels.is_empty() {
        return Err(input("empty batch"));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(usage("value was not recorded on this tape"));
        }
        Ok(())
    }

    /// Handle of the most recently recorded parameter named `name`.
    pub fn find_param(&self, name: &str) -> Option<Var> {
        self.nodes.iter().rposition(|n| matches!(&n.op, Op::Param(p) if p == name)).map(|index| Var {
            tape: self.id,
            index,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Records a named parameter; its gradient appears under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        self.push(t, Op::Param(name.into()))
    }

    /// Records every entry of `params`, returning handles in canonical order.
    pub fn params(&mut self, params: &ParamSet) -> Vec<(String, Var)> {
        params
            .iter()
            .map(|(n, t)| (n.clone(), self.param(n.clone(), t.clone())))
            .collect()
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let out = forward_linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(x)))
    }

    /// Stacks equal-length vectors as the columns of a `[d, k]` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let d = match cols.first() {
            Some(&c) => {
                self.check(c)?;
                self.value(c).len()
            }
            None => return Err(input("stack_cols needs at least one column")),
        };
        let k = cols.len();
        let mut data = vec![0.0; d * k];
        for (j, &c) in cols.iter().enumerate() {
            self.check(c)?;
            let v = self.value(c);
            if v.len() != d {
                return Err(alignment(format!("column {j} has length {} (expected {d})", v.len())));
            }
            for (i, &x) in v.data().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        let out = Tensor::new(vec![d, k], data)?;
        Ok(self.push(out, Op::StackCols(cols.to_vec())))
    }

    /// Concatenates vectors end to end into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            self.check(p)?;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Divides each row by its Euclidean norm and multiplies by `scale`.
    pub fn row_normalize(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let n = row_norm(row);
            data.extend(row.iter().map(|&v| scale * v / n));
        }
        let out = Tensor::new(vec![xv.rows(), c], data)?;
        Ok(self.push(out, Op::RowNormalize { x, scale }))
    }

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        self.check(logits)?;
        let out = log_prob(self.value(logits))?;
        Ok(self.push(out, Op::LogSoftmax(logits)))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let loss = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `scale * Σ_j weights[j] * (x[j] - anchor[j])²` as a scalar.
    pub fn weighted_sq_dist(
        &mut self,
        x: Var,
        anchor: &[f64],
        weights: &[f64],
        scale: f64,
    ) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x).data();
        if anchor.len() != xv.len() || weights.len() != xv.len() {
            return Err(alignment("anchor/weights length differs from operand"));
        }
        let s: f64 = xv
            .iter()
            .zip(anchor)
            .zip(weights)
            .map(|((&v, &a), &w)| w * (v - a) * (v - a))
            .sum();
        Ok(self.push(
            Tensor::scalar(scale * s),
            Op::WeightedSqDist {
                x,
                anchor: anchor.to_vec(),
                weights: weights.to_vec(),
                scale,
            },
        ))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * v);
        Ok(self.push(out, Op::Square(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(alignment(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Gradient of a scalar `loss` with respect to every recorded parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamSet> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(loss, &Tensor::full(self.value(loss).shape().to_vec(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// to the parameters. The tape is left intact, so this may be called
    /// repeatedly with different seeds.
    pub fn backward_seeded(&self, output: Var, seed: &Tensor) -> Result<ParamSet> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(alignment(format!(
                "seed shape {:?} vs output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.index + 1];
        grads[output.index] = Some(seed.data().to_vec());
        let mut out = ParamSet::new();

        for idx in (0..=output.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match out.get_mut(name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += v;
                            }
                        }
                        None => out.set(name.clone(), t),
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, d_in) = (xv.rows(), xv.cols());
                    let d_out = wv.cols();
                    let mut gx = vec![0.0; n * d_in];
                    let mut gw = vec![0.0; d_in * d_out];
                    let mut gb = vec![0.0; d_out];
                    for r in 0..n {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for (acc, &v) in gb.iter_mut().zip(grow) {
                            *acc += v;
                        }
                        for i in 0..d_in {
                            let wrow = &wv.data()[i * d_out..(i + 1) * d_out];
                            gx[r * d_in + i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            let xi = xv.data()[r * d_in + i];
                            if xi != 0.0 {
                                for (acc, &v) in gw[i * d_out..(i + 1) * d_out].iter_mut().zip(grow) {
                                    *acc += xi * v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Tanh(x) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &y)| gi * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::StackCols(cols) => {
                    let k = cols.len();
                    let d = node.value.rows();
                    for (j, &c) in cols.iter().enumerate() {
                        let gc = (0..d).map(|i| g[i * k + j]).collect();
                        accumulate(&mut grads, c, gc);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut grads, p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::RowNormalize { x, scale } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = Vec::with_capacity(xv.len());
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let grow = &g[r * c..(r + 1) * c];
                        let n = row_norm(row);
                        let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                        gx.extend(
                            row.iter()
                                .zip(grow)
                                .map(|(&xi, &gi)| scale / n * (gi - xi * dot / (n * n))),
                        );
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let c = node.value.cols();
                    let mut gx = Vec::with_capacity(g.len());
                    for r in 0..node.value.rows() {
                        let grow = &g[r * c..(r + 1) * c];
                        let s: f64 = grow.iter().sum();
                        gx.extend(
                            node.value
                                .row(r)
                                .iter()
                                .zip(grow)
                                .map(|(&lp, &gi)| gi - lp.exp() * s),
                        );
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let p = softmax_rows(self.value(*logits));
                    let k = p.cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut gx = p.into_data();
                    for (r, &y) in labels.iter().enumerate() {
                        gx[r * k + y] -= 1.0;
                    }
                    for v in &mut gx {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, gx);
                }
                Op::WeightedSqDist {
                    x,
                    anchor,
                    weights,
                    scale,
                } => {
                    let gx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(anchor)
                        .zip(weights)
                        .map(|((&v, &a), &w)| g[0] * 2.0 * scale * w * (v - a))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let gx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gi, &xi)| 2.0 * xi * gi)
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; self.value(*x).len()]);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
            }
        }

        // Parameters that did not influence the output still get a zero entry.
        for node in &self.nodes[..=output.index] {
            if let Op::Param(name) = &node.op {
                if !out.contains(name) {
                    out.set(name.clone(), Tensor::zeros(node.value.shape().to_vec()));
                }
            }
        }
        Ok(out)
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.index] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
