//! Reverse-mode differentiation over a fixed vocabulary of tensor ops.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node
//! whose parents are earlier nodes, so the node list is already in
//! topological order and the backward sweep is a single reverse pass.

use super::tensor::{matmul_nt_acc, matmul_tn_acc, softmax_row, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x (r×c) + b (1×c)` broadcast over rows.
    AddRowBias(Var, Var),
    Tanh(Var),
    Sum(Var),
    Square(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    /// Each output cell copies one flat source index, or is the constant 1.
    GatherCells(Var, Vec<Option<usize>>),
    /// Cells with `allowed == false` become `-inf` and pass no gradient.
    MaskFill(Var, Vec<bool>),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
/// Intermediate gradients are consumed during the sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(dim_err(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(x), "add_row_bias")?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(dim_err(
                "add_row_bias",
                format!("bias {:?} does not match {} columns", b.shape(), c),
            ));
        }
        let mut out = self.value(x).clone();
        let bd = b.data().to_vec();
        for i in 0..r {
            for (o, bv) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Row softmax. Fails if some row has no finite logit.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = matrix_dims(x, "softmax_rows")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            if !softmax_row(&x.data()[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]) {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = matrix_dims(x, "gather_rows")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(dim_err("gather_rows", format!("row {i} out of {r}")));
            }
            out.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    /// Build an `rows×cols` matrix whose cell `n` is `src.data[index[n]]`,
    /// or 1.0 where `index[n]` is `None`.
    pub fn gather_cells(
        &mut self,
        src: Var,
        rows: usize,
        cols: usize,
        index: Vec<Option<usize>>,
    ) -> Result<Var> {
        let x = self.value(src);
        if index.len() != rows * cols {
            return Err(dim_err("gather_cells", "index length does not match output shape"));
        }
        let mut out = Vec::with_capacity(index.len());
        for idx in &index {
            out.push(match idx {
                Some(k) => *x
                    .data()
                    .get(*k)
                    .ok_or_else(|| dim_err("gather_cells", format!("index {k} out of range")))?,
                None => 1.0,
            });
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(out, Op::GatherCells(src, index)))
    }

    pub fn mask_fill(&mut self, a: Var, allowed: Vec<bool>) -> Result<Var> {
        let x = self.value(a);
        if allowed.len() != x.len() {
            return Err(dim_err("mask_fill", "mask length does not match tensor"));
        }
        let mut out = x.clone();
        for (o, ok) in out.data_mut().iter_mut().zip(&allowed) {
            if !ok {
                *o = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(out, Op::MaskFill(a, allowed)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = matrix_dims(x, "slice_cols")?;
        if start + len > c {
            return Err(dim_err("slice_cols", format!("{start}+{len} exceeds {c} columns")));
        }
        let out = Tensor::from_fn(r, len, |i, j| x.get(i, start + j));
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(dim_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p);
            for i in 0..r {
                out[i * c + off..i * c + off + w].copy_from_slice(x.row(i));
            }
            off += w;
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = matrix_dims(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(dim_err("concat_rows", format!("column counts {c} vs {pc}")));
            }
            data.extend_from_slice(self.value(p).data());
            r += pr;
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; r * k];
                    matmul_nt_acc(g.data(), bv.data(), &mut ga, r, c, k);
                    let mut gb = vec![0.0; k * c];
                    matmul_tn_acc(av.data(), g.data(), &mut gb, r, k, c);
                    accumulate(&mut grads, *a, Tensor::new(vec![r, k], ga)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, c], gb)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.mul(self.value(*b))?);
                    accumulate(&mut grads, *b, g.mul(self.value(*a))?);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddRowBias(x, b) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (o, v) in gb.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::new(shape, gb)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = g.zip_with(y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_with(x, |gv, xv| 2.0 * gv * xv));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![r, c], ga)?);
                }
                Op::GatherRows(a, rows) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut ga = Tensor::zeros(src.shape());
                    for (out_i, &i) in rows.iter().enumerate() {
                        let gd = &g.data()[out_i * c..(out_i + 1) * c];
                        for (o, v) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(gd) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherCells(a, index) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    for (gv, idx) in g.data().iter().zip(index) {
                        if let Some(k) = idx {
                            ga.data_mut()[*k] += gv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskFill(a, allowed) => {
                    let mut ga = g;
                    for (v, ok) in ga.data_mut().iter_mut().zip(allowed) {
                        if !ok {
                            *v = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let w = g.cols();
                    let mut ga = Tensor::zeros(src.shape());
                    for i in 0..g.rows() {
                        ga.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let gp = Tensor::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                        accumulate(&mut grads, *p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let r = shape[0];
                        let gp = Tensor::new(shape, g.data()[off * c..(off + r) * c].to_vec())?;
                        accumulate(&mut grads, *p, gp);
                        off += r;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tensor {
    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data().iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}
