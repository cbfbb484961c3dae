use std::sync::Arc;

use super::kernels::{self, gelu, gelu_grad, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rectangular cell range `[r0, r1) × [c0, c1)` of a row-major grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellRange {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CellRange {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    /// Flat cell indices covered, in raster order, for a grid `width` cells wide.
    pub fn cells(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.r0..self.r1).flat_map(move |r| (self.c0..self.c1).map(move |c| r * width + c))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    /// Masked entries have probability zero, so the backward rule needs no mask.
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    AvgPool {
        x: Var,
        width: usize,
        bins: Arc<[CellRange]>,
    },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Arc<[usize]>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// An append-only record of primitive operations, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// Records a constant input. Its gradient is never computed.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), ng))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = kernels::transpose(self.value(b), n, k);
        let value = kernels::matmul(self.value(a), &bt, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), ng))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix (bias and
    /// position rows). This is the only broadcasting primitive.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = cols_of(self.shape(x));
        if self.value(row).len() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let value = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let ng = self.ng(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Sigmoid(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), ng)
    }

    /// `z ⊙ σ(z)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let s = self.sigmoid(x);
        self.mul(x, s).expect("swish shapes agree")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, usize::MAX)
    }

    /// Row-wise softmax in which row `i` only sees columns `0..=i + offset`.
    pub fn masked_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "softmax_rows")?;
        let mut value = vec![0.0; r * c];
        for (i, (xr, out)) in self
            .value(x)
            .chunks(c)
            .zip(value.chunks_mut(c))
            .enumerate()
        {
            let visible = i.saturating_add(offset).saturating_add(1).min(c);
            let xr = &xr[..visible];
            let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(xr) {
                *o = (v - m).exp();
                z += *o;
            }
            out[..visible].iter_mut().for_each(|o| *o /= z);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![r, c], value, Op::MaskedSoftmax(x), ng))
    }

    /// Per-row layer normalisation with population variance, followed by
    /// the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let c = *self.shape(x).last().unwrap();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut normalized = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for (i, (xr, nr)) in xv.chunks(c).zip(normalized.chunks_mut(c)).enumerate() {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for (n, &v) in nr.iter_mut().zip(xr) {
                *n = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let value = normalized
            .chunks(c)
            .flat_map(|nr| nr.iter().zip(g).zip(b).map(|((n, g), b)| g * n + b))
            .collect();
        let ng = self.ng(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            ng,
        ))
    }

    /// Averages the rows of an `L×C` cell matrix (`L = height·width`,
    /// row-major cells) within each bin; output is `bins.len()×C`.
    pub fn avg_pool(&mut self, x: Var, width: usize, bins: Arc<[CellRange]>) -> Result<Var> {
        let (l, c) = self.matrix_dims(x, "avg_pool")?;
        if width == 0 || l % width != 0 || bins.iter().any(|b| b.r1 * width > l || b.c1 > width) {
            return Err(Error::dim("avg_pool", self.shape(x), &[width]));
        }
        let xv = self.value(x);
        let mut value = vec![0.0; bins.len() * c];
        for (bin, out) in bins.iter().zip(value.chunks_mut(c)) {
            for cell in bin.cells(width) {
                add_into(out, &xv[cell * c..(cell + 1) * c]);
            }
            let inv = 1.0 / bin.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![bins.len(), c], value, Op::AvgPool { x, width, bins }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let c = cols_of(self.shape(first));
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.shape(p)[0];
            value.extend_from_slice(self.value(p));
        }
        debug_assert_eq!(value.len(), rows * c);
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(shape, value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x);
        if start >= end || end > shape[0] {
            return Err(Error::contract(format!(
                "row slice {start}..{end} out of range for {shape:?}"
            )));
        }
        let c = cols_of(shape);
        let mut out_shape = shape.to_vec();
        out_shape[0] = end - start;
        let value = self.value(x)[start * c..end * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, value, Op::SliceRows(x, start), ng))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: impl Into<Arc<[usize]>>) -> Result<Var> {
        let indices: Arc<[usize]> = indices.into();
        let shape = self.shape(table);
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::contract(format!(
                "gather index out of range for table {shape:?}"
            )));
        }
        let c = cols_of(shape);
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let tv = self.value(table);
        let value = indices
            .iter()
            .flat_map(|&i| tv[i * c..(i + 1) * c].iter().copied())
            .collect();
        let ng = self.ng(&[table]);
        Ok(self.push(out_shape, value, Op::Gather(table, indices), ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[B×V]`, using a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!(
                "target {t} outside vocabulary of {v}"
            )));
        }
        let mut probs = vec![0.0; b * v];
        let mut total = 0.0;
        for ((row, p), &t) in self.value(logits).chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - m).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            total += m + z.ln() - row[t];
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / b as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `root`, returning `d root / d node` for
    /// every differentiable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes[..=root.0].iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if n.needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    let bt = kernels::transpose(bv, k, n);
                    kernels::matmul_acc(g, &bt, d, m, n, k);
                });
                acc(*b, &mut |d| {
                    let at = kernels::transpose(av, m, k);
                    kernels::matmul_acc(&at, g, d, k, m, n);
                });
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ ; da = g·b ; db = gᵀ·a
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| kernels::matmul_acc(g, bv, d, m, n, k));
                acc(*b, &mut |d| {
                    let gt = kernels::transpose(g, m, n);
                    kernels::matmul_acc(&gt, av, d, n, m, k);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for gr in g.chunks(d.len()) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += g * s;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_grad(x);
                    }
                })
            }
            Op::MaskedSoftmax(x) => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma);
                acc(*beta, &mut |d| {
                    for gr in g.chunks(c) {
                        add_into(d, gr);
                    }
                });
                acc(*gamma, &mut |d| {
                    for (gr, nr) in g.chunks(c).zip(normalized.chunks(c)) {
                        for ((d, g), n) in d.iter_mut().zip(gr).zip(nr) {
                            *d += g * n;
                        }
                    }
                });
                acc(*x, &mut |d| {
                    let mut dn = vec![0.0; c];
                    for (((dr, gr), nr), &s) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(normalized.chunks(c))
                        .zip(rstd)
                    {
                        for ((dn, g), w) in dn.iter_mut().zip(gr).zip(gv) {
                            *dn = g * w;
                        }
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n =
                            dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, dn), n) in dr.iter_mut().zip(&dn).zip(nr) {
                            *d += s * (dn - mean_dn - n * mean_dn_n);
                        }
                    }
                });
            }
            Op::AvgPool { x, width, bins } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (bin, gr) in bins.iter().zip(g.chunks(c)) {
                        let inv = 1.0 / bin.len() as f64;
                        for cell in bin.cells(*width) {
                            for (d, g) in d[cell * c..(cell + 1) * c].iter_mut().zip(gr) {
                                *d += g * inv;
                            }
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => acc(*x, &mut |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let c = cols_of(&node.shape);
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::Gather(table, indices) => {
                let c = cols_of(&node.shape);
                acc(*table, &mut |d| {
                    for (&i, gr) in indices.iter().zip(g.chunks(c)) {
                        add_into(&mut d[i * c..(i + 1) * c], gr);
                    }
                })
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let s = g[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for ((dr, pr), &t) in d.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        for (d, p) in dr.iter_mut().zip(pr) {
                            *d += s * p;
                        }
                        dr[t] -= s;
                    }
                })
            }
        }
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` if `v` is not a differentiable leaf or the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s accumulator. A leaf the root
    /// does not depend on contributes zero.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None if target.requires_grad() => Ok(()),
            None => Err(Error::contract("tensor does not require grad")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.constant(&Tensor::zeros(vec![2, 2]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(m, z).unwrap();
        assert_eq!(tape.value(q), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(vec![1]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);
        let ge = tape.gelu(z);
        assert_eq!(tape.value(ge), &[0.0]);
        let a = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(&t(&[3], &[4.0, 5.0, 6.0]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m), &[4.0, 10.0, 18.0]);
        let bad = tape.constant(&Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn masked_softmax_hides_future_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3, 3], &[1.0, 5.0, 9.0, 1.0, 1.0, 9.0, 0.0, 0.0, 0.0]));
        let s = tape.masked_softmax(x, 0).unwrap();
        let v = tape.value(s);
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert!((v[6] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones_and_quadratic_gives_x() {
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -4.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(xv).unwrap(), x.data());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut w = t(&[2], &[1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let s = tape.sum(v);
        for _ in 0..3 {
            tape.backward(s).unwrap().accumulate_into(v, &mut w).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::full(vec![2], 3.0));
        let x = tape.leaf(&Tensor::full(vec![2], 1.0));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(vec![3, 7]));
        let l = tape.cross_entropy(z, &[0, 3, 6]).unwrap();
        assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(z, &[0, 3, 7]).is_err());
    }
}
