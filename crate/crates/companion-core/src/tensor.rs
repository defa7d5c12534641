//! Dense f64 tensors and reverse-mode autodiff on an explicit tape.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! replays them in reverse, accumulating gradients by sum over all uses.
//! Tensors without a node id are constants: no gradient flows into them and
//! operations whose inputs are all constants are not recorded at all. A tape
//! lives for one training step and is then dropped.

use crate::error::{Error, Result};
use std::collections::HashMap;

pub type NodeId = usize;

/// Dense row-major tensor of 64-bit floats, optionally bound to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// Copy with the tape binding removed; used for stop-gradient targets.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
        }
    }
}

/// Row-wise numerically stabilized log-softmax on raw storage. Shared by
/// the tape op and by constant-space callers so identical input bytes give
/// identical output bytes on both paths.
pub(crate) fn log_softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &x in row {
            sum += (x - max).exp();
        }
        let lse = max + sum.ln();
        for (j, &x) in row.iter().enumerate() {
            out[r * cols + j] = x - lse;
        }
    }
    out
}

/// One operand of a recorded op: its node (if differentiable) and any
/// values the backward pass needs.
#[derive(Debug)]
struct Arg {
    node: Option<NodeId>,
    saved: Vec<f64>,
}

impl Arg {
    fn of(t: &Tensor) -> Self {
        Arg {
            node: t.node,
            saved: Vec::new(),
        }
    }

    fn saving(t: &Tensor) -> Self {
        Arg {
            node: t.node,
            saved: t.data.clone(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Add { a: Arg, b: Arg },
    Sub { a: Arg, b: Arg },
    Mul { a: Arg, b: Arg },
    Scale { a: Arg, factor: f64 },
    AddScalar { a: Arg },
    Matmul { a: Arg, b: Arg, m: usize, k: usize, n: usize },
    MatmulNt { a: Arg, b: Arg, m: usize, k: usize, n: usize },
    AddRowVec { mat: Arg, vec: Arg, rows: usize, cols: usize },
    Relu { a: Arg },
    Abs { a: Arg },
    LogSoftmax { a: Arg, out: Vec<f64>, rows: usize, cols: usize },
    SumAll { a: Arg, len: usize },
    NllMean { a: Arg, labels: Vec<usize>, cols: usize },
    RowL2Norm { a: Arg, norms: Vec<f64>, rows: usize, cols: usize },
    Recip { a: Arg, out: Vec<f64> },
    ScaleRows { a: Arg, v: Arg, rows: usize, cols: usize },
    GatherRows { a: Arg, indices: Vec<usize>, src_rows: usize, cols: usize },
}

#[derive(Debug)]
struct Record {
    out: NodeId,
    out_len: usize,
    op: Op,
}

/// Gradients of a scalar output with respect to every registered leaf.
#[derive(Debug)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(&node)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Wengert tape. Single-threaded; rebuilt for every training step.
#[derive(Debug, Default)]
pub struct Tape {
    n_nodes: usize,
    leaves: Vec<(NodeId, Vec<usize>)>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn fresh_node(&mut self) -> NodeId {
        let id = self.n_nodes;
        self.n_nodes += 1;
        id
    }

    /// Register a differentiable input. The returned tensor carries the
    /// new node id; the original is untouched.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.fresh_node();
        self.leaves.push((id, t.shape.clone()));
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(id),
        }
    }

    /// Finish a forward op: record it when any input was differentiable,
    /// otherwise return the value as a constant.
    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value out of a forward op"
        );
        let differentiable = match &op {
            Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Matmul { a, b, .. }
            | Op::MatmulNt { a, b, .. }
            | Op::ScaleRows { a, v: b, .. } => a.node.is_some() || b.node.is_some(),
            Op::AddRowVec { mat, vec, .. } => mat.node.is_some() || vec.node.is_some(),
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Relu { a }
            | Op::Abs { a }
            | Op::LogSoftmax { a, .. }
            | Op::SumAll { a, .. }
            | Op::NllMean { a, .. }
            | Op::RowL2Norm { a, .. }
            | Op::Recip { a, .. }
            | Op::GatherRows { a, .. } => a.node.is_some(),
        };
        if !differentiable {
            return Tensor {
                shape,
                data,
                node: None,
            };
        }
        let out = self.fresh_node();
        self.records.push(Record {
            out,
            out_len: data.len(),
            op,
        });
        Tensor {
            shape,
            data,
            node: Some(out),
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Ok(self.emit(
            a.shape.clone(),
            data,
            Op::Add {
                a: Arg::of(a),
                b: Arg::of(b),
            },
        ))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        Ok(self.emit(
            a.shape.clone(),
            data,
            Op::Sub {
                a: Arg::of(a),
                b: Arg::of(b),
            },
        ))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        Ok(self.emit(
            a.shape.clone(),
            data,
            Op::Mul {
                a: Arg::saving(a),
                b: Arg::saving(b),
            },
        ))
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Tensor {
        let data = a.data.iter().map(|x| x * factor).collect();
        self.emit(
            a.shape.clone(),
            data,
            Op::Scale {
                a: Arg::of(a),
                factor,
            },
        )
    }

    pub fn add_scalar(&mut self, a: &Tensor, constant: f64) -> Tensor {
        let data = a.data.iter().map(|x| x + constant).collect();
        self.emit(a.shape.clone(), data, Op::AddScalar { a: Arg::of(a) })
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims {ka} vs {kb} (shapes {:?} x {:?})",
                a.shape, b.shape
            )));
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a.data[i * k + p];
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(self.emit(
            vec![m, n],
            out,
            Op::Matmul {
                a: Arg::saving(a),
                b: Arg::saving(b),
                m,
                k,
                n,
            },
        ))
    }

    /// `a[m x k] . b^T` where `b` is `[n x k]`; the layout used by affine
    /// layers whose weights are stored `out_dim x in_dim`.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2()?;
        let (n, kb) = b.dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dims {ka} vs {kb} (shapes {:?} x {:?}^T)",
                a.shape, b.shape
            )));
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    s += av * bv;
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.emit(
            vec![m, n],
            out,
            Op::MatmulNt {
                a: Arg::saving(a),
                b: Arg::saving(b),
                m,
                k,
                n,
            },
        ))
    }

    /// `mat[r x c] + vec[c]` broadcast over rows (bias add).
    pub fn add_row_vec(&mut self, mat: &Tensor, vec: &Tensor) -> Result<Tensor> {
        let (rows, cols) = mat.dims2()?;
        if vec.shape != [cols] {
            return Err(Error::Shape(format!(
                "add_row_vec: matrix {:?} with vector {:?}",
                mat.shape, vec.shape
            )));
        }
        let mut data = mat.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vec.data[c];
            }
        }
        Ok(self.emit(
            vec![rows, cols],
            data,
            Op::AddRowVec {
                mat: Arg::of(mat),
                vec: Arg::of(vec),
                rows,
                cols,
            },
        ))
    }

    /// Elementwise max(0, x). Gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|&x| x.max(0.0)).collect();
        self.emit(a.shape.clone(), data, Op::Relu { a: Arg::saving(a) })
    }

    /// Elementwise |x|. Gradient at exactly 0 is 0.
    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|&x| x.abs()).collect();
        self.emit(a.shape.clone(), data, Op::Abs { a: Arg::saving(a) })
    }

    /// Row-wise log-softmax of a `[b x K]` matrix, K >= 2.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.dims2()?;
        if cols < 2 {
            return Err(Error::Shape(format!(
                "log_softmax needs at least 2 classes, got {cols}"
            )));
        }
        let out = log_softmax_rows(&a.data, rows, cols);
        Ok(self.emit(
            vec![rows, cols],
            out.clone(),
            Op::LogSoftmax {
                a: Arg::of(a),
                out,
                rows,
                cols,
            },
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let len = a.data.len();
        let total: f64 = a.data.iter().sum();
        self.emit(
            vec![1],
            vec![total],
            Op::SumAll {
                a: Arg::of(a),
                len,
            },
        )
    }

    /// Mean negative log-probability of the labelled entries:
    /// `-(1/b) * sum_i logp[i, labels[i]]`.
    pub fn nll_mean(&mut self, logp: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (rows, cols) = logp.dims2()?;
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "nll_mean: {rows} rows with {} labels",
                labels.len()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(Error::Input(format!(
                    "label {y} out of range for {cols} classes (row {i})"
                )));
            }
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logp.data[i * cols + y])
            .sum();
        let value = -total / rows as f64;
        Ok(self.emit(
            vec![1],
            vec![value],
            Op::NllMean {
                a: Arg::of(logp),
                labels: labels.to_vec(),
                cols,
            },
        ))
    }

    /// Per-row Euclidean norm of a `[b x K]` matrix, as a length-b vector.
    pub fn row_l2_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.dims2()?;
        let mut norms = vec![0.0; rows];
        for (r, norm) in norms.iter_mut().enumerate() {
            let row = &a.data[r * cols..(r + 1) * cols];
            *norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        Ok(self.emit(
            vec![rows],
            norms.clone(),
            Op::RowL2Norm {
                a: Arg::saving(a),
                norms,
                rows,
                cols,
            },
        ))
    }

    /// Elementwise reciprocal. Zero entries are an input error.
    pub fn recip(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.data.contains(&0.0) {
            return Err(Error::Input("recip of a zero entry".into()));
        }
        let out: Vec<f64> = a.data.iter().map(|x| 1.0 / x).collect();
        Ok(self.emit(
            a.shape.clone(),
            out.clone(),
            Op::Recip {
                a: Arg::of(a),
                out,
            },
        ))
    }

    /// Multiply row i of `a[r x c]` by `v[i]`.
    pub fn scale_rows(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.dims2()?;
        if v.shape != [rows] {
            return Err(Error::Shape(format!(
                "scale_rows: matrix {:?} with vector {:?}",
                a.shape, v.shape
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = a.data[r * cols + c] * v.data[r];
            }
        }
        Ok(self.emit(
            vec![rows, cols],
            data,
            Op::ScaleRows {
                a: Arg::saving(a),
                v: Arg::saving(v),
                rows,
                cols,
            },
        ))
    }

    /// Select rows of `a` by index; duplicate indices accumulate gradient.
    pub fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (src_rows, cols) = a.dims2()?;
        for &i in indices {
            if i >= src_rows {
                return Err(Error::Input(format!(
                    "gather_rows: index {i} out of range for {src_rows} rows"
                )));
            }
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
        }
        Ok(self.emit(
            vec![indices.len(), cols],
            data,
            Op::GatherRows {
                a: Arg::of(a),
                indices: indices.to_vec(),
                src_rows,
                cols,
            },
        ))
    }

    /// Reverse pass from a scalar output. Returns a gradient for every
    /// registered leaf, zero where the output does not depend on it.
    /// A constant scalar (no node) yields all-zero gradients.
    pub fn backward(&self, output: &Tensor) -> Result<GradMap> {
        if output.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                output.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.n_nodes];
        if let Some(id) = output.node {
            if id >= self.n_nodes {
                return Err(Error::Contract(
                    "output tensor does not live on this tape".into(),
                ));
            }
            grads[id] = Some(vec![1.0]);
        }

        for rec in self.records.iter().rev() {
            let out_grad = match grads[rec.out].take() {
                Some(g) => g,
                None => continue,
            };
            debug_assert_eq!(out_grad.len(), rec.out_len);
            rec.op.backward(&out_grad, &mut grads);
            grads[rec.out] = Some(out_grad);
        }

        let mut map = HashMap::with_capacity(self.leaves.len());
        for (id, shape) in &self.leaves {
            let numel: usize = shape.iter().product();
            let data = grads[*id].take().unwrap_or_else(|| vec![0.0; numel]);
            map.insert(
                *id,
                Tensor {
                    shape: shape.clone(),
                    data,
                    node: None,
                },
            );
        }
        Ok(GradMap { grads: map })
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    node: Option<NodeId>,
    len: usize,
    write: impl FnOnce(&mut [f64]),
) {
    if let Some(id) = node {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        write(slot);
    }
}

impl Op {
    fn backward(&self, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match self {
            Op::Add { a, b } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                accumulate(grads, b.node, g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                accumulate(grads, b.node, g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(&b.saved) {
                        *dv += gv * bv;
                    }
                });
                accumulate(grads, b.node, g.len(), |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(&a.saved) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale { a, factor } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv * factor;
                    }
                });
            }
            Op::AddScalar { a } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // dA = G * B^T
                accumulate(grads, a.node, m * k, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &b.saved[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                s += gv * bv;
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T * G
                accumulate(grads, b.node, k * n, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a.saved[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut d[p * n..(p + 1) * n];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::MatmulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // out = A . B^T, so dA = G . B and dB = G^T . A
                accumulate(grads, a.node, m * k, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let brow = &b.saved[j * k..(j + 1) * k];
                            let drow = &mut d[i * k..(i + 1) * k];
                            for (dv, bv) in drow.iter_mut().zip(brow) {
                                *dv += gij * bv;
                            }
                        }
                    }
                });
                accumulate(grads, b.node, n * k, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let arow = &a.saved[i * k..(i + 1) * k];
                            let drow = &mut d[j * k..(j + 1) * k];
                            for (dv, av) in drow.iter_mut().zip(arow) {
                                *dv += gij * av;
                            }
                        }
                    }
                });
            }
            Op::AddRowVec {
                mat,
                vec,
                rows,
                cols,
            } => {
                accumulate(grads, mat.node, rows * cols, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                accumulate(grads, vec.node, *cols, |d| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Relu { a } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(&a.saved) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Abs { a } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(&a.saved) {
                        if *xv > 0.0 {
                            *dv += gv;
                        } else if *xv < 0.0 {
                            *dv -= gv;
                        }
                    }
                });
            }
            Op::LogSoftmax { a, out, rows, cols } => {
                accumulate(grads, a.node, rows * cols, |d| {
                    for r in 0..*rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let orow = &out[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..*cols {
                            d[r * cols + c] += grow[c] - orow[c].exp() * gsum;
                        }
                    }
                });
            }
            Op::SumAll { a, len } => {
                accumulate(grads, a.node, *len, |d| {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                });
            }
            Op::NllMean { a, labels, cols } => {
                let scale = -g[0] / labels.len() as f64;
                accumulate(grads, a.node, labels.len() * cols, |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * cols + y] += scale;
                    }
                });
            }
            Op::RowL2Norm {
                a,
                norms,
                rows,
                cols,
            } => {
                accumulate(grads, a.node, rows * cols, |d| {
                    for r in 0..*rows {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let coeff = g[r] / norms[r];
                        for c in 0..*cols {
                            d[r * cols + c] += coeff * a.saved[r * cols + c];
                        }
                    }
                });
            }
            Op::Recip { a, out } => {
                accumulate(grads, a.node, g.len(), |d| {
                    for ((dv, gv), ov) in d.iter_mut().zip(g).zip(out) {
                        *dv -= gv * ov * ov;
                    }
                });
            }
            Op::ScaleRows { a, v, rows, cols } => {
                accumulate(grads, a.node, rows * cols, |d| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[r * cols + c] += g[r * cols + c] * v.saved[r];
                        }
                    }
                });
                accumulate(grads, v.node, *rows, |d| {
                    for r in 0..*rows {
                        let mut s = 0.0;
                        for c in 0..*cols {
                            s += g[r * cols + c] * a.saved[r * cols + c];
                        }
                        d[r] += s;
                    }
                });
            }
            Op::GatherRows {
                a,
                indices,
                src_rows,
                cols,
            } => {
                accumulate(grads, a.node, src_rows * cols, |d| {
                    for (j, &i) in indices.iter().enumerate() {
                        for c in 0..*cols {
                            d[i * cols + c] += g[j * cols + c];
                        }
                    }
                });
            }
        }
    }
}
