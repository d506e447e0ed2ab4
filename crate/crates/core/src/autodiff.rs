//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values live in
//! the tape's nodes and are addressed by [`Var`] handles; calling
//! [`Tape::backward`] walks the nodes in reverse order and accumulates
//! gradients into every node that requires them.
//!
//! The op set is deliberately small: what an MLP classifier and its
//! regression/cross-entropy losses need, and nothing else.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from row slices. All rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// One-hot matrix of shape `labels.len() × classes`.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelRange { label, classes });
            }
            data[i * classes + label] = 1.0;
        }
        Ok(Tensor {
            shape: vec![labels.len(), classes],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (the class axis for logits).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `rows × last_dim`.
    pub fn rows(&self) -> usize {
        let k = self.last_dim();
        if k == 0 {
            0
        } else {
            self.data.len() / k
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.last_dim();
        &self.data[i * k..(i + 1) * k]
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let k = self.last_dim();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), k],
            data,
        }
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let k = parts.first().map(|t| t.last_dim()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.last_dim() != k {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: vec![k],
                    right: part.shape.clone(),
                });
            }
            rows += part.rows();
            data.extend_from_slice(&part.data);
        }
        Tensor::new(vec![rows, k], data)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    WeightedMean(Var, Vec<f64>),
    Softmax(Var),
    /// Per-row `-Σ t_c ln max(q_c, floor)`.
    CrossEntropyRows(Var, Var),
    /// Per-row `Σ (a_c - b_c)²`.
    SqDistRows(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::CrossEntropyRows(a, b)
            | Op::SqDistRows(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::WeightedMean(a, _)
            | Op::Softmax(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of one forward pass. Parents always precede children.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the caller guarantees that `a`, `b` and `c` hold m×k, k×n and
    // m×n elements under the given strides; c is row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product `a · b` for 2-D tensors, outside any tape.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (n as isize, 1),
        0.0,
        &mut out,
    );
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with max subtraction, outside any tape.
pub fn softmax_values(z: &Tensor) -> Result<Tensor> {
    if z.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let k = z.last_dim();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "softmax needs at least 2 classes, got {k}"
        )));
    }
    let mut out = z.data.clone();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor {
        shape: z.shape.clone(),
        data: out,
    })
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Same values as `v`, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.last_dim();
        if bv.len() != n || xv.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "add_bias",
                left: xv.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let mut out = xv.clone();
        for row in out.data.chunks_mut(n) {
            add_into(row, &bv.data);
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same_shape("add", av, bv)?;
        let mut out = av.clone();
        add_into(&mut out.data, &bv.data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same_shape("sub", av, bv)?;
        let mut out = av.clone();
        for (o, s) in out.data.iter_mut().zip(&bv.data) {
            *o -= s;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Invalid("mean of an empty tensor".into()));
        }
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    /// `(1/n) Σ w_i a_i` with constant weights.
    pub fn weighted_mean(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let v = self.value(a);
        if v.len() != weights.len() {
            return Err(Error::Dimension {
                op: "weighted_mean",
                left: v.shape.clone(),
                right: vec![weights.len()],
            });
        }
        if v.is_empty() {
            return Err(Error::Invalid("weighted mean of an empty tensor".into()));
        }
        let m = v
            .data
            .iter()
            .zip(&weights)
            .map(|(x, w)| x * w)
            .sum::<f64>()
            / v.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::WeightedMean(a, weights)))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let out = softmax_values(self.value(z))?;
        Ok(self.push(out, Op::Softmax(z)))
    }

    /// Per-sample cross-entropy against an arbitrary probability target.
    pub fn soft_cross_entropy_rows(&mut self, q: Var, target: Var) -> Result<Var> {
        let (qv, tv) = (self.value(q), self.value(target));
        check_same_shape("cross_entropy", qv, tv)?;
        let k = qv.last_dim();
        let rows = qv.rows();
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut loss = 0.0;
            for c in 0..k {
                loss -= tv.data[i * k + c] * qv.data[i * k + c].max(LOG_FLOOR).ln();
            }
            out.push(loss);
        }
        Ok(self.push(Tensor::vector(out), Op::CrossEntropyRows(q, target)))
    }

    /// Per-sample cross-entropy against one-hot labels.
    pub fn cross_entropy_rows(&mut self, q: Var, y: Var) -> Result<Var> {
        validate_one_hot(self.value(y))?;
        self.soft_cross_entropy_rows(q, y)
    }

    /// Batch-mean cross-entropy `mean_i -log q_{i,y_i}`.
    pub fn cross_entropy(&mut self, q: Var, y: Var) -> Result<Var> {
        let rows = self.cross_entropy_rows(q, y)?;
        self.mean(rows)
    }

    pub fn soft_cross_entropy(&mut self, q: Var, target: Var) -> Result<Var> {
        let rows = self.soft_cross_entropy_rows(q, target)?;
        self.mean(rows)
    }

    /// Per-sample squared L2 distance between rows.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same_shape("mse", av, bv)?;
        let k = av.last_dim();
        let out = av
            .data
            .chunks(k.max(1))
            .zip(bv.data.chunks(k.max(1)))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::SqDistRows(a, b)))
    }

    /// Sum of squared differences divided by the batch size.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.sq_dist_rows(a, b)?;
        self.mean(rows)
    }

    /// Accumulates `d loss / d node` into every node that requires grad.
    ///
    /// Gradients add onto whatever a previous call left behind; callers
    /// zero them between optimizer steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let n = loss.0 + 1;
        let mut local: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            local[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let Some(g) = local[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                op => {
                    let contributions = self.vjp(op, &node.value, &g);
                    for (parent, pg) in contributions {
                        if !self.nodes[parent.0].requires_grad {
                            continue;
                        }
                        match local[parent.0].as_mut() {
                            Some(acc) => add_into(acc, &pg),
                            None => local[parent.0] = Some(pg),
                        }
                    }
                }
            }
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        for node in &mut self.nodes[..n] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn vjp(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                let mut res = Vec::new();
                if wants(a) {
                    // g (m×n) · bᵀ (n×k)
                    let mut ga = vec![0.0; m * k];
                    matmul_into(m, n, k, g, (n as isize, 1), &bv.data, (1, n as isize), 0.0, &mut ga);
                    res.push((*a, ga));
                }
                if wants(b) {
                    // aᵀ (k×m) · g (m×n)
                    let mut gb = vec![0.0; k * n];
                    matmul_into(k, m, n, &av.data, (1, k as isize), g, (n as isize, 1), 0.0, &mut gb);
                    res.push((*b, gb));
                }
                res
            }
            Op::AddBias(x, b) => {
                let n = val(b).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    add_into(&mut gb, row);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Relu(x) => {
                let gx = val(x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(a).len()])],
            Op::Mean(a) => {
                let len = val(a).len();
                vec![(*a, vec![g[0] / len as f64; len])]
            }
            Op::WeightedMean(a, w) => {
                let len = w.len() as f64;
                vec![(*a, w.iter().map(|wi| g[0] * wi / len).collect())]
            }
            Op::Softmax(z) => {
                let k = out.last_dim();
                let mut gz = vec![0.0; out.len()];
                for ((q, gr), dst) in out
                    .data
                    .chunks(k)
                    .zip(g.chunks(k))
                    .zip(gz.chunks_mut(k))
                {
                    let dot: f64 = q.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..k {
                        dst[c] = q[c] * (gr[c] - dot);
                    }
                }
                vec![(*z, gz)]
            }
            Op::CrossEntropyRows(q, t) => {
                let (qv, tv) = (val(q), val(t));
                let k = qv.last_dim();
                let mut res = Vec::new();
                if wants(q) {
                    let mut gq = vec![0.0; qv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        for c in 0..k {
                            let p = qv.data[i * k + c];
                            if p > LOG_FLOOR {
                                gq[i * k + c] = -gi * tv.data[i * k + c] / p;
                            }
                        }
                    }
                    res.push((*q, gq));
                }
                if wants(t) {
                    let mut gt = vec![0.0; tv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        for c in 0..k {
                            gt[i * k + c] = -gi * qv.data[i * k + c].max(LOG_FLOOR).ln();
                        }
                    }
                    res.push((*t, gt));
                }
                res
            }
            Op::SqDistRows(a, b) => {
                let (av, bv) = (val(a), val(b));
                let k = av.last_dim().max(1);
                let mut ga = vec![0.0; av.len()];
                for (i, gi) in g.iter().enumerate() {
                    for c in 0..k {
                        let j = i * k + c;
                        ga[j] = 2.0 * gi * (av.data[j] - bv.data[j]);
                    }
                }
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

/// Checks that every row holds exactly one 1 and zeros elsewhere.
pub fn validate_one_hot(y: &Tensor) -> Result<()> {
    let k = y.last_dim();
    for (i, row) in y.data.chunks(k.max(1)).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Invalid(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}
