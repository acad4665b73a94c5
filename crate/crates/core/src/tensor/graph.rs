use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{ParamId, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Scatter {
        weights: Var,
        ids: Vec<usize>,
    },
    Mix {
        gen: Var,
        copy: Var,
        gate: Var,
    },
    SmoothedNll {
        probs: Var,
        targets: Vec<usize>,
        eps: f64,
        floor: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        eps: f64,
        probs: Vec<f64>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of eagerly evaluated operations. Nodes are appended in evaluation
/// order, which is a topological order, and `backward` walks it in reverse.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients from one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

/// `a (m×k) · b (k×n)` accumulated into `out (m×n)`.
///
/// All three kernels add the terms of each output element in the same
/// order however many rows are computed at once, so a row's result does not
/// depend on the rows around it.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for p in 0..k {
                let x = arow[p];
                s0 += x * b0[p];
                s1 += x * b1[p];
                s2 += x * b2[p];
                s3 += x * b3[p];
            }
            let orow = &mut out[i * n + j..i * n + j + 4];
            orow[0] += s0;
            orow[1] += s1;
            orow[2] += s2;
            orow[3] += s3;
            j += 4;
        }
        for j in j..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`; output `k×n`.
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        i += 4;
    }
    for i in i..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Zero/one keep-mask of the given shape; each entry is dropped with
/// probability `rate`.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph with no parameter store, for pure computations.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("param node without a store")
                .get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, rg: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Some(Tensor {
                shape: vec![rows, cols],
                data,
            }),
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn as_matrix(t: &Tensor) -> (usize, usize) {
        (t.rows(), t.cols())
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let (r, c) = Self::as_matrix(&t);
        self.push(r, c, t.data, Op::Leaf, false)
    }

    /// Leaf that records its gradient (used to check input gradients).
    pub fn variable(&mut self, t: Tensor) -> Var {
        let (r, c) = Self::as_matrix(&t);
        self.push(r, c, t.data, Op::Leaf, true)
    }

    /// Parameter leaf. Frozen parameters never require a gradient. Each
    /// parameter appears once per graph, so fan-out accumulates.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("param() on a detached graph");
        let t = store.get(id);
        let (rows, cols) = Self::as_matrix(t);
        self.nodes.push(Node {
            rows,
            cols,
            value: None,
            op: Op::Param(id),
            requires_grad: !store.is_frozen(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", (m, k), (n, k2)));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let (m, n) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(shape_err("add_row", (m, n), self.dims(row)));
        }
        let r = self.data(row);
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), rg))
    }

    /// Adds a constant (masks, position encodings).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if (c.rows(), c.cols()) != (m, n) {
            return Err(shape_err("add_const", (m, n), (c.rows(), c.cols())));
        }
        let out = self.data(a).iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(m, n, out, Op::AddConst(a), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("mul", self.dims(a), self.dims(b)));
        }
        let (m, n) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().map(|x| x * s).collect();
        let rg = self.requires_grad(a);
        self.push(m, n, out, Op::Scale(a, s), rg)
    }

    /// Concatenates along the feature (column) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.dims(parts[0]).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(shape_err("concat_cols", self.dims(parts[0]), self.dims(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(rows, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.dims(parts[0]).1;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(shape_err("concat_rows", self.dims(parts[0]), self.dims(p)));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if start > end || end > n {
            return Err(shape_err("slice_cols", (m, n), (start, end)));
        }
        let w = end - start;
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(m, w, out, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if start > end || end > m {
            return Err(shape_err("slice_rows", (m, n), (start, end)));
        }
        let out = self.data(a)[start * n..end * n].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(end - start, n, out, Op::SliceRows(a, start), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.requires_grad(a);
        self.push(m, n, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Row-wise softmax. `-inf` entries receive zero probability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.requires_grad(a);
        self.push(m, n, out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(shape_err("layer_norm", (m, n), self.dims(gamma)));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims(table);
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    len: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// For each row `r`, distributes `weights[r][i]` onto column `ids[i]` of
    /// a `rows × width` zero matrix. Repeated ids accumulate.
    pub fn scatter(&mut self, weights: Var, ids: &[usize], width: usize) -> Result<Var, TensorError> {
        let (m, t) = self.dims(weights);
        if t != ids.len() {
            return Err(shape_err("scatter", (m, t), (1, ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= width) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: width,
            });
        }
        let w = self.data(weights);
        let mut out = vec![0.0; m * width];
        for r in 0..m {
            for (i, &id) in ids.iter().enumerate() {
                out[r * width + id] += w[r * t + i];
            }
        }
        let rg = self.requires_grad(weights);
        Ok(self.push(
            m,
            width,
            out,
            Op::Scatter {
                weights,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `(1 − gate) · gen + gate · copy`, with `gate` an `m × 1` column.
    pub fn mix(&mut self, gen: Var, copy: Var, gate: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(gen);
        if self.dims(copy) != (m, n) {
            return Err(shape_err("mix", (m, n), self.dims(copy)));
        }
        if self.dims(gate) != (m, 1) {
            return Err(shape_err("mix", (m, 1), self.dims(gate)));
        }
        let g = self.data(gen);
        let c = self.data(copy);
        let p = self.data(gate);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let pr = p[r];
            for k in 0..n {
                out[r * n + k] = (1.0 - pr) * g[r * n + k] + pr * c[r * n + k];
            }
        }
        let rg = self.requires_grad(gen) || self.requires_grad(copy) || self.requires_grad(gate);
        Ok(self.push(m, n, out, Op::Mix { gen, copy, gate }, rg))
    }

    /// Label-smoothed negative log likelihood of probability rows, summed
    /// over rows. `log` is taken of `max(p, floor)`.
    pub fn smoothed_nll(
        &mut self,
        probs: Var,
        targets: &[usize],
        eps: f64,
        floor: f64,
    ) -> Result<Var, TensorError> {
        let (m, v) = self.dims(probs);
        if targets.len() != m {
            return Err(shape_err("smoothed_nll", (m, v), (targets.len(), 1)));
        }
        let p = self.data(probs);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::TargetOutOfRange { target: t, classes: v });
            }
            let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
            for k in 0..v {
                let q = if k == t { 1.0 - eps } else { off };
                if q != 0.0 {
                    loss -= q * p[r * v + k].max(floor).ln();
                }
            }
        }
        let rg = self.requires_grad(probs);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SmoothedNll {
                probs,
                targets: targets.to_vec(),
                eps,
                floor,
            },
            rg,
        ))
    }

    /// Label-smoothed cross entropy from logits, summed over rows:
    /// `−Σ q log softmax(z)` with `q_target = 1 − eps`, others `eps/(V−1)`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (m, v) = self.dims(logits);
        if targets.len() != m {
            return Err(shape_err("cross_entropy", (m, v), (targets.len(), 1)));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::TargetOutOfRange { target: t, classes: v });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (k, z) in row.iter().enumerate() {
                let q = if k == t { 1.0 - eps } else { off };
                loss -= q * (z - lse);
            }
            softmax_in_place(row);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
            rg,
        ))
    }

    /// Unfolds `x (n × c)` into `ceil(n / stride)` rows of `kernel · c`
    /// values, zero padded with `pad` rows on the left. Followed by a matmul
    /// this is a strided 1-D convolution over rows.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (n, c) = self.dims(x);
        let out_rows = n.div_ceil(stride);
        let src = self.data(x);
        let mut out = vec![0.0; out_rows * kernel * c];
        for t in 0..out_rows {
            for j in 0..kernel {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos < 0 || pos as usize >= n {
                    continue;
                }
                let p = pos as usize;
                let dst = t * kernel * c + j * c;
                out[dst..dst + c].copy_from_slice(&src[p * c..(p + 1) * c]);
            }
        }
        let rg = self.requires_grad(x);
        self.push(
            out_rows,
            kernel * c,
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients, TensorError> {
        if self.dims(out) != (1, 1) {
            return Err(shape_err("backward", self.dims(out), (1, 1)));
        }
        if !self.scalar(out).is_finite() {
            return Err(TensorError::NonFiniteValue("backward output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        let mut param_grads = BTreeMap::new();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let (m, n) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                }
                Op::Param(id) => {
                    param_grads.insert(*id, dy);
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.dims(*a);
                    if self.requires_grad(*a) {
                        let bd = self.data(*b);
                        self.acc(&mut grads, *a, |g| matmul_bt_acc(&dy, bd, g, m, n, k));
                    }
                    if self.requires_grad(*b) {
                        let ad = self.data(*a);
                        self.acc(&mut grads, *b, |g| matmul_at_acc(ad, &dy, g, m, k, n));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (_, k) = self.dims(*a);
                    if self.requires_grad(*a) {
                        let bd = self.data(*b);
                        self.acc(&mut grads, *a, |g| matmul_acc(&dy, bd, g, m, n, k));
                    }
                    if self.requires_grad(*b) {
                        let ad = self.data(*a);
                        self.acc(&mut grads, *b, |g| matmul_at_acc(&dy, ad, g, m, n, k));
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            self.acc(&mut grads, v, |g| add_into(g, &dy));
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*a) {
                        self.acc(&mut grads, *a, |g| add_into(g, &dy));
                    }
                    if self.requires_grad(*row) {
                        self.acc(&mut grads, *row, |g| {
                            for chunk in dy.chunks(n) {
                                add_into(g, chunk);
                            }
                        });
                    }
                }
                Op::AddConst(a) => {
                    self.acc(&mut grads, *a, |g| add_into(g, &dy));
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let bd = self.data(*b);
                        self.acc(&mut grads, *a, |g| {
                            for ((g, d), y) in g.iter_mut().zip(&dy).zip(bd) {
                                *g += d * y;
                            }
                        });
                    }
                    if self.requires_grad(*b) {
                        let ad = self.data(*a);
                        self.acc(&mut grads, *b, |g| {
                            for ((g, d), x) in g.iter_mut().zip(&dy).zip(ad) {
                                *g += d * x;
                            }
                        });
                    }
                }
                Op::Scale(a, s) => {
                    self.acc(&mut grads, *a, |g| {
                        for (g, d) in g.iter_mut().zip(&dy) {
                            *g += s * d;
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        if self.requires_grad(p) {
                            self.acc(&mut grads, p, |g| {
                                for r in 0..m {
                                    add_into(
                                        &mut g[r * w..(r + 1) * w],
                                        &dy[r * n + off..r * n + off + w],
                                    );
                                }
                            });
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.dims(p).0 * n;
                        if self.requires_grad(p) {
                            self.acc(&mut grads, p, |g| add_into(g, &dy[off..off + len]));
                        }
                        off += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src_n = self.dims(*a).1;
                    self.acc(&mut grads, *a, |g| {
                        for r in 0..m {
                            add_into(
                                &mut g[r * src_n + start..r * src_n + start + n],
                                &dy[r * n..(r + 1) * n],
                            );
                        }
                    });
                }
                Op::SliceRows(a, start) => {
                    self.acc(&mut grads, *a, |g| {
                        add_into(&mut g[start * n..(start + m) * n], &dy);
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("op value").data();
                    self.acc(&mut grads, *a, |g| {
                        for ((g, d), y) in g.iter_mut().zip(&dy).zip(y) {
                            *g += d * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("op value").data();
                    self.acc(&mut grads, *a, |g| {
                        for ((g, d), y) in g.iter_mut().zip(&dy).zip(y) {
                            *g += d * (1.0 - y * y);
                        }
                    });
                }
                Op::Gelu(a) => {
                    let x = self.data(*a);
                    self.acc(&mut grads, *a, |g| {
                        for ((g, d), x) in g.iter_mut().zip(&dy).zip(x) {
                            *g += d * gelu_grad(*x);
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("op value").data();
                    self.acc(&mut grads, *a, |g| {
                        for r in 0..m {
                            let yr = &y[r * n..(r + 1) * n];
                            let dr = &dy[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                g[r * n + c] += yr[c] * (dr[c] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gd = self.data(*gamma);
                    if self.requires_grad(*gamma) {
                        self.acc(&mut grads, *gamma, |g| {
                            for r in 0..m {
                                for c in 0..n {
                                    g[c] += dy[r * n + c] * xhat[r * n + c];
                                }
                            }
                        });
                    }
                    if self.requires_grad(*beta) {
                        self.acc(&mut grads, *beta, |g| {
                            for chunk in dy.chunks(n) {
                                add_into(g, chunk);
                            }
                        });
                    }
                    if self.requires_grad(*x) {
                        self.acc(&mut grads, *x, |g| {
                            let nf = n as f64;
                            for r in 0..m {
                                let mut sum_d = 0.0;
                                let mut sum_dx = 0.0;
                                for c in 0..n {
                                    let dh = dy[r * n + c] * gd[c];
                                    sum_d += dh;
                                    sum_dx += dh * xhat[r * n + c];
                                }
                                for c in 0..n {
                                    let dh = dy[r * n + c] * gd[c];
                                    g[r * n + c] += inv_std[r] / nf
                                        * (nf * dh - sum_d - xhat[r * n + c] * sum_dx);
                                }
                            }
                        });
                    }
                }
                Op::Gather { table, ids } => {
                    self.acc(&mut grads, *table, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * n..(id + 1) * n], &dy[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::Scatter { weights, ids } => {
                    let t = ids.len();
                    self.acc(&mut grads, *weights, |g| {
                        for r in 0..m {
                            for (i, &id) in ids.iter().enumerate() {
                                g[r * t + i] += dy[r * n + id];
                            }
                        }
                    });
                }
                Op::Mix { gen, copy, gate } => {
                    let p = self.data(*gate);
                    if self.requires_grad(*gen) {
                        self.acc(&mut grads, *gen, |g| {
                            for r in 0..m {
                                for k in 0..n {
                                    g[r * n + k] += (1.0 - p[r]) * dy[r * n + k];
                                }
                            }
                        });
                    }
                    if self.requires_grad(*copy) {
                        self.acc(&mut grads, *copy, |g| {
                            for r in 0..m {
                                for k in 0..n {
                                    g[r * n + k] += p[r] * dy[r * n + k];
                                }
                            }
                        });
                    }
                    if self.requires_grad(*gate) {
                        let gd = self.data(*gen);
                        let cd = self.data(*copy);
                        self.acc(&mut grads, *gate, |g| {
                            for r in 0..m {
                                let mut s = 0.0;
                                for k in 0..n {
                                    s += dy[r * n + k] * (cd[r * n + k] - gd[r * n + k]);
                                }
                                g[r] += s;
                            }
                        });
                    }
                }
                Op::SmoothedNll {
                    probs,
                    targets,
                    eps,
                    floor,
                } => {
                    let (_, v) = self.dims(*probs);
                    let p = self.data(*probs);
                    let up = dy[0];
                    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
                    self.acc(&mut grads, *probs, |g| {
                        for (r, &t) in targets.iter().enumerate() {
                            for k in 0..v {
                                let pk = p[r * v + k];
                                if pk > *floor {
                                    let q = if k == t { 1.0 - eps } else { off };
                                    g[r * v + k] -= up * q / pk;
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    eps,
                    probs,
                } => {
                    let (_, v) = self.dims(*logits);
                    let up = dy[0];
                    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
                    self.acc(&mut grads, *logits, |g| {
                        for (r, &t) in targets.iter().enumerate() {
                            for k in 0..v {
                                let q = if k == t { 1.0 - eps } else { off };
                                g[r * v + k] += up * (probs[r * v + k] - q);
                            }
                        }
                    });
                }
                Op::Im2Col {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (rows_in, c) = self.dims(*x);
                    self.acc(&mut grads, *x, |g| {
                        for t in 0..m {
                            for j in 0..*kernel {
                                let pos = (t * stride + j) as isize - *pad as isize;
                                if pos < 0 || pos as usize >= rows_in {
                                    continue;
                                }
                                let p = pos as usize;
                                let src = t * kernel * c + j * c;
                                add_into(&mut g[p * c..(p + 1) * c], &dy[src..src + c]);
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let d = dy[0];
                    self.acc(&mut grads, *a, |g| g.iter_mut().for_each(|x| *x += d));
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            nodes: grads,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let (r, c) = self.dims(v);
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; r * c]);
        f(g);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_and_sigmoid_basics() {
        let mut g = Graph::detached();
        let x = g.input(m(1, 2, &[0.0, 0.0]));
        let s = g.softmax_rows(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let z = g.input(Tensor::scalar(0.0));
        let sig = g.sigmoid(z);
        assert_eq!(g.scalar(sig), 0.5);
    }

    #[test]
    fn concat_feature_shape() {
        let mut g = Graph::detached();
        let a = g.input(Tensor::zeros(&[3, 4]));
        let b = g.input(Tensor::full(&[3, 4], 1.0));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.dims(c), (3, 8));
        assert_eq!(g.value(c).row_slice(1), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut g = Graph::detached();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut g = Graph::detached();
        let x = g.variable(m(1, 2, &[3.0, -1.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.var(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::detached();
        let a = g.input(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(m(2, 1, &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        let bt = g.input(m(1, 2, &[5.0, 6.0]));
        let c2 = g.matmul_bt(a, bt).unwrap();
        assert_eq!(g.value(c2).data(), &[17.0, 39.0]);
    }

    #[test]
    fn scatter_accumulates_duplicates() {
        let mut g = Graph::detached();
        let w = g.input(m(1, 2, &[0.4, 0.6]));
        let c = g.scatter(w, &[7, 7], 10).unwrap();
        let mut expected = vec![0.0; 10];
        expected[7] = 1.0;
        assert_eq!(g.value(c).data(), expected.as_slice());
    }

    #[test]
    fn im2col_stride_arithmetic() {
        let mut g = Graph::detached();
        for (frames, expect) in [(8, 4), (9, 5), (1, 1)] {
            let x = g.input(Tensor::zeros(&[frames, 3]));
            let u = g.im2col(x, 3, 2, 1);
            assert_eq!(g.dims(u), (expect, 9));
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::detached();
        for v in [2usize, 5, 17] {
            let z = g.input(Tensor::zeros(&[1, v]));
            let loss = g.cross_entropy(z, &[0], 0.1).unwrap();
            assert!((g.scalar(loss) - (v as f64).ln()).abs() < 1e-12);
        }
        let z = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.cross_entropy(z, &[3], 0.1),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_mask_is_binary() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mask = dropout_mask(4, 5, 0.5, &mut rng);
        assert!(mask.data().iter().all(|&x| x == 0.0 || x == 1.0));
        let none = dropout_mask(4, 5, 0.0, &mut rng);
        assert!(none.data().iter().all(|&x| x == 1.0));
    }
}
