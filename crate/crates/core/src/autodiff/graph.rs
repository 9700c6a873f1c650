use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CausalMask(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so inputs
/// always precede their consumers. Only applications with at least one
/// grad-requiring input keep their operator; everything else is stored as
/// a constant leaf.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

/// c[m,n] (+)= a[m,k] · b[k,n], where either operand can be read transposed
/// through its strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is stored as [m,k] (or [k,m] when transposed), likewise b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by the callers to cover m*k, k*n
    // and m*n elements with the given strides.
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

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that kept their operator (i.e. were recorded for backward).
    pub fn recorded(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a leaf; gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix("transpose", x)?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// Elementwise sum of equal shapes, or a bias-add when `b` is 1-D and
    /// matches the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            return Ok(self.push(Tensor::from_parts(sa, data), Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let n = sb[0];
            let bias = self.data(b);
            let data = self
                .data(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bias[i % n])
                .collect();
            return Ok(self.push(Tensor::from_parts(sa, data), Op::AddBias(a, b), rg));
        }
        Err(shape_err("add", format!("{sa:?} vs {sb:?}")))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x.min(*y)).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Minimum(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((i, v)) = self
            .data(x)
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0) || !v.is_finite())
        {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("element {i} = {v}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |a| a.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), t.cols()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor::from_parts(t.shape().to_vec(), log_softmax_rows(t.data(), t.cols()));
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Normalizes over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` ([vocab, dim]) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.as_matrix("embedding_lookup", table)?;
        if ids.is_empty() {
            return Err(shape_err("embedding_lookup", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(AutodiffError::Index {
                op: "embedding_lookup",
                index: bad,
                bound: vocab,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), dim], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of −log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.as_matrix("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(AutodiffError::Index {
                op: "cross_entropy",
                index: bad,
                bound: vocab,
            });
        }
        let lsm = log_softmax_rows(self.data(logits), vocab);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| lsm[r * vocab + t])
            .sum::<f64>()
            / rows as f64;
        let probs = lsm.iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// out[r] = x[r, idx[r]] for a matrix `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.as_matrix("pick", x)?;
        if idx.len() != rows {
            return Err(shape_err("pick", format!("{rows} rows but {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(AutodiffError::Index {
                op: "pick",
                index: bad,
                bound: cols,
            });
        }
        let src = self.data(x);
        let out = idx.iter().enumerate().map(|(r, &i)| src[r * cols + i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sums over the last axis, dropping it (a 1-D input becomes shape [1]).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let out: Vec<f64> = t.data().chunks(t.cols()).map(|c| c.iter().sum()).collect();
        let shape = if t.shape().len() > 1 {
            t.shape()[..t.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::SumLast(x), rg)
    }

    /// Concatenates matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let (rows, _) = self.as_matrix("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.as_matrix("concat", p)?;
            if r != rows {
                return Err(shape_err("concat", format!("row mismatch {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_matrix("slice", x)?;
        if len == 0 || start + len > cols {
            return Err(shape_err("slice", format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_matrix("slice", x)?;
        if len == 0 || start + len > rows {
            return Err(shape_err("slice", format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![len, cols], out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Sets entries above the diagonal of a square matrix to −∞.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix("causal_mask", x)?;
        if r != c {
            return Err(shape_err("causal_mask", format!("[{r},{c}] is not square")));
        }
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for j in i + 1..c {
                out[i * c + j] = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::CausalMask(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gout, false, self.data(*b), true, &mut ga, false);
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, gout, false, &mut gb, false);
                    send(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gout[j * r + i];
                    }
                }
                send(*x, g);
            }
            Op::Add(a, b) => {
                send(*a, gout.to_vec());
                send(*b, gout.to_vec());
            }
            Op::AddBias(a, b) => {
                send(*a, gout.to_vec());
                let n = self.shape(*b)[0];
                let mut gb = vec![0.0; n];
                for (i, g) in gout.iter().enumerate() {
                    gb[i % n] += g;
                }
                send(*b, gb);
            }
            Op::Sub(a, b) => {
                send(*a, gout.to_vec());
                send(*b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, gout.iter().zip(db).map(|(g, y)| g * y).collect());
                send(*b, gout.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Minimum(a, b) => {
                // Ties route the gradient to the first operand.
                let (da, db) = (self.data(*a), self.data(*b));
                let pick_a: Vec<bool> = da.iter().zip(db).map(|(x, y)| x <= y).collect();
                send(
                    *a,
                    gout.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect(),
                );
                send(
                    *b,
                    gout.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect(),
                );
            }
            Op::Scale(x, s) => send(*x, gout.iter().map(|g| g * s).collect()),
            Op::AddScalar(x) => send(*x, gout.to_vec()),
            Op::Exp(x) => send(*x, gout.iter().zip(val.data()).map(|(g, y)| g * y).collect()),
            Op::Log(x) => send(
                *x,
                gout.iter().zip(self.data(*x)).map(|(g, a)| g / a).collect(),
            ),
            Op::Sigmoid(x) => send(
                *x,
                gout.iter().zip(val.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::LogSigmoid(x) => send(
                *x,
                gout.iter().zip(self.data(*x)).map(|(g, &a)| g * sigmoid(-a)).collect(),
            ),
            Op::Gelu(x) => send(
                *x,
                gout.iter().zip(self.data(*x)).map(|(g, &a)| g * gelu_grad(a)).collect(),
            ),
            Op::Clamp { x, lo, hi } => send(
                *x,
                gout.iter()
                    .zip(self.data(*x))
                    .map(|(g, &a)| if a >= *lo && a <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(x) => {
                let cols = val.cols();
                let mut g = vec![0.0; gout.len()];
                for ((y, go), gi) in val
                    .data()
                    .chunks(cols)
                    .zip(gout.chunks(cols))
                    .zip(g.chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gi[j] = y[j] * (go[j] - dot);
                    }
                }
                send(*x, g);
            }
            Op::LogSoftmax(x) => {
                let cols = val.cols();
                let mut g = vec![0.0; gout.len()];
                for ((y, go), gi) in val
                    .data()
                    .chunks(cols)
                    .zip(gout.chunks(cols))
                    .zip(g.chunks_mut(cols))
                {
                    let s: f64 = go.iter().sum();
                    for j in 0..cols {
                        gi[j] = go[j] - y[j].exp() * s;
                    }
                }
                send(*x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = val.cols();
                let gdat = self.data(*gain);
                let mut gx = vec![0.0; gout.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (r, rs) in rstd.iter().enumerate() {
                    let go = &gout[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = go[j] * gdat[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        gg[j] += go[j] * xh[j];
                        gb[j] += go[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = go[j] * gdat[j];
                        gx[r * n + j] = rs * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gb);
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut g = vec![0.0; self.value(*table).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..dim {
                        g[i * dim + j] += gout[r * dim + j];
                    }
                }
                send(*table, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = gout[0] / targets.len() as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * vocab + t] -= scale;
                }
                send(*logits, g);
            }
            Op::Pick { x, idx } => {
                let cols = self.shape(*x)[1];
                let mut g = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    g[r * cols + i] = gout[r];
                }
                send(*x, g);
            }
            Op::Sum(x) => send(*x, vec![gout[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![gout[0] / n as f64; n]);
            }
            Op::SumLast(x) => {
                let cols = self.value(*x).cols();
                let g = (0..self.value(*x).numel()).map(|i| gout[i / cols]).collect();
                send(*x, g);
            }
            Op::Concat(parts) => {
                let rows = val.rows();
                let total = val.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&gout[r * total + off..r * total + off + w]);
                        }
                        send(p, g);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = val.cols();
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + w].copy_from_slice(&gout[r * w..(r + 1) * w]);
                }
                send(*x, g);
            }
            Op::SliceRows { x, start } => {
                let cols = self.shape(*x)[1];
                let mut g = vec![0.0; self.value(*x).numel()];
                g[start * cols..start * cols + gout.len()].copy_from_slice(gout);
                send(*x, g);
            }
            Op::CausalMask(x) => {
                let c = val.cols();
                let g = gout
                    .iter()
                    .enumerate()
                    .map(|(i, g)| if i % c > i / c { 0.0 } else { *g })
                    .collect();
                send(*x, g);
            }
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
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_sum_of_ones() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::full(&[2, 3], 1.0).with_requires_grad(true));
        let b = g.leaf(&Tensor::full(&[3, 2], 1.0).with_requires_grad(true));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0; 6]);
        assert_eq!(grads.get(b).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn square_via_mul_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], &[3.0]).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2,3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
        assert!(g.mul(a, c).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(AutodiffError::Domain { .. })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 2], 1.0));
        let b = g.matmul(a, a).unwrap();
        let _ = g.sum(b);
        assert_eq!(g.recorded(), 0);
        let p = g.leaf(&Tensor::full(&[2, 2], 1.0).with_requires_grad(true));
        let _ = g.matmul(a, p).unwrap();
        assert_eq!(g.recorded(), 1);
    }

    #[test]
    fn bias_add_broadcasts_over_rows() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[3, 2]).with_requires_grad(true));
        let b = g.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn causal_mask_then_softmax_ignores_future() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 100.0, 0.0, 0.0]));
        let m = g.causal_mask(x).unwrap();
        let p = g.softmax(m);
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[40.0, -800.0]));
        let y = g.log_sigmoid(x);
        let v = g.value(y).data();
        assert!((v[0] + (-40f64).exp()).abs() < 1e-30);
        assert_eq!(v[1], -800.0);
    }
}
