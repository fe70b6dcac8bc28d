//! Dense tensors and a reverse-mode tape.
//!
//! The primitive set is deliberately small: exactly the operations the
//! sequence model needs. Every node stores its forward value; `backward`
//! walks the tape in reverse record order and accumulates gradients in
//! that fixed order, so two identical graphs produce bit-identical
//! gradients.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major tensor with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Contract(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `weight * g` into this tensor's gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64], weight: f64) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += weight * x;
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        self.grad = Some(g);
        Ok(())
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Handle to a node recorded on a [`Tape`].
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        limits: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf handle.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copy a node out as a standalone tensor (without grad).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// Record a leaf. Its gradient is reported by `backward` when `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        check_finite("matmul_bt", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulBt(a, b), rg))
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// `[m,n] + [n]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.shape(b) != [n] {
            return Err(TensorError::Shape {
                op: "add_row",
                left: vec![m, n],
                right: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        check_finite("add_row", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::AddRow(a, b), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        check_finite("scale", &out)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Scale(a, c), rg))
    }

    /// Embedding lookup: rows `ids` of a `[V,d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Shape {
                op: "gather",
                left: vec![v, d],
                right: vec![bad],
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Row-wise layer normalization with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        check_finite("gelu", &out)?;
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Gelu(x), rg))
    }

    /// Row-wise softmax over all columns.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax")?;
        self.masked_softmax(x, &vec![n; m])
    }

    /// Row-wise softmax where row `r` only spans columns `0..limits[r]`;
    /// the remaining columns are exactly zero. Used for causal attention.
    pub fn masked_softmax(&mut self, x: Var, limits: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "masked_softmax")?;
        if limits.len() != m || limits.iter().any(|&l| l == 0 || l > n) {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                left: vec![m, n],
                right: limits.to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let l = limits[r];
            let row = &xv[r * n..r * n + l];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * n..r * n + l];
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        check_finite("softmax", &out)?;
        let rg = self.rg(x);
        Ok(self.push(
            vec![m, n],
            out,
            Op::Softmax {
                x,
                limits: limits.to_vec(),
            },
            rg,
        ))
    }

    /// Summed softmax cross-entropy of `[m,V]` logits against per-row
    /// targets; rows with `None` contribute nothing. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: vec![m, v],
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: vec![m, v],
                right: vec![*bad],
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            loss += mx + z.ln() - row[t];
        }
        check_finite("cross_entropy", &[loss])?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum::<f64>();
        check_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Sum(x), rg))
    }

    /// Reverse pass from a scalar. Returns gradients for every node that
    /// requires grad (leaves included) and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(g);
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    // dA = G · Bᵀ
                    acc(&mut grads, &nodes, *a, |ga| {
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    });
                    // dB = Aᵀ · G
                    acc(&mut grads, &nodes, *b, |gb| {
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = av[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (g, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *g += av * x;
                                }
                            }
                        }
                    });
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[0];
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    // dA = G · B
                    acc(&mut grads, &nodes, *a, |ga| {
                        matmul_into(&gout, bv, ga, m, n, k);
                    });
                    // dB = Gᵀ · A
                    acc(&mut grads, &nodes, *b, |gb| {
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            for j in 0..n {
                                let g = gout[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for (d, &x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                    *d += g * x;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        acc(&mut grads, &nodes, *v, |g| {
                            for (d, &x) in g.iter_mut().zip(&gout) {
                                *d += x;
                            }
                        });
                    }
                }
                Op::AddRow(a, b) => {
                    let n = nodes[b.0].value.len();
                    acc(&mut grads, &nodes, *a, |g| {
                        for (d, &x) in g.iter_mut().zip(&gout) {
                            *d += x;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for row in gout.chunks(n) {
                            for (d, &x) in g.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((d, &x), &y) in g.iter_mut().zip(&gout).zip(bv) {
                            *d += x * y;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for ((d, &x), &y) in g.iter_mut().zip(&gout).zip(av) {
                            *d += x * y;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, &nodes, *a, |g| {
                        for (d, &x) in g.iter_mut().zip(&gout) {
                            *d += c * x;
                        }
                    });
                }
                Op::Gather(t, ids) => {
                    let d = nodes[t.0].shape[1];
                    acc(&mut grads, &nodes, *t, |g| {
                        for (r, &i) in ids.iter().enumerate() {
                            for (dst, &x) in g[i * d..(i + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                                *dst += x;
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = nodes[gain.0].value.len();
                    let gv = &nodes[gain.0].value;
                    acc(&mut grads, &nodes, *gain, |g| {
                        for (grow, hrow) in gout.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                g[c] += grow[c] * hrow[c];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *bias, |g| {
                        for grow in gout.chunks(n) {
                            for c in 0..n {
                                g[c] += grow[c];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *x, |g| {
                        let mut dh = vec![0.0; n];
                        for (r, (grow, hrow)) in gout.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            for c in 0..n {
                                dh[c] = grow[c] * gv[c];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / n as f64;
                            let mean_dhh = dot(&dh, hrow) / n as f64;
                            for c in 0..n {
                                g[r * n + c] += inv_std[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = &nodes[x.0].value;
                    acc(&mut grads, &nodes, *x, |g| {
                        for ((d, &go), &v) in g.iter_mut().zip(&gout).zip(xv) {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            *d += go * (0.5 * (1.0 + t) + 0.5 * v * dt);
                        }
                    });
                }
                Op::Softmax { x, limits } => {
                    let n = node.shape[1];
                    let yv = &node.value;
                    acc(&mut grads, &nodes, *x, |g| {
                        for (r, &l) in limits.iter().enumerate() {
                            let y = &yv[r * n..r * n + l];
                            let go = &gout[r * n..r * n + l];
                            let s = dot(y, go);
                            for c in 0..l {
                                g[r * n + c] += y[c] * (go[c] - s);
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = nodes[logits.0].shape[1];
                    let up = gout[0];
                    acc(&mut grads, &nodes, *logits, |g| {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..v {
                                g[r * v + c] += up * probs[r * v + c];
                            }
                            g[r * v + t] -= up;
                        }
                    });
                }
                Op::Sum(x) => {
                    let up = gout[0];
                    acc(&mut grads, &nodes, *x, |g| {
                        for d in g.iter_mut() {
                            *d += up;
                        }
                    });
                }
            }
            if matches!(node.op, Op::Leaf) {
                check_finite("backward", &gout)?;
                grads[idx] = Some(gout);
            }
        }
        // Only leaves keep their gradient.
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}
