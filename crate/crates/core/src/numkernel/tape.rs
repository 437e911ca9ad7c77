//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends one node to the tape. Node inputs always refer to
//! earlier nodes, so the tape is topologically ordered by construction and a
//! single reverse sweep visits each recorded operation once. [`Tape::backward`]
//! consumes the tape; build a fresh one for the next forward pass.

use std::sync::OnceLock;

use super::{KernelError, Tensor};

/// Setting this variable to `1` turns on the non-finite scan for every tape.
pub const NAN_SCAN_ENV: &str = "SMLAB_DEBUG_NAN";

fn nan_scan_from_env() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var(NAN_SCAN_ENV).map(|v| v == "1").unwrap_or(false))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the output gradient and the
/// input values, returns one optional gradient per input.
pub type BackwardRule = Box<dyn Fn(&[f64], &[&Tensor]) -> Vec<Option<Vec<f64>>> + Send>;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Keeps the inner `tanh` values for the backward pass.
    Gelu { x: Var, tanh: Vec<f64> },
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        rule: BackwardRule,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Sum(_) => "sum",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    ops: usize,
    nan_scan: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    ops_visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Number of recorded operations whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
}

// C (+)= alpha * A * B with arbitrary strides. Small products use a plain loop
// since packing overhead dominates there.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m * k * n <= 8192 {
        for i in 0..m {
            let crow = &mut c[i * rsc..i * rsc + n];
            if beta == 0.0 {
                crow.iter_mut().for_each(|v| *v = 0.0);
            }
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                let boff = p * rsb;
                if csb == 1 {
                    for (cv, bv) in crow.iter_mut().zip(&b[boff..boff + n]) {
                        *cv += av * bv;
                    }
                } else {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b[boff + j * csb];
                    }
                }
            }
        }
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every index touched by the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(√(2/π)·(x + 0.044715·x³))` through `exp`, which is markedly cheaper
/// than libm `tanh` and accurate to a few ulps of 1.
fn gelu_inner_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::with_nan_scan(nan_scan_from_env())
    }

    pub fn with_nan_scan(nan_scan: bool) -> Self {
        Self {
            nodes: Vec::new(),
            ops: 0,
            nan_scan,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (non-leaf) operations.
    pub fn op_count(&self) -> usize {
        self.ops
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, KernelError> {
        if self.nan_scan && !value.all_finite() {
            return Err(KernelError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.ops += 1;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable copy of a parameter.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec())
            .expect("valid tensor")
            .with_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize), KernelError> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            s => Err(KernelError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn dims3(&self, var: Var, op: &'static str) -> Result<(usize, usize, usize), KernelError> {
        match self.shape(var) {
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(KernelError::Rank {
                op,
                expected: 3,
                shape: s.to_vec(),
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> KernelError {
        KernelError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, KernelError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n, bstride) = if transpose_b {
            (bc, br, (1, bc))
        } else {
            (br, bc, (bc, 1))
        };
        if k != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bstride,
            0.0,
            &mut out,
            n,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                transpose_b,
            },
            &[a, b],
        )
    }

    /// Batched product over the leading axis: `a[B×m×k] · b[B×k×n]`, or
    /// `a[B×m×k] · b[B×n×k]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, KernelError> {
        let (batch, m, k) = self.dims3(a, "batch_matmul")?;
        let (bb, br, bc) = self.dims3(b, "batch_matmul")?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if batch != bb || k != kb {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let bstride = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    bstride,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                    n,
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, KernelError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, KernelError> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, KernelError> {
        let xv = self.value(x).data();
        let tanh: Vec<f64> = xv.iter().map(|&v| gelu_inner_tanh(v)).collect();
        let data = xv.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::Gelu { x, tanh }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, KernelError> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::Relu(x), &[x])
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, KernelError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(KernelError::Axis { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|j| out[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Softmax { x, outer, n, inner }, &[x])
    }

    /// Row-wise normalization over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, KernelError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n×V]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, KernelError> {
        let (n, classes) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(KernelError::Shape {
                op: "cross_entropy",
                lhs: vec![n, classes],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= classes) {
            return Err(KernelError::Target { id, classes });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[t];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, KernelError> {
        let (rows, d) = self.dims2(table, "gather")?;
        if let Some(&id) = ids.iter().find(|&&i| i >= rows) {
            return Err(KernelError::Index { id, rows });
        }
        if ids.is_empty() {
            return Err(KernelError::Size {
                shape: vec![0, d],
                len: 0,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `[B·T, H·dh]` → `[B·H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, KernelError> {
        let (rows, width) = self.dims2(x, "split_heads")?;
        if batch == 0 || heads == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(KernelError::Shape {
                op: "split_heads",
                lhs: vec![rows, width],
                rhs: vec![batch, heads],
            });
        }
        let seq = rows / batch;
        let dh = width / heads;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + t) * width + h * dh;
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(&[batch * heads, seq, dh], out)?;
        self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, KernelError> {
        let (bh, seq, dh) = self.dims3(x, "merge_heads")?;
        if batch == 0 || heads == 0 || bh != batch * heads {
            return Err(KernelError::Shape {
                op: "merge_heads",
                lhs: vec![bh, seq, dh],
                rhs: vec![batch, heads],
            });
        }
        let width = heads * dh;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + t) * width + h * dh;
                    let src = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(&[batch * seq, width], out)?;
        self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, KernelError> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Records an operation whose forward value and backward rule are
    /// supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: BackwardRule) -> Result<Var, KernelError> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, KernelError> {
        if self.ops == 0 {
            return Err(KernelError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(KernelError::NonScalar(self.shape(loss).to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                    continue;
                }
                &Op::MatMul {
                    a,
                    b,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    if needs(a) {
                        // dA = dC · Bᵀ
                        let bt = if transpose_b { (k, 1) } else { (1, n) };
                        let da = slot(&mut grads, a, m * k);
                        gemm(m, n, k, &g, (n, 1), val(b), bt, 1.0, da, k);
                    }
                    if needs(b) {
                        if transpose_b {
                            // dBs = dCᵀ · A
                            let db = slot(&mut grads, b, n * k);
                            gemm(n, m, k, &g, (1, n), val(a), (k, 1), 1.0, db, k);
                        } else {
                            // dB = Aᵀ · dC
                            let db = slot(&mut grads, b, k * n);
                            gemm(k, m, n, val(a), (1, k), &g, (n, 1), 1.0, db, n);
                        }
                    }
                }
                &Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    let (mk, kn, mn) = (m * k, k * n, m * n);
                    if needs(a) {
                        let bt = if transpose_b { (k, 1) } else { (1, n) };
                        let bv = val(b);
                        let da = slot(&mut grads, a, batch * mk);
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * mn..(i + 1) * mn],
                                (n, 1),
                                &bv[i * kn..(i + 1) * kn],
                                bt,
                                1.0,
                                &mut da[i * mk..(i + 1) * mk],
                                k,
                            );
                        }
                    }
                    if needs(b) {
                        let av = val(a);
                        let db = slot(&mut grads, b, batch * kn);
                        for i in 0..batch {
                            let gs = &g[i * mn..(i + 1) * mn];
                            let asl = &av[i * mk..(i + 1) * mk];
                            let dbs = &mut db[i * kn..(i + 1) * kn];
                            if transpose_b {
                                gemm(n, m, k, gs, (1, n), asl, (k, 1), 1.0, dbs, k);
                            } else {
                                gemm(k, m, n, asl, (1, k), gs, (n, 1), 1.0, dbs, n);
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if needs(v) {
                            let s = slot(&mut grads, v, g.len());
                            s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                        }
                    }
                }
                &Op::AddBias(x, bias) => {
                    if needs(x) {
                        let s = slot(&mut grads, x, g.len());
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                    }
                    if needs(bias) {
                        let d = nodes[bias.0].value.len();
                        let s = slot(&mut grads, bias, d);
                        for row in g.chunks(d) {
                            s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        let bv = val(b);
                        let s = slot(&mut grads, a, g.len());
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(bv) {
                            *s += g * y;
                        }
                    }
                    if needs(b) {
                        let av = val(a);
                        let s = slot(&mut grads, b, g.len());
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(av) {
                            *s += g * x;
                        }
                    }
                }
                &Op::Scale(x, factor) => {
                    let s = slot(&mut grads, x, g.len());
                    s.iter_mut().zip(&g).for_each(|(s, g)| *s += g * factor);
                }
                Op::Gelu { x, tanh } => {
                    let xv = val(*x);
                    let s = slot(&mut grads, *x, g.len());
                    for (((s, g), &x), &t) in s.iter_mut().zip(&g).zip(xv).zip(tanh) {
                        *s += g * gelu_grad(x, t);
                    }
                }
                &Op::Relu(x) => {
                    let xv = val(x);
                    let s = slot(&mut grads, x, g.len());
                    for ((s, g), &x) in s.iter_mut().zip(&g).zip(xv) {
                        if x > 0.0 {
                            *s += g;
                        }
                    }
                }
                &Op::Softmax { x, outer, n, inner } => {
                    let y = node.value.data();
                    let s = slot(&mut grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..n {
                                let at = base + j * inner;
                                s[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[gain.0].value.len();
                    let gv = val(*gain);
                    if needs(*gain) {
                        let s = slot(&mut grads, *gain, d);
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                s[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    if needs(*bias) {
                        let s = slot(&mut grads, *bias, d);
                        for grow in g.chunks(d) {
                            s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                        }
                    }
                    if needs(*x) {
                        let s = slot(&mut grads, *x, g.len());
                        let mut dh = vec![0.0; d];
                        for (r, is) in inv_std.iter().enumerate() {
                            let grow = &g[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dh[j] = grow[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                s[r * d + j] += is * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len();
                    let classes = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let s = slot(&mut grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let tshape = nodes[table.0].value.shape();
                    let d = tshape[1];
                    let s = slot(&mut grads, *table, tshape[0] * d);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut s[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(s, g)| *s += g);
                    }
                }
                &Op::SplitHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let width = nodes[x.0].value.shape()[1];
                    let dh = width / heads;
                    let s = slot(&mut grads, x, g.len());
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let xi = (b * seq + t) * width + h * dh;
                                let yi = ((b * heads + h) * seq + t) * dh;
                                for j in 0..dh {
                                    s[xi + j] += g[yi + j];
                                }
                            }
                        }
                    }
                }
                &Op::MergeHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let dh = nodes[x.0].value.shape()[2];
                    let width = heads * dh;
                    let s = slot(&mut grads, x, g.len());
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let yi = (b * seq + t) * width + h * dh;
                                let xi = ((b * heads + h) * seq + t) * dh;
                                for j in 0..dh {
                                    s[xi + j] += g[yi + j];
                                }
                            }
                        }
                    }
                }
                &Op::Sum(x) => {
                    let len = nodes[x.0].value.len();
                    let s = slot(&mut grads, x, len);
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Custom { inputs, rule } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let contributions = rule(&g, &values);
                    for (&v, c) in inputs.iter().zip(contributions) {
                        if let (true, Some(c)) = (needs(v), c) {
                            let s = slot(&mut grads, v, nodes[v.0].value.len());
                            s.iter_mut().zip(&c).for_each(|(s, c)| *s += c);
                        }
                    }
                }
            }
            visited += 1;
        }
        // Leaves that require grad but were unreachable from the loss get zeros.
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            ops_visited: visited,
        })
    }
}
