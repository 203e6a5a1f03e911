//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients. The tape is append-only,
//! so reverse id order is a valid topological order and gradient accumulation
//! is bit-deterministic. A graph lives on one thread and is dropped after the
//! optimizer consumed its gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::Real;

/// Epsilon inside layer-norm's square root (zero-variance guard).
pub const LAYER_NORM_EPS: Real = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    AddScalarConst(usize, Real),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    MulScalarNode(usize, usize),
    Div(usize, usize),
    Scale(usize, Real),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulTransB {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        inv_std: Vec<Real>,
    },
    Conv1dSame {
        x: usize,
        w: usize,
        b: Option<usize>,
        t: usize,
        c_in: usize,
        c_out: usize,
        kw: usize,
    },
    AvgPool1dCeil {
        x: usize,
        k: usize,
        t: usize,
        c: usize,
    },
    Softplus(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanRows {
        x: usize,
        rows: usize,
    },
    ConcatCols {
        xs: Vec<usize>,
        widths: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        width: usize,
        full: usize,
    },
    RepeatRows {
        x: usize,
        counts: Vec<usize>,
    },
    EmbedRows {
        table: usize,
        ids: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "Leaf",
            Op::Add(..) => "Add",
            Op::AddRow(..) => "AddRow",
            Op::AddScalarConst(..) => "AddScalar",
            Op::Sub(..) => "Sub",
            Op::Neg(..) => "Neg",
            Op::Mul(..) => "Mul",
            Op::MulRow(..) => "MulRow",
            Op::MulScalarNode(..) => "MulScalarNode",
            Op::Div(..) => "Div",
            Op::Scale(..) => "Scale",
            Op::MatMul { .. } => "MatMul",
            Op::MatMulTransB { .. } => "MatMulTransB",
            Op::SoftmaxRows(..) => "SoftmaxRows",
            Op::LogSoftmaxRows(..) => "LogSoftmaxRows",
            Op::LayerNormRows { .. } => "LayerNormRows",
            Op::Conv1dSame { .. } => "Conv1dSame",
            Op::AvgPool1dCeil { .. } => "AvgPool1dCeil",
            Op::Softplus(..) => "Softplus",
            Op::Tanh(..) => "Tanh",
            Op::Relu(..) => "Relu",
            Op::Sigmoid(..) => "Sigmoid",
            Op::Ln(..) => "Ln",
            Op::Sqrt(..) => "Sqrt",
            Op::Abs(..) => "Abs",
            Op::SumAll(..) => "SumAll",
            Op::MeanAll(..) => "MeanAll",
            Op::MeanRows { .. } => "MeanRows",
            Op::ConcatCols { .. } => "ConcatCols",
            Op::SliceCols { .. } => "SliceCols",
            Op::RepeatRows { .. } => "RepeatRows",
            Op::EmbedRows { .. } => "EmbedRows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param_name: Option<String>,
}

/// A recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<String, usize>,
    grads: Vec<Option<Vec<Real>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            param_cache: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite() || !value.all_finite(), "shape sane");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record a constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record an input that should receive a gradient (used by grad checks).
    pub fn input_grad(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    /// Record a named parameter leaf. Repeated calls with the same name within
    /// one graph return the same node, so batched passes accumulate naturally.
    pub fn param(&mut self, ps: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(Var(id));
        }
        let t = ps.get(name)?;
        let requires = t.requires_grad;
        let v = self.push(t.clone(), Op::Leaf, requires);
        self.nodes[v.0].param_name = Some(name.to_string());
        self.param_cache.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn scalar(&mut self, v: Real) -> Var {
        self.input(Tensor::scalar(v))
    }

    // ── elementwise and broadcast ops ────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), ng))
    }

    /// `a[R×d] + b` broadcast over rows; `b` must have `d` elements.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.value(b).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                details: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            for (r, x) in row.iter_mut().zip(&bv) {
                *r += x;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::AddRow(a.0, b.0), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::AddScalarConst(a.0, c), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Neg(a.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), ng))
    }

    /// `a[R×d] * b` broadcast over rows; gradients flow to both inputs.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.value(b).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                details: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            for (r, x) in row.iter_mut().zip(&bv) {
                *r *= x;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::MulRow(a.0, b.0), ng))
    }

    /// Multiply every element of `a` by scalar node `s` (numel 1).
    pub fn mul_scalar_node(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_node",
                details: format!("scalar operand has shape {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).item();
        let data = self.value(a).data().iter().map(|x| x * sv).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(t, Op::MulScalarNode(a.0, s.0), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Div(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Scale(a.0, c), ng))
    }

    // ── matrix ops ───────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`. Tensors are viewed as matrices (all-but-last dims
    /// collapse into rows).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.value(a).rows(), self.value(a).last_dim());
        let (kb, n) = (self.value(b).rows(), self.value(b).last_dim());
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!(
                    "{:?} x {:?}: inner dims {k} vs {kb}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, false);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, m, k, n }, ng))
    }

    /// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.value(a).rows(), self.value(a).last_dim());
        let (n, kb) = (self.value(b).rows(), self.value(b).last_dim());
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_trans_b",
                details: format!(
                    "{:?} x {:?}^T: inner dims {k} vs {kb}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, true);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::MatMulTransB { a: a.0, b: b.0, m, k, n }, ng))
    }

    // ── row-wise nonlinear ops ───────────────────────────────────────

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let mut out = vec![0.0; self.value(a).numel()];
        kernels::softmax_rows(self.value(a).data(), &mut out, d);
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::SoftmaxRows(a.0), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            let max = xr.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = xr.iter().map(|v| (v - max).exp()).sum::<Real>().ln() + max;
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::LogSoftmaxRows(a.0), ng))
    }

    /// Per-row (last dim) normalization to mean 0 / variance 1 with epsilon
    /// guard. Affine gain/bias are separate `mul_row`/`add_row` ops.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if d == 0 {
            return Err(Error::EmptyInput("layer_norm_rows"));
        }
        let x = self.value(a).data();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<Real>() / d as Real;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
                *o = (v - mean) * inv;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::LayerNormRows { x: a.0, inv_std }, ng))
    }

    // ── convolution and pooling ──────────────────────────────────────

    /// 1-D convolution over `x[t×c_in]` with weight `w[c_out×kw×c_in]`
    /// (flattened `[c_out, kw, c_in]`), stride 1, zero-padded "same" output.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Option<Var>, kw: usize) -> Result<Var> {
        if kw % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                details: format!("kernel size {kw} must be odd for same padding"),
            });
        }
        let (t_len, c_in) = (self.value(x).rows(), self.value(x).last_dim());
        let w_numel = self.value(w).numel();
        if w_numel % (kw * c_in) != 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                details: format!(
                    "weight numel {w_numel} not divisible by kw*c_in = {}",
                    kw * c_in
                ),
            });
        }
        let c_out = w_numel / (kw * c_in);
        if let Some(bv) = b {
            if self.value(bv).numel() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv1d_same",
                    details: format!("bias numel {} vs c_out {c_out}", self.value(bv).numel()),
                });
            }
        }
        let mut out = vec![0.0; t_len * c_out];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = b.map(|bv| self.value(bv).data().to_vec());
            kernels::conv1d_same(xs, ws, bs.as_deref(), &mut out, t_len, c_in, c_out, kw);
        }
        let t = Tensor::new(vec![t_len, c_out], out)?;
        let ng = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|bv| self.needs(bv.0));
        Ok(self.push(
            t,
            Op::Conv1dSame {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                t: t_len,
                c_in,
                c_out,
                kw,
            },
            ng,
        ))
    }

    /// Average pooling over rows with ceil semantics: output row `j` is the
    /// mean of input rows `jk .. min((j+1)k, T)`; an odd tail averages alone.
    pub fn avg_pool1d_ceil(&mut self, x: Var, k: usize) -> Result<Var> {
        let (t_len, c) = (self.value(x).rows(), self.value(x).last_dim());
        if t_len == 0 {
            return Err(Error::EmptyInput("avg_pool1d"));
        }
        let t_out = t_len.div_ceil(k);
        let xs = self.value(x).data();
        let mut out = vec![0.0; t_out * c];
        for j in 0..t_out {
            let lo = j * k;
            let hi = ((j + 1) * k).min(t_len);
            let w = (hi - lo) as Real;
            let orow = &mut out[j * c..(j + 1) * c];
            for r in lo..hi {
                for (o, &v) in orow.iter_mut().zip(&xs[r * c..(r + 1) * c]) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o /= w;
            }
        }
        let t = Tensor::new(vec![t_out, c], out)?;
        let ng = self.needs(x.0);
        Ok(self.push(t, Op::AvgPool1dCeil { x: x.0, k, t: t_len, c }, ng))
    }

    // ── pointwise nonlinearities ─────────────────────────────────────

    /// Overflow-safe softplus: `ln(1+e^x) = max(x,0) + ln(1+e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Softplus(a.0), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Tanh(a.0), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Relu(a.0), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Sigmoid(a.0), ng))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Ln(a.0), ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Sqrt(a.0), ng))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Abs(a.0), ng))
    }

    // ── reductions and shape ops ─────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: Real = self.value(a).data().iter().sum();
        let ng = self.needs(a.0);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a.0), ng))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean_all"));
        }
        let s: Real = self.value(a).data().iter().sum::<Real>() / n as Real;
        let ng = self.needs(a.0);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a.0), ng))
    }

    /// Mean over rows: `[R×d] -> [1×d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let rows = self.value(a).rows();
        if rows == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(a).data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as Real;
        }
        let t = Tensor::new(vec![1, d], out)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::MeanRows { x: a.0, rows }, ng))
    }

    /// Concatenate along the feature (last) axis; all inputs share row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let rows = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            if self.value(v).rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("row mismatch {} vs {}", self.value(v).rows(), rows),
                });
            }
            widths.push(self.value(v).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (i, &v) in xs.iter().enumerate() {
                let w = widths[i];
                let src = &self.value(v).data()[r * w..(r + 1) * w];
                out[r * total + off..r * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let ng = xs.iter().any(|v| self.needs(v.0));
        Ok(self.push(
            t,
            Op::ConcatCols {
                xs: xs.iter().map(|v| v.0).collect(),
                widths,
            },
            ng,
        ))
    }

    /// Columns `start .. start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let full = self.value(x).last_dim();
        let rows = self.value(x).rows();
        if start + width > full {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                details: format!("slice {start}..{} out of width {full}", start + width),
            });
        }
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&self.value(x).data()[r * full + start..r * full + start + width]);
        }
        let t = Tensor::new(vec![rows, width], out)?;
        let ng = self.needs(x.0);
        Ok(self.push(t, Op::SliceCols { x: x.0, start, width, full }, ng))
    }

    /// Length regulation: row `p` of `x` repeated `counts[p]` times, order
    /// preserved. Every count must be ≥ 1.
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        let d = self.value(x).last_dim();
        if counts.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                details: format!("{} counts for {rows} rows", counts.len()),
            });
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                details: "zero duration".into(),
            });
        }
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(total * d);
        for (p, &c) in counts.iter().enumerate() {
            let row = &self.value(x).data()[p * d..(p + 1) * d];
            for _ in 0..c {
                out.extend_from_slice(row);
            }
        }
        let t = Tensor::new(vec![total, d], out)?;
        let ng = self.needs(x.0);
        Ok(self.push(
            t,
            Op::RepeatRows {
                x: x.0,
                counts: counts.to_vec(),
            },
            ng,
        ))
    }

    /// Gather rows of an embedding table by id.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).rows();
        let d = self.value(table).last_dim();
        for &id in ids {
            if id >= v {
                return Err(Error::BadPhonemeId { id, inventory: v });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.needs(table.0);
        Ok(self.push(
            t,
            Op::EmbedRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn grad_slot(&mut self, id: usize) -> &mut Vec<Real> {
        if self.grads[id].is_none() {
            let n = self.nodes[id].value.numel();
            self.grads[id] = Some(vec![0.0; n]);
        }
        self.grads[id].as_mut().unwrap()
    }

    /// Reverse pass from a scalar loss. Gradients of all reachable
    /// `needs_grad` nodes are accumulated in deterministic tape order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).numel()));
        }
        self.grads = Vec::new();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let dout = self.grads[id].take().unwrap();
            self.backprop_node(id, &dout);
            self.grads[id] = Some(dout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, dout: &[Real]) {
        // Copy out cheap op metadata to appease the borrow checker; heavy
        // buffers (values) are read through raw indices.
        macro_rules! value {
            ($i:expr) => {
                self.nodes[$i].value.data()
            };
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    kernels::axpy(1.0, dout, self.grad_slot(a));
                }
                if self.needs(b) {
                    kernels::axpy(1.0, dout, self.grad_slot(b));
                }
            }
            &Op::AddRow(a, b) => {
                if self.needs(a) {
                    kernels::axpy(1.0, dout, self.grad_slot(a));
                }
                if self.needs(b) {
                    let d = self.nodes[b].value.numel();
                    let slot = self.grad_slot(b);
                    for row in dout.chunks(d) {
                        kernels::axpy(1.0, row, slot);
                    }
                }
            }
            &Op::AddScalarConst(a, _) => {
                if self.needs(a) {
                    kernels::axpy(1.0, dout, self.grad_slot(a));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    kernels::axpy(1.0, dout, self.grad_slot(a));
                }
                if self.needs(b) {
                    kernels::axpy(-1.0, dout, self.grad_slot(b));
                }
            }
            &Op::Neg(a) => {
                if self.needs(a) {
                    kernels::axpy(-1.0, dout, self.grad_slot(a));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv: Vec<Real> = value!(b).to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &d), &v) in slot.iter_mut().zip(dout).zip(&bv) {
                        *s += d * v;
                    }
                }
                if self.needs(b) {
                    let av: Vec<Real> = value!(a).to_vec();
                    let slot = self.grad_slot(b);
                    for ((s, &d), &v) in slot.iter_mut().zip(dout).zip(&av) {
                        *s += d * v;
                    }
                }
            }
            &Op::MulRow(a, b) => {
                let d = self.nodes[b].value.numel();
                if self.needs(a) {
                    let bv: Vec<Real> = value!(b).to_vec();
                    let slot = self.grad_slot(a);
                    for (srow, drow) in slot.chunks_mut(d).zip(dout.chunks(d)) {
                        for ((s, &g), &v) in srow.iter_mut().zip(drow).zip(&bv) {
                            *s += g * v;
                        }
                    }
                }
                if self.needs(b) {
                    let av: Vec<Real> = value!(a).to_vec();
                    let slot = self.grad_slot(b);
                    for (arow, drow) in av.chunks(d).zip(dout.chunks(d)) {
                        for ((s, &g), &v) in slot.iter_mut().zip(drow).zip(arow) {
                            *s += g * v;
                        }
                    }
                }
            }
            &Op::MulScalarNode(a, s) => {
                let sv = self.nodes[s].value.item();
                if self.needs(a) {
                    kernels::axpy(sv, dout, self.grad_slot(a));
                }
                if self.needs(s) {
                    let av: Vec<Real> = value!(a).to_vec();
                    let acc: Real = av.iter().zip(dout).map(|(&v, &g)| v * g).sum();
                    self.grad_slot(s)[0] += acc;
                }
            }
            &Op::Div(a, b) => {
                if self.needs(a) {
                    let bv: Vec<Real> = value!(b).to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &v) in slot.iter_mut().zip(dout).zip(&bv) {
                        *s += g / v;
                    }
                }
                if self.needs(b) {
                    let av: Vec<Real> = value!(a).to_vec();
                    let bv: Vec<Real> = value!(b).to_vec();
                    let slot = self.grad_slot(b);
                    for (i, s) in slot.iter_mut().enumerate() {
                        *s -= dout[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    kernels::axpy(c, dout, self.grad_slot(a));
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut tmp = vec![0.0; m * k];
                    kernels::gemm(dout, value!(b), &mut tmp, m, n, k, false, true);
                    kernels::axpy(1.0, &tmp, self.grad_slot(a));
                }
                if self.needs(b) {
                    let mut tmp = vec![0.0; k * n];
                    kernels::gemm(value!(a), dout, &mut tmp, k, m, n, true, false);
                    kernels::axpy(1.0, &tmp, self.grad_slot(b));
                }
            }
            &Op::MatMulTransB { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut tmp = vec![0.0; m * k];
                    kernels::gemm(dout, value!(b), &mut tmp, m, n, k, false, false);
                    kernels::axpy(1.0, &tmp, self.grad_slot(a));
                }
                if self.needs(b) {
                    let mut tmp = vec![0.0; n * k];
                    kernels::gemm(dout, value!(a), &mut tmp, n, m, k, true, false);
                    kernels::axpy(1.0, &tmp, self.grad_slot(b));
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.needs(a) {
                    let d = self.nodes[id].value.last_dim();
                    let y: Vec<Real> = self.nodes[id].value.data().to_vec();
                    let slot = self.grad_slot(a);
                    for ((srow, drow), yrow) in slot.chunks_mut(d).zip(dout.chunks(d)).zip(y.chunks(d)) {
                        let dot: Real = drow.iter().zip(yrow).map(|(&g, &v)| g * v).sum();
                        for ((s, &g), &v) in srow.iter_mut().zip(drow).zip(yrow) {
                            *s += v * (g - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(a) => {
                if self.needs(a) {
                    let d = self.nodes[id].value.last_dim();
                    let y: Vec<Real> = self.nodes[id].value.data().to_vec();
                    let slot = self.grad_slot(a);
                    for ((srow, drow), yrow) in slot.chunks_mut(d).zip(dout.chunks(d)).zip(y.chunks(d)) {
                        let gsum: Real = drow.iter().sum();
                        for ((s, &g), &ls) in srow.iter_mut().zip(drow).zip(yrow) {
                            *s += g - ls.exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                let (x, inv_std) = (*x, inv_std.clone());
                if self.needs(x) {
                    let d = self.nodes[id].value.last_dim();
                    let xhat: Vec<Real> = self.nodes[id].value.data().to_vec();
                    let slot = self.grad_slot(x);
                    for (r, (srow, drow)) in slot.chunks_mut(d).zip(dout.chunks(d)).enumerate() {
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mean_g: Real = drow.iter().sum::<Real>() / d as Real;
                        let mean_gh: Real =
                            drow.iter().zip(hrow).map(|(&g, &h)| g * h).sum::<Real>() / d as Real;
                        let inv = inv_std[r];
                        for ((s, &g), &h) in srow.iter_mut().zip(drow).zip(hrow) {
                            *s += inv * (g - mean_g - h * mean_gh);
                        }
                    }
                }
            }
            &Op::Conv1dSame { x, w, b, t, c_in, c_out, kw } => {
                let needs_x = self.needs(x);
                let needs_w = self.needs(w);
                let mut dx = vec![0.0; t * c_in];
                let mut dw = vec![0.0; c_out * kw * c_in];
                let mut db = b.map(|_| vec![0.0; c_out]);
                kernels::conv1d_same_backward(
                    value!(x),
                    value!(w),
                    dout,
                    &mut dx,
                    &mut dw,
                    db.as_deref_mut(),
                    t,
                    c_in,
                    c_out,
                    kw,
                );
                if needs_x {
                    kernels::axpy(1.0, &dx, self.grad_slot(x));
                }
                if needs_w {
                    kernels::axpy(1.0, &dw, self.grad_slot(w));
                }
                if let (Some(bid), Some(db)) = (b, db) {
                    if self.needs(bid) {
                        kernels::axpy(1.0, &db, self.grad_slot(bid));
                    }
                }
            }
            &Op::AvgPool1dCeil { x, k, t, c } => {
                if self.needs(x) {
                    let t_out = t.div_ceil(k);
                    let slot = self.grad_slot(x);
                    for j in 0..t_out {
                        let lo = j * k;
                        let hi = ((j + 1) * k).min(t);
                        let w = (hi - lo) as Real;
                        let drow = &dout[j * c..(j + 1) * c];
                        for r in lo..hi {
                            for (s, &g) in slot[r * c..(r + 1) * c].iter_mut().zip(drow) {
                                *s += g / w;
                            }
                        }
                    }
                }
            }
            &Op::Softplus(a) => {
                if self.needs(a) {
                    let xv: Vec<Real> = value!(a).to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &x) in slot.iter_mut().zip(dout).zip(&xv) {
                        let sig = if x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        };
                        *s += g * sig;
                    }
                }
            }
            &Op::Tanh(a) => {
                if self.needs(a) {
                    let y: Vec<Real> = self.nodes[id].value.data().to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &v) in slot.iter_mut().zip(dout).zip(&y) {
                        *s += g * (1.0 - v * v);
                    }
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let xv: Vec<Real> = value!(a).to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &x) in slot.iter_mut().zip(dout).zip(&xv) {
                        if x > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.needs(a) {
                    let y: Vec<Real> = self.nodes[id].value.data().to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &v) in slot.iter_mut().zip(dout).zip(&y) {
                        *s += g * v * (1.0 - v);
                    }
                }
            }
            &Op::Ln(a) => {
                if self.needs(a) {
                    let xv: Vec<Real> = value!(a).to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &x) in slot.iter_mut().zip(dout).zip(&xv) {
                        *s += g / x;
                    }
                }
            }
            &Op::Sqrt(a) => {
                if self.needs(a) {
                    let y: Vec<Real> = self.nodes[id].value.data().to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &v) in slot.iter_mut().zip(dout).zip(&y) {
                        *s += g / (2.0 * v);
                    }
                }
            }
            &Op::Abs(a) => {
                if self.needs(a) {
                    let xv: Vec<Real> = value!(a).to_vec();
                    let slot = self.grad_slot(a);
                    for ((s, &g), &x) in slot.iter_mut().zip(dout).zip(&xv) {
                        *s += g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            &Op::SumAll(a) => {
                if self.needs(a) {
                    let g = dout[0];
                    let slot = self.grad_slot(a);
                    for s in slot.iter_mut() {
                        *s += g;
                    }
                }
            }
            &Op::MeanAll(a) => {
                if self.needs(a) {
                    let n = self.nodes[a].value.numel() as Real;
                    let g = dout[0] / n;
                    let slot = self.grad_slot(a);
                    for s in slot.iter_mut() {
                        *s += g;
                    }
                }
            }
            &Op::MeanRows { x, rows } => {
                if self.needs(x) {
                    let d = dout.len();
                    let inv = 1.0 / rows as Real;
                    let slot = self.grad_slot(x);
                    for srow in slot.chunks_mut(d) {
                        for (s, &g) in srow.iter_mut().zip(dout) {
                            *s += g * inv;
                        }
                    }
                }
            }
            Op::ConcatCols { xs, widths } => {
                let (xs, widths) = (xs.clone(), widths.clone());
                let total: usize = widths.iter().sum();
                let rows = dout.len() / total;
                let mut off = 0;
                for (i, &xid) in xs.iter().enumerate() {
                    let w = widths[i];
                    if self.needs(xid) {
                        let slot = self.grad_slot(xid);
                        for r in 0..rows {
                            for (s, &g) in slot[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&dout[r * total + off..r * total + off + w])
                            {
                                *s += g;
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start, width, full } => {
                if self.needs(x) {
                    let rows = dout.len() / width;
                    let slot = self.grad_slot(x);
                    for r in 0..rows {
                        for (s, &g) in slot[r * full + start..r * full + start + width]
                            .iter_mut()
                            .zip(&dout[r * width..(r + 1) * width])
                        {
                            *s += g;
                        }
                    }
                }
            }
            Op::RepeatRows { x, counts } => {
                let (x, counts) = (*x, counts.clone());
                if self.needs(x) {
                    let d = self.nodes[x].value.last_dim();
                    let slot = self.grad_slot(x);
                    let mut r = 0;
                    for (p, &c) in counts.iter().enumerate() {
                        for _ in 0..c {
                            for (s, &g) in slot[p * d..(p + 1) * d].iter_mut().zip(&dout[r * d..(r + 1) * d]) {
                                *s += g;
                            }
                            r += 1;
                        }
                    }
                }
            }
            Op::EmbedRows { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                if self.needs(table) {
                    let d = self.nodes[table].value.last_dim();
                    let slot = self.grad_slot(table);
                    for (i, &idx) in ids.iter().enumerate() {
                        for (s, &g) in slot[idx * d..(idx + 1) * d].iter_mut().zip(&dout[i * d..(i + 1) * d]) {
                            *s += g;
                        }
                    }
                }
            }
        }
    }

    /// Accumulate parameter gradients into the set, in lexicographic name
    /// order. Parameters absent from this graph are left untouched.
    pub fn accumulate_param_grads(&self, ps: &mut ParameterSet) -> Result<()> {
        let mut names: Vec<&String> = self.param_cache.keys().collect();
        names.sort();
        for name in names {
            let id = self.param_cache[name.as_str()];
            if let Some(Some(g)) = self.grads.get(id) {
                ps.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Parameter gradients recorded in this graph, name-sorted.
    pub fn param_grads(&self) -> Vec<(String, Vec<Real>)> {
        let mut out: Vec<(String, Vec<Real>)> = self
            .param_cache
            .iter()
            .filter_map(|(name, &id)| {
                self.grads
                    .get(id)
                    .and_then(|g| g.clone())
                    .map(|g| (name.clone(), g))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// First node (lowest id) holding a non-finite value or gradient, with
    /// its op name; used for NaN diagnostics.
    pub fn find_non_finite(&self) -> Option<(usize, &'static str)> {
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Some((id, node.op.name()));
            }
        }
        for (id, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Some((id, self.nodes[id].op.name()));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[Real]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.input(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.input(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_small_oracle() {
        // expected values from the naive triple loop in kernels::tests
        let mut g = Graph::new();
        let a = g.input(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.input(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input_grad(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_analytic() {
        // loss = sum(x*x) at x=[1,2] -> grad [2,4]
        let mut g = Graph::new();
        let x = g.input_grad(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input_grad(Tensor::zeros(&[2, 2]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(4))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.input(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert!(g.value(y).all_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!(g.value(y).data()[1] < 1e-6);
    }

    #[test]
    fn softmax_hand_case() {
        // [ln1, ln2, ln3] -> [1/6, 2/6, 3/6]
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![(1.0 as Real).ln(), (2.0 as Real).ln(), (3.0 as Real).ln()]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 8], 3.7));
        let y = g.layer_norm_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let d = 16;
        let data: Vec<Real> = (0..d).map(|i| (i as Real * 1.3).sin() * 4.0 + 2.0).collect();
        let x = g.input(Tensor::new(vec![1, d], data).unwrap());
        let y = g.layer_norm_rows(x).unwrap();
        let out = g.value(y).data();
        let mean: Real = out.iter().sum::<Real>() / d as Real;
        let var: Real = out.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn softplus_asymptotes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![0.0, 100.0, -100.0]).unwrap());
        let y = g.softplus(x).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - (2.0 as Real).ln()).abs() < 1e-6);
        assert!((out[1] - 100.0).abs() < 1e-4);
        assert!(out[2] > 0.0 && out[2] < 1e-6);
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::new();
        // [2,4,6,8] -> [3,7]
        let x = g.input(Tensor::new(vec![4, 1], vec![2.0, 4.0, 6.0, 8.0]).unwrap());
        let y = g.avg_pool1d_ceil(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
        // T=1 stays length 1
        let x = g.input(Tensor::new(vec![1, 1], vec![5.0]).unwrap());
        let y = g.avg_pool1d_ceil(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        // odd tail averages alone: [1,3,10] -> [2,10]
        let x = g.input(Tensor::new(vec![3, 1], vec![1.0, 3.0, 10.0]).unwrap());
        let y = g.avg_pool1d_ceil(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 10.0]);
    }

    #[test]
    fn repeat_rows_pattern() {
        let mut g = Graph::new();
        let x = g.input(t2(&[&[1.0], &[2.0], &[3.0]]));
        let y = g.repeat_rows(x, &[2, 3, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 2.0, 3.0]);
        assert!(g.repeat_rows(x, &[1, 0, 1]).is_err());
    }

    #[test]
    fn repeat_rows_grad_sums_copies() {
        let mut g = Graph::new();
        let x = g.input_grad(t2(&[&[1.0], &[2.0]]));
        let y = g.repeat_rows(x, &[3, 2]).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 2.0]);
    }

    #[test]
    fn embed_rows_out_of_range() {
        let mut g = Graph::new();
        let table = g.input(Tensor::zeros(&[4, 8]));
        assert!(g.embed_rows(table, &[0, 4]).is_err());
    }

    #[test]
    fn backward_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input_grad(Tensor::new(vec![4, 4], (0..16).map(|i| (i as Real * 0.3).sin()).collect()).unwrap());
            let w = g.input_grad(Tensor::new(vec![4, 4], (0..16).map(|i| (i as Real * 0.7).cos()).collect()).unwrap());
            let h = g.matmul(x, w).unwrap();
            let h = g.tanh(h).unwrap();
            let sm = g.softmax_rows(h).unwrap();
            let l = g.sum_all(sm).unwrap();
            let l2 = g.mul(l, l).unwrap();
            g.backward(l2).unwrap();
            (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
