//! Minimal reverse-mode tensor engine.
//!
//! Every numeric kernel in the pipeline runs through [`Graph`]: a flat tape
//! of dense tensors where each node records the op that produced it. Parents
//! always precede children, so backward is a single reverse sweep over the
//! tape. The engine is generic over the scalar type: `f64` for gradient
//! checks and acceptance runs, `f32` when training speed matters.
//!
//! Ops never emit NaN/Inf silently; any non-finite output is an error.

mod gradcheck;
mod kernels;
mod store;

pub use gradcheck::{grad_check, GradCheckReport};
pub use store::{ParamStore, CHECKPOINT_MAGIC};

use std::fmt;

/// Scalar type the graph computes in.
pub trait Real:
    num_traits::Float + std::ops::AddAssign + std::ops::SubAssign + Copy + fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument ({detail})")]
    InvalidArg { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    /// a[m,k] * b[n,k]^T -> [m,n]
    MatMulNT { a: TensorId, b: TensorId },
    MatVec { a: TensorId, v: TensorId },
    /// v[k] * m[k,n] -> [n]
    VecMat { v: TensorId, m: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// b[n] added to every row of a[m,n]
    AddRowBroadcast { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddConst { a: TensorId },
    /// ca*a + cb*b elementwise
    LinComb { a: TensorId, b: TensorId, ca: f64, cb: f64 },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Clamp01 { a: TensorId },
    /// softmax over the last axis, logits scaled by inv_temp first
    Softmax { a: TensorId, inv_temp: f64 },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    CrossEntropy { logits: TensorId, label: usize },
    CosineSim { a: TensorId, b: TensorId },
    NormalizeRows { a: TensorId },
    MeanRows { a: TensorId },
    MeanElems { a: TensorId },
    StackScalars { items: Vec<TensorId> },
    StackRows { items: Vec<TensorId> },
    ConcatVec { items: Vec<TensorId> },
    SliceVec { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize, len: usize },
    ConcatCols { items: Vec<TensorId> },
    GatherRows { a: TensorId, idx: Vec<usize> },
    SmoothL1 { pred: TensorId, target: Vec<f64>, beta: f64 },
    Im2Col { a: TensorId, spec: ConvSpec },
    Reshape { a: TensorId },
}

/// Geometry of one im2col expansion. Input rows are spatial positions of an
/// [h*w, c] activation map; output rows are output positions with k*k*c
/// columns, zero padded at the border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

struct Node<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

/// Forward tape. One graph per forward pass; ids are only valid on the
/// graph that issued them.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    params: Vec<(String, TensorId)>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by tensor id.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: TensorId) -> Option<&[R]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256), params: Vec::new() }
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[R] {
        &self.nodes[id.0].values
    }

    pub fn values_f64(&self, id: TensorId) -> Vec<f64> {
        self.nodes[id.0].values.iter().map(|&v| Real::to_f64(v)).collect()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0].to_f64()
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<R>,
        op: Op,
        needs_grad: bool,
    ) -> Result<TensorId> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, values, op, needs_grad });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// New leaf without gradient tracking (inputs, constants).
    pub fn constant(&mut self, shape: &[usize], values: Vec<R>) -> Result<TensorId> {
        self.push("constant", shape.to_vec(), values, Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, shape: &[usize], values: &[f64]) -> Result<TensorId> {
        let v = values.iter().map(|&x| R::from_f64(x)).collect();
        self.constant(shape, v)
    }

    /// New tracked leaf.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<R>) -> Result<TensorId> {
        self.push("leaf", shape.to_vec(), values, Op::Leaf, true)
    }

    /// Tracked leaf initialized from a named parameter; remembered so the
    /// caller can map gradients back to the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        let p = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let values = p.values.iter().map(|&v| R::from_f64(v)).collect();
        let id = self.push("param", p.shape.clone(), values, Op::Leaf, true)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn param_leaves(&self) -> &[(String, TensorId)] {
        &self.params
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got {s:?}"),
            }),
        }
    }

    fn dims1(&self, id: TensorId, op: &'static str) -> Result<usize> {
        match self.nodes[id.0].shape[..] {
            [n] => Ok(n),
            ref s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 1, got {s:?}"),
            }),
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul_nn(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, ng)
    }

    /// a[m,k] * b[n,k]^T
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul_nt(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul_nt", vec![m, n], out, Op::MatMulNT { a, b }, ng)
    }

    pub fn matvec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matvec")?;
        let n = self.dims1(v, "matvec")?;
        if k != n {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                detail: format!("inner dims {k} vs {n}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let vv = &self.nodes[v.0].values;
        let out: Vec<R> = (0..m).map(|i| kernels::dot(&av[i * k..(i + 1) * k], vv)).collect();
        let ng = self.needs(a) || self.needs(v);
        self.push("matvec", vec![m], out, Op::MatVec { a, v }, ng)
    }

    pub fn vecmat(&mut self, v: TensorId, m: TensorId) -> Result<TensorId> {
        let k = self.dims1(v, "vecmat")?;
        let (k2, n) = self.dims2(m, "vecmat")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "vecmat",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let vv = &self.nodes[v.0].values;
        let mv = &self.nodes[m.0].values;
        let mut out = vec![R::zero(); n];
        for (l, &w) in vv.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(&mv[l * n..(l + 1) * n]) {
                *o += w * x;
            }
        }
        let ng = self.needs(v) || self.needs(m);
        self.push("vecmat", vec![n], out, Op::VecMat { v, m }, ng)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", shape, out, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", shape, out, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", shape, out, Op::Mul { a, b }, ng)
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_row_broadcast")?;
        let bn = self.dims1(b, "add_row_broadcast")?;
        if n != bn {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("cols {n} vs bias {bn}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push("add_row_broadcast", vec![m, n], out, Op::AddRowBroadcast { a, b }, ng)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cr = R::from_f64(c);
        let out: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x * cr).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push("scale", shape, out, Op::Scale { a, c }, ng)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cr = R::from_f64(c);
        let out: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x + cr).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push("add_const", shape, out, Op::AddConst { a }, ng)
    }

    pub fn lincomb(&mut self, a: TensorId, b: TensorId, ca: f64, cb: f64) -> Result<TensorId> {
        self.same_shape(a, b, "lincomb")?;
        let (car, cbr) = (R::from_f64(ca), R::from_f64(cb));
        let out: Vec<R> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| car * x + cbr * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push("lincomb", shape, out, Op::LinComb { a, b, ca, cb }, ng)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let z = R::zero();
        let out: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x.max(z)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push("relu", shape, out, Op::Relu { a }, ng)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let one = R::one();
        let out: Vec<R> =
            self.nodes[a.0].values.iter().map(|&x| one / (one + (-x).exp())).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push("sigmoid", shape, out, Op::Sigmoid { a }, ng)
    }

    pub fn clamp01(&mut self, a: TensorId) -> Result<TensorId> {
        let (z, one) = (R::zero(), R::one());
        let out: Vec<R> = self.nodes[a.0].values.iter().map(|&x| x.max(z).min(one)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push("clamp01", shape, out, Op::Clamp01 { a }, ng)
    }

    /// Temperature-scaled softmax over the last axis (rank 1 or 2).
    /// Shift-invariant: the row max is subtracted before exponentiation.
    pub fn softmax(&mut self, a: TensorId, temperature: f64) -> Result<TensorId> {
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidArg {
                op: "softmax",
                detail: format!("temperature {temperature} must be positive"),
            });
        }
        let inv_temp = 1.0 / temperature;
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "softmax",
            detail: "rank 0".into(),
        })?;
        let rows = self.nodes[a.0].values.len() / n;
        let it = R::from_f64(inv_temp);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &self.nodes[a.0].values[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            let start = out.len();
            for &x in row {
                let e = ((x - mx) * it).exp();
                sum += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o = *o / sum;
            }
        }
        let ng = self.needs(a);
        self.push("softmax", shape, out, Op::Softmax { a, inv_temp }, ng)
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().unwrap_or(&0);
        if n < 2 {
            return Err(TensorError::InvalidArg {
                op: "layer_norm",
                detail: format!("normalized dim {n} must be >= 2"),
            });
        }
        if self.dims1(gain, "layer_norm")? != n || self.dims1(bias, "layer_norm")? != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: "gain/bias length".into(),
            });
        }
        let rows = self.nodes[x.0].values.len() / n;
        let eps = R::from_f64(LN_EPS);
        let nf = R::from_f64(n as f64);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &self.nodes[x.0].values[r * n..(r + 1) * n];
            let mean = row.iter().fold(R::zero(), |s, &v| s + v) / nf;
            let var = row.iter().fold(R::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
            let inv_std = R::one() / (var + eps).sqrt();
            for j in 0..n {
                let xn = (row[j] - mean) * inv_std;
                out.push(xn * self.nodes[gain.0].values[j] + self.nodes[bias.0].values[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias }, ng)
    }

    /// -log softmax(logits)[label] for a rank-1 logits vector.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let n = self.dims1(logits, "cross_entropy")?;
        if label >= n {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy",
                detail: format!("label {label} out of range 0..{n}"),
            });
        }
        let row = &self.nodes[logits.0].values;
        let mx = row.iter().cloned().fold(R::neg_infinity(), R::max);
        let lse = row.iter().fold(R::zero(), |s, &v| s + (v - mx).exp()).ln() + mx;
        let loss = lse - row[label];
        let ng = self.needs(logits);
        self.push("cross_entropy", vec![1], vec![loss], Op::CrossEntropy { logits, label }, ng)
    }

    /// Cosine similarity of two rank-1 tensors; errors on near-zero norms.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let n = self.dims1(a, "cosine_sim")?;
        if self.dims1(b, "cosine_sim")? != n {
            return Err(TensorError::ShapeMismatch { op: "cosine_sim", detail: "length".into() });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let na = kernels::dot(av, av).sqrt();
        let nb = kernels::dot(bv, bv).sqrt();
        let floor = R::from_f64(NORM_EPS);
        if na < floor || nb < floor {
            return Err(TensorError::InvalidArg {
                op: "cosine_sim",
                detail: "zero-norm input".into(),
            });
        }
        let cosv = kernels::dot(av, bv) / (na * nb);
        let ng = self.needs(a) || self.needs(b);
        self.push("cosine_sim", vec![1], vec![cosv], Op::CosineSim { a, b }, ng)
    }

    /// L2-normalize each row (or the whole vector for rank 1).
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::ShapeMismatch { op: "normalize", detail: "rank 0".into() });
        }
        let rows = self.nodes[a.0].values.len() / n;
        let floor = R::from_f64(NORM_EPS);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &self.nodes[a.0].values[r * n..(r + 1) * n];
            let norm = kernels::dot(row, row).sqrt();
            if norm < floor {
                return Err(TensorError::InvalidArg {
                    op: "normalize",
                    detail: "zero-norm row".into(),
                });
            }
            out.extend(row.iter().map(|&v| v / norm));
        }
        let ng = self.needs(a);
        self.push("normalize", shape, out, Op::NormalizeRows { a }, ng)
    }

    /// Mean over rows: [m,n] -> [n].
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let inv = R::from_f64(1.0 / m as f64);
        let av = &self.nodes[a.0].values;
        let mut out = vec![R::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        let ng = self.needs(a);
        self.push("mean_rows", vec![n], out, Op::MeanRows { a }, ng)
    }

    /// Mean of all elements -> scalar.
    pub fn mean_elems(&mut self, a: TensorId) -> Result<TensorId> {
        let len = self.nodes[a.0].values.len();
        if len == 0 {
            return Err(TensorError::InvalidArg { op: "mean_elems", detail: "empty".into() });
        }
        let inv = R::from_f64(1.0 / len as f64);
        let s = self.nodes[a.0].values.iter().fold(R::zero(), |s, &v| s + v) * inv;
        let ng = self.needs(a);
        self.push("mean_elems", vec![1], vec![s], Op::MeanElems { a }, ng)
    }

    pub fn stack_scalars(&mut self, items: &[TensorId]) -> Result<TensorId> {
        let mut out = Vec::with_capacity(items.len());
        let mut ng = false;
        for &id in items {
            if self.nodes[id.0].values.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_scalars",
                    detail: "non-scalar item".into(),
                });
            }
            out.push(self.nodes[id.0].values[0]);
            ng |= self.needs(id);
        }
        self.push(
            "stack_scalars",
            vec![items.len()],
            out,
            Op::StackScalars { items: items.to_vec() },
            ng,
        )
    }

    pub fn stack_rows(&mut self, items: &[TensorId]) -> Result<TensorId> {
        if items.is_empty() {
            return Err(TensorError::InvalidArg { op: "stack_rows", detail: "empty".into() });
        }
        let n = self.dims1(items[0], "stack_rows")?;
        let mut out = Vec::with_capacity(items.len() * n);
        let mut ng = false;
        for &id in items {
            if self.dims1(id, "stack_rows")? != n {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    detail: "row length".into(),
                });
            }
            out.extend_from_slice(&self.nodes[id.0].values);
            ng |= self.needs(id);
        }
        self.push(
            "stack_rows",
            vec![items.len(), n],
            out,
            Op::StackRows { items: items.to_vec() },
            ng,
        )
    }

    pub fn concat_vec(&mut self, items: &[TensorId]) -> Result<TensorId> {
        let mut out = Vec::new();
        let mut ng = false;
        for &id in items {
            self.dims1(id, "concat_vec")?;
            out.extend_from_slice(&self.nodes[id.0].values);
            ng |= self.needs(id);
        }
        let len = out.len();
        self.push("concat_vec", vec![len], out, Op::ConcatVec { items: items.to_vec() }, ng)
    }

    pub fn slice_vec(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let n = self.dims1(a, "slice_vec")?;
        if start + len > n {
            return Err(TensorError::InvalidArg {
                op: "slice_vec",
                detail: format!("{start}+{len} > {n}"),
            });
        }
        let out = self.nodes[a.0].values[start..start + len].to_vec();
        let ng = self.needs(a);
        self.push("slice_vec", vec![len], out, Op::SliceVec { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::InvalidArg {
                op: "slice_cols",
                detail: format!("{start}+{len} > {n}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(a);
        self.push("slice_cols", vec![m, len], out, Op::SliceCols { a, start, len }, ng)
    }

    pub fn concat_cols(&mut self, items: &[TensorId]) -> Result<TensorId> {
        if items.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_cols", detail: "empty".into() });
        }
        let (m, _) = self.dims2(items[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(items.len());
        let mut total = 0usize;
        let mut ng = false;
        for &id in items {
            let (mi, ni) = self.dims2(id, "concat_cols")?;
            if mi != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: "row count".into(),
                });
            }
            widths.push(ni);
            total += ni;
            ng |= self.needs(id);
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&id, &w) in items.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[id.0].values[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, total], out, Op::ConcatCols { items: items.to_vec() }, ng)
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::InvalidArg {
                op: "gather_rows",
                detail: format!("row {bad} out of range 0..{m}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(
            "gather_rows",
            vec![idx.len(), n],
            out,
            Op::GatherRows { a, idx: idx.to_vec() },
            ng,
        )
    }

    /// Smooth-L1 (Huber) loss against a constant target, summed over elements.
    pub fn smooth_l1(&mut self, pred: TensorId, target: &[f64], beta: f64) -> Result<TensorId> {
        let n = self.dims1(pred, "smooth_l1")?;
        if target.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                detail: "target length".into(),
            });
        }
        if !(beta > 0.0) {
            return Err(TensorError::InvalidArg {
                op: "smooth_l1",
                detail: "beta must be positive".into(),
            });
        }
        let b = R::from_f64(beta);
        let half = R::from_f64(0.5);
        let mut loss = R::zero();
        for (p, &t) in self.nodes[pred.0].values.iter().zip(target) {
            let d = (*p - R::from_f64(t)).abs();
            loss += if d < b { half * d * d / b } else { d - half * b };
        }
        let ng = self.needs(pred);
        self.push(
            "smooth_l1",
            vec![1],
            vec![loss],
            Op::SmoothL1 { pred, target: target.to_vec(), beta },
            ng,
        )
    }

    pub fn im2col(&mut self, a: TensorId, spec: ConvSpec) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "im2col")?;
        if m != spec.h * spec.w || n != spec.c {
            return Err(TensorError::ShapeMismatch {
                op: "im2col",
                detail: format!("got [{m},{n}], spec wants [{}, {}]", spec.h * spec.w, spec.c),
            });
        }
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let cols = spec.k * spec.k * spec.c;
        let av = &self.nodes[a.0].values;
        let mut out = vec![R::zero(); oh * ow * cols];
        kernels::im2col(av, &spec, &mut out);
        let ng = self.needs(a);
        self.push("im2col", vec![oh * ow, cols], out, Op::Im2Col { a, spec }, ng)
    }

    /// Change shape without touching data.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[a.0].shape),
            });
        }
        let out = self.nodes[a.0].values.clone();
        let ng = self.needs(a);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, ng)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<R>> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::InvalidArg {
                op: "backward",
                detail: "loss must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<R>>], id: TensorId, delta: &[R]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_with<F: FnOnce(&mut [R])>(
        &self,
        grads: &mut [Option<Vec<R>>],
        id: TensorId,
        f: F,
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![R::zero(); self.nodes[id.0].values.len()]);
        }
        f(grads[id.0].as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // dA = dC * B^T
                self.accumulate_with(grads, *a, |ga| {
                    kernels::matmul_nt(g, &self.nodes[b.0].values, m, n, k, ga);
                });
                // dB = A^T * dC
                self.accumulate_with(grads, *b, |gb| {
                    kernels::matmul_tn(&self.nodes[a.0].values, g, m, k, n, gb);
                });
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                // C = A B^T: dA = dC * B ; dB = dC^T * A
                self.accumulate_with(grads, *a, |ga| {
                    kernels::matmul_nn(g, &self.nodes[b.0].values, m, n, k, ga);
                });
                self.accumulate_with(grads, *b, |gb| {
                    kernels::matmul_tn(g, &self.nodes[a.0].values, m, n, k, gb);
                });
            }
            Op::MatVec { a, v } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let vv = &self.nodes[v.0].values;
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        let gi = g[i];
                        for (o, &x) in ga[i * k..(i + 1) * k].iter_mut().zip(vv) {
                            *o += gi * x;
                        }
                    }
                });
                let av = &self.nodes[a.0].values;
                self.accumulate_with(grads, *v, |gv| {
                    for i in 0..m {
                        let gi = g[i];
                        for (o, &x) in gv.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                            *o += gi * x;
                        }
                    }
                });
            }
            Op::VecMat { v, m } => {
                let (k, n) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let mv = &self.nodes[m.0].values;
                self.accumulate_with(grads, *v, |gv| {
                    for l in 0..k {
                        gv[l] += kernels::dot(g, &mv[l * n..(l + 1) * n]);
                    }
                });
                let vv = &self.nodes[v.0].values;
                self.accumulate_with(grads, *m, |gm| {
                    for l in 0..k {
                        let w = vv[l];
                        for (o, &gj) in gm[l * n..(l + 1) * n].iter_mut().zip(g) {
                            *o += w * gj;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate_with(grads, *b, |gb| {
                    for (o, &d) in gb.iter_mut().zip(g) {
                        *o -= d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = &self.nodes[b.0].values;
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, &d), &x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * x;
                    }
                });
                let av = &self.nodes[a.0].values;
                self.accumulate_with(grads, *b, |gb| {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRowBroadcast { a, b } => {
                self.accumulate(grads, *a, g);
                let n = self.nodes[b.0].values.len();
                let m = self.nodes[a.0].values.len() / n;
                self.accumulate_with(grads, *b, |gb| {
                    for i in 0..m {
                        for (o, &d) in gb.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += d;
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                let cr = R::from_f64(*c);
                self.accumulate_with(grads, *a, |ga| {
                    for (o, &d) in ga.iter_mut().zip(g) {
                        *o += d * cr;
                    }
                });
            }
            Op::AddConst { a } => self.accumulate(grads, *a, g),
            Op::LinComb { a, b, ca, cb } => {
                let (car, cbr) = (R::from_f64(*ca), R::from_f64(*cb));
                self.accumulate_with(grads, *a, |ga| {
                    for (o, &d) in ga.iter_mut().zip(g) {
                        *o += d * car;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for (o, &d) in gb.iter_mut().zip(g) {
                        *o += d * cbr;
                    }
                });
            }
            Op::Relu { a } => {
                let av = &self.nodes[a.0].values;
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, &d), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > R::zero() {
                            *o += d;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let yv = &node.values;
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(yv) {
                        *o += d * y * (R::one() - y);
                    }
                });
            }
            Op::Clamp01 { a } => {
                let av = &self.nodes[a.0].values;
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, &d), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > R::zero() && x < R::one() {
                            *o += d;
                        }
                    }
                });
            }
            Op::Softmax { a, inv_temp } => {
                let n = *node.shape.last().unwrap();
                let rows = node.values.len() / n;
                let it = R::from_f64(*inv_temp);
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..rows {
                        let y = &node.values[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot = kernels::dot(gr, y);
                        for j in 0..n {
                            ga[r * n + j] += it * y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = *node.shape.last().unwrap();
                let rows = node.values.len() / n;
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gain.0].values;
                let eps = R::from_f64(LN_EPS);
                let nf = R::from_f64(n as f64);
                for r in 0..rows {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = row.iter().fold(R::zero(), |s, &v| s + v) / nf;
                    let var =
                        row.iter().fold(R::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
                    let inv_std = R::one() / (var + eps).sqrt();
                    let xn: Vec<R> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    self.accumulate_with(grads, *bias, |gb| {
                        for (o, &d) in gb.iter_mut().zip(gr) {
                            *o += d;
                        }
                    });
                    self.accumulate_with(grads, *gain, |gg| {
                        for j in 0..n {
                            gg[j] += gr[j] * xn[j];
                        }
                    });
                    // dL/dxn then project out mean and xn components
                    let dxn: Vec<R> = (0..n).map(|j| gr[j] * gv[j]).collect();
                    let mean_dxn = dxn.iter().fold(R::zero(), |s, &v| s + v) / nf;
                    let mean_dxn_xn =
                        dxn.iter().zip(&xn).fold(R::zero(), |s, (&d, &v)| s + d * v) / nf;
                    self.accumulate_with(grads, *x, |gx| {
                        for j in 0..n {
                            gx[r * n + j] +=
                                inv_std * (dxn[j] - mean_dxn - xn[j] * mean_dxn_xn);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, label } => {
                let row = &self.nodes[logits.0].values;
                let mx = row.iter().cloned().fold(R::neg_infinity(), R::max);
                let sum = row.iter().fold(R::zero(), |s, &v| s + (v - mx).exp());
                let gl = g[0];
                self.accumulate_with(grads, *logits, |gr| {
                    for (j, o) in gr.iter_mut().enumerate() {
                        let p = (row[j] - mx).exp() / sum;
                        let ind = if j == *label { R::one() } else { R::zero() };
                        *o += gl * (p - ind);
                    }
                });
            }
            Op::CosineSim { a, b } => {
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                let na = kernels::dot(av, av).sqrt();
                let nb = kernels::dot(bv, bv).sqrt();
                let cosv = node.values[0];
                let gl = g[0];
                self.accumulate_with(grads, *a, |ga| {
                    for j in 0..av.len() {
                        ga[j] += gl * (bv[j] / (na * nb) - cosv * av[j] / (na * na));
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for j in 0..bv.len() {
                        gb[j] += gl * (av[j] / (na * nb) - cosv * bv[j] / (nb * nb));
                    }
                });
            }
            Op::NormalizeRows { a } => {
                let n = *node.shape.last().unwrap();
                let rows = node.values.len() / n;
                let av = &self.nodes[a.0].values;
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..rows {
                        let row = &av[r * n..(r + 1) * n];
                        let y = &node.values[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = kernels::dot(row, row).sqrt();
                        let dot = kernels::dot(gr, y);
                        for j in 0..n {
                            ga[r * n + j] += (gr[j] - dot * y[j]) / norm;
                        }
                    }
                });
            }
            Op::MeanRows { a } => {
                let n = node.values.len();
                let m = self.nodes[a.0].values.len() / n;
                let inv = R::from_f64(1.0 / m as f64);
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        for (o, &d) in ga[i * n..(i + 1) * n].iter_mut().zip(g) {
                            *o += d * inv;
                        }
                    }
                });
            }
            Op::MeanElems { a } => {
                let len = self.nodes[a.0].values.len();
                let d = g[0] * R::from_f64(1.0 / len as f64);
                self.accumulate_with(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += d;
                    }
                });
            }
            Op::StackScalars { items } => {
                for (j, &id) in items.iter().enumerate() {
                    self.accumulate(grads, id, &g[j..j + 1]);
                }
            }
            Op::StackRows { items } => {
                let n = node.shape[1];
                for (j, &id) in items.iter().enumerate() {
                    self.accumulate(grads, id, &g[j * n..(j + 1) * n]);
                }
            }
            Op::ConcatVec { items } => {
                let mut off = 0;
                for &id in items {
                    let len = self.nodes[id.0].values.len();
                    self.accumulate(grads, id, &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceVec { a, start } => {
                let len = node.values.len();
                self.accumulate_with(grads, *a, |ga| {
                    for (o, &d) in ga[*start..start + len].iter_mut().zip(g) {
                        *o += d;
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let n = self.nodes[a.0].shape[1];
                let m = node.shape[0];
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        for (o, &d) in
                            ga[i * n + start..i * n + start + len].iter_mut().zip(&g[i * len..])
                        {
                            *o += d;
                        }
                    }
                });
            }
            Op::ConcatCols { items } => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &id in items {
                    let w = self.nodes[id.0].shape[1];
                    self.accumulate_with(grads, id, |gi| {
                        for i in 0..m {
                            for (o, &d) in
                                gi[i * w..(i + 1) * w].iter_mut().zip(&g[i * total + off..])
                            {
                                *o += d;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { a, idx } => {
                let n = node.shape[1];
                self.accumulate_with(grads, *a, |ga| {
                    for (j, &row) in idx.iter().enumerate() {
                        for (o, &d) in ga[row * n..(row + 1) * n].iter_mut().zip(&g[j * n..]) {
                            *o += d;
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, target, beta } => {
                let b = R::from_f64(*beta);
                let pv = &self.nodes[pred.0].values;
                let gl = g[0];
                self.accumulate_with(grads, *pred, |gp| {
                    for (j, o) in gp.iter_mut().enumerate() {
                        let d = pv[j] - R::from_f64(target[j]);
                        let slope = if d.abs() < b {
                            d / b
                        } else if d > R::zero() {
                            R::one()
                        } else {
                            -R::one()
                        };
                        *o += gl * slope;
                    }
                });
            }
            Op::Im2Col { a, spec } => {
                self.accumulate_with(grads, *a, |ga| {
                    kernels::col2im(g, spec, ga);
                });
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
