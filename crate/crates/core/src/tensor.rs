//! Minimal reverse-mode differentiable array engine.
//!
//! Exactly the operations the encoder and training loops need: matmul (2D and
//! batched), additions, scaling, embedding lookup, layer norm, last-axis
//! softmax, GELU, dropout, reshape/permute/select/concat, mean, cross-entropy
//! and masked L1 losses.
//!
//! Values are computed eagerly; every op whose inputs require gradients
//! records itself on the graph in execution order, and [`Graph::backward`]
//! walks that order in reverse exactly once. The element type is an
//! engine-wide generic: training runs in `f32`, the gradcheck suite
//! instantiates `f64` where finite differences are meaningful.
//!
//! Everything is deterministic: parallel kernels only split work across
//! output rows, so each element's reduction order is fixed.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Marker for positions that contribute nothing to cross-entropy.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Minimum scalar-multiply count before a kernel bothers with threads.
const PAR_WORK_THRESHOLD: usize = 1 << 15;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the engine element type.
pub fn c<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("finite constant representable")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: {message}")]
    InvalidArg { op: &'static str, message: String },
    #[error("backward: loss must be scalar, got shape {0}")]
    NotScalar(String),
    #[error("cross_entropy: every target position is ignored")]
    AllIgnored,
    #[error("l1_loss: observed mask has no set entries")]
    AllUnobserved,
}

fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: fmt_shape(lhs),
        rhs: fmt_shape(rhs),
    }
}

/// Row-major dense array. An empty shape is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArg {
                op: "tensor",
                message: format!(
                    "shape {} wants {numel} elements, data has {}",
                    fmt_shape(&shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, values.iter().map(|&v| c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var },
    Add { a: Var, b: Var },
    SuffixAdd { a: Var, b: Var },
    Scale { a: Var, factor: E },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { a: Var, gain: Var, bias: Var, mean: Vec<E>, rstd: Vec<E> },
    Softmax { a: Var },
    Gelu { a: Var },
    Dropout { a: Var, kept: Vec<bool>, scale: E },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Select { a: Var, axis: usize, index: usize },
    Mean { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<E>, active: usize },
    L1 { pred: Var, target: Var, observed: Vec<bool>, count: usize },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Ordered record of executed operations; reverse-mode accumulation replays
/// it back-to-front.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        // Record the op only when a gradient can flow through it.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// 2D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Matmul { a, b }))
    }

    /// Batched matrix product `(B,m,k) x (B,k,n) -> (B,m,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![E::zero(); batch * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let run = |(bi, chunk): (usize, &mut [E])| {
                mm_nn_serial(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    chunk,
                    m,
                    k,
                    n,
                );
            };
            if batch * m * k * n >= PAR_WORK_THRESHOLD {
                out.par_chunks_mut(m * n).enumerate().for_each(|(bi, ch)| run((bi, ch)));
            } else {
                out.chunks_mut(m * n).enumerate().for_each(run);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, rg, Op::Bmm { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", self.value(a).shape(), self.value(b).shape()));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add { a, b }))
    }

    /// Bias-add pattern: `b`'s shape must be a suffix of `a`'s; `b` repeats
    /// over the leading axes. The only broadcasting the engine supports.
    pub fn bias_add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sb.is_empty() || sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err("bias_add", &sa, &sb));
        }
        let block: usize = sb.iter().product();
        let db = self.value(b).data();
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[i % block])
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, data)?, rg, Op::SuffixAdd { a, b }))
    }

    /// Multiplication by a compile-time constant factor.
    pub fn scale(&mut self, a: Var, factor: E) -> Var {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data }, rg, Op::Scale { a, factor })
    }

    /// Gathers rows of `table` `(V,H)` by id; output shape `prefix x H`.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        prefix: &[usize],
    ) -> Result<Var, TensorError> {
        let st = self.value(table).shape();
        if st.len() != 2 {
            return Err(shape_err("embedding", st, &[0, 0]));
        }
        let (vocab, hidden) = (st[0], st[1]);
        let count: usize = prefix.iter().product();
        if count != ids.len() {
            return Err(TensorError::InvalidArg {
                op: "embedding",
                message: format!("{} ids for prefix shape {}", ids.len(), fmt_shape(prefix)),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * hidden);
        let dt = self.value(table).data();
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::InvalidArg {
                    op: "embedding",
                    message: format!("id {id} out of range for table with {vocab} rows"),
                });
            }
            data.extend_from_slice(&dt[id * hidden..(id + 1) * hidden]);
        }
        let mut shape = prefix.to_vec();
        shape.push(hidden);
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the affine `gain`/`bias` (both shaped `[H]`).
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        let h = *sa.last().ok_or_else(|| TensorError::InvalidArg {
            op: "layer_norm",
            message: "input must have at least one axis".into(),
        })?;
        if self.value(gain).shape() != [h] || self.value(bias).shape() != [h] {
            return Err(shape_err("layer_norm", &sa, self.value(gain).shape()));
        }
        let rows = self.value(a).numel() / h;
        let eps = c::<E>(eps);
        let mut data = vec![E::zero(); rows * h];
        let mut mean = vec![E::zero(); rows];
        let mut rstd = vec![E::zero(); rows];
        {
            let da = self.value(a).data();
            let dg = self.value(gain).data();
            let db = self.value(bias).data();
            let hn = c::<E>(h as f64);
            for r in 0..rows {
                let row = &da[r * h..(r + 1) * h];
                let mu = row.iter().fold(E::zero(), |s, &x| s + x) / hn;
                let var = row
                    .iter()
                    .fold(E::zero(), |s, &x| s + (x - mu) * (x - mu))
                    / hn;
                let rs = E::one() / (var + eps).sqrt();
                mean[r] = mu;
                rstd[r] = rs;
                for i in 0..h {
                    data[r * h + i] = (row[i] - mu) * rs * dg[i] + db[i];
                }
            }
        }
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push(
            Tensor::new(sa, data)?,
            rg,
            Op::LayerNorm {
                a,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        let h = *sa.last().ok_or_else(|| TensorError::InvalidArg {
            op: "softmax",
            message: "input must have at least one axis".into(),
        })?;
        let rows = self.value(a).numel() / h;
        let mut data = vec![E::zero(); rows * h];
        {
            let da = self.value(a).data();
            for r in 0..rows {
                let row = &da[r * h..(r + 1) * h];
                let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
                let mut sum = E::zero();
                for i in 0..h {
                    let e = (row[i] - max).exp();
                    data[r * h + i] = e;
                    sum = sum + e;
                }
                for i in 0..h {
                    data[r * h + i] = data[r * h + i] / sum;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::new(sa, data)?, rg, Op::Softmax { a }))
    }

    /// GELU in its tanh form: `0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data }, rg, Op::Gelu { a })
    }

    /// Inverted dropout: kept activations are divided by `1 - p` so eval
    /// needs no rescale. With `p == 0` or `train == false` this is the
    /// identity (the same node is returned, nothing is recorded).
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, seed: u64) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = c::<E>(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let kept: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= p).collect();
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(&kept)
            .map(|(&x, &k)| if k { x * keep_scale } else { E::zero() })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            Tensor { shape, data },
            rg,
            Op::Dropout {
                a,
                kept,
                scale: keep_scale,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err("reshape", self.value(a).shape(), &shape));
        }
        let data = self.value(a).data().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Reshape { a }))
    }

    /// Axis permutation (materialized): `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        if !is_permutation(perm, sa.len()) {
            return Err(TensorError::InvalidArg {
                op: "permute",
                message: format!("{perm:?} is not a permutation of {} axes", sa.len()),
            });
        }
        let (shape, data) = permute_data(self.value(a).data(), &sa, perm);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Drops `axis` by picking `index` along it, e.g. the `[CLS]` position.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        if axis >= sa.len() || index >= sa[axis] {
            return Err(TensorError::InvalidArg {
                op: "select",
                message: format!("axis {axis} index {index} out of range for {}", fmt_shape(&sa)),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let da = self.value(a).data();
        for o in 0..outer {
            let base = (o * sa[axis] + index) * inner;
            data.extend_from_slice(&da[base..base + inner]);
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Select { a, axis, index }))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let sum = self.value(a).data().iter().fold(E::zero(), |s, &x| s + x);
        let value = Tensor::scalar(sum / c(n as f64));
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Mean { a })
    }

    /// Concatenation of same-rank tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                message: "no tensors given".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                message: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (d, e))| i != axis && d != e)
            {
                return Err(shape_err("concat", &first, sp));
            }
            axis_total += sp[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first;
        shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let sp = self.value(p).shape();
                let len = sp[axis] * inner;
                let dp = self.value(p).data();
                data.extend_from_slice(&dp[o * len..(o + 1) * len]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Mean negative log-softmax of `logits` `(N,V)` at each non-ignored
    /// target; positions marked [`IGNORE_INDEX`] contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let sl = self.value(logits).shape().to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy",
                message: format!(
                    "logits {} vs {} targets (want rank-2 with matching rows)",
                    fmt_shape(&sl),
                    targets.len()
                ),
            });
        }
        let (n, v) = (sl[0], sl[1]);
        for (r, &t) in targets.iter().enumerate() {
            if t != IGNORE_INDEX && t >= v {
                return Err(TensorError::InvalidArg {
                    op: "cross_entropy",
                    message: format!("target {t} at row {r} out of range for {v} classes"),
                });
            }
        }
        let active = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if active == 0 {
            return Err(TensorError::AllIgnored);
        }
        let mut probs = vec![E::zero(); n * v];
        let mut loss = E::zero();
        {
            let dl = self.value(logits).data();
            for (r, &t) in targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                let row = &dl[r * v..(r + 1) * v];
                let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
                let mut sum = E::zero();
                for i in 0..v {
                    let e = (row[i] - max).exp();
                    probs[r * v + i] = e;
                    sum = sum + e;
                }
                for i in 0..v {
                    probs[r * v + i] = probs[r * v + i] / sum;
                }
                let lse = max + sum.ln();
                loss = loss + (lse - row[t]);
            }
        }
        let value = Tensor::scalar(loss / c(active as f64));
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                active,
            },
        ))
    }

    /// Mean absolute error over the observed entries of `pred` vs `target`.
    pub fn l1_loss(
        &mut self,
        pred: Var,
        target: Var,
        observed: &[bool],
    ) -> Result<Var, TensorError> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(shape_err(
                "l1_loss",
                self.value(pred).shape(),
                self.value(target).shape(),
            ));
        }
        if observed.len() != self.value(pred).numel() {
            return Err(TensorError::InvalidArg {
                op: "l1_loss",
                message: format!(
                    "mask has {} entries for {} predictions",
                    observed.len(),
                    self.value(pred).numel()
                ),
            });
        }
        let count = observed.iter().filter(|&&o| o).count();
        if count == 0 {
            return Err(TensorError::AllUnobserved);
        }
        let mut sum = E::zero();
        {
            let dp = self.value(pred).data();
            let dt = self.value(target).data();
            for i in 0..dp.len() {
                if observed[i] {
                    sum = sum + (dp[i] - dt[i]).abs();
                }
            }
        }
        let value = Tensor::scalar(sum / c(count as f64));
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(
            value,
            rg,
            Op::L1 {
                pred,
                target,
                observed: observed.to_vec(),
                count,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad`
    /// node. Calling twice without a fresh graph accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(fmt_shape(self.value(loss).shape())));
        }
        self.accumulate(loss, vec![E::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue, // not an ancestor of the loss
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let contributions = self.backward_op(idx, &op, &grad);
            let is_leaf = matches!(op, Op::Leaf);
            self.nodes[idx].op = op;
            // Only leaf grads are retained (and accumulate across calls);
            // intermediate grads are consumed by the walk.
            if is_leaf {
                self.nodes[idx].grad = Some(grad);
            }
            for (var, contrib) in contributions {
                self.accumulate(var, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<E>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_op(&self, idx: usize, op: &Op<E>, grad: &[E]) -> Vec<(Var, Vec<E>)> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.value(*a).shape();
                let (m, k) = (sa[0], sa[1]);
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![E::zero(); m * k];
                    mm_nt(grad, self.value(*b).data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![E::zero(); k * n];
                    mm_tn(self.value(*a).data(), grad, &mut db, k, m, n);
                    out.push((*b, db));
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.value(*a).shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.value(*b).shape()[2];
                if self.requires_grad(*a) {
                    let mut da = vec![E::zero(); batch * m * k];
                    for bi in 0..batch {
                        mm_nt(
                            &grad[bi * m * n..(bi + 1) * m * n],
                            &self.value(*b).data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![E::zero(); batch * k * n];
                    for bi in 0..batch {
                        mm_tn(
                            &self.value(*a).data()[bi * m * k..(bi + 1) * m * k],
                            &grad[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    out.push((*a, grad.to_vec()));
                }
                if self.requires_grad(*b) {
                    out.push((*b, grad.to_vec()));
                }
            }
            Op::SuffixAdd { a, b } => {
                if self.requires_grad(*a) {
                    out.push((*a, grad.to_vec()));
                }
                if self.requires_grad(*b) {
                    let block = self.value(*b).numel();
                    let mut db = vec![E::zero(); block];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % block] = db[i % block] + g;
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale { a, factor } => {
                if self.requires_grad(*a) {
                    out.push((*a, grad.iter().map(|&g| g * *factor).collect()));
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let st = self.value(*table).shape();
                    let hidden = st[1];
                    let mut dt = vec![E::zero(); st[0] * hidden];
                    for (row, &id) in ids.iter().enumerate() {
                        for i in 0..hidden {
                            dt[id * hidden + i] = dt[id * hidden + i] + grad[row * hidden + i];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let h = *self.value(*a).shape().last().unwrap();
                let rows = self.value(*a).numel() / h;
                let da_in = self.value(*a).data();
                let dg_in = self.value(*gain).data();
                let hn = c::<E>(h as f64);
                let mut dx = vec![E::zero(); rows * h];
                let mut dgain = vec![E::zero(); h];
                let mut dbias = vec![E::zero(); h];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dyh = E::zero();
                    let mut sum_dyh_xhat = E::zero();
                    for i in 0..h {
                        let xhat = (da_in[r * h + i] - mu) * rs;
                        let dy = grad[r * h + i];
                        let dyh = dy * dg_in[i];
                        sum_dyh = sum_dyh + dyh;
                        sum_dyh_xhat = sum_dyh_xhat + dyh * xhat;
                        dgain[i] = dgain[i] + dy * xhat;
                        dbias[i] = dbias[i] + dy;
                    }
                    let mean_dyh = sum_dyh / hn;
                    let mean_dyh_xhat = sum_dyh_xhat / hn;
                    for i in 0..h {
                        let xhat = (da_in[r * h + i] - mu) * rs;
                        let dyh = grad[r * h + i] * dg_in[i];
                        dx[r * h + i] = rs * (dyh - mean_dyh - xhat * mean_dyh_xhat);
                    }
                }
                if self.requires_grad(*a) {
                    out.push((*a, dx));
                }
                if self.requires_grad(*gain) {
                    out.push((*gain, dgain));
                }
                if self.requires_grad(*bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::Softmax { a } => {
                if self.requires_grad(*a) {
                    // dx = p * (g - sum(g * p)) per row, using this node's output.
                    let p = self.nodes[idx].value.data();
                    let h = *self.nodes[idx].value.shape().last().unwrap();
                    let rows = p.len() / h;
                    let mut dx = vec![E::zero(); p.len()];
                    for r in 0..rows {
                        let mut dot = E::zero();
                        for i in 0..h {
                            dot = dot + grad[r * h + i] * p[r * h + i];
                        }
                        for i in 0..h {
                            dx[r * h + i] = p[r * h + i] * (grad[r * h + i] - dot);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::Gelu { a } => {
                if self.requires_grad(*a) {
                    let dx: Vec<E> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| gelu_bwd(x) * g)
                        .collect();
                    out.push((*a, dx));
                }
            }
            Op::Dropout { a, kept, scale } => {
                if self.requires_grad(*a) {
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(kept)
                        .map(|(&g, &k)| if k { g * *scale } else { E::zero() })
                        .collect();
                    out.push((*a, dx));
                }
            }
            Op::Reshape { a } => {
                if self.requires_grad(*a) {
                    out.push((*a, grad.to_vec()));
                }
            }
            Op::Permute { a, perm } => {
                if self.requires_grad(*a) {
                    let sa = self.value(*a).shape();
                    let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
                    let inverse = invert_permutation(perm);
                    let (_, dx) = permute_data(grad, &out_shape, &inverse);
                    out.push((*a, dx));
                }
            }
            Op::Select { a, axis, index } => {
                if self.requires_grad(*a) {
                    let sa = self.value(*a).shape();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let mut dx = vec![E::zero(); self.value(*a).numel()];
                    for o in 0..outer {
                        let base = (o * sa[*axis] + index) * inner;
                        dx[base..base + inner].copy_from_slice(&grad[o * inner..(o + 1) * inner]);
                    }
                    out.push((*a, dx));
                }
            }
            Op::Mean { a } => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).numel();
                    let g = grad[0] / c(n as f64);
                    out.push((*a, vec![g; n]));
                }
            }
            Op::Concat { parts, axis } => {
                let first = self.value(parts[0]).shape();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let total_axis: usize = parts.iter().map(|&p| self.value(p).shape()[*axis]).sum();
                let mut offset = 0;
                for &p in parts {
                    let ax = self.value(p).shape()[*axis];
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(outer * ax * inner);
                        for o in 0..outer {
                            let base = (o * total_axis + offset) * inner;
                            dp.extend_from_slice(&grad[base..base + ax * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += ax;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                active,
            } => {
                if self.requires_grad(*logits) {
                    let v = self.value(*logits).shape()[1];
                    let g = grad[0] / c(*active as f64);
                    let mut dl = vec![E::zero(); self.value(*logits).numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        for i in 0..v {
                            let delta = if i == t { E::one() } else { E::zero() };
                            dl[r * v + i] = (probs[r * v + i] - delta) * g;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::L1 {
                pred,
                target,
                observed,
                count,
            } => {
                let g = grad[0] / c(*count as f64);
                let dp = self.value(*pred).data();
                let dt = self.value(*target).data();
                let signs: Vec<E> = (0..dp.len())
                    .map(|i| {
                        if !observed[i] {
                            E::zero()
                        } else if dp[i] > dt[i] {
                            g
                        } else if dp[i] < dt[i] {
                            -g
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                if self.requires_grad(*pred) {
                    out.push((*pred, signs.clone()));
                }
                if self.requires_grad(*target) {
                    out.push((*target, signs.iter().map(|&s| -s).collect()));
                }
            }
        }
        out
    }

}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<E: Scalar>(data: &[E], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![E::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            coords[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut of = 0;
        for d in 0..rank {
            of += coords[perm[d]] * out_strides[d];
        }
        out[of] = v;
    }
    (out_shape, out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let half = c::<E>(0.5);
    let k = c::<E>(0.7978845608028654); // sqrt(2/pi)
    let a = c::<E>(0.044715);
    half * x * (E::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let half = c::<E>(0.5);
    let k = c::<E>(0.7978845608028654);
    let a = c::<E>(0.044715);
    let three_a = c::<E>(0.134145);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (E::one() + t) + half * x * (E::one() - t * t) * k * (E::one() + three_a * x * x)
}

/// `out = a(m,k) @ b(k,n)`, parallel over output rows when worthwhile.
fn mm_nn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            mm_nn_row(a, b, row, i, k, n);
        });
    } else {
        mm_nn_serial(a, b, out, m, k, n);
    }
}

fn mm_nn_serial<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for (i, row) in out.chunks_mut(n).enumerate().take(m) {
        mm_nn_row(a, b, row, i, k, n);
    }
}

fn mm_nn_row<E: Scalar>(a: &[E], b: &[E], row: &mut [E], i: usize, k: usize, n: usize) {
    for p in 0..k {
        let av = a[i * k + p];
        if av == E::zero() {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for j in 0..n {
            row[j] = row[j] + av * brow[j];
        }
    }
}

/// `out += a(m,k) @ b(n,k)^T`: `out[i,j] = sum_p a[i,p] b[j,p]`.
fn mm_nt<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    let body = |(i, row): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate().take(n) {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            *slot = *slot + s;
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// `out += a(m,k_rows)^T @ b(m,n)` where `a` is stored `(m, kt)`:
/// `out[i,j] = sum_p a[p,i] b[p,j]` with `out` shaped `(kt, n)`.
fn mm_tn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], kt: usize, m: usize, n: usize) {
    let body = |(i, row): (usize, &mut [E])| {
        for p in 0..m {
            let av = a[p * kt + i];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
    };
    if kt * m * n >= PAR_WORK_THRESHOLD && kt > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-3;
    const FD_REL_TOL: f64 = 1e-4;

    /// Central finite differences; the independent oracle the analytic
    /// gradients are checked against.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut xs = x.to_vec();
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let orig = xs[i];
            xs[i] = orig + step;
            let fp = f(&xs);
            xs[i] = orig - step;
            let fm = f(&xs);
            xs[i] = orig;
            g[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], label: &str) {
        assert_eq!(analytic.len(), numeric.len(), "{label}: length");
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-2);
            let rel = (a - n).abs() / denom;
            assert!(
                rel <= FD_REL_TOL,
                "{label}: grad[{i}] analytic {a} vs numeric {n} (rel {rel:.2e})"
            );
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Scalarizes an arbitrary output through a fixed random linear
    /// functional so every output element influences the loss.
    fn to_scalar(g: &mut Graph<f64>, v: Var, weights: &[f64]) -> Var {
        let n = g.value(v).numel();
        let flat = g.reshape(v, vec![1, n]).unwrap();
        let w = g.constant(Tensor::from_f64(vec![n, 1], weights).unwrap());
        let prod = g.matmul(flat, w).unwrap();
        g.mean(prod)
    }

    /// Checks one differentiable input of an op against finite differences.
    fn gradcheck<F>(label: &str, input_shape: Vec<usize>, build: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ input_shape.iter().sum::<usize>() as u64);
        let numel: usize = input_shape.iter().product();
        assert!(numel <= 64, "gradcheck inputs stay small");
        let x0 = random_vec(&mut rng, numel);
        let out_numel = {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_f64(input_shape.clone(), &x0).unwrap(), true);
            let out = build(&mut g, x);
            g.value(out).numel()
        };
        let weights = random_vec(&mut rng, out_numel);

        let forward = |xs: &[f64]| -> f64 {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_f64(input_shape.clone(), xs).unwrap(), true);
            let out = build(&mut g, x);
            let loss = to_scalar(&mut g, out, &weights);
            g.value(loss).item()
        };

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(input_shape.clone(), &x0).unwrap(), true);
        let out = build(&mut g, x);
        let loss = to_scalar(&mut g, out, &weights);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).expect("input grad").to_vec();
        let numeric = numeric_grad(forward, &x0, FD_STEP);
        assert_grads_close(&analytic, &numeric, label);
    }

    fn const_from(rng: &mut ChaCha8Rng, g: &mut Graph<f64>, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        let data = random_vec(rng, n);
        g.constant(Tensor::from_f64(shape, &data).unwrap())
    }

    #[test]
    fn gradcheck_matmul_lhs_and_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bdata = random_vec(&mut rng, 4 * 2);
        gradcheck("matmul lhs", vec![3, 4], move |g, x| {
            let b = g.constant(Tensor::from_f64(vec![4, 2], &bdata).unwrap());
            g.matmul(x, b).unwrap()
        });
        let adata = random_vec(&mut rng, 3 * 4);
        gradcheck("matmul rhs", vec![4, 2], move |g, x| {
            let a = g.constant(Tensor::from_f64(vec![3, 4], &adata).unwrap());
            g.matmul(a, x).unwrap()
        });
    }

    #[test]
    fn gradcheck_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b: Vec<f64> = random_vec(&mut rng, 4 * 4);
        let cmat: Vec<f64> = random_vec(&mut rng, 4 * 2);
        gradcheck("matmul chain", vec![3, 4], move |g, x| {
            let bv = g.constant(Tensor::from_f64(vec![4, 4], &b).unwrap());
            let cv = g.constant(Tensor::from_f64(vec![4, 2], &cmat).unwrap());
            let xb = g.matmul(x, bv).unwrap();
            g.matmul(xb, cv).unwrap()
        });
    }

    #[test]
    fn gradcheck_bmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = random_vec(&mut rng, 2 * 4 * 2);
        gradcheck("bmm lhs", vec![2, 3, 4], move |g, x| {
            let bv = g.constant(Tensor::from_f64(vec![2, 4, 2], &b).unwrap());
            g.bmm(x, bv).unwrap()
        });
        let a = random_vec(&mut rng, 2 * 3 * 4);
        gradcheck("bmm rhs", vec![2, 4, 2], move |g, x| {
            let av = g.constant(Tensor::from_f64(vec![2, 3, 4], &a).unwrap());
            g.bmm(av, x).unwrap()
        });
    }

    #[test]
    fn gradcheck_add_scale_bias() {
        gradcheck("add", vec![3, 4], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let b = const_from(&mut rng, g, vec![3, 4]);
            g.add(x, b).unwrap()
        });
        gradcheck("scale", vec![3, 4], |g, x| g.scale(x, 2.5));
        gradcheck("bias_add lhs", vec![3, 4], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let b = const_from(&mut rng, g, vec![4]);
            g.bias_add(x, b).unwrap()
        });
        gradcheck("bias_add bias", vec![4], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let a = const_from(&mut rng, g, vec![3, 4]);
            g.bias_add(a, x).unwrap()
        });
        gradcheck("bias_add suffix matrix", vec![2, 3], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let a = const_from(&mut rng, g, vec![4, 2, 3]);
            g.bias_add(a, x).unwrap()
        });
    }

    #[test]
    fn gradcheck_embedding() {
        gradcheck("embedding", vec![5, 4], |g, x| {
            g.embedding(x, &[1, 3, 3, 0], &[2, 2]).unwrap()
        });
    }

    #[test]
    fn gradcheck_layer_norm_all_inputs() {
        gradcheck("layer_norm input", vec![3, 6], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(18);
            let gain = const_from(&mut rng, g, vec![6]);
            let bias = const_from(&mut rng, g, vec![6]);
            g.layer_norm(x, gain, bias, 1e-12).unwrap()
        });
        gradcheck("layer_norm gain", vec![6], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let a = const_from(&mut rng, g, vec![3, 6]);
            let bias = const_from(&mut rng, g, vec![6]);
            g.layer_norm(a, x, bias, 1e-12).unwrap()
        });
        gradcheck("layer_norm bias", vec![6], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let a = const_from(&mut rng, g, vec![3, 6]);
            let gain = const_from(&mut rng, g, vec![6]);
            g.layer_norm(a, gain, x, 1e-12).unwrap()
        });
    }

    #[test]
    fn gradcheck_softmax_gelu_dropout() {
        gradcheck("softmax", vec![3, 5], |g, x| g.softmax(x).unwrap());
        gradcheck("gelu", vec![4, 4], |g, x| g.gelu(x));
        gradcheck("dropout", vec![4, 4], |g, x| g.dropout(x, 0.4, true, 99));
    }

    #[test]
    fn gradcheck_shape_ops() {
        gradcheck("reshape", vec![2, 6], |g, x| g.reshape(x, vec![3, 4]).unwrap());
        gradcheck("permute", vec![2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]).unwrap());
        gradcheck("select", vec![2, 3, 4], |g, x| g.select(x, 1, 2).unwrap());
        gradcheck("mean", vec![3, 4], |g, x| g.mean(x));
        gradcheck("concat", vec![2, 3], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let other = const_from(&mut rng, g, vec![2, 2]);
            g.concat(&[x, other, x], 1).unwrap()
        });
    }

    #[test]
    fn gradcheck_cross_entropy() {
        gradcheck("cross_entropy", vec![4, 6], |g, x| {
            g.cross_entropy(x, &[1, IGNORE_INDEX, 3, 0]).unwrap()
        });
    }

    #[test]
    fn gradcheck_l1_loss() {
        // Offset targets so no |.| kink sits near the evaluation point.
        gradcheck("l1_loss", vec![3, 4], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let t: Vec<f64> = (0..12).map(|_| rng.gen_range(2.0..3.0)).collect();
            let target = g.constant(Tensor::from_f64(vec![3, 4], &t).unwrap());
            let observed = [
                true, false, true, true, false, true, true, true, false, true, true, false,
            ];
            g.l1_loss(x, target, &observed).unwrap()
        });
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap());
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(vec![1, 8], 3.7));
        let gain = g.constant(Tensor::filled(vec![8], 1.0));
        let bias = g.constant(Tensor::zeros(vec![8]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn matmul_shape_rule_and_mismatch_message() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 4]));
        let cv = g.matmul(a, b).unwrap();
        assert_eq!(g.value(cv).shape(), &[2, 4]);

        let bad = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![1, 4]));
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_f64(vec![1, 3], &[40.0, 0.0, 0.0]).unwrap());
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_marked_positions() {
        let mut g = Graph::<f64>::new();
        let row = [0.3, -1.2, 0.7];
        let single = g.constant(Tensor::from_f64(vec![1, 3], &row).unwrap());
        let l_single = g.cross_entropy(single, &[1]).unwrap();
        let mut both_rows = row.to_vec();
        both_rows.extend_from_slice(&[9.0, 9.0, 9.0]);
        let double = g.constant(Tensor::from_f64(vec![2, 3], &both_rows).unwrap());
        let l_double = g.cross_entropy(double, &[1, IGNORE_INDEX]).unwrap();
        assert_eq!(g.value(l_single).item(), g.value(l_double).item());
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[IGNORE_INDEX, IGNORE_INDEX]),
            Err(TensorError::AllIgnored)
        ));
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 5.0]).unwrap());
        let t = g.constant(Tensor::from_f64(vec![1, 2], &[2.0, 9.0]).unwrap());
        let loss = g.l1_loss(p, t, &[true, false]).unwrap();
        assert_eq!(g.value(loss).item(), 1.0);

        let same = g.l1_loss(p, p, &[true, true]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        assert!(matches!(
            g.l1_loss(p, t, &[false, false]),
            Err(TensorError::AllUnobserved)
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let m = g.mean(x);
        let loss = g.scale(m, 6.0); // mean * numel == sum
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn detached_tensor_has_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(vec![2], 1.0), true);
        let d = g.leaf(Tensor::filled(vec![2], 1.0), false);
        let s = g.add(x, d).unwrap();
        let loss = g.mean(s);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(vec![3], 2.0), true);
        let m = g.mean(x);
        let loss = g.scale(m, 3.0);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::filled(vec![8], 1.0f32), true);
        assert_eq!(g.dropout(x, 0.0, true, 1), x);
        assert_eq!(g.dropout(x, 0.5, false, 1), x);
    }

    #[test]
    fn dropout_empirical_rate() {
        let n = 100_000;
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::filled(vec![n], 1.0f32), false);
        let p = 0.3;
        let y = g.dropout(x, p, true, 7);
        let dropped = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let rate = dropped as f64 / n as f64;
        assert!((rate - p).abs() < 0.01, "empirical drop rate {rate}");
        // Kept activations carry the inverted scale.
        let kept = g.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / (1.0 - p as f32)).abs() < 1e-6);
    }

    #[test]
    fn identical_seeds_are_bitwise_identical() {
        let run = || -> (Vec<f32>, Vec<f32>) {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(
                Tensor::from_f64(vec![4, 4], &(0..16).map(|i| i as f64 / 7.0).collect::<Vec<_>>())
                    .unwrap(),
                true,
            );
            let d = g.dropout(x, 0.25, true, 123);
            let s = g.softmax(d).unwrap();
            let loss = g.mean(s);
            g.backward(loss).unwrap();
            (g.value(s).data().to_vec(), g.grad(x).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn concat_forward_layout() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_f64(vec![2, 1], &[9., 8.]).unwrap());
        let cv = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cv).shape(), &[2, 3]);
        assert_eq!(g.value(cv).data(), &[1., 2., 9., 3., 4., 8.]);
        let cv0 = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.value(cv0).shape(), &[4, 2]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let t = g.permute(a, &[1, 0]).unwrap();
        assert_eq!(g.value(t).shape(), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
