//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every op evaluates eagerly and, when any input needs a gradient, appends a
//! node to the tape. Nodes are stored in creation order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use recbench::autodiff::Tape;
//! use recbench::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.variable(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MulConst(usize, Rc<[T]>),
    MulRows(usize, Rc<[T]>),
    Gelu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        src: usize,
        idx: Rc<[usize]>,
    },
    Softmax(usize),
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    ConcatCols(usize, usize),
    RowDot(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

// 0.5 (1 + tanh u) == sigmoid(2u), which costs one exp instead of a tanh.
fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = k * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax over the last axis. Disallowed entries get probability 0;
/// a row with no allowed entry is all zeros.
fn softmax_rows<T: Scalar>(data: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    if cols == 0 {
        return out;
    }
    for (r, (row, dst)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut max = T::neg_infinity();
        for (j, &x) in row.iter().enumerate() {
            if allowed(j) && x > max {
                max = x;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if allowed(j) {
                *d = (x - max).exp();
                sum += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates: nothing is retained for a backward pass.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::MissingNode(format!(
                "var {} of tape {} is not recorded on tape {}",
                v.idx, v.tape, self.id
            )));
        }
        Ok(&self.nodes[v.index()])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var recorded on this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let g = self.grad_enabled;
        self.push_node(value, Op::Leaf, g)
    }

    /// Records a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id)?;
        let needs = self.grad_enabled && p.requires_grad;
        Ok(self.push_node(p.value.clone(), Op::Param(id), needs))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                na.value.shape(),
                nb.value.shape()
            )));
        }
        Ok((a.index(), b.index()))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (ia, ib) = self.check_same(a, b, what)?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op(ia, ib), &[ia, ib]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let ia = self.node(a)?;
        let out = ia.value.map(f);
        Ok(self.push(out, op(a.index()), &[a.index()]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        Ok(self.push(out, Op::MatMul(a.index(), b.index()), &[a.index(), b.index()]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        let bad = || Error::shape(format!("bmm of {sa:?} and {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let va = self.nodes[a.index()].value.data();
            let vb = self.nodes[b.index()].value.data();
            let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &vb[i * k * n..(i + 1) * k * n],
                    b_strides,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        let op = Op::BatchMatMul {
            a: a.index(),
            b: b.index(),
            trans_b,
            batch,
            m,
            k,
            n,
        };
        Ok(self.push(out, op, &[a.index(), b.index()]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`d` vector to every row of an `[.., d]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let va = &self.node(a)?.value;
        let vb = &self.node(bias)?.value;
        let (_, cols) = va.dims2();
        if vb.len() != cols {
            return Err(Error::shape(format!(
                "add_row of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a.index(), bias.index()), &[a.index(), bias.index()]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.node(a)?.value.map(|x| x * c);
        Ok(self.push(out, Op::Scale(a.index(), c), &[a.index()]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// Elementwise product with a constant factor tensor (dropout masks, pad masks).
    pub fn mul_const(&mut self, a: Var, factor: Rc<[T]>) -> Result<Var> {
        let va = &self.node(a)?.value;
        if factor.len() != va.len() {
            return Err(Error::shape(format!(
                "mul_const of {:?} with {} factors",
                va.shape(),
                factor.len()
            )));
        }
        let data = va.data().iter().zip(factor.iter()).map(|(&x, &f)| x * f).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a.index(), factor), &[a.index()]))
    }

    /// Multiplies each row of an `[.., d]` tensor by its own constant.
    pub fn mul_rows(&mut self, a: Var, factor: Rc<[T]>) -> Result<Var> {
        let va = &self.node(a)?.value;
        let (rows, cols) = va.dims2();
        if factor.len() != rows {
            return Err(Error::shape(format!(
                "mul_rows of {:?} with {} factors",
                va.shape(),
                factor.len()
            )));
        }
        let mut data = va.data().to_vec();
        for (row, &f) in data.chunks_mut(cols.max(1)).zip(factor.iter()) {
            for x in row {
                *x *= f;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRows(a.index(), factor), &[a.index()]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, log_sigmoid, Op::LogSigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.index()), &[a.index()]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        if v.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.len()).expect("len fits");
        Ok(self.push(Tensor::scalar(m), Op::Mean(a.index()), &[a.index()]))
    }

    /// Normalises each row to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let (rows, cols) = vx.dims2();
        let vg = &self.node(gamma)?.value;
        let vb = &self.node(beta)?.value;
        if vg.len() != cols || vb.len() != cols {
            return Err(Error::shape(format!(
                "layer_norm of {:?} with gamma {:?} beta {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let n = T::from_usize(cols).expect("cols fit");
        let mut out = vec![T::zero(); vx.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, dst) in vx.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                *d = (v - mean) * rstd * vg.data()[j] + vb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: x.index(),
            gamma: gamma.index(),
            beta: beta.index(),
            mean: means,
            rstd: rstds,
        };
        Ok(self.push(out, op, &[x.index(), gamma.index(), beta.index()]))
    }

    /// Selects rows of an `[R, d]` tensor; gradients scatter back to the selected rows only.
    pub fn gather_rows(&mut self, src: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let v = &self.node(src)?.value;
        if v.shape().len() != 2 {
            return Err(Error::shape(format!("gather_rows from {:?}", v.shape())));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            if r >= rows {
                return Err(Error::Bounds {
                    what: "row",
                    index: r,
                    len: rows,
                });
            }
            data.extend_from_slice(&v.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(out, Op::Gather { src: src.index(), idx }, &[src.index()]))
    }

    /// Softmax over the last axis; entries with `mask == false` are excluded.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = &self.node(a)?.value;
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(Error::shape(format!(
                    "softmax mask of {} for {:?}",
                    m.len(),
                    v.shape()
                )));
            }
        }
        let (_, cols) = v.dims2();
        let out = Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), cols, mask))?;
        Ok(self.push(out, Op::Softmax(a.index()), &[a.index()]))
    }

    /// `[B*S, H*dh]` to `[B*H, S, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let (rows, d) = v.dims2();
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "split_heads of {:?} into batch {batch} seq {seq} heads {heads}",
                v.shape()
            )));
        }
        let dh = d / heads;
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * d + h * dh;
                    let to = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let op = Op::SplitHeads {
            x: x.index(),
            batch,
            seq,
            heads,
        };
        Ok(self.push(out, op, &[x.index()]))
    }

    /// `[B*H, S, dh]` to `[B*S, H*dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let v = &self.node(x)?.value;
        let s = v.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::shape(format!(
                "merge_heads of {s:?} for batch {batch} seq {seq} heads {heads}"
            )));
        }
        let dh = s[2];
        let d = dh * heads;
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * d + h * dh;
                    let from = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, d], out)?;
        let op = Op::MergeHeads {
            x: x.index(),
            batch,
            seq,
            heads,
        };
        Ok(self.push(out, op, &[x.index()]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.node(a)?.value;
        let vb = &self.node(b)?.value;
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "concat_cols of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (rows, p, q) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(vec![rows, p + q], data)?;
        Ok(self.push(out, Op::ConcatCols(a.index(), b.index()), &[a.index(), b.index()]))
    }

    /// Dot product of matching rows: `[N, d] x [N, d] -> [N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.check_same(a, b, "row_dot")?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let (rows, cols) = va.dims2();
        let data = (0..rows)
            .map(|r| {
                va.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&vb.data()[r * cols..(r + 1) * cols])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(ia, ib), &[ia, ib]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = &self.node(logits)?.value;
        let (rows, cols) = v.dims2();
        if v.shape().len() != 2 || rows != targets.len() || rows == 0 {
            return Err(Error::shape(format!(
                "cross_entropy of {:?} with {} targets",
                v.shape(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Bounds {
                what: "class",
                index: t,
                len: cols,
            });
        }
        let probs = softmax_rows(v.data(), cols, None);
        let mut nll = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            // log p from the logits directly keeps precision when p underflows.
            let row = v.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            nll += lse - row[t];
        }
        let loss = nll / T::from_usize(rows).expect("rows fit");
        let op = Op::CrossEntropy {
            logits: logits.index(),
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.index()]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.node(a)?.value.clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a.index()), &[a.index()]))
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let li = loss.index();
        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=li).map(|_| None).collect();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = Acc {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match params.get_mut(id) {
                        Some(prev) => {
                            for (p, &x) in prev.data_mut().iter_mut().zip(t.data()) {
                                *p += x;
                            }
                        }
                        None => {
                            params.insert(*id, t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let (ki, ni) = (k as isize, n as isize);
                    acc.with(*a, |da| {
                        T::gemm(m, n, k, &g, (ni, 1), vb.data(), (1, ni), T::one(), da, (ki, 1))
                    });
                    acc.with(*b, |db| {
                        T::gemm(k, m, n, va.data(), (1, ki), &g, (ni, 1), T::one(), db, (ni, 1))
                    });
                }
                &Op::BatchMatMul {
                    a,
                    b,
                    trans_b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    let (ki, ni) = (k as isize, n as isize);
                    acc.with(a, |da| {
                        // dA = G op(B)^T
                        let bt = if trans_b { (ki, 1) } else { (1, ni) };
                        for s in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[s * m * n..(s + 1) * m * n],
                                (ni, 1),
                                &vb[s * k * n..(s + 1) * k * n],
                                bt,
                                T::one(),
                                &mut da[s * m * k..(s + 1) * m * k],
                                (ki, 1),
                            );
                        }
                    });
                    acc.with(b, |db| {
                        for s in 0..batch {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let as_ = &va[s * m * k..(s + 1) * m * k];
                            let dbs = &mut db[s * k * n..(s + 1) * k * n];
                            if trans_b {
                                // dB [n,k] = G^T A
                                T::gemm(n, m, k, gs, (1, ni), as_, (ki, 1), T::one(), dbs, (ki, 1));
                            } else {
                                // dB [k,n] = A^T G
                                T::gemm(k, m, n, as_, (1, ki), gs, (ni, 1), T::one(), dbs, (ni, 1));
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    acc.with(*b, |db| {
                        for (d, &x) in db.iter_mut().zip(&g) {
                            *d -= x;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc.with(*a, |da| {
                        for ((d, &x), &y) in da.iter_mut().zip(&g).zip(vb) {
                            *d += x * y;
                        }
                    });
                    acc.with(*b, |db| {
                        for ((d, &x), &y) in db.iter_mut().zip(&g).zip(va) {
                            *d += x * y;
                        }
                    });
                }
                Op::AddRow(a, b) => {
                    acc.add(*a, &g);
                    let cols = nodes[*b].value.len();
                    acc.with(*b, |db| {
                        for row in g.chunks(cols.max(1)) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    });
                }
                Op::Scale(a, c) => acc.with(*a, |da| {
                    for (d, &x) in da.iter_mut().zip(&g) {
                        *d += x * *c;
                    }
                }),
                Op::MulConst(a, f) => acc.with(*a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(&g).zip(f.iter()) {
                        *d += x * y;
                    }
                }),
                Op::MulRows(a, f) => {
                    let (_, cols) = nodes[*a].value.dims2();
                    acc.with(*a, |da| {
                        for ((drow, grow), &y) in
                            da.chunks_mut(cols.max(1)).zip(g.chunks(cols.max(1))).zip(f.iter())
                        {
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let va = nodes[*a].value.data();
                    acc.with(*a, |da| {
                        for ((d, &x), &v) in da.iter_mut().zip(&g).zip(va) {
                            *d += x * gelu_grad(v);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc.with(*a, |da| {
                        for ((d, &x), &s) in da.iter_mut().zip(&g).zip(y) {
                            *d += x * s * (T::one() - s);
                        }
                    });
                }
                Op::LogSigmoid(a) => {
                    let va = nodes[*a].value.data();
                    acc.with(*a, |da| {
                        for ((d, &x), &v) in da.iter_mut().zip(&g).zip(va) {
                            *d += x * sigmoid(-v);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc.with(*a, |da| {
                        for ((d, &x), &t) in da.iter_mut().zip(&g).zip(y) {
                            *d += x * (T::one() - t * t);
                        }
                    });
                }
                Op::Sum(a) => acc.with(*a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::Mean(a) => {
                    let n = T::from_usize(nodes[*a].value.len()).expect("len fits");
                    acc.with(*a, |da| {
                        for d in da.iter_mut() {
                            *d += g[0] / n;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let vx = &nodes[*x].value;
                    let vg = nodes[*gamma].value.data();
                    let (_, cols) = vx.dims2();
                    let n = T::from_usize(cols).expect("cols fit");
                    let xhat = |r: usize, j: usize| (vx.data()[r * cols + j] - mean[r]) * rstd[r];
                    acc.with(*beta, |db| {
                        for row in g.chunks(cols) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    });
                    acc.with(*gamma, |dg| {
                        for (r, row) in g.chunks(cols).enumerate() {
                            for (j, (d, &x)) in dg.iter_mut().zip(row).enumerate() {
                                *d += x * xhat(r, j);
                            }
                        }
                    });
                    acc.with(*x, |dx| {
                        for (r, (row, drow)) in g.chunks(cols).zip(dx.chunks_mut(cols)).enumerate() {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..cols {
                                let dxh = row[j] * vg[j];
                                s1 += dxh;
                                s2 += dxh * xhat(r, j);
                            }
                            let (s1, s2) = (s1 / n, s2 / n);
                            for j in 0..cols {
                                let dxh = row[j] * vg[j];
                                drow[j] += rstd[r] * (dxh - s1 - xhat(r, j) * s2);
                            }
                        }
                    });
                }
                Op::Gather { src, idx } => {
                    let cols = nodes[*src].value.shape()[1];
                    acc.with(*src, |ds| {
                        for (r, &s) in idx.iter().enumerate() {
                            for (d, &x) in ds[s * cols..(s + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                            {
                                *d += x;
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (_, cols) = y.dims2();
                    acc.with(*a, |da| {
                        for ((drow, grow), yrow) in da
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(y.data().chunks(cols))
                        {
                            let dot: T = grow.iter().zip(yrow).map(|(&x, &p)| x * p).sum();
                            for ((d, &x), &p) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += p * (x - dot);
                            }
                        }
                    });
                }
                &Op::SplitHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let d = nodes[x].value.dims2().1;
                    let dh = d / heads;
                    acc.with(x, |dx| {
                        for b in 0..batch {
                            for t in 0..seq {
                                for h in 0..heads {
                                    let to = (b * seq + t) * d + h * dh;
                                    let from = ((b * heads + h) * seq + t) * dh;
                                    for e in 0..dh {
                                        dx[to + e] += g[from + e];
                                    }
                                }
                            }
                        }
                    });
                }
                &Op::MergeHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let dh = nodes[x].value.shape()[2];
                    let d = dh * heads;
                    acc.with(x, |dx| {
                        for b in 0..batch {
                            for t in 0..seq {
                                for h in 0..heads {
                                    let from = (b * seq + t) * d + h * dh;
                                    let to = ((b * heads + h) * seq + t) * dh;
                                    for e in 0..dh {
                                        dx[to + e] += g[from + e];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let p = nodes[*a].value.shape()[1];
                    let q = nodes[*b].value.shape()[1];
                    acc.with(*a, |da| {
                        for (drow, grow) in da.chunks_mut(p.max(1)).zip(g.chunks(p + q)) {
                            for (d, &x) in drow.iter_mut().zip(&grow[..p]) {
                                *d += x;
                            }
                        }
                    });
                    acc.with(*b, |db| {
                        for (drow, grow) in db.chunks_mut(q.max(1)).zip(g.chunks(p + q)) {
                            for (d, &x) in drow.iter_mut().zip(&grow[p..]) {
                                *d += x;
                            }
                        }
                    });
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (_, cols) = va.dims2();
                    let cols = cols.max(1);
                    acc.with(*a, |da| {
                        for ((drow, brow), &x) in da.chunks_mut(cols).zip(vb.data().chunks(cols)).zip(&g) {
                            for (d, &y) in drow.iter_mut().zip(brow) {
                                *d += x * y;
                            }
                        }
                    });
                    acc.with(*b, |db| {
                        for ((drow, arow), &x) in db.chunks_mut(cols).zip(va.data().chunks(cols)).zip(&g) {
                            for (d, &y) in drow.iter_mut().zip(arow) {
                                *d += x * y;
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (rows, cols) = nodes[*logits].value.dims2();
                    let scale = g[0] / T::from_usize(rows).expect("rows fit");
                    acc.with(*logits, |dl| {
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..cols {
                                let onehot = if j == t { T::one() } else { T::zero() };
                                dl[r * cols + j] += scale * (probs[r * cols + j] - onehot);
                            }
                        }
                    });
                }
                Op::Reshape(a) => acc.add(*a, &g),
            }
            grads[i] = None;
        }

        Ok(Gradients {
            tape: self.id,
            leaves,
            params,
        })
    }
}

/// Gradient accumulator: allocates an input's slot on first touch and skips
/// inputs that do not need a gradient.
struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Acc<'_, T> {
    fn with(&mut self, i: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[i].needs_grad {
            return;
        }
        let len = self.nodes[i].value.len();
        let slot = self.grads[i].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn add(&mut self, i: usize, g: &[T]) {
        self.with(i, |d| {
            for (x, &y) in d.iter_mut().zip(g) {
                *x += y;
            }
        });
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    tape: u32,
    leaves: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(v.index()).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero_has_gradient_quarter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn var_from_another_tape_is_missing() {
        let mut other = Tape::<f64>::new();
        let foreign = other.variable(Tensor::scalar(1.0));
        let mut tape = Tape::<f64>::new();
        let _ = tape.variable(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(Error::MissingNode(_))));
        assert!(matches!(
            Tape::<f64>::new().sum(foreign),
            Err(Error::MissingNode(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_rows_are_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
        let mask = [true, true, false, false, false, false];
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v.at(0, 2), 0.0);
        assert!(v.row(1).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        assert_eq!(log_sigmoid(800.0f64), 0.0);
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let store = {
            let mut s = ParamStore::<f64>::new();
            s.add("w", Tensor::scalar(2.0), crate::params::ParamRole::Backbone);
            s
        };
        let id = store.ids().next().unwrap();
        let mut tape = Tape::<f64>::inference();
        let w = tape.param(&store, id).unwrap();
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.param(id).is_none());
    }

    #[test]
    fn gather_gradient_touches_selected_rows_only() {
        let mut tape = Tape::<f64>::new();
        let table = tape.variable(Tensor::full(&[4, 2], 0.5));
        let rows = tape.gather_rows(table, vec![2, 2]).unwrap();
        let loss = tape.sum(rows).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(table).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }
}
