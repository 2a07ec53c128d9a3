//! Differentiable operations on [`Var`].
//!
//! Broadcasting is limited to scalar-with-tensor for the pointwise binary
//! ops and trailing-dimension bias addition in [`Var::add_bias`].

use crate::error::TensorError;
use crate::tensor::{gemm_into, MatLayout, Scalar, Tensor};

use super::Var;

/// Whether a running sum over the sequence includes the current position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CumsumMode {
    /// `out[t] = Σ_{i<t} x[i]`, so `out[0] = 0`.
    Exclusive,
    /// `out[t] = Σ_{i≤t} x[i]`.
    Inclusive,
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast, TensorError> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if numel(lhs) == 1 && lhs.len() <= rhs.len() {
        Ok(Broadcast::LhsScalar)
    } else if numel(rhs) == 1 && rhs.len() <= lhs.len() {
        Ok(Broadcast::RhsScalar)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Splits `[.., m, k]` into (batch, m, k).
fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [batch @ .., m, k] => Ok((batch.iter().product(), *m, *k)),
        _ => Err(TensorError::BadShape {
            op,
            expected: "rank >= 2",
            shape: shape.to_vec(),
        }),
    }
}

fn row_count(shape: &[usize]) -> usize {
    shape.iter().rev().skip(1).product()
}

/// Partial derivative of a pointwise binary op with respect to one operand.
type Partial<S> = fn(S, S) -> S;

impl<'t, S: Scalar> Var<'t, S> {
    fn binary(
        self,
        other: Var<'t, S>,
        op: &'static str,
        f: fn(S, S) -> S,
        da: Partial<S>,
        db: Partial<S>,
    ) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&other)?;
        let out = {
            let a = self.value();
            let b = other.value();
            let mode = broadcast(op, a.shape(), b.shape())?;
            match mode {
                Broadcast::Same => {
                    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                    Tensor::new(a.shape(), data)?
                }
                Broadcast::LhsScalar => {
                    let x = a.data()[0];
                    b.map(|y| f(x, y))
                }
                Broadcast::RhsScalar => {
                    let y = b.data()[0];
                    a.map(|x| f(x, y))
                }
            }
        };
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |inputs, _, grad| {
                let (a, b) = (inputs[0], inputs[1]);
                let n = grad.numel();
                let pick = |t: &Tensor<S>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
                let mut ga = vec![S::zero(); n];
                let mut gb = vec![S::zero(); n];
                for i in 0..n {
                    let (x, y) = (pick(a, i), pick(b, i));
                    ga[i] = grad.data()[i] * da(x, y);
                    gb[i] = grad.data()[i] * db(x, y);
                }
                let reduce = |g: Vec<S>, like: &Tensor<S>| {
                    if like.numel() == 1 && n != 1 {
                        Tensor::full(like.shape(), g.into_iter().sum())
                    } else {
                        Tensor::new(like.shape(), g).expect("gradient shape")
                    }
                };
                vec![Some(reduce(ga, a)), Some(reduce(gb, b))]
            }),
        ))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.binary(other, "add", |x, y| x + y, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.binary(other, "sub", |x, y| x - y, |_, _| S::one(), |_, _| -S::one())
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn scale(self, factor: S) -> Var<'t, S> {
        let out = self.value().map(|x| x * factor);
        self.tape.record(
            out,
            &[self],
            Box::new(move |_, _, grad| vec![Some(grad.map(|g| g * factor))]),
        )
    }

    /// `x[.., n] + bias[n]`.
    pub fn add_bias(self, bias: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&bias)?;
        let out = {
            let x = self.value();
            let b = bias.value();
            if b.rank() != 1 || x.rank() == 0 || x.last_dim() != b.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let n = b.numel();
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        Ok(self.tape.record(
            out,
            &[self, bias],
            Box::new(|inputs, _, grad| {
                let n = inputs[1].numel();
                let mut gb = vec![S::zero(); n];
                for row in grad.data().chunks_exact(n) {
                    for (acc, &g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![
                    Some(grad.clone()),
                    Some(Tensor::new(&[n], gb).expect("bias gradient")),
                ]
            }),
        ))
    }

    /// `a[.., m, k] · b`, where `b` is either `[k, n]` (shared across the
    /// batch) or `[.., k, n]` with the same batch dimensions as `a`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.matmul_impl(other, false)
    }

    /// `a[.., m, k] · b[.., n, k]ᵀ` with matching batch dimensions.
    pub fn matmul_nt(self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, S>, b_transposed: bool) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&other)?;
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        let (out, plan) = {
            let a = self.value();
            let b = other.value();
            let mismatch = || TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            let (batch, m, k) = matrix_dims(op, a.shape())?;
            let (b_batch, b_rows, b_cols) = matrix_dims(op, b.shape())?;
            let (bk, n) = if b_transposed { (b_cols, b_rows) } else { (b_rows, b_cols) };
            if bk != k {
                return Err(mismatch());
            }
            let shared = b.rank() == 2 && !b_transposed;
            if !shared && (b.rank() != a.rank() || a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2]) {
                return Err(mismatch());
            }
            let plan = MatmulPlan {
                batch,
                m,
                k,
                n,
                shared,
                b_transposed,
            };
            debug_assert!(shared || b_batch == batch);
            let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
            out_shape.extend([m, n]);
            let mut out = Tensor::zeros(&out_shape);
            plan.forward(a.data(), b.data(), out.data_mut());
            (out, plan)
        };
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |inputs, _, grad| {
                let (ga, gb) = plan.backward(inputs[0], inputs[1], grad);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn gelu(self) -> Var<'t, S> {
        self.unary(gelu_tanh, gelu_tanh_grad)
    }

    pub fn sin(self) -> Var<'t, S> {
        self.unary(|x| x.sin(), |x| x.cos())
    }

    pub fn cos(self) -> Var<'t, S> {
        self.unary(|x| x.cos(), |x| -x.sin())
    }

    fn unary(self, f: fn(S) -> S, df: fn(S) -> S) -> Var<'t, S> {
        let out = self.value().map(f);
        self.tape.record(
            out,
            &[self],
            Box::new(move |inputs, _, grad| {
                let data = inputs[0]
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| g * df(x))
                    .collect();
                vec![Some(Tensor::new(grad.shape(), data).expect("unary gradient"))]
            }),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, S> {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        self.tape.record(
            out,
            &[self],
            Box::new(|inputs, _, grad| vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = S::from_f64(self.value().numel().max(1) as f64);
        self.sum().scale(S::one() / n)
    }

    /// Softmax over the last dimension, computed after subtracting the row
    /// maximum. `-inf` entries map to exactly zero.
    pub fn softmax_lastdim(self) -> Result<Var<'t, S>, TensorError> {
        let out = {
            let x = self.value();
            if x.rank() == 0 || x.last_dim() == 0 {
                return Err(TensorError::BadShape {
                    op: "softmax_lastdim",
                    expected: "last dimension >= 1",
                    shape: x.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(x.last_dim()) {
                softmax_in_place(row);
            }
            out
        };
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(|_, y, grad| {
                let n = y.last_dim();
                let mut gx = grad.clone();
                for (gx_row, y_row) in gx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                    let dot: S = gx_row.iter().zip(y_row).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in gx_row.iter_mut().zip(y_row) {
                        *g = p * (*g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sets entries above the diagonal of the trailing `[T, T]` block to
    /// `-inf`, so row `p` only sees columns `q <= p`.
    pub fn mask_future(self) -> Result<Var<'t, S>, TensorError> {
        let out = {
            let x = self.value();
            let (_, rows, cols) = matrix_dims("mask_future", x.shape())?;
            if rows != cols {
                return Err(TensorError::BadShape {
                    op: "mask_future",
                    expected: "square trailing block",
                    shape: x.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            apply_future_mask(out.data_mut(), rows, S::neg_infinity());
            out
        };
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(|_, _, grad| {
                let t = grad.last_dim();
                let mut g = grad.clone();
                apply_future_mask(g.data_mut(), t, S::zero());
                vec![Some(g)]
            }),
        ))
    }

    /// Row-wise layer normalization over the last dimension with biased
    /// variance, followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t, S>, bias: Var<'t, S>, eps: S) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let (out, normalized, inv_std) = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let n = x.last_dim();
            if x.rank() == 0 || g.shape() != [n] || b.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let inv_n = S::one() / S::from_f64(n as f64);
            let mut normalized = x.clone();
            let mut inv_std = Vec::with_capacity(row_count(x.shape()));
            for row in normalized.data_mut().chunks_exact_mut(n) {
                let mean = row.iter().copied().sum::<S>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                let r = S::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                inv_std.push(r);
            }
            let mut out = normalized.clone();
            for row in out.data_mut().chunks_exact_mut(n) {
                for ((v, &gv), &bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                    *v = *v * gv + bv;
                }
            }
            (out, normalized, inv_std)
        };
        Ok(self.tape.record(
            out,
            &[self, gain, bias],
            Box::new(move |inputs, _, grad| {
                let gain = inputs[1].data();
                let n = gain.len();
                let inv_n = S::one() / S::from_f64(n as f64);
                let mut gx = vec![S::zero(); grad.numel()];
                let mut g_gain = vec![S::zero(); n];
                let mut g_bias = vec![S::zero(); n];
                let rows = grad
                    .data()
                    .chunks_exact(n)
                    .zip(normalized.data().chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .zip(&inv_std);
                let mut dxhat = vec![S::zero(); n];
                for (((g_row, xhat), gx_row), &r) in rows {
                    for i in 0..n {
                        dxhat[i] = g_row[i] * gain[i];
                        g_gain[i] += g_row[i] * xhat[i];
                        g_bias[i] += g_row[i];
                    }
                    let sum1: S = dxhat.iter().copied().sum();
                    let sum2: S = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum();
                    for i in 0..n {
                        gx_row[i] = r * (dxhat[i] - inv_n * sum1 - xhat[i] * inv_n * sum2);
                    }
                }
                vec![
                    Some(Tensor::new(grad.shape(), gx).expect("layer_norm gradient")),
                    Some(Tensor::new(&[n], g_gain).expect("gain gradient")),
                    Some(Tensor::new(&[n], g_bias).expect("bias gradient")),
                ]
            }),
        ))
    }

    /// Looks up rows of a `[V, d]` table. The result has shape
    /// `lead_shape ++ [d]`; the backward pass scatter-adds into the table.
    pub fn gather_rows(self, ids: &[usize], lead_shape: &[usize]) -> Result<Var<'t, S>, TensorError> {
        let out = {
            let table = self.value();
            let (vocab, width) = match table.shape() {
                &[v, d] => (v, d),
                s => {
                    return Err(TensorError::BadShape {
                        op: "gather_rows",
                        expected: "[V, d] table",
                        shape: s.to_vec(),
                    })
                }
            };
            check_ids("gather_rows", ids, vocab)?;
            if lead_shape.iter().product::<usize>() != ids.len() {
                return Err(TensorError::DataLength {
                    shape: lead_shape.to_vec(),
                    len: ids.len(),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                data.extend_from_slice(&table.data()[id * width..(id + 1) * width]);
            }
            let mut shape = lead_shape.to_vec();
            shape.push(width);
            Tensor::new(&shape, data)?
        };
        let ids = ids.to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |inputs, _, grad| {
                let width = inputs[0].shape()[1];
                let mut g = Tensor::zeros(inputs[0].shape());
                for (row, &id) in grad.data().chunks_exact(width).zip(&ids) {
                    for (acc, &v) in g.data_mut()[id * width..(id + 1) * width].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Running sum over dimension 1 of a `[B, T, c]` tensor. Sums accumulate
    /// in f64 and are rounded once per output element.
    pub fn cumsum_seqdim(self, mode: CumsumMode) -> Result<Var<'t, S>, TensorError> {
        let out = {
            let x = self.value();
            let &[b, t, c] = x.shape() else {
                return Err(TensorError::BadShape {
                    op: "cumsum_seqdim",
                    expected: "[B, T, c]",
                    shape: x.shape().to_vec(),
                });
            };
            let mut out = Tensor::zeros(x.shape());
            running_sum(x.data(), out.data_mut(), b, t, c, mode, false);
            out
        };
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |_, _, grad| {
                let &[b, t, c] = grad.shape() else { unreachable!() };
                let mut g = Tensor::zeros(grad.shape());
                running_sum(grad.data(), g.data_mut(), b, t, c, mode, true);
                vec![Some(g)]
            }),
        ))
    }

    pub fn exclusive_cumsum_seqdim(self) -> Result<Var<'t, S>, TensorError> {
        self.cumsum_seqdim(CumsumMode::Exclusive)
    }

    /// Mean token cross-entropy of `logits[.., V]` against one target id per
    /// row, via max-shifted log-sum-exp.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, S>, TensorError> {
        let (out, probs) = {
            let logits = self.value();
            let vocab = logits.last_dim();
            let rows = row_count(logits.shape());
            if logits.rank() == 0 || rows != targets.len() {
                return Err(TensorError::BadShape {
                    op: "cross_entropy",
                    expected: "one target per logits row",
                    shape: logits.shape().to_vec(),
                });
            }
            check_ids("cross_entropy", targets, vocab)?;
            let mut probs = logits.clone();
            let mut total = 0.0f64;
            for (row, &target) in probs.data_mut().chunks_exact_mut(vocab).zip(targets) {
                let (lse, _) = log_sum_exp(row);
                total += (lse - row[target]).as_f64();
                for v in row.iter_mut() {
                    *v = (*v - lse).exp();
                }
            }
            (Tensor::scalar(S::from_f64(total / rows as f64)), probs)
        };
        let targets = targets.to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |_, _, grad| {
                let vocab = probs.last_dim();
                let scale = grad.data()[0] / S::from_f64(targets.len() as f64);
                let mut g = probs.clone();
                for (row, &target) in g.data_mut().chunks_exact_mut(vocab).zip(&targets) {
                    row[target] -= S::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

fn check_ids(op: &'static str, ids: &[usize], bound: usize) -> Result<(), TensorError> {
    match ids.iter().position(|&id| id >= bound) {
        Some(position) => Err(TensorError::IndexOutOfRange {
            op,
            id: ids[position],
            position,
            bound,
        }),
        None => Ok(()),
    }
}

/// Returns `(log Σ exp(row), max)`.
pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> (S, S) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    (max + sum.ln(), max)
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = S::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn apply_future_mask<S: Scalar>(data: &mut [S], t: usize, fill: S) {
    for block in data.chunks_exact_mut(t * t) {
        for p in 0..t {
            for v in &mut block[p * t + p + 1..(p + 1) * t] {
                *v = fill;
            }
        }
    }
}

/// Forward prefix sums, or when `reverse` is set the adjoint suffix sums.
fn running_sum<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    b: usize,
    t: usize,
    c: usize,
    mode: CumsumMode,
    reverse: bool,
) {
    let mut acc = vec![0.0f64; c];
    for bi in 0..b {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            let base = (bi * t + ti) * c;
            for j in 0..c {
                let x = src[base + j].as_f64();
                match mode {
                    CumsumMode::Exclusive => {
                        dst[base + j] = S::from_f64(acc[j]);
                        acc[j] += x;
                    }
                    CumsumMode::Inclusive => {
                        acc[j] += x;
                        dst[base + j] = S::from_f64(acc[j]);
                    }
                }
            }
        }
    }
}

const GELU_CUBIC: f64 = 0.044715;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
fn gelu_tanh<S: Scalar>(x: S) -> S {
    let k = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = S::from_f64(0.5);
    let u = k * (x + S::from_f64(GELU_CUBIC) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_tanh_grad<S: Scalar>(x: S) -> S {
    let k = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = S::from_f64(0.5);
    let c = S::from_f64(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::from_f64(3.0) * c * x * x)
}

#[derive(Clone, Copy)]
struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared: bool,
    b_transposed: bool,
}

impl MatmulPlan {
    fn b_layout(&self) -> MatLayout {
        MatLayout::row_major(self.k, self.n, self.b_transposed)
    }

    fn forward<S: Scalar>(&self, a: &[S], b: &[S], out: &mut [S]) {
        let &MatmulPlan { batch, m, k, n, .. } = self;
        if self.shared {
            gemm_into(a, MatLayout::row_major(batch * m, k, false), b, self.b_layout(), S::zero(), out);
            return;
        }
        for i in 0..batch {
            gemm_into(
                &a[i * m * k..],
                MatLayout::row_major(m, k, false),
                &b[i * k * n..],
                self.b_layout(),
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }

    fn backward<S: Scalar>(&self, a: &Tensor<S>, b: &Tensor<S>, grad: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let &MatmulPlan { batch, m, k, n, .. } = self;
        let mut ga = Tensor::zeros(a.shape());
        let mut gb = Tensor::zeros(b.shape());
        let (a, b, g) = (a.data(), b.data(), grad.data());
        if self.shared {
            // dA = dC · Bᵀ over the flattened batch, dB = Aᵀ · dC
            let rows = batch * m;
            gemm_into(
                g,
                MatLayout::row_major(rows, n, false),
                b,
                MatLayout::row_major(n, k, true),
                S::zero(),
                ga.data_mut(),
            );
            gemm_into(
                a,
                MatLayout::row_major(k, rows, true),
                g,
                MatLayout::row_major(rows, n, false),
                S::zero(),
                gb.data_mut(),
            );
            return (ga, gb);
        }
        for i in 0..batch {
            let a_i = &a[i * m * k..];
            let b_i = &b[i * k * n..];
            let g_i = &g[i * m * n..];
            let ga_i = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
            if self.b_transposed {
                // C = A·Bᵀ, B stored [n, k]: dA = dC·B, dB = dCᵀ·A
                gemm_into(g_i, MatLayout::row_major(m, n, false), b_i, MatLayout::row_major(n, k, false), S::zero(), ga_i);
                let gb_i = &mut gb.data_mut()[i * n * k..(i + 1) * n * k];
                gemm_into(g_i, MatLayout::row_major(n, m, true), a_i, MatLayout::row_major(m, k, false), S::zero(), gb_i);
            } else {
                gemm_into(g_i, MatLayout::row_major(m, n, false), b_i, MatLayout::row_major(n, k, true), S::zero(), ga_i);
                let gb_i = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                gemm_into(a_i, MatLayout::row_major(k, m, true), g_i, MatLayout::row_major(m, n, false), S::zero(), gb_i);
            }
        }
        (ga, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_disjoint_supports() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(Tensor::eye(2));
        assert_eq!(a.matmul(eye).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        assert_eq!(p.matmul(q).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn elementwise_identities() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let ones = tape.constant(Tensor::ones(&[3]));
        assert_eq!(x.add(zeros).unwrap().value().data(), x.value().data());
        assert_eq!(x.mul(ones).unwrap().value().data(), x.value().data());
        let two = tape.constant(Tensor::scalar(2.0));
        assert_eq!(x.mul(two).unwrap().value().data(), &[3.0, -4.0, 0.5]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(x.add(bad), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn scalar_broadcast_gradient_is_reduced() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.param(Tensor::scalar(2.0));
        let loss = x.mul(c).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(c).unwrap().item(), Some(6.0));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = x.softmax_lastdim().unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[3], &[1e30, 1e30 - 1000.0, -1e30]));
        let y = big.softmax_lastdim().unwrap();
        assert!(y.value().all_finite());
        assert!((y.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_gives_zero_weight_to_future() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.3, 5.0, 0.1, 0.2]));
        let y = x.mask_future().unwrap().softmax_lastdim().unwrap();
        let v = y.value();
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[1], 0.0);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[7.0; 4]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_keeps_normalized_row() {
        let tape = Tape::new();
        // mean 0, biased variance 1
        let x = tape.constant(t(&[1, 4], &[1.0, -1.0, 1.0, -1.0]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        assert!(y.value().max_abs_diff(&x.value()).unwrap() < 1e-5);
    }

    #[test]
    fn exclusive_cumsum_definition() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 1], &[0.5, 1.25, 2.0]));
        let y = x.exclusive_cumsum_seqdim().unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.5, 1.75]);
        let z = x.cumsum_seqdim(CumsumMode::Inclusive).unwrap();
        assert_eq!(z.value().data(), &[0.5, 1.75, 3.75]);
    }

    #[test]
    fn cumsum_backward_is_suffix_sum() {
        let tape = Tape::new();
        let x = tape.param(t(&[1, 3, 1], &[0.0; 3]));
        let w = tape.constant(t(&[1, 3, 1], &[1.0, 10.0, 100.0]));
        let loss = x.exclusive_cumsum_seqdim().unwrap().mul(w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[110.0, 100.0, 0.0]);
    }

    #[test]
    fn gather_rows_one_hot_and_errors() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::<f64>::eye(4));
        let row = eye.gather_rows(&[2], &[1]).unwrap();
        assert_eq!(row.value().data(), &[0.0, 0.0, 1.0, 0.0]);
        let err = eye.gather_rows(&[1, 9], &[2]).unwrap_err();
        assert_eq!(
            err,
            TensorError::IndexOutOfRange {
                op: "gather_rows",
                id: 9,
                position: 1,
                bound: 4
            }
        );
    }

    #[test]
    fn gather_backward_scatter_adds() {
        let tape = Tape::new();
        let table = tape.param(Tensor::<f64>::zeros(&[3, 2]));
        let loss = table.gather_rows(&[1, 1, 2], &[3]).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[2, 3, 65]));
        let loss = logits.cross_entropy(&[0, 5, 64, 3, 2, 1]).unwrap();
        assert!((loss.value().item().unwrap() - 65f64.ln()).abs() < 1e-12);
        assert!((65f64.ln() - 4.17439).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_saturated_margin_is_zero() {
        let tape = Tape::new();
        let logits = tape.constant(t(&[1, 3], &[0.0, 800.0, -5.0]));
        let loss = logits.cross_entropy(&[1]).unwrap();
        assert!(loss.value().item().unwrap().abs() < 1e-300);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[2, 4]));
        assert!(matches!(
            logits.cross_entropy(&[0, 4]),
            Err(TensorError::IndexOutOfRange { id: 4, position: 1, .. })
        ));
    }
}
