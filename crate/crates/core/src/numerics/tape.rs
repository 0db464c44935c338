//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Forward calls append nodes and compute values eagerly; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into the originating
//! [`ParamStore`]. Shape mismatches are programming errors and panic.
//!
//! The op set is exactly what the two-token transformer needs: dense matmul,
//! broadcast adds, column concatenation, row gather/tile, relu, row softmax,
//! layer norm, fused two-position multi-head attention, and mean token
//! cross-entropy.

use std::cell::Cell;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NumericsError;

/// Epsilon inside the layer-norm variance square root. Keeps constant rows
/// (zero variance) finite.
pub const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static VALIDATION: Cell<bool> = const { Cell::new(false) };
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Enables per-op finite checks (panicking with the op name on violation)
/// for the calling thread of control. Off by default; verification paths
/// switch it on. Thread-local so concurrent runs stay independent.
pub fn set_validation(enabled: bool) {
    VALIDATION.with(|flag| flag.set(enabled));
}

pub fn validation_enabled() -> bool {
    VALIDATION.with(Cell::get)
}

/// Count of backward passes started on this thread; lets evaluation paths
/// assert that they never triggered gradient computation.
pub fn backward_call_count() -> u64 {
    BACKWARD_CALLS.with(Cell::get)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf { param: Option<ParamId> },
    Matmul { a: Var, b: Var },
    MatmulBias { a: Var, w: Var, bias: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    ConcatCols { parts: Vec<Var> },
    TileRows { base: Var, times: usize },
    GatherRows { x: Var, indices: Arc<Vec<u32>> },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, mean: Vec<S>, inv_std: Vec<S> },
    Attention2 { q: Var, k: Var, v: Var, heads: usize, probs: Tensor<S> },
    CrossEntropyMean { logits: Var, targets: Arc<Vec<u32>>, softmax: Tensor<S> },
    SumAll { x: Var },
    Scale { x: Var, factor: S },
}

/// Row-block threshold above which products split across two tasks. Each
/// output element is still produced by one kernel call with an unchanged
/// accumulation order, so results are bit-identical at any thread count.
const GEMM_SPLIT_FLOPS: usize = 1 << 22;

#[cfg(not(target_arch = "wasm32"))]
fn join_halves<A: FnOnce() + Send, B: FnOnce() + Send>(a: A, b: B) {
    rayon::join(a, b);
}

#[cfg(target_arch = "wasm32")]
fn join_halves<A: FnOnce() + Send, B: FnOnce() + Send>(a: A, b: B) {
    a();
    b();
}

/// Shared row-split driver: `rows(c) = m`, callers describe how to run the
/// kernel over a row range of `c`. The split decision depends only on the
/// problem size, never on the thread count.
fn split_rows<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    c: &mut [S],
    run: impl Fn(usize, usize, &mut [S]) + Sync,
) {
    if 2 * m * k * n < GEMM_SPLIT_FLOPS || m < 64 {
        run(0, m, c);
        return;
    }
    let half = m / 2;
    let (lo, hi) = c.split_at_mut(half * n);
    join_halves(|| run(0, half, lo), || run(half, m - half, hi));
}

/// `c (m x n) = a (m x k) @ b (k x n) + beta * c`
fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], beta: S) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    split_rows(m, k, n, c, |start, rows, c_rows| unsafe {
        S::gemm(
            rows, k, n, S::ONE, a[start * k..].as_ptr(), k as isize, 1, b.as_ptr(),
            n as isize, 1, beta, c_rows.as_mut_ptr(), n as isize, 1,
        );
    });
}

/// `c (m x n) = a (m x k) @ b^T + beta * c` where `b` is stored `n x k`
fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], beta: S) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    split_rows(m, k, n, c, |start, rows, c_rows| unsafe {
        S::gemm(
            rows, k, n, S::ONE, a[start * k..].as_ptr(), k as isize, 1, b.as_ptr(), 1,
            k as isize, beta, c_rows.as_mut_ptr(), n as isize, 1,
        );
    });
}

/// `c (m x n) = a^T @ b + beta * c` where `a` is stored `k x m`, `b` is `k x n`
fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], beta: S) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Rows of c index columns of the stored a; column stride selects them.
    split_rows(m, k, n, c, |start, rows, c_rows| unsafe {
        S::gemm(
            rows, k, n, S::ONE, a[start..].as_ptr(), 1, m as isize, b.as_ptr(),
            n as isize, 1, beta, c_rows.as_mut_ptr(), n as isize, 1,
        );
    });
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        if validation_enabled() {
            assert!(value.is_all_finite(), "non-finite value produced by {}", op_name(&op));
        }
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// A trainable input bound to a store entry; backward accumulates into
    /// the store's gradient buffer for this parameter.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), true, Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.nodes[a.0].value.shape();
        let (kb, n) = self.nodes[b.0].value.shape();
        assert_eq!(ka, kb, "matmul inner dimensions differ: {ka} vs {kb}");
        let mut out = vec![S::ZERO; m * n];
        gemm_nn(m, ka, n, self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, S::ZERO);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(m, n, out), needs, Op::Matmul { a, b })
    }

    /// Fused `a @ w + bias`: the bias row seeds the accumulator, so this
    /// costs the same memory traffic as a bare matmul.
    pub fn matmul_bias(&mut self, a: Var, w: Var, bias: Var) -> Var {
        let (m, ka) = self.nodes[a.0].value.shape();
        let (kb, n) = self.nodes[w.0].value.shape();
        assert_eq!(ka, kb, "matmul inner dimensions differ: {ka} vs {kb}");
        assert_eq!(self.nodes[bias.0].value.shape(), (1, n), "bias row must be 1 x {n}");
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.nodes[bias.0].value.data());
        }
        gemm_nn(m, ka, n, self.nodes[a.0].value.data(), self.nodes[w.0].value.data(), &mut out, S::ONE);
        let needs = self.needs(a) || self.needs(w) || self.needs(bias);
        self.push(Tensor::from_vec(m, n, out), needs, Op::MatmulBias { a, w, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        assert_eq!(sa, sb, "add requires matching shapes: {sa:?} vs {sb:?}");
        let out: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(sa.0, sa.1, out), needs, Op::Add { a, b })
    }

    /// Adds a `1 x C` row vector to every row of an `R x C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.nodes[a.0].value.shape();
        let (rr, rc) = self.nodes[row.0].value.shape();
        assert_eq!((rr, rc), (1, cols), "bias row must be 1 x {cols}, got {rr} x {rc}");
        let bias = self.nodes[row.0].value.data().to_vec();
        let mut out = self.nodes[a.0].value.data().to_vec();
        for chunk in out.chunks_exact_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(&bias) {
                *o = *o + b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(Tensor::from_vec(rows, cols, out), needs, Op::AddRow { a, row })
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts
            .iter()
            .map(|p| {
                assert_eq!(self.nodes[p.0].value.rows(), rows, "concat_cols row mismatch");
                self.nodes[p.0].value.cols()
            })
            .sum();
        let mut out = vec![S::ZERO; rows * total];
        let mut offset = 0;
        for part in parts {
            let tensor = &self.nodes[part.0].value;
            let cols = tensor.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + cols]
                    .copy_from_slice(tensor.row(r));
            }
            offset += cols;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::from_vec(rows, total, out), needs, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Stacks `times` copies of the whole block vertically: row `r` of the
    /// output equals base row `r % base_rows`.
    pub fn tile_rows(&mut self, base: Var, times: usize) -> Var {
        assert!(times >= 1, "tile_rows needs times >= 1");
        let (rows, cols) = self.nodes[base.0].value.shape();
        let mut out = Vec::with_capacity(rows * times * cols);
        for _ in 0..times {
            out.extend_from_slice(self.nodes[base.0].value.data());
        }
        let needs = self.needs(base);
        self.push(Tensor::from_vec(rows * times, cols, out), needs, Op::TileRows { base, times })
    }

    /// Selects rows by index, duplicates allowed; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<u32>>) -> Var {
        let (rows, cols) = self.nodes[x.0].value.shape();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            assert!((i as usize) < rows, "gather index {i} out of {rows} rows");
            out.extend_from_slice(self.nodes[x.0].value.row(i as usize));
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(indices.len(), cols, out), needs, Op::GatherRows { x, indices })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (rows, cols) = self.nodes[x.0].value.shape();
        let out: Vec<S> =
            self.nodes[x.0].value.data().iter().map(|&v| v.max(S::ZERO)).collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(rows, cols, out), needs, Op::Relu { x })
    }

    /// Numerically stable softmax along each row; rows sum to one.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.nodes[x.0].value.shape();
        assert!(cols >= 1, "softmax over empty rows");
        let input = self.nodes[x.0].value.data();
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let row = &input[r * cols..(r + 1) * cols];
            let mut max = row[0];
            for &v in row {
                max = max.max(v);
            }
            let mut sum = S::ZERO;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum = sum + e;
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / sum;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(rows, cols, out), needs, Op::SoftmaxRows { x })
    }

    /// Row-wise normalization to mean 0 / variance 1 (population variance,
    /// epsilon inside the square root), then per-column affine gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Var {
        let (rows, cols) = self.nodes[x.0].value.shape();
        assert_eq!(self.nodes[gain.0].value.shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(self.nodes[shift.0].value.shape(), (1, cols), "layer_norm shift shape");
        let input = self.nodes[x.0].value.data();
        let gain_row = self.nodes[gain.0].value.data().to_vec();
        let shift_row = self.nodes[shift.0].value.data().to_vec();
        let eps = S::from_f64(LAYER_NORM_EPS);
        let count = S::from_f64(cols as f64);
        let mut out = vec![S::ZERO; rows * cols];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for (row, dst) in input.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            let mut sum = S::ZERO;
            for &v in row {
                sum = sum + v;
            }
            let mean = sum / count;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / count;
            let inv_std = S::ONE / (var + eps).sqrt();
            for (((o, &v), &g), &b) in
                dst.iter_mut().zip(row).zip(&gain_row).zip(&shift_row)
            {
                *o = g * ((v - mean) * inv_std) + b;
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            Tensor::from_vec(rows, cols, out),
            needs,
            Op::LayerNorm { x, gain, shift, mean: means, inv_std: inv_stds },
        )
    }

    /// Multi-head scaled dot-product attention over sequences of exactly two
    /// positions. Inputs are `2B x D` with rows `2i` and `2i + 1` forming
    /// example `i`; both positions attend to both (no mask). The per-head
    /// scale is `1 / sqrt(D / heads)`.
    pub fn attention_pairs(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (rows, dim) = self.nodes[q.0].value.shape();
        assert_eq!(self.nodes[k.0].value.shape(), (rows, dim), "attention k shape");
        assert_eq!(self.nodes[v.0].value.shape(), (rows, dim), "attention v shape");
        assert!(rows % 2 == 0, "attention_pairs needs an even row count");
        assert!(heads >= 1 && dim % heads == 0, "head count {heads} must divide width {dim}");
        let examples = rows / 2;
        let head_dim = dim / heads;
        let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![S::ZERO; rows * dim];
        let mut probs = vec![S::ZERO; rows * 2 * heads];
        let dot = |a: &[S], b: &[S]| -> S {
            let mut acc = S::ZERO;
            for (&x, &y) in a.iter().zip(b) {
                acc = acc + x * y;
            }
            acc * scale
        };
        for i in 0..examples {
            let r0 = 2 * i;
            let r1 = r0 + 1;
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let k0 = &kd[r0 * dim + cols.start..r0 * dim + cols.end];
                let k1 = &kd[r1 * dim + cols.start..r1 * dim + cols.end];
                let v0 = &vd[r0 * dim + cols.start..r0 * dim + cols.end];
                let v1 = &vd[r1 * dim + cols.start..r1 * dim + cols.end];
                for a in [r0, r1] {
                    let qa = &qd[a * dim + cols.start..a * dim + cols.end];
                    let s0 = dot(qa, k0);
                    let s1 = dot(qa, k1);
                    let max = s0.max(s1);
                    let e0 = (s0 - max).exp();
                    let e1 = (s1 - max).exp();
                    let total = e0 + e1;
                    let p0 = e0 / total;
                    let p1 = e1 / total;
                    probs[a * 2 * heads + 2 * h] = p0;
                    probs[a * 2 * heads + 2 * h + 1] = p1;
                    let dst = &mut out[a * dim + cols.start..a * dim + cols.end];
                    for ((o, &x), &y) in dst.iter_mut().zip(v0).zip(v1) {
                        *o = p0 * x + p1 * y;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Tensor::from_vec(rows, dim, out),
            needs,
            Op::Attention2 { q, k, v, heads, probs: Tensor::from_vec(rows, 2 * heads, probs) },
        )
    }

    /// Attention probabilities cached by the most recent
    /// [`Tape::attention_pairs`] node, as a `2B x 2H` matrix.
    pub fn attention_probs(&self, attention: Var) -> Option<&Tensor<S>> {
        match &self.nodes[attention.0].op {
            Op::Attention2 { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean cross-entropy of target token ids under row-wise softmax of the
    /// logits. Produces a `1 x 1` scalar.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Arc<Vec<u32>>) -> Var {
        let (rows, cols) = self.nodes[logits.0].value.shape();
        assert_eq!(targets.len(), rows, "one target per logit row");
        assert!(rows >= 1, "cross entropy over an empty batch");
        let data = self.nodes[logits.0].value.data();
        let mut softmax = vec![S::ZERO; rows * cols];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let target = targets[r] as usize;
            assert!(target < cols, "target {target} outside vocabulary {cols}");
            let mut max = row[0];
            for &v in row {
                max = max.max(v);
            }
            let mut sum = S::ZERO;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                softmax[r * cols + c] = e;
                sum = sum + e;
            }
            for c in 0..cols {
                softmax[r * cols + c] = softmax[r * cols + c] / sum;
            }
            let log_sum = sum.to_f64().ln() + max.to_f64();
            total += log_sum - row[target].to_f64();
        }
        let loss = S::from_f64(total / rows as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropyMean {
                logits,
                targets,
                softmax: Tensor::from_vec(rows, cols, softmax),
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut total = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            total = total + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), needs, Op::SumAll { x })
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let (rows, cols) = self.nodes[x.0].value.shape();
        let out: Vec<S> = self.nodes[x.0].value.data().iter().map(|&v| v * factor).collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(rows, cols, out), needs, Op::Scale { x, factor })
    }

    /// Reverse pass from a scalar loss; gradients of every reachable
    /// parameter accumulate into `store`. Repeated calls without zeroing add
    /// up.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<(), NumericsError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        BACKWARD_CALLS.with(|count| count.set(count.get() + 1));
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if validation_enabled() {
                assert!(
                    dy.iter().all(|v| v.is_finite()),
                    "non-finite gradient at {}",
                    op_name(&self.nodes[i].op)
                );
            }
            self.propagate(i, &dy, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        index: usize,
        dy: &[S],
        grads: &mut [Option<Vec<S>>],
        store: &mut ParamStore<S>,
    ) {
        let add_into = |grads: &mut [Option<Vec<S>>], var: Var, write: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            let len = self.nodes[var.0].value.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![S::ZERO; len]);
            write(slot);
        };
        match &self.nodes[index].op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    store.accumulate_grad(*id, dy);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].value.shape();
                let n = self.nodes[b.0].value.cols();
                add_into(grads, *a, &mut |da| {
                    gemm_nt(m, n, k, dy, self.nodes[b.0].value.data(), da, S::ONE);
                });
                add_into(grads, *b, &mut |db| {
                    gemm_tn(k, m, n, self.nodes[a.0].value.data(), dy, db, S::ONE);
                });
            }
            Op::MatmulBias { a, w, bias } => {
                let (m, k) = self.nodes[a.0].value.shape();
                let n = self.nodes[w.0].value.cols();
                add_into(grads, *a, &mut |da| {
                    gemm_nt(m, n, k, dy, self.nodes[w.0].value.data(), da, S::ONE);
                });
                add_into(grads, *w, &mut |dw| {
                    gemm_tn(k, m, n, self.nodes[a.0].value.data(), dy, dw, S::ONE);
                });
                add_into(grads, *bias, &mut |dbias| {
                    for row in dy.chunks_exact(n) {
                        for (g, &d) in dbias.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for var in [a, b] {
                    add_into(grads, *var, &mut |dx| {
                        for (g, &d) in dx.iter_mut().zip(dy) {
                            *g += d;
                        }
                    });
                }
            }
            Op::AddRow { a, row } => {
                let cols = self.nodes[a.0].value.cols();
                add_into(grads, *a, &mut |da| {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                add_into(grads, *row, &mut |drow| {
                    for row in dy.chunks_exact(cols) {
                        for (g, &d) in drow.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[index].value.cols();
                let mut offset = 0;
                for part in parts {
                    let cols = self.nodes[part.0].value.cols();
                    add_into(grads, *part, &mut |dp| {
                        for (dst, src) in dp.chunks_exact_mut(cols).zip(dy.chunks_exact(total)) {
                            for (g, &d) in dst.iter_mut().zip(&src[offset..offset + cols]) {
                                *g += d;
                            }
                        }
                    });
                    offset += cols;
                }
            }
            Op::TileRows { base, times } => {
                let (rows, cols) = self.nodes[base.0].value.shape();
                add_into(grads, *base, &mut |db| {
                    for t in 0..*times {
                        let block = &dy[t * rows * cols..(t + 1) * rows * cols];
                        for (g, &d) in db.iter_mut().zip(block) {
                            *g += d;
                        }
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let cols = self.nodes[x.0].value.cols();
                add_into(grads, *x, &mut |dx| {
                    for (src, &i) in dy.chunks_exact(cols).zip(indices.iter()) {
                        let dst = &mut dx[i as usize * cols..(i as usize + 1) * cols];
                        for (g, &d) in dst.iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let input = self.nodes[x.0].value.data();
                add_into(grads, *x, &mut |dx| {
                    for ((g, &d), &v) in dx.iter_mut().zip(dy).zip(input) {
                        if v > S::ZERO {
                            *g += d;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let cols = self.nodes[index].value.cols();
                let probs = self.nodes[index].value.data();
                add_into(grads, *x, &mut |dx| {
                    for ((dst, p), d) in dx
                        .chunks_exact_mut(cols)
                        .zip(probs.chunks_exact(cols))
                        .zip(dy.chunks_exact(cols))
                    {
                        let mut inner = S::ZERO;
                        for (&pc, &dc) in p.iter().zip(d) {
                            inner = inner + pc * dc;
                        }
                        for ((g, &pc), &dc) in dst.iter_mut().zip(p).zip(d) {
                            *g += pc * (dc - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, mean, inv_std } => {
                // One combined pass accumulates dgain and dshift; the dx pass
                // reuses the same per-row statistics.
                let cols = self.nodes[x.0].value.cols();
                let input = self.nodes[x.0].value.data();
                let gain_row = self.nodes[gain.0].value.data();
                let count = S::from_f64(cols as f64);
                let affine = self.nodes[gain.0].needs_grad || self.nodes[shift.0].needs_grad;
                if affine {
                    let mut dgain = vec![S::ZERO; cols];
                    let mut dshift = vec![S::ZERO; cols];
                    for ((row, d), (&m, &s)) in input
                        .chunks_exact(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(mean.iter().zip(inv_std))
                    {
                        for (((dg, ds), &v), &dv) in
                            dgain.iter_mut().zip(dshift.iter_mut()).zip(row).zip(d)
                        {
                            *dg += dv * (v - m) * s;
                            *ds += dv;
                        }
                    }
                    add_into(grads, *gain, &mut |slot| {
                        for (g, &d) in slot.iter_mut().zip(&dgain) {
                            *g += d;
                        }
                    });
                    add_into(grads, *shift, &mut |slot| {
                        for (g, &d) in slot.iter_mut().zip(&dshift) {
                            *g += d;
                        }
                    });
                }
                add_into(grads, *x, &mut |dx| {
                    for (((row, d), dst), (&m, &s)) in input
                        .chunks_exact(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                        .zip(mean.iter().zip(inv_std))
                    {
                        let mut mean_dnorm = S::ZERO;
                        let mut mean_dnorm_norm = S::ZERO;
                        for ((&v, &dv), &g) in row.iter().zip(d).zip(gain_row) {
                            let normalized = (v - m) * s;
                            let dnorm = dv * g;
                            mean_dnorm = mean_dnorm + dnorm;
                            mean_dnorm_norm = mean_dnorm_norm + dnorm * normalized;
                        }
                        mean_dnorm = mean_dnorm / count;
                        mean_dnorm_norm = mean_dnorm_norm / count;
                        for (((g, &v), &dv), &gn) in
                            dst.iter_mut().zip(row).zip(d).zip(gain_row)
                        {
                            let normalized = (v - m) * s;
                            let dnorm = dv * gn;
                            *g += s * (dnorm - mean_dnorm - normalized * mean_dnorm_norm);
                        }
                    }
                });
            }
            Op::Attention2 { q, k, v, heads, probs } => {
                self.attention_backward(dy, *q, *k, *v, *heads, probs, grads);
            }
            Op::CrossEntropyMean { logits, targets, softmax } => {
                let cols = softmax.cols();
                let upstream = dy[0];
                let scale = upstream / S::from_f64(softmax.rows() as f64);
                let soft = softmax.data();
                add_into(grads, *logits, &mut |dl| {
                    for ((dst, p), &target) in dl
                        .chunks_exact_mut(cols)
                        .zip(soft.chunks_exact(cols))
                        .zip(targets.iter())
                    {
                        for (g, &pc) in dst.iter_mut().zip(p) {
                            *g += scale * pc;
                        }
                        dst[target as usize] = dst[target as usize] - scale;
                    }
                });
            }
            Op::SumAll { x } => {
                let d = dy[0];
                add_into(grads, *x, &mut |dx| {
                    for g in dx.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                add_into(grads, *x, &mut |dx| {
                    for (g, &d) in dx.iter_mut().zip(dy) {
                        *g += d * f;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &[S],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &Tensor<S>,
        grads: &mut [Option<Vec<S>>],
    ) {
        let (rows, dim) = self.nodes[q.0].value.shape();
        let examples = rows / 2;
        let head_dim = dim / heads;
        let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let pd = probs.data();
        let mut dq = vec![S::ZERO; rows * dim];
        let mut dk = vec![S::ZERO; rows * dim];
        let mut dv = vec![S::ZERO; rows * dim];
        for i in 0..examples {
            let r0 = 2 * i;
            let r1 = r0 + 1;
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let span = |row: usize| row * dim + cols.start..row * dim + cols.end;
                let k0 = &kd[span(r0)];
                let k1 = &kd[span(r1)];
                let v0 = &vd[span(r0)];
                let v1 = &vd[span(r1)];
                for a in [r0, r1] {
                    let p0 = pd[a * 2 * heads + 2 * h];
                    let p1 = pd[a * 2 * heads + 2 * h + 1];
                    let d = &dy[span(a)];
                    let qa = &qd[span(a)];
                    // dv and dp from the output gradient.
                    let mut dp0 = S::ZERO;
                    let mut dp1 = S::ZERO;
                    for ((&dc, &x), &y) in d.iter().zip(v0).zip(v1) {
                        dp0 += dc * x;
                        dp1 += dc * y;
                    }
                    {
                        let (lo, hi) = dv.split_at_mut(r1 * dim);
                        let dv0 = &mut lo[span(r0)];
                        let dv1 = &mut hi[cols.clone()];
                        for ((&dc, g0), g1) in d.iter().zip(dv0).zip(dv1) {
                            *g0 += p0 * dc;
                            *g1 += p1 * dc;
                        }
                    }
                    // Softmax backward on the length-2 row, then the score
                    // terms s[b] = scale * q[a] . k[r_b].
                    let inner = p0 * dp0 + p1 * dp1;
                    let ds0 = p0 * (dp0 - inner) * scale;
                    let ds1 = p1 * (dp1 - inner) * scale;
                    {
                        let dqa = &mut dq[span(a)];
                        for ((g, &x), &y) in dqa.iter_mut().zip(k0).zip(k1) {
                            *g += ds0 * x + ds1 * y;
                        }
                    }
                    {
                        let (lo, hi) = dk.split_at_mut(r1 * dim);
                        let dk0 = &mut lo[span(r0)];
                        let dk1 = &mut hi[cols.clone()];
                        for ((&q_val, g0), g1) in qa.iter().zip(dk0).zip(dk1) {
                            *g0 += ds0 * q_val;
                            *g1 += ds1 * q_val;
                        }
                    }
                }
            }
        }
        let mut add = |var: Var, contribution: Vec<S>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            let len = self.nodes[var.0].value.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![S::ZERO; len]);
            for (g, d) in slot.iter_mut().zip(contribution) {
                *g += d;
            }
        };
        add(q, dq);
        add(k, dk);
        add(v, dv);
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::MatmulBias { .. } => "matmul_bias",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::ConcatCols { .. } => "concat_cols",
        Op::TileRows { .. } => "tile_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::Relu { .. } => "relu",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention2 { .. } => "attention_pairs",
        Op::CrossEntropyMean { .. } => "cross_entropy_mean",
        Op::SumAll { .. } => "sum_all",
        Op::Scale { .. } => "scale",
    }
}
