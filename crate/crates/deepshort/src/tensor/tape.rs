//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends one node holding its output value and the indices
//! of its parents. [`Tape::backward`] walks the nodes in reverse, pushing
//! gradients into parents with all reductions in ascending index order, so a
//! given graph produces bitwise-identical gradients on every run.
//!
//! Memory protocol for batch loops: bind parameters once, then per sample
//! `mark` / forward / `backward` / `reset_to`. Leaf gradients survive the
//! reset and accumulate across samples; operation nodes are discarded.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node. Invalidated by [`Tape::clear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

enum Value<F> {
    Owned(Tensor<F>),
    Shared(Arc<Tensor<F>>),
}

impl<F> Value<F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

/// Recorded operation: parent indices plus whatever backward needs.
pub enum Op<F> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// a + c * b with constant c.
    AddScaled { a: usize, b: usize, c: F },
    Scale { a: usize, c: F },
    /// Elementwise product with a 1x1 variable.
    ScaleVar { a: usize, s: usize },
    /// Broadcast-add a 1xC row to every row of a.
    AddRow { a: usize, row: usize },
    /// Tile a 1xC row N times.
    RepeatRow { row: usize, n: usize },
    Transpose { a: usize },
    SliceCols { a: usize, start: usize, end: usize },
    ConcatCols { a: usize, b: usize },
    /// out[i, :] = a[idx[i], :]
    GatherRows { a: usize, idx: Vec<usize> },
    /// out[idx[i], :] = a[i, :], other rows zero; idx entries distinct.
    ScatterRows { a: usize, idx: Vec<usize>, rows: usize },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: F },
    SumAll { a: usize },
    MeanAll { a: usize },
    /// Mean over rows of (logsumexp(row) - row[label]).
    CrossEntropy { a: usize, labels: Vec<usize> },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Flat computation graph.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    generation: u64,
    /// Nodes below this index have already been swept by a backward pass and
    /// may not serve as a loss root again.
    backward_floor: usize,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            generation: 0,
            backward_floor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop everything and invalidate all outstanding handles.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.generation += 1;
        self.backward_floor = 0;
    }

    /// Snapshot the node count before a forward pass.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Discard nodes recorded after `mark`. Gradients of surviving leaves are
    /// kept, so repeated forward/backward passes accumulate into them.
    pub fn reset_to(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.truncate(mark);
        self.backward_floor = self.backward_floor.min(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.generation, self.generation, "stale Var");
        self.nodes[v.index].value.get()
    }

    /// Gradient accumulated for `v`, if any backward pass reached it.
    /// Only leaf gradients are retained after a pass completes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        assert_eq!(v.generation, self.generation, "stale Var");
        self.grads[v.index].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        assert_eq!(v.generation, self.generation, "stale Var");
        self.grads[v.index].take()
    }

    pub fn zero_grad(&mut self, v: Var) {
        assert_eq!(v.generation, self.generation, "stale Var");
        self.grads[v.index] = None;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::StaleGraph);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, needs_grad, "leaf")
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<F>>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node {
            value: Value::Shared(value),
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, ka) = self.nodes[ai].value.get().dims2();
        let (kb, n) = self.nodes[bi].value.get().dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(
            self.nodes[ai].value.get().as_slice(),
            self.nodes[bi].value.get().as_slice(),
            &mut out,
            m,
            ka,
            n,
        );
        let needs = self.needs(ai) || self.needs(bi);
        self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::Matmul { a: ai, b: bi },
            needs,
            "matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip2("add", a, b, |x, y| x + y, |ai, bi| Op::Add { a: ai, b: bi })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip2("sub", a, b, |x, y| x - y, |ai, bi| Op::Sub { a: ai, b: bi })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip2("mul", a, b, |x, y| x * y, |ai, bi| Op::Mul { a: ai, b: bi })
    }

    /// a + c * b for a compile-time-constant coefficient (shortcut mixing).
    pub fn add_scaled(&mut self, a: Var, b: Var, c: F) -> Result<Var> {
        self.zip2(
            "add_scaled",
            a,
            b,
            |x, y| c.mul_add(y, x),
            |ai, bi| Op::AddScaled { a: ai, b: bi, c },
        )
    }

    fn zip2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: impl Fn(usize, usize) -> Op<F>,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.nodes[ai].value.get(), self.nodes[bi].value.get());
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .as_slice()
            .iter()
            .zip(tb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(ai) || self.needs(bi);
        self.push(value, op(ai, bi), needs, name)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.get().scaled(c);
        let needs = self.needs(ai);
        self.push(value, Op::Scale { a: ai, c }, needs, "scale")
    }

    /// Multiply by a 1x1 variable (learnable shortcut gain).
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ai, si) = (self.check(a)?, self.check(s)?);
        let sv = self.nodes[si].value.get();
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_var",
                lhs: self.nodes[ai].value.get().shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let c = sv.as_slice()[0];
        let value = self.nodes[ai].value.get().scaled(c);
        let needs = self.needs(ai) || self.needs(si);
        self.push(value, Op::ScaleVar { a: ai, s: si }, needs, "scale_var")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ai, ri) = (self.check(a)?, self.check(row)?);
        let (m, n) = self.nodes[ai].value.get().dims2();
        let (rr, rc) = self.nodes[ri].value.get().dims2();
        if rr != 1 || rc != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: vec![rr, rc],
            });
        }
        let ta = self.nodes[ai].value.get().as_slice();
        let tr = self.nodes[ri].value.get().as_slice();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(ta[i * n + j] + tr[j]);
            }
        }
        let needs = self.needs(ai) || self.needs(ri);
        self.push(
            Tensor::from_vec(vec![m, n], data)?,
            Op::AddRow { a: ai, row: ri },
            needs,
            "add_row",
        )
    }

    pub fn repeat_row(&mut self, row: Var, n: usize) -> Result<Var> {
        let ri = self.check(row)?;
        let (rr, rc) = self.nodes[ri].value.get().dims2();
        if rr != 1 {
            return Err(Error::ShapeMismatch {
                op: "repeat_row",
                lhs: vec![rr, rc],
                rhs: vec![1, rc],
            });
        }
        let src = self.nodes[ri].value.get().as_slice();
        let mut data = Vec::with_capacity(n * rc);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let needs = self.needs(ri);
        self.push(
            Tensor::from_vec(vec![n, rc], data)?,
            Op::RepeatRow { row: ri, n },
            needs,
            "repeat_row",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.nodes[ai].value.get().dims2();
        let mut data = vec![F::zero(); m * n];
        transpose_into(self.nodes[ai].value.get().as_slice(), &mut data, m, n);
        let needs = self.needs(ai);
        self.push(
            Tensor::from_vec(vec![n, m], data)?,
            Op::Transpose { a: ai },
            needs,
            "transpose",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.nodes[ai].value.get().dims2();
        if start >= end || end > n {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{end} out of range for {n} columns"
            )));
        }
        let src = self.nodes[ai].value.get().as_slice();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let needs = self.needs(ai);
        self.push(
            Tensor::from_vec(vec![m, w], data)?,
            Op::SliceCols { a: ai, start, end },
            needs,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ma, na) = self.nodes[ai].value.get().dims2();
        let (mb, nb) = self.nodes[bi].value.get().dims2();
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ma, na],
                rhs: vec![mb, nb],
            });
        }
        let sa = self.nodes[ai].value.get().as_slice();
        let sb = self.nodes[bi].value.get().as_slice();
        let mut data = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            data.extend_from_slice(&sa[i * na..(i + 1) * na]);
            data.extend_from_slice(&sb[i * nb..(i + 1) * nb]);
        }
        let needs = self.needs(ai) || self.needs(bi);
        self.push(
            Tensor::from_vec(vec![ma, na + nb], data)?,
            Op::ConcatCols { a: ai, b: bi },
            needs,
            "concat_cols",
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.nodes[ai].value.get().dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let src = self.nodes[ai].value.get().as_slice();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let needs = self.needs(ai);
        self.push(
            Tensor::from_vec(vec![idx.len(), n], data)?,
            Op::GatherRows {
                a: ai,
                idx: idx.to_vec(),
            },
            needs,
            "gather_rows",
        )
    }

    /// Place row i of `a` at row `idx[i]` of an otherwise-zero output with
    /// `rows` rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.nodes[ai].value.get().dims2();
        if m != idx.len() {
            return Err(Error::invalid(format!(
                "scatter_rows: {m} rows but {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "scatter_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.nodes[ai].value.get().as_slice();
        let mut data = vec![F::zero(); rows * n];
        for (i, &r) in idx.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
        }
        let needs = self.needs(ai);
        self.push(
            Tensor::from_vec(vec![rows, n], data)?,
            Op::ScatterRows {
                a: ai,
                idx: idx.to_vec(),
                rows,
            },
            needs,
            "scatter_rows",
        )
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.get().map(gelu_tanh);
        let needs = self.needs(ai);
        self.push(value, Op::Gelu { a: ai }, needs, "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.nodes[ai].value.get().dims2();
        let src = self.nodes[ai].value.get().as_slice();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let needs = self.needs(ai);
        self.push(
            Tensor::from_vec(vec![m, n], data)?,
            Op::SoftmaxRows { a: ai },
            needs,
            "softmax_rows",
        )
    }

    /// Row-wise layer normalization with affine parameters (1xC each).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (ai, gi, bi) = (self.check(a)?, self.check(gamma)?, self.check(beta)?);
        let (m, n) = self.nodes[ai].value.get().dims2();
        for (pi, label) in [(gi, "gamma"), (bi, "beta")] {
            let (pr, pc) = self.nodes[pi].value.get().dims2();
            if pr != 1 || pc != n {
                return Err(Error::invalid(format!(
                    "layer_norm {label} must be 1x{n}, got {pr}x{pc}"
                )));
            }
        }
        let src = self.nodes[ai].value.get().as_slice();
        let g = self.nodes[gi].value.get().as_slice();
        let b = self.nodes[bi].value.get().as_slice();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..n {
                data[i * n + j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
            }
        }
        let needs = self.needs(ai) || self.needs(gi) || self.needs(bi);
        self.push(
            Tensor::from_vec(vec![m, n], data)?,
            Op::LayerNorm {
                a: ai,
                gamma: gi,
                beta: bi,
                eps,
            },
            needs,
            "layer_norm",
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let mut acc = F::zero();
        for &x in self.nodes[ai].value.get().as_slice() {
            acc += x;
        }
        let needs = self.needs(ai);
        self.push(Tensor::scalar(acc), Op::SumAll { a: ai }, needs, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let len = self.nodes[ai].value.get().len();
        let mut acc = F::zero();
        for &x in self.nodes[ai].value.get().as_slice() {
            acc += x;
        }
        let needs = self.needs(ai);
        self.push(
            Tensor::scalar(acc / F::from_f64(len as f64)),
            Op::MeanAll { a: ai },
            needs,
            "mean_all",
        )
    }

    /// Mean over rows of softmax cross-entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ai = self.check(logits)?;
        let (m, n) = self.nodes[ai].value.get().dims2();
        if labels.len() != m {
            return Err(Error::invalid(format!(
                "cross_entropy: {m} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range for {n} classes"
            )));
        }
        let src = self.nodes[ai].value.get().as_slice();
        let mut acc = F::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * n..(i + 1) * n];
            acc += log_sum_exp(row) - row[label];
        }
        let needs = self.needs(ai);
        self.push(
            Tensor::scalar(acc / F::from_f64(m as f64)),
            Op::CrossEntropy {
                a: ai,
                labels: labels.to_vec(),
            },
            needs,
            "cross_entropy",
        )
    }

    // ---- backward ----

    /// Accumulate d(loss)/d(leaf) into the leaf gradient buffers.
    ///
    /// The loss must be a scalar recorded after any previous backward sweep;
    /// revisiting an already-swept node is a [`Error::StaleGraph`] error
    /// because interior gradients are consumed by the sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        let shape = self.nodes[li].value.get().shape().to_vec();
        if self.nodes[li].value.get().len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if li < self.backward_floor {
            return Err(Error::StaleGraph);
        }
        if !self.nodes[li].needs_grad {
            self.backward_floor = self.nodes.len();
            return Ok(());
        }
        self.ensure_grad(li);
        self.grads[li].as_mut().unwrap().as_mut_slice()[0] += F::one();

        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g);
        }
        self.backward_floor = self.nodes.len();
        Ok(())
    }

    fn ensure_grad(&mut self, idx: usize) {
        if self.grads[idx].is_none() {
            let shape = self.nodes[idx].value.get().shape().to_vec();
            self.grads[idx] = Some(Tensor::zeros(shape));
        }
    }

    /// Add `g` (same shape as node `idx`) into that node's gradient buffer,
    /// if it participates in differentiation.
    fn accum(&mut self, idx: usize, g: &[F]) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        self.ensure_grad(idx);
        let dst = self.grads[idx].as_mut().unwrap().as_mut_slice();
        for (d, &s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    fn accum_with(&mut self, idx: usize, len: usize, fill: impl Fn(&mut [F])) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let mut buf = vec![F::zero(); len];
        fill(&mut buf);
        self.accum(idx, &buf);
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<F>) {
        // Clones below are enum metadata (indices, label vectors), not tensor
        // payloads; they decouple the op description from `&mut self`.
        let op = match &self.nodes[idx].op {
            Op::Leaf => unreachable!("leaf nodes are skipped"),
            Op::Matmul { a, b } => Op::Matmul { a: *a, b: *b },
            Op::Add { a, b } => Op::Add { a: *a, b: *b },
            Op::Sub { a, b } => Op::Sub { a: *a, b: *b },
            Op::Mul { a, b } => Op::Mul { a: *a, b: *b },
            Op::AddScaled { a, b, c } => Op::AddScaled {
                a: *a,
                b: *b,
                c: *c,
            },
            Op::Scale { a, c } => Op::Scale { a: *a, c: *c },
            Op::ScaleVar { a, s } => Op::ScaleVar { a: *a, s: *s },
            Op::AddRow { a, row } => Op::AddRow { a: *a, row: *row },
            Op::RepeatRow { row, n } => Op::RepeatRow { row: *row, n: *n },
            Op::Transpose { a } => Op::Transpose { a: *a },
            Op::SliceCols { a, start, end } => Op::SliceCols {
                a: *a,
                start: *start,
                end: *end,
            },
            Op::ConcatCols { a, b } => Op::ConcatCols { a: *a, b: *b },
            Op::GatherRows { a, idx } => Op::GatherRows {
                a: *a,
                idx: idx.clone(),
            },
            Op::ScatterRows { a, idx, rows } => Op::ScatterRows {
                a: *a,
                idx: idx.clone(),
                rows: *rows,
            },
            Op::Gelu { a } => Op::Gelu { a: *a },
            Op::SoftmaxRows { a } => Op::SoftmaxRows { a: *a },
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps,
            } => Op::LayerNorm {
                a: *a,
                gamma: *gamma,
                beta: *beta,
                eps: *eps,
            },
            Op::SumAll { a } => Op::SumAll { a: *a },
            Op::MeanAll { a } => Op::MeanAll { a: *a },
            Op::CrossEntropy { a, labels } => Op::CrossEntropy {
                a: *a,
                labels: labels.clone(),
            },
        };

        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a].value.get().dims2();
                let (_, n) = self.nodes[b].value.get().dims2();
                if self.nodes[a].needs_grad {
                    // dA += G * B^T, as a plain product against a transposed copy.
                    let mut bt = vec![F::zero(); k * n];
                    transpose_into(self.nodes[b].value.get().as_slice(), &mut bt, k, n);
                    self.ensure_grad(a);
                    matmul_acc(
                        g.as_slice(),
                        &bt,
                        self.grads[a].as_mut().unwrap().as_mut_slice(),
                        m,
                        n,
                        k,
                    );
                }
                if self.nodes[b].needs_grad {
                    // dB += A^T * G
                    let mut at = vec![F::zero(); m * k];
                    transpose_into(self.nodes[a].value.get().as_slice(), &mut at, m, k);
                    self.ensure_grad(b);
                    matmul_acc(
                        &at,
                        g.as_slice(),
                        self.grads[b].as_mut().unwrap().as_mut_slice(),
                        k,
                        m,
                        n,
                    );
                }
            }
            Op::Add { a, b } => {
                self.accum(a, g.as_slice());
                self.accum(b, g.as_slice());
            }
            Op::Sub { a, b } => {
                self.accum(a, g.as_slice());
                self.accum_with(b, g.len(), |buf| {
                    for (d, &s) in buf.iter_mut().zip(g.as_slice()) {
                        *d = -s;
                    }
                });
            }
            Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let prod: Vec<F> = g
                        .as_slice()
                        .iter()
                        .zip(self.nodes[b].value.get().as_slice())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accum(a, &prod);
                }
                if self.nodes[b].needs_grad {
                    let prod: Vec<F> = g
                        .as_slice()
                        .iter()
                        .zip(self.nodes[a].value.get().as_slice())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accum(b, &prod);
                }
            }
            Op::AddScaled { a, b, c } => {
                self.accum(a, g.as_slice());
                self.accum_with(b, g.len(), |buf| {
                    for (d, &s) in buf.iter_mut().zip(g.as_slice()) {
                        *d = c * s;
                    }
                });
            }
            Op::Scale { a, c } => {
                self.accum_with(a, g.len(), |buf| {
                    for (d, &s) in buf.iter_mut().zip(g.as_slice()) {
                        *d = c * s;
                    }
                });
            }
            Op::ScaleVar { a, s } => {
                let c = self.nodes[s].value.get().as_slice()[0];
                if self.nodes[a].needs_grad {
                    let scaled: Vec<F> = g.as_slice().iter().map(|&x| c * x).collect();
                    self.accum(a, &scaled);
                }
                if self.nodes[s].needs_grad {
                    let mut acc = F::zero();
                    for (&gv, &av) in g.as_slice().iter().zip(self.nodes[a].value.get().as_slice())
                    {
                        acc += gv * av;
                    }
                    self.accum(s, &[acc]);
                }
            }
            Op::AddRow { a, row } => {
                self.accum(a, g.as_slice());
                if self.nodes[row].needs_grad {
                    let (m, n) = g.dims2();
                    self.accum_with(row, n, |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += g.as_slice()[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::RepeatRow { row, n } => {
                if self.nodes[row].needs_grad {
                    let (_, c) = g.dims2();
                    self.accum_with(row, c, |buf| {
                        for i in 0..n {
                            for j in 0..c {
                                buf[j] += g.as_slice()[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                if self.nodes[a].needs_grad {
                    let (gm, gn) = g.dims2();
                    let mut gt = vec![F::zero(); gm * gn];
                    transpose_into(g.as_slice(), &mut gt, gm, gn);
                    self.accum(a, &gt);
                }
            }
            Op::SliceCols { a, start, end } => {
                if self.nodes[a].needs_grad {
                    let (m, n) = self.nodes[a].value.get().dims2();
                    let w = end - start;
                    self.accum_with(a, m * n, |buf| {
                        for i in 0..m {
                            for j in 0..w {
                                buf[i * n + start + j] = g.as_slice()[i * w + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, na) = self.nodes[a].value.get().dims2();
                let (_, nb) = self.nodes[b].value.get().dims2();
                let n = na + nb;
                if self.nodes[a].needs_grad {
                    self.accum_with(a, m * na, |buf| {
                        for i in 0..m {
                            buf[i * na..(i + 1) * na]
                                .copy_from_slice(&g.as_slice()[i * n..i * n + na]);
                        }
                    });
                }
                if self.nodes[b].needs_grad {
                    self.accum_with(b, m * nb, |buf| {
                        for i in 0..m {
                            buf[i * nb..(i + 1) * nb]
                                .copy_from_slice(&g.as_slice()[i * n + na..(i + 1) * n]);
                        }
                    });
                }
            }
            Op::GatherRows { a, idx } => {
                if self.nodes[a].needs_grad {
                    let (m, n) = self.nodes[a].value.get().dims2();
                    // Ascending output-row order keeps repeated indices
                    // deterministic.
                    self.accum_with(a, m * n, |buf| {
                        for (i, &r) in idx.iter().enumerate() {
                            for j in 0..n {
                                buf[r * n + j] += g.as_slice()[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::ScatterRows { a, idx, rows: _ } => {
                if self.nodes[a].needs_grad {
                    let (m, n) = self.nodes[a].value.get().dims2();
                    self.accum_with(a, m * n, |buf| {
                        for (i, &r) in idx.iter().enumerate() {
                            buf[i * n..(i + 1) * n]
                                .copy_from_slice(&g.as_slice()[r * n..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a].needs_grad {
                    let d: Vec<F> = self.nodes[a]
                        .value
                        .get()
                        .as_slice()
                        .iter()
                        .zip(g.as_slice())
                        .map(|(&x, &gv)| gv * gelu_tanh_deriv(x))
                        .collect();
                    self.accum(a, &d);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[a].needs_grad {
                    let (m, n) = g.dims2();
                    let mut buf = vec![F::zero(); m * n];
                    {
                        let y = self.nodes[idx].value.get().as_slice();
                        for i in 0..m {
                            let yr = &y[i * n..(i + 1) * n];
                            let gr = &g.as_slice()[i * n..(i + 1) * n];
                            let mut dot = F::zero();
                            for j in 0..n {
                                dot += gr[j] * yr[j];
                            }
                            for j in 0..n {
                                buf[i * n + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    self.accum(a, &buf);
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps,
            } => {
                let (m, n) = self.nodes[a].value.get().dims2();
                let inv_n = F::one() / F::from_f64(n as f64);
                let need_a = self.nodes[a].needs_grad;
                let need_g = self.nodes[gamma].needs_grad;
                let need_b = self.nodes[beta].needs_grad;
                let mut buf_a = vec![F::zero(); if need_a { m * n } else { 0 }];
                let mut buf_g = vec![F::zero(); if need_g { n } else { 0 }];
                let mut buf_b = vec![F::zero(); if need_b { n } else { 0 }];
                {
                    let src = self.nodes[a].value.get().as_slice();
                    let gam = self.nodes[gamma].value.get().as_slice();
                    for i in 0..m {
                        let row = &src[i * n..(i + 1) * n];
                        let gr = &g.as_slice()[i * n..(i + 1) * n];
                        let (mean, inv_std) = row_moments(row, eps);
                        if need_a {
                            let mut sum_dxh = F::zero();
                            let mut sum_dxh_xh = F::zero();
                            for j in 0..n {
                                let xh = (row[j] - mean) * inv_std;
                                let dxh = gr[j] * gam[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                            for j in 0..n {
                                let xh = (row[j] - mean) * inv_std;
                                let dxh = gr[j] * gam[j];
                                buf_a[i * n + j] =
                                    inv_std * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                            }
                        }
                        if need_g {
                            for j in 0..n {
                                buf_g[j] += gr[j] * (row[j] - mean) * inv_std;
                            }
                        }
                        if need_b {
                            for j in 0..n {
                                buf_b[j] += gr[j];
                            }
                        }
                    }
                }
                if need_a {
                    self.accum(a, &buf_a);
                }
                if need_g {
                    self.accum(gamma, &buf_g);
                }
                if need_b {
                    self.accum(beta, &buf_b);
                }
            }
            Op::SumAll { a } => {
                if self.nodes[a].needs_grad {
                    let gv = g.as_slice()[0];
                    let len = self.nodes[a].value.get().len();
                    self.accum_with(a, len, |buf| {
                        for d in buf.iter_mut() {
                            *d = gv;
                        }
                    });
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[a].needs_grad {
                    let len = self.nodes[a].value.get().len();
                    let gv = g.as_slice()[0] / F::from_f64(len as f64);
                    self.accum_with(a, len, |buf| {
                        for d in buf.iter_mut() {
                            *d = gv;
                        }
                    });
                }
            }
            Op::CrossEntropy { a, labels } => {
                if self.nodes[a].needs_grad {
                    let (m, n) = self.nodes[a].value.get().dims2();
                    let gv = g.as_slice()[0] / F::from_f64(m as f64);
                    let mut buf = vec![F::zero(); m * n];
                    {
                        let src = self.nodes[a].value.get().as_slice();
                        let mut prob = vec![F::zero(); n];
                        for (i, &label) in labels.iter().enumerate() {
                            softmax_row(&src[i * n..(i + 1) * n], &mut prob);
                            for j in 0..n {
                                let indicator = if j == label { F::one() } else { F::zero() };
                                buf[i * n + j] = gv * (prob[j] - indicator);
                            }
                        }
                    }
                    self.accum(a, &buf);
                }
            }
        }
    }
}

// ---- kernels ----

/// out += a * b for row-major a (m x k), b (k x n), out (m x n).
///
/// The contraction index k advances in the outer loop, so each output element
/// accumulates its terms in ascending-k order; the inner j loop carries no
/// dependency and vectorizes.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = aik.mul_add(b_row[j], out_row[j]);
            }
        }
    }
}

pub fn transpose_into<F: Scalar>(src: &[F], dst: &mut [F], rows: usize, cols: usize) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut max = row[0];
    for &x in &row[1..] {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mut max = row[0];
    for &x in &row[1..] {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for &x in row {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

fn row_moments<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let inv_n = F::one() / F::from_f64(row.len() as f64);
    let mut mean = F::zero();
    for &x in row {
        mean += x;
    }
    mean = mean * inv_n;
    let mut var = F::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var = var * inv_n;
    (mean, F::one() / (var + eps).sqrt())
}

/// Tanh-form approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
fn gelu_tanh<F: Scalar>(x: F) -> F {
    let c0 = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c1 = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_tanh_deriv<F: Scalar>(x: F) -> F {
    let c0 = F::from_f64(0.797_884_560_802_865_4);
    let c1 = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (F::one() + three * c1 * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

// ---- parameters ----

pub type ParamId = usize;

/// Named persistent tensor with optimizer-relevant flags.
pub struct Param<F> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
    /// Whether decoupled weight decay applies (true for matrices, false for
    /// biases, norm affines, gains, and embeddings).
    pub decay: bool,
    pub trainable: bool,
}

/// Registry of model parameters. Registration order is the serialization
/// order, so construction must be deterministic.
#[derive(Default)]
pub struct ParamArena<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamArena<F> {
    pub fn new() -> Self {
        ParamArena {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<F>, decay: bool) -> ParamId {
        self.register_flagged(name, value, decay, true)
    }

    pub fn register_flagged(
        &mut self,
        name: &str,
        value: Tensor<F>,
        decay: bool,
        trainable: bool,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
            decay,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(
            self.params[id].value.shape(),
            value.shape(),
            "shape change for parameter {}",
            self.params[id].name
        );
        self.params[id].value = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Convert every parameter to another precision, preserving order and
    /// flags (used to build f64 replicas for gradient checking).
    pub fn cast<G: Scalar>(&self) -> ParamArena<G> {
        let mut out = ParamArena::new();
        for p in &self.params {
            out.register_flagged(&p.name, p.value.cast::<G>(), p.decay, p.trainable);
        }
        out
    }
}

/// Parameter-to-leaf mapping for one tape. Bind once per tape, before any
/// `mark`, so leaves survive per-sample resets.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, arena: &ParamArena<F>) -> Result<Binding> {
        let mut vars = Vec::with_capacity(arena.len());
        for (_, p) in arena.iter() {
            vars.push(tape.leaf_shared(Arc::clone(&p.value), p.trainable)?);
        }
        Ok(Binding { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    /// Pull accumulated leaf gradients out of the tape, one slot per
    /// parameter (None when a parameter was never touched).
    pub fn take_grads<F: Scalar>(&self, tape: &mut Tape<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|&v| tape.take_grad(v)).collect()
    }
}
