//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records coarse operations (matmul, layer norm, multi-head
//! attention, loss reductions) in execution order. Each op carries a
//! hand-written vector-Jacobian product, so a single backward sweep yields
//! gradients for every leaf created with `requires_grad`.

use crate::scalar::Scalar;
use crate::tensor::{gemm_into, gemm_panel, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    RowAffine { x: Var, mul: Var, add: Var, offset: T },
    GatedAdd { x: Var, y: Var, gate: Var },
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    AttnScores { q: Var, k: Var, heads: usize, scale: T },
    AttnMix { probs: Var, v: Var, heads: usize },
    HeadMean { probs: Var, heads: usize },
    Gather { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    Slice { x: Var, r0: usize, c0: usize },
    AddRowsAt { x: Var, y: Var, offset: usize },
    MeanOverRows(Var),
    MeanOverCols(Var),
    NormalizeL1 { x: Var, denom: T, clamped: bool },
    MseConst { x: Var, target: Matrix<T> },
    CosineAlign { x: Var, target: Matrix<T>, eps: T },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    clamp_events: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let a = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = a * (x + c * x * x * x);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * a * (one + T::of(3.0) * c * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, rows: usize, cols: usize) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), clamp_events: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine rows whose denominator was clamped during the forward pass.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = &self.nodes[v.0].value;
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `x + b` with `b` a `1×cols` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xm, bm) = (self.value(x), self.value(b));
        assert_eq!(bm.shape(), (1, xm.cols()), "add_row expects a 1×cols bias");
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for (o, &bb) in value.row_mut(r).iter_mut().zip(bm.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(value, Op::AddRow(x, b), ng)
    }

    /// `x ⊙ (offset + mul) + add`, with `mul` and `add` being `1×cols` rows.
    pub fn row_affine(&mut self, x: Var, mul: Var, add: Var, offset: T) -> Var {
        let (xm, mm, am) = (self.value(x), self.value(mul), self.value(add));
        assert_eq!(mm.shape(), (1, xm.cols()), "row_affine mul shape");
        assert_eq!(am.shape(), (1, xm.cols()), "row_affine add shape");
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for ((o, &m), &a) in value.row_mut(r).iter_mut().zip(mm.data()).zip(am.data()) {
                *o = *o * (offset + m) + a;
            }
        }
        let ng = self.ng(&[x, mul, add]);
        self.push(value, Op::RowAffine { x, mul, add, offset }, ng)
    }

    /// `x + gate ⊙ y`, with `gate` a `1×cols` row.
    pub fn gated_add(&mut self, x: Var, y: Var, gate: Var) -> Var {
        let (xm, ym, gm) = (self.value(x), self.value(y), self.value(gate));
        assert_eq!(xm.shape(), ym.shape(), "gated_add shapes");
        assert_eq!(gm.shape(), (1, xm.cols()), "gated_add gate shape");
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for ((o, &yy), &g) in value.row_mut(r).iter_mut().zip(ym.row(r)).zip(gm.data()) {
                *o += g * yy;
            }
        }
        let ng = self.ng(&[x, y, gate]);
        self.push(value, Op::GatedAdd { x, y, gate }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(&[x]);
        self.push(value, Op::Silu(x), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let n = T::of(cols as f64);
        let mut value = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::LayerNorm { x, rstd }, ng)
    }

    /// Multi-head attention probabilities `softmax(q_h k_hᵀ · scale)` stacked head-major
    /// into a `(heads·n)×m` matrix. With `causal`, key `j` is hidden from query `i` when `j > i`.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, causal: bool) -> Var {
        let (qm, km) = (self.value(q), self.value(k));
        let (n, d) = qm.shape();
        let m = km.rows();
        assert_eq!(km.cols(), d, "q/k width mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut value = Matrix::zeros(heads * n, m);
        for h in 0..heads {
            let out = &mut value.data_mut()[h * n * m..(h + 1) * n * m];
            gemm_panel(
                n,
                dh,
                m,
                scale,
                (&qm.data()[h * dh..], d as isize, 1),
                (&km.data()[h * dh..], 1, d as isize),
                T::zero(),
                (out, m as isize, 1),
            );
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                let visible = if causal { (i + 1).min(m) } else { m };
                let mx = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row[..visible].iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row[..visible].iter_mut() {
                    *v /= sum;
                }
                for v in row[visible..].iter_mut() {
                    *v = T::zero();
                }
            }
        }
        let ng = self.ng(&[q, k]);
        self.push(value, Op::AttnScores { q, k, heads, scale }, ng)
    }

    /// Per-head `probs_h · v_h`, concatenated back to `n×d`.
    pub fn attn_mix(&mut self, probs: Var, v: Var, heads: usize) -> Var {
        let (pm, vm) = (self.value(probs), self.value(v));
        let m = vm.rows();
        let d = vm.cols();
        let n = pm.rows() / heads;
        assert_eq!(pm.cols(), m, "probs/value length mismatch");
        let dh = d / heads;
        let mut value = Matrix::zeros(n, d);
        for h in 0..heads {
            gemm_panel(
                n,
                m,
                dh,
                T::one(),
                (&pm.data()[h * n * m..], m as isize, 1),
                (&vm.data()[h * dh..], d as isize, 1),
                T::zero(),
                (&mut value.data_mut()[h * dh..], d as isize, 1),
            );
        }
        let ng = self.ng(&[probs, v]);
        self.push(value, Op::AttnMix { probs, v, heads }, ng)
    }

    /// Average of stacked per-head attention matrices.
    pub fn head_mean(&mut self, probs: Var, heads: usize) -> Var {
        let pm = self.value(probs);
        let n = pm.rows() / heads;
        let m = pm.cols();
        let inv = T::one() / T::of(heads as f64);
        let mut value = Matrix::zeros(n, m);
        for h in 0..heads {
            for (o, &p) in value.data_mut().iter_mut().zip(&pm.data()[h * n * m..(h + 1) * n * m]) {
                *o += p * inv;
            }
        }
        let ng = self.ng(&[probs]);
        self.push(value, Op::HeadMean { probs, heads }, ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tm = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tm.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tm.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Vertical concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats);
        let ng = self.ng(parts);
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, x: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let value = self.value(x).block(r0, c0, rows, cols);
        let ng = self.ng(&[x]);
        self.push(value, Op::Slice { x, r0, c0 }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, rows: usize) -> Var {
        let cols = self.value(x).cols();
        self.slice(x, r0, 0, rows, cols)
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, cols: usize) -> Var {
        let rows = self.value(x).rows();
        self.slice(x, 0, c0, rows, cols)
    }

    /// `x` with `y` added onto rows `offset..offset + y.rows`.
    pub fn add_rows_at(&mut self, x: Var, y: Var, offset: usize) -> Var {
        let (xm, ym) = (self.value(x), self.value(y));
        assert_eq!(xm.cols(), ym.cols(), "add_rows_at width mismatch");
        assert!(offset + ym.rows() <= xm.rows(), "add_rows_at out of range");
        let mut value = xm.clone();
        for r in 0..ym.rows() {
            for (o, &v) in value.row_mut(offset + r).iter_mut().zip(ym.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(&[x, y]);
        self.push(value, Op::AddRowsAt { x, y, offset }, ng)
    }

    /// Average across rows: `1×cols`.
    pub fn mean_over_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let inv = T::one() / T::of(xm.rows() as f64);
        let mut value = Matrix::zeros(1, xm.cols());
        for r in 0..xm.rows() {
            for (o, &v) in value.data_mut().iter_mut().zip(xm.row(r)) {
                *o += v * inv;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::MeanOverRows(x), ng)
    }

    /// Average across columns, laid out as a `1×rows` row vector.
    pub fn mean_over_cols(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let inv = T::one() / T::of(xm.cols() as f64);
        let value = Matrix::from_fn(1, xm.rows(), |_, r| xm.row(r).iter().copied().sum::<T>() * inv);
        let ng = self.ng(&[x]);
        self.push(value, Op::MeanOverCols(x), ng)
    }

    /// `x / max(Σx, eps)`; the normalizer is differentiated through.
    pub fn normalize_l1(&mut self, x: Var, eps: T) -> Var {
        let xm = self.value(x);
        let s = xm.sum();
        let clamped = s <= eps;
        let denom = if clamped { eps } else { s };
        let value = xm.map(|v| v / denom);
        let ng = self.ng(&[x]);
        self.push(value, Op::NormalizeL1 { x, denom, clamped }, ng)
    }

    /// Mean squared difference against a constant target: `1×1`.
    pub fn mse_const(&mut self, x: Var, target: Matrix<T>) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.shape(), target.shape(), "mse target shape");
        let n = T::of(xm.len().max(1) as f64);
        let loss = xm.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let ng = self.ng(&[x]);
        self.push(Matrix::filled(1, 1, loss), Op::MseConst { x, target }, ng)
    }

    /// Negative mean row-wise cosine similarity against a constant target: `1×1`.
    /// Denominators below `eps` are clamped and counted in [`Tape::clamp_events`].
    pub fn cosine_align(&mut self, x: Var, target: Matrix<T>, eps: T) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.shape(), target.shape(), "cosine target shape");
        let rows = xm.rows();
        let mut total = T::zero();
        let mut clamps = 0;
        for r in 0..rows {
            let (a, b) = (xm.row(r), target.row(r));
            let dot: T = a.iter().zip(b).map(|(&u, &v)| u * v).sum();
            let na = a.iter().map(|&u| u * u).sum::<T>().sqrt();
            let nb = b.iter().map(|&u| u * u).sum::<T>().sqrt();
            let den = na * nb;
            if den < eps {
                clamps += 1;
            }
            total += dot / den.max(eps);
        }
        self.clamp_events += clamps;
        let loss = -total / T::of(rows.max(1) as f64);
        let ng = self.ng(&[x]);
        self.push(Matrix::filled(1, 1, loss), Op::CosineAlign { x, target, eps }, ng)
    }

    /// `Σ wᵢ·sᵢ` over `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += self.scalar(v) * w;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(Matrix::filled(1, 1, total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let slot = grad_slot(grads, *a, am.rows(), am.cols());
                    gemm_into(g, false, bm, true, slot, T::one(), T::one());
                }
                if self.wants(*b) {
                    let slot = grad_slot(grads, *b, bm.rows(), bm.cols());
                    gemm_into(am, true, g, false, slot, T::one(), T::one());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let (r, c) = self.shape_of(v);
                        grad_slot(grads, v, r, c).add_assign(g);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let (r, c) = self.shape_of(*a);
                    let slot = grad_slot(grads, *a, r, c);
                    for (o, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * *s;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    let (r, c) = self.shape_of(*x);
                    grad_slot(grads, *x, r, c).add_assign(g);
                }
                if self.wants(*b) {
                    let slot = grad_slot(grads, *b, 1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &gv) in slot.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RowAffine { x, mul, add, offset } => {
                let (xm, mm) = (self.value(*x), self.value(*mul));
                let cols = xm.cols();
                if self.wants(*x) {
                    let slot = grad_slot(grads, *x, xm.rows(), cols);
                    for r in 0..g.rows() {
                        for ((o, &gv), &m) in slot.row_mut(r).iter_mut().zip(g.row(r)).zip(mm.data()) {
                            *o += gv * (*offset + m);
                        }
                    }
                }
                if self.wants(*mul) {
                    let slot = grad_slot(grads, *mul, 1, cols);
                    for r in 0..g.rows() {
                        for ((o, &gv), &xv) in slot.data_mut().iter_mut().zip(g.row(r)).zip(xm.row(r)) {
                            *o += gv * xv;
                        }
                    }
                }
                if self.wants(*add) {
                    let slot = grad_slot(grads, *add, 1, cols);
                    for r in 0..g.rows() {
                        for (o, &gv) in slot.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::GatedAdd { x, y, gate } => {
                let (ym, gm) = (self.value(*y), self.value(*gate));
                if self.wants(*x) {
                    let (r, c) = self.shape_of(*x);
                    grad_slot(grads, *x, r, c).add_assign(g);
                }
                if self.wants(*y) {
                    let slot = grad_slot(grads, *y, ym.rows(), ym.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &gt) in slot.row_mut(r).iter_mut().zip(g.row(r)).zip(gm.data()) {
                            *o += gv * gt;
                        }
                    }
                }
                if self.wants(*gate) {
                    let slot = grad_slot(grads, *gate, 1, ym.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &yv) in slot.data_mut().iter_mut().zip(g.row(r)).zip(ym.row(r)) {
                            *o += gv * yv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xm = self.value(*x);
                    let slot = grad_slot(grads, *x, xm.rows(), xm.cols());
                    for ((o, &gv), &xv) in slot.data_mut().iter_mut().zip(g.data()).zip(xm.data()) {
                        *o += gv * gelu_parts(xv).1;
                    }
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let xm = self.value(*x);
                    let slot = grad_slot(grads, *x, xm.rows(), xm.cols());
                    for ((o, &gv), &xv) in slot.data_mut().iter_mut().zip(g.data()).zip(xm.data()) {
                        let s = sigmoid(xv);
                        *o += gv * s * (T::one() + xv * (T::one() - s));
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let n = T::of(cols as f64);
                    let slot = grad_slot(grads, *x, rows, cols);
                    for r in 0..rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mean_g = gr.iter().copied().sum::<T>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &gv), &yv) in slot.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += rstd[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::AttnScores { q, k, heads, scale } => {
                let (qm, km) = (self.value(*q), self.value(*k));
                let p = &node.value;
                let (n, d) = qm.shape();
                let m = km.rows();
                let dh = d / heads;
                let mut ds = vec![T::zero(); n * m];
                for h in 0..*heads {
                    let ph = &p.data()[h * n * m..(h + 1) * n * m];
                    let gh = &g.data()[h * n * m..(h + 1) * n * m];
                    for i in 0..n {
                        let (pr, gr) = (&ph[i * m..(i + 1) * m], &gh[i * m..(i + 1) * m]);
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &pv), &gv) in ds[i * m..(i + 1) * m].iter_mut().zip(pr).zip(gr) {
                            *o = pv * (gv - dot);
                        }
                    }
                    if self.wants(*q) {
                        let slot = grad_slot(grads, *q, n, d);
                        gemm_panel(
                            n,
                            m,
                            dh,
                            *scale,
                            (&ds, m as isize, 1),
                            (&km.data()[h * dh..], d as isize, 1),
                            T::one(),
                            (&mut slot.data_mut()[h * dh..], d as isize, 1),
                        );
                    }
                    if self.wants(*k) {
                        let slot = grad_slot(grads, *k, m, d);
                        gemm_panel(
                            m,
                            n,
                            dh,
                            *scale,
                            (&ds, 1, m as isize),
                            (&qm.data()[h * dh..], d as isize, 1),
                            T::one(),
                            (&mut slot.data_mut()[h * dh..], d as isize, 1),
                        );
                    }
                }
            }
            Op::AttnMix { probs, v, heads } => {
                let (pm, vm) = (self.value(*probs), self.value(*v));
                let (m, d) = vm.shape();
                let n = pm.rows() / heads;
                let dh = d / heads;
                for h in 0..*heads {
                    if self.wants(*probs) {
                        let slot = grad_slot(grads, *probs, pm.rows(), m);
                        gemm_panel(
                            n,
                            dh,
                            m,
                            T::one(),
                            (&g.data()[h * dh..], d as isize, 1),
                            (&vm.data()[h * dh..], 1, d as isize),
                            T::one(),
                            (&mut slot.data_mut()[h * n * m..], m as isize, 1),
                        );
                    }
                    if self.wants(*v) {
                        let slot = grad_slot(grads, *v, m, d);
                        gemm_panel(
                            m,
                            n,
                            dh,
                            T::one(),
                            (&pm.data()[h * n * m..], 1, m as isize),
                            (&g.data()[h * dh..], d as isize, 1),
                            T::one(),
                            (&mut slot.data_mut()[h * dh..], d as isize, 1),
                        );
                    }
                }
            }
            Op::HeadMean { probs, heads } => {
                if self.wants(*probs) {
                    let (rows, cols) = self.shape_of(*probs);
                    let inv = T::one() / T::of(*heads as f64);
                    let slot = grad_slot(grads, *probs, rows, cols);
                    let block = g.len();
                    for h in 0..*heads {
                        for (o, &gv) in slot.data_mut()[h * block..(h + 1) * block].iter_mut().zip(g.data()) {
                            *o += gv * inv;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let (rows, cols) = self.shape_of(*table);
                    let slot = grad_slot(grads, *table, rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gv) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape_of(p);
                    if self.wants(p) {
                        let slot = grad_slot(grads, p, rows, cols);
                        for (o, &gv) in slot.data_mut().iter_mut().zip(&g.data()[offset * cols..(offset + rows) * cols]) {
                            *o += gv;
                        }
                    }
                    offset += rows;
                }
            }
            Op::Slice { x, r0, c0 } => {
                if self.wants(*x) {
                    let (rows, cols) = self.shape_of(*x);
                    let slot = grad_slot(grads, *x, rows, cols);
                    for r in 0..g.rows() {
                        for (o, &gv) in slot.row_mut(r0 + r)[*c0..*c0 + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddRowsAt { x, y, offset } => {
                if self.wants(*x) {
                    let (r, c) = self.shape_of(*x);
                    grad_slot(grads, *x, r, c).add_assign(g);
                }
                if self.wants(*y) {
                    let (rows, cols) = self.shape_of(*y);
                    let slot = grad_slot(grads, *y, rows, cols);
                    slot.add_assign(&g.block(*offset, 0, rows, cols));
                }
            }
            Op::MeanOverRows(x) => {
                if self.wants(*x) {
                    let (rows, cols) = self.shape_of(*x);
                    let inv = T::one() / T::of(rows as f64);
                    let slot = grad_slot(grads, *x, rows, cols);
                    for r in 0..rows {
                        for (o, &gv) in slot.row_mut(r).iter_mut().zip(g.data()) {
                            *o += gv * inv;
                        }
                    }
                }
            }
            Op::MeanOverCols(x) => {
                if self.wants(*x) {
                    let (rows, cols) = self.shape_of(*x);
                    let inv = T::one() / T::of(cols as f64);
                    let slot = grad_slot(grads, *x, rows, cols);
                    for r in 0..rows {
                        let gv = g.get(0, r) * inv;
                        for o in slot.row_mut(r) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::NormalizeL1 { x, denom, clamped } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let slot = grad_slot(grads, *x, rows, cols);
                    if *clamped {
                        for (o, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                            *o += gv / *denom;
                        }
                    } else {
                        let gy: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                        for (o, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                            *o += (gv - gy) / *denom;
                        }
                    }
                }
            }
            Op::MseConst { x, target } => {
                if self.wants(*x) {
                    let xm = self.value(*x);
                    let coef = g.get(0, 0) * T::of(2.0) / T::of(xm.len().max(1) as f64);
                    let slot = grad_slot(grads, *x, xm.rows(), xm.cols());
                    for ((o, &a), &b) in slot.data_mut().iter_mut().zip(xm.data()).zip(target.data()) {
                        *o += coef * (a - b);
                    }
                }
            }
            Op::CosineAlign { x, target, eps } => {
                if self.wants(*x) {
                    let xm = self.value(*x);
                    let rows = xm.rows();
                    let coef = -g.get(0, 0) / T::of(rows.max(1) as f64);
                    let slot = grad_slot(grads, *x, rows, xm.cols());
                    for r in 0..rows {
                        let (a, b) = (xm.row(r), target.row(r));
                        let dot: T = a.iter().zip(b).map(|(&u, &v)| u * v).sum();
                        let na = a.iter().map(|&u| u * u).sum::<T>().sqrt();
                        let nb = b.iter().map(|&u| u * u).sum::<T>().sqrt();
                        let den = na * nb;
                        let out = slot.row_mut(r);
                        if den < *eps {
                            for (o, &bv) in out.iter_mut().zip(b) {
                                *o += coef * bv / *eps;
                            }
                        } else {
                            let cos = dot / den;
                            for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
                                *o += coef * (bv / den - cos * av / (na * na));
                            }
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        let slot = grad_slot(grads, v, 1, 1);
                        let cur = slot.get(0, 0);
                        slot.set(0, 0, cur + g.get(0, 0) * w);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` w.r.t. every entry of `x0`.
    fn numeric_grad(x0: &Matrix<f64>, f: &dyn Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-5;
        let mut out = Matrix::zeros(x0.rows(), x0.cols());
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x0: Matrix<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let f = |x: &Matrix<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let l = build(&mut t, v);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone(), true);
        let l = build(&mut t, v);
        let g = t.backward(l);
        let analytic = g.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let numeric = numeric_grad(&x0, &f);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    fn rand_m(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        Matrix::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn reduce(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let (r, c) = t.value(y).shape();
        t.mse_const(y, rand_m(r, c, seed))
    }

    #[test]
    fn matmul_and_bias_grads() {
        let w = rand_m(4, 3, 1);
        let b = rand_m(1, 3, 2);
        check(rand_m(5, 4, 3), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.matmul(x, wv);
            let y = t.add_row(y, bv);
            reduce(t, y, 9)
        });
        let x = rand_m(5, 4, 3);
        check(w.clone(), |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, wv);
            reduce(t, y, 9)
        });
    }

    #[test]
    fn elementwise_and_norm_grads() {
        check(rand_m(3, 6, 4), |t, x| {
            let y = t.layer_norm(x, 1e-5);
            let y = t.gelu(y);
            let y = t.silu(y);
            reduce(t, y, 10)
        });
        let shift = rand_m(1, 6, 5);
        check(rand_m(1, 6, 6), |t, m| {
            let x = t.constant(rand_m(3, 6, 7));
            let s = t.constant(shift.clone());
            let y = t.row_affine(x, m, s, 1.0);
            let z = t.gated_add(y, x, m);
            reduce(t, z, 11)
        });
    }

    #[test]
    fn attention_grads_causal_and_full() {
        for causal in [false, true] {
            let k0 = rand_m(5, 8, 21);
            let v0 = rand_m(5, 8, 22);
            check(rand_m(5, 8, 20), |t, q| {
                let k = t.constant(k0.clone());
                let v = t.constant(v0.clone());
                let p = t.attn_scores(q, k, 2, causal);
                let o = t.attn_mix(p, v, 2);
                reduce(t, o, 23)
            });
            let q0 = rand_m(5, 8, 24);
            check(k0.clone(), |t, k| {
                let q = t.constant(q0.clone());
                let p = t.attn_scores(q, k, 2, causal);
                let hm = t.head_mean(p, 2);
                reduce(t, hm, 25)
            });
            check(v0.clone(), |t, v| {
                let q = t.constant(q0.clone());
                let k = t.constant(k0.clone());
                let p = t.attn_scores(q, k, 2, causal);
                let o = t.attn_mix(p, v, 2);
                reduce(t, o, 26)
            });
        }
    }

    #[test]
    fn causal_rows_are_stochastic_and_masked() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(rand_m(4, 4, 1));
        let p = t.attn_scores(q, q, 2, true);
        let pm = t.value(p);
        for r in 0..pm.rows() {
            let i = r % 4;
            let s: f64 = pm.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(pm.row(r)[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn structural_op_grads() {
        check(rand_m(6, 3, 30), |t, x| {
            let a = t.slice(x, 1, 1, 3, 2);
            let b = t.gather(x, &[0, 5, 0]);
            let c = t.concat(&[b, x]);
            let d = t.add_rows_at(c, b, 2);
            let m1 = t.mean_over_rows(d);
            let m2 = t.mean_over_cols(a);
            let l1 = reduce(t, m1, 31);
            let l2 = reduce(t, m2, 32);
            let s = t.scale(l2, 0.5);
            t.weighted_sum(&[(l1, 1.0), (s, -2.0)])
        });
    }

    #[test]
    fn normalize_and_cosine_grads() {
        let pos = rand_m(1, 5, 40).map(|v| v.abs() + 0.1);
        check(pos, |t, x| {
            let y = t.normalize_l1(x, 1e-12);
            reduce(t, y, 41)
        });
        let target = rand_m(3, 4, 42);
        check(rand_m(3, 4, 43), |t, x| t.cosine_align(x, target.clone(), 1e-12));
    }

    #[test]
    fn cosine_clamps_zero_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Matrix::zeros(2, 3), true);
        let l = t.cosine_align(x, rand_m(2, 3, 1), 1e-12);
        assert_eq!(t.scalar(l), 0.0);
        assert_eq!(t.clamp_events(), 2);
        let g = t.backward(l);
        assert!(g.get(x).unwrap().is_finite());
    }
}
