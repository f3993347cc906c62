//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every value is a dense row-major matrix (`Array2`); vectors are 1 x d
//! rows and scalars are 1 x 1. Ops record their parents by node index, and
//! `backward` walks the tape once in reverse, accumulating exact gradients
//! for every node that transitively depends on a gradient leaf. The tape is
//! generic over `f32`/`f64`: training runs single precision, gradient
//! verification runs double precision on the same code path.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::error::{Result, XlmkError};

/// Scalar type the tape is generic over.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub type NodeId = usize;

enum Op<F: Scalar> {
    Leaf,
    /// C = A B
    MatMul(NodeId, NodeId),
    /// C = A B^T
    MatMulNT(NodeId, NodeId),
    /// C = A B^T with a shared constant B (no gradient ever flows into B).
    MatMulConstNT(NodeId, Arc<Array2<F>>),
    Add(NodeId, NodeId),
    /// Broadcast-add a 1 x d row to every row of a.
    AddRow(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Gelu(NodeId),
    /// Row-wise layer norm with learned gain/bias rows.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SoftmaxRows(NodeId),
    /// Select rows of `src` (embedding lookup / position select).
    Gather {
        src: NodeId,
        rows: Vec<usize>,
    },
    ColSlice {
        src: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Inverted dropout; the mask already carries the 1/keep scaling.
    Dropout {
        src: NodeId,
        mask: Array2<F>,
    },
    /// Mean over rows of (logsumexp(row) - row[target]).
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
    },
    /// Row-wise x / ||x||.
    L2NormalizeRows(NodeId),
    SumAll(NodeId),
}

struct Node<F: Scalar> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// One recorded forward computation. Build nodes, call [`Tape::backward`]
/// once, then read gradients by node id.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
    eps: F,
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
            consumed: false,
            eps: F::from_f64(1e-5),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is ever produced for it.
    pub fn constant(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value.t());
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn matmul_const_nt(&mut self, a: NodeId, b: Arc<Array2<F>>) -> NodeId {
        let value = self.nodes[a].value.dot(&b.t());
        let ng = self.needs(a);
        self.push(value, Op::MatMulConstNT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let value = &self.nodes[a].value + &self.nodes[row].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: F) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v * k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v.max(F::zero()));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(gelu_fwd);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = self.eps;
        let xv = &self.nodes[x].value;
        let mut value = Array2::zeros(xv.raw_dim());
        for (mut out, row) in value.rows_mut().into_iter().zip(xv.rows()) {
            let (mean, inv_std) = row_stats(&row, eps);
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv_std;
            }
        }
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let value = &value * g + b;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta }, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn gather(&mut self, src: NodeId, rows: Vec<usize>) -> NodeId {
        let sv = &self.nodes[src].value;
        let mut value = Array2::zeros((rows.len(), sv.ncols()));
        for (mut out, &r) in value.rows_mut().into_iter().zip(rows.iter()) {
            out.assign(&sv.row(r));
        }
        let ng = self.needs(src);
        self.push(value, Op::Gather { src, rows }, ng)
    }

    pub fn col_slice(&mut self, src: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.nodes[src]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let ng = self.needs(src);
        self.push(value, Op::ColSlice { src, start, end }, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("column concat");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts), ng)
    }

    /// Apply a precomputed inverted-dropout mask (entries 0 or 1/keep).
    pub fn dropout(&mut self, src: NodeId, mask: Array2<F>) -> NodeId {
        debug_assert_eq!(self.nodes[src].value.dim(), mask.dim());
        let value = &self.nodes[src].value * &mask;
        let ng = self.needs(src);
        self.push(value, Op::Dropout { src, mask }, ng)
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, max-stabilized.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits].value;
        debug_assert_eq!(lv.nrows(), targets.len());
        let mut total = F::zero();
        for (row, &t) in lv.rows().into_iter().zip(targets.iter()) {
            total = total + row_logsumexp(&row) - row[t];
        }
        let n = F::from_f64(targets.len() as f64);
        let value = Array2::from_elem((1, 1), total / n);
        let ng = self.needs(logits);
        self.push(value, Op::CrossEntropyRows { logits, targets }, ng)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for mut row in value.rows_mut() {
            let norm = row
                .iter()
                .fold(F::zero(), |acc, &v| acc + v * v)
                .sqrt()
                .max(F::from_f64(1e-12));
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::L2NormalizeRows(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Reverse pass from a scalar node seeded with `seed`. Returns one
    /// gradient slot per node (None for nodes outside the backward cone).
    /// A second call without a fresh forward fails with `GraphConsumed`.
    pub fn backward_seeded(
        &mut self,
        root: NodeId,
        seed: F,
    ) -> Result<Vec<Option<Array2<F>>>> {
        if self.consumed {
            return Err(XlmkError::GraphConsumed);
        }
        self.consumed = true;
        debug_assert_eq!(self.nodes[root].value.dim(), (1, 1));

        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), seed));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Ok(grads)
    }

    pub fn backward(&mut self, root: NodeId) -> Result<Vec<Option<Array2<F>>>> {
        self.backward_seeded(root, F::one())
    }

    fn propagate(&self, id: NodeId, grad: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = grad.dot(&self.nodes[*b].value.t());
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = self.nodes[*a].value.t().dot(grad);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    let da = grad.dot(&self.nodes[*b].value);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = grad.t().dot(&self.nodes[*a].value);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulConstNT(a, b) => {
                if self.needs(*a) {
                    let da = grad.dot(b.as_ref());
                    accumulate(grads, *a, da);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, grad.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, grad.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(grads, *a, grad.clone());
                }
                if self.needs(*row) {
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *row, summed);
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    accumulate(grads, *a, grad.mapv(|g| g * *k));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let da = ndarray::Zip::from(grad)
                        .and(&self.nodes[*a].value)
                        .map_collect(|&g, &x| if x > F::zero() { g } else { F::zero() });
                    accumulate(grads, *a, da);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let da = ndarray::Zip::from(grad)
                        .and(&self.nodes[*a].value)
                        .map_collect(|&g, &x| g * gelu_bwd(x));
                    accumulate(grads, *a, da);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let d = F::from_f64(xv.ncols() as f64);
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for ((row, dy), mut dxr) in xv
                    .rows()
                    .into_iter()
                    .zip(grad.rows())
                    .zip(dx.rows_mut())
                {
                    let (mean, inv_std) = row_stats(&row, self.eps);
                    // x_hat and dxhat = dy * gamma
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    let mut xhat = Vec::with_capacity(row.len());
                    for (j, (&v, &g)) in row.iter().zip(dy.iter()).enumerate() {
                        let xh = (v - mean) * inv_std;
                        let dxh = g * gv[[0, j]];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                        dgamma[[0, j]] += g * xh;
                        dbeta[[0, j]] += g;
                        xhat.push((xh, dxh));
                    }
                    for (o, (xh, dxh)) in dxr.iter_mut().zip(xhat) {
                        *o = inv_std * (dxh - sum_dxhat / d - xh * sum_dxhat_xhat / d);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for ((yr, dyr), mut dar) in y
                        .rows()
                        .into_iter()
                        .zip(grad.rows())
                        .zip(da.rows_mut())
                    {
                        let dot = yr
                            .iter()
                            .zip(dyr.iter())
                            .fold(F::zero(), |acc, (&y, &g)| acc + y * g);
                        for (o, (&y, &g)) in dar.iter_mut().zip(yr.iter().zip(dyr.iter())) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Gather { src, rows } => {
                if self.needs(*src) {
                    let sv = &self.nodes[*src].value;
                    let mut da = Array2::zeros(sv.raw_dim());
                    for (g_row, &r) in grad.rows().into_iter().zip(rows.iter()) {
                        let mut target = da.row_mut(r);
                        target += &g_row;
                    }
                    accumulate(grads, *src, da);
                }
            }
            Op::ColSlice { src, start, end } => {
                if self.needs(*src) {
                    let sv = &self.nodes[*src].value;
                    let mut da = Array2::zeros(sv.raw_dim());
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(grad);
                    accumulate(grads, *src, da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let w = self.nodes[p].value.ncols();
                    if self.needs(p) {
                        let dp = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Dropout { src, mask } => {
                if self.needs(*src) {
                    accumulate(grads, *src, grad * mask);
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                if self.needs(*logits) {
                    let lv = &self.nodes[*logits].value;
                    let scale = grad[[0, 0]] / F::from_f64(targets.len() as f64);
                    let mut da = Array2::zeros(lv.raw_dim());
                    for ((row, &t), mut dar) in lv
                        .rows()
                        .into_iter()
                        .zip(targets.iter())
                        .zip(da.rows_mut())
                    {
                        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let mut sum = F::zero();
                        for &v in row.iter() {
                            sum += (v - max).exp();
                        }
                        for (j, (o, &v)) in dar.iter_mut().zip(row.iter()).enumerate() {
                            let p = (v - max).exp() / sum;
                            let indicator = if j == t { F::one() } else { F::zero() };
                            *o = scale * (p - indicator);
                        }
                    }
                    accumulate(grads, *logits, da);
                }
            }
            Op::L2NormalizeRows(a) => {
                if self.needs(*a) {
                    let xv = &self.nodes[*a].value;
                    let yv = &self.nodes[id].value;
                    let mut da = Array2::zeros(xv.raw_dim());
                    for (((xr, yr), gr), mut dar) in xv
                        .rows()
                        .into_iter()
                        .zip(yv.rows())
                        .zip(grad.rows())
                        .zip(da.rows_mut())
                    {
                        let norm = xr
                            .iter()
                            .fold(F::zero(), |acc, &v| acc + v * v)
                            .sqrt()
                            .max(F::from_f64(1e-12));
                        let dot = yr
                            .iter()
                            .zip(gr.iter())
                            .fold(F::zero(), |acc, (&y, &g)| acc + y * g);
                        for (o, (&y, &g)) in dar.iter_mut().zip(yr.iter().zip(gr.iter())) {
                            *o = (g - y * dot) / norm;
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let da = Array2::from_elem(self.nodes[*a].value.raw_dim(), grad[[0, 0]]);
                    accumulate(grads, *a, da);
                }
            }
        }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], id: NodeId, delta: Array2<F>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

fn row_stats<F: Scalar>(row: &ndarray::ArrayView1<F>, eps: F) -> (F, F) {
    let d = F::from_f64(row.len() as f64);
    let mean = row.sum() / d;
    let var = row
        .iter()
        .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
        / d;
    (mean, F::one() / (var + eps).sqrt())
}

fn row_logsumexp<F: Scalar>(row: &ndarray::ArrayView1<F>) -> F {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let sum = row
        .iter()
        .fold(F::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let c = F::from_f64(GELU_COEF);
    let k = F::from_f64(SQRT_2_OVER_PI);
    let u = k * (x + c * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let c = F::from_f64(GELU_COEF);
    let k = F::from_f64(SQRT_2_OVER_PI);
    let three = F::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use crate::rng::substream;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences over every entry of every listed leaf.
    fn finite_diff_check(
        build: impl Fn(&[Array2<f64>], &mut Tape<f64>) -> NodeId,
        leaves: Vec<Array2<f64>>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(&leaves, &mut tape);
        let grads = tape.backward(root).unwrap();

        // Leaf ids are 0..leaves.len() by construction in `build`.
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[li]
                .clone()
                .unwrap_or_else(|| Array2::zeros(leaf.raw_dim()));
            for i in 0..leaf.nrows() {
                for j in 0..leaf.ncols() {
                    let mut plus = leaves.clone();
                    plus[li][[i, j]] += h;
                    let mut t1 = Tape::new();
                    let r1 = build(&plus, &mut t1);
                    let mut minus = leaves.clone();
                    minus[li][[i, j]] -= h;
                    let mut t2 = Tape::new();
                    let r2 = build(&minus, &mut t2);
                    let fd = (t1.scalar(r1) - t2.scalar(r2)) / (2.0 * h);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (a - fd).abs() / denom < tol,
                        "leaf {li} [{i},{j}]: analytic {a}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn sum_of_leaf_gives_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(array![[1.0_f64, 2.0], [3.0, 4.0]]);
        let other = tape.param(array![[5.0_f64]]);
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[w].clone().unwrap(), array![[1.0, 1.0], [1.0, 1.0]]);
        assert!(grads[other].is_none());
    }

    #[test]
    fn double_backward_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(array![[1.0_f64]]);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(XlmkError::GraphConsumed)
        ));
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = substream(1, "fd.matmul");
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 5);
        let c = random_matrix(&mut rng, 3, 5);
        finite_diff_check(
            |leaves, t| {
                let a = t.param(leaves[0].clone());
                let b = t.param(leaves[1].clone());
                let c = t.param(leaves[2].clone());
                let ab = t.matmul(a, b);
                let r = t.relu(ab);
                let s = t.matmul_nt(r, c); // (3x5)(3x5)^T -> 3x3
                let g = t.gelu(s);
                t.sum_all(g)
            },
            vec![a, b, c],
            1e-6,
        );
    }

    #[test]
    fn layer_norm_softmax_ce_match_finite_differences() {
        let mut rng = substream(2, "fd.ln");
        let x = random_matrix(&mut rng, 4, 6);
        let gamma = random_matrix(&mut rng, 1, 6);
        let beta = random_matrix(&mut rng, 1, 6);
        finite_diff_check(
            |leaves, t| {
                let x = t.param(leaves[0].clone());
                let g = t.param(leaves[1].clone());
                let b = t.param(leaves[2].clone());
                let ln = t.layer_norm(x, g, b);
                let sm = t.softmax_rows(ln);
                let sc = t.scale(sm, 3.0);
                t.cross_entropy_rows(sc, vec![0, 2, 1, 5])
            },
            vec![x, gamma, beta],
            1e-6,
        );
    }

    #[test]
    fn gather_slice_concat_match_finite_differences() {
        let mut rng = substream(3, "fd.gather");
        let table = random_matrix(&mut rng, 6, 8);
        let row = random_matrix(&mut rng, 1, 8);
        finite_diff_check(
            |leaves, t| {
                let table = t.param(leaves[0].clone());
                let row = t.param(leaves[1].clone());
                let gathered = t.gather(table, vec![0, 3, 3, 5]);
                let shifted = t.add_row(gathered, row);
                let left = t.col_slice(shifted, 0, 4);
                let right = t.col_slice(shifted, 4, 8);
                let swapped = t.concat_cols(vec![right, left]);
                let sm = t.softmax_rows(swapped);
                t.cross_entropy_rows(sm, vec![1, 0, 7, 3])
            },
            vec![table, row],
            1e-6,
        );
    }

    #[test]
    fn const_matmul_blocks_gradients_into_the_constant() {
        let mut rng = substream(4, "fd.const");
        let zq = random_matrix(&mut rng, 1, 8);
        let queue = Arc::new(random_matrix(&mut rng, 5, 8));
        let queue2 = queue.clone();
        finite_diff_check(
            move |leaves, t| {
                let zq = t.param(leaves[0].clone());
                let logits = t.matmul_const_nt(zq, queue2.clone());
                t.cross_entropy_rows(logits, vec![2])
            },
            vec![zq],
            1e-6,
        );
        // The constant never gets a gradient slot.
        let mut tape = Tape::new();
        let a = tape.param(random_matrix(&mut rng, 1, 8));
        let l = tape.matmul_const_nt(a, queue);
        let loss = tape.sum_all(l);
        let grads = tape.backward(loss).unwrap();
        assert!(grads[a].is_some());
    }

    #[test]
    fn l2_normalize_matches_finite_differences() {
        let mut rng = substream(5, "fd.l2");
        let x = random_matrix(&mut rng, 3, 6);
        finite_diff_check(
            |leaves, t| {
                let x = t.param(leaves[0].clone());
                let n = t.l2_normalize_rows(x);
                let s = t.softmax_rows(n);
                t.cross_entropy_rows(s, vec![0, 1, 2])
            },
            vec![x],
            1e-6,
        );
    }

    #[test]
    fn dropout_mask_is_applied_in_both_directions() {
        let mut tape = Tape::new();
        let x = tape.param(array![[2.0_f64, 4.0], [6.0, 8.0]]);
        let mask = array![[0.0, 2.0], [2.0, 0.0]];
        let d = tape.dropout(x, mask.clone());
        assert_eq!(tape.value(d), &array![[0.0, 8.0], [12.0, 0.0]]);
        let loss = tape.sum_all(d);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[x].clone().unwrap(), mask);
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let logits = tape.param(array![[1000.0_f64, 0.0, -1000.0]]);
        let loss = tape.cross_entropy_rows(logits, vec![0]);
        let v = tape.scalar(loss);
        assert!(v.is_finite());
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = substream(9, "det");
            let x = random_matrix(&mut rng, 5, 7);
            let w = random_matrix(&mut rng, 7, 7);
            let mut tape = Tape::new();
            let xn = tape.param(x);
            let wn = tape.param(w);
            let y = tape.matmul(xn, wn);
            let s = tape.softmax_rows(y);
            let loss = tape.cross_entropy_rows(s, vec![0, 1, 2, 3, 4]);
            let grads = tape.backward(loss).unwrap();
            (grads[wn].clone().unwrap(), grads[xn].clone().unwrap())
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }
}
