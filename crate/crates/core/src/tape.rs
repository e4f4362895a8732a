//! Reverse-mode automatic differentiation over a small fixed operator set.
//!
//! The whole network (embedding sums, masked attention, rotary rotation,
//! expert routing, contrastive losses) is expressed in the primitives below,
//! which keeps the gradient core small enough to audit and to verify against
//! central finite differences.

use std::rc::Rc;

use crate::tensor::{dot, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-6;
const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a length-D vector to every row of an (L, D) matrix.
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// `a @ b^T` where `b` is (n, k).
    MatmulTransB(NodeId, NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// out[idx[i]] += a[i]; the output row count is fixed at build time.
    ScatterAddRows(NodeId, Rc<Vec<usize>>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Rc<Vec<NodeId>>),
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// Row-wise layer norm with gain and bias vectors.
    LayerNorm(NodeId, NodeId, NodeId),
    /// Row-wise softmax over positions where the mask is true; the rest get 0.
    SoftmaxMaskedRows(NodeId, Rc<Vec<bool>>),
    /// Pairwise rotary rotation, one shared angle set per row.
    Rope(NodeId, Rc<Vec<usize>>),
    /// Row i of the matrix scaled by element i of a length-L vector.
    ScaleRows(NodeId, NodeId),
    /// Each row divided by its own sum.
    NormalizeRows(NodeId),
    MeanElems(NodeId),
    /// out_i = logsumexp(pos_i, neg_1..neg_m) - pos_i, the per-positive
    /// sampled-softmax loss against a shared negative pool.
    SharedNoiseNce(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A computation tape; build the graph through the methods, then call
/// [`Tape::backward`] from a scalar root.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x -= y;
        }
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        let c = v.cols();
        debug_assert_eq!(bv.len(), c);
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&bv) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_trans_b(self.value(b));
        self.push(Op::MatmulTransB(a, b), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let src = self.value(a);
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::from_vec(&[idx.len(), c], data);
        self.push(Op::GatherRows(a, idx), v)
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>, rows: usize) -> NodeId {
        let src = self.value(a);
        let c = src.cols();
        debug_assert_eq!(src.rows(), idx.len());
        let mut v = Tensor::zeros(&[rows, c]);
        for (r, &i) in idx.iter().enumerate() {
            for (x, y) in v.row_mut(i).iter_mut().zip(src.row(r)) {
                *x += y;
            }
        }
        self.push(Op::ScatterAddRows(a, idx), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        let rows = src.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(&[rows, len], data);
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in &parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::from_vec(&[rows, total], data);
        self.push(Op::ConcatCols(Rc::new(parts)), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x = gelu(*x);
        }
        self.push(Op::Gelu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data.iter_mut() {
            *x = sigmoid(*x);
        }
        self.push(Op::Sigmoid(a), v)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let src = self.value(a);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let c = src.cols();
        let mut v = src.clone();
        for r in 0..src.rows() {
            let row = v.row_mut(r);
            let (mu, inv_sigma) = row_norm_stats(row);
            for (j, x) in row.iter_mut().enumerate() {
                *x = g[j] * ((*x - mu) * inv_sigma) + b[j];
            }
        }
        debug_assert_eq!(g.len(), c);
        self.push(Op::LayerNorm(a, gain, bias), v)
    }

    pub fn softmax_masked_rows(&mut self, a: NodeId, mask: Rc<Vec<bool>>) -> NodeId {
        let src = self.value(a);
        let (rows, c) = (src.rows(), src.cols());
        debug_assert_eq!(mask.len(), rows * c);
        let mut v = src.clone();
        for r in 0..rows {
            let m = &mask[r * c..(r + 1) * c];
            let row = v.row_mut(r);
            let mut max = NEG_INF;
            for (x, &ok) in row.iter().zip(m) {
                if ok && *x > max {
                    max = *x;
                }
            }
            let mut sum = 0.0;
            for (x, &ok) in row.iter_mut().zip(m) {
                if ok {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxMaskedRows(a, mask), v)
    }

    pub fn rope(&mut self, a: NodeId, session_indices: Rc<Vec<usize>>) -> NodeId {
        let src = self.value(a);
        debug_assert_eq!(src.rows(), session_indices.len());
        let mut v = src.clone();
        rope_apply(&mut v, &session_indices, 1.0);
        self.push(Op::Rope(a, session_indices), v)
    }

    pub fn scale_rows(&mut self, a: NodeId, g: NodeId) -> NodeId {
        let gv = self.value(g).data.clone();
        let mut v = self.value(a).clone();
        debug_assert_eq!(v.rows(), gv.len());
        for (r, &s) in gv.iter().enumerate() {
            for x in v.row_mut(r) {
                *x *= s;
            }
        }
        self.push(Op::ScaleRows(a, g), v)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let s: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(Op::NormalizeRows(a), v)
    }

    pub fn mean_elems(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let m = src.data.iter().sum::<f64>() / src.len() as f64;
        self.push(Op::MeanElems(a), Tensor::scalar(m))
    }

    pub fn shared_noise_nce(&mut self, pos: NodeId, neg: NodeId) -> NodeId {
        let p = &self.value(pos).data;
        let n = &self.value(neg).data;
        let mut out = Vec::with_capacity(p.len());
        for &s in p {
            out.push(lse_with_pool(s, n) - s);
        }
        let v = Tensor::from_vec(&[out.len()], out);
        self.push(Op::SharedNoiseNce(pos, neg), v)
    }

    /// Backpropagate from a scalar root; returns one gradient slot per node.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.value(root).len(), 1);
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate_parents(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let mut ga = g.clone();
                for (x, y) in ga.data.iter_mut().zip(&self.value(*b).data) {
                    *x *= y;
                }
                let mut gb = g.clone();
                for (x, y) in gb.data.iter_mut().zip(&self.value(*a).data) {
                    *x *= y;
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                let c = g.cols();
                let mut gb = Tensor::zeros(&[c]);
                for r in 0..g.rows() {
                    for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(grads, *b, gb);
            }
            Op::Matmul(a, b) => {
                acc(grads, *a, g.matmul_trans_b(self.value(*b)));
                acc(grads, *b, self.value(*a).matmul_trans_a(g));
            }
            Op::MatmulTransB(a, b) => {
                acc(grads, *a, g.matmul(self.value(*b)));
                acc(grads, *b, g.matmul_trans_a(self.value(*a)));
            }
            Op::GatherRows(a, idx) => {
                let c = g.cols();
                let mut ga = Tensor::zeros(&self.value(*a).shape);
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                debug_assert_eq!(c, ga.cols());
                acc(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.cols();
                let mut ga = Tensor::zeros(&[idx.len(), c]);
                for (r, &i) in idx.iter().enumerate() {
                    ga.row_mut(r).copy_from_slice(g.row(i));
                }
                acc(grads, *a, ga);
            }
            Op::SliceCols(a, start, len) => {
                let mut ga = Tensor::zeros(&self.value(*a).shape);
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts.iter() {
                    let len = self.value(p).cols();
                    let mut gp = Tensor::zeros(&self.value(p).shape);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[start..start + len]);
                    }
                    acc(grads, p, gp);
                    start += len;
                }
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                for (x, &inp) in ga.data.iter_mut().zip(&self.value(*a).data) {
                    *x *= gelu_grad(inp);
                }
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (x, &y) in ga.data.iter_mut().zip(&self.value(id).data) {
                    *x *= y * (1.0 - y);
                }
                acc(grads, *a, ga);
            }
            Op::LayerNorm(a, gain, bias) => {
                let src = self.value(*a);
                let gv = &self.value(*gain).data;
                let c = src.cols();
                let mut ga = Tensor::zeros(&src.shape);
                let mut ggain = Tensor::zeros(&[c]);
                let mut gbias = Tensor::zeros(&[c]);
                for r in 0..src.rows() {
                    let x = src.row(r);
                    let dy = g.row(r);
                    let (mu, inv_sigma) = row_norm_stats(x);
                    let xhat: Vec<f64> = x.iter().map(|&v| (v - mu) * inv_sigma).collect();
                    let dxhat: Vec<f64> =
                        dy.iter().zip(gv).map(|(&d, &gg)| d * gg).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    let out = ga.row_mut(r);
                    for j in 0..c {
                        out[j] = inv_sigma * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        ggain.data[j] += dy[j] * xhat[j];
                        gbias.data[j] += dy[j];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *gain, ggain);
                acc(grads, *bias, gbias);
            }
            Op::SoftmaxMaskedRows(a, _mask) => {
                let y = self.value(id);
                let c = y.cols();
                let mut ga = Tensor::zeros(&y.shape);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    let out = ga.row_mut(r);
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - inner);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Rope(a, session_indices) => {
                let mut ga = g.clone();
                rope_apply(&mut ga, session_indices, -1.0);
                acc(grads, *a, ga);
            }
            Op::ScaleRows(a, gate) => {
                let gatev = &self.value(*gate).data;
                let av = self.value(*a);
                let mut ga = g.clone();
                let mut ggate = Tensor::zeros(&[gatev.len()]);
                for r in 0..g.rows() {
                    ggate.data[r] = dot(av.row(r), g.row(r));
                    for x in ga.row_mut(r) {
                        *x *= gatev[r];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *gate, ggate);
            }
            Op::NormalizeRows(a) => {
                let y = self.value(id);
                let src = self.value(*a);
                let mut ga = Tensor::zeros(&src.shape);
                for r in 0..src.rows() {
                    let s: f64 = src.row(r).iter().sum();
                    let inner = dot(y.row(r), g.row(r));
                    let out = ga.row_mut(r);
                    for (j, x) in out.iter_mut().enumerate() {
                        *x = (g.row(r)[j] - inner) / s;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::MeanElems(a) => {
                let n = self.value(*a).len();
                let gv = g.item() / n as f64;
                let mut ga = Tensor::zeros(&self.value(*a).shape);
                for x in ga.data.iter_mut() {
                    *x = gv;
                }
                acc(grads, *a, ga);
            }
            Op::SharedNoiseNce(pos, neg) => {
                let p = &self.value(*pos).data;
                let n = &self.value(*neg).data;
                let mut gpos = Tensor::zeros(&self.value(*pos).shape);
                let mut gneg = Tensor::zeros(&self.value(*neg).shape);
                for (i, &s) in p.iter().enumerate() {
                    let gi = g.data[i];
                    let lse = lse_with_pool(s, n);
                    let self_w = (s - lse).exp();
                    gpos.data[i] += gi * (self_w - 1.0);
                    for (j, &nv) in n.iter().enumerate() {
                        gneg.data[j] += gi * (nv - lse).exp();
                    }
                }
                acc(grads, *pos, gpos);
                acc(grads, *neg, gneg);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

/// logsumexp over `self_score` plus the shared pool, stabilized by the max.
fn lse_with_pool(self_score: f64, pool: &[f64]) -> f64 {
    let mut m = self_score;
    for &v in pool {
        if v > m {
            m = v;
        }
    }
    let mut s = (self_score - m).exp();
    for &v in pool {
        s += (v - m).exp();
    }
    m + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place rotary rotation; `sign` = -1 applies the inverse rotation.
fn rope_apply(t: &mut Tensor, session_indices: &[usize], sign: f64) {
    let hd = t.cols();
    debug_assert_eq!(hd % 2, 0);
    let half = hd / 2;
    for (r, &s) in session_indices.iter().enumerate() {
        let row = t.row_mut(r);
        for j in 0..half {
            let theta = crate::model::rope::rope_angle(j, hd) * s as f64 * sign;
            let (sin, cos) = theta.sin_cos();
            let x = row[2 * j];
            let y = row[2 * j + 1];
            row[2 * j] = x * cos - y * sin;
            row[2 * j + 1] = x * sin + y * cos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of d(scalar out)/d(leaf) for a graph builder.
    fn fd_check<F>(build: F, leaves: Vec<Tensor>, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[ids[li]]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&leaf.shape));
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let ids2: Vec<NodeId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data[k] += delta;
                            }
                            t2.leaf(t)
                        })
                        .collect();
                    let r = build(&mut t2, &ids2);
                    t2.value(r).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data[k];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "leaf {} coord {}: analytic {} vs fd {}",
                    li,
                    k,
                    a,
                    fd
                );
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn fd_elementwise_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[3, 2]);
        fd_check(
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let s = t.mul(m, ids[2]);
                let g = t.gelu(s);
                t.mean_elems(g)
            },
            vec![a, b, c],
            1e-6,
        );
    }

    #[test]
    fn fd_layer_norm_and_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        fd_check(
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2]);
                let s = t.sigmoid(ln);
                t.mean_elems(s)
            },
            vec![x, g, b],
            1e-5,
        );
    }

    #[test]
    fn fd_masked_softmax_attention_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[4, 4]);
        let k = rand_tensor(&mut rng, &[4, 4]);
        let v = rand_tensor(&mut rng, &[4, 4]);
        // causal mask
        let mut mask = vec![false; 16];
        for i in 0..4 {
            for j in 0..=i {
                mask[i * 4 + j] = true;
            }
        }
        let mask = Rc::new(mask);
        fd_check(
            move |t, ids| {
                let scores = t.matmul_trans_b(ids[0], ids[1]);
                let w = t.softmax_masked_rows(scores, mask.clone());
                let out = t.matmul(w, ids[2]);
                t.mean_elems(out)
            },
            vec![q, k, v],
            1e-6,
        );
    }

    #[test]
    fn fd_gather_scatter_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = rand_tensor(&mut rng, &[5, 4]);
        let idx = Rc::new(vec![0usize, 3, 3, 1]);
        let back = Rc::new(vec![2usize, 0, 1, 2]);
        fd_check(
            move |t, ids| {
                let g = t.gather_rows(ids[0], idx.clone());
                let left = t.slice_cols(g, 0, 2);
                let right = t.slice_cols(g, 2, 2);
                let cat = t.concat_cols(vec![right, left]);
                let sc = t.scatter_add_rows(cat, back.clone(), 3);
                let sg = t.sigmoid(sc);
                t.mean_elems(sg)
            },
            vec![table],
            1e-6,
        );
    }

    #[test]
    fn fd_rope_scale_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let gates = Tensor::from_vec(&[3], vec![0.3, 0.9, 0.5]);
        let sess = Rc::new(vec![1usize, 1, 2]);
        fd_check(
            move |t, ids| {
                let r = t.rope(ids[0], sess.clone());
                let s = t.scale_rows(r, ids[1]);
                let sg = t.sigmoid(s);
                let n = t.normalize_rows(sg);
                t.mean_elems(n)
            },
            vec![x, gates],
            1e-6,
        );
    }

    #[test]
    fn fd_shared_noise_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos = rand_tensor(&mut rng, &[3]);
        let neg = rand_tensor(&mut rng, &[5]);
        fd_check(
            |t, ids| {
                let l = t.shared_noise_nce(ids[0], ids[1]);
                t.mean_elems(l)
            },
            vec![pos, neg],
            1e-6,
        );
    }

    #[test]
    fn nce_symmetric_case_is_ln2() {
        let mut t = Tape::new();
        let pos = t.leaf(Tensor::from_vec(&[1], vec![0.0]));
        let neg = t.leaf(Tensor::from_vec(&[1], vec![0.0]));
        let l = t.shared_noise_nce(pos, neg);
        assert!((t.value(l).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 6]);
        let sess = vec![3usize, 5];
        let mut y = x.clone();
        rope_apply(&mut y, &sess, 1.0);
        rope_apply(&mut y, &sess, -1.0);
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
