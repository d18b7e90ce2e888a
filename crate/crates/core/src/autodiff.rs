//! Minimal reverse-mode tape over dense `f64` matrices.
//!
//! Forward values are computed eagerly as nodes are appended; `backward`
//! walks the tape once in reverse and accumulates gradients. Scalars are
//! 1x1 matrices. The op set is exactly what the graph encoder, attention
//! encoders, and loss terms need — nothing speculative.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::graphs::SparseGraph;
use crate::linalg::Mat;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a trainable parameter (stable across tapes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op {
    /// Constant or parameter leaf. Parameters carry their id so gradients
    /// can be collected per parameter after backward.
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    /// (n, d) + broadcast (1, d)
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// Sparse-dense product `graph * rhs`.
    SpMm { graph: Rc<SparseGraph>, rhs: NodeId },
    GatherRows { src: NodeId, rows: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    SliceCols { src: NodeId, start: usize, len: usize },
    Transpose(NodeId),
    Relu(NodeId),
    /// Row-wise softmax; pair with an additive mask of 0 / -inf entries
    /// for causal attention.
    SoftmaxRows(NodeId),
    /// Sum over rows of the L2 norm of each row (scalar output).
    RowL2Sum(NodeId),
    /// Cross-entropy of `target` under softmax over a (1, v) logit row.
    CrossEntropy { logits: NodeId, target: usize },
    /// `-log(1 - p_target)` under the same softmax.
    ComplementNll { logits: NodeId, target: usize },
    /// Literal `1 - p_target` penalty (ablation variant).
    ComplementLinear { logits: NodeId, target: usize },
    AddN(Vec<NodeId>),
}

struct Node {
    value: Mat,
    op: Op,
}

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

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, id: ParamId, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, _) = self.value(row).shape();
        assert_eq!(r, 1, "add_row expects a (1, d) bias");
        let mut v = self.value(a).clone();
        let bias = self.value(row).row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(bias.iter()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn spmm(&mut self, graph: Rc<SparseGraph>, rhs: NodeId) -> NodeId {
        let v = graph.spmm(self.value(rhs));
        self.push(v, Op::SpMm { graph, rhs })
    }

    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(src).gather_rows(rows);
        self.push(v, Op::GatherRows { src, rows: rows.to_vec() })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).concat_cols(self.value(b));
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.value(src);
        let mut v = Mat::zeros(s.rows(), len);
        for r in 0..s.rows() {
            v.row_mut(r).copy_from_slice(&s.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { src, start, len })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a);
        let mut v = Mat::zeros(s.rows(), s.cols());
        for r in 0..s.rows() {
            let row = s.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out = v.row_mut(r);
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn row_l2_sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a);
        let total: f64 = (0..s.rows()).map(|r| crate::linalg::l2_norm(s.row(r))).sum();
        self.push(Mat::from_vec(1, 1, vec![total]), Op::RowL2Sum(a))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let row = self.logit_row(logits, target);
        let loss = log_sum_exp(&row) - row[target];
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy { logits, target })
    }

    /// `-log(1 - softmax(logits)[target])`, computed stably as
    /// `lse(all) - lse(all but target)`.
    pub fn complement_nll(&mut self, logits: NodeId, target: usize) -> NodeId {
        let row = self.logit_row(logits, target);
        let rest: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, &x)| x)
            .collect();
        assert!(!rest.is_empty(), "complement_nll needs vocabulary size >= 2");
        let loss = log_sum_exp(&row) - log_sum_exp(&rest);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::ComplementNll { logits, target })
    }

    /// Literal `1 - softmax(logits)[target]` penalty.
    pub fn complement_linear(&mut self, logits: NodeId, target: usize) -> NodeId {
        let row = self.logit_row(logits, target);
        let p = softmax(&row)[target];
        self.push(Mat::from_vec(1, 1, vec![1.0 - p]), Op::ComplementLinear { logits, target })
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add_n needs at least one term");
        let mut v = self.value(terms[0]).clone();
        for t in &terms[1..] {
            v.add_assign(self.value(*t));
        }
        self.push(v, Op::AddN(terms.to_vec()))
    }

    fn logit_row(&self, logits: NodeId, target: usize) -> Vec<f64> {
        let m = self.value(logits);
        assert_eq!(m.rows(), 1, "loss terms expect a (1, v) logit row");
        assert!(target < m.cols(), "target index out of vocabulary");
        m.row(0).to_vec()
    }

    /// Runs backpropagation from a scalar node and returns the gradient of
    /// every parameter leaf that participated.
    pub fn backward(&self, loss: NodeId) -> BTreeMap<ParamId, Mat> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g);
                    let mut rg = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in rg.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, &rg);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate_scaled(&mut grads, *b, &g, -1.0);
                }
                Op::Scale(a, s) => {
                    accumulate_scaled(&mut grads, *a, &g, *s);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value.transpose());
                    let gb = self.nodes[a.0].value.transpose().matmul(&g);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::SpMm { graph, rhs } => {
                    let gr = graph.spmm_transpose(&g);
                    accumulate(&mut grads, *rhs, &gr);
                }
                Op::GatherRows { src, rows } => {
                    let sv = &self.nodes[src.0].value;
                    let mut gs = Mat::zeros(sv.rows(), sv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &x) in gs.row_mut(r).iter_mut().zip(g.row(i).iter()) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *src, &gs);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a.0].value.cols();
                    let mut ga = Mat::zeros(g.rows(), ac);
                    let mut gb = Mat::zeros(g.rows(), g.cols() - ac);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::SliceCols { src, start, len } => {
                    let sv = &self.nodes[src.0].value;
                    let mut gs = Mat::zeros(sv.rows(), sv.cols());
                    for r in 0..g.rows() {
                        gs.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *src, &gs);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, &g.transpose());
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(av.data().iter()) {
                        if x <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[i].value;
                    let mut ga = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r).iter()).map(|(x, y)| x * y).sum();
                        for ((o, &pv), &gv) in
                            ga.row_mut(r).iter_mut().zip(p.row(r).iter()).zip(g.row(r).iter())
                        {
                            *o = pv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::RowL2Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    let gs = g.get(0, 0);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let norm = crate::linalg::l2_norm(av.row(r));
                        if norm > 0.0 {
                            for (o, &x) in ga.row_mut(r).iter_mut().zip(av.row(r).iter()) {
                                *o = gs * x / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::CrossEntropy { logits, target } => {
                    let row = self.nodes[logits.0].value.row(0);
                    let p = softmax(row);
                    let gs = g.get(0, 0);
                    let mut gl = Mat::zeros(1, row.len());
                    for (j, o) in gl.row_mut(0).iter_mut().enumerate() {
                        *o = gs * (p[j] - if j == *target { 1.0 } else { 0.0 });
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::ComplementNll { logits, target } => {
                    // d/dl_j [lse(all) - lse(all\t)] = p_j - q_j, q_t = 0
                    let row = self.nodes[logits.0].value.row(0);
                    let p = softmax(row);
                    let denom = 1.0 - p[*target];
                    let gs = g.get(0, 0);
                    let mut gl = Mat::zeros(1, row.len());
                    for (j, o) in gl.row_mut(0).iter_mut().enumerate() {
                        let q = if j == *target { 0.0 } else { p[j] / denom };
                        *o = gs * (p[j] - q);
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::ComplementLinear { logits, target } => {
                    // d/dl_j (1 - p_t) = -p_t (delta_tj - p_j)
                    let row = self.nodes[logits.0].value.row(0);
                    let p = softmax(row);
                    let pt = p[*target];
                    let gs = g.get(0, 0);
                    let mut gl = Mat::zeros(1, row.len());
                    for (j, o) in gl.row_mut(0).iter_mut().enumerate() {
                        let delta = if j == *target { 1.0 } else { 0.0 };
                        *o = gs * (-pt * (delta - p[j]));
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::AddN(terms) => {
                    for t in terms {
                        accumulate(&mut grads, *t, &g);
                    }
                }
            }
        }

        let mut by_param = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(g) = grads[i].take() {
                    by_param
                        .entry(p)
                        .and_modify(|acc: &mut Mat| acc.add_assign(&g))
                        .or_insert(g);
                }
            }
        }
        by_param
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: &Mat) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_scaled(grads: &mut [Option<Mat>], id: NodeId, g: &Mat, s: f64) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign_scaled(g, s),
        slot => *slot = Some(g.scale(s)),
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Named collection of trainable parameter matrices.
#[derive(Clone, Debug)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl Params {
    pub fn new() -> Self {
        Params { names: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_entries(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Parks every parameter on a tape, returning the leaf node per id.
    pub fn park_all(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.ids().map(|id| tape.param(id, self.value(id).clone())).collect()
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam optimizer with per-parameter first/second moment state.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let m = params.ids().map(|id| Mat::zeros(params.value(id).rows(), params.value(id).cols())).collect();
        let v = params.ids().map(|id| Mat::zeros(params.value(id).rows(), params.value(id).cols())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<ParamId, Mat>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.value_mut(id);
            for ((pv, (mv, vv)), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data().iter())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Central-difference gradient of `f` with respect to one parameter table.
/// `f` must be a deterministic function of the parameter values.
pub fn numerical_gradient<F: FnMut(&Params) -> f64>(
    params: &Params,
    id: ParamId,
    step: f64,
    mut f: F,
) -> Mat {
    let mut work = params.clone();
    let (rows, cols) = params.value(id).shape();
    let mut grad = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let orig = work.value(id).get(r, c);
            work.value_mut(id).set(r, c, orig + step);
            let plus = f(&work);
            work.value_mut(id).set(r, c, orig - step);
            let minus = f(&work);
            work.value_mut(id).set(r, c, orig);
            grad.set(r, c, (plus - minus) / (2.0 * step));
        }
    }
    grad
}

/// True when the analytic and numerical values agree to the given relative
/// tolerance; near-zero pairs are compared absolutely.
pub fn grad_close(analytic: f64, numerical: f64, rel_tol: f64) -> bool {
    let m = analytic.abs().max(numerical.abs());
    if m < 1e-6 {
        (analytic - numerical).abs() < 1e-8
    } else {
        (analytic - numerical).abs() / m <= rel_tol
    }
}
