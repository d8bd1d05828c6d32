//! Reverse-mode differentiation on a per-forward-pass tape.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; values
//! are immutable once pushed. [`Tape::backward`] sweeps the list in reverse
//! and returns per-node gradient tensors. Tapes are single-threaded; run one
//! per batch item and reduce gradients afterwards.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Layout metadata for the transducer alignment lattice consumed by
/// [`Tape::rnnt_loss_op`]. The lattice tensor has shape
/// `[frames * (labels + 1), width]`, cell `(t, u)` at row `t * (labels+1) + u`,
/// and every row holds log-scores over the output set.
#[derive(Debug, Clone)]
pub struct RnntMeta {
    pub frames: usize,
    pub blank_slot: usize,
    /// Output-slot index of label `y_{u+1}` for each `u` in `0..U`.
    pub label_slots: Vec<usize>,
}

impl RnntMeta {
    fn rows(&self) -> usize {
        self.label_slots.len() + 1
    }
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Embed { table: Var, index: usize },
    Concat(Vec<Var>),
    Narrow { input: Var, start: usize },
    StackRows(Vec<Var>),
    LogSoftmax(Var),
    LogSumExp(Var),
    WeightedSum { input: Var, weights: Vec<S> },
    RnntLoss(Box<RnntRecord>),
}

struct RnntRecord {
    lattice: Var,
    meta: RnntMeta,
    /// Forward (alpha) scores, kept for the backward (beta) pass.
    alpha: Vec<f64>,
    log_prob: f64,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<S: Scalar> {
    g: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.g.get(v.0).and_then(|x| x.as_ref())
    }
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

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &str) -> Result<Var> {
        #[cfg(debug_assertions)]
        value.check_finite(name)?;
        #[cfg(not(debug_assertions))]
        let _ = name;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input or parameter value. Leaves receive gradients but have
    /// no parents.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: S) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let one = S::one();
        let data = va
            .data()
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) if k == k2 => {
                let mut out = Tensor::zeros(vec![*m, *n]);
                mm_acc(*m, *k, *n, va.data(), vb.data(), out.data_mut());
                out
            }
            ([m, k], [k2]) if k == k2 => {
                let mut out = Tensor::zeros(vec![*m]);
                mv_acc(*m, *k, va.data(), vb.data(), out.data_mut());
                out
            }
            (sa, sb) => {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
        };
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// Row `index` of a rank-2 embedding table.
    pub fn embed(&mut self, table: Var, index: usize) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::shape(
                "embedding_lookup",
                format!("table rank {} != 2", vt.rank()),
            ));
        }
        let rows = vt.shape()[0];
        if index >= rows {
            return Err(Error::shape(
                "embedding_lookup",
                format!("index {index} out of {rows} rows"),
            ));
        }
        let out = Tensor::vector(vt.row(index).to_vec());
        self.push(Op::Embed { table, index }, out, "embedding_lookup")
    }

    /// Concatenate rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::shape(
                    "concat",
                    format!("rank {} input, want 1", v.rank()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::vector(data);
        self.push(Op::Concat(parts.to_vec()), out, "concat")
    }

    /// Contiguous slice `[start, start+len)` of a rank-1 tensor.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        if v.rank() != 1 || start + len > v.len() {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of shape {:?}", start + len, v.shape()),
            ));
        }
        let out = Tensor::vector(v.data()[start..start + len].to_vec());
        self.push(Op::Narrow { input, start }, out, "narrow")
    }

    /// Stack equal-length rank-1 tensors into a `[rows, width]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no inputs".into()));
        }
        let width = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != width {
                return Err(Error::shape(
                    "stack_rows",
                    format!("shape {:?}, want [{width}]", v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(vec![rows.len(), width], data)?;
        self.push(Op::StackRows(rows.to_vec()), out, "stack_rows")
    }

    /// Log-softmax over a rank-1 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 || v.is_empty() {
            return Err(Error::shape(
                "log_softmax",
                format!("shape {:?}", v.shape()),
            ));
        }
        let m = v.data().iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = m + v.data().iter().map(|&x| (x - m).exp()).sum::<S>().ln();
        let data = v.data().iter().map(|&x| x - lse).collect();
        let out = Tensor::vector(data);
        self.push(Op::LogSoftmax(a), out, "log_softmax")
    }

    /// Log-sum-exp of a rank-1 tensor, producing a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 || v.is_empty() {
            return Err(Error::shape(
                "log_sum_exp",
                format!("shape {:?}", v.shape()),
            ));
        }
        let m = v.data().iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = m + v.data().iter().map(|&x| (x - m).exp()).sum::<S>().ln();
        let out = Tensor::scalar(lse);
        self.push(Op::LogSumExp(a), out, "log_sum_exp")
    }

    /// Dot product with a constant weight vector, producing a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &[S]) -> Result<Var> {
        let v = self.value(input);
        if v.len() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} values vs {} weights", v.len(), weights.len()),
            ));
        }
        let s = v
            .data()
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x * w)
            .sum::<S>();
        let out = Tensor::scalar(s);
        self.push(
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            out,
            "weighted_sum",
        )
    }

    /// Negative log marginal probability of the label sequence under the
    /// alignment lattice: the forward (alpha) recursion over all monotonic
    /// blank/label paths, with gradients from the beta recursion.
    pub fn rnnt_loss_op(&mut self, lattice: Var, meta: RnntMeta) -> Result<Var> {
        let z = self.value(lattice);
        let rows = meta.rows();
        if meta.frames == 0 {
            return Err(Error::shape("rnnt_loss", "zero frames".into()));
        }
        if z.rank() != 2 || z.shape()[0] != meta.frames * rows {
            return Err(Error::shape(
                "rnnt_loss",
                format!(
                    "lattice shape {:?}, want [{} x {rows}, width]",
                    z.shape(),
                    meta.frames
                ),
            ));
        }
        let width = z.shape()[1];
        if meta.blank_slot >= width || meta.label_slots.iter().any(|&s| s >= width) {
            return Err(Error::shape(
                "rnnt_loss",
                format!("slot out of lattice width {width}"),
            ));
        }
        z.check_finite("rnnt_loss")?;
        let (alpha, log_prob) = rnnt_alpha(z, &meta);
        if !log_prob.is_finite() {
            return Err(Error::NonFinite {
                op: "rnnt_loss".into(),
            });
        }
        let out = Tensor::scalar(S::from_f64(-log_prob));
        self.push(
            Op::RnntLoss(Box::new(RnntRecord {
                lattice,
                meta,
                alpha,
                log_prob,
            })),
            out,
            "rnnt_loss",
        )
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node on
    /// the path, including leaves.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root shape {:?}, want scalar", self.value(root).shape()),
            ));
        }
        let mut g: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=root.0).rev() {
            let Some(gout) = g[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc_all(&mut g, *a, self.shape_of(*a), gout.data());
                    acc_all(&mut g, *b, self.shape_of(*b), gout.data());
                }
                Op::Mul(a, b) => {
                    let vb = self.value(*b).data();
                    let va = self.value(*a).data();
                    acc_map(&mut g, *a, self.shape_of(*a), |i| gout.data()[i] * vb[i]);
                    acc_map(&mut g, *b, self.shape_of(*b), |i| gout.data()[i] * va[i]);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc_map(&mut g, *a, self.shape_of(*a), |i| gout.data()[i] * c);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].value.data();
                    acc_map(&mut g, *a, self.shape_of(*a), |i| {
                        gout.data()[i] * (S::one() - y[i] * y[i])
                    });
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[id].value.data();
                    acc_map(&mut g, *a, self.shape_of(*a), |i| {
                        gout.data()[i] * y[i] * (S::one() - y[i])
                    });
                }
                Op::MatMul(a, b) => {
                    let sa = self.shape_of(*a);
                    let sb = self.shape_of(*b);
                    let (m, k) = (sa[0], sa[1]);
                    if sb.len() == 2 {
                        let n = sb[1];
                        let ga = grad_slot(&mut g, *a, &sa);
                        mmt_acc(m, k, n, gout.data(), self.value(*b).data(), ga.data_mut());
                        let gb = grad_slot(&mut g, *b, &sb);
                        mtm_acc(m, k, n, self.value(*a).data(), gout.data(), gb.data_mut());
                    } else {
                        let ga = grad_slot(&mut g, *a, &sa);
                        outer_acc(m, k, gout.data(), self.value(*b).data(), ga.data_mut());
                        let gb = grad_slot(&mut g, *b, &sb);
                        mtv_acc(m, k, self.value(*a).data(), gout.data(), gb.data_mut());
                    }
                }
                Op::Embed { table, index } => {
                    let st = self.shape_of(*table);
                    let width = st[1];
                    let gt = grad_slot(&mut g, *table, &st);
                    let row = &mut gt.data_mut()[index * width..(index + 1) * width];
                    for (o, &x) in row.iter_mut().zip(gout.data()) {
                        *o += x;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let sp = self.shape_of(p);
                        let len = sp.iter().product::<usize>();
                        let gp = grad_slot(&mut g, p, &sp);
                        for (o, &x) in gp.data_mut().iter_mut().zip(&gout.data()[offset..]) {
                            *o += x;
                        }
                        offset += len;
                    }
                }
                Op::Narrow { input, start } => {
                    let si = self.shape_of(*input);
                    let start = *start;
                    let gi = grad_slot(&mut g, *input, &si);
                    for (o, &x) in gi.data_mut()[start..start + gout.len()]
                        .iter_mut()
                        .zip(gout.data())
                    {
                        *o += x;
                    }
                }
                Op::StackRows(rows) => {
                    let width = gout.shape()[1];
                    for (i, &r) in rows.iter().enumerate() {
                        let sr = self.shape_of(r);
                        let gr = grad_slot(&mut g, r, &sr);
                        let src = &gout.data()[i * width..(i + 1) * width];
                        for (o, &x) in gr.data_mut().iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = self.nodes[id].value.data();
                    let gsum: S = gout.data().iter().cloned().sum();
                    acc_map(&mut g, *a, self.shape_of(*a), |i| {
                        gout.data()[i] - y[i].exp() * gsum
                    });
                }
                Op::LogSumExp(a) => {
                    let y = self.nodes[id].value.item();
                    let go = gout.item();
                    let x = self.value(*a).data();
                    acc_map(&mut g, *a, self.shape_of(*a), |i| (x[i] - y).exp() * go);
                }
                Op::WeightedSum { input, weights } => {
                    let go = gout.item();
                    let w = weights.clone();
                    acc_map(&mut g, *input, self.shape_of(*input), |i| w[i] * go);
                }
                Op::RnntLoss(rec) => {
                    let scale = gout.item().to_f64();
                    let sl = self.shape_of(rec.lattice);
                    let z = self.value(rec.lattice);
                    let mut contrib = Tensor::zeros(sl.clone());
                    rnnt_grad_into(z, &rec.meta, &rec.alpha, rec.log_prob, scale, &mut contrib);
                    let gl = grad_slot(&mut g, rec.lattice, &sl);
                    for (o, &x) in gl.data_mut().iter_mut().zip(contrib.data()) {
                        *o += x;
                    }
                }
            }
            g[id] = Some(gout);
        }
        Ok(Grads { g })
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }
}

fn grad_slot<'a, S: Scalar>(
    g: &'a mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<S> {
    g[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn acc_all<S: Scalar>(g: &mut [Option<Tensor<S>>], v: Var, shape: Vec<usize>, contrib: &[S]) {
    let t = grad_slot(g, v, &shape);
    for (o, &x) in t.data_mut().iter_mut().zip(contrib) {
        *o += x;
    }
}

fn acc_map<S: Scalar>(
    g: &mut [Option<Tensor<S>>],
    v: Var,
    shape: Vec<usize>,
    f: impl Fn(usize) -> S,
) {
    let t = grad_slot(g, v, &shape);
    for (i, o) in t.data_mut().iter_mut().enumerate() {
        *o += f(i);
    }
}

// ---- dense kernels -----------------------------------------------------

/// c[m,n] += a[m,k] b[k,n]
fn mm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m] += a[m,k] b[k]
fn mv_acc<S: Scalar>(m: usize, k: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        c[i] += row.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
    }
}

/// c[k] += a^T[k,m] g[m]  with a stored row-major [m,k]
fn mtv_acc<S: Scalar>(m: usize, k: usize, a: &[S], gm: &[S], c: &mut [S]) {
    for i in 0..m {
        let gi = gm[i];
        let row = &a[i * k..(i + 1) * k];
        for (cv, &av) in c.iter_mut().zip(row) {
            *cv += gi * av;
        }
    }
}

/// c[m,k] += g[m] (outer) b[k]
fn outer_acc<S: Scalar>(m: usize, k: usize, gm: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let gi = gm[i];
        let crow = &mut c[i * k..(i + 1) * k];
        for (cv, &bv) in crow.iter_mut().zip(b) {
            *cv += gi * bv;
        }
    }
}

/// da[m,k] += dc[m,n] b^T[n,k]  with b stored row-major [k,n]
fn mmt_acc<S: Scalar>(m: usize, k: usize, n: usize, dc: &[S], b: &[S], da: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dcrow = &dc[i * n..(i + 1) * n];
            da[i * k + p] += dcrow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<S>();
        }
    }
}

/// db[k,n] += a^T[k,m] dc[m,n]  with a stored row-major [m,k]
fn mtm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], dc: &[S], db: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let dcrow = &dc[i * n..(i + 1) * n];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &x) in dbrow.iter_mut().zip(dcrow) {
                *o += av * x;
            }
        }
    }
}

// ---- transducer lattice recursions --------------------------------------

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward recursion. alpha(t,u) is the log-probability of having consumed
/// t frames and emitted the first u labels; the sequence probability is
/// alpha(T-1, U) plus the final blank.
fn rnnt_alpha<S: Scalar>(z: &Tensor<S>, meta: &RnntMeta) -> (Vec<f64>, f64) {
    let t_max = meta.frames;
    let rows = meta.rows();
    let u_max = rows - 1;
    let width = z.shape()[1];
    let zf = |t: usize, u: usize, k: usize| z.data()[(t * rows + u) * width + k].to_f64();

    let mut alpha = vec![f64::NEG_INFINITY; t_max * rows];
    alpha[0] = 0.0;
    for t in 0..t_max {
        for u in 0..rows {
            if t == 0 && u == 0 {
                continue;
            }
            let mut v = f64::NEG_INFINITY;
            if t > 0 {
                v = lse2(v, alpha[(t - 1) * rows + u] + zf(t - 1, u, meta.blank_slot));
            }
            if u > 0 {
                v = lse2(v, alpha[t * rows + u - 1] + zf(t, u - 1, meta.label_slots[u - 1]));
            }
            alpha[t * rows + u] = v;
        }
    }
    let log_prob = alpha[(t_max - 1) * rows + u_max] + zf(t_max - 1, u_max, meta.blank_slot);
    (alpha, log_prob)
}

/// Backward recursion plus analytic gradient of `-log_prob` with respect to
/// the lattice log-scores, scaled by `scale`, accumulated into `out`.
fn rnnt_grad_into<S: Scalar>(
    z: &Tensor<S>,
    meta: &RnntMeta,
    alpha: &[f64],
    log_prob: f64,
    scale: f64,
    out: &mut Tensor<S>,
) {
    let t_max = meta.frames;
    let rows = meta.rows();
    let u_max = rows - 1;
    let width = z.shape()[1];
    let zf = |t: usize, u: usize, k: usize| z.data()[(t * rows + u) * width + k].to_f64();

    // beta(t,u): log-probability of completing the sequence from node (t,u).
    let mut beta = vec![f64::NEG_INFINITY; t_max * rows];
    beta[(t_max - 1) * rows + u_max] = zf(t_max - 1, u_max, meta.blank_slot);
    for t in (0..t_max).rev() {
        for u in (0..rows).rev() {
            if t == t_max - 1 && u == u_max {
                continue;
            }
            let mut v = f64::NEG_INFINITY;
            if t + 1 < t_max {
                v = lse2(v, zf(t, u, meta.blank_slot) + beta[(t + 1) * rows + u]);
            }
            if u < u_max {
                v = lse2(v, zf(t, u, meta.label_slots[u]) + beta[t * rows + u + 1]);
            }
            beta[t * rows + u] = v;
        }
    }
    debug_assert!(
        (beta[0] - log_prob).abs() <= 1e-6 * (1.0 + log_prob.abs()),
        "alpha/beta disagree: {} vs {log_prob}",
        beta[0]
    );

    let od = out.data_mut();
    for t in 0..t_max {
        for u in 0..rows {
            let a = alpha[t * rows + u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            // blank transition
            let beta_next = if t + 1 < t_max {
                beta[(t + 1) * rows + u]
            } else if u == u_max {
                0.0 // terminal
            } else {
                f64::NEG_INFINITY
            };
            if beta_next != f64::NEG_INFINITY {
                let w = a + zf(t, u, meta.blank_slot) + beta_next - log_prob;
                od[(t * rows + u) * width + meta.blank_slot] += S::from_f64(-w.exp() * scale);
            }
            // label transition
            if u < u_max {
                let w = a + zf(t, u, meta.label_slots[u]) + beta[t * rows + u + 1] - log_prob;
                od[(t * rows + u) * width + meta.label_slots[u]] += S::from_f64(-w.exp() * scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: Vec<f64>) -> Var {
        tape.leaf(Tensor::vector(v))
    }

    #[test]
    fn log_softmax_uniform_over_zeros() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, vec![0.0; 4]);
        let y = tape.log_softmax(x).unwrap();
        let expect = -(4.0f64).ln();
        for &v in tape.value(y).data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_of_two_zeros_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, vec![0.0, 0.0]);
        let y = tape.log_sum_exp(x).unwrap();
        assert!((tape.value(y).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_exponentiates_to_one() {
        let mut rng = crate::rng::SeededRng::new(5);
        for _ in 0..20 {
            let v: Vec<f64> = (0..7).map(|_| rng.range(-4.0, 4.0)).collect();
            let mut tape = Tape::<f64>::new();
            let x = vec_leaf(&mut tape, v);
            let y = tape.log_softmax(x).unwrap();
            let total: f64 = tape.value(y).data().iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(tape.value(y).data().iter().all(|&x| x <= 0.0));
        }
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = vec_leaf(&mut tape, vec![1.0, 2.0]);
        let b = vec_leaf(&mut tape, vec![1.0, 2.0, 3.0]);
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn backward_through_binary_chain() {
        // f = sum(w .* x) with w=[2,3], x=[4,5] => df/dw = x, df/dx = w
        let mut tape = Tape::<f64>::new();
        let w = vec_leaf(&mut tape, vec![2.0, 3.0]);
        let x = vec_leaf(&mut tape, vec![4.0, 5.0]);
        let p = tape.mul(w, x).unwrap();
        let s = tape.weighted_sum(p, &[1.0, 1.0]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_matvec_agree_with_manual() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let x = vec_leaf(&mut tape, vec![1.0, 0.5, -1.0]);
        let y = tape.matmul(a, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0 + 1.0 - 3.0, 4.0 + 2.5 - 6.0]);
    }
}
