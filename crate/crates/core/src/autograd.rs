//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! tracked (gradients flow to them) or constants; gradients are only
//! propagated through nodes that depend on at least one tracked leaf, so frozen
//! weights never receive a gradient at all.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Masking applied inside [`Graph::attention`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionMask<'m> {
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// `false` entries mark padded keys.
    pub keys: Option<&'m [bool]>,
}

impl AttentionMask<'_> {
    pub const NONE: AttentionMask<'static> = AttentionMask { causal: false, keys: None };
    pub const CAUSAL: AttentionMask<'static> = AttentionMask { causal: true, keys: None };
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Rows(Var, usize),
    ConcatRows(Var, Var),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: f64, probs: Vec<Mat> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
    MeanSquare(Var),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    tracked: bool,
}

/// Tape of one forward computation.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not
    /// tracked or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_rows_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    out
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn derived(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(Cow::Owned(value), op, tracked)
    }

    /// Borrowed leaf; `trainable` leaves receive gradients.
    pub fn param(&mut self, m: &'a Mat, trainable: bool) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, trainable)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.derived(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.derived(value, Op::Sub(a, b), &[a, b])
    }

    /// `x + row`, broadcasting a `1×c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.derived(value, Op::AddRow(x, row), &[x, row])
    }

    /// Repeats a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        let value = r.broadcast((n, r.ncols())).expect("broadcast of a single row").to_owned();
        self.derived(value, Op::BroadcastRows(row), &[row])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.derived(value, Op::Scale(x, factor), &[x])
    }

    /// Multiplies `x` by the `1×1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let factor = self.scalar(s);
        let value = self.value(x) * factor;
        self.derived(value, Op::ScaleBy(x, s), &[x, s])
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.derived(value, Op::Rows(x, start), &[x])
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concatenated blocks need equal widths");
        self.derived(value, Op::ConcatRows(a, b), &[a, b])
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), indices);
        self.derived(value, Op::Gather(table, indices.to_vec()), &[table])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.derived(value, Op::Transpose(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| gelu(v).0);
        self.derived(value, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with affine `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.derived(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.derived(value, Op::Softmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention. `q` is `Tq×d`, `k` and `v` are
    /// `Tk×d`; the feature axis is split into `heads` equal slices and each
    /// head is scaled by `1/sqrt(d/heads)`. Returns the concatenated heads.
    ///
    /// Panics if `d` is not divisible by `heads` or the mask does not match.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask<'_>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        let tk = kv.nrows();
        assert_eq!(kv.ncols(), d, "query/key width mismatch");
        assert_eq!(vv.nrows(), tk, "key/value length mismatch");
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        if mask.causal {
            assert_eq!(tq, tk, "causal attention needs equal query and key lengths");
        }
        if let Some(keys) = mask.keys {
            assert_eq!(keys.len(), tk, "key mask length mismatch");
        }
        let hd = d / heads;
        let dv = vv.ncols() / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Mat::zeros((tq, vv.ncols()));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qv.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = kv.slice(s![.., h * hd..(h + 1) * hd]);
            let vh = vv.slice(s![.., h * dv..(h + 1) * dv]);
            let mut scores = qh.dot(&kh.t()) * scale;
            for ((i, j), x) in scores.indexed_iter_mut() {
                let hidden = (mask.causal && j > i) || mask.keys.is_some_and(|keys| !keys[j]);
                if hidden {
                    *x = f64::NEG_INFINITY;
                }
            }
            softmax_rows_in_place(&mut scores);
            out.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        self.derived(out, Op::Attention { q, k, v, heads, scale, probs }, &[q, k, v])
    }

    /// Attention probabilities (one `Tq×Tk` matrix per head) of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention probability matrix recorded so far, in creation order.
    pub fn all_attention_weights(&self) -> impl Iterator<Item = &Mat> + '_ {
        self.nodes.iter().flat_map(|n| match &n.op {
            Op::Attention { probs, .. } => probs.as_slice(),
            _ => &[],
        })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; produces a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv);
        let mut nll = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
        }
        let value = Mat::from_elem((1, 1), nll / targets.len() as f64);
        self.derived(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Mean of squared entries; produces a `1×1` node.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Mat::from_elem((1, 1), xv.mapv(|v| v * v).sum() / xv.len() as f64);
        self.derived(value, Op::MeanSquare(x), &[x])
    }

    /// Back-propagates from the `1×1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar node");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            let mut send = |v: Var, g: Mat| {
                if self.nodes[v.0].tracked {
                    match &mut grads[v.0] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(up);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        send(*a, up.dot(&self.value(*b).t()));
                    }
                    if self.tracked(*b) {
                        send(*b, self.value(*a).t().dot(&up));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, up.clone());
                    send(*b, up);
                }
                Op::Sub(a, b) => {
                    send(*b, -&up);
                    send(*a, up);
                }
                Op::AddRow(x, row) => {
                    send(*row, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*x, up);
                }
                Op::BroadcastRows(row) => send(*row, up.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::Scale(x, f) => send(*x, up * *f),
                Op::ScaleBy(x, s) => {
                    let factor = self.scalar(*s);
                    if self.tracked(*s) {
                        let ds = (&up * self.value(*x)).sum();
                        send(*s, Mat::from_elem((1, 1), ds));
                    }
                    send(*x, up * factor);
                }
                Op::Rows(x, start) => {
                    let mut g = Mat::zeros(self.value(*x).dim());
                    g.slice_mut(s![*start..*start + up.nrows(), ..]).assign(&up);
                    send(*x, g);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).nrows();
                    send(*a, up.slice(s![..split, ..]).to_owned());
                    send(*b, up.slice(s![split.., ..]).to_owned());
                }
                Op::Gather(table, indices) => {
                    let mut g = Mat::zeros(self.value(*table).dim());
                    for (row, &i) in up.rows().into_iter().zip(indices) {
                        let mut dst = g.row_mut(i);
                        dst += &row;
                    }
                    send(*table, g);
                }
                Op::Transpose(x) => send(*x, up.t().to_owned()),
                Op::Gelu(x) => {
                    let mut g = up;
                    Zip::from(&mut g).and(self.value(*x)).for_each(|g, &x| *g *= gelu(x).1);
                    send(*x, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    if self.tracked(*gamma) {
                        send(*gamma, (&up * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.tracked(*beta) {
                        send(*beta, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.tracked(*x) {
                        let dxhat = &up * self.value(*gamma);
                        let cols = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.dim());
                        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dh_xh = dh.dot(&xh);
                            let inv = inv_std[r];
                            Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &h| {
                                *o = inv / cols * (cols * d - sum_dh - h * sum_dh_xh);
                            });
                        }
                        send(*x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut g = &up * &**y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|g, &y| *g -= y * dot);
                    }
                    send(*x, g);
                }
                Op::Attention { q, k, v, heads, scale, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let hd = qv.ncols() / heads;
                    let dv = vv.ncols() / heads;
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    let mut dvm = Mat::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let qs = s![.., h * hd..(h + 1) * hd];
                        let vs = s![.., h * dv..(h + 1) * dv];
                        let dout = up.slice(vs);
                        dvm.slice_mut(vs).assign(&p.t().dot(&dout));
                        let dp = dout.dot(&vv.slice(vs).t());
                        let mut ds = &dp * p;
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.sum();
                            Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d -= p * dot);
                        }
                        ds *= *scale;
                        dq.slice_mut(qs).assign(&ds.dot(&kv.slice(qs)));
                        dk.slice_mut(qs).assign(&ds.t().dot(&qv.slice(qs)));
                    }
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dvm);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let n = targets.len() as f64;
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        g[[r, t]] -= 1.0;
                    }
                    send(*logits, g * (up[[0, 0]] / n));
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(*x);
                    send(*x, xv * (2.0 * up[[0, 0]] / xv.len() as f64));
                }
            }
        }
        Gradients { grads }
    }
}
