//! Dynamic tape: every op records its inputs and whatever it needs for the
//! reverse sweep. A tape lives for exactly one forward/backward pass.

use super::tensor::{ParamId, ParamStore, Tensor};
use super::AutodiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds accepted by [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Multiply,
    Matmul,
    /// Concatenation along the last axis.
    Concat,
    Sigmoid,
    Tanh,
    Relu,
    /// Elementwise maximum over inputs of one shape.
    MaxOverSet,
    /// Row gather from the single input table.
    EmbedLookup(Vec<usize>),
    /// Inputs are `[x, gamma, beta]`; normalises each row of `x`.
    LayerNorm,
    /// Row-wise softmax.
    Softmax,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Multiply => "multiply",
            Primitive::Matmul => "matmul",
            Primitive::Concat => "concat",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::MaxOverSet => "max_over_set",
            Primitive::EmbedLookup(_) => "embed_lookup",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Softmax => "softmax",
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize, len: usize },
    SliceRows { src: Var, start: usize, len: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MaxOverSet(Vec<Var>),
    SetMax { src: Var, set_len: usize, mask: Vec<bool> },
    EmbedLookup { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax(Var),
    SetAttention { q: Var, k: Var, v: Var, set_len: usize, heads: usize, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
    Sum(Var),
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    /// Winning input (or row) per output element; `usize::MAX` marks "none".
    Argmax(Vec<usize>),
    /// Softmax probabilities (cross entropy, attention weights).
    Probs(Vec<f64>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// `None` for parameter nodes, which read straight from the store.
    value: Option<Vec<f64>>,
    saved: Saved,
}

struct Computed {
    shape: Vec<usize>,
    value: Vec<f64>,
    saved: Saved,
}

/// Row/column view of a shape: rank 0 is 1x1, rank 1 is a row, higher
/// ranks collapse leading axes into rows.
pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn mismatch(kind: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        kind,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// `c (+)= op(a) * op(b)` for row-major buffers, `a` is m x k and `b` is k x n
/// after optional transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_dims(
    kind: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize, Vec<usize>), AutodiffError> {
    let (ar, ac) = dims2(a);
    let (br, bc) = dims2(b);
    let pick = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let (r, c) = match (pick(ar, br), pick(ac, bc)) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(mismatch(kind, &[a, b])),
    };
    let shape = if (ar, ac) == (r, c) && a.len() >= b.len() {
        a.to_vec()
    } else if (br, bc) == (r, c) {
        b.to_vec()
    } else if (ar, ac) == (r, c) {
        a.to_vec()
    } else {
        vec![r, c]
    };
    Ok((r, c, shape))
}

fn broadcast_binary(
    kind: &'static str,
    (sa, a): (&[usize], &[f64]),
    (sb, b): (&[usize], &[f64]),
    f: impl Fn(f64, f64) -> f64,
) -> Result<Computed, AutodiffError> {
    let (r, c, shape) = broadcast_dims(kind, sa, sb)?;
    let value = if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let (ar, ac) = dims2(sa);
        let (br, bc) = dims2(sb);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ar == 1 { 0 } else { i * ac };
            let ib = if br == 1 { 0 } else { i * bc };
            for j in 0..c {
                let x = a[ia + if ac == 1 { 0 } else { j }];
                let y = b[ib + if bc == 1 { 0 } else { j }];
                out.push(f(x, y));
            }
        }
        out
    };
    Ok(Computed {
        shape,
        value,
        saved: Saved::None,
    })
}

/// Sums `grad` (shaped r x c) down to an operand of dims `(tr, tc)`.
fn reduce_broadcast(grad: &[f64], r: usize, c: usize, tr: usize, tc: usize, dst: &mut [f64], scale: impl Fn(usize) -> f64) {
    if tr == r && tc == c {
        for (idx, (d, g)) in dst.iter_mut().zip(grad).enumerate() {
            *d += g * scale(idx);
        }
        return;
    }
    for i in 0..r {
        for j in 0..c {
            let idx = i * c + j;
            let ti = if tr == 1 { 0 } else { i };
            let tj = if tc == 1 { 0 } else { j };
            dst[ti * tc + tj] += grad[idx] * scale(idx);
        }
    }
}

fn broadcast_index(i: usize, j: usize, (tr, tc): (usize, usize)) -> usize {
    (if tr == 1 { 0 } else { i }) * tc + if tc == 1 { 0 } else { j }
}

type Lookup<'a> = dyn Fn(Var) -> (&'a [usize], &'a [f64]) + 'a;

fn compute(op: &Op, get: &Lookup<'_>) -> Result<Computed, AutodiffError> {
    let plain = |shape: Vec<usize>, value: Vec<f64>| Computed {
        shape,
        value,
        saved: Saved::None,
    };
    Ok(match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves are never recomputed"),
        Op::Add(a, b) => broadcast_binary("add", get(*a), get(*b), |x, y| x + y)?,
        Op::Sub(a, b) => broadcast_binary("sub", get(*a), get(*b), |x, y| x - y)?,
        Op::Mul(a, b) => broadcast_binary("multiply", get(*a), get(*b), |x, y| x * y)?,
        Op::Scale(a, s) => {
            let (sa, va) = get(*a);
            plain(sa.to_vec(), va.iter().map(|x| x * s).collect())
        }
        Op::Matmul(a, b) => {
            let (sa, va) = get(*a);
            let (sb, vb) = get(*b);
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", &[sa, sb]));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, va, false, vb, false, &mut out, false);
            plain(vec![m, n], out)
        }
        Op::ConcatCols(parts) => {
            if parts.is_empty() {
                return Err(AutodiffError::InvalidArgument {
                    kind: "concat",
                    reason: "no inputs".into(),
                });
            }
            let shapes: Vec<&[usize]> = parts.iter().map(|p| get(*p).0).collect();
            let rows = dims2(shapes[0]).0;
            if shapes.iter().any(|s| dims2(s).0 != rows || s.len() != shapes[0].len()) {
                return Err(mismatch("concat", &shapes));
            }
            let widths: Vec<usize> = shapes.iter().map(|s| dims2(s).1).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&get(*p).1[i * w..(i + 1) * w]);
                }
            }
            let mut shape = shapes[0].to_vec();
            if shape.is_empty() {
                shape = vec![total];
            } else {
                *shape.last_mut().unwrap() = total;
            }
            plain(shape, out)
        }
        Op::ConcatRows(parts) => {
            if parts.is_empty() {
                return Err(AutodiffError::InvalidArgument {
                    kind: "concat_rows",
                    reason: "no inputs".into(),
                });
            }
            let shapes: Vec<&[usize]> = parts.iter().map(|p| get(*p).0).collect();
            let cols = dims2(shapes[0]).1;
            if shapes.iter().any(|s| dims2(s).1 != cols) {
                return Err(mismatch("concat_rows", &shapes));
            }
            let mut out = Vec::new();
            let mut rows = 0;
            for p in parts {
                let (s, v) = get(*p);
                rows += dims2(s).0;
                out.extend_from_slice(v);
            }
            plain(vec![rows, cols], out)
        }
        Op::SliceCols { src, start, len } => {
            let (s, v) = get(*src);
            let (r, c) = dims2(s);
            if *len == 0 || start + len > c {
                return Err(mismatch("slice_cols", &[s, &[*start, *len]]));
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + start..i * c + start + len]);
            }
            plain(vec![r, *len], out)
        }
        Op::SliceRows { src, start, len } => {
            let (s, v) = get(*src);
            let (r, c) = dims2(s);
            if *len == 0 || start + len > r {
                return Err(mismatch("slice_rows", &[s, &[*start, *len]]));
            }
            plain(vec![*len, c], v[start * c..(start + len) * c].to_vec())
        }
        Op::Sigmoid(a) => {
            let (s, v) = get(*a);
            plain(s.to_vec(), v.iter().map(|&x| sigmoid(x)).collect())
        }
        Op::Tanh(a) => {
            let (s, v) = get(*a);
            plain(s.to_vec(), v.iter().map(|x| x.tanh()).collect())
        }
        Op::Relu(a) => {
            let (s, v) = get(*a);
            plain(s.to_vec(), v.iter().map(|&x| x.max(0.0)).collect())
        }
        Op::MaxOverSet(parts) => {
            if parts.is_empty() {
                return Err(AutodiffError::InvalidArgument {
                    kind: "max_over_set",
                    reason: "empty set".into(),
                });
            }
            let shapes: Vec<&[usize]> = parts.iter().map(|p| get(*p).0).collect();
            if shapes.iter().any(|s| *s != shapes[0]) {
                return Err(mismatch("max_over_set", &shapes));
            }
            let mut out = get(parts[0]).1.to_vec();
            let mut arg = vec![0usize; out.len()];
            for (pi, p) in parts.iter().enumerate().skip(1) {
                for (j, &x) in get(*p).1.iter().enumerate() {
                    if x > out[j] {
                        out[j] = x;
                        arg[j] = pi;
                    }
                }
            }
            Computed {
                shape: shapes[0].to_vec(),
                value: out,
                saved: Saved::Argmax(arg),
            }
        }
        Op::SetMax { src, set_len, mask } => {
            let (s, v) = get(*src);
            let (r, c) = dims2(s);
            if *set_len == 0 || r % set_len != 0 || mask.len() != r {
                return Err(mismatch("set_max", &[s, &[*set_len, mask.len()]]));
            }
            let sets = r / set_len;
            let mut out = vec![0.0; sets * c];
            let mut arg = vec![usize::MAX; sets * c];
            for si in 0..sets {
                for t in 0..*set_len {
                    let row = si * set_len + t;
                    if !mask[row] {
                        continue;
                    }
                    for j in 0..c {
                        let x = v[row * c + j];
                        let o = si * c + j;
                        if arg[o] == usize::MAX || x > out[o] {
                            out[o] = x;
                            arg[o] = row;
                        }
                    }
                }
            }
            Computed {
                shape: vec![sets, c],
                value: out,
                saved: Saved::Argmax(arg),
            }
        }
        Op::EmbedLookup { table, indices } => {
            let (s, v) = get(*table);
            let (rows, c) = dims2(s);
            if s.len() != 2 {
                return Err(mismatch("embed_lookup", &[s]));
            }
            let mut out = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= rows {
                    return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
                }
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            plain(vec![indices.len(), c], out)
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (sx, vx) = get(*x);
            let (sg, vg) = get(*gamma);
            let (sb, vb) = get(*beta);
            let (r, c) = dims2(sx);
            if vg.len() != c || vb.len() != c {
                return Err(mismatch("layer_norm", &[sx, sg, sb]));
            }
            let mut out = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            for i in 0..r {
                let row = &vx[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * vg[j] + vb[j];
                }
            }
            Computed {
                shape: sx.to_vec(),
                value: out,
                saved: Saved::Norm { xhat, inv_std },
            }
        }
        Op::Softmax(a) => {
            let (s, v) = get(*a);
            let (r, c) = dims2(s);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                softmax_into(&v[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            }
            plain(s.to_vec(), out)
        }
        Op::SetAttention {
            q,
            k,
            v,
            set_len,
            heads,
            mask,
        } => {
            let (sq, vq) = get(*q);
            let (sk, vk) = get(*k);
            let (sv, vv) = get(*v);
            let (r, d) = dims2(sq);
            if sq != sk
                || sq != sv
                || *heads == 0
                || d % heads != 0
                || *set_len == 0
                || r % set_len != 0
                || mask.len() != r
            {
                return Err(mismatch("set_attention", &[sq, sk, sv]));
            }
            let (out, probs) = attention_forward(vq, vk, vv, r, d, *set_len, *heads, mask);
            Computed {
                shape: sq.to_vec(),
                value: out,
                saved: Saved::Probs(probs),
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
        } => {
            let (s, v) = get(*logits);
            let (r, c) = dims2(s);
            if targets.len() != r || weights.len() != r {
                return Err(mismatch("cross_entropy", &[s, &[targets.len(), weights.len()]]));
            }
            let mut probs = vec![0.0; r * c];
            let mut total = 0.0;
            for i in 0..r {
                let t = targets[i];
                if t >= c {
                    return Err(AutodiffError::TargetOutOfRange {
                        target: t,
                        classes: c,
                    });
                }
                let row = &v[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                softmax_into(row, &mut probs[i * c..(i + 1) * c]);
                if weights[i] != 0.0 {
                    total += weights[i] * (lse - row[t]);
                }
            }
            Computed {
                shape: Vec::new(),
                value: vec![total],
                saved: Saved::Probs(probs),
            }
        }
        Op::Sum(a) => {
            let (_, v) = get(*a);
            plain(Vec::new(), vec![v.iter().sum()])
        }
    })
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Masked multi-head self-attention within fixed-size sets of rows.
/// Returns the output rows and the attention weights laid out as
/// `[set][head][query][key]`.
#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rows: usize,
    d: usize,
    set_len: usize,
    heads: usize,
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let sets = rows / set_len;
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; sets * heads * set_len * set_len];
    let mut scores = vec![0.0; set_len];
    for s in 0..sets {
        let base = s * set_len;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..set_len {
                if !mask[base + i] {
                    continue;
                }
                let qi = &q[(base + i) * d + off..(base + i) * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..set_len {
                    if !mask[base + j] {
                        continue;
                    }
                    let kj = &k[(base + j) * d + off..(base + j) * d + off + dh];
                    let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = sc;
                    max = max.max(sc);
                }
                let p = &mut probs[((s * heads + h) * set_len + i) * set_len..][..set_len];
                let mut total = 0.0;
                for j in 0..set_len {
                    if mask[base + j] {
                        p[j] = (scores[j] - max).exp();
                        total += p[j];
                    }
                }
                let o = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                for j in 0..set_len {
                    if !mask[base + j] {
                        continue;
                    }
                    p[j] /= total;
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    for (o, x) in o.iter_mut().zip(vj) {
                        *o += p[j] * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if the loss does not reach it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-node gradient into the store's gradient slots.
    /// Parameters used more than once receive the sum of their uses.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    /// A tape whose parameter leaves read directly from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in recording (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn value(&self, var: Var) -> &[f64] {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self
                .params
                .expect("parameter node without a store")
                .get(*pid)
                .values(),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        Tensor::new(self.shape(var).to_vec(), self.value(var).to_vec())
            .expect("recorded node shapes are valid")
    }

    pub fn input(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        let value = tensor.values().to_vec();
        self.push(Node {
            op: Op::Leaf,
            shape,
            value: Some(value),
            saved: Saved::None,
        })
    }

    /// Leaf for a `[rows, cols]` matrix of constants.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(rows * cols, values.len(), "constant shape mismatch");
        self.push(Node {
            op: Op::Leaf,
            shape: vec![rows, cols],
            value: Some(values),
            saved: Saved::None,
        })
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("Tape::param needs Tape::with_params");
        let shape = store.get(id).shape().to_vec();
        self.push(Node {
            op: Op::Param(id),
            shape,
            value: None,
            saved: Saved::None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var, AutodiffError> {
        let computed = {
            let this = &*self;
            let get = |v: Var| (this.shape(v), this.value(v));
            compute(&op, &get)?
        };
        debug_assert!(computed.value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        Ok(self.push(Node {
            op,
            shape: computed.shape,
            value: Some(computed.value),
            saved: computed.saved,
        }))
    }

    /// Dispatches one of the named primitives.
    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::InvalidArgument {
                    kind: kind.name(),
                    reason: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Multiply => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Matmul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Concat => self.concat(inputs),
            Primitive::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            Primitive::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            Primitive::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            Primitive::MaxOverSet => self.max_over_set(inputs),
            Primitive::EmbedLookup(indices) => {
                arity(1).and_then(|_| self.embed_lookup(inputs[0], indices.clone()))
            }
            Primitive::LayerNorm => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2]))
            }
            Primitive::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
        }
    }

    /// Elementwise sum; a size-1 row or column axis broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        self.record(Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Matmul(a, b))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.record(Op::SliceCols { src, start, len })
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.record(Op::SliceRows { src, start, len })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Relu(a))
    }

    pub fn max_over_set(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        self.record(Op::MaxOverSet(parts.to_vec()))
    }

    /// Max over the present rows of each consecutive group of `set_len`
    /// rows. Groups with no present row yield zeros.
    pub fn set_max(&mut self, src: Var, set_len: usize, mask: Vec<bool>) -> Result<Var, AutodiffError> {
        self.record(Op::SetMax { src, set_len, mask })
    }

    pub fn embed_lookup(&mut self, table: Var, indices: Vec<usize>) -> Result<Var, AutodiffError> {
        self.record(Op::EmbedLookup { table, indices })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        self.record(Op::LayerNorm { x, gamma, beta })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Softmax(a))
    }

    /// Scaled dot-product self-attention restricted to each group of
    /// `set_len` rows; masked rows neither attend nor are attended to and
    /// produce zero output rows.
    pub fn set_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        set_len: usize,
        heads: usize,
        mask: Vec<bool>,
    ) -> Result<Var, AutodiffError> {
        self.record(Op::SetAttention {
            q,
            k,
            v,
            set_len,
            heads,
            mask,
        })
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` as a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var, AutodiffError> {
        self.record(Op::CrossEntropy {
            logits,
            targets,
            weights,
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Sum(a))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>, AutodiffError> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf | Op::Param(_) => self.value(Var(i)).to_vec(),
                _ => {
                    let get = |v: Var| (self.shape(v), values[v.0].as_slice());
                    compute(&node.op, &get)?.value
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let n = self.nodes[loss.0].shape.iter().product::<usize>();
        if n != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.backward_node(i, g, before);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((i, pid)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_deref().unwrap_or(&[]);
        fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.value(v).len();
                grad_slot(grads, v, len)
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (r, c) = dims2(&node.shape);
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ta, tb) = (dims2(self.shape(*a)), dims2(self.shape(*b)));
                reduce_broadcast(g, r, c, ta.0, ta.1, slot!(*a), |_| 1.0);
                reduce_broadcast(g, r, c, tb.0, tb.1, slot!(*b), |_| sign);
            }
            Op::Mul(a, b) => {
                let (r, c) = dims2(&node.shape);
                let (ta, tb) = (dims2(self.shape(*a)), dims2(self.shape(*b)));
                let va = self.value(*a);
                let vb = self.value(*b);
                reduce_broadcast(g, r, c, ta.0, ta.1, slot!(*a), |idx| {
                    vb[broadcast_index(idx / c, idx % c, tb)]
                });
                reduce_broadcast(g, r, c, tb.0, tb.1, slot!(*b), |idx| {
                    va[broadcast_index(idx / c, idx % c, ta)]
                });
            }
            Op::Scale(a, s) => {
                for (d, x) in slot!(*a).iter_mut().zip(g) {
                    *d += x * s;
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let va = self.value(*a);
                let vb = self.value(*b);
                gemm(m, n, k, g, false, vb, true, slot!(*a), true);
                gemm(k, m, n, va, true, g, false, slot!(*b), true);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims2(&node.shape);
                let mut off = 0;
                for p in parts {
                    let w = dims2(self.shape(*p)).1;
                    let dst = slot!(*p);
                    for r in 0..rows {
                        for j in 0..w {
                            dst[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    for (d, x) in slot!(*p).iter_mut().zip(&g[off..off + len]) {
                        *d += x;
                    }
                    off += len;
                }
            }
            Op::SliceCols { src, start, len } => {
                let (r, c) = dims2(self.shape(*src));
                let dst = slot!(*src);
                for i in 0..r {
                    for j in 0..*len {
                        dst[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::SliceRows { src, start, len } => {
                let c = dims2(self.shape(*src)).1;
                let dst = &mut slot!(*src)[start * c..(start + len) * c];
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::Sigmoid(a) => {
                for ((d, x), y) in slot!(*a).iter_mut().zip(g).zip(out) {
                    *d += x * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((d, x), y) in slot!(*a).iter_mut().zip(g).zip(out) {
                    *d += x * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                for ((d, x), v) in slot!(*a).iter_mut().zip(g).zip(va) {
                    if *v > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::MaxOverSet(parts) => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!() };
                for (j, &p) in arg.iter().enumerate() {
                    slot!(parts[p])[j] += g[j];
                }
            }
            Op::SetMax { src, .. } => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!() };
                let c = dims2(&node.shape).1;
                let dst = slot!(*src);
                for (o, &row) in arg.iter().enumerate() {
                    if row != usize::MAX {
                        dst[row * c + o % c] += g[o];
                    }
                }
            }
            Op::EmbedLookup { table, indices } => {
                let c = dims2(self.shape(*table)).1;
                let dst = slot!(*table);
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dst[idx * c + j] += g[r * c + j];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let Saved::Norm { xhat, inv_std } = &node.saved else { unreachable!() };
                let (r, c) = dims2(&node.shape);
                let vg = self.value(*gamma);
                {
                    let dg = slot!(*gamma);
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                {
                    let db = slot!(*beta);
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                }
                let dx = slot!(*x);
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dxhat[j] = g[i * c + j] * vg[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * c + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        dx[i * c + j] +=
                            inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = dims2(&node.shape);
                let dst = slot!(*a);
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[i * c + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::SetAttention {
                q,
                k,
                v,
                set_len,
                heads,
                mask,
            } => {
                let Saved::Probs(probs) = &node.saved else { unreachable!() };
                let (rows, d) = dims2(&node.shape);
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) =
                    attention_backward(g, probs, vq, vk, vv, rows, d, *set_len, *heads, mask);
                for (dst, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    for (d, x) in slot!(dst).iter_mut().zip(&src) {
                        *d += x;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let Saved::Probs(probs) = &node.saved else { unreachable!() };
                let (r, c) = dims2(self.shape(*logits));
                let dst = slot!(*logits);
                for i in 0..r {
                    let w = weights[i] * g[0];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dst[i * c + j] += w * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Sum(a) => {
                slot!(*a).iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    probs: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rows: usize,
    d: usize,
    set_len: usize,
    heads: usize,
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let sets = rows / set_len;
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; set_len];
    for s in 0..sets {
        let base = s * set_len;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..set_len {
                if !mask[base + i] {
                    continue;
                }
                let p = &probs[((s * heads + h) * set_len + i) * set_len..][..set_len];
                let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                let mut dot = 0.0;
                for j in 0..set_len {
                    if !mask[base + j] {
                        continue;
                    }
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    let dvj = &mut dv[(base + j) * d + off..(base + j) * d + off + dh];
                    for (dst, x) in dvj.iter_mut().zip(gi) {
                        *dst += p[j] * x;
                    }
                }
                for j in 0..set_len {
                    if !mask[base + j] {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq[(base + i) * d + off + t] += ds * k[(base + j) * d + off + t];
                        dk[(base + j) * d + off + t] += ds * q[(base + i) * d + off + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
