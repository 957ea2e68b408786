//! Reverse-mode tape over dense [`Tensor`] values.
//!
//! Every primitive appends one node; `backward` walks the nodes in strict
//! reverse order, so a node is always visited after everything that consumed it.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Clamp01(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    RmsNormalize {
        x: Var,
        inv_rms: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    FrobNorm(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        src: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- primitives -------------------------------------------------------

    /// `a · b`, or `a · bᵀ` when `transpose_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (n, k) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (kb, m, bs) = if transpose_b {
            (bc, br, (1, bc))
        } else {
            (br, bc, (bc, 1))
        };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bs,
            &mut out,
            false,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul { a, b, transpose_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; the row-batched form of `y = W x` for a weight stored as `Y×X`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err(op, a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (r, c) = self.dims(a)?;
        let vv = self.value(v);
        if vv.numel() != c {
            return Err(self.shape_err(op, a, v));
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(va.row(i).iter().zip(vv.data()).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Adds the vector `v` to every row of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, v, |x, y| x + y)?;
        let rg = self.needs(&[a, v]);
        Ok(self.push(t, Op::AddRow(a, v), rg))
    }

    /// Multiplies every row of `a` elementwise by the vector `v`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, v, |x, y| x * y)?;
        let rg = self.needs(&[a, v]);
        Ok(self.push(t, Op::MulRow(a, v), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Elementwise `min(1, max(0, x))`; the gradient is zero at and beyond both bounds.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(0.0, 1.0), Op::Clamp01(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if c == 0 {
            return Err(Error::Degenerate("softmax over an empty axis".into()));
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax_row(va.row(i)));
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)` without a gain.
    pub fn rms_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let vx = self.value(x);
        let mut inv_rms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = vx.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().map(|v| v * inv));
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::RmsNormalize { x, inv_rms }, rg))
    }

    /// RMS normalization followed by a per-feature gain vector.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let n = self.rms_normalize(x)?;
        self.mul_row(n, gain)
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let vx = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = vx.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                data.extend(row.iter().map(|v| v / n));
            } else {
                data.extend(std::iter::repeat_n(0.0, c));
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::RowNormalize { x, norms }, rg))
    }

    /// Frobenius norm; the subgradient at zero is taken as zero.
    pub fn frob_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(n), Op::FrobNorm(a), rg)
    }

    /// Selects rows of `src` by index (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
        }
        let vs = self.value(src);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(vs.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.needs(&[src]);
        Ok(self.push(t, Op::GatherRows { src, idx: idx.to_vec() }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Selects columns of `src` by index.
    pub fn gather_cols(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "column index {bad} out of range for {c} columns"
            )));
        }
        let vs = self.value(src);
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = vs.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let t = Tensor::matrix(r, idx.len(), data)?;
        let rg = self.needs(&[src]);
        Ok(self.push(t, Op::GatherCols { src, idx: idx.to_vec() }, rg))
    }

    /// Mean token cross-entropy over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.dims(logits)?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let vl = self.value(logits);
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Contract(format!("target id {t} out of range for {v} classes")));
            }
            let p = softmax_row(vl.row(i));
            total -= log_softmax_at(vl.row(i), t);
            rows.push((i, t));
            probs.extend(p);
        }
        if rows.is_empty() {
            return Err(Error::Degenerate("cross-entropy with an empty loss mask".into()));
        }
        let loss = total / rows.len() as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, rows, probs }, rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `segments` lists `(start_row, length)` of each sequence; attention never
    /// crosses a segment boundary.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims(q)?;
        if self.dims(k)? != (n, d) {
            return Err(self.shape_err("attention", q, k));
        }
        if self.dims(v)? != (n, d) {
            return Err(self.shape_err("attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("{d} features do not split into {heads} heads")));
        }
        if segments.iter().any(|&(s, l)| s + l > n) {
            return Err(Error::Contract("attention segment exceeds the packed rows".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1 * heads).sum());
        let mut scores = Vec::new();
        for &(s, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qv[(s + i) * d + off..(s + i) * d + off + dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kv[(s + j) * d + off..(s + j) * d + off + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    let p = softmax_row(&scores);
                    let orow = &mut out[(s + i) * d + off..(s + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(s + j) * d + off..(s + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                    probs.extend_from_slice(&p);
                    probs.extend(std::iter::repeat_n(0.0, len - i - 1));
                }
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(root)/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (n, k) = nodes[a.0].value.dims2().unwrap();
                let m = nodes[i].value.cols();
                let bd = val(b);
                acc(a, &mut |ga| {
                    // dA = dC · Bᵀ (or dC · B when B was transposed)
                    let bs = if transpose_b { (k, 1) } else { (1, m) };
                    gemm(n, m, k, g, (m, 1), bd, bs, ga, true);
                });
                let ad = val(a);
                acc(b, &mut |gb| {
                    if transpose_b {
                        // dB (m×k) = dCᵀ · A
                        gemm(m, n, k, g, (1, m), ad, (k, 1), gb, true);
                    } else {
                        // dB (k×m) = Aᵀ · dC
                        gemm(k, n, m, ad, (1, k), g, (m, 1), gb, true);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((x, gy), y) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * y;
                    }
                });
            }
            &Op::AddRow(a, v) => {
                let c = nodes[v.0].value.numel();
                acc(a, &mut |ga| add_into(ga, g));
                acc(v, &mut |gv| {
                    for row in g.chunks(c) {
                        add_into(gv, row);
                    }
                });
            }
            &Op::MulRow(a, v) => {
                let c = nodes[v.0].value.numel();
                let (ad, vd) = (val(a), val(v));
                acc(a, &mut |ga| {
                    for (grow, gyrow) in ga.chunks_mut(c).zip(g.chunks(c)) {
                        for ((x, gy), y) in grow.iter_mut().zip(gyrow).zip(vd) {
                            *x += gy * y;
                        }
                    }
                });
                acc(v, &mut |gv| {
                    for (gyrow, arow) in g.chunks(c).zip(ad.chunks(c)) {
                        for ((x, gy), y) in gv.iter_mut().zip(gyrow).zip(arow) {
                            *x += gy * y;
                        }
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gy)| *x += gy * s)),
            &Op::AddScalar(a) => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Sigmoid(a) => acc(a, &mut |ga| {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gy * y * (1.0 - y);
                }
            }),
            &Op::Tanh(a) => acc(a, &mut |ga| {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gy * (1.0 - y * y);
                }
            }),
            &Op::Silu(a) => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for ((x, gy), &u) in ga.iter_mut().zip(g).zip(ad) {
                        let s = sigmoid(u);
                        *x += gy * s * (1.0 + u * (1.0 - s));
                    }
                })
            }
            &Op::Exp(a) => acc(a, &mut |ga| {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gy * y;
                }
            }),
            &Op::Log(a) => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for ((x, gy), u) in ga.iter_mut().zip(g).zip(ad) {
                        *x += gy / u;
                    }
                })
            }
            &Op::Clamp01(a) => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for ((x, gy), &u) in ga.iter_mut().zip(g).zip(ad) {
                        if u > 0.0 && u < 1.0 {
                            *x += gy;
                        }
                    }
                })
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            &Op::Softmax(a) => {
                let c = nodes[a.0].value.cols();
                acc(a, &mut |ga| {
                    for ((grow, gyrow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let inner = dot(gyrow, yrow);
                        for ((x, gy), y) in grow.iter_mut().zip(gyrow).zip(yrow) {
                            *x += y * (gy - inner);
                        }
                    }
                })
            }
            Op::RmsNormalize { x, inv_rms } => {
                let c = nodes[x.0].value.cols();
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for (((grow, gyrow), xrow), &r) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xd.chunks(c)).zip(inv_rms)
                    {
                        let inner = dot(gyrow, xrow);
                        let k = r * r * r * inner / c as f64;
                        for ((o, gy), xv) in grow.iter_mut().zip(gyrow).zip(xrow) {
                            *o += r * gy - k * xv;
                        }
                    }
                })
            }
            Op::RowNormalize { x, norms } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (((grow, gyrow), yrow), &n) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).zip(norms) {
                        if n == 0.0 {
                            continue;
                        }
                        let inner = dot(gyrow, yrow);
                        for ((o, gy), y) in grow.iter_mut().zip(gyrow).zip(yrow) {
                            *o += (gy - y * inner) / n;
                        }
                    }
                })
            }
            &Op::FrobNorm(a) => {
                let n = out[0];
                let ad = val(a);
                acc(a, &mut |ga| {
                    if n > 0.0 {
                        for (x, u) in ga.iter_mut().zip(ad) {
                            *x += g[0] * u / n;
                        }
                    }
                })
            }
            Op::GatherRows { src, idx } => {
                let c = nodes[src.0].value.cols();
                acc(*src, &mut |gs| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut gs[row * c..(row + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                })
            }
            Op::GatherCols { src, idx } => {
                let c = nodes[src.0].value.cols();
                let k = idx.len();
                acc(*src, &mut |gs| {
                    for (srow, grow) in gs.chunks_mut(c).zip(g.chunks(k)) {
                        for (&j, gy) in idx.iter().zip(grow) {
                            srow[j] += gy;
                        }
                    }
                })
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let v = nodes[logits.0].value.cols();
                let w = g[0] / rows.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &(row, t)) in rows.iter().enumerate() {
                        let p = &probs[r * v..(r + 1) * v];
                        let dst = &mut gl[row * v..(row + 1) * v];
                        for (x, pv) in dst.iter_mut().zip(p) {
                            *x += w * pv;
                        }
                        dst[t] -= w;
                    }
                })
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), segments, *heads, probs),
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        segments: &[(usize, usize)],
        heads: usize,
        probs: &[f64],
    ) {
        let (n, d) = self.nodes[q.0].value.dims2().unwrap();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut pos = 0;
        let mut dp = Vec::new();
        for &(s, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                let block = &probs[pos..pos + len * len];
                pos += len * len;
                for i in 0..len {
                    let p = &block[i * len..i * len + i + 1];
                    let gi = &g[(s + i) * d + off..(s + i) * d + off + dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = (s + j) * d + off;
                        dp.push(dot(gi, &vv[vj..vj + dh]));
                        for (o, gv) in dv[vj..vj + dh].iter_mut().zip(gi) {
                            *o += pj * gv;
                        }
                    }
                    let inner = dot(p, &dp);
                    let qi = (s + i) * d + off;
                    for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                        let ds = pj * (dpj - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (s + j) * d + off;
                        for c in 0..dh {
                            dq[qi + c] += ds * kv[kj + c];
                            dk[kj + c] += ds * qv[qi + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(acc) => add_into(acc, &buf),
                slot => *slot = Some(buf),
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

fn log_softmax_at(x: &[f64], t: usize) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x[t] - lse
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
