use super::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: Var },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    IndexRows { x: Var, idx: Arc<[usize]> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    PickPerRow { x: Var, idx: Arc<[usize]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient accumulator; only leaves keep one.
    grad: Option<Tensor>,
}

/// A recorded computation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for backpropagation. Stochastic helpers draw from a
/// ChaCha stream seeded at construction: rebuilding a graph with the same seed
/// and inputs replays bit-identical values.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self { nodes: Vec::new(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            bail!(Shape, "{what}: shapes {sa:?} and {sb:?} differ");
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `x[n×d] + b` with `b` holding `d` values, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(b).numel() != d {
            bail!(
                Shape,
                "bias of shape {:?} does not match row width {d}",
                self.value(b).shape()
            );
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::AddRowBias(x, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            bail!(Shape, "softmax axis {axis} out of range for shape {shape:?}");
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row softmax over a matrix where `mask[r*m + c] == false` entries are
    /// excluded and come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if mask.len() != n * m {
            bail!(Shape, "mask of length {} does not cover a {n}x{m} matrix", mask.len());
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let keep = &mask[r * m..(r + 1) * m];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !keep.contains(&true) {
                bail!(Contract, "attention row {r} admits no keys");
            }
            if row.iter().zip(keep).any(|(v, &k)| k && !v.is_finite()) {
                bail!(Numeric, "non-finite attention score in row {r}");
            }
            let mut total = 0.0;
            for c in 0..m {
                if keep[c] {
                    let e = (row[c] - max).exp();
                    out[r * m + c] = e;
                    total += e;
                }
            }
            for c in 0..m {
                out[r * m + c] /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MaskedSoftmax { x }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.cols();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.chunks(m).zip(out.chunks_mut(m)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), rg))
    }

    /// Per-row normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            bail!(Parameter, "layer_norm eps must be positive, got {eps}");
        }
        let t = self.value(x);
        let d = t.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            bail!(
                Shape,
                "gamma {:?} / beta {:?} must match last dimension {d}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            );
        }
        let shape = t.shape().to_vec();
        let src = t.data();
        let rows = src.len() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if idx.is_empty() {
            bail!(Shape, "index_rows with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            bail!(Index, "row {bad} out of range for {n} rows");
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::IndexRows { x, idx: idx.into() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat_rows of nothing");
        };
        let d = self.value(first).dims2()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                bail!(Shape, "concat_rows: width {c} differs from {d}");
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![rows, d], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if len == 0 || start + len > d {
            bail!(Shape, "column slice {start}..{} out of range for width {d}", start + len);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat_cols of nothing");
        };
        let n = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                bail!(Shape, "concat_cols: {r} rows differ from {n}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if idx.len() != n {
            bail!(Shape, "{} indices for {n} rows", idx.len());
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            bail!(Index, "column {bad} out of range for width {m}");
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| src[r * m + c]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::PickPerRow { x, idx: idx.into() }, rg))
    }

    /// `x · w + b` for a weight of shape `[in, out]` and a bias of `out` values.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Reverse-mode sweep from a scalar.
    ///
    /// Leaf gradients accumulate across calls; call [`Graph::zero_grad`] to
    /// reset them. Intermediate gradients are local to each sweep, so a second
    /// call adds exactly one more copy of every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(g) => g.add_assign(&dy),
                    slot => *slot = Some(dy),
                }
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::from_parts(like.shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(vb.data()).map(|(g, x)| g * x).collect();
                let db = dy.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                send(*a, shaped(va, da));
                send(*b, shaped(vb, db));
            }
            Op::Scale(a, k) => send(*a, dy.map(|v| v * k)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let like = self.value(*a);
                send(*a, shaped(like, dy.data().to_vec()));
            }
            Op::AddRowBias(x, b) => {
                let d = dy.cols();
                let mut db = vec![0.0; d];
                for row in dy.data().chunks(d) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                send(*x, dy.clone());
                send(*b, shaped(self.value(*b), db));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(dy.data(), vb.data(), &mut da, m, n, k);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(va.data(), dy.data(), &mut db, m, k, n);
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => send(*a, dy.transpose().expect("rank-2 gradient")),
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let (yd, gd) = (y.data(), dy.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + j;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                send(*x, shaped(y, dx));
            }
            Op::MaskedSoftmax { x } => {
                let m = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*x, shaped(y, dx));
            }
            Op::LogSoftmax(x) => {
                let m = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.chunks_mut(m)) {
                    let total: f64 = gr.iter().sum();
                    for c in 0..m {
                        dr[c] = gr[c] - yr[c].exp() * total;
                    }
                }
                send(*x, shaped(y, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = y.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; y.numel()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let g = &dy.data()[r * d..(r + 1) * d];
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for c in 0..d {
                        dg[c] += g[c] * h[c];
                        db[c] += g[c];
                        let gh = g[c] * gam[c];
                        sum_gh += gh;
                        sum_ghh += gh * h[c];
                    }
                    let (mean_gh, mean_ghh) = (sum_gh / d as f64, sum_ghh / d as f64);
                    for c in 0..d {
                        dx[r * d + c] = rs * (g[c] * gam[c] - mean_gh - h[c] * mean_ghh);
                    }
                }
                send(*x, shaped(y, dx));
                send(*gamma, shaped(self.value(*gamma), dg));
                send(*beta, shaped(self.value(*beta), db));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, g)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                send(*x, shaped(xv, dx));
            }
            Op::Tanh(x) => {
                let dx = y.data().iter().zip(dy.data()).map(|(t, g)| g * (1.0 - t * t)).collect();
                send(*x, shaped(y, dx));
            }
            Op::Sum(x) => {
                let like = self.value(*x);
                send(*x, Tensor::full(like.shape(), dy.item()));
            }
            Op::Mean(x) => {
                let like = self.value(*x);
                send(*x, Tensor::full(like.shape(), dy.item() / like.numel() as f64));
            }
            Op::IndexRows { x, idx } => {
                let like = self.value(*x);
                let d = like.cols();
                let mut dx = vec![0.0; like.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += dy.data()[k * d + c];
                    }
                }
                send(*x, shaped(like, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let like = self.value(p);
                    let n = like.numel();
                    send(p, shaped(like, dy.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let like = self.value(*x);
                let (n, d) = (like.rows(), like.cols());
                let len = y.cols();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&dy.data()[r * len..(r + 1) * len]);
                }
                send(*x, shaped(like, dx));
            }
            Op::ConcatCols(parts) => {
                let n = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let like = self.value(p);
                    let w = like.cols();
                    let mut dp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        dp.extend_from_slice(&dy.data()[r * total + offset..r * total + offset + w]);
                    }
                    send(p, shaped(like, dp));
                    offset += w;
                }
            }
            Op::PickPerRow { x, idx } => {
                let like = self.value(*x);
                let m = like.cols();
                let mut dx = vec![0.0; like.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * m + c] = dy.data()[r];
                }
                send(*x, shaped(like, dx));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
