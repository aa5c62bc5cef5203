//! Tape-based reverse-mode differentiation.
//!
//! Every primitive pushes a node holding its forward value and enough of its
//! inputs to run the backward rule. [`Graph::backward`] walks the tape once in
//! reverse creation order, which is a valid topological order by construction.

use super::{DiffError, ParamGrads, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(ParamId),
    GatherParam(ParamId, Vec<usize>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    L1Norm(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Mean(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        valid: Vec<bool>,
        keep: Option<Vec<f64>>,
        weights: Vec<f64>,
    },
    LogSigmoid(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Parameters are read from an optional [`ParamStore`].
#[derive(Debug, Default)]
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
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

/// log σ(x), stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf; its gradient is available from [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn store(&self) -> Result<&'p ParamStore, DiffError> {
        self.store.ok_or(DiffError::NoParamStore)
    }

    /// Copies a whole parameter tensor onto the tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var, DiffError> {
        let store = self.store()?;
        if id.0 >= store.len() {
            return Err(DiffError::UnknownParam(id.0));
        }
        Ok(self.push(store.get(id).clone(), Op::Param(id), true))
    }

    /// Gathers rows of a 2-D parameter table without copying the rest of it.
    pub fn embedding_lookup(&mut self, id: ParamId, rows: &[usize]) -> Result<Var, DiffError> {
        let store = self.store()?;
        if id.0 >= store.len() {
            return Err(DiffError::UnknownParam(id.0));
        }
        let table = store.get(id);
        if table.shape().len() != 2 {
            return Err(mismatch("embedding_lookup", &[table.shape()]));
        }
        let value = gather(table, rows, "embedding_lookup")?;
        Ok(self.push(value, Op::GatherParam(id, rows.to_vec()), true))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(mismatch("gather_rows", &[t.shape()]));
        }
        let value = gather(t, rows, "gather_rows")?;
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), self.needs(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if ta.shape().is_empty() || tb.len() != c || tb.rows() != 1 {
            return Err(mismatch("add_row", &[ta.shape(), tb.shape()]));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddRow(a, b), needs))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Multiplies by a fixed keep-mask already scaled by `1 / keep_prob`.
    pub fn dropout(&mut self, a: Var, multipliers: Vec<f64>) -> Result<Var, DiffError> {
        let t = self.value(a);
        if multipliers.len() != t.len() {
            return Err(mismatch("dropout", &[t.shape(), &[multipliers.len()]]));
        }
        let data = t.data().iter().zip(&multipliers).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Dropout(a, multipliers), needs))
    }

    /// L1 norm over the last dimension.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.shape().is_empty() {
            return Err(mismatch("l1_norm", &[t.shape()]));
        }
        let c = t.cols();
        let data: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|x| x.abs()).sum())
            .collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let value = Tensor::new(&shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::L1Norm(a), needs))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.shape().is_empty() {
            return Err(mismatch("softmax", &[t.shape()]));
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    /// Layer normalization over the last dimension with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tx.shape().is_empty() || tg.len() != c || tb.len() != c {
            return Err(mismatch("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let mut out = Vec::with_capacity(tx.len());
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[k] + tb.data()[k]);
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(mismatch("mean", &[t.shape()]));
        }
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::Mean(a), needs))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::Sum(a), needs)
    }

    /// Σ w_i a_i with constant weights (no gradient flows into `w`).
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f64>) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.len() != w.len() {
            return Err(mismatch("weighted_sum", &[t.shape(), &[w.len()]]));
        }
        let v = t.data().iter().zip(&w).map(|(x, y)| x * y).sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(a, w), needs))
    }

    /// Concatenates rank-1 or rank-2 tensors along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .map(|v| self.value(*v))
            .ok_or_else(|| mismatch("concat", &[]))?;
        let rank = first.shape().len();
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let ok = match rank {
                1 => t.shape().len() == 1,
                2 => t.shape().len() == 2 && t.cols() == cols,
                _ => false,
            };
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|v| self.shape(*v)).collect();
                return Err(mismatch("concat", &shapes));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let shape = if rank == 1 { vec![rows] } else { vec![rows, cols] };
        let needs = parts.iter().any(|v| self.needs(*v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a);
        let value = Tensor::new(shape, t.data().to_vec())
            .map_err(|_| mismatch("reshape", &[t.shape(), shape]))?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Single-query scaled dot-product attention.
    ///
    /// `q` is `[1, n]` (or `[n]`), `k` is `[s, n]`, `v` is `[s, d]`. Slots with
    /// `valid[j] == false` get zero weight and receive no gradient. `keep`
    /// optionally multiplies the attention weights after the softmax (dropout).
    /// With no valid slot the output is a zero row.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        valid: &[bool],
        keep: Option<Vec<f64>>,
    ) -> Result<Var, DiffError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let n = tq.len();
        let s = valid.len();
        let shape_ok = tk.shape().len() == 2
            && tv.shape().len() == 2
            && tk.shape() == [s, n]
            && tv.shape()[0] == s
            && keep.as_ref().is_none_or(|m| m.len() == s);
        if !shape_ok {
            return Err(mismatch(
                "scaled_dot_attention",
                &[tq.shape(), tk.shape(), tv.shape(), &[s]],
            ));
        }
        let d = tv.cols();
        let scale = 1.0 / (n as f64).sqrt();
        let mut weights = vec![0.0; s];
        let mut out = vec![0.0; d];
        let active: Vec<usize> = (0..s).filter(|&j| valid[j]).collect();
        if !active.is_empty() {
            let mut scores: Vec<f64> = active
                .iter()
                .map(|&j| dot(tq.data(), tk.row_slice(j)) * scale)
                .collect();
            softmax_in_place(&mut scores);
            for (&j, w) in active.iter().zip(&scores) {
                weights[j] = *w;
                let we = w * keep.as_ref().map_or(1.0, |m| m[j]);
                for (o, x) in out.iter_mut().zip(tv.row_slice(j)) {
                    *o += we * x;
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(&[1, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                valid: valid.to_vec(),
                keep,
                weights,
            },
            needs,
        ))
    }

    /// −log softmax(logits)[target] for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, DiffError> {
        let t = self.value(logits);
        if t.rows() != 1 || target >= t.len() {
            return Err(mismatch("cross_entropy", &[t.shape(), &[target]]));
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Runs the backward sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients, DiffError> {
        if self.value(out).len() != 1 {
            return Err(DiffError::NonScalar(self.shape(out).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        let n_params = self.store.map_or(0, ParamStore::len);
        let mut params = ParamGrads::new(n_params);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn backprop(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamGrads,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Param(id) => {
                let dst = params.slot(*id, g.len());
                add_into(dst, g);
            }
            Op::GatherParam(id, rows) => {
                let table = self.store.expect("param node without store").get(*id);
                let c = table.cols();
                let dst = params.slot(*id, table.len());
                for (r, src) in rows.iter().zip(g.chunks(c)) {
                    add_into(&mut dst[r * c..(r + 1) * c], src);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] += dot(&g[i * n..(i + 1) * n], &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = ta.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let c = d.len();
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Relu(a) => {
                let ta = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((x, y), v) in d.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let ta = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((x, y), v) in d.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * sigmoid(-v);
                    }
                });
            }
            Op::Dropout(a, m) => {
                acc(*a, &mut |d| {
                    for ((x, y), k) in d.iter_mut().zip(g).zip(m) {
                        *x += y * k;
                    }
                });
            }
            Op::L1Norm(a) => {
                let ta = &nodes[a.0].value;
                let c = ta.cols();
                acc(*a, &mut |d| {
                    for (r, gr) in g.iter().enumerate() {
                        for k in r * c..(r + 1) * c {
                            // subgradient 0 at exactly zero
                            let s = ta.data()[k];
                            if s > 0.0 {
                                d[k] += gr;
                            } else if s < 0.0 {
                                d[k] -= gr;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let inner = dot(gr, yr);
                        for ((x, gg), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += yy * (gg - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = &nodes[gamma.0].value;
                let c = tg.len();
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((x, y), h) in d.iter_mut().zip(gr).zip(hr) {
                            *x += y * h;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(c) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), hr)) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dot(&dh, hr) / c as f64;
                        for ((o, dhk), hk) in dr.iter_mut().zip(&dh).zip(hr) {
                            *o += inv_std[r] * (dhk - mean_dh - hk * mean_dh_h);
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::WeightedSum(a, w) => {
                acc(*a, &mut |d| d.iter_mut().zip(w).for_each(|(x, y)| *x += g[0] * y));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows(a, rows) => {
                let c = nodes[a.0].value.cols();
                acc(*a, &mut |d| {
                    for (r, src) in rows.iter().zip(g.chunks(c)) {
                        add_into(&mut d[r * c..(r + 1) * c], src);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                valid,
                keep,
                weights,
            } => {
                let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let n = tq.len();
                let dv = tv.cols();
                let scale = 1.0 / (n as f64).sqrt();
                let s = valid.len();
                let kp = |j: usize| keep.as_ref().map_or(1.0, |m| m[j]);
                acc(*v, &mut |d| {
                    for j in (0..s).filter(|&j| valid[j]) {
                        let w = weights[j] * kp(j);
                        for (x, y) in d[j * dv..(j + 1) * dv].iter_mut().zip(g) {
                            *x += w * y;
                        }
                    }
                });
                // gradient w.r.t. pre-softmax scores
                let mut dw = vec![0.0; s];
                for j in (0..s).filter(|&j| valid[j]) {
                    dw[j] = dot(tv.row_slice(j), g) * kp(j);
                }
                let inner: f64 = (0..s).filter(|&j| valid[j]).map(|j| weights[j] * dw[j]).sum();
                let ds: Vec<f64> = (0..s)
                    .map(|j| if valid[j] { weights[j] * (dw[j] - inner) * scale } else { 0.0 })
                    .collect();
                acc(*q, &mut |d| {
                    for j in (0..s).filter(|&j| valid[j]) {
                        for (x, y) in d.iter_mut().zip(tk.row_slice(j)) {
                            *x += ds[j] * y;
                        }
                    }
                });
                acc(*k, &mut |d| {
                    for j in (0..s).filter(|&j| valid[j]) {
                        for (x, y) in d[j * n..(j + 1) * n].iter_mut().zip(tq.data()) {
                            *x += ds[j] * y;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                acc(*logits, &mut |d| {
                    for (i, (x, p)) in d.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *x += g[0] * (p - onehot);
                    }
                });
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn gather(t: &Tensor, rows: &[usize], op: &'static str) -> Result<Tensor, DiffError> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        if r >= n {
            return Err(DiffError::IndexOutOfRange { op, index: r, len: n });
        }
        data.extend_from_slice(t.row_slice(r));
    }
    Tensor::new(&[rows.len(), c], data)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
