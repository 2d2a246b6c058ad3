use super::array::Array;
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RowSelect(Var, Vec<usize>),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::RowSelect(..) => "row_select",
            Op::Transpose(_) => "transpose",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy_logits",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Array>,
    /// Accumulated gradient; only kept for leaves and parameters.
    grad: Option<Array>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order of the (acyclic) graph.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    checked: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            checked: cfg!(debug_assertions),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            checked: cfg!(debug_assertions),
        }
    }

    /// Toggle finiteness checks after every forward op.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(p)) => self
                .store
                .expect("parameter node without store")
                .get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf or parameter node, if any backward
    /// pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Array, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            grad: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input owned by the graph.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            grad: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value: Some(value),
            grad: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            grad: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let s = ad[i * k + kk];
                if s == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, bval) in orow.iter_mut().zip(brow) {
                    *o += s * bval;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Array::from_parts(vec![m, n], out), rg)
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return true;
        }
        let cols = self.value(a).cols();
        let b_len = self.value(b).len();
        !sa.is_empty() && b_len == cols && (sb.len() == 1 || (sb.len() == 2 && sb[0] == 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if !self.broadcast_ok(a, b) {
            return Err(self.shape_err(name, a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let bl = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, Array::from_parts(shape, data), rg)
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    /// Concatenate along the last axis. All parts must share their leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Domain("concat of zero arrays".into()))?;
        let rows = self.value(first).rows();
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(self.shape_err("concat", first, p));
            }
            total += self.value(p).cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(pv.row_slice(r));
            }
            off += c;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Array::from_parts(shape, data),
            rg,
        )
    }

    /// Stack 2-D (or 1-D, treated as one row) arrays along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Domain("concat_rows of zero arrays".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() == 0 || pv.rank() > 2 || pv.cols() != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Array::from_parts(vec![rows, cols], data),
            rg,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if av.rank() == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), Array::from_parts(shape, data), rg)
    }

    /// Gather rows of a 2-D table (embedding lookup). Result is `[ids.len(), cols]`.
    pub fn row_select(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape {
                op: "row_select",
                left: tv.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (n, c) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Lookup(format!(
                "row {bad} out of range for table with {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row_slice(i));
        }
        let rg = self.rg(table);
        self.push(
            Op::RowSelect(table, ids.to_vec()),
            Array::from_parts(vec![ids.len(), c], data),
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Array::from_parts(vec![n, m], data), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(Error::Shape {
                op: "softmax",
                left: vec![],
                right: vec![],
            });
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Array::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(Op::Softmax(a), value, rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias
    /// (both of length `cols`), `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rank() == 0 || self.value(gain).len() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect();
        let value = Array::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
            rg,
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Lookup(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[labels[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Array::scalar(loss),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Array::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Array::scalar(s), rg)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Gradients are added into the accumulators of every reachable leaf and
    /// parameter node; calling this twice on the same graph doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Domain(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param(_) => {
                    let node = &self.nodes[idx];
                    let shape = match &node.value {
                        Some(v) => v.shape().to_vec(),
                        None => self.value(Var(idx)).shape().to_vec(),
                    };
                    let node = &mut self.nodes[idx];
                    match &mut node.grad {
                        Some(acc) => acc.add_assign(&g),
                        None => node.grad = Some(Array::from_parts(shape, g)),
                    }
                }
                Op::Const => {}
                _ => {
                    let op = std::mem::replace(&mut self.nodes[idx].op, Op::Const);
                    self.propagate(&op, Var(idx), &g, &mut adj);
                    self.nodes[idx].op = op;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let acc = |v: Var, adj: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if adj[v.0].is_none() {
                adj[v.0] = Some(vec![0.0; self.value(v).len()]);
            }
            Some(v.0)
        };
        match op {
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    let bd = bv.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            da[i * k + kk] += dot(grow, brow);
                        }
                    }
                }
                if let Some(ib) = acc(*b, adj) {
                    let db = adj[ib].as_mut().unwrap();
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let s = ad[i * k + kk];
                            if s == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(ib) = acc(*b, adj) {
                    let db = adj[ib].as_mut().unwrap();
                    let bl = db.len();
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bl] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bl = bd.len();
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for (i, gv) in g.iter().enumerate() {
                        da[i] += gv * bd[i % bl];
                    }
                }
                if let Some(ib) = acc(*b, adj) {
                    let db = adj[ib].as_mut().unwrap();
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bl] += gv * ad[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.value(out).cols();
                let rows = self.value(out).rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(ip) = acc(p, adj) {
                        let dp = adj[ip].as_mut().unwrap();
                        for r in 0..rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(ip) = acc(p, adj) {
                        let dp = adj[ip].as_mut().unwrap();
                        for (d, gv) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let len = self.value(out).cols();
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for (r, grow) in g.chunks(len).enumerate() {
                        for (j, gv) in grow.iter().enumerate() {
                            da[r * c + start + j] += gv;
                        }
                    }
                }
            }
            Op::RowSelect(t, ids) => {
                let c = self.value(*t).cols();
                if let Some(it) = acc(*t, adj) {
                    let dt = adj[it].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let av = self.value(*a);
                let (m, n) = (av.shape()[0], av.shape()[1]);
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.value(out).data();
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.value(out).data();
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Softmax(a) => {
                let yv = self.value(out);
                let c = yv.cols();
                if let Some(ia) = acc(*a, adj) {
                    let da = adj[ia].as_mut().unwrap();
                    for (r, (grow, yrow)) in g.chunks(c).zip(yv.data().chunks(c)).enumerate() {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            da[r * c + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*x).cols();
                let gd = self.value(*gain).data();
                if let Some(ix) = acc(*x, adj) {
                    let dx = adj[ix].as_mut().unwrap();
                    let mut dxhat = vec![0.0; c];
                    for (r, grow) in g.chunks(c).enumerate() {
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, hrow) / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += inv_std[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
                if let Some(ig) = acc(*gain, adj) {
                    let dg = adj[ig].as_mut().unwrap();
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % c] += gv * xhat[i];
                    }
                }
                if let Some(ib) = acc(*bias, adj) {
                    let db = adj[ib].as_mut().unwrap();
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                if let Some(il) = acc(*logits, adj) {
                    let dl = adj[il].as_mut().unwrap();
                    for (i, p) in probs.iter().enumerate() {
                        dl[i] += scale * p;
                    }
                    for (r, &lab) in labels.iter().enumerate() {
                        dl[r * c + lab] -= scale;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = if matches!(op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                if let Some(ia) = acc(*a, adj) {
                    for d in adj[ia].as_mut().unwrap().iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Leaf | Op::Param(_) | Op::Const => unreachable!(),
        }
    }

    /// Gradients of every stored parameter, aligned with the store. Parameters
    /// that no backward pass reached get zeros.
    pub fn param_grads(&self) -> Gradients {
        let store = self.store.expect("param_grads on a graph without parameters");
        let arrays = (0..store.len())
            .map(|i| {
                self.param_nodes[i]
                    .and_then(|v| self.nodes[v.0].grad.clone())
                    .unwrap_or_else(|| Array::zeros(store.get(ParamId::new(i)).shape()))
            })
            .collect();
        Gradients::new(arrays)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
