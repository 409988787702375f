use std::rc::Rc;

use super::{matmul_into, softmax_rows, Tensor};
use crate::attention::kernel;
use crate::attention::RoutingPlan;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    MeanTokens { x: Var, tokens: usize },
    Reshape(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, indices: Rc<Vec<usize>> },
    StopGradient(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogits { logits: Var, labels: Rc<Vec<f64>> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Option<Rc<RoutingPlan>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// A graph is built fresh for every forward pass. [`Graph::grad`] does not
/// consume or mutate the recorded nodes, so the same graph can be
/// differentiated repeatedly (for example with respect to different
/// parameter subsets); it is freed when dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::StopGradient(_) => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf { requires_grad }, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by", "scale must be a scalar"));
        }
        let sv = self.scalar_value(s);
        let out = self.map(a, |x| x * sv);
        self.push(out, Op::ScaleBy(a, s), "scale_by")
    }

    /// `x[..., n] + b[n]` applied to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.shape().len() != 1 || tb.len() != tx.last_dim() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let n = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::AddBias(x, b), "add_bias")
    }

    /// Matrix product of `a` (leading dims flattened into rows) with a 2-D `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, super::sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("sqrt of non-positive value".into()));
        }
        let out = self.map(a, f64::sqrt);
        self.push(out, Op::Sqrt(a), "sqrt")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().contains(&0.0) {
            return Err(Error::NonFinite("reciprocal of zero".into()));
        }
        let out = self.map(a, |x| 1.0 / x);
        self.push(out, Op::Recip(a), "recip")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Mean over the middle (token) axis: `[N, H, d] -> [N, d]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 {
            return Err(Error::shape("mean_tokens", format!("{:?}", t.shape())));
        }
        let (n, h, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            for i in 0..h {
                let row = &t.data()[(b * h + i) * d..(b * h + i + 1) * d];
                for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += v / h as f64;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        self.push(out, Op::MeanTokens { x, tokens: h }, "mean_tokens")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let rows = self.value(*first).rows();
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let mut width = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape()[..t.shape().len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs leading {lead:?}", t.shape()),
                ));
            }
            width += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::ConcatLast(parts.to_vec()), "concat_last")
    }

    /// Stacks 2-D matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(*first).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.last_dim() != cols {
                return Err(Error::shape("concat_rows", format!("{:?}", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Row lookup `table[indices[i], :]`; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), d], data);
        let indices = Rc::new(indices.to_vec());
        self.push(out, Op::GatherRows { table, indices }, "gather_rows")
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient(a), "stop_gradient")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), t.last_dim()));
        self.push(out, Op::Softmax(a), "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push(out, op, "layer_norm")
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} labels", t.len(), labels.len()),
            ));
        }
        let n = labels.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            logits,
            labels: Rc::new(labels.to_vec()),
        };
        self.push(Tensor::scalar(loss), op, "bce_with_logits")
    }

    /// Multi-head scaled dot-product attention over `[N, H, d]` projections.
    ///
    /// With `plan == None` every query sees every key. Otherwise each query
    /// only sees the keys of its routed blocks. The plan is a constant of
    /// the graph: no gradient flows through routing.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Option<Rc<RoutingPlan>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape().len() != 3 || tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let dims = kernel::Dims::new(tq.shape()[0], tq.shape()[1], tq.shape()[2], heads)?;
        if let Some(p) = &plan {
            p.check(dims.batch * heads, dims.seq)?;
        }
        let (out, probs) =
            kernel::forward(tq.data(), tk.data(), tv.data(), dims, plan.as_deref(), true);
        let out = Tensor::from_parts(tq.shape().to_vec(), out);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            plan,
            probs,
        };
        self.push(out, op, "attention")
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `params`.
    ///
    /// Every entry of `params` must be a leaf created with
    /// `requires_grad = true` that is an ancestor of `loss`. A parameter
    /// that reaches the loss only through [`Graph::stop_gradient`] gets an
    /// all-zero gradient; one that does not reach the loss at all is an
    /// error.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for p in params {
            match self.nodes[p.0].op {
                Op::Leaf {
                    requires_grad: true,
                } => {}
                _ => return Err(Error::NotAParameter(p.0)),
            }
        }
        let reachable = self.ancestors(loss);
        if let Some(p) = params.iter().find(|p| !reachable[p.0]) {
            return Err(Error::NotInGraph(p.0));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop(id, &g, &mut grads)?;
        }
        Ok(params
            .iter()
            .map(|p| {
                grads[p.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*p).shape()))
            })
            .collect())
    }

    fn ancestors(&self, root: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        seen[root.0] = true;
        while let Some(v) = stack.pop() {
            for p in parents(&self.nodes[v.0].op) {
                if !seen[p.0] {
                    seen[p.0] = true;
                    stack.push(p);
                }
            }
        }
        seen
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        match &node.op {
            Op::Leaf { .. } | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, like(g, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, like(ta, ga));
                self.accumulate(grads, *b, like(tb, gb));
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, like(g, gd.iter().map(|v| v * f).collect()));
            }
            Op::ScaleBy(a, s) => {
                let sv = self.scalar_value(*s);
                let ta = self.value(*a);
                self.accumulate(grads, *a, like(ta, gd.iter().map(|v| v * sv).collect()));
                let gs: f64 = gd.iter().zip(ta.data()).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *s, like(self.value(*s), vec![gs]));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    gb[i % n] += v;
                }
                self.accumulate(grads, *b, like(self.value(*b), gb));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), tb.shape()[0], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = G * B^T
                    let bt = tb.transpose()?;
                    let mut ga = vec![0.0; m * k];
                    matmul_into(gd, bt.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, like(ta, ga));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * G
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let arow = ta.row(r);
                        let grow = &gd[r * n..(r + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, like(tb, gb));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, like(g, ga));
            }
            Op::Sigmoid(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, like(g, ga));
            }
            Op::Sqrt(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, y)| g * 0.5 / y).collect();
                self.accumulate(grads, *a, like(g, ga));
            }
            Op::Recip(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, y)| -g * y * y).collect();
                self.accumulate(grads, *a, like(g, ga));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(ta.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(ta.shape(), gd[0] / ta.len() as f64));
            }
            Op::MeanTokens { x, tokens } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let mut gx = vec![0.0; tx.len()];
                for (r, chunk) in gx.chunks_mut(d).enumerate() {
                    let b = r / tokens;
                    for (o, v) in chunk.iter_mut().zip(&gd[b * d..(b + 1) * d]) {
                        *o = v / *tokens as f64;
                    }
                }
                self.accumulate(grads, *x, like(tx, gx));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, like(self.value(*a), gd.to_vec()));
            }
            Op::ConcatLast(parts) => {
                let rows = out.rows();
                let width = out.last_dim();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.last_dim();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(tp.len());
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * width + offset..r * width + offset + w]);
                        }
                        self.accumulate(grads, *p, like(tp, gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    self.accumulate(grads, *p, like(tp, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::GatherRows { table, indices } => {
                let tt = self.value(*table);
                let d = tt.last_dim();
                let mut gt = vec![0.0; tt.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, like(tt, gt));
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                let mut ga = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        ga[r * d + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, like(out, ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let rows = out.rows();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; out.len()];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_gh_h = 0.0;
                    for c in 0..d {
                        gg[c] += gr[c] * hr[c];
                        gb[c] += gr[c];
                        let gh = gr[c] * tg.data()[c];
                        sum_gh += gh;
                        sum_gh_h += gh * hr[c];
                    }
                    let (mean_gh, mean_gh_h) = (sum_gh / d as f64, sum_gh_h / d as f64);
                    for c in 0..d {
                        let gh = gr[c] * tg.data()[c];
                        gx[r * d + c] = inv_std[r] * (gh - mean_gh - hr[c] * mean_gh_h);
                    }
                }
                self.accumulate(grads, *x, like(out, gx));
                self.accumulate(grads, *gamma, like(tg, gg));
                self.accumulate(grads, *beta, like(self.value(*beta), gb));
            }
            Op::BceWithLogits { logits, labels } => {
                let tl = self.value(*logits);
                let n = labels.len() as f64;
                let gl = tl
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&z, &y)| gd[0] * (super::sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, like(tl, gl));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let s = tq.shape();
                let dims = kernel::Dims::new(s[0], s[1], s[2], *heads)?;
                let (gq, gk, gv) = kernel::backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    gd,
                    dims,
                    plan.as_deref(),
                );
                self.accumulate(grads, *q, like(tq, gq));
                self.accumulate(grads, *k, like(tk, gk));
                self.accumulate(grads, *v, like(tv, gv));
            }
        }
        Ok(())
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ScaleBy(a, b)
        | Op::AddBias(a, b)
        | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Sqrt(a)
        | Op::Recip(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::StopGradient(a)
        | Op::Softmax(a) => vec![*a],
        Op::MeanTokens { x, .. } => vec![*x],
        Op::ConcatLast(p) | Op::ConcatRows(p) => p.clone(),
        Op::GatherRows { table, .. } => vec![*table],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::BceWithLogits { logits, .. } => vec![*logits],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let gr = g.grad(y, &[x]).unwrap();
        assert_eq!(gr[0].data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![0.3, -1.2, 2.0, 0.0])).unwrap();
        let s = g.softmax(v).unwrap();
        let l = g.sum(s).unwrap();
        let gr = g.grad(l, &[v]).unwrap();
        assert!(gr[0].data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let w = g.scale(v, 2.0).unwrap();
        assert!(matches!(g.grad(w, &[v]), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_param_is_an_error() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(1.0)).unwrap();
        let b = g.param(Tensor::scalar(2.0)).unwrap();
        let l = g.mul(a, a).unwrap();
        assert!(matches!(g.grad(l, &[a, b]), Err(Error::NotInGraph(_))));
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.grad(l, &[c]), Err(Error::NotAParameter(_))));
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.5, -2.0])).unwrap();
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(s).data(), &[1.5, -2.0]);
    }

    #[test]
    fn straight_through_gradients() {
        // d/dz (z + sg(s - z)) = 1 and d/ds = 0, summed through a sum().
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![0.2, -0.7, 1.1])).unwrap();
        let s = g.param(Tensor::vector(vec![1.0, 0.0, -3.0])).unwrap();
        let diff = g.sub(s, z).unwrap();
        let sg = g.stop_gradient(diff).unwrap();
        let q = g.add(z, sg).unwrap();
        assert!(g.value(q).max_abs_diff(g.value(s)) < 1e-12);
        let l = g.sum(q).unwrap();
        let gr = g.grad(l, &[z, s]).unwrap();
        assert_eq!(gr[0].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(gr[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn graph_is_reusable() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let a = g.grad(y, &[x]).unwrap();
        let b = g.grad(y, &[x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_norm_known_rows() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::matrix(2, 3, vec![5.0, 5.0, 5.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let gamma = g.constant(Tensor::filled(&[3], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).row(0).iter().all(|v| *v == 0.0));
        let r = g.value(y).row(1);
        assert!(r.iter().sum::<f64>().abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let gamma = g.constant(Tensor::filled(&[2], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!(g.value(y).max_abs_diff(&Tensor::vector(vec![1.0, -1.0])) < 1e-9);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300)).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }
}
