//! Operation tape and reverse pass.
//!
//! Every operation appends one node holding its forward value and enough of
//! its inputs to replay the local derivative. Nodes only ever reference
//! earlier nodes, so walking the tape backwards is a valid topological order.

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Additive surrogate for `-inf` applied to masked attention scores.
pub const MASK_FILL: f64 = -1e9;

/// Norms at or below this are rejected by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Gather { table: Var, idx: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    Attention(Box<AttentionCache>),
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    groups: Vec<usize>,
    weights: Tensor,
    scale: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Output of a masked attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    pub out: Var,
    /// Attention weights as a non-differentiable node, `[queries × keys]`.
    pub weights: Var,
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
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`backward`](Self::backward); `None`
    /// for nodes the loss does not reach.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the node's shape when unreachable.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let value = matmul_raw(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(DiffError::Contract(format!(
                "transpose expects a matrix, got {:?}",
                s
            )));
        }
        let value = transpose_raw(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds vector `b` (length n) to every row of matrix `a` (m × n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(DiffError::Shape {
                op: "add_row",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sa[1];
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += bias[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| DiffError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::Axis {
                axis,
                ndim: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(DiffError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums out `axis`, dropping that dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = t.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        if !shape.is_empty() {
            shape.remove(axis);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x: a, axis }, rg))
    }

    /// Embedding lookup: picks leading-dimension slices of `table` by index.
    /// The gradient scatter-adds back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.rows();
        let w = t.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(DiffError::Contract(format!(
                    "gather index {} out of range for {} rows",
                    i, rows
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            return Err(DiffError::Contract("gather from a scalar".into()));
        }
        shape[0] = idx.len();
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_raw(self.value(a), axis, false)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_raw(self.value(a), axis, true)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax { x: a, axis }, rg))
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = t.axis_split(axis)?;
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let n = (0..len).map(|k| data[at(k)].powi(2)).sum::<f64>().sqrt();
                if n <= NORM_EPS {
                    return Err(DiffError::Degenerate(format!(
                        "slice {} has norm {:e}",
                        o * inner + i,
                        n
                    )));
                }
                for k in 0..len {
                    data[at(k)] /= n;
                }
                norms.push(n);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2Normalize { x: a, axis, norms }, rg))
    }

    /// Single-query scaled dot-product attention where each query row
    /// attends over its own group of keys.
    ///
    /// `q` is `[m × d]`, `k` and `v` are `[g × l × d]`, `groups[i]` names the
    /// key group for query `i`, and `mask` (`g × l`, row-major) marks valid
    /// keys. Scores are `q·k / √d`; masked keys get [`MASK_FILL`] before the
    /// softmax and end up with weight exactly zero.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: &[usize],
        mask: &[bool],
    ) -> Result<AttentionOut> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 3 || sk != sv || sk[2] != sq[1] {
            return Err(DiffError::Shape {
                op: "attention",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (m, d) = (sq[0], sq[1]);
        let (g, l) = (sk[0], sk[1]);
        if groups.len() != m || mask.len() != g * l {
            return Err(DiffError::Contract(format!(
                "attention expects {} group ids and {} mask bits, got {} and {}",
                m,
                g * l,
                groups.len(),
                mask.len()
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut weights = vec![0.0; m * l];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let grp = groups[i];
            if grp >= g {
                return Err(DiffError::Contract(format!(
                    "group {} out of range for {} groups",
                    grp, g
                )));
            }
            let gmask = &mask[grp * l..(grp + 1) * l];
            if !gmask.iter().any(|&b| b) {
                return Err(DiffError::Degenerate(format!(
                    "query {} has every key masked",
                    i
                )));
            }
            let qi = &qd[i * d..(i + 1) * d];
            let w = &mut weights[i * l..(i + 1) * l];
            for j in 0..l {
                let kj = &kd[(grp * l + j) * d..(grp * l + j + 1) * d];
                let s = dot(qi, kj) * scale;
                w[j] = if gmask[j] { s } else { s + MASK_FILL };
            }
            softmax_slice(w);
            let oi = &mut out[i * d..(i + 1) * d];
            for j in 0..l {
                if w[j] == 0.0 {
                    continue;
                }
                let vj = &vd[(grp * l + j) * d..(grp * l + j + 1) * d];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += w[j] * x;
                }
            }
        }
        let weights = Tensor::new(vec![m, l], weights)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let weights_var = self.constant(weights.clone());
        let out = self.push(
            Tensor::new(vec![m, d], out)?,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                groups: groups.to_vec(),
                weights,
                scale,
            })),
            rg,
        );
        Ok(AttentionOut {
            out,
            weights: weights_var,
        })
    }

    /// Attention of `nq` queries over one shared key set (`k`, `v` are
    /// `[nk × d]`). Returns the output `[nq × d]` and weights `[nq × nk]`.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
    ) -> Result<AttentionOut> {
        let (sk, sv) = (self.shape(k).to_vec(), self.shape(v).to_vec());
        if sk.len() != 2 || sk != sv {
            return Err(DiffError::Shape {
                op: "attention",
                lhs: sk,
                rhs: sv,
            });
        }
        let k3 = self.reshape(k, &[1, sk[0], sk[1]])?;
        let v3 = self.reshape(v, &[1, sv[0], sv[1]])?;
        let nq = self.shape(q).first().copied().unwrap_or(0);
        self.grouped_attention(q, k3, v3, &vec![0; nq], key_mask)
    }

    /// Mean binary cross entropy of `logits` (any shape) against 0/1 targets,
    /// computed in the overflow-free form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != targets.len() || x.is_empty() {
            return Err(DiffError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b));
                    accumulate(grads, *a, &matmul_raw(g, &bt));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a));
                    accumulate(grads, *b, &matmul_raw(&at, g));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, &transpose_raw(g)),
            Op::Add(a, b) => {
                accumulate_if(self, grads, *a, g);
                accumulate_if(self, grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate_if(self, grads, *a, g);
                if self.rg(*b) {
                    accumulate_fn(grads, *b, g.shape(), gd.iter().map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    accumulate_fn(grads, *a, g.shape(), gd.iter().zip(vb).map(|(x, y)| x * y));
                }
                if self.rg(*b) {
                    accumulate_fn(grads, *b, g.shape(), gd.iter().zip(va).map(|(x, y)| x * y));
                }
            }
            Op::AddRow(a, b) => {
                accumulate_if(self, grads, *a, g);
                if self.rg(*b) {
                    let n = self.shape(*b)[0];
                    let mut gb = vec![0.0; n];
                    for (i, x) in gd.iter().enumerate() {
                        gb[i % n] += x;
                    }
                    accumulate(grads, *b, &Tensor::vector(gb));
                }
            }
            Op::Scale(a, c) => accumulate_fn(grads, *a, g.shape(), gd.iter().map(|x| x * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate_fn(grads, *a, &shape, gd.iter().copied());
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        let shape = self.shape(v).to_vec();
                        accumulate_fn(grads, v, &shape, part.into_iter());
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).numel();
                accumulate_fn(grads, *a, &shape, std::iter::repeat(gd[0]).take(n));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).numel();
                let v = gd[0] / n.max(1) as f64;
                accumulate_fn(grads, *a, &shape, std::iter::repeat(v).take(n));
            }
            Op::SumAxis { x, axis } => {
                let t = self.value(*x);
                let (outer, len, inner) = t.axis_split(*axis).expect("checked in forward");
                let mut out = vec![0.0; t.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            out[(o * len + k) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                let shape = t.shape().to_vec();
                accumulate_fn(grads, *x, &shape, out.into_iter());
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                accumulate_fn(
                    grads,
                    *a,
                    g.shape(),
                    gd.iter().zip(va).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate_fn(
                    grads,
                    *a,
                    g.shape(),
                    gd.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)),
                );
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let w = t.row_len();
                let mut out = vec![0.0; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..w {
                        out[i * w + c] += gd[r * w + c];
                    }
                }
                let shape = t.shape().to_vec();
                accumulate_fn(grads, *table, &shape, out.into_iter());
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = y.axis_split(*axis).expect("checked in forward");
                let yd = y.data();
                let mut out = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dotp: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = yd[at(k)] * (gd[at(k)] - dotp);
                        }
                    }
                }
                accumulate_fn(grads, *x, y.shape(), out.into_iter());
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = y.axis_split(*axis).expect("checked in forward");
                let yd = y.data();
                let mut out = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..len).map(|k| gd[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = gd[at(k)] - yd[at(k)].exp() * gsum;
                        }
                    }
                }
                accumulate_fn(grads, *x, y.shape(), out.into_iter());
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = &node.value;
                let (outer, len, inner) = y.axis_split(*axis).expect("checked in forward");
                let yd = y.data();
                let mut out = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let n = norms[o * inner + i];
                        let dotp: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = (gd[at(k)] - yd[at(k)] * dotp) / n;
                        }
                    }
                }
                accumulate_fn(grads, *x, y.shape(), out.into_iter());
            }
            Op::Attention(cache) => self.attention_backward(cache, gd, grads),
            Op::BceWithLogits { logits, targets } => {
                let x = self.value(*logits);
                let n = targets.len() as f64;
                let vals: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| gd[0] * (sigmoid(z) - y) / n)
                    .collect();
                let shape = x.shape().to_vec();
                accumulate_fn(grads, *logits, &shape, vals.into_iter());
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (m, d) = (qv.shape()[0], qv.shape()[1]);
        let l = kv.shape()[1];
        let (qd, kd, vd, wd) = (qv.data(), kv.data(), vv.data(), c.weights.data());
        let mut gq = vec![0.0; qv.numel()];
        let mut gk = vec![0.0; kv.numel()];
        let mut gv = vec![0.0; vv.numel()];
        let mut ds = vec![0.0; l];
        for i in 0..m {
            let grp = c.groups[i];
            let go = &gd[i * d..(i + 1) * d];
            let w = &wd[i * l..(i + 1) * l];
            let mut wdot = 0.0;
            for j in 0..l {
                let base = (grp * l + j) * d;
                let dw = dot(go, &vd[base..base + d]);
                ds[j] = dw;
                wdot += w[j] * dw;
                if w[j] != 0.0 {
                    for t in 0..d {
                        gv[base + t] += w[j] * go[t];
                    }
                }
            }
            let qi = &qd[i * d..(i + 1) * d];
            for j in 0..l {
                let s = w[j] * (ds[j] - wdot) * c.scale;
                if s == 0.0 {
                    continue;
                }
                let base = (grp * l + j) * d;
                for t in 0..d {
                    gq[i * d + t] += s * kd[base + t];
                    gk[base + t] += s * qi[t];
                }
            }
        }
        if self.rg(c.q) {
            accumulate_fn(grads, c.q, qv.shape(), gq.into_iter());
        }
        if self.rg(c.k) {
            accumulate_fn(grads, c.k, kv.shape(), gk.into_iter());
        }
        if self.rg(c.v) {
            accumulate_fn(grads, c.v, vv.shape(), gv.into_iter());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    accumulate_fn(grads, v, g.shape(), g.data().iter().copied());
}

fn accumulate_if(tape: &Tape, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    if tape.rg(v) {
        accumulate(grads, v, g);
    }
}

fn accumulate_fn(
    grads: &mut [Option<Tensor>],
    v: Var,
    shape: &[usize],
    vals: impl Iterator<Item = f64>,
) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(vals) {
                *e += x;
            }
        }
        slot @ None => {
            let data: Vec<f64> = vals.collect();
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// In-place max-shifted softmax of one slice.
fn softmax_slice(w: &mut [f64]) {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in w.iter_mut() {
        *x /= total;
    }
}

fn softmax_raw(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(DiffError::Numeric("NaN entering softmax".into()));
    }
    let (outer, len, inner) = t.axis_split(axis)?;
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|k| (src[at(k)] - max).exp()).sum();
            let lse = total.ln();
            for k in 0..len {
                let shifted = src[at(k)] - max;
                out[at(k)] = if log {
                    shifted - lse
                } else {
                    shifted.exp() / total
                };
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
