use std::borrow::Cow;
use std::collections::HashMap;

use super::ops::{log_softmax_row, matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Vec<F>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<F>,
        count: usize,
    },
}

struct Node<'p, F: Real> {
    value: Cow<'p, [F]>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// Parameter leaves borrow their storage for `'p`, so a tape never copies
/// model weights. Drop the tape before mutating the parameters it borrowed.
pub struct Tape<'p, F: Real> {
    nodes: Vec<Node<'p, F>>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<'p, F: Real> Default for Tape<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Cow<'p, [F]>,
        shape: Vec<usize>,
        op: Op<F>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), shape, op, rg)
    }

    /// Registers a named parameter. Repeated registration returns the same handle.
    pub fn param(&mut self, name: &str, t: &'p Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        );
        self.params.insert(name.to_string(), v);
        v
    }

    /// Borrowed input; differentiable only if `t.requires_grad`.
    pub fn input(&mut self, t: &'p Tensor<F>) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Owned leaf; differentiable only if `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Var {
        self.push(Cow::Owned(data), shape.to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.to_vec()).expect("tape node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::contract(format!(
                "{op}: expected a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_op(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_op(out, vec![m, n], Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let x = self.value(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push_op(out, vec![n, m], Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + row[1×n]`, the row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", &[m, n], self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push_op(out, vec![m, n], Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, Op::Scale(x, s), &[x])
    }

    /// Adds a non-differentiable tensor, e.g. positional encodings or `-inf` masks.
    pub fn add_const(&mut self, x: Var, c: &[F]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape("add_const", self.shape(x), &[c.len()]));
        }
        let out = self.value(x).iter().zip(c).map(|(&a, &b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(out, shape, Op::AddConst(x), &[x]))
    }

    /// Multiplies by a non-differentiable tensor, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[c.len()]));
        }
        let out = self.value(x).iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(out, shape, Op::MulConst(x, c), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax with max subtraction. `-inf` entries act as masks.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            if row.iter().all(|v| *v == F::neg_infinity()) {
                return Err(Error::NonFinite { op: "softmax_rows" });
            }
            softmax_in_place(row);
        }
        Ok(self.push_op(out, vec![m, n], Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", &[m, n], self.shape(gain)));
        }
        let nf = F::cast_f64(n as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut normed = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let z = (row[j] - mean) * r;
                normed[i * n + j] = z;
                out[i * n + j] = z * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            out,
            vec![m, n],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table` (V×d) by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        let t = self.value(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    id,
                    vocab: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push_op(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks 2-D tensors of equal width vertically, in order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push_op(out, vec![rows, n], Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push_op(out, vec![m, n], Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if start + len > m {
            return Err(Error::shape("slice_rows", &[m, n], &[start + len, n]));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push_op(out, vec![len, n], Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[m, start + len]));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        Ok(self.push_op(out, vec![m, len], Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<F>();
        self.push_op(vec![s], vec![], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::cast_f64(n as f64))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (T×V). Rows whose target equals `pad` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (t, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        let count = targets.iter().filter(|&&id| id != pad).count();
        if count == 0 {
            return Err(Error::DegenerateBatch(
                "cross_entropy: every target position is padding".into(),
            ));
        }
        let xs = self.value(logits);
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for (i, &id) in targets.iter().enumerate() {
            if id == pad {
                continue;
            }
            if id >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    id,
                    vocab: v,
                });
            }
            let row = &xs[i * v..(i + 1) * v];
            if row.iter().any(|x| x.is_nan()) {
                return Err(Error::NonFinite {
                    op: "cross_entropy",
                });
            }
            let ls = log_softmax_row(row);
            total -= ls[id];
            for (p, l) in probs[i * v..(i + 1) * v].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let loss = total / F::cast_f64(count as f64);
        Ok(self.push_op(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let names = self.params.iter().map(|(k, &v)| (k.clone(), v)).collect();
        Ok(Gradients { grads, names })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<'p, F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let bv = self.value(*b);
                self.acc(grads, *a, |ga| matmul_nt_into(g, bv, ga, m, n, k));
                let av = self.value(*a);
                self.acc(grads, *b, |gb| matmul_tn_into(av, g, gb, k, m, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let bv = self.value(*b);
                self.acc(grads, *a, |ga| matmul_into(g, bv, ga, m, n, k));
                let av = self.value(*a);
                self.acc(grads, *b, |gb| matmul_tn_into(g, av, gb, n, m, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                let n = self.value(*row).len();
                self.acc(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                self.acc(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                let av = self.value(*a);
                self.acc(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * s;
                    }
                });
            }
            Op::AddConst(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::MulConst(x, c) => {
                self.acc(grads, *x, |gx| {
                    for ((o, &v), &m) in gx.iter_mut().zip(g).zip(c) {
                        *o += v * m;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += v * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.shape[1];
                let y = &node.value;
                self.acc(grads, *x, |gx| {
                    for ((gx_row, g_row), y_row) in
                        gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                    {
                        let dot: F = g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let n = node.shape[1];
                let nf = F::cast_f64(n as f64);
                let gv = self.value(*gain);
                self.acc(grads, *x, |gx| {
                    for (i, ((gx_row, g_row), z_row)) in gx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(normed.chunks(n))
                        .enumerate()
                    {
                        let mut mean_dz = F::zero();
                        let mut mean_dz_z = F::zero();
                        for j in 0..n {
                            let dz = g_row[j] * gv[j];
                            mean_dz += dz;
                            mean_dz_z += dz * z_row[j];
                        }
                        mean_dz /= nf;
                        mean_dz_z /= nf;
                        for j in 0..n {
                            let dz = g_row[j] * gv[j];
                            gx_row[j] += rstd[i] * (dz - mean_dz - z_row[j] * mean_dz_z);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (g_row, z_row) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            gg[j] += g_row[j] * z_row[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for g_row in g.chunks(n) {
                        add_into(gb, g_row);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                self.acc(grads, *table, |gt| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(grads, p, |gp| {
                        for (gp_row, g_row) in gp.chunks_mut(w).zip(g.chunks(n)) {
                            add_into(gp_row, &g_row[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                self.acc(grads, *x, |gx| {
                    add_into(&mut gx[start * n..start * n + g.len()], g)
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.shape[1];
                let n = self.shape(*x)[1];
                self.acc(grads, *x, |gx| {
                    for (gx_row, g_row) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut gx_row[*start..start + len], g_row);
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / F::cast_f64(*count as f64);
                self.acc(grads, *logits, |gl| {
                    for (i, &id) in targets.iter().enumerate() {
                        if id == *pad {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *o += p * scale;
                        }
                        row[id] -= scale;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let c = F::cast_f64(GELU_C);
    let k = F::cast_f64(GELU_K);
    let half = F::cast_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::cast_f64(GELU_C);
    let k = F::cast_f64(GELU_K);
    let half = F::cast_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    let dt = c * (F::one() + F::cast_f64(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dt
}

/// Gradients produced by one backward pass, indexed by leaf handle or parameter name.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    names: Vec<(String, Var)>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn named(&self, name: &str) -> Option<&[F]> {
        self.names
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|(n, _)| n.as_str())
    }

    /// Adds each named gradient into the matching tensor's `grad` buffer.
    /// Parameters that did not receive a gradient are left untouched.
    pub fn accumulate_into<'a, I>(&self, params: I)
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<F>)>,
    {
        for (name, t) in params {
            let Some(g) = self.named(name) else {
                continue;
            };
            match &mut t.grad {
                Some(acc) => add_into(acc, g),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn param_registration_is_shared() {
        let p = Tensor::<f64>::full(&[1, 2], 1.0).with_grad(true);
        let mut tape = Tape::new();
        let a = tape.param("p", &p);
        let b = tape.param("p", &p);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.named("p").unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_tape_records_no_grads() {
        let p = Tensor::<f32>::full(&[1, 2], 1.0).with_grad(true);
        let mut tape = Tape::inference();
        let a = tape.param("p", &p);
        let loss = tape.sum(a);
        assert!(!tape.requires_grad(loss));
        let g = tape.backward(loss).unwrap();
        assert!(g.named("p").is_none());
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 0], 0),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            tape.cross_entropy(l, &[1, 5], 0),
            Err(Error::Index { id: 5, .. })
        ));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }
}
