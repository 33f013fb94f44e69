use crate::error::{contract_err, dim_err, Error, Result};

use super::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Reparam { mu: Var, logvar: Var, eps: Var },
    LogSoftmax(Var),
    SelectCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Operations are evaluated eagerly and appended in execution order, so the
/// node list is already a topological order. [`Tape::backward`] walks it in
/// reverse once and accumulates into the gradients of `requires_grad` leaves.
/// Gradients persist across `backward` calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Result shape of a broadcasting elementwise binary op.
fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        dim_err(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(t.sum())),
        Some(ax) => {
            if ax >= t.shape().len() {
                return dim_err(format!("axis {ax} out of range for shape {:?}", t.shape()));
            }
            let (outer, len, inner) = axis_split(t.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            let d = t.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(ax);
            Tensor::from_vec(shape, out)
        }
    }
}

fn reduce_count(t: &Tensor, axis: Option<usize>) -> usize {
    match axis {
        None => t.numel(),
        Some(ax) => t.shape()[ax],
    }
}

/// Broadcasts a reduced gradient back over the reduced axis.
fn expand(g: &Tensor, shape: &[usize], axis: Option<usize>, factor: f64) -> Tensor {
    let n: usize = shape.iter().product();
    match axis {
        None => Tensor::full(shape, g.item() * factor),
        Some(ax) => {
            let (outer, len, inner) = axis_split(shape, ax);
            let mut out = vec![0.0; n];
            let gd = g.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[base + i] = gd[o * inner + i] * factor;
                    }
                }
            }
            Tensor::from_vec(shape.to_vec(), out).expect("same element count")
        }
    }
}

/// Sums an elementwise gradient down to the operand's shape (scalar operands
/// collect the whole gradient).
fn unbroadcast(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::from_vec(operand.shape().to_vec(), vec![g.sum()]).expect("scalar operand")
    }
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
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros of its shape when none was accumulated.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let value = Tensor::from_vec(shape, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("equal shapes")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `a^p` elementwise for a constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let fractional = p.fract() != 0.0;
        for &x in self.value(a).data() {
            if (fractional && x < 0.0) || (p < 0.0 && x == 0.0) {
                return Err(Error::Domain(format!("{x}^{p} is undefined")));
            }
        }
        Ok(self.unary(a, Op::Powf(a, p), |x| x.powf(p)))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!("matmul inner dimensions {m}x{k} · {k2}x{n}"));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return dim_err(format!("bias of shape {:?} does not match row width {n}", self.value(bias).shape()));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b[c];
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = reduce_sum(self.value(a), axis)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let mut value = reduce_sum(self.value(a), axis)?;
        let count = reduce_count(self.value(a), axis);
        if count == 0 {
            return dim_err("mean over an empty axis");
        }
        let inv = 1.0 / count as f64;
        value.data_mut().iter_mut().for_each(|x| *x *= inv);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a, axis), rg))
    }

    /// `mu + exp(0.5·logvar) ⊙ eps`; `eps` is treated as a constant.
    pub fn reparam(&mut self, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
        let (tm, tl, te) = (self.value(mu), self.value(logvar), self.value(eps));
        if tm.shape() != tl.shape() || tm.shape() != te.shape() {
            return dim_err(format!(
                "reparam shapes mu {:?}, logvar {:?}, eps {:?}",
                tm.shape(),
                tl.shape(),
                te.shape()
            ));
        }
        let data =
            tm.data().iter().zip(tl.data()).zip(te.data()).map(|((&m, &l), &e)| m + (0.5 * l).exp() * e).collect();
        let value = Tensor::from_vec(tm.shape().to_vec(), data)?;
        let rg = self.needs(&[mu, logvar]);
        Ok(self.push(value, Op::Reparam { mu, logvar, eps }, rg))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                data[r * n + c] = row[c] - lse;
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Picks `a[r, cols[r]]` from every row; result has shape `[m]`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if cols.len() != m {
            return dim_err(format!("{} column indices for {m} rows", cols.len()));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return contract_err(format!("column index {c} out of range 0..{n}"));
        }
        let src = self.value(a).data();
        let data = cols.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::vector(data), Op::SelectCols(a, cols.to_vec()), rg))
    }

    /// Stacks rows `a[rows[p], :]`; result has shape `[rows.len(), n]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return dim_err(format!("row index {r} out of range 0..{m}"));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let value = Tensor::from_vec(vec![rows.len(), n], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Horizontal concatenation `[a | b]` of two matrices with equal row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.value(a).dims2()?;
        let (mb, nb) = self.value(b).dims2()?;
        if m != mb {
            return dim_err(format!("concat of {m} rows with {mb} rows"));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::from_vec(vec![m, na + nb], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Back-propagates from the scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return contract_err(format!("backward from non-scalar of shape {:?}", lv.shape()));
        }
        if !lv.item().is_finite() {
            return contract_err(format!("backward from non-finite loss {}", lv.item()));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::from_vec(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (target, contrib) in self.node_backward(idx, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut local[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to its inputs given upstream `g`.
    fn node_backward(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = g.data().iter().zip(t.data()).map(|(&gi, &x)| f(gi, x)).collect();
            Tensor::from_vec(g.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, unbroadcast(g.clone(), val(*a))), (*b, unbroadcast(g.clone(), val(*b)))],
            Op::Sub(a, b) => vec![(*a, unbroadcast(g.clone(), val(*a))), (*b, unbroadcast(g.map(|x| -x), val(*b)))],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = g.numel();
                let ga: Vec<f64> = (0..n).map(|i| g.data()[i] * at(tb, i)).collect();
                let gb: Vec<f64> = (0..n).map(|i| g.data()[i] * at(ta, i)).collect();
                let ga = Tensor::from_vec(g.shape().to_vec(), ga).expect("shape");
                let gb = Tensor::from_vec(g.shape().to_vec(), gb).expect("shape");
                vec![(*a, unbroadcast(ga, ta)), (*b, unbroadcast(gb, tb))]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| c * x))],
            Op::Shift(a) => vec![(*a, g.clone())],
            Op::Exp(a) => vec![(*a, zip_map(out, &|gi, y| gi * y))],
            Op::Log(a) => vec![(*a, zip_map(val(*a), &|gi, x| gi / x))],
            Op::Relu(a) => vec![(*a, zip_map(val(*a), &|gi, x| if x > 0.0 { gi } else { 0.0 }))],
            Op::Tanh(a) => vec![(*a, zip_map(out, &|gi, y| gi * (1.0 - y * y)))],
            Op::Powf(a, p) => vec![(*a, zip_map(val(*a), &|gi, x| gi * p * x.powf(p - 1.0)))],
            Op::Clamp(a, lo, hi) => vec![(*a, zip_map(val(*a), &|gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 }))],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().expect("matrix");
                let n = tb.shape()[1];
                let bt = transpose_raw(tb.data(), k, n);
                let at_ = transpose_raw(ta.data(), m, k);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let gb = matmul_raw(&at_, g.data(), k, m, n);
                vec![
                    (*a, Tensor::from_vec(vec![m, k], ga).expect("shape")),
                    (*b, Tensor::from_vec(vec![k, n], gb).expect("shape")),
                ]
            }
            Op::AddRow(x, bias) => {
                let (m, n) = g.dims2().expect("matrix");
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        *acc += g.data()[r * n + c];
                    }
                }
                let gb = Tensor::from_vec(val(*bias).shape().to_vec(), gb).expect("shape");
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::Sum(a, axis) => vec![(*a, expand(g, val(*a).shape(), *axis, 1.0))],
            Op::Mean(a, axis) => {
                let count = reduce_count(val(*a), *axis) as f64;
                vec![(*a, expand(g, val(*a).shape(), *axis, 1.0 / count))]
            }
            Op::Reparam { mu, logvar, eps } => {
                let (tl, te) = (val(*logvar), val(*eps));
                let gl = g
                    .data()
                    .iter()
                    .zip(tl.data())
                    .zip(te.data())
                    .map(|((&gi, &l), &e)| gi * 0.5 * (0.5 * l).exp() * e)
                    .collect();
                let gl = Tensor::from_vec(g.shape().to_vec(), gl).expect("shape");
                vec![(*mu, g.clone()), (*logvar, gl)]
            }
            Op::LogSoftmax(a) => {
                let (m, n) = out.dims2().expect("matrix");
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let gs: f64 = g.data()[r * n..(r + 1) * n].iter().sum();
                    for c in 0..n {
                        let p = out.data()[r * n + c].exp();
                        ga[r * n + c] = g.data()[r * n + c] - p * gs;
                    }
                }
                vec![(*a, Tensor::from_vec(vec![m, n], ga).expect("shape"))]
            }
            Op::SelectCols(a, cols) => {
                let (m, n) = val(*a).dims2().expect("matrix");
                let mut ga = vec![0.0; m * n];
                for (r, &c) in cols.iter().enumerate() {
                    ga[r * n + c] = g.data()[r];
                }
                vec![(*a, Tensor::from_vec(vec![m, n], ga).expect("shape"))]
            }
            Op::GatherRows(a, rows) => {
                let (m, n) = val(*a).dims2().expect("matrix");
                let mut ga = vec![0.0; m * n];
                for (p, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        ga[r * n + c] += g.data()[p * n + c];
                    }
                }
                vec![(*a, Tensor::from_vec(vec![m, n], ga).expect("shape"))]
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = val(*a).dims2().expect("matrix");
                let nb = val(*b).shape()[1];
                let mut ga = Vec::with_capacity(m * na);
                let mut gb = Vec::with_capacity(m * nb);
                for r in 0..m {
                    let row = &g.data()[r * (na + nb)..(r + 1) * (na + nb)];
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![
                    (*a, Tensor::from_vec(vec![m, na], ga).expect("shape")),
                    (*b, Tensor::from_vec(vec![m, nb], gb).expect("shape")),
                ]
            }
        }
    }
}
