use std::borrow::Cow;

use super::{axpy, dot, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Cos(Var),
    Sin(Var),
    Abs(Var),
    Concat(Vec<Var>),
    Interleave(Var, Var),
    Stack(Vec<Var>),
    SoftmaxRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Parameters are bound by reference, so building a tape never copies the
/// weights. Nodes are appended in evaluation order, which makes the node
/// vector a topological order of the DAG; backward walks it once in reverse.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(Cow<'a, str>, Var)>,
}

fn len_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(len_of(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf. Its gradient is reported by [`Tape::backward`] under `name`.
    pub fn param(&mut self, name: &'a str, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((Cow::Borrowed(name), v));
        v
    }

    /// Trainable leaf that owns its value.
    pub fn param_owned(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let v = self.push(shape, t.into_data(), Op::Leaf, true);
        self.params.push((Cow::Owned(name.into()), v));
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf, false)
    }

    pub fn constant_slice(&mut self, data: &'a [f64]) -> Var {
        self.nodes.push(Node {
            shape: vec![data.len()],
            value: Cow::Borrowed(data),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    // ---- forward ops ----------------------------------------------------

    /// `W x` for `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, TensorError> {
        let (ws, xs) = (&self.node(w).shape, &self.node(x).shape);
        if ws.len() != 2 || len_of(xs) != ws[1] || xs.len() > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: ws.clone(),
                rhs: xs.clone(),
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let wv = &self.node(w).value;
        let xv = &self.node(x).value;
        let out: Vec<f64> = if n == 0 {
            vec![0.0; m]
        } else {
            wv.chunks_exact(n).map(|row| dot(row, xv)).collect()
        };
        let rg = self.rg(&[w, x]);
        Ok(self.push(vec![m], out, Op::MatVec(w, x), rg))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa == sb || (len_of(sa) == 1 && len_of(sb) == 1) {
            Ok(sa.clone())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let shape = self.binary_shape(name, a, b)?;
        let out = self
            .node(a)
            .value
            .iter()
            .zip(self.node(b).value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(a);
        let shape = n.shape.clone();
        let out = n.value.iter().map(|&x| f(x)).collect();
        let rg = n.requires_grad;
        self.push(shape, out, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, f64::sin, Op::Sin(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// Concatenate scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let mut out = Vec::new();
        for &p in parts {
            let n = self.node(p);
            if n.shape.len() > 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: n.shape.clone(),
                    rhs: vec![],
                });
            }
            out.extend_from_slice(&n.value);
        }
        let rg = self.rg(parts);
        let len = out.len();
        Ok(self.push(vec![len], out, Op::Concat(parts.to_vec()), rg))
    }

    /// `[a0, b0, a1, b1, ...]` for equal-length vectors.
    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.binary_shape("interleave", a, b)?;
        if shape.len() > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "interleave",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = Vec::with_capacity(av.len() * 2);
        for (x, y) in av.iter().zip(bv.iter()) {
            out.push(*x);
            out.push(*y);
        }
        let rg = self.rg(&[a, b]);
        let len = out.len();
        Ok(self.push(vec![len], out, Op::Interleave(a, b), rg))
    }

    /// Stack `k` vectors of length `d` into a `[k, d]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let first = *rows.first().ok_or(TensorError::Empty { op: "stack" })?;
        let d = len_of(&self.node(first).shape);
        let mut out = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let n = self.node(r);
            if n.shape.len() > 1 || n.value.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: vec![d],
                    rhs: n.shape.clone(),
                });
            }
            out.extend_from_slice(&n.value);
        }
        let rg = self.rg(rows);
        Ok(self.push(vec![rows.len(), d], out, Op::Stack(rows.to_vec()), rg))
    }

    fn expect_matrix(&self, op: &'static str, m: Var) -> Result<(usize, usize), TensorError> {
        let s = &self.node(m).shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Softmax down each column of a `[k, d]` matrix: every column sums to 1
    /// across the `k` rows.
    pub fn softmax_rows(&mut self, m: Var) -> Result<Var, TensorError> {
        let (k, d) = self.expect_matrix("softmax_rows", m)?;
        let v = &self.node(m).value;
        let mut out = vec![0.0; k * d];
        for c in 0..d {
            let mut max = f64::NEG_INFINITY;
            for r in 0..k {
                max = max.max(v[r * d + c]);
            }
            let mut total = 0.0;
            for r in 0..k {
                let e = (v[r * d + c] - max).exp();
                out[r * d + c] = e;
                total += e;
            }
            for r in 0..k {
                out[r * d + c] /= total;
            }
        }
        let rg = self.rg(&[m]);
        Ok(self.push(vec![k, d], out, Op::SoftmaxRows(m), rg))
    }

    /// Column sums of a `[k, d]` matrix.
    pub fn sum_rows(&mut self, m: Var) -> Result<Var, TensorError> {
        let (k, d) = self.expect_matrix("sum_rows", m)?;
        let v = &self.node(m).value;
        let mut out = vec![0.0; d];
        for r in 0..k {
            for (o, x) in out.iter_mut().zip(&v[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        let rg = self.rg(&[m]);
        Ok(self.push(vec![d], out, Op::SumRows(m), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().sum::<f64>() / n.value.len().max(1) as f64;
        let rg = n.requires_grad;
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_shape("dot", a, b)?;
        let s = dot(&self.node(a).value, &self.node(b).value);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![s], Op::Dot(a, b), rg))
    }

    /// Sum of a list of same-shaped values.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut it = parts.iter();
        let mut acc = *it.next().ok_or(TensorError::Empty { op: "add_all" })?;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of the scalar `root` with respect to every parameter leaf.
    /// Parameters that `root` does not depend on get exact zeros.
    pub fn backward(&self, root: Var) -> Result<ParamStore, TensorError> {
        let grads = self.backward_nodes(root)?;
        let mut out = ParamStore::new();
        for (name, v) in &self.params {
            let shape = self.node(*v).shape.clone();
            let data = match &grads[v.0] {
                Some(g) => g.clone(),
                None => vec![0.0; len_of(&shape)],
            };
            out.insert(name.to_string(), Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    /// Gradient of `root` with respect to arbitrary recorded values.
    pub fn grad_wrt(&self, root: Var, vars: &[Var]) -> Result<Vec<Tensor>, TensorError> {
        let grads = self.backward_nodes(root)?;
        vars.iter()
            .map(|v| {
                let shape = self.node(*v).shape.clone();
                let data = grads[v.0].clone().unwrap_or_else(|| vec![0.0; len_of(&shape)]);
                Tensor::new(shape, data)
            })
            .collect()
    }

    fn backward_nodes(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        let rn = self.node(root);
        if rn.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let (m, n) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                let (wv, xv) = (val(*w), val(*x));
                if wants(*w) {
                    let gw = acc_buf(grads, *w, m * n);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            axpy(&mut gw[i * n..(i + 1) * n], gi, xv);
                        }
                    }
                }
                if wants(*x) {
                    let gx = acc_buf(grads, *x, n);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            axpy(gx, gi, &wv[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(acc_buf(grads, v, g.len()), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(acc_buf(grads, *a, g.len()), 1.0, g);
                }
                if wants(*b) {
                    axpy(acc_buf(grads, *b, g.len()), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    let ga = acc_buf(grads, *a, g.len());
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = acc_buf(grads, *b, g.len());
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Neg(a) => axpy(acc_buf(grads, *a, g.len()), -1.0, g),
            Op::Scale(a, c) => axpy(acc_buf(grads, *a, g.len()), *c, g),
            Op::Relu(a) => {
                let x = val(*a);
                let ga = acc_buf(grads, *a, g.len());
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Tanh(_) | Op::Sigmoid(_) | Op::Exp(_) => {
                let (a, deriv): (Var, fn(f64) -> f64) = match node.op {
                    Op::Tanh(a) => (a, |y| 1.0 - y * y),
                    Op::Sigmoid(a) => (a, |y| y * (1.0 - y)),
                    Op::Exp(a) => (a, |y| y),
                    _ => unreachable!(),
                };
                let ga = acc_buf(grads, a, g.len());
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                    *o += gi * deriv(*y);
                }
            }
            Op::Cos(a) | Op::Sin(a) | Op::Abs(a) => {
                let deriv: fn(f64) -> f64 = match node.op {
                    Op::Cos(_) => |x| -x.sin(),
                    Op::Sin(_) => f64::cos,
                    _ => |x: f64| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    },
                };
                let x = val(*a);
                let ga = acc_buf(grads, *a, g.len());
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *o += gi * deriv(*xi);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        axpy(acc_buf(grads, p, n), 1.0, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Interleave(a, b) => {
                if wants(*a) {
                    let ga = acc_buf(grads, *a, g.len() / 2);
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[2 * i];
                    }
                }
                if wants(*b) {
                    let gb = acc_buf(grads, *b, g.len() / 2);
                    for (i, o) in gb.iter_mut().enumerate() {
                        *o += g[2 * i + 1];
                    }
                }
            }
            Op::Stack(rows) => {
                let d = node.shape[1];
                for (r, &v) in rows.iter().enumerate() {
                    if wants(v) {
                        axpy(acc_buf(grads, v, d), 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SoftmaxRows(m) => {
                let (k, d) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let gm = acc_buf(grads, *m, k * d);
                for c in 0..d {
                    let mut inner = 0.0;
                    for r in 0..k {
                        inner += g[r * d + c] * y[r * d + c];
                    }
                    for r in 0..k {
                        gm[r * d + c] += y[r * d + c] * (g[r * d + c] - inner);
                    }
                }
            }
            Op::SumRows(m) => {
                let k = self.nodes[m.0].shape[0];
                let d = g.len();
                let gm = acc_buf(grads, *m, k * d);
                for r in 0..k {
                    axpy(&mut gm[r * d..(r + 1) * d], 1.0, g);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(*a).len();
                let s = match node.op {
                    Op::Mean(_) => g[0] / n.max(1) as f64,
                    _ => g[0],
                };
                for o in acc_buf(grads, *a, n).iter_mut() {
                    *o += s;
                }
            }
            Op::Dot(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    axpy(acc_buf(grads, *a, bv.len()), g[0], bv);
                }
                if wants(*b) {
                    let av = val(*a);
                    axpy(acc_buf(grads, *b, av.len()), g[0], av);
                }
            }
        }
    }
}

fn acc_buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_concat_softmax_basics() {
        let mut t = Tape::new();
        let x = t.constant_vec(vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);

        let a = t.constant_vec(vec![1.0, 2.0]);
        let b = t.constant_vec(vec![3.0]);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);

        let p = t.constant_vec(vec![0.7]);
        let q = t.constant_vec(vec![0.7]);
        let m = t.stack(&[p, q]).unwrap();
        let s = t.softmax_rows(m).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn square_and_abs_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let xv = t.param("x", &x);
        let sq = t.mul(xv, xv).unwrap();
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);

        for (v, want) in [(3.0, 1.0), (-3.0, -1.0)] {
            let p = Tensor::scalar(v);
            let mut t = Tape::new();
            let pv = t.param("p", &p);
            let root = t.abs(pv);
            assert_eq!(t.backward(root).unwrap().get("p").unwrap().item(), want);
        }
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // f = x*y + x*z with y = 2x, z = 3x  =>  f = 5x^2, df/dx = 10x
        let x = Tensor::scalar(1.5);
        let mut t = Tape::new();
        let xv = t.param("x", &x);
        let y = t.scale(xv, 2.0);
        let z = t.scale(xv, 3.0);
        let xy = t.mul(xv, y).unwrap();
        let xz = t.mul(xv, z).unwrap();
        let f = t.add(xy, xz).unwrap();
        let g = t.backward(f).unwrap();
        assert!((g.get("x").unwrap().item() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_param_gets_exact_zero() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let av = t.param("a", &a);
        let _bv = t.param("b", &b);
        let root = t.sum(av);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[0.0; 4]);
        assert_eq!(g.get("b").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant_vec(vec![1.0, 2.0]);
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::zeros(&[2, 3]));
        let x = t.constant_vec(vec![1.0, 2.0]);
        let err = t.matvec(w, x).unwrap_err();
        assert!(err.to_string().contains("matvec"));
        let y = t.constant_vec(vec![1.0, 2.0, 3.0]);
        let err = t.add(x, y).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let x = Tensor::vector(vec![0.0]);
        let mut t = Tape::new();
        let xv = t.param("x", &x);
        let r = t.relu(xv);
        let root = t.sum(r);
        assert_eq!(t.backward(root).unwrap().get("x").unwrap().item(), 0.0);
    }
}
