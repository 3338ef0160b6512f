//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! Every node stores its value in f64. Leaves are created from f32
//! [`Tensor`]s (exactly representable) and results are rounded back to f32
//! only when read out through [`Tape::value`].

use std::collections::HashMap;

use super::tensor::{check_box, sigmoid, softmax_slice, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::proposals::BBox;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    fn numel(&self) -> usize {
        self.data.len()
    }

    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// rhs is `[1, n]`, repeated down the rows of an `[m, n]` lhs
    Row(usize),
    /// rhs is `[m, 1]`, repeated across the columns of an `[m, n]` lhs
    Col(usize),
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let rhs_numel: usize = rhs.iter().product();
        if lhs == rhs {
            Ok(Bcast::Same)
        } else if rhs_numel == 1 {
            Ok(Bcast::Scalar)
        } else if lhs.len() == 2 && rhs == [1, lhs[1]] {
            Ok(Bcast::Row(lhs[1]))
        } else if lhs.len() == 2 && rhs == [lhs[0], 1] {
            Ok(Bcast::Col(lhs[1]))
        } else {
            Err(dim_err(op, lhs, rhs))
        }
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
            Bcast::Col(n) => i / n,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    L2Normalize(Var),
    AvgPool(Var, BBox),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    /// A value computed outside the tape from tape values. It has no
    /// backward rule.
    Opaque(String, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// An append-only record of tensor operations.
///
/// Not meant to be shared between writers; build one tape per
/// forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Array>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(&v).map(|a| {
            Tensor::new(a.shape.clone(), a.data.iter().map(|&x| x as f32).collect())
                .expect("gradient shape matches its data")
        })
    }

    pub fn get_f64(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(|a| a.data.as_slice())
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

    fn push(&mut self, op: Op, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn arr(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, Array::from_tensor(t), true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, Array::from_tensor(t), false)
    }

    pub fn constant_f64(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, Array { shape, data }, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.arr(v).shape
    }

    /// Value rounded to f32.
    pub fn value(&self, v: Var) -> Tensor {
        let a = self.arr(v);
        Tensor::new(a.shape.clone(), a.data.iter().map(|&x| x as f32).collect())
            .expect("node shape matches its data")
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.arr(v).data
    }

    /// Single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.arr(v);
        assert_eq!(a.numel(), 1, "scalar() on a non-scalar node");
        a.data[0]
    }

    /// Overwrites a leaf value ahead of [`Tape::replay`].
    pub fn set_leaf(&mut self, v: Var, t: &Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape != t.shape() {
            return Err(dim_err("set_leaf", &node.value.shape, t.shape()));
        }
        node.value = Array::from_tensor(t);
        Ok(())
    }

    /// Recomputes every derived node in recording order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf | Op::Opaque(..)) {
                continue;
            }
            let shape = self.nodes[i].value.shape.clone();
            let value = self.eval(&op, &shape)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn record(&mut self, op: Op, out_shape: Vec<usize>) -> Result<Var> {
        let value = self.eval(&op, &out_shape)?;
        let requires_grad = op_parents(&op).iter().any(|&p| self.rg(p));
        Ok(self.push(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let out = vec![sa[0], sb[1]];
        self.record(Op::MatMul(a, b), out)
    }

    /// `a + b`; `b` may be a scalar, a `[1, n]` row or an `[m, 1]` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Bcast::resolve("add", self.shape(a), self.shape(b))?;
        let out = self.shape(a).to_vec();
        self.record(Op::Add(a, b, bc), out)
    }

    /// Elementwise `a * b` with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Bcast::resolve("mul", self.shape(a), self.shape(b))?;
        let out = self.shape(a).to_vec();
        self.record(Op::Mul(a, b, bc), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::Scale(a, s), out)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::AddScalar(a, s), out)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::Sigmoid(a), out)
    }

    /// `log(sigmoid(a))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::LogSigmoid(a), out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).is_empty() {
            return Err(dim_err("softmax", self.shape(a), &[]));
        }
        let out = self.shape(a).to_vec();
        self.record(Op::Softmax(a), out)
    }

    /// L2 normalisation over the last axis; zero slices stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).is_empty() {
            return Err(dim_err("l2_normalize", self.shape(a), &[]));
        }
        let out = self.shape(a).to_vec();
        self.record(Op::L2Normalize(a), out)
    }

    /// Per-channel box mean of a `C×H×W` node.
    pub fn avg_pool_region(&mut self, a: Var, bbox: BBox) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(dim_err("avg_pool_region", s, &[]));
        }
        check_box(&bbox, s[1], s[2])?;
        let out = vec![s[0]];
        self.record(Op::AvgPool(a, bbox), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a), vec![])
    }

    /// Sums each row of a matrix into an `[m, 1]` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err("sum_rows", s, &[]));
        }
        let out = vec![s[0], 1];
        self.record(Op::SumRows(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.arr(a).numel() == 0 {
            return Err(Error::Contract("mean of an empty node".into()));
        }
        self.record(Op::Mean(a), vec![])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::Log(a), out)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::Pow(a, p), out)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.shape(a).to_vec();
        self.record(Op::Clamp(a, lo, hi), out)
    }

    /// Picks elements by flat index into a 1-D node.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let n = self.arr(a).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Bounds(format!("gather index {bad} of {n}")));
        }
        let out = vec![indices.len()];
        self.record(Op::Gather(a, indices), out)
    }

    /// Row `r` of a matrix as a 1-D node.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || r >= s[0] {
            return Err(Error::Bounds(format!("row {r} of {s:?}")));
        }
        let w = s[1];
        self.gather(a, (r * w..(r + 1) * w).collect())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[]));
        }
        let out = vec![s[1], s[0]];
        self.record(Op::Transpose(a), out)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.arr(a).numel() {
            return Err(dim_err("reshape", self.shape(a), &shape));
        }
        self.record(Op::Reshape(a), shape)
    }

    /// Records a value computed outside the tape. Differentiating through
    /// it fails with [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: &str, parents: &[Var], value: &Tensor) -> Var {
        let rg = parents.iter().any(|&p| self.rg(p));
        self.push(
            Op::Opaque(name.to_string(), parents.to_vec()),
            Array::from_tensor(value),
            rg,
        )
    }

    fn eval(&self, op: &Op, out_shape: &[usize]) -> Result<Array> {
        let unary = |a: Var, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            self.arr(a).data.iter().map(|&x| f(x)).collect()
        };
        let data = match op {
            Op::Leaf | Op::Opaque(..) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (x, y) = (self.arr(*a), self.arr(*b));
                matmul(&x.data, &y.data, x.shape[0], x.shape[1], y.shape[1])
            }
            Op::Add(a, b, bc) => {
                let y = &self.arr(*b).data;
                self.arr(*a)
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + y[bc.index(i)])
                    .collect()
            }
            Op::Mul(a, b, bc) => {
                let y = &self.arr(*b).data;
                self.arr(*a)
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * y[bc.index(i)])
                    .collect()
            }
            Op::Scale(a, s) => unary(*a, &|x| x * s),
            Op::AddScalar(a, s) => unary(*a, &|x| x + s),
            Op::Sigmoid(a) => unary(*a, &sigmoid),
            Op::LogSigmoid(a) => unary(*a, &log_sigmoid),
            Op::Softmax(a) => {
                let x = self.arr(*a);
                let w = *x.shape.last().unwrap();
                if w == 0 {
                    Vec::new()
                } else {
                    x.data.chunks(w).flat_map(softmax_slice).collect()
                }
            }
            Op::L2Normalize(a) => {
                let x = self.arr(*a);
                let w = *x.shape.last().unwrap();
                if w == 0 {
                    Vec::new()
                } else {
                    x.data
                        .chunks(w)
                        .flat_map(|s| {
                            let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                            s.iter()
                                .map(move |v| if n == 0.0 { 0.0 } else { v / n })
                        })
                        .collect()
                }
            }
            Op::AvgPool(a, b) => {
                let x = self.arr(*a);
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let area = b.area() as f64;
                (0..c)
                    .map(|ch| {
                        let mut acc = 0.0;
                        for r in b.row_min..=b.row_max {
                            let base = (ch * h + r) * w;
                            acc += x.data[base + b.col_min..=base + b.col_max]
                                .iter()
                                .sum::<f64>();
                        }
                        acc / area
                    })
                    .collect()
            }
            Op::Sum(a) => vec![self.arr(*a).data.iter().sum()],
            Op::SumRows(a) => {
                let x = self.arr(*a);
                let w = x.shape[1];
                if w == 0 {
                    vec![0.0; x.shape[0]]
                } else {
                    x.data.chunks(w).map(|r| r.iter().sum()).collect()
                }
            }
            Op::Mean(a) => {
                let x = &self.arr(*a).data;
                vec![x.iter().sum::<f64>() / x.len() as f64]
            }
            Op::Log(a) => unary(*a, &f64::ln),
            Op::Pow(a, p) => unary(*a, &|x| x.powf(*p)),
            Op::Clamp(a, lo, hi) => unary(*a, &|x| x.clamp(*lo, *hi)),
            Op::Gather(a, idx) => {
                let x = &self.arr(*a).data;
                idx.iter().map(|&i| x[i]).collect()
            }
            Op::Transpose(a) => {
                let x = self.arr(*a);
                let (m, n) = (x.shape[0], x.shape[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = x.data[i * n + j];
                    }
                }
                out
            }
            Op::Reshape(a) => self.arr(*a).data.clone(),
        };
        Ok(Array {
            shape: out_shape.to_vec(),
            data,
        })
    }

    /// Gradients of a one-element node with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.arr(loss);
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.backprop(&node.op, &node.value, &g)? {
                if !self.rg(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => Some((
                        Var(i),
                        Array {
                            shape: node.value.shape.clone(),
                            data: g,
                        },
                    )),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn backprop(&self, op: &Op, out: &Array, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let elementwise = |a: Var, d: &dyn Fn(f64, f64) -> f64| -> Vec<(Var, Vec<f64>)> {
            let x = &self.arr(a).data;
            let gx = x
                .iter()
                .zip(&out.data)
                .zip(g)
                .map(|((&x, &y), &g)| g * d(x, y))
                .collect();
            vec![(a, gx)]
        };
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::Opaque(name, parents) => {
                if parents.iter().any(|&p| self.rg(p)) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
                Vec::new()
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.arr(*a), self.arr(*b));
                let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                let mut res = Vec::new();
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &y.data[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(a, b)| a * b).sum();
                        }
                    }
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = x.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Add(a, b, bc) => {
                let mut gb = vec![0.0; self.arr(*b).numel()];
                for (i, &gv) in g.iter().enumerate() {
                    gb[bc.index(i)] += gv;
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b, bc) => {
                let (x, y) = (&self.arr(*a).data, &self.arr(*b).data);
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * y[bc.index(i)])
                    .collect();
                let mut gb = vec![0.0; y.len()];
                for (i, &gv) in g.iter().enumerate() {
                    gb[bc.index(i)] += gv * x[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(a, _) => vec![(*a, g.to_vec())],
            Op::Sigmoid(a) => elementwise(*a, &|_, y| y * (1.0 - y)),
            Op::LogSigmoid(a) => elementwise(*a, &|x, _| sigmoid(-x)),
            Op::Softmax(a) => {
                let w = *out.shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                if w > 0 {
                    for (ys, gs) in out.data.chunks(w).zip(g.chunks(w)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        gx.extend(ys.iter().zip(gs).map(|(y, g)| y * (g - dot)));
                    }
                }
                vec![(*a, gx)]
            }
            Op::L2Normalize(a) => {
                let x = &self.arr(*a).data;
                let w = *out.shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                if w > 0 {
                    for ((xs, ys), gs) in x.chunks(w).zip(out.data.chunks(w)).zip(g.chunks(w)) {
                        let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            gx.extend(std::iter::repeat_n(0.0, w));
                            continue;
                        }
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        gx.extend(ys.iter().zip(gs).map(|(y, g)| (g - y * dot) / n));
                    }
                }
                vec![(*a, gx)]
            }
            Op::AvgPool(a, b) => {
                let x = self.arr(*a);
                let (h, w) = (x.shape[1], x.shape[2]);
                let area = b.area() as f64;
                let mut gx = vec![0.0; x.numel()];
                for (ch, &gv) in g.iter().enumerate() {
                    for r in b.row_min..=b.row_max {
                        let base = (ch * h + r) * w;
                        for v in &mut gx[base + b.col_min..=base + b.col_max] {
                            *v = gv / area;
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.arr(*a).numel()])],
            Op::SumRows(a) => {
                let x = self.arr(*a);
                let w = x.shape[1];
                let gx = (0..x.numel()).map(|i| g[i / w]).collect();
                vec![(*a, gx)]
            }
            Op::Mean(a) => {
                let n = self.arr(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Log(a) => elementwise(*a, &|x, _| 1.0 / x),
            Op::Pow(a, p) => elementwise(*a, &|x, _| {
                if *p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }),
            Op::Clamp(a, lo, hi) => {
                elementwise(*a, &|x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 })
            }
            Op::Gather(a, idx) => {
                let mut gx = vec![0.0; self.arr(*a).numel()];
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![(*a, gx)]
            }
            Op::Transpose(a) => {
                // out is n×m, parent m×n
                let (n, m) = (out.shape[0], out.shape[1]);
                let mut gx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, gx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
        })
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Opaque(_, p) => p.clone(),
        Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Sigmoid(a)
        | Op::LogSigmoid(a)
        | Op::Softmax(a)
        | Op::L2Normalize(a)
        | Op::AvgPool(a, _)
        | Op::Sum(a)
        | Op::SumRows(a)
        | Op::Mean(a)
        | Op::Log(a)
        | Op::Pow(a, _)
        | Op::Clamp(a, _, _)
        | Op::Gather(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a) => vec![*a],
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
