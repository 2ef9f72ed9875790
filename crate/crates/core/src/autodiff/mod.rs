//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in construction order. Leaves are
//! either parameters (gradients wanted) or constants. [`Graph::backward`]
//! walks the tape in exact reverse order and returns a [`Gradients`] table
//! holding the gradient of every leaf parameter.
//!
//! Gradients are only propagated into nodes that depend on at least one
//! parameter, so large constant inputs (noise batches, data) cost nothing
//! on the way back.
//!
//! ```
//! use cdegan::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
//! let sq = g.square(w).unwrap();
//! let loss = g.mean(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[6.0]);
//! ```

mod gemm;
mod tensor;

pub use tensor::{grad_l2_norm, Tensor};

use crate::error::{Error, Result};

/// Default negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation that produced a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,n] + [n]` broadcast over rows.
    AddBias,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Neg,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Log,
    Sqrt,
    Square,
    ScalarMul(f64),
    AddScalar(f64),
    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    Clamp(f64, f64),
    /// Mean of all entries, producing a scalar.
    Mean,
    /// Row sums: `[m,n] -> [m,1]`.
    SumCols,
    Transpose,
    /// `sum_i w_i l_i` with `w = softmax(delta * l)` over scalar inputs.
    SoftMean(f64),
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Clamp(..) => "clamp",
            OpKind::Mean => "mean",
            OpKind::SumCols => "sum_cols",
            OpKind::Transpose => "transpose",
            OpKind::SoftMean(_) => "soft_mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Origin {
    Param,
    Constant,
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    origin: Origin,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// A single-use computation tape. Build one per loss evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, if it is a parameter leaf of the graph.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

fn softmax(xs: &[f64], delta: f64) -> Vec<f64> {
    let max = xs
        .iter()
        .map(|x| delta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (delta * x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn stable_softmax(xs: &[f64], delta: f64) -> Vec<f64> {
    softmax(xs, delta)
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

    fn push_leaf(&mut self, tensor: Tensor, origin: Origin) -> Var {
        let shape = tensor.shape().to_vec();
        let values = tensor.into_values();
        self.nodes.push(Node {
            origin,
            inputs: Vec::new(),
            shape,
            values,
            requires_grad: origin == Origin::Param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf whose gradient will be reported by `backward`.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, Origin::Param)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, Origin::Constant)
    }

    /// Copies the current value of `var` into a fresh constant, cutting
    /// every gradient path through it.
    pub fn detach(&mut self, var: Var) -> Var {
        let node = &self.nodes[var.0];
        let tensor = Tensor::new(node.shape.clone(), node.values.clone())
            .expect("graph values are finite and well-shaped");
        self.constant(tensor)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].values
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor::new(node.shape.clone(), node.values.clone())
            .expect("graph values are finite and well-shaped")
    }

    /// Value of a single-entry node.
    pub fn scalar(&self, var: Var) -> Result<f64> {
        let v = self.value(var);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, node has {} entries",
                v.len()
            )));
        }
        Ok(v[0])
    }

    fn dims2(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        match self.nodes[var.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a 2-D input, got {s:?}"))),
        }
    }

    /// Records `kind` applied to `inputs` and returns the output node.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::AddBias | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::SoftMean(_) => None,
            _ => Some(1),
        };
        if let Some(a) = arity {
            if inputs.len() != a {
                return Err(Error::shape(
                    kind.name(),
                    format!("expected {a} inputs, got {}", inputs.len()),
                ));
            }
        }
        let (shape, values) = self.eval(kind, inputs)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{} output entry {pos}", kind.name()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            origin: Origin::Op(kind),
            inputs: inputs.iter().map(|v| v.0).collect(),
            shape,
            values,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, kind: OpKind, inputs: &[Var]) -> Result<(Vec<usize>, Vec<f64>)> {
        let name = kind.name();
        let unary = |f: &dyn Fn(f64) -> f64| {
            let n = &self.nodes[inputs[0].0];
            (
                n.shape.clone(),
                n.values.iter().map(|&x| f(x)).collect::<Vec<_>>(),
            )
        };
        let binary = |f: &dyn Fn(f64, f64) -> f64| -> Result<(Vec<usize>, Vec<f64>)> {
            let a = &self.nodes[inputs[0].0];
            let b = &self.nodes[inputs[1].0];
            if a.shape != b.shape {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape, b.shape),
                ));
            }
            let v = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok((a.shape.clone(), v))
        };
        Ok(match kind {
            OpKind::MatMul => {
                let (m, k) = self.dims2(name, inputs[0])?;
                let (k2, n) = self.dims2(name, inputs[1])?;
                if k != k2 {
                    return Err(Error::shape(name, format!("[{m},{k}] x [{k2},{n}]")));
                }
                let mut out = vec![0.0; m * n];
                gemm::gemm(
                    m,
                    k,
                    n,
                    &self.nodes[inputs[0].0].values,
                    false,
                    &self.nodes[inputs[1].0].values,
                    false,
                    0.0,
                    &mut out,
                );
                (vec![m, n], out)
            }
            OpKind::AddBias => {
                let (m, n) = self.dims2(name, inputs[0])?;
                let b = &self.nodes[inputs[1].0];
                if b.shape != [n] {
                    return Err(Error::shape(
                        name,
                        format!("bias {:?} for width {n}", b.shape),
                    ));
                }
                let a = &self.nodes[inputs[0].0].values;
                let mut out = a.clone();
                for row in out.chunks_exact_mut(n) {
                    for (o, bv) in row.iter_mut().zip(&b.values) {
                        *o += bv;
                    }
                }
                (vec![m, n], out)
            }
            OpKind::Add => binary(&|x, y| x + y)?,
            OpKind::Sub => binary(&|x, y| x - y)?,
            OpKind::Mul => binary(&|x, y| x * y)?,
            OpKind::Neg => unary(&|x| -x),
            OpKind::Relu => unary(&|x| x.max(0.0)),
            OpKind::LeakyRelu(s) => unary(&|x| if x > 0.0 { x } else { s * x }),
            OpKind::Tanh => unary(&f64::tanh),
            OpKind::Sigmoid => unary(&sigmoid),
            OpKind::Log => {
                let n = &self.nodes[inputs[0].0];
                if let Some(bad) = n.values.iter().find(|&&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("log of non-positive value {bad}"),
                    });
                }
                unary(&f64::ln)
            }
            OpKind::Sqrt => {
                let n = &self.nodes[inputs[0].0];
                if let Some(bad) = n.values.iter().find(|&&x| x < 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("sqrt of negative value {bad}"),
                    });
                }
                unary(&f64::sqrt)
            }
            OpKind::Square => unary(&|x| x * x),
            OpKind::ScalarMul(c) => unary(&|x| c * x),
            OpKind::AddScalar(c) => unary(&|x| x + c),
            OpKind::Clamp(lo, hi) => unary(&|x| x.clamp(lo, hi)),
            OpKind::Mean => {
                let n = &self.nodes[inputs[0].0];
                if n.values.is_empty() {
                    return Err(Error::shape(name, "mean of an empty tensor"));
                }
                let s: f64 = n.values.iter().sum();
                (Vec::new(), vec![s / n.values.len() as f64])
            }
            OpKind::SumCols => {
                let (m, n) = self.dims2(name, inputs[0])?;
                let a = &self.nodes[inputs[0].0].values;
                let v = a.chunks_exact(n.max(1)).map(|r| r.iter().sum()).collect();
                (vec![m, 1], if n == 0 { vec![0.0; m] } else { v })
            }
            OpKind::Transpose => {
                let (m, n) = self.dims2(name, inputs[0])?;
                let a = &self.nodes[inputs[0].0].values;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = a[i * n + j];
                    }
                }
                (vec![n, m], out)
            }
            OpKind::SoftMean(delta) => {
                if inputs.is_empty() {
                    return Err(Error::shape(name, "needs at least one input"));
                }
                let mut ls = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let n = &self.nodes[v.0];
                    if n.values.len() != 1 {
                        return Err(Error::shape(
                            name,
                            format!("non-scalar input {:?}", n.shape),
                        ));
                    }
                    ls.push(n.values[0]);
                }
                let w = softmax(&ls, delta);
                let out = w.iter().zip(&ls).map(|(w, l)| w * l).sum();
                (Vec::new(), vec![out])
            }
        })
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let kind = match node.origin {
                Origin::Op(k) => k,
                _ => continue,
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(kind, node, &upstream, &mut grads);
        }

        // Only parameter leaves keep their gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if node.origin != Origin::Param {
                *g = None;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.origin == Origin::Param && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.values.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, kind: OpKind, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let input = |i: usize| &self.nodes[node.inputs[i]];

        fn accumulate(
            grads: &mut [Option<Vec<f64>>],
            id: usize,
            len: usize,
            f: impl FnOnce(&mut [f64]),
        ) {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        let elementwise = |grads: &mut [Option<Vec<f64>>], d: &dyn Fn(usize) -> f64| {
            if wants(0) {
                let id = node.inputs[0];
                accumulate(grads, id, up.len(), |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += up[i] * d(i);
                    }
                });
            }
        };

        match kind {
            OpKind::MatMul => {
                let a = input(0);
                let b = input(1);
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                if wants(0) {
                    // dA = dC * B^T
                    accumulate(grads, node.inputs[0], m * k, |g| {
                        gemm::gemm(m, n, k, up, false, &b.values, true, 1.0, g)
                    });
                }
                if wants(1) {
                    // dB = A^T * dC
                    accumulate(grads, node.inputs[1], k * n, |g| {
                        gemm::gemm(k, m, n, &a.values, true, up, false, 1.0, g)
                    });
                }
            }
            OpKind::AddBias => {
                let n = node.shape[1];
                if wants(0) {
                    accumulate(grads, node.inputs[0], up.len(), |g| {
                        g.iter_mut().zip(up).for_each(|(gi, u)| *gi += u)
                    });
                }
                if wants(1) {
                    accumulate(grads, node.inputs[1], n, |g| {
                        for row in up.chunks_exact(n) {
                            g.iter_mut().zip(row).for_each(|(gi, u)| *gi += u);
                        }
                    });
                }
            }
            OpKind::Add | OpKind::Sub => {
                let sign = if kind == OpKind::Sub { -1.0 } else { 1.0 };
                if wants(0) {
                    accumulate(grads, node.inputs[0], up.len(), |g| {
                        g.iter_mut().zip(up).for_each(|(gi, u)| *gi += u)
                    });
                }
                if wants(1) {
                    accumulate(grads, node.inputs[1], up.len(), |g| {
                        g.iter_mut().zip(up).for_each(|(gi, u)| *gi += sign * u)
                    });
                }
            }
            OpKind::Mul => {
                let a = &input(0).values;
                let b = &input(1).values;
                if wants(0) {
                    accumulate(grads, node.inputs[0], up.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += up[i] * b[i];
                        }
                    });
                }
                if wants(1) {
                    accumulate(grads, node.inputs[1], up.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += up[i] * a[i];
                        }
                    });
                }
            }
            OpKind::Neg => elementwise(grads, &|_| -1.0),
            OpKind::Relu => {
                let x = &input(0).values;
                elementwise(grads, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            OpKind::LeakyRelu(s) => {
                let x = &input(0).values;
                elementwise(grads, &|i| if x[i] > 0.0 { 1.0 } else { s })
            }
            OpKind::Tanh => {
                let y = &node.values;
                elementwise(grads, &|i| 1.0 - y[i] * y[i])
            }
            OpKind::Sigmoid => {
                let y = &node.values;
                elementwise(grads, &|i| y[i] * (1.0 - y[i]))
            }
            OpKind::Log => {
                let x = &input(0).values;
                elementwise(grads, &|i| 1.0 / x[i])
            }
            OpKind::Sqrt => {
                let y = &node.values;
                elementwise(grads, &|i| if y[i] > 0.0 { 0.5 / y[i] } else { 0.0 })
            }
            OpKind::Square => {
                let x = &input(0).values;
                elementwise(grads, &|i| 2.0 * x[i])
            }
            OpKind::ScalarMul(c) => elementwise(grads, &|_| c),
            OpKind::AddScalar(_) => elementwise(grads, &|_| 1.0),
            OpKind::Clamp(lo, hi) => {
                let x = &input(0).values;
                elementwise(grads, &|i| if x[i] >= lo && x[i] <= hi { 1.0 } else { 0.0 })
            }
            OpKind::Mean => {
                let len = input(0).values.len();
                let scale = up[0] / len as f64;
                if wants(0) {
                    accumulate(grads, node.inputs[0], len, |g| {
                        g.iter_mut().for_each(|gi| *gi += scale)
                    });
                }
            }
            OpKind::SumCols => {
                let n = input(0).shape[1];
                if wants(0) {
                    accumulate(grads, node.inputs[0], up.len() * n, |g| {
                        for (row, u) in g.chunks_exact_mut(n).zip(up) {
                            row.iter_mut().for_each(|gi| *gi += u);
                        }
                    });
                }
            }
            OpKind::Transpose => {
                // node is [n, m], input is [m, n]
                let (n, m) = (node.shape[0], node.shape[1]);
                if wants(0) {
                    accumulate(grads, node.inputs[0], m * n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += up[j * m + i];
                            }
                        }
                    });
                }
            }
            OpKind::SoftMean(delta) => {
                let ls: Vec<f64> = node
                    .inputs
                    .iter()
                    .map(|&i| self.nodes[i].values[0])
                    .collect();
                let w = softmax(&ls, delta);
                let total = node.values[0];
                for (k, &id) in node.inputs.iter().enumerate() {
                    if self.nodes[id].requires_grad {
                        let d = w[k] * (1.0 + delta * (ls[k] - total));
                        accumulate(grads, id, 1, |g| g[0] += up[0] * d);
                    }
                }
            }
        }
    }

    // Convenience wrappers, one per op kind.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::AddBias, &[a, bias])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Neg, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(OpKind::LeakyRelu(slope), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::ScalarMul(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp(lo, hi), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumCols, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn soft_mean(&mut self, losses: &[Var], delta: f64) -> Result<Var> {
        self.apply(OpKind::SoftMean(delta), losses)
    }
}
