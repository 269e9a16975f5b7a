//! Reverse-mode automatic differentiation over a closed set of vector
//! operations.
//!
//! Model code is written once against the [`Backend`] trait. Running it on
//! [`Eager`] computes plain values; running it on a [`Tape`] records every
//! operation so that a single reverse sweep yields gradients with respect to
//! all [`Tape::input`] leaves.
//!
//! Values are flat `f64` vectors. Scalars are vectors of length one and
//! broadcast against longer operands in the binary operations. Matrices are
//! stored row-major and only enter through [`Operation::MatVec`] and
//! [`Operation::Affine`].

use crate::error::{Error, Result};

/// Operation kinds together with the shape data each one needs.
#[derive(Clone, Debug, PartialEq)]
pub enum Operation {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
    /// Reduces a vector to its sum (length one).
    Sum,
    /// Inner product of two equal-length vectors (length one).
    Dot,
    /// `W x` with `W` of shape `rows x cols`.
    MatVec {
        rows: usize,
        cols: usize,
    },
    /// `W x + b`.
    Affine {
        rows: usize,
        cols: usize,
    },
    /// Selects entries by index (repeats allowed).
    Gather(Vec<usize>),
    /// Concatenates all arguments.
    Concat,
}

/// Fieldless discriminant of [`Operation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperationKind {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
    Sum,
    Dot,
    MatVec,
    Affine,
    Gather,
    Concat,
}

impl Operation {
    pub fn kind(&self) -> OperationKind {
        match self {
            Operation::Input => OperationKind::Input,
            Operation::Constant => OperationKind::Constant,
            Operation::Add => OperationKind::Add,
            Operation::Sub => OperationKind::Sub,
            Operation::Mul => OperationKind::Mul,
            Operation::Div => OperationKind::Div,
            Operation::Max => OperationKind::Max,
            Operation::Min => OperationKind::Min,
            Operation::Neg => OperationKind::Neg,
            Operation::Exp => OperationKind::Exp,
            Operation::Log => OperationKind::Log,
            Operation::Tanh => OperationKind::Tanh,
            Operation::Sigmoid => OperationKind::Sigmoid,
            Operation::Square => OperationKind::Square,
            Operation::Sqrt => OperationKind::Sqrt,
            Operation::Abs => OperationKind::Abs,
            Operation::Sum => OperationKind::Sum,
            Operation::Dot => OperationKind::Dot,
            Operation::MatVec { .. } => OperationKind::MatVec,
            Operation::Affine { .. } => OperationKind::Affine,
            Operation::Gather(_) => OperationKind::Gather,
            Operation::Concat => OperationKind::Concat,
        }
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

fn broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (1, _) => b.iter().map(|&y| f(a[0], y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        (n, m) => panic!("shape mismatch in binary operation: {n} vs {m}"),
    }
}

/// Forward rule shared by both backends.
fn compute(op: &Operation, args: &[&[f64]]) -> Vec<f64> {
    let unary = |f: fn(f64) -> f64| args[0].iter().map(|&x| f(x)).collect::<Vec<_>>();
    match op {
        Operation::Input | Operation::Constant => {
            unreachable!("leaves are not recomputed")
        }
        Operation::Add => broadcast(args[0], args[1], |x, y| x + y),
        Operation::Sub => broadcast(args[0], args[1], |x, y| x - y),
        Operation::Mul => broadcast(args[0], args[1], |x, y| x * y),
        Operation::Div => broadcast(args[0], args[1], |x, y| x / y),
        Operation::Max => broadcast(args[0], args[1], |x, y| if x >= y { x } else { y }),
        Operation::Min => broadcast(args[0], args[1], |x, y| if x <= y { x } else { y }),
        Operation::Neg => unary(|x| -x),
        Operation::Exp => unary(f64::exp),
        Operation::Log => unary(f64::ln),
        Operation::Tanh => unary(f64::tanh),
        Operation::Sigmoid => unary(sigmoid),
        Operation::Square => unary(|x| x * x),
        Operation::Sqrt => unary(f64::sqrt),
        Operation::Abs => unary(f64::abs),
        Operation::Sum => vec![args[0].iter().sum()],
        Operation::Dot => {
            assert_eq!(args[0].len(), args[1].len(), "dot length mismatch");
            vec![args[0].iter().zip(args[1]).map(|(a, b)| a * b).sum()]
        }
        Operation::MatVec { rows, cols } => matvec(args[0], *rows, *cols, args[1]),
        Operation::Affine { rows, cols } => {
            let mut out = matvec(args[0], *rows, *cols, args[2]);
            for (o, b) in out.iter_mut().zip(args[1]) {
                *o += b;
            }
            out
        }
        Operation::Gather(idx) => idx.iter().map(|&i| args[0][i]).collect(),
        Operation::Concat => args.iter().flat_map(|a| a.iter().copied()).collect(),
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), rows * cols, "matrix size mismatch");
    assert_eq!(x.len(), cols, "matvec input length mismatch");
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Numeric backend that model code is written against.
pub trait Backend {
    type V: Clone;

    /// Applies one operation. Named helpers below all route through here.
    fn apply(&mut self, op: Operation, args: &[&Self::V]) -> Self::V;
    fn constant(&mut self, value: &[f64]) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];
    /// True once any operation has produced a NaN or infinity.
    fn has_nonfinite(&self) -> bool;

    fn len(&self, v: &Self::V) -> usize {
        self.value(v).len()
    }
    fn scalar_value(&self, v: &Self::V) -> f64 {
        self.value(v)[0]
    }
    fn scalar(&mut self, x: f64) -> Self::V {
        self.constant(&[x])
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Div, &[a, b])
    }
    fn max(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Max, &[a, b])
    }
    fn min(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Min, &[a, b])
    }
    fn neg(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Neg, &[a])
    }
    fn exp(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Exp, &[a])
    }
    fn log(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Log, &[a])
    }
    fn tanh(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Tanh, &[a])
    }
    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Sigmoid, &[a])
    }
    fn square(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Square, &[a])
    }
    fn sqrt(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Sqrt, &[a])
    }
    fn abs(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Abs, &[a])
    }
    fn sum(&mut self, a: &Self::V) -> Self::V {
        self.apply(Operation::Sum, &[a])
    }
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Operation::Dot, &[a, b])
    }
    fn matvec(&mut self, w: &Self::V, rows: usize, cols: usize, x: &Self::V) -> Self::V {
        self.apply(Operation::MatVec { rows, cols }, &[w, x])
    }
    fn affine(
        &mut self,
        w: &Self::V,
        bias: &Self::V,
        rows: usize,
        cols: usize,
        x: &Self::V,
    ) -> Self::V {
        self.apply(Operation::Affine { rows, cols }, &[w, bias, x])
    }
    fn gather(&mut self, a: &Self::V, idx: &[usize]) -> Self::V {
        self.apply(Operation::Gather(idx.to_vec()), &[a])
    }
    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V {
        let idx: Vec<usize> = (start..start + len).collect();
        self.apply(Operation::Gather(idx), &[a])
    }
    fn concat(&mut self, parts: &[Self::V]) -> Self::V {
        let refs: Vec<&Self::V> = parts.iter().collect();
        self.apply(Operation::Concat, &refs)
    }

    /// `a * c` for a plain constant `c`.
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V {
        let c = self.scalar(c);
        self.mul(a, &c)
    }
    /// `a + c` for a plain constant `c`.
    fn shift(&mut self, a: &Self::V, c: f64) -> Self::V {
        let c = self.scalar(c);
        self.add(a, &c)
    }
    /// Numerically stable `log(1 + exp(x))`.
    fn softplus(&mut self, x: &Self::V) -> Self::V {
        let zero = self.scalar(0.0);
        let pos = self.max(x, &zero);
        let ax = self.abs(x);
        let nax = self.neg(&ax);
        let e = self.exp(&nax);
        let one_plus = self.shift(&e, 1.0);
        let l = self.log(&one_plus);
        self.add(&pos, &l)
    }
    fn log_sigmoid(&mut self, x: &Self::V) -> Self::V {
        let nx = self.neg(x);
        let sp = self.softplus(&nx);
        self.neg(&sp)
    }
    /// `log(sum(exp(x)))` shifted by the (constant) maximum entry.
    fn logsumexp(&mut self, x: &Self::V) -> Self::V {
        let m = self
            .value(x)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let m = if m.is_finite() { m } else { 0.0 };
        let shifted = self.shift(x, -m);
        let e = self.exp(&shifted);
        let s = self.sum(&e);
        let l = self.log(&s);
        self.shift(&l, m)
    }
    /// `exp(x_i - m) / sum_j exp(x_j - m)`.
    fn softmax(&mut self, x: &Self::V) -> Self::V {
        let m = self
            .value(x)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.shift(x, -m);
        let e = self.exp(&shifted);
        let s = self.sum(&e);
        self.div(&e, &s)
    }
}

/// Plain evaluation without recording.
#[derive(Debug, Default)]
pub struct Eager {
    nonfinite: bool,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for Eager {
    type V = Vec<f64>;

    fn apply(&mut self, op: Operation, args: &[&Vec<f64>]) -> Vec<f64> {
        let slices: Vec<&[f64]> = args.iter().map(|a| a.as_slice()).collect();
        let out = compute(&op, &slices);
        if !self.nonfinite && out.iter().any(|v| !v.is_finite()) {
            self.nonfinite = true;
        }
        out
    }

    fn constant(&mut self, value: &[f64]) -> Vec<f64> {
        value.to_vec()
    }

    fn value<'a>(&'a self, v: &'a Vec<f64>) -> &'a [f64] {
        v
    }

    fn has_nonfinite(&self) -> bool {
        self.nonfinite
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Operation,
    parents: Vec<usize>,
    value: Vec<f64>,
}

/// Append-only record of operations in topological order.
///
/// Graphs are recorded define-by-run through the [`Backend`] impl. A graph
/// whose structure does not depend on values (no value-driven branching) can
/// be replayed on new inputs with [`Tape::evaluate`] and [`Tape::gradient`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<usize>,
    output: Option<usize>,
    first_nonfinite: Option<usize>,
    forward_visits: usize,
    reverse_visits: usize,
}

/// Adjoints from one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v` (zeros if `v` does
    /// not influence the output).
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.adjoints[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable leaf.
    pub fn input(&mut self, value: &[f64]) -> Var {
        let id = self.push(Operation::Input, Vec::new(), value.to_vec());
        self.inputs.push(id);
        Var(id)
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v.0);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_count(&self) -> usize {
        self.inputs.iter().map(|&i| self.nodes[i].value.len()).sum()
    }

    pub fn kind(&self, v: Var) -> OperationKind {
        self.nodes[v.0].op.kind()
    }

    /// Number of node evaluations performed so far (recording included).
    pub fn forward_visits(&self) -> usize {
        self.forward_visits
    }

    /// Number of node visits performed by reverse sweeps so far.
    pub fn reverse_visits(&self) -> usize {
        self.reverse_visits
    }

    fn push(&mut self, op: Operation, parents: Vec<usize>, value: Vec<f64>) -> usize {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite = Some(id);
        }
        self.forward_visits += 1;
        self.nodes.push(Node { op, parents, value });
        id
    }

    fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some(id) => Err(Error::numerical(format!("tape node {id}"))),
            None => Ok(()),
        }
    }

    /// Replays the recorded graph on new leaf values (concatenated in input
    /// order) and returns the output node's value.
    pub fn evaluate(&mut self, input_values: &[f64]) -> Result<Vec<f64>> {
        let out = self
            .output
            .ok_or_else(|| Error::ContractViolation("tape has no output".into()))?;
        if input_values.len() != self.input_count() {
            return Err(Error::Input(format!(
                "expected {} input values, got {}",
                self.input_count(),
                input_values.len()
            )));
        }
        if let Some(bad) = input_values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("input value {bad} is not finite")));
        }
        let mut offset = 0;
        for &i in &self.inputs {
            let n = self.nodes[i].value.len();
            self.nodes[i]
                .value
                .copy_from_slice(&input_values[offset..offset + n]);
            offset += n;
        }
        self.first_nonfinite = None;
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            if matches!(node.op, Operation::Input | Operation::Constant) {
                continue;
            }
            let args: Vec<&[f64]> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].value.as_slice())
                .collect();
            let value = compute(&node.op, &args);
            if self.first_nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
                self.first_nonfinite = Some(id);
            }
            self.forward_visits += 1;
            self.nodes[id].value = value;
        }
        self.check_finite()?;
        Ok(self.nodes[out].value.clone())
    }

    /// Replays the graph and returns d(output)/d(inputs), concatenated in
    /// input order. The output must be a scalar.
    pub fn gradient(&mut self, input_values: &[f64]) -> Result<Vec<f64>> {
        self.evaluate(input_values)?;
        let out = Var(self.output.expect("checked by evaluate"));
        let grads = self.backward(out)?;
        Ok(self
            .inputs
            .clone()
            .into_iter()
            .flat_map(|i| grads.wrt(Var(i)))
            .collect())
    }

    /// One reverse sweep from a scalar node.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let out = output.0;
        if self.nodes[out].value.len() != 1 {
            return Err(Error::ContractViolation(format!(
                "gradient requires a scalar output, node {out} has length {}",
                self.nodes[out].value.len()
            )));
        }
        self.check_finite()?;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[out] = Some(vec![1.0]);
        for id in (0..=out).rev() {
            self.reverse_visits += 1;
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            propagate(&self.nodes, node, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], target: usize, len: usize, f: impl Fn(usize) -> f64) {
    let slot = adj[target].get_or_insert_with(|| vec![0.0; len]);
    for (i, s) in slot.iter_mut().enumerate() {
        *s += f(i);
    }
}

/// Adds a broadcast binary operation's local adjoint into one operand.
/// `local(i)` is the partial derivative for output element `i`.
fn accumulate_broadcast(
    adj: &mut [Option<Vec<f64>>],
    target: usize,
    target_len: usize,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if target_len == g.len() {
        accumulate(adj, target, target_len, |i| g[i] * local(i));
    } else {
        let total: f64 = (0..g.len()).map(|i| g[i] * local(i)).sum();
        accumulate(adj, target, 1, |_| total);
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let p = &node.parents;
    let y = &node.value;
    let val = |k: usize| nodes[p[k]].value.as_slice();
    let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    match &node.op {
        Operation::Input | Operation::Constant => {}
        Operation::Add => {
            let (la, lb) = (val(0).len(), val(1).len());
            accumulate_broadcast(adj, p[0], la, g, |_| 1.0);
            accumulate_broadcast(adj, p[1], lb, g, |_| 1.0);
        }
        Operation::Sub => {
            let (la, lb) = (val(0).len(), val(1).len());
            accumulate_broadcast(adj, p[0], la, g, |_| 1.0);
            accumulate_broadcast(adj, p[1], lb, g, |_| -1.0);
        }
        Operation::Mul => {
            let (a, b) = (val(0), val(1));
            accumulate_broadcast(adj, p[0], a.len(), g, |i| at(b, i));
            accumulate_broadcast(adj, p[1], b.len(), g, |i| at(a, i));
        }
        Operation::Div => {
            let (a, b) = (val(0), val(1));
            accumulate_broadcast(adj, p[0], a.len(), g, |i| 1.0 / at(b, i));
            accumulate_broadcast(adj, p[1], b.len(), g, |i| {
                let bi = at(b, i);
                -at(a, i) / (bi * bi)
            });
        }
        Operation::Max | Operation::Min => {
            let (a, b) = (val(0), val(1));
            let is_max = node.op == Operation::Max;
            let pick_a = |i: usize| {
                let (x, z) = (at(a, i), at(b, i));
                if is_max {
                    x >= z
                } else {
                    x <= z
                }
            };
            accumulate_broadcast(adj, p[0], a.len(), g, |i| if pick_a(i) { 1.0 } else { 0.0 });
            accumulate_broadcast(adj, p[1], b.len(), g, |i| if pick_a(i) { 0.0 } else { 1.0 });
        }
        Operation::Neg => accumulate(adj, p[0], g.len(), |i| -g[i]),
        Operation::Exp => accumulate(adj, p[0], g.len(), |i| g[i] * y[i]),
        Operation::Log => {
            let a = val(0);
            accumulate(adj, p[0], g.len(), |i| g[i] / a[i])
        }
        Operation::Tanh => accumulate(adj, p[0], g.len(), |i| g[i] * (1.0 - y[i] * y[i])),
        Operation::Sigmoid => accumulate(adj, p[0], g.len(), |i| g[i] * y[i] * (1.0 - y[i])),
        Operation::Square => {
            let a = val(0);
            accumulate(adj, p[0], g.len(), |i| 2.0 * a[i] * g[i])
        }
        Operation::Sqrt => accumulate(adj, p[0], g.len(), |i| g[i] / (2.0 * y[i])),
        Operation::Abs => {
            let a = val(0);
            accumulate(adj, p[0], g.len(), |i| {
                if a[i] > 0.0 {
                    g[i]
                } else if a[i] < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            })
        }
        Operation::Sum => {
            let n = val(0).len();
            accumulate(adj, p[0], n, |_| g[0]);
        }
        Operation::Dot => {
            let (a, b) = (val(0), val(1));
            accumulate(adj, p[0], a.len(), |i| g[0] * b[i]);
            accumulate(adj, p[1], b.len(), |i| g[0] * a[i]);
        }
        Operation::MatVec { rows, cols } | Operation::Affine { rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            let w = val(0);
            let x_slot = if matches!(node.op, Operation::Affine { .. }) {
                accumulate(adj, p[1], rows, |r| g[r]);
                2
            } else {
                1
            };
            let x = val(x_slot);
            accumulate(adj, p[0], rows * cols, |k| g[k / cols] * x[k % cols]);
            accumulate(adj, p[x_slot], cols, |c| {
                (0..rows).map(|r| w[r * cols + c] * g[r]).sum()
            });
        }
        Operation::Gather(idx) => {
            let n = val(0).len();
            let slot = adj[p[0]].get_or_insert_with(|| vec![0.0; n]);
            for (k, &i) in idx.iter().enumerate() {
                slot[i] += g[k];
            }
        }
        Operation::Concat => {
            let mut offset = 0;
            for &parent in p {
                let n = nodes[parent].value.len();
                accumulate(adj, parent, n, |i| g[offset + i]);
                offset += n;
            }
        }
    }
}

impl Backend for Tape {
    type V = Var;

    fn apply(&mut self, op: Operation, args: &[&Var]) -> Var {
        let parents: Vec<usize> = args.iter().map(|v| v.0).collect();
        let value = {
            let slices: Vec<&[f64]> = parents
                .iter()
                .map(|&p| self.nodes[p].value.as_slice())
                .collect();
            compute(&op, &slices)
        };
        Var(self.push(op, parents, value))
    }

    fn constant(&mut self, value: &[f64]) -> Var {
        Var(self.push(Operation::Constant, Vec::new(), value.to_vec()))
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a [f64] {
        &self.nodes[v.0].value
    }

    fn has_nonfinite(&self) -> bool {
        self.first_nonfinite.is_some()
    }
}

/// A scalar function of a vector, written against [`Backend`] so that it can
/// be both evaluated and differentiated.
pub trait ScalarField {
    fn eval<B: Backend>(&self, b: &mut B, x: &B::V) -> B::V;
}

/// Evaluates `f` at `x` without recording.
pub fn value<F: ScalarField>(f: &F, x: &[f64]) -> f64 {
    let mut b = Eager::new();
    let xv = b.constant(x);
    let y = f.eval(&mut b, &xv);
    b.scalar_value(&y)
}

/// Value and reverse-mode gradient of `f` at `x`.
pub fn value_and_gradient<F: ScalarField>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = f.eval(&mut tape, &xv);
    tape.set_output(y);
    let grads = tape.backward(y)?;
    Ok((tape.scalar_value(&y), grads.wrt(xv)))
}

/// Maximum relative error `|a - b| / max(1, |a|, |b|)` between the reverse
/// mode gradient and central finite differences with the given step.
/// Non-finite comparisons report `+inf`.
pub fn check_gradient<F: ScalarField>(f: &F, point: &[f64], step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let Ok((_, grad)) = value_and_gradient(f, point) else {
        return f64::INFINITY;
    };
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = value(f, &x);
        x[i] = point[i] - step;
        let down = value(f, &x);
        x[i] = point[i];
        let fd = (up - down) / (2.0 * step);
        let a = grad[i];
        if !fd.is_finite() || !a.is_finite() {
            return f64::INFINITY;
        }
        let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph() {
        let mut t = Tape::new();
        let x = t.input(&[0.0]);
        t.set_output(x);
        assert_eq!(t.evaluate(&[3.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut t = Tape::new();
        let x = t.input(&[1.0]);
        let l = t.log(&x);
        let e = t.exp(&l);
        t.set_output(e);
        let v = t.evaluate(&[2.5]).unwrap()[0];
        assert!((v - 2.5).abs() < 1e-15);
    }

    #[test]
    fn product_plus_input() {
        let mut t = Tape::new();
        let x = t.input(&[0.0]);
        let y = t.input(&[0.0]);
        let xy = t.mul(&x, &y);
        let out = t.add(&xy, &x);
        t.set_output(out);
        assert_eq!(t.evaluate(&[2.0, 3.0]).unwrap(), vec![8.0]);
        assert_eq!(t.gradient(&[2.0, 3.0]).unwrap(), vec![4.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.input(&[0.0]);
        let y = t.square(&x);
        t.set_output(y);
        assert_eq!(t.gradient(&[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let mut t = Tape::new();
        let x = t.input(&[0.0]);
        let c = t.scalar(4.0);
        let zero = t.scale(&x, 0.0);
        let out = t.add(&c, &zero);
        t.set_output(out);
        assert_eq!(t.gradient(&[1.7]).unwrap(), vec![0.0]);

        // A constant that never touches the input at all.
        let mut t = Tape::new();
        let x = t.input(&[0.0]);
        let c = t.scalar(4.0);
        t.set_output(c);
        let g = t.gradient(&[1.7]).unwrap();
        assert_eq!(g, vec![0.0]);
        let _ = x;
    }

    #[test]
    fn tanh_slope_at_origin() {
        let mut t = Tape::new();
        let x = t.input(&[0.0]);
        let y = t.tanh(&x);
        t.set_output(y);
        assert_eq!(t.gradient(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn vector_output_gradient_is_contract_violation() {
        let mut t = Tape::new();
        let x = t.input(&[1.0, 2.0]);
        let y = t.exp(&x);
        t.set_output(y);
        assert!(matches!(
            t.gradient(&[1.0, 2.0]),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn nonfinite_intermediate_reports_node() {
        let mut t = Tape::new();
        let x = t.input(&[1.0]);
        let l = t.log(&x);
        t.set_output(l);
        match t.evaluate(&[-1.0]) {
            Err(Error::Numerical { location }) => assert_eq!(location, "tape node 1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_input_length_rejected() {
        let mut t = Tape::new();
        let x = t.input(&[1.0]);
        t.set_output(x);
        assert!(matches!(t.evaluate(&[1.0, 2.0]), Err(Error::Input(_))));
    }

    #[test]
    fn affine_and_gather_gradients() {
        let mut t = Tape::new();
        let w = t.input(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t.input(&[0.5, -0.5]);
        let x = t.input(&[1.0, -1.0, 2.0]);
        let y = t.affine(&w, &b, 2, 3, &x);
        assert_eq!(
            t.value(&y),
            &[1.0 - 2.0 + 6.0 + 0.5, 4.0 - 5.0 + 12.0 - 0.5]
        );
        let picked = t.gather(&y, &[1, 1, 0]);
        let s = t.sum(&picked);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(b), vec![1.0, 2.0]);
        assert_eq!(g.wrt(x), vec![1.0 + 8.0, 2.0 + 10.0, 3.0 + 12.0]);
        assert_eq!(g.wrt(w), vec![1.0, -1.0, 2.0, 2.0, -2.0, 4.0]);
    }

    #[test]
    fn reverse_sweep_visits_each_node_once() {
        let mut t = Tape::new();
        let x = t.input(&[0.3, -0.2]);
        let a = t.tanh(&x);
        let b = t.mul(&a, &x);
        let c = t.sum(&b);
        let before = t.forward_visits();
        t.backward(c).unwrap();
        assert_eq!(t.reverse_visits(), before);
        assert!(t.reverse_visits() <= 2 * t.node_count());
    }
}
