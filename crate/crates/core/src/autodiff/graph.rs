use std::cell::RefCell;

use super::{AutodiffError, Tensor};

/// Guard used in cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of an externally computed node: receives the gradient of
/// the node's output and returns one gradient per input, in input order.
pub type CustomBackward = Box<dyn FnOnce(&[f64]) -> Result<Vec<Vec<f64>>, AutodiffError>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Tanh,
    /// Leaky ReLU with the given negative slope.
    LeakyRelu(f64),
    Square,
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    LeakyRelu(f64),
    Square,
    Sigmoid,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    AddBias(Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Cosine { a: Var, b: Var, shared: bool },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Custom(Vec<Var>, Option<CustomBackward>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. It participates in gradients iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&self, tensor: Tensor) -> Result<Var, AutodiffError> {
        check_finite("leaf", tensor.data())?;
        let requires_grad = tensor.is_requires_grad();
        let mut tensor = tensor;
        tensor.zero_grad();
        Ok(self.push(tensor, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, tensor: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(tensor.requires_grad(false))
    }

    /// Leaf that requires a gradient, holding a copy of `tensor`.
    pub fn param(&self, tensor: &Tensor) -> Result<Var, AutodiffError> {
        self.leaf(tensor.clone().requires_grad(true))
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone().requires_grad(false)
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.data().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn finish(&self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        check_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, if rg { op } else { Op::Leaf }, rg))
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k, n, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = dims2("matmul", ta)?;
            let (k2, n) = dims2("matmul", tb)?;
            if k != k2 {
                return Err(AutodiffError::Shape(format!("matmul {:?} · {:?}", ta.shape(), tb.shape())));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
            (m, k, n, out)
        };
        let _ = k;
        self.finish("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    /// Dispatches one of the elementwise ops. Binary ops take two
    /// arguments, unary ops one.
    pub fn elementwise(&self, op: ElementwiseOp, args: &[Var]) -> Result<Var, AutodiffError> {
        let need = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if args.len() != need {
            return Err(AutodiffError::Shape(format!("{op:?} takes {need} arguments, got {}", args.len())));
        }
        match op {
            ElementwiseOp::Add => self.binary(Binary::Add, args[0], args[1]),
            ElementwiseOp::Sub => self.binary(Binary::Sub, args[0], args[1]),
            ElementwiseOp::Mul => self.binary(Binary::Mul, args[0], args[1]),
            ElementwiseOp::Tanh => self.unary(Unary::Tanh, args[0]),
            ElementwiseOp::LeakyRelu(s) => self.unary(Unary::LeakyRelu(s), args[0]),
            ElementwiseOp::Square => self.unary(Unary::Square, args[0]),
            ElementwiseOp::Sigmoid => self.unary(Unary::Sigmoid, args[0]),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn tanh(&self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var, AutodiffError> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn square(&self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Square, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sigmoid, x)
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            if ta.shape() == tb.shape() {
                let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                (ta.shape().to_vec(), d)
            } else if tb.numel() == 1 {
                let y = tb.data()[0];
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            } else if ta.numel() == 1 {
                let x = ta.data()[0];
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            } else {
                return Err(AutodiffError::Shape(format!("{kind:?}: cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())));
            }
        };
        self.finish("elementwise", shape, data, Op::Binary(kind, a, b), &[a, b])
    }

    fn unary(&self, kind: Unary, x: Var) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d: Vec<f64> = match kind {
                Unary::Tanh => t.data().iter().map(|v| v.tanh()).collect(),
                Unary::LeakyRelu(s) => t.data().iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
                Unary::Square => t.data().iter().map(|v| v * v).collect(),
                Unary::Sigmoid => t.data().iter().map(|&v| sigmoid(v)).collect(),
            };
            (t.shape().to_vec(), d)
        };
        self.finish("elementwise", shape, data, Op::Unary(kind, x), &[x])
    }

    /// Multiplies by a constant.
    pub fn scale(&self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
        };
        self.finish("scale", shape, data, Op::Scale(x, c), &[x])
    }

    /// Multiplies row `i` of a matrix by the constant `factors[i]`.
    pub fn scale_rows(&self, x: Var, factors: &[f64]) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = dims2("scale_rows", t)?;
            if factors.len() != r {
                return Err(AutodiffError::Shape(format!("{} row factors for {r} rows", factors.len())));
            }
            let mut d = t.data().to_vec();
            for (row, &f) in d.chunks_mut(c).zip(factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            (vec![r, c], d)
        };
        self.finish("scale_rows", shape, data, Op::ScaleRows(x, factors.to_vec()), &[x])
    }

    /// Adds a `[n]` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (t, b) = (&nodes[x.0].value, &nodes[bias.0].value);
            let (r, c) = dims2("add_bias", t)?;
            if b.numel() != c {
                return Err(AutodiffError::Shape(format!("bias {:?} for {:?}", b.shape(), t.shape())));
            }
            let mut d = t.data().to_vec();
            for row in d.chunks_mut(c) {
                row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
            }
            (vec![r, c], d)
        };
        self.finish("add_bias", shape, data, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn sum(&self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.finish("sum", vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var, AutodiffError> {
        let m = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        self.finish("mean", vec![], vec![m], Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let m = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(AutodiffError::Shape(format!("mse {:?} vs {:?}", ta.shape(), tb.shape())));
            }
            let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            s / ta.numel() as f64
        };
        self.finish("mse", vec![], vec![m], Op::Mse(a, b), &[a, b])
    }

    /// Cosine similarity `⟨a,b⟩ / (max(‖a‖,ε)·max(‖b‖,ε))`.
    ///
    /// With two 1-D inputs of equal length the result is a scalar. With `a`
    /// of shape `[r×d]` the similarity is taken row by row against `b`,
    /// which is either a shared `[d]` vector or another `[r×d]` matrix, and
    /// the result has shape `[r]`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (shape, data, shared) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (rows, d, out_shape) = match ta.shape().len() {
                1 => (1, ta.numel(), vec![]),
                2 => (ta.shape()[0], ta.shape()[1], vec![ta.shape()[0]]),
                _ => return Err(AutodiffError::Shape(format!("cosine of {:?}", ta.shape()))),
            };
            let shared = tb.numel() == d && (tb.shape().len() == 1 || rows == 1);
            if !shared && tb.shape() != ta.shape() {
                return Err(AutodiffError::Shape(format!("cosine {:?} vs {:?}", ta.shape(), tb.shape())));
            }
            let out = (0..rows)
                .map(|r| {
                    let ar = &ta.data()[r * d..(r + 1) * d];
                    let br = if shared { tb.data() } else { &tb.data()[r * d..(r + 1) * d] };
                    cosine(ar, br)
                })
                .collect();
            (out_shape, out, shared)
        };
        self.finish("cosine_similarity", shape, data, Op::Cosine { a, b, shared }, &[a, b])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let mut rows = None;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = dims2("concat_cols", &nodes[p.0].value)?;
                if *rows.get_or_insert(r) != r {
                    return Err(AutodiffError::Shape("concat_cols: row counts differ".into()));
                }
                widths.push(c);
            }
            let rows = rows.ok_or_else(|| AutodiffError::Shape("concat_cols of nothing".into()))?;
            let total: usize = widths.iter().sum();
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    d.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            (vec![rows, total], d)
        };
        self.finish("concat_cols", shape, data, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = dims2("slice_cols", t)?;
            if start >= end || end > c {
                return Err(AutodiffError::Shape(format!("slice {start}..{end} of {c} columns")));
            }
            let d = (0..r).flat_map(|i| t.data()[i * c + start..i * c + end].iter().copied()).collect();
            (vec![r, end - start], d)
        };
        self.finish("slice_cols", shape, data, Op::SliceCols(x, start, end), &[x])
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = dims2("select_rows", t)?;
            if idx.is_empty() || idx.iter().any(|&i| i >= r) {
                return Err(AutodiffError::Shape(format!("row selection out of range for {r} rows")));
            }
            let d = idx.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].iter().copied()).collect();
            (vec![idx.len(), c], d)
        };
        self.finish("select_rows", shape, data, Op::SelectRows(x, idx.to_vec()), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let data = t.into_data();
        self.finish("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let (b, c) = dims2("cross_entropy", t)?;
            if labels.len() != b || labels.iter().any(|&l| l >= c) {
                return Err(AutodiffError::Shape(format!("{} labels for [{b}×{c}] logits", labels.len())));
            }
            let mut probs = Vec::with_capacity(b * c);
            let mut loss = 0.0;
            for (row, &label) in t.data().chunks(c).zip(labels) {
                let p = softmax(row);
                loss -= p[label].max(f64::MIN_POSITIVE).ln();
                probs.extend(p);
            }
            (loss / b as f64, probs)
        };
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.finish("cross_entropy", vec![], vec![loss], op, &[logits])
    }

    /// Records a node whose value was computed outside the tape. `backward`
    /// maps the output gradient to one gradient per input.
    pub fn custom(&self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Result<Var, AutodiffError> {
        let shape = output.shape().to_vec();
        let data = output.into_data();
        self.finish("custom", shape, data, Op::Custom(inputs.to_vec(), Some(backward)), inputs)
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar loss. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients, AutodiffError> {
        {
            let nodes = self.nodes.borrow();
            let node = &nodes[loss.0];
            if node.value.numel() != 1 {
                return Err(AutodiffError::NonScalarLoss(node.value.shape().to_vec()));
            }
        }
        self.backward_with(loss, &Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every leaf. Consumes the graph.
    pub fn backward_with(self, output: Var, seed: &Tensor) -> Result<Gradients, AutodiffError> {
        let mut nodes = self.nodes.into_inner();
        let out = &nodes[output.0];
        if !out.requires_grad {
            return Err(AutodiffError::Detached);
        }
        if seed.numel() != out.value.numel() {
            return Err(AutodiffError::Shape(format!("seed {:?} for output {:?}", seed.shape(), out.value.shape())));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(seed.data().to_vec());

        for id in (0..=output.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let custom = match &mut nodes[id].op {
                Op::Custom(inputs, f) => Some((inputs.clone(), f.take())),
                _ => None,
            };
            if let Some((inputs, f)) = custom {
                let f = f.ok_or(AutodiffError::Detached)?;
                let parts = f(&g)?;
                if parts.len() != inputs.len() {
                    return Err(AutodiffError::Shape("custom backward arity".into()));
                }
                for (v, part) in inputs.iter().zip(parts) {
                    accumulate(&mut grads, &nodes, *v, &part)?;
                }
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut leaves = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                check_finite("backward", &g)?;
                leaves.push((id, g));
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { leaves, shapes })
    }
}

/// Gradients of every leaf that required one, keyed by its [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(usize, Vec<f64>)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.binary_search_by_key(&v.0, |(id, _)| *id).ok().map(|i| self.leaves[i].1.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Tensor::new(self.shapes[v.0].clone(), g.to_vec()).ok()
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        let i = self.leaves.binary_search_by_key(&v.0, |(id, _)| *id).ok()?;
        Some(std::mem::take(&mut self.leaves[i].1))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64]) -> Result<(), AutodiffError> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    if g.len() != nodes[v.0].value.numel() {
        return Err(AutodiffError::Shape(format!("gradient of length {} for value {:?}", g.len(), nodes[v.0].value.shape())));
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
    Ok(())
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), AutodiffError> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if rg(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut ga, 0.0);
                accumulate(grads, nodes, *a, &ga)?;
            }
            if rg(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut gb, 0.0);
                accumulate(grads, nodes, *b, &gb)?;
            }
        }
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let n = g.len();
            let a_at = |i: usize| if ta.numel() == n { ta.data()[i] } else { ta.data()[0] };
            let b_at = |i: usize| if tb.numel() == n { tb.data()[i] } else { tb.data()[0] };
            let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                Binary::Mul => ((0..n).map(|i| g[i] * b_at(i)).collect(), (0..n).map(|i| g[i] * a_at(i)).collect()),
            };
            if rg(*a) {
                accumulate(grads, nodes, *a, &reduce_broadcast(da, ta.numel()))?;
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, &reduce_broadcast(db, tb.numel()))?;
            }
        }
        Op::Scale(x, c) => {
            let d: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::ScaleRows(x, factors) => {
            let c = val(*x).cols();
            let mut d = g.to_vec();
            for (row, f) in d.chunks_mut(c).zip(factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::AddBias(x, b) => {
            if rg(*x) {
                accumulate(grads, nodes, *x, g)?;
            }
            if rg(*b) {
                let c = val(*b).numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                accumulate(grads, nodes, *b, &db)?;
            }
        }
        Op::Unary(kind, x) => {
            let input = val(*x).data();
            let out = nodes[id].value.data();
            let d: Vec<f64> = match kind {
                Unary::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                Unary::LeakyRelu(s) => g.iter().zip(input).map(|(g, &x)| if x > 0.0 { *g } else { g * s }).collect(),
                Unary::Square => g.iter().zip(input).map(|(g, x)| 2.0 * g * x).collect(),
                Unary::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
            };
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::Sum(x) => {
            let d = vec![g[0]; val(*x).numel()];
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            let d = vec![g[0] / n as f64; n];
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let scale = 2.0 * g[0] / ta.numel() as f64;
            let da: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| scale * (x - y)).collect();
            if rg(*b) {
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                accumulate(grads, nodes, *b, &db)?;
            }
            if rg(*a) {
                accumulate(grads, nodes, *a, &da)?;
            }
        }
        Op::Cosine { a, b, shared } => {
            let (ta, tb) = (val(*a), val(*b));
            let rows = g.len();
            let d = ta.numel() / rows;
            let mut da = vec![0.0; ta.numel()];
            let mut db = vec![0.0; tb.numel()];
            for r in 0..rows {
                let ar = &ta.data()[r * d..(r + 1) * d];
                let boff = if *shared { 0 } else { r * d };
                let br = &tb.data()[boff..boff + d];
                let (dot, na, nb) = dot_norms(ar, br);
                let (ga, gb) = (na.max(COSINE_EPS), nb.max(COSINE_EPS));
                let c = dot / (ga * gb);
                let ka = if na > COSINE_EPS { c / (na * na) } else { 0.0 };
                let kb = if nb > COSINE_EPS { c / (nb * nb) } else { 0.0 };
                let inv = 1.0 / (ga * gb);
                for i in 0..d {
                    da[r * d + i] += g[r] * (br[i] * inv - ka * ar[i]);
                    db[boff + i] += g[r] * (ar[i] * inv - kb * br[i]);
                }
            }
            if rg(*a) {
                accumulate(grads, nodes, *a, &da)?;
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, &db)?;
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].value.cols();
            let rows = nodes[id].value.rows();
            let mut off = 0;
            for p in parts {
                let w = val(*p).cols();
                if rg(*p) {
                    let d: Vec<f64> = (0..rows).flat_map(|r| g[r * total + off..r * total + off + w].iter().copied()).collect();
                    accumulate(grads, nodes, *p, &d)?;
                }
                off += w;
            }
        }
        Op::SliceCols(x, start, end) => {
            let c = val(*x).cols();
            let w = end - start;
            let mut d = vec![0.0; val(*x).numel()];
            for (r, row) in g.chunks(w).enumerate() {
                d[r * c + start..r * c + end].copy_from_slice(row);
            }
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::SelectRows(x, idx) => {
            let c = val(*x).cols();
            let mut d = vec![0.0; val(*x).numel()];
            for (row, &i) in g.chunks(c).zip(idx) {
                d[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            accumulate(grads, nodes, *x, &d)?;
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g)?,
        Op::CrossEntropy { logits, labels, probs } => {
            let b = labels.len();
            let c = probs.len() / b;
            let mut d = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                d[r * c + l] -= 1.0;
            }
            let s = g[0] / b as f64;
            d.iter_mut().for_each(|v| *v *= s);
            accumulate(grads, nodes, *logits, &d)?;
        }
        Op::Custom(..) => unreachable!("custom nodes are handled by the caller"),
    }
    Ok(())
}

fn reduce_broadcast(g: Vec<f64>, numel: usize) -> Vec<f64> {
    if g.len() == numel {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::Shape(format!("{op} needs a matrix, got {s:?}"))),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), AutodiffError> {
    match data.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(AutodiffError::NonFinite { op, value: *v }),
        None => Ok(()),
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

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = dot_norms(a, b);
    dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS))
}

/// `c = beta·c + op(a)·op(b)` for row-major buffers, where `op(a)` is
/// `[m×k]` and `op(b)` is `[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches given these strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
