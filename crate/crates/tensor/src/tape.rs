//! Reverse-mode differentiation tape.
//!
//! Every primitive application appends a node holding its output value. Nodes
//! are appended in evaluation order, so the tape is topologically sorted by
//! construction and `backward` is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Result, TensorError};
use crate::registry::ParamRegistry;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive set of the engine. Attributes live inline in the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Per-row affine map: inputs `x [N, Cin]`, `w [Cin, Cout]`, optional `b [Cout]`.
    Linear,
    Relu,
    Concat {
        axis: usize,
    },
    /// Row gather along axis 0.
    Gather {
        indices: Vec<usize>,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    Add,
    Sub,
    Mul,
    Scale {
        factor: f64,
    },
    AddScalar {
        value: f64,
    },
    MeanReduce {
        axis: usize,
    },
    SumReduce {
        axis: usize,
    },
    /// Mean along an axis with the values summed in ascending order, so the
    /// result is bit-identical under any reordering along that axis.
    OrderFreeMean {
        axis: usize,
    },
    /// Max along an axis; the backward pass routes to the first argmax.
    MaxReduce {
        axis: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Repeats the whole tensor `reps` times along axis 0.
    Tile {
        reps: usize,
    },
    Exp,
    Log,
    Square,
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Clamp {
        min: f64,
        max: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Linear => "linear",
            Primitive::Relu => "relu",
            Primitive::Concat { .. } => "concat",
            Primitive::Gather { .. } => "gather",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax { .. } => "log_softmax",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::AddScalar { .. } => "add_scalar",
            Primitive::MeanReduce { .. } => "mean_reduce",
            Primitive::SumReduce { .. } => "sum_reduce",
            Primitive::OrderFreeMean { .. } => "order_free_mean",
            Primitive::MaxReduce { .. } => "max_reduce",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Tile { .. } => "tile",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Slice { .. } => "slice",
            Primitive::Clamp { .. } => "clamp",
        }
    }
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Op {
        prim: Primitive,
        inputs: Vec<Var>,
        /// Flat argmax positions for `MaxReduce`.
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

/// Records a computation for one loss evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter path. Parameters bound on the tape but not
    /// reachable from the loss map to exact zeros.
    pub fn param(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient for a leaf created with [`Tape::input`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin: Origin::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies a value into a constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a registry parameter as a differentiable leaf. Repeated binds of
    /// the same path return the same node so gradients accumulate.
    pub fn param(&mut self, registry: &ParamRegistry, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let value = registry
            .get(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))?
            .clone();
        let v = self.push_leaf(value, true);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, argmax) = forward(&prim, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            origin: Origin::Op {
                prim,
                inputs: inputs.to_vec(),
                argmax,
            },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Primitive::Linear, &[x, w, b]),
            None => self.apply(Primitive::Linear, &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale { factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar { value }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanReduce { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumReduce { axis }, &[x])
    }

    pub fn order_free_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::OrderFreeMean { axis }, &[x])
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MaxReduce { axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape }, &[x])
    }

    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        self.apply(Primitive::Tile { reps }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }

    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { min, max }, &[x])
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.sum(flat, 0)
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.mean(flat, 0)
    }

    /// Propagates d(loss)/d(node) back to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if loss_shape != [1] {
            return Err(TensorError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Origin::Op {
                prim,
                inputs,
                argmax,
            } = &node.origin
            else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let in_vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let in_grads = backward_op(prim, &in_vals, &node.value, &g, argmax, &wanted);
            for ((input, ig), w) in inputs.iter().zip(in_grads).zip(&wanted) {
                if !w {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            // Leaves keep their gradient; interior buffers were taken above.
        }

        let mut out = Gradients::default();
        for (path, v) in &self.params {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let t = match grads.get(v.0).and_then(Option::as_ref) {
                Some(g) => Tensor::from_parts(shape, g.clone()),
                None => Tensor::zeros(&shape),
            };
            out.params.insert(path.clone(), t);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            if let (Some(g), Origin::Leaf, true) = (g, &node.origin, node.requires_grad) {
                out.leaves
                    .insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        // Differentiable inputs that the loss never touched get zeros too.
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.origin, Origin::Leaf) && node.requires_grad {
                out.leaves
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

/// Evaluates a primitive without recording it.
pub fn forward_primitive(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(prim, inputs).map(|(t, _)| t)
}

fn arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(
            prim.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn check_axis(prim: &Primitive, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(shape_err(
            prim.name(),
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(
    prim: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            prim.name(),
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    ))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the callers size `a`, `b` and `c` from the same m/k/n used here
    // and pass strides of a dense row-major or transposed view.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let out = match prim {
        Primitive::Linear => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(shape_err(
                    "linear",
                    format!("expected 2 or 3 inputs, got {}", inputs.len()),
                ));
            }
            let (x, w) = (inputs[0], inputs[1]);
            if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
                return Err(shape_err(
                    "linear",
                    format!(
                        "input {:?} incompatible with weight {:?}",
                        x.shape(),
                        w.shape()
                    ),
                ));
            }
            let (n, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let mut out = vec![0.0; n * cout];
            if let Some(b) = inputs.get(2) {
                if b.shape() != [cout] {
                    return Err(shape_err(
                        "linear",
                        format!("bias {:?} does not match output width {cout}", b.shape()),
                    ));
                }
                for row in out.chunks_exact_mut(cout) {
                    row.copy_from_slice(b.data());
                }
            }
            gemm(
                n,
                cin,
                cout,
                x.data(),
                cin as isize,
                1,
                w.data(),
                cout as isize,
                1,
                &mut out,
                inputs.len() == 3,
            );
            Tensor::from_parts(vec![n, cout], out)
        }
        Primitive::Relu => {
            arity(prim, inputs, 1)?;
            map(inputs[0], |v| if v > 0.0 { v } else { 0.0 })
        }
        Primitive::Concat { axis } => {
            if inputs.is_empty() {
                return Err(shape_err("concat", "no inputs"));
            }
            let first = inputs[0];
            check_axis(prim, first, *axis)?;
            let mut shape = first.shape().to_vec();
            shape[*axis] = 0;
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(d, (a, b))| d == *axis || a == b);
                if !ok {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} vs {:?} along axis {axis}", first.shape(), t.shape()),
                    ));
                }
                shape[*axis] += t.shape()[*axis];
            }
            let outer: usize = first.shape()[..*axis].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.len() / outer;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        }
        Primitive::Gather { indices } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let rows = x.rows();
            let w = x.row_len();
            let mut data = Vec::with_capacity(indices.len() * w);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(x.row(i));
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            if indices.is_empty() {
                return Err(shape_err("gather", "empty index list"));
            }
            Tensor::from_parts(shape, data)
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let log = matches!(prim, Primitive::LogSoftmax { .. });
            let src = x.data();
            let mut data = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let m = (0..len)
                        .map(|j| src[at(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..len).map(|j| (src[at(j)] - m).exp()).sum();
                    for j in 0..len {
                        data[at(j)] = if log {
                            src[at(j)] - m - z.ln()
                        } else {
                            (src[at(j)] - m).exp() / z
                        };
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::Add => {
            arity(prim, inputs, 2)?;
            zip_map(prim, inputs[0], inputs[1], |a, b| a + b)?
        }
        Primitive::Sub => {
            arity(prim, inputs, 2)?;
            zip_map(prim, inputs[0], inputs[1], |a, b| a - b)?
        }
        Primitive::Mul => {
            arity(prim, inputs, 2)?;
            zip_map(prim, inputs[0], inputs[1], |a, b| a * b)?
        }
        Primitive::Scale { factor } => {
            arity(prim, inputs, 1)?;
            map(inputs[0], |v| v * factor)
        }
        Primitive::AddScalar { value } => {
            arity(prim, inputs, 1)?;
            map(inputs[0], |v| v + value)
        }
        Primitive::MeanReduce { axis } | Primitive::SumReduce { axis } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            if matches!(prim, Primitive::MeanReduce { .. }) {
                let n = len as f64;
                data.iter_mut().for_each(|v| *v /= n);
            }
            Tensor::from_parts(reduced_shape(x.shape(), *axis), data)
        }
        Primitive::OrderFreeMean { axis } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut data = Vec::with_capacity(outer * inner);
            let mut column = Vec::with_capacity(len);
            for o in 0..outer {
                for i in 0..inner {
                    column.clear();
                    column.extend((0..len).map(|j| x.data()[(o * len + j) * inner + i]));
                    column.sort_unstable_by(f64::total_cmp);
                    let mut acc = 0.0;
                    for v in &column {
                        acc += v;
                    }
                    data.push(acc / len as f64);
                }
            }
            Tensor::from_parts(reduced_shape(x.shape(), *axis), data)
        }
        Primitive::MaxReduce { axis } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let src = x.data();
            let mut data = vec![f64::NEG_INFINITY; outer * inner];
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        let v = src[base + i];
                        let slot = o * inner + i;
                        // Strict comparison keeps the first argmax on ties.
                        if j == 0 || v > data[slot] {
                            data[slot] = v;
                            argmax[slot] = base + i;
                        }
                    }
                }
            }
            return Ok((
                Tensor::from_parts(reduced_shape(x.shape(), *axis), data),
                argmax,
            ));
        }
        Primitive::Reshape { shape } => {
            arity(prim, inputs, 1)?;
            inputs[0].clone().reshaped(shape.clone())?
        }
        Primitive::Tile { reps } => {
            arity(prim, inputs, 1)?;
            if *reps == 0 {
                return Err(shape_err("tile", "reps must be ≥ 1"));
            }
            let x = inputs[0];
            let mut shape = x.shape().to_vec();
            shape[0] *= reps;
            let mut data = Vec::with_capacity(x.len() * reps);
            for _ in 0..*reps {
                data.extend_from_slice(x.data());
            }
            Tensor::from_parts(shape, data)
        }
        Primitive::Exp => {
            arity(prim, inputs, 1)?;
            map(inputs[0], f64::exp)
        }
        Primitive::Log => {
            arity(prim, inputs, 1)?;
            map(inputs[0], f64::ln)
        }
        Primitive::Square => {
            arity(prim, inputs, 1)?;
            map(inputs[0], |v| v * v)
        }
        Primitive::Slice { axis, start, end } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            if start >= end || *end > len {
                return Err(shape_err(
                    "slice",
                    format!(
                        "range {start}..{end} invalid for axis {axis} of {:?}",
                        x.shape()
                    ),
                ));
            }
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                data.extend_from_slice(
                    &x.data()[(o * len + start) * inner..(o * len + end) * inner],
                );
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::from_parts(shape, data)
        }
        Primitive::Clamp { min, max } => {
            arity(prim, inputs, 1)?;
            map(inputs[0], |v| v.clamp(*min, *max))
        }
    };
    Ok((out, Vec::new()))
}

/// Input gradients for one node. Entries for inputs that do not require a
/// gradient may be `None`.
fn backward_op(
    prim: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    argmax: &[usize],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..g.len()).map(f).collect())]
    };
    match prim {
        Primitive::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let mut res = vec![None, None];
            if wanted[0] {
                // dx = g · wᵀ
                let mut dx = vec![0.0; n * cin];
                gemm(
                    n,
                    cout,
                    cin,
                    g,
                    cout as isize,
                    1,
                    w.data(),
                    1,
                    cout as isize,
                    &mut dx,
                    false,
                );
                res[0] = Some(dx);
            }
            if wanted[1] {
                // dw = xᵀ · g
                let mut dw = vec![0.0; cin * cout];
                gemm(
                    cin,
                    n,
                    cout,
                    x.data(),
                    1,
                    cin as isize,
                    g,
                    cout as isize,
                    1,
                    &mut dw,
                    false,
                );
                res[1] = Some(dw);
            }
            if inputs.len() == 3 {
                res.push(wanted[2].then(|| {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    db
                }));
            }
            res
        }
        Primitive::Relu => {
            let x = inputs[0].data();
            elementwise(&|i| if x[i] > 0.0 { g[i] } else { 0.0 })
        }
        Primitive::Concat { axis } => {
            let outer: usize = inputs[0].shape()[..*axis].iter().product();
            let mut res: Vec<Vec<f64>> =
                inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (r, t) in res.iter_mut().zip(inputs) {
                    let chunk = t.len() / outer;
                    r.extend_from_slice(&g[pos..pos + chunk]);
                    pos += chunk;
                }
            }
            res.into_iter().map(Some).collect()
        }
        Primitive::Gather { indices } => {
            let x = inputs[0];
            let w = x.row_len();
            let mut dx = vec![0.0; x.len()];
            for (k, &i) in indices.iter().enumerate() {
                let src = &g[k * w..(k + 1) * w];
                dx[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
            vec![Some(dx)]
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let log = matches!(prim, Primitive::LogSoftmax { .. });
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    if log {
                        let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    } else {
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Primitive::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Primitive::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                wanted[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                wanted[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        Primitive::Scale { factor } => elementwise(&|i| g[i] * factor),
        Primitive::AddScalar { .. } | Primitive::Reshape { .. } => vec![Some(g.to_vec())],
        Primitive::MeanReduce { axis }
        | Primitive::SumReduce { axis }
        | Primitive::OrderFreeMean { axis } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let s = if !matches!(prim, Primitive::SumReduce { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut dx = Vec::with_capacity(x.len());
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    dx.extend(src.iter().map(|v| v * s));
                }
            }
            vec![Some(dx)]
        }
        Primitive::MaxReduce { .. } => {
            let mut dx = vec![0.0; inputs[0].len()];
            for (slot, &pos) in argmax.iter().enumerate() {
                dx[pos] += g[slot];
            }
            vec![Some(dx)]
        }
        Primitive::Tile { .. } => {
            let n = inputs[0].len();
            let mut dx = vec![0.0; n];
            for block in g.chunks_exact(n) {
                dx.iter_mut().zip(block).for_each(|(d, b)| *d += b);
            }
            vec![Some(dx)]
        }
        Primitive::Exp => {
            let y = out.data();
            elementwise(&|i| g[i] * y[i])
        }
        Primitive::Log => {
            let x = inputs[0].data();
            elementwise(&|i| g[i] / x[i])
        }
        Primitive::Square => {
            let x = inputs[0].data();
            elementwise(&|i| 2.0 * x[i] * g[i])
        }
        Primitive::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                dx[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(dx)]
        }
        Primitive::Clamp { min, max } => {
            let x = inputs[0].data();
            elementwise(&|i| {
                if x[i] >= *min && x[i] <= *max {
                    g[i]
                } else {
                    0.0
                }
            })
        }
    }
}
