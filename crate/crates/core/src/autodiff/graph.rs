use std::collections::BTreeMap;

use super::kernels;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    /// Named data leaf, bound at evaluation time.
    Input(String),
    /// Named trainable leaf, bound at evaluation time.
    Param(String),
    Const(Tensor<T>),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Input `[len, c_in]`, weight `[c_out, c_in, kernel]`, output `[len_out, c_out]`.
    Conv1d {
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    },
    /// Elementwise; the second operand may broadcast as a trailing suffix of the first.
    Add,
    Sub,
    Mul,
    Scale(T),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    /// `[rows, cols] -> [cols]`
    MeanRows,
    /// Row-wise squared Euclidean distance: `[n, d] x [n, d] -> [n]`, `[d] x [d] -> []`.
    SqDist,
    /// Along the last axis.
    Softmax,
    LogSoftmax,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose,
    Reshape(Vec<usize>),
    /// Output element `i` is input element `indices[i]` (flat, row-major).
    Gather {
        indices: Vec<usize>,
        shape: Vec<usize>,
    },
    StopGradient,
    /// `(z_e [n, d], codebook [k, d]) -> [n, d]`: the nearest codebook row per input
    /// row. Gradient flows to the codebook only.
    NearestCode,
    /// `(z_e, z_q) -> z_q` in value; the upstream gradient is handed to `z_e` unchanged.
    StraightThrough,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::SqDist => "sq_dist",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::StopGradient => "stop_gradient",
            Op::NearestCode => "nearest_code",
            Op::StraightThrough => "straight_through",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match (&node.label, &node.op) {
            (Some(l), op) => format!("#{} {} ({l})", id.0, op.name()),
            (None, Op::Input(n) | Op::Param(n)) => format!("#{} {} ({n})", id.0, node.op.name()),
            (None, op) => format!("#{} {}", id.0, op.name()),
        }
    }

    /// Names of every parameter leaf, in node order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn shape_err(&self, op: &Op<T>, msg: String) -> Error {
        Error::Shape {
            node: format!("#{} {}", self.nodes.len(), op.name()),
            msg,
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>) -> Result<NodeId> {
        for id in &inputs {
            if id.0 >= self.nodes.len() {
                return Err(self.shape_err(&op, format!("dangling input {}", id.0)));
            }
        }
        let shape = self.infer_shape(&op, &inputs)?;
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            label: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn infer_shape(&self, op: &Op<T>, inputs: &[NodeId]) -> Result<Vec<usize>> {
        let s = |i: usize| self.nodes[inputs[i].0].shape.as_slice();
        let err = |msg: String| Err(self.shape_err(op, msg));
        Ok(match op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves carry shape"),
            Op::MatMul => {
                let (a, b) = (s(0), s(1));
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return err(format!("matmul {a:?} x {b:?}"));
                }
                vec![a[0], b[1]]
            }
            Op::Conv1d {
                stride,
                pad_left,
                pad_right,
            } => {
                let (x, w) = (s(0), s(1));
                if x.len() != 2 || w.len() != 3 || x[1] != w[1] || *stride == 0 {
                    return err(format!("conv1d input {x:?} weight {w:?} stride {stride}"));
                }
                let padded = x[0] + pad_left + pad_right;
                if padded < w[2] {
                    return err(format!("conv1d padded length {padded} < kernel {}", w[2]));
                }
                vec![(padded - w[2]) / stride + 1, w[0]]
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (s(0), s(1));
                if !is_suffix(b, a) {
                    return err(format!("cannot broadcast {b:?} onto {a:?}"));
                }
                a.to_vec()
            }
            Op::Scale(_)
            | Op::Relu
            | Op::Sigmoid
            | Op::Tanh
            | Op::Exp
            | Op::Log
            | Op::StopGradient => s(0).to_vec(),
            Op::Softmax | Op::LogSoftmax => {
                if s(0).is_empty() {
                    return err("softmax of a scalar".into());
                }
                s(0).to_vec()
            }
            Op::Sum | Op::Mean => Vec::new(),
            Op::MeanRows => {
                let a = s(0);
                if a.len() != 2 || a[0] == 0 {
                    return err(format!("mean_rows needs non-empty rank 2, got {a:?}"));
                }
                vec![a[1]]
            }
            Op::SqDist => {
                let (a, b) = (s(0), s(1));
                if a != b || a.is_empty() || a.len() > 2 {
                    return err(format!("sq_dist {a:?} vs {b:?}"));
                }
                if a.len() == 2 {
                    vec![a[0]]
                } else {
                    Vec::new()
                }
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return err("concat of nothing".into());
                }
                let first = s(0);
                if *axis >= first.len() {
                    return err(format!("concat axis {axis} on rank {}", first.len()));
                }
                let mut out = first.to_vec();
                for i in 1..inputs.len() {
                    let si = s(i);
                    let same_rest = si.len() == first.len()
                        && si
                            .iter()
                            .zip(first)
                            .enumerate()
                            .all(|(d, (a, b))| d == *axis || a == b);
                    if !same_rest {
                        return err(format!("concat {first:?} with {si:?} on axis {axis}"));
                    }
                    out[*axis] += si[*axis];
                }
                out
            }
            Op::Slice { axis, start, end } => {
                let a = s(0);
                if *axis >= a.len() || start > end || *end > a[*axis] {
                    return err(format!("slice {start}..{end} on axis {axis} of {a:?}"));
                }
                let mut out = a.to_vec();
                out[*axis] = end - start;
                out
            }
            Op::Transpose => {
                let a = s(0);
                if a.len() != 2 {
                    return err(format!("transpose needs rank 2, got {a:?}"));
                }
                vec![a[1], a[0]]
            }
            Op::Reshape(shape) => {
                let n: usize = s(0).iter().product();
                if shape.iter().product::<usize>() != n {
                    return err(format!("reshape {:?} into {shape:?}", s(0)));
                }
                shape.clone()
            }
            Op::Gather { indices, shape } => {
                let n: usize = s(0).iter().product();
                if shape.iter().product::<usize>() != indices.len() {
                    return err(format!("gather of {} indices into {shape:?}", indices.len()));
                }
                if let Some(bad) = indices.iter().find(|&&i| i >= n) {
                    return err(format!("gather index {bad} out of {n}"));
                }
                shape.clone()
            }
            Op::NearestCode => {
                let (z, cb) = (s(0), s(1));
                if z.len() != 2 || cb.len() != 2 || z[1] != cb[1] || cb[0] == 0 {
                    return err(format!("nearest_code {z:?} against codebook {cb:?}"));
                }
                z.to_vec()
            }
            Op::StraightThrough => {
                if s(0) != s(1) {
                    return err(format!("straight_through {:?} vs {:?}", s(0), s(1)));
                }
                s(0).to_vec()
            }
        })
    }

    fn leaf(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            shape,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.leaf(Op::Input(name.into()), shape.to_vec())
    }

    /// Parameter leaf. Requesting the same name twice returns the same node, so a
    /// weight shared by several branches accumulates one gradient.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.params.get(&name) {
            assert_eq!(
                self.nodes[id.0].shape, shape,
                "parameter {name} requested with two shapes"
            );
            return id;
        }
        let id = self.leaf(Op::Param(name.clone()), shape.to_vec());
        self.params.insert(name, id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.leaf(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<NodeId> {
        self.push(
            Op::Conv1d {
                stride,
                pad_left,
                pad_right,
            },
            vec![x, w],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![a])
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MeanRows, vec![a])
    }

    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::SqDist, vec![a, b])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::Slice { axis, start, end }, vec![a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        self.push(
            Op::Gather {
                indices,
                shape: shape.to_vec(),
            },
            vec![a],
        )
    }

    /// Selects whole rows of a rank-2 node.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(self.shape_err(
                &Op::Gather {
                    indices: vec![],
                    shape: vec![],
                },
                format!("gather_rows needs rank 2, got {shape:?}"),
            ));
        }
        let cols = shape[1];
        let indices = rows
            .iter()
            .flat_map(|&r| (r * cols)..(r * cols + cols))
            .collect();
        self.gather(a, indices, &[rows.len(), cols])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGradient, vec![a])
    }

    pub fn nearest_code(&mut self, z_e: NodeId, codebook: NodeId) -> Result<NodeId> {
        self.push(Op::NearestCode, vec![z_e, codebook])
    }

    pub fn straight_through(&mut self, z_e: NodeId, z_q: NodeId) -> Result<NodeId> {
        self.push(Op::StraightThrough, vec![z_e, z_q])
    }

    /// Computes every node value. `params` binds [`Op::Param`] leaves and `inputs`
    /// binds [`Op::Input`] leaves.
    pub fn evaluate(&self, params: &TensorMap<T>, inputs: &TensorMap<T>) -> Result<Evaluation<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let value = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let map = if matches!(node.op, Op::Input(_)) {
                        inputs
                    } else {
                        params
                    };
                    let t = map.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: self.describe(id),
                            msg: format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                op => {
                    let args: Vec<&Tensor<T>> = node.inputs.iter().map(|j| &values[j.0]).collect();
                    kernels::forward(op, &args, &node.shape)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: self.describe(id),
                });
            }
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            req[i] = match node.op {
                Op::Input(_) | Op::Param(_) => true,
                Op::Const(_) | Op::StopGradient => false,
                Op::NearestCode => req[node.inputs[1].0],
                Op::StraightThrough => req[node.inputs[0].0],
                _ => node.inputs.iter().any(|j| req[j.0]),
            };
        }
        req
    }

    /// Reverse-mode gradient of the scalar node `output`. Accumulation runs in
    /// strictly decreasing node order.
    pub fn backward(&self, eval: &Evaluation<T>, output: NodeId) -> Result<Gradients<T>> {
        let out_shape = &self.nodes[output.0].shape;
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar {
                node: self.describe(output),
                shape: out_shape.clone(),
            });
        }
        let req = self.requires_grad();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out_shape, T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.inputs.is_empty() && req[i] {
                let args: Vec<&Tensor<T>> = node.inputs.iter().map(|j| &eval.values[j.0]).collect();
                let wants: Vec<bool> = node.inputs.iter().map(|j| req[j.0]).collect();
                let input_grads = kernels::backward(&node.op, &args, &eval.values[i], &g, &wants);
                for ((j, want), ig) in node.inputs.iter().zip(&wants).zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !*want {
                        continue;
                    }
                    match &mut grads[j.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a = *a + *b;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("{} (gradient)", self.describe(NodeId(i))),
                });
            }
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        let mut detached = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                match &grads[i] {
                    Some(g) => {
                        params.insert(name.clone(), g.clone());
                    }
                    None => {
                        params.insert(name.clone(), Tensor::zeros(&node.shape));
                        detached.push(name.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
            detached,
        })
    }
}

/// Node values from one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.values[id.0].item()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: TensorMap<T>,
    detached: Vec<String>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` when no gradient reached it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &TensorMap<T> {
        &self.params
    }

    pub fn into_params(self) -> TensorMap<T> {
        self.params
    }

    /// Parameters unreachable from the output. Their gradients are reported as zeros.
    pub fn detached(&self) -> &[String] {
        &self.detached
    }
}
