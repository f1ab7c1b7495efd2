//! Static computation graph and the [`Net`] builder that grows it.
//!
//! Nodes are appended in topological order: every node's inputs already
//! exist when it is pushed, so index order is an execution order.
//! Activation shapes are recorded for a batch of one; execution re-infers
//! them for the real batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{conv, dense, norm, pool};
use crate::params::{ParamId, ParamKind, ParamStore, StateId};
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

/// Which structural part of a model a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Stem,
    Main,
    Shortcut,
    Transition,
    Aggregation,
    Head,
    Loss,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Fed per run; the declared shape is per sample.
    Input { c: usize, h: usize, w: usize },
    /// `(N, c, H, W)` zeros, with `N, H, W` taken from the single input.
    ZerosLike { c: usize },
    Param(ParamId),
    /// `[x, weight]`, bias-free.
    Conv2d { stride: usize, padding: usize },
    /// `[x, gamma, beta]`.
    BatchNorm2d {
        running_mean: StateId,
        running_var: StateId,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Tanh,
    Add,
    Mul,
    Concat,
    AvgPool2d { kernel: usize, stride: usize },
    MaxPool2d { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    /// `[x, weight]` or `[x, weight, bias]`.
    Linear,
    /// `[logits]`; labels come from the feeds.
    SoftmaxXent,
    Sum,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::ZerosLike { .. } => "zeros_like",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm2d { .. } => "batchnorm2d",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat => "concat_channels",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool => "global_avgpool",
            Op::Linear => "linear",
            Op::SoftmaxXent => "softmax_xent",
            Op::Sum => "sum",
        }
    }

    fn arity(&self) -> Option<std::ops::RangeInclusive<usize>> {
        Some(match self {
            Op::Input { .. } | Op::Param(_) => 0..=0,
            Op::ZerosLike { .. }
            | Op::Relu
            | Op::Tanh
            | Op::AvgPool2d { .. }
            | Op::MaxPool2d { .. }
            | Op::GlobalAvgPool
            | Op::SoftmaxXent
            | Op::Sum => 1..=1,
            Op::Conv2d { .. } | Op::Add | Op::Mul => 2..=2,
            Op::BatchNorm2d { .. } => 3..=3,
            Op::Linear => 2..=3,
            Op::Concat => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: String,
    pub role: Role,
}

/// Output shape of `op` applied to inputs of shape `ins`. `param` resolves
/// the shape of a parameter buffer.
pub fn infer_shape(op: &Op, ins: &[Shape], param: &dyn Fn(ParamId) -> Shape) -> Result<Shape> {
    if let Some(arity) = op.arity() {
        if !arity.contains(&ins.len()) {
            return Err(Error::invalid(
                op.kind(),
                format!("expected {arity:?} inputs, got {}", ins.len()),
            ));
        }
    }
    let same = |op: &'static str| -> Result<Shape> {
        if ins[0] != ins[1] {
            return Err(Error::shape(op, format!("{} vs {}", ins[0], ins[1])));
        }
        Ok(ins[0])
    };
    match *op {
        Op::Input { c, h, w } => Ok(Shape::new(1, c, h, w)),
        Op::ZerosLike { c } => Ok(Shape::new(ins[0].n(), c, ins[0].h(), ins[0].w())),
        Op::Param(id) => Ok(param(id)),
        Op::Conv2d { stride, padding } => conv::conv2d_shape(ins[0], ins[1], stride, padding),
        Op::BatchNorm2d { .. } => {
            let c = ins[0].c();
            if ins[1].numel() != c || ins[2].numel() != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("input has C={c} but gamma {} / beta {}", ins[1], ins[2]),
                ));
            }
            Ok(ins[0])
        }
        Op::Relu | Op::Tanh => Ok(ins[0]),
        Op::Add => same("add"),
        Op::Mul => same("mul"),
        Op::Concat => dense::concat_shape(ins),
        Op::AvgPool2d { kernel, stride } => pool::pool_shape("avgpool2d", ins[0], kernel, stride, 0),
        Op::MaxPool2d {
            kernel,
            stride,
            padding,
        } => pool::pool_shape("maxpool2d", ins[0], kernel, stride, padding),
        Op::GlobalAvgPool => Ok(Shape::new(ins[0].n(), ins[0].c(), 1, 1)),
        Op::Linear => dense::linear_shape(ins[0], ins[1], ins.get(2).copied()),
        Op::SoftmaxXent | Op::Sum => Ok(Shape::scalar()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input { .. }))
            .map(|(i, _)| i)
    }

    /// Shapes of every node for the given input shapes (inputs not listed
    /// keep their declared shape with batch 1).
    pub fn infer_shapes<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &[(NodeId, Shape)],
    ) -> Result<Vec<Shape>> {
        let param = |id: ParamId| store.shape(id);
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let s = match inputs.iter().find(|(id, _)| *id == i) {
                Some(&(_, s)) => s,
                None => {
                    let ins: Vec<Shape> = node.inputs.iter().map(|&j| shapes[j]).collect();
                    infer_shape(&node.op, &ins, &param)?
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Nodes that `targets` depend on, including the targets.
    pub fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for &t in targets {
            need[t] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if need[i] {
                for &j in &self.nodes[i].inputs {
                    need[j] = true;
                }
            }
        }
        need
    }

    pub(crate) fn rebind_param(&mut self, node: NodeId, id: ParamId) {
        self.nodes[node].op = Op::Param(id);
    }

    /// Nodes consuming `id`.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Parameter initialisers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2 / (k_h * k_w * C_out))`.
    HeNormal,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
}

impl Init {
    pub fn tensor<T: Scalar>(&self, shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match *self {
            Init::HeNormal => {
                let fan_out = shape.n() * shape.h() * shape.w();
                Tensor::randn(shape, (2.0 / fan_out as f64).sqrt(), rng)
            }
            Init::Constant(v) => Tensor::full(shape, T::from_f64(v)),
            Init::Uniform(b) => Tensor::uniform(shape, b, rng),
            Init::Normal(s) => Tensor::randn(shape, s, rng),
        }
    }
}

/// A node handle with its batch-1 shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub id: NodeId,
    pub shape: Shape,
}

impl Var {
    pub fn channels(&self) -> usize {
        self.shape.c()
    }
}

/// Graph builder owning the graph, its parameters and the init RNG.
pub struct Net<T> {
    graph: Graph,
    store: ParamStore<T>,
    shapes: Vec<Shape>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
    role: Role,
}

impl<T: Scalar> Net<T> {
    pub fn new(seed: u64) -> Self {
        Net {
            graph: Graph::default(),
            store: ParamStore::new(),
            shapes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
            role: Role::Main,
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn finish(self) -> (Graph, ParamStore<T>) {
        (self.graph, self.store)
    }

    /// Fully qualified name of `leaf` under the current scope.
    pub fn qualify(&self, leaf: &str) -> String {
        if self.scope.is_empty() {
            leaf.to_string()
        } else if leaf.is_empty() {
            self.scope.join(".")
        } else {
            format!("{}.{leaf}", self.scope.join("."))
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let r = f(self);
        self.scope.pop();
        r
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) -> Role {
        std::mem::replace(&mut self.role, role)
    }

    pub fn with_role<R>(&mut self, role: Role, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.set_role(role);
        let r = f(self);
        self.role = prev;
        r
    }

    pub fn push(&mut self, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        let ins: Vec<Shape> = inputs.iter().map(|v| self.shapes[v.id]).collect();
        let store = &self.store;
        let shape = infer_shape(&op, &ins, &|id| store.shape(id))?;
        let id = self.graph.nodes.len();
        self.graph.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            name: self.qualify(name),
            role: self.role,
        });
        self.shapes.push(shape);
        Ok(Var { id, shape })
    }

    pub fn input(&mut self, name: &str, c: usize, h: usize, w: usize) -> Result<Var> {
        self.push(Op::Input { c, h, w }, &[], name)
    }

    /// New parameter buffer under the scoped `name`, plus its node.
    pub fn param(&mut self, name: &str, kind: ParamKind, shape: Shape, init: Init) -> Result<Var> {
        let value = init.tensor(shape, &mut self.rng);
        let full = self.qualify(name);
        let id = self.store.add(&full, kind, value)?;
        self.push(Op::Param(id), &[], name)
    }

    /// A use site `name` of the existing buffer `id`.
    pub fn shared_param(&mut self, name: &str, id: ParamId) -> Result<Var> {
        let full = self.qualify(name);
        self.store.share(&full, id)?;
        self.push(Op::Param(id), &[], name)
    }

    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.graph.nodes[v.id].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn conv(&mut self, name: &str, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.push(Op::Conv2d { stride, padding }, &[x, w], name)
    }

    /// Bias-free He-initialised convolution with weight site `<name>.weight`.
    pub fn conv2d(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let shape = Shape::new(cout, x.channels(), kernel, kernel);
        let w = self.param(&format!("{name}.weight"), ParamKind::Weight, shape, Init::HeNormal)?;
        self.conv(name, x, w, stride, padding)
    }

    /// BN with `gamma = 1`, `beta = 0` and running stats `(0, 1)`.
    pub fn batchnorm(&mut self, name: &str, x: Var) -> Result<Var> {
        let c = Shape::channels(x.channels());
        let gamma = self.param(&format!("{name}.gamma"), ParamKind::Affine, c, Init::Constant(1.0))?;
        let beta = self.param(&format!("{name}.beta"), ParamKind::Affine, c, Init::Constant(0.0))?;
        let running_mean = self
            .store
            .add_state(&self.qualify(&format!("{name}.running_mean")), Tensor::zeros(c));
        let running_var = self
            .store
            .add_state(&self.qualify(&format!("{name}.running_var")), Tensor::full(c, T::one()));
        self.push(
            Op::BatchNorm2d {
                running_mean,
                running_var,
                eps: norm::BN_EPS,
                momentum: norm::BN_MOMENTUM,
            },
            &[x, gamma, beta],
            name,
        )
    }

    pub fn relu(&mut self, name: &str, x: Var) -> Result<Var> {
        self.push(Op::Relu, &[x], name)
    }

    pub fn tanh(&mut self, name: &str, x: Var) -> Result<Var> {
        self.push(Op::Tanh, &[x], name)
    }

    /// BN followed by ReLU, named `<name>` and `<name>.relu`.
    pub fn bn_relu(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.batchnorm(name, x)?;
        self.relu(&format!("{name}.relu"), y)
    }

    pub fn add(&mut self, name: &str, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b], name)
    }

    pub fn mul(&mut self, name: &str, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b], name)
    }

    pub fn concat(&mut self, name: &str, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Concat, xs, name)
    }

    pub fn zeros_like(&mut self, name: &str, x: Var, c: usize) -> Result<Var> {
        self.push(Op::ZerosLike { c }, &[x], name)
    }

    pub fn avgpool(&mut self, name: &str, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.push(Op::AvgPool2d { kernel, stride }, &[x], name)
    }

    pub fn maxpool(
        &mut self,
        name: &str,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.push(
            Op::MaxPool2d {
                kernel,
                stride,
                padding,
            },
            &[x],
            name,
        )
    }

    pub fn global_avgpool(&mut self, name: &str, x: Var) -> Result<Var> {
        self.push(Op::GlobalAvgPool, &[x], name)
    }

    /// Classifier: weight `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn linear(&mut self, name: &str, x: Var, out: usize) -> Result<Var> {
        let features = x.shape.c() * x.shape.h() * x.shape.w();
        let bound = 1.0 / (features as f64).sqrt();
        let w = self.param(
            &format!("{name}.weight"),
            ParamKind::Weight,
            Shape::new(out, features, 1, 1),
            Init::Uniform(bound),
        )?;
        let b = self.param(
            &format!("{name}.bias"),
            ParamKind::Affine,
            Shape::channels(out),
            Init::Constant(0.0),
        )?;
        self.push(Op::Linear, &[x, w, b], name)
    }

    pub fn softmax_xent(&mut self, name: &str, logits: Var) -> Result<Var> {
        self.push(Op::SoftmaxXent, &[logits], name)
    }

    pub fn sum(&mut self, name: &str, x: Var) -> Result<Var> {
        self.push(Op::Sum, &[x], name)
    }
}
