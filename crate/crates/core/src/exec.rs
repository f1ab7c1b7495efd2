//! Forward and reverse-mode execution of a [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::kernels::{conv, dense, norm, pool};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN.
    Train,
    /// Running statistics in BN.
    Eval,
}

/// Values for the graph's input nodes, plus integer labels for the loss.
#[derive(Clone, Debug, Default)]
pub struct Feeds<T> {
    pub inputs: HashMap<NodeId, Tensor<T>>,
    pub labels: Option<Vec<usize>>,
}

impl<T> Feeds<T> {
    pub fn new() -> Self {
        Feeds {
            inputs: HashMap::new(),
            labels: None,
        }
    }

    pub fn input(mut self, node: NodeId, value: Tensor<T>) -> Self {
        self.inputs.insert(node, value);
        self
    }

    pub fn labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }
}

enum Cache<T> {
    None,
    Bn(norm::BnCache<T>),
    Argmax(Vec<usize>),
    Probs(Tensor<T>),
}

/// One forward/backward pass over a borrowed graph. Parameters live in the
/// [`ParamStore`] passed to each call; parameter gradients accumulate into
/// it (call [`ParamStore::zero_grad`] between steps).
pub struct Session<'g, T> {
    graph: &'g Graph,
    mode: Mode,
    update_running: bool,
    values: Vec<Option<Tensor<T>>>,
    cache: Vec<Cache<T>>,
    grads: Vec<Option<Tensor<T>>>,
    retain: Vec<bool>,
    labels: Vec<usize>,
}

fn arg<'a, T: Scalar>(
    graph: &Graph,
    values: &'a [Option<Tensor<T>>],
    store: &'a ParamStore<T>,
    id: NodeId,
) -> &'a Tensor<T> {
    match graph.node(id).op {
        Op::Param(p) => store.value(p),
        _ => values[id]
            .as_ref()
            .expect("inputs are computed before their consumers"),
    }
}

impl<'g, T: Scalar> Session<'g, T> {
    pub fn new(graph: &'g Graph, mode: Mode) -> Self {
        let n = graph.len();
        Session {
            graph,
            mode,
            update_running: mode == Mode::Train,
            values: (0..n).map(|_| None).collect(),
            cache: (0..n).map(|_| Cache::None).collect(),
            grads: (0..n).map(|_| None).collect(),
            retain: vec![false; n],
            labels: Vec::new(),
        }
    }

    /// Whether train-mode BN updates its running statistics (default true).
    pub fn update_running(mut self, on: bool) -> Self {
        self.update_running = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Keep the gradient of `node` after [`backward`](Self::backward).
    /// Input nodes are always kept.
    pub fn retain_grad(&mut self, node: NodeId) {
        self.retain[node] = true;
    }

    /// Output of a computed non-parameter node.
    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.values[node].as_ref()
    }

    pub fn grad(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads[node].as_ref()
    }

    /// Scalar output of a computed node.
    pub fn scalar(&self, node: NodeId) -> Option<f64> {
        self.value(node).map(|t| t.data()[0].to_f64())
    }

    /// First node (in execution order) whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        (0..self.graph.len()).find(|&i| matches!(&self.values[i], Some(t) if !t.all_finite()))
    }

    /// Error naming the first non-finite node, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(node) => Err(Error::NonFinite {
                node,
                name: self.graph.node(node).name.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Compute every node that `targets` depend on.
    pub fn forward(
        &mut self,
        store: &mut ParamStore<T>,
        feeds: &Feeds<T>,
        targets: &[NodeId],
    ) -> Result<()> {
        let need = self.graph.ancestors(targets);
        for g in &mut self.grads {
            *g = None;
        }
        if let Some(labels) = &feeds.labels {
            self.labels = labels.clone();
        }
        for i in 0..self.graph.len() {
            if !need[i] {
                self.values[i] = None;
                continue;
            }
            let out = self.eval_node(store, feeds, i)?;
            self.values[i] = out;
        }
        Ok(())
    }

    fn eval_node(
        &mut self,
        store: &mut ParamStore<T>,
        feeds: &Feeds<T>,
        i: NodeId,
    ) -> Result<Option<Tensor<T>>> {
        let graph = self.graph;
        let node = graph.node(i);
        let ins = &node.inputs;
        let v = |j: usize| arg(graph, &self.values, store, ins[j]);
        let out = match node.op {
            Op::Param(_) => return Ok(None),
            Op::Input { c, h, w } => {
                let t = feeds
                    .inputs
                    .get(&i)
                    .ok_or_else(|| Error::MissingFeed(node.name.clone()))?;
                let s = t.shape();
                if (s.c(), s.h(), s.w()) != (c, h, w) {
                    return Err(Error::shape(
                        "input",
                        format!("`{}` expects (N, {c}, {h}, {w}), got {s}", node.name),
                    ));
                }
                t.clone()
            }
            Op::ZerosLike { c } => {
                let s = v(0).shape();
                Tensor::zeros(Shape::new(s.n(), c, s.h(), s.w()))
            }
            Op::Conv2d { stride, padding } => conv::conv2d(v(0), v(1), None, stride, padding)?,
            Op::BatchNorm2d {
                running_mean,
                running_var,
                eps,
                momentum,
            } => match self.mode {
                Mode::Train => {
                    let (y, cache) = norm::batchnorm2d_train(v(0), v(1), v(2), eps)?;
                    if self.update_running {
                        let s = v(0).shape();
                        let count = s.n() * s.h() * s.w();
                        let mut rm = store.state(running_mean).clone();
                        let mut rv = store.state(running_var).clone();
                        norm::update_running(&mut rm, &mut rv, &cache, count, momentum);
                        *store.state_mut(running_mean) = rm;
                        *store.state_mut(running_var) = rv;
                    }
                    self.cache[i] = Cache::Bn(cache);
                    y
                }
                Mode::Eval => norm::batchnorm2d_eval(
                    v(0),
                    v(1),
                    v(2),
                    store.state(running_mean),
                    store.state(running_var),
                    eps,
                )?,
            },
            Op::Relu => dense::relu(v(0)),
            Op::Tanh => dense::tanh(v(0)),
            Op::Add => dense::add(v(0), v(1))?,
            Op::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(Error::shape("mul", format!("{} vs {}", a.shape(), b.shape())));
                }
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                Tensor::from_vec(a.shape(), data)?
            }
            Op::Concat => {
                let parts: Vec<&Tensor<T>> = (0..ins.len()).map(v).collect();
                dense::concat_channels(&parts)?
            }
            Op::AvgPool2d { kernel, stride } => pool::avgpool2d(v(0), kernel, stride)?,
            Op::MaxPool2d {
                kernel,
                stride,
                padding,
            } => {
                let (y, arg) = pool::maxpool2d(v(0), kernel, stride, padding)?;
                self.cache[i] = Cache::Argmax(arg);
                y
            }
            Op::GlobalAvgPool => pool::global_avgpool(v(0)),
            Op::Linear => {
                let bias = (ins.len() == 3).then(|| v(2));
                dense::linear(v(0), v(1), bias)?
            }
            Op::SoftmaxXent => {
                if feeds.labels.is_none() {
                    return Err(Error::MissingFeed("labels".into()));
                }
                let (loss, probs) = dense::softmax_xent(v(0), &self.labels)?;
                self.cache[i] = Cache::Probs(probs);
                loss
            }
            Op::Sum => {
                let s = v(0).sum();
                Tensor::from_vec(Shape::scalar(), vec![s])?
            }
        };
        Ok(Some(out))
    }

    /// Reverse pass from the scalar node `loss`, accumulating parameter
    /// gradients into `store`.
    pub fn backward(&mut self, store: &mut ParamStore<T>, loss: NodeId) -> Result<()> {
        let graph = self.graph;
        let value = self.values[loss]
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { node: loss })?;
        if value.shape() != Shape::scalar() {
            return Err(Error::NonScalarLoss {
                node: loss,
                shape: value.shape(),
            });
        }
        let mut needs = vec![false; graph.len()];
        for (i, node) in graph.nodes().iter().enumerate().take(loss + 1) {
            needs[i] = match node.op {
                Op::Param(_) | Op::Input { .. } => true,
                Op::ZerosLike { .. } => false,
                _ => node.inputs.iter().any(|&j| needs[j]),
            };
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss] = Some(Tensor::full(Shape::scalar(), T::one()));

        for i in (0..=loss).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let node = graph.node(i);
            match node.op {
                Op::Param(p) => {
                    store.grad_mut(p).add_assign(&g);
                    if self.retain[i] {
                        self.grads[i] = Some(g);
                    }
                    continue;
                }
                Op::Input { .. } => {
                    self.grads[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            let contribs = self.node_backward(store, i, &g, &needs)?;
            for (j, t) in contribs {
                match &mut self.grads[j] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            if self.retain[i] {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn node_backward(
        &self,
        store: &ParamStore<T>,
        i: NodeId,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let graph = self.graph;
        let node = graph.node(i);
        let ins = &node.inputs;
        let v = |j: usize| arg(graph, &self.values, store, ins[j]);
        let need = |j: usize| needs[ins[j]];
        let mut out = Vec::with_capacity(ins.len());
        match node.op {
            Op::Input { .. } | Op::Param(_) | Op::ZerosLike { .. } => {}
            Op::Conv2d { stride, padding } => {
                let gr = conv::conv2d_backward(v(0), v(1), g, stride, padding, need(0), false)?;
                if let Some(dx) = gr.input {
                    out.push((ins[0], dx));
                }
                if need(1) {
                    out.push((ins[1], gr.weight));
                }
            }
            Op::BatchNorm2d {
                running_mean,
                running_var,
                eps,
                ..
            } => {
                let gr = match (&self.cache[i], self.mode) {
                    (Cache::Bn(cache), Mode::Train) => {
                        norm::batchnorm2d_train_backward(g, v(1), cache)
                    }
                    _ => norm::batchnorm2d_eval_backward(
                        v(0),
                        g,
                        v(1),
                        store.state(running_mean),
                        store.state(running_var),
                        eps,
                    ),
                };
                out.push((ins[0], gr.input));
                out.push((ins[1], gr.gamma));
                out.push((ins[2], gr.beta));
            }
            Op::Relu => out.push((ins[0], dense::relu_backward(v(0), g))),
            Op::Tanh => {
                let y = self.values[i].as_ref().expect("forward output");
                out.push((ins[0], dense::tanh_backward(y, g)));
            }
            Op::Add => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.clone()));
            }
            Op::Mul => {
                let (a, b) = (v(0), v(1));
                let prod = |x: &Tensor<T>| {
                    let data = x.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                    Tensor::from_vec(x.shape(), data).expect("same shape")
                };
                out.push((ins[0], prod(b)));
                out.push((ins[1], prod(a)));
            }
            Op::Concat => {
                let shapes: Vec<Shape> = (0..ins.len()).map(|j| v(j).shape()).collect();
                for (j, t) in dense::concat_backward(&shapes, g).into_iter().enumerate() {
                    out.push((ins[j], t));
                }
            }
            Op::AvgPool2d { kernel, stride } => out.push((
                ins[0],
                pool::avgpool2d_backward(v(0).shape(), g, kernel, stride),
            )),
            Op::MaxPool2d { .. } => {
                let Cache::Argmax(arg) = &self.cache[i] else {
                    unreachable!("maxpool forward stores its argmax")
                };
                out.push((ins[0], pool::maxpool2d_backward(v(0).shape(), g, arg)));
            }
            Op::GlobalAvgPool => {
                out.push((ins[0], pool::global_avgpool_backward(v(0).shape(), g)))
            }
            Op::Linear => {
                let gr = dense::linear_backward(v(0), v(1), g);
                out.push((ins[0], gr.input));
                out.push((ins[1], gr.weight));
                if ins.len() == 3 {
                    out.push((ins[2], gr.bias));
                }
            }
            Op::SoftmaxXent => {
                let Cache::Probs(probs) = &self.cache[i] else {
                    unreachable!("softmax forward stores its probabilities")
                };
                out.push((
                    ins[0],
                    dense::softmax_xent_backward(probs, &self.labels, g.data()[0]),
                ));
            }
            Op::Sum => out.push((ins[0], Tensor::full(v(0).shape(), g.data()[0]))),
        }
        out.retain(|(j, _)| needs[*j]);
        Ok(out)
    }
}
