//! Central finite-difference check of reverse-mode gradients (`f64` only).

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::{Feeds, Mode, Session};
use crate::graph::{Graph, NodeId, Op};
use crate::kernels::maxpool2d;
use crate::params::{ParamId, ParamStore};

pub const MAX_KINKED_FRACTION: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter buffer / input (all if fewer).
    pub samples: usize,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both ~0 do not produce a huge ratio.
    pub floor: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            samples: 20,
            floor: 1e-6,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub target: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Per-coordinate ratio; diagnostic only, pass/fail uses [`TargetError`].
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Coordinates whose `+step` and `-step` evaluations took different ReLU
    /// or max-pool branches. They have no valid central difference and are
    /// not in `samples`.
    pub kinked: Vec<(String, usize)>,
    floor: f64,
}

/// Error of one parameter buffer or input over its sampled coordinates:
/// `|a - n|_2 / max(|a|_2, |n|_2, floor)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetError {
    pub target: String,
    pub samples: usize,
    pub rel_err: f64,
}

impl GradCheckReport {
    pub fn target_errors(&self) -> Vec<TargetError> {
        let mut out: Vec<(TargetError, f64, f64, f64)> = Vec::new();
        for s in &self.samples {
            if out.last().map_or(true, |(t, ..)| t.target != s.target) {
                let t = TargetError {
                    target: s.target.clone(),
                    samples: 0,
                    rel_err: 0.0,
                };
                out.push((t, 0.0, 0.0, 0.0));
            }
            let (t, diff, a, n) = out.last_mut().expect("pushed");
            t.samples += 1;
            *diff += (s.analytic - s.numeric).powi(2);
            *a += s.analytic.powi(2);
            *n += s.numeric.powi(2);
        }
        out.into_iter()
            .map(|(mut t, diff, a, n)| {
                t.rel_err = diff.sqrt() / a.sqrt().max(n.sqrt()).max(self.floor);
                t
            })
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.target_errors().iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<TargetError> {
        self.target_errors()
            .into_iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Within `tol` for every target, with at most [`MAX_KINKED_FRACTION`]
    /// of the drawn coordinates lost to kinks.
    pub fn passed(&self, tol: f64) -> bool {
        let drawn = (self.samples.len() + self.kinked.len()) as f64;
        !self.samples.is_empty()
            && self.max_rel_err() <= tol
            && self.kinked.len() as f64 <= MAX_KINKED_FRACTION * drawn
    }

    /// Number of distinct parameters / inputs that were sampled.
    pub fn targets(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.target.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss plus a hash of every piecewise branch taken (ReLU input signs,
/// max-pool argmax positions).
fn loss_value(
    graph: &Graph,
    store: &mut ParamStore<f64>,
    feeds: &Feeds<f64>,
    loss: NodeId,
    mode: Mode,
) -> Result<(f64, u64)> {
    let mut sess = Session::new(graph, mode).update_running(false);
    sess.forward(store, feeds, &[loss])?;
    let mut hasher = DefaultHasher::new();
    for node in graph.nodes() {
        let Some(x) = node.inputs.first().and_then(|&i| sess.value(i)) else {
            continue;
        };
        match node.op {
            Op::Relu => x.data().iter().for_each(|v| (*v > 0.0).hash(&mut hasher)),
            Op::MaxPool2d { kernel, stride, padding } => {
                maxpool2d(x, kernel, stride, padding)?.1.hash(&mut hasher)
            }
            _ => {}
        }
    }
    Ok((sess.scalar(loss).expect("loss computed"), hasher.finish()))
}

/// Central difference of `f` at step `h`; `None` if the two evaluations
/// took different branches.
fn central_difference(mut f: impl FnMut(f64) -> Result<(f64, u64)>, h: f64) -> Result<Option<f64>> {
    let (lp, sp) = f(h)?;
    let (lm, sm) = f(-h)?;
    Ok((sp == sm).then(|| (lp - lm) / (2.0 * h)))
}

/// Parameter buffers reachable from `loss`, in first-use order.
pub fn reachable_params(graph: &Graph, loss: NodeId) -> Vec<ParamId> {
    let need = graph.ancestors(&[loss]);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        if let Op::Param(p) = node.op {
            if need[i] && seen.insert(p) {
                out.push(p);
            }
        }
    }
    out
}

/// Compare analytic gradients of `loss` against central differences for
/// every reachable parameter and for each listed input node.
pub fn gradcheck(
    graph: &Graph,
    store: &mut ParamStore<f64>,
    feeds: &Feeds<f64>,
    loss: NodeId,
    inputs: &[NodeId],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    store.zero_grad();
    let mut sess = Session::new(graph, cfg.mode).update_running(false);
    sess.forward(store, feeds, &[loss])?;
    sess.backward(store, loss)?;

    let h = cfg.step;
    let mut report = GradCheckReport {
        floor: cfg.floor,
        ..GradCheckReport::default()
    };

    for p in reachable_params(graph, loss) {
        let numel = store.shape(p).numel();
        let analytic = store.grad(p).clone();
        for idx in index::sample(&mut rng, numel, cfg.samples.min(numel)) {
            let orig = store.value(p).data()[idx];
            let numeric = central_difference(
                |d| {
                    store.value_mut(p).data_mut()[idx] = orig + d;
                    let r = loss_value(graph, store, feeds, loss, cfg.mode);
                    store.value_mut(p).data_mut()[idx] = orig;
                    r
                },
                h,
            )?;
            let name = store.param(p).name.clone();
            let Some(numeric) = numeric else {
                report.kinked.push((name, idx));
                continue;
            };
            let a = analytic.data()[idx];
            report.samples.push(GradSample {
                target: name,
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, cfg.floor),
            });
        }
    }

    for &node in inputs {
        let analytic = sess
            .grad(node)
            .cloned()
            .unwrap_or_else(|| crate::Tensor::zeros(feeds.inputs[&node].shape()));
        let numel = analytic.shape().numel();
        let mut fed = feeds.clone();
        for idx in index::sample(&mut rng, numel, cfg.samples.min(numel)) {
            let orig = feeds.inputs[&node].data()[idx];
            let numeric = central_difference(
                |d| {
                    fed.inputs.get_mut(&node).expect("fed").data_mut()[idx] = orig + d;
                    let r = loss_value(graph, store, &fed, loss, cfg.mode);
                    fed.inputs.get_mut(&node).expect("fed").data_mut()[idx] = orig;
                    r
                },
                h,
            )?;
            let name = graph.node(node).name.clone();
            let Some(numeric) = numeric else {
                report.kinked.push((name, idx));
                continue;
            };
            let a = analytic.data()[idx];
            report.samples.push(GradSample {
                target: name,
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, cfg.floor),
            });
        }
    }
    store.zero_grad();
    Ok(report)
}
