//! Property suites run by `rla verify` and the test harness.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{conv1_partition_check, rla_block_forward, BlockOut, RlaConfig, RlaStage};
use crate::error::{Error, Result};
use crate::exec::{Feeds, Mode, Session};
use crate::gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Net, NodeId, Role, Var};
use crate::model_zoo::{build, rla_bottleneck_blocks, Aggregation, Family, Model, ModelSpec, SharedKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::timeseries::{
    arma_ar_reconstruct, arma_impulse_closed_form, arma_impulse_response, recurrence_expand,
    recurrence_expand_by_simulation, ArmaParams, RecurrenceParams,
};

pub const PARTITION_TOL: f64 = 1e-10;
pub const LINEAR_IDENTITY_TOL: f64 = 1e-5;
pub const ARMA_TOL: f64 = 1e-12;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const CLONE_SUM_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Partition,
    Aggregation,
    Gradcheck,
    Arma,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Partition, Suite::Aggregation, Suite::Gradcheck, Suite::Arma];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Partition => "partition",
            Suite::Aggregation => "aggregation",
            Suite::Gradcheck => "gradcheck",
            Suite::Arma => "arma",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or 0/1 for structural checks).
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn within(name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    fn holds(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: ok,
            value: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Split one share-group of the aggregation models before checking.
    pub inject: bool,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Partition => vec![partition_suite(50, opts.seed)?],
        Suite::Aggregation => aggregation_suite(opts)?,
        Suite::Gradcheck => gradcheck_suite(opts.seed)?,
        Suite::Arma => arma_suite(),
    };
    Ok(SuiteReport { suite, checks })
}

/// Direct-loop cross-correlation, `(N, Cin, H, W) * (Cout, Cin, Kh, Kw)`.
pub fn reference_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, kh, kw] = w.shape().0;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    Tensor::from_fn(Shape::new(n, cout, ho, wo), |[b, o, y, z]| {
        let mut s = 0.0;
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let yy = (y * stride + i) as isize - pad as isize;
                    let zz = (z * stride + j) as isize - pad as isize;
                    if yy < 0 || zz < 0 || yy >= h as isize || zz >= wd as isize {
                        continue;
                    }
                    s += x.at([b, c, yy as usize, zz as usize]) * w.at([o, c, i, j]);
                }
            }
        }
        s
    })
}

/// Worst deviation over `draws` random kernels and input splits.
pub fn partition_suite(draws: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let parts = rng.gen_range(1..=5);
        let chans: Vec<usize> = (0..parts).map(|_| rng.gen_range(1..=12)).collect();
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let cout = rng.gen_range(1..=16);
        let side = rng.gen_range(k..=7);
        let w = Tensor::<f64>::randn(Shape::new(cout, chans.iter().sum(), k, k), 1.0, &mut rng);
        let xs: Vec<Tensor<f64>> = chans
            .iter()
            .map(|&c| Tensor::randn(Shape::new(2, c, side, side), 1.0, &mut rng))
            .collect();
        let refs: Vec<&Tensor<f64>> = xs.iter().collect();
        worst = worst.max(conv1_partition_check(&w, &refs)?);
    }
    Ok(Check::within(
        "partition identity",
        worst,
        PARTITION_TOL,
        format!("{draws} random kernel/input draws"),
    ))
}

/// One linear-mode RLA stage of `blocks` blocks, fed random `x`.
pub struct LinearStage {
    pub graph: Graph,
    pub store: ParamStore<f64>,
    pub x: NodeId,
    /// Residual output `y^t` of each block.
    pub ys: Vec<NodeId>,
    /// Hidden state `h^t` after each block.
    pub hs: Vec<NodeId>,
    pub g1: ParamId,
    pub g2: ParamId,
}

/// Build a single stage with `h^0 = 0`, shared `g1`/`g2`, no BN or tanh in
/// the recurrence and a conv-ReLU-conv residual branch.
pub fn linear_stage(blocks: usize, channels: usize, k: usize, side: usize, seed: u64) -> Result<LinearStage> {
    let cfg = RlaConfig {
        linear_mode: true,
        ..RlaConfig::with_k(k)
    };
    let mut net = Net::<f64>::new(seed);
    let x0 = net.input("x", channels, side, side)?;
    let mut h = net.with_role(Role::Aggregation, |n| n.zeros_like("h0", x0, k))?;
    let mut x = x0;
    let mut stage = RlaStage::new(1, k);
    let mut ys = Vec::new();
    let mut hs = Vec::new();
    for b in 0..blocks {
        let mut y_out: Option<Var> = None;
        (x, h) = net.scoped(&format!("block{}", b + 1), |n| {
            rla_block_forward(n, x, h, &mut stage, &cfg, |n, input, x| {
                let a = n.conv2d("conv1", input, channels, 3, 1, 1)?;
                let r = n.relu("relu", a)?;
                let y = n.conv2d("conv2", r, channels, 3, 1, 1)?;
                y_out = Some(y);
                Ok(BlockOut { residual: y, shortcut: x })
            })
        })?;
        ys.push(y_out.expect("block ran").id);
        hs.push(h.id);
    }
    let g1 = stage.shared_g1().expect("shared g1");
    let g2 = stage.shared_g2().expect("shared g2");
    let (graph, store) = net.finish();
    Ok(LinearStage {
        graph,
        store,
        x: x0.id,
        ys,
        hs,
        g1,
        g2,
    })
}

/// Max over blocks of `|h^t - sum_j g2^{t-j+1} g1(y^j)| / |.|`, with the
/// sum built from direct-loop convolutions.
pub fn linear_identity_error(blocks: usize, seed: u64) -> Result<f64> {
    let st = linear_stage(blocks, 4, 3, 6, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let feeds = Feeds::new().input(st.x, Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng));
    let mut store = st.store.clone();
    let mut sess = Session::new(&st.graph, Mode::Eval);
    let targets: Vec<NodeId> = st.ys.iter().chain(&st.hs).copied().collect();
    sess.forward(&mut store, &feeds, &targets)?;
    let g1 = store.value(st.g1);
    let g2 = store.value(st.g2);
    let mut worst: f64 = 0.0;
    for t in 1..=blocks {
        let mut want: Option<Tensor<f64>> = None;
        for j in 1..=t {
            let y = sess.value(st.ys[j - 1]).expect("y computed");
            let mut term = reference_conv2d(y, g1, 1, 0);
            for _ in 0..=(t - j) {
                term = reference_conv2d(&term, g2, 1, 1);
            }
            match want.as_mut() {
                Some(w) => w.add_assign(&term),
                None => want = Some(term),
            }
        }
        let want = want.expect("t >= 1");
        let got = sess.value(st.hs[t - 1]).expect("h computed");
        let rel = got.max_abs_diff(&want) / want.max_abs().max(1e-300);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Sites of `param` that some graph node reads.
pub fn use_sites<T: crate::tensor::Scalar>(model: &Model<T>, param: ParamId) -> Vec<String> {
    model
        .store
        .group(param)
        .into_iter()
        .filter(|s| model.graph.find(s).is_some())
        .map(str::to_string)
        .collect()
}

fn expected_group_size(spec: &ModelSpec, stage: usize, kind: SharedKind, index: usize) -> usize {
    let blocks = spec.blocks_per_stage()[stage - 1];
    match kind {
        SharedKind::RlaG1 | SharedKind::RlaG2 => blocks,
        SharedKind::Lag | SharedKind::Ordinal => blocks - index,
    }
}

/// Every shared conv has exactly the use sites its indexing implies.
pub fn share_structure<T: crate::tensor::Scalar>(model: &Model<T>) -> Check {
    let mut bad = Vec::new();
    for s in &model.shared {
        let want = expected_group_size(&model.spec, s.stage, s.kind, s.index);
        let got = use_sites(model, s.param).len();
        if got != want {
            bad.push(format!("stage {} {:?}[{}]: {got} sites, expected {want}", s.stage, s.kind, s.index));
        }
    }
    Check::holds(
        format!("share groups of {}", model.spec.label()),
        bad.is_empty() && !model.shared.is_empty(),
        if bad.is_empty() {
            format!("{} shared convs", model.shared.len())
        } else {
            bad.join("; ")
        },
    )
}

fn loss_and_grads(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let feeds = Feeds::new().input(model.input, x.clone()).labels(labels.to_vec());
    model.store.zero_grad();
    let mut sess = Session::new(&model.graph, Mode::Train).update_running(false);
    sess.forward(&mut model.store, &feeds, &[model.loss])?;
    sess.backward(&mut model.store, model.loss)?;
    Ok(sess.scalar(model.loss).expect("loss"))
}

/// Gradient of each shared buffer against the sum over its sites once every
/// site owns a private copy.
pub fn clone_sum_error(spec: &ModelSpec, seed: u64) -> Result<f64> {
    let mut shared = build::<f64>(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(Shape::new(2, 3, 32, 32), 1.0, &mut rng);
    let labels = vec![0, 1 % spec.classes()];
    let l_shared = loss_and_grads(&mut shared, &x, &labels)?;

    let mut split = shared.clone();
    let mut clones: Vec<(ParamId, Vec<ParamId>)> = Vec::new();
    for s in &shared.shared {
        let mut ids = vec![s.param];
        for site in use_sites(&shared, s.param).iter().skip(1) {
            ids.push(split.split_share(site)?);
        }
        clones.push((s.param, ids));
    }
    let l_split = loss_and_grads(&mut split, &x, &labels)?;
    let mut worst = (l_shared - l_split).abs();
    for (orig, ids) in clones {
        let mut sum = Tensor::<f64>::zeros(shared.store.shape(orig));
        for id in ids {
            sum.add_assign(split.store.grad(id));
        }
        let g = shared.store.grad(orig);
        worst = worst.max(g.max_abs_diff(&sum) / g.max_abs().max(1e-12));
    }
    Ok(worst)
}

/// Small aggregation models used by the structural checks.
pub fn aggregation_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new(Family::Resnet110, Aggregation::Rla(RlaConfig::with_k(3)))
            .with_blocks(3)
            .with_classes(3),
        ModelSpec::new(Family::DensenetBc100, Aggregation::SharedLag).with_blocks(4).with_classes(3),
        ModelSpec::new(Family::DensenetBc100, Aggregation::SharedOrdinal).with_blocks(4).with_classes(3),
    ]
}

/// Split the second site of the first share-group and perturb the copy.
pub fn inject_split<T: crate::tensor::Scalar>(model: &mut Model<T>) -> Result<()> {
    let first = model.shared.first().ok_or(Error::NoSharedConvs)?;
    let site = use_sites(model, first.param)
        .get(1)
        .cloned()
        .ok_or_else(|| Error::invalid("inject_split", "share group has a single site"))?;
    let id = model.split_share(&site)?;
    let v = model.store.value_mut(id);
    for x in v.data_mut() {
        *x += T::from_f64(0.01);
    }
    Ok(())
}

pub fn aggregation_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        worst = worst.max(linear_identity_error(12, opts.seed + s)?);
    }
    checks.push(Check::within(
        "linear-mode aggregation identity",
        worst,
        LINEAR_IDENTITY_TOL,
        "12 blocks, 20 seeds",
    ));
    for spec in aggregation_specs() {
        let mut m = build::<f64>(&spec, opts.seed)?;
        if opts.inject {
            inject_split(&mut m)?;
        }
        checks.push(share_structure(&m));
        if !opts.inject {
            checks.push(Check::within(
                format!("clone-sum gradient of {}", spec.label()),
                clone_sum_error(&spec, opts.seed)?,
                CLONE_SUM_TOL,
                "shared grad vs sum over split sites",
            ));
        }
    }
    Ok(checks)
}

/// A one-op graph and its fed inputs, reduced to a scalar by a random
/// weighting so that no gradient is trivially zero.
struct OpCase {
    name: &'static str,
    graph: Graph,
    store: ParamStore<f64>,
    feeds: Feeds<f64>,
    loss: NodeId,
    inputs: Vec<NodeId>,
}

fn op_case(
    name: &'static str,
    seed: u64,
    shapes: &[(usize, usize, usize, usize)],
    labels: Option<Vec<usize>>,
    body: impl FnOnce(&mut Net<f64>, &[Var]) -> Result<Var>,
) -> Result<OpCase> {
    let mut net = Net::<f64>::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut feeds = Feeds::new();
    let mut vars = Vec::new();
    for (i, &(n, c, h, w)) in shapes.iter().enumerate() {
        let v = net.input(&format!("in{i}"), c, h, w)?;
        feeds = feeds.input(v.id, Tensor::randn(Shape::new(n, c, h, w), 1.0, &mut rng));
        vars.push(v);
    }
    let out = body(&mut net, &vars)?;
    let loss = if out.shape.numel() == 1 {
        out
    } else {
        let r = net.input("weights", out.shape.c(), out.shape.h(), out.shape.w())?;
        let n = shapes[0].0;
        feeds = feeds.input(r.id, Tensor::randn(out.shape.with_batch(n), 1.0, &mut rng));
        let m = net.mul("weighted", out, r)?;
        net.sum("loss", m)?
    };
    if let Some(l) = labels {
        feeds = feeds.labels(l);
    }
    let (graph, store) = net.finish();
    Ok(OpCase {
        name,
        graph,
        store,
        feeds,
        loss: loss.id,
        inputs: vars.iter().map(|v| v.id).collect(),
    })
}

fn op_cases(seed: u64) -> Result<Vec<OpCase>> {
    Ok(vec![
        op_case("conv2d", seed, &[(2, 3, 7, 7)], None, |n, v| n.conv2d("op", v[0], 4, 3, 2, 1))?,
        op_case("batchnorm2d", seed, &[(3, 4, 3, 3)], None, |n, v| n.batchnorm("op", v[0]))?,
        op_case("relu", seed, &[(2, 3, 4, 4)], None, |n, v| n.relu("op", v[0]))?,
        op_case("tanh", seed, &[(2, 3, 4, 4)], None, |n, v| n.tanh("op", v[0]))?,
        op_case("add", seed, &[(2, 3, 4, 4), (2, 3, 4, 4)], None, |n, v| n.add("op", v[0], v[1]))?,
        op_case("mul", seed, &[(2, 3, 4, 4), (2, 3, 4, 4)], None, |n, v| n.mul("op", v[0], v[1]))?,
        op_case("concat_channels", seed, &[(2, 2, 3, 3), (2, 3, 3, 3)], None, |n, v| {
            n.concat("op", &[v[0], v[1]])
        })?,
        op_case("avgpool2d", seed, &[(2, 3, 6, 6)], None, |n, v| n.avgpool("op", v[0], 2, 2))?,
        op_case("maxpool2d", seed, &[(2, 3, 7, 7)], None, |n, v| n.maxpool("op", v[0], 3, 2, 1))?,
        op_case("global_avgpool", seed, &[(2, 3, 5, 5)], None, |n, v| n.global_avgpool("op", v[0]))?,
        op_case("linear", seed, &[(3, 5, 1, 1)], None, |n, v| n.linear("op", v[0], 4))?,
        op_case("softmax_xent", seed, &[(4, 5, 1, 1)], Some(vec![0, 3, 4, 1]), |n, v| {
            n.softmax_xent("op", v[0])
        })?,
        op_case("sum", seed, &[(2, 3, 2, 2)], None, |n, v| {
            let t = n.tanh("squash", v[0])?;
            n.sum("op", t)
        })?,
        op_case("zeros_like", seed, &[(2, 3, 3, 3)], None, |n, v| {
            let z = n.zeros_like("op", v[0], 2)?;
            n.concat("cat", &[v[0], z])
        })?,
    ])
}

/// Two RLA bottleneck blocks (`16 -> 4 -> 16`, `k = 4`) sharing one
/// aggregation cell, on a random `x` and nonzero `h`.
fn rla_block_case(seed: u64) -> Result<OpCase> {
    op_case("rla_bottleneck_block", seed, &[(4, 16, 6, 6), (4, 4, 6, 6)], None, |n, v| {
        let (x, h) = rla_bottleneck_blocks(n, v[0], v[1], 4, 2, &RlaConfig::with_k(4))?;
        n.concat("out", &[x, h])
    })
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<Check>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut checks = Vec::new();
    let mut cases = op_cases(seed)?;
    cases.push(rla_block_case(seed)?);
    for mut case in cases {
        let report = gradcheck(&case.graph, &mut case.store, &case.feeds, case.loss, &case.inputs, &cfg)?;
        checks.push(gradcheck_check(format!("gradcheck {}", case.name), &report));
    }
    Ok(checks)
}

fn gradcheck_check(name: String, report: &GradCheckReport) -> Check {
    let worst = report.worst().map(|w| w.target).unwrap_or_default();
    Check {
        name,
        passed: report.passed(GRADCHECK_TOL),
        value: report.max_rel_err(),
        tolerance: GRADCHECK_TOL,
        detail: format!(
            "{} samples over {} targets, {} skipped at kinks, worst at {worst}",
            report.samples.len(),
            report.targets(),
            report.kinked.len()
        ),
    }
}

/// Grid `{-0.9, -0.6, ..., 0.9}`.
pub fn arma_grid() -> Vec<f64> {
    (-3..=3).map(|i| i as f64 * 0.3).collect()
}

pub fn arma_suite() -> Vec<Check> {
    let grid = arma_grid();
    let lags = 20;
    let mut closed: f64 = 0.0;
    let mut ar: f64 = 0.0;
    for &beta in &grid {
        for &gamma in &grid {
            let p = ArmaParams { beta, gamma };
            let sim = arma_impulse_response(p, lags).expect("|gamma| < 1");
            let cf = arma_impulse_closed_form(p, lags).expect("|gamma| < 1");
            let re = arma_ar_reconstruct(p, &sim).expect("|gamma| < 1");
            for t in 0..=lags {
                closed = closed.max((sim[t] - cf[t]).abs());
                ar = ar.max((sim[t] - re[t]).abs());
            }
        }
    }
    let mut rec: f64 = 0.0;
    for &alpha in &grid {
        for &gamma in &grid {
            for &beta1 in &grid {
                for &beta2 in &grid {
                    let p = RecurrenceParams {
                        alpha,
                        gamma,
                        beta1,
                        beta2,
                    };
                    let a = recurrence_expand(p, lags).expect("T >= 1");
                    let b = recurrence_expand_by_simulation(p, lags).expect("T >= 1");
                    for (x, y) in a.iter().zip(&b) {
                        rec = rec.max((x - y).abs());
                    }
                }
            }
        }
    }
    vec![
        Check::within("ARMA impulse response vs closed form", closed, ARMA_TOL, "49 (beta, gamma), lags <= 20"),
        Check::within("ARMA impulse response vs AR(inf) form", ar, ARMA_TOL, "49 (beta, gamma), lags <= 20"),
        Check::within(
            "recurrence expansion vs basis simulation",
            rec,
            ARMA_TOL,
            "2401 (alpha, gamma, beta1, beta2), T = 20",
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_conv_matches_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(Shape::new(2, 3, 6, 5), 1.0, &mut rng);
        let w = Tensor::randn(Shape::new(4, 3, 3, 3), 1.0, &mut rng);
        let a = reference_conv2d(&x, &w, 2, 1);
        let b = crate::kernels::conv2d(&x, &w, None, 2, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn linear_identity_holds() {
        assert!(linear_identity_error(5, 1).unwrap() < 1e-12);
    }

    #[test]
    fn injected_split_breaks_structure() {
        let spec = &aggregation_specs()[0];
        let mut m = build::<f64>(spec, 0).unwrap();
        assert!(share_structure(&m).passed);
        inject_split(&mut m).unwrap();
        assert!(!share_structure(&m).passed);
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }
}
