//! Acceptance suite. Runs without the libtest harness so that each
//! criterion prints its PASS/FAIL line in plain `cargo test` output.
//!
//! `cargo test -p rla-core --test acceptance -- 2 5` runs criteria 2 and 5.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rla_core::aggregation::{conv1_partition_check, RlaConfig, Sharing, Variant};
use rla_core::analysis::{extract_shared_norms, fit_exponential, stage_norms};
use rla_core::kernels::conv2d;
use rla_core::model_zoo::{build, Aggregation, Family, ModelSpec, SharedKind};
use rla_core::timeseries::{
    arma_impulse_response, recurrence_expand, recurrence_expand_by_simulation, ArmaParams, RecurrenceParams,
};
use rla_core::training::{self, load_cifar10, RunConfig, TrainConfig};
use rla_core::verify::{gradcheck_suite, linear_stage};
use rla_core::{Feeds, Mode, NodeId, Session, Shape, Tensor};

const GOLDEN_TOL_M: f64 = 0.01;
const LINEAR_TOL: f64 = 1e-5;
const PARTITION_TOL: f64 = 1e-10;
const ARMA_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const R2_TOL: f64 = 1e-12;
const DECAY_TOL: f64 = 1e-9;
const DESK_LOSS_RATIO: f64 = 0.5;
const DESK_VAL_ACC: f64 = 0.35;

struct Outcome {
    passed: bool,
    summary: String,
}

impl Outcome {
    fn new(passed: bool, summary: impl Into<String>) -> Self {
        Outcome {
            passed,
            summary: summary.into(),
        }
    }
}

fn timed(budget: Duration, body: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = body();
    let took = start.elapsed();
    let in_budget = took <= budget;
    out.summary = format!("{}; {:.1}s (budget {}s)", out.summary, took.as_secs_f64(), budget.as_secs());
    if !in_budget {
        out.summary.push_str(" OVER BUDGET");
    }
    out.passed &= in_budget;
    out
}

// ---------------------------------------------------------------- oracles

/// Stride-1 cross-correlation with zero padding, straight from the definition.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, wcin, kh, kw] = w.shape().0;
    assert_eq!(cin, wcin);
    let (ho, wo) = (h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
    Tensor::from_fn(Shape::new(n, cout, ho, wo), |[b, o, y, z]| {
        let mut s = 0.0;
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let (yy, zz) = ((y + i).wrapping_sub(pad), (z + j).wrapping_sub(pad));
                    if yy < h && zz < wd {
                        s += x.at([b, c, yy, zz]) * w.at([o, c, i, j]);
                    }
                }
            }
        }
        s
    })
}

/// Parameters of a pre-activation CIFAR ResNet from its layer table: bias-free
/// convs, BN (2 per channel) before every conv, projection shortcuts where
/// the shape changes, Conv-BN stem, final BN and linear head. With RLA (`k`)
/// every block input gains `k` channels, every block adds a BN over `k`
/// channels, and each stage owns one `g1` (1x1, out -> k) and `g2` (3x3,
/// k -> k), or one pair per block when unshared.
fn resnet_cifar_params(bottleneck: bool, rla: Option<(usize, bool)>, classes: usize) -> usize {
    let (k, shared) = rla.unwrap_or((0, true));
    let expansion = if bottleneck { 4 } else { 1 };
    let mut total = 3 * 9 * 16 + 2 * 16;
    let mut prev = 16;
    for (si, p) in [16usize, 32, 64].into_iter().enumerate() {
        let out = p * expansion;
        let cell = out * k + 9 * k * k;
        if rla.is_some() && shared {
            total += cell;
        }
        for bi in 0..18 {
            let cin = prev + k;
            total += 2 * cin;
            total += if bottleneck {
                cin * p + 2 * p + 9 * p * p + 2 * p + p * out
            } else {
                9 * cin * p + 2 * p + 9 * p * out
            };
            if (bi == 0 && si > 0) || prev != out {
                total += prev * out;
            }
            if rla.is_some() {
                total += 2 * k + if shared { 0 } else { cell };
            }
            prev = out;
        }
    }
    total + 2 * prev + (prev + k) * classes + classes
}

/// DenseNet-BC-100: growth 12, 16 layers per block, 4x bottleneck,
/// compression 0.5, block input = image next to a 24-channel stem conv.
/// The shared variants replace each layer's 1x1 conv over the concatenation
/// with a private 1x1 on the block input plus 15 block-wide 12 -> 48 convs,
/// each input piece keeping its own BN.
fn densenet_params(shared: bool, classes: usize) -> usize {
    let (g, bott) = (12, 48);
    let mut total = 3 * 9 * 2 * g;
    let mut c0 = 3 + 2 * g;
    let mut out = 0;
    for b in 0..3 {
        for t in 1..=16 {
            let cin = c0 + g * (t - 1);
            total += if shared {
                2 * c0 + c0 * bott + 2 * g * (t - 1)
            } else {
                2 * cin + cin * bott
            };
            total += 2 * bott + 9 * bott * g;
        }
        if shared {
            total += 15 * g * bott;
        }
        out = c0 + 16 * g;
        if b < 2 {
            total += 2 * out + out * (out / 2);
            c0 = out / 2;
        }
    }
    total + 2 * out + out * classes + classes
}

// ------------------------------------------------------------- criteria

fn rla(k: usize) -> Aggregation {
    Aggregation::Rla(RlaConfig::with_k(k))
}

fn criterion_1() -> Outcome {
    timed(Duration::from_secs(10), || {
        struct Row {
            label: String,
            spec: ModelSpec,
            target_m: f64,
            oracle: usize,
        }
        let row = |label: &str, spec: ModelSpec, target_m: f64, oracle: usize| Row {
            label: label.into(),
            spec,
            target_m,
            oracle,
        };
        let r164 = |agg| ModelSpec::new(Family::Resnet164, agg);
        let r110 = |agg| ModelSpec::new(Family::Resnet110, agg);
        let dn = |agg| ModelSpec::new(Family::DensenetBc100, agg);
        let mut rows = vec![
            row("ResNet-164", r164(Aggregation::None), 1.72, resnet_cifar_params(true, None, 10)),
            row("RLA-ResNet-164 k=12", r164(rla(12)), 1.74, resnet_cifar_params(true, Some((12, true)), 10)),
            row("ResNet-110", r110(Aggregation::None), 1.73, resnet_cifar_params(false, None, 10)),
            row("RLA-ResNet-110 k=4", r110(rla(4)), 1.80, resnet_cifar_params(false, Some((4, true)), 10)),
            row("DenseNet-BC-100", dn(Aggregation::Dense), 0.80, densenet_params(false, 10)),
            row("Shared-Lag DenseNet-BC-100", dn(Aggregation::SharedLag), 0.60, densenet_params(true, 10)),
            row("Shared-Ordinal DenseNet-BC-100", dn(Aggregation::SharedOrdinal), 0.60, densenet_params(true, 10)),
            row(
                "unshared RLA-v1 k=12",
                r164(Aggregation::Rla(RlaConfig {
                    sharing: Sharing::Unshared,
                    ..RlaConfig::with_k(12)
                })),
                1.90,
                resnet_cifar_params(true, Some((12, false)), 10),
            ),
        ];
        for (k, target) in [(8, 1.73), (12, 1.74), (16, 1.75), (24, 1.78)] {
            rows.push(row(
                &format!("k-sweep k={k}"),
                r164(rla(k)),
                target,
                resnet_cifar_params(true, Some((k, true)), 10),
            ));
        }
        for v in Variant::ALL {
            rows.push(row(
                &format!("variant {v}"),
                r164(Aggregation::Rla(RlaConfig {
                    variant: v,
                    ..RlaConfig::with_k(12)
                })),
                1.74,
                resnet_cifar_params(true, Some((12, true)), 10),
            ));
        }
        let mut all = true;
        for r in &rows {
            let got = build::<f32>(&r.spec, 0).expect("model builds").param_count();
            let m = got as f64 / 1e6;
            let golden = (m - r.target_m).abs() <= GOLDEN_TOL_M + 1e-12;
            let exact = got == r.oracle;
            all &= golden && exact;
            println!(
                "    {} {:<32} {got:>9} ({m:.3}M) target {:.2}M +/- {GOLDEN_TOL_M}M, layer-table oracle {} {}",
                if golden && exact { "ok  " } else { "MISS" },
                r.label,
                r.target_m,
                r.oracle,
                if exact { "matches" } else { "DIFFERS" },
            );
        }
        Outcome::new(all, format!("{} models against published counts", rows.len()))
    })
}

/// `h^t` of a linear-mode stage against `sum_j g2^{t-j+1} g1(y^j)`.
fn linear_identity(blocks: usize, seed: u64) -> f64 {
    let st = linear_stage(blocks, 4, 3, 6, seed).expect("stage builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let feeds = Feeds::new().input(st.x, Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng));
    let mut store = st.store.clone();
    let mut sess = Session::new(&st.graph, Mode::Eval);
    let targets: Vec<NodeId> = st.ys.iter().chain(&st.hs).copied().collect();
    sess.forward(&mut store, &feeds, &targets).expect("forward");
    let (g1, g2) = (store.value(st.g1), store.value(st.g2));
    let mut worst: f64 = 0.0;
    for t in 1..=blocks {
        let mut want = Tensor::<f64>::zeros(sess.value(st.hs[t - 1]).unwrap().shape());
        for j in 1..=t {
            let mut term = naive_conv(sess.value(st.ys[j - 1]).unwrap(), g1, 0);
            for _ in 0..=(t - j) {
                term = naive_conv(&term, g2, 1);
            }
            want.add_assign(&term);
        }
        let got = sess.value(st.hs[t - 1]).unwrap();
        worst = worst.max(got.max_abs_diff(&want) / want.max_abs());
    }
    worst
}

fn criterion_2() -> Outcome {
    timed(Duration::from_secs(60), || {
        let worst = (0..20).map(|seed| linear_identity(12, seed)).fold(0.0, f64::max);
        Outcome::new(
            worst <= LINEAR_TOL,
            format!("max rel err {worst:.2e} <= {LINEAR_TOL:e} over 20 seeds, t = 1..=12"),
        )
    })
}

fn criterion_3() -> Outcome {
    timed(Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let parts = rng.gen_range(1..=6);
            let chans: Vec<usize> = (0..parts).map(|_| rng.gen_range(1..=10)).collect();
            let total: usize = chans.iter().sum();
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            let (cout, side) = (rng.gen_range(1..=12), rng.gen_range(3..=8));
            let w = Tensor::<f64>::randn(Shape::new(cout, total, k, k), 1.0, &mut rng);
            let xs: Vec<Tensor<f64>> = chans
                .iter()
                .map(|&c| Tensor::randn(Shape::new(2, c, side, side), 1.0, &mut rng))
                .collect();
            let offsets: Vec<usize> = chans.iter().scan(0, |o, &c| Some(std::mem::replace(o, *o + c))).collect();
            let owner = |c: usize| offsets.iter().rposition(|&o| o <= c).unwrap();
            let cat = Tensor::from_fn(Shape::new(2, total, side, side), |[n, c, y, z]| {
                let p = owner(c);
                xs[p].at([n, c - offsets[p], y, z])
            });
            let whole = conv2d(&cat, &w, None, 1, k / 2).expect("conv");
            let mut sum = Tensor::<f64>::zeros(whole.shape());
            for (p, x) in xs.iter().enumerate() {
                let slice = Tensor::from_fn(Shape::new(cout, chans[p], k, k), |[o, i, y, z]| {
                    w.at([o, offsets[p] + i, y, z])
                });
                sum.add_assign(&naive_conv(x, &slice, k / 2));
            }
            worst = worst.max(whole.max_abs_diff(&sum));
            if k == 1 {
                let refs: Vec<&Tensor<f64>> = xs.iter().collect();
                worst = worst.max(conv1_partition_check(&w, &refs).expect("partition check"));
            }
        }
        Outcome::new(
            worst <= PARTITION_TOL,
            format!("max abs dev {worst:.2e} <= {PARTITION_TOL:e} over 50 draws"),
        )
    })
}

fn criterion_4() -> Outcome {
    timed(Duration::from_secs(5), || {
        let grid: Vec<f64> = (-9..=9).step_by(3).map(|i| i as f64 / 10.0).collect();
        let lags = 20;
        let mut impulse: f64 = 0.0;
        for &beta in &grid {
            for &gamma in &grid {
                let sim = arma_impulse_response(ArmaParams { beta, gamma }, lags).expect("invertible");
                for (l, v) in sim.iter().enumerate() {
                    let want = if l == 0 { 1.0 } else { (beta - gamma) * beta.powi(l as i32 - 1) };
                    impulse = impulse.max((v - want).abs());
                }
            }
        }
        let mut basis: f64 = 0.0;
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
                        for t in 1..=lags {
                            let sim = recurrence_expand_by_simulation(p, t).expect("T >= 1");
                            let closed = recurrence_expand(p, t).expect("T >= 1");
                            for (l, (a, b)) in sim.iter().zip(&closed).enumerate() {
                                let want = if l == 0 {
                                    beta1
                                } else {
                                    beta2 * alpha * gamma.powi(l as i32 - 1)
                                };
                                basis = basis.max((a - want).abs()).max((b - want).abs());
                            }
                        }
                    }
                }
            }
        }
        let worst = impulse.max(basis);
        Outcome::new(
            worst <= ARMA_TOL,
            format!(
                "impulse {impulse:.1e}, basis expansion {basis:.1e} <= {ARMA_TOL:e}; grid {{-0.9,-0.6,..,0.9}}, lags <= {lags}"
            ),
        )
    })
}

fn criterion_5() -> Outcome {
    timed(Duration::from_secs(300), || {
        let checks = gradcheck_suite(0).expect("gradcheck suite runs");
        let required = [
            "conv2d",
            "batchnorm2d",
            "relu",
            "tanh",
            "add",
            "mul",
            "concat_channels",
            "avgpool2d",
            "maxpool2d",
            "global_avgpool",
            "linear",
            "softmax_xent",
            "sum",
            "zeros_like",
            "rla_bottleneck_block",
        ];
        let missing: Vec<&str> = required
            .iter()
            .filter(|r| !checks.iter().any(|c| c.name == format!("gradcheck {r}")))
            .copied()
            .collect();
        let mut ok = missing.is_empty();
        let mut worst: f64 = 0.0;
        for c in &checks {
            ok &= c.passed && c.value <= GRAD_TOL && c.tolerance == GRAD_TOL;
            worst = worst.max(c.value);
            println!(
                "    {} {:<34} rel err {:.2e}; {}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.value,
                c.detail
            );
        }
        Outcome::new(
            ok,
            format!(
                "{} cases, worst rel err {worst:.2e} <= {GRAD_TOL:e}, step 1e-5{}",
                checks.len(),
                if missing.is_empty() {
                    String::new()
                } else {
                    format!(", missing {missing:?}")
                }
            ),
        )
    })
}

fn criterion_6() -> Outcome {
    let Some(dir) = std::env::var_os("RLA_CIFAR10_DIR").map(PathBuf::from) else {
        return Outcome::new(false, "RLA_CIFAR10_DIR is not set; CIFAR-10 is required for the desk run");
    };
    timed(Duration::from_secs(30 * 60), || desk_run(&dir))
}

fn desk_run(dir: &Path) -> Outcome {
    let data = match load_cifar10(dir) {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, format!("cannot load CIFAR-10 from {}: {e}", dir.display())),
    };
    let mut run = RunConfig {
        model: ModelSpec::new(Family::Resnet164, rla(12)).with_blocks(3),
        train: TrainConfig::desk(),
        data: None,
    };
    let result = training::run(&run, &data, |e| {
        println!(
            "    epoch {} lr {} train loss {:.4} val acc {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_acc
        )
    })
    .expect("desk run trains");
    let log = &result.outcome.log;
    let (first, last) = (log[0].train_loss, log[log.len() - 1].train_loss);
    let acc = result.outcome.best_val_acc;
    run.train.epochs = 1;
    let replay = training::run(&run, &data, |_| {}).expect("replay trains");
    let deterministic = replay.outcome.log[0].train_loss.to_bits() == first.to_bits();
    let ok = last <= DESK_LOSS_RATIO * first && acc >= DESK_VAL_ACC && deterministic;
    Outcome::new(
        ok,
        format!(
            "loss {first:.4} -> {last:.4} (ratio {:.3} <= {DESK_LOSS_RATIO}), val acc {acc:.4} >= {DESK_VAL_ACC}, epoch-0 replay {}",
            last / first,
            if deterministic { "bit-identical" } else { "DIFFERS" }
        ),
    )
}

/// Results that need full-length training are declared, not gated. The
/// long-run configs must still describe the full protocol.
fn criterion_7() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for item in [
        "CIFAR test errors of the 300-epoch ResNet and RLA-ResNet runs",
        "ImageNet results",
        "DenseNet-BC-100 shared-weight test errors",
        "trained-weight norm curves and their fitted R^2 values",
    ] {
        println!("    declared not reproduced: {item}");
    }
    let mut problems = Vec::new();
    if !root.join("scripts/long_run.sh").is_file() {
        problems.push("scripts/long_run.sh missing".to_string());
    }
    let want = TrainConfig::default();
    let mut configs = 0;
    let entries = std::fs::read_dir(root.join("configs/long_run")).map(|d| d.flatten().collect::<Vec<_>>());
    for e in entries.unwrap_or_default() {
        let text = std::fs::read_to_string(e.path()).unwrap_or_default();
        match toml::from_str::<RunConfig>(&text) {
            Ok(run) if run.train.epochs == 300
                && run.train.milestones == [150, 225]
                && run.train.batch == 128
                && run.train.lr == 0.1
                && run.train.nesterov
                && run.train.momentum == 0.9
                && run.train.weight_decay == want.weight_decay =>
            {
                configs += 1
            }
            Ok(_) => problems.push(format!("{} is not the 300-epoch protocol", e.path().display())),
            Err(err) => problems.push(format!("{}: {err}", e.path().display())),
        }
    }
    if configs < 7 {
        problems.push(format!("{configs} long-run configs, expected 7"));
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{configs} long-run configs with the 300-epoch protocol; results declared, not gated")
        } else {
            problems.join("; ")
        },
    )
}

fn criterion_8() -> Outcome {
    timed(Duration::from_secs(5), || {
        let model = build::<f32>(&ModelSpec::new(Family::DensenetBc100, Aggregation::SharedLag), 0).expect("builds");
        let entries = extract_shared_norms(&model).expect("shared convs");
        let per_stage: Vec<usize> = (1..=3).map(|s| stage_norms(&entries, s).len()).collect();
        let lag_kind = entries.iter().all(|e| e.kind == SharedKind::Lag);
        let series: Vec<f64> = (1..=15).map(|l| (-0.4 * l as f64).exp()).collect();
        let fit = fit_exponential(&series).expect("fit");
        let ok = per_stage == [15, 15, 15]
            && lag_kind
            && (fit.r_squared - 1.0).abs() <= R2_TOL
            && (fit.b - 0.4).abs() <= DECAY_TOL;
        Outcome::new(
            ok,
            format!(
                "entries per stage {per_stage:?}, fit b = {:.12} (+/- {DECAY_TOL:e}), R^2 = {:.15} (+/- {R2_TOL:e})",
                fit.b, fit.r_squared
            ),
        )
    })
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "parameter golden counts", criterion_1),
        (2, "linear-mode aggregation identity", criterion_2),
        (3, "partition identity", criterion_3),
        (4, "ARMA and recurrence expansions", criterion_4),
        (5, "gradient checks", criterion_5),
        (6, "desk-scale training smoke", criterion_6),
        (7, "long-run results declared", criterion_7),
        (8, "norm extraction and decay fit", criterion_8),
    ];
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        println!("criterion {n}: {name}");
        let out = run();
        println!(
            "criterion {n}: {} {name}: {}",
            if out.passed { "PASS" } else { "FAIL" },
            out.summary
        );
        if !out.passed {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
