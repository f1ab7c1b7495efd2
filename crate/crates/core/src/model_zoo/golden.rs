//! Reference architecture tables and published parameter counts.

use std::fmt;

use crate::aggregation::{ActivationOrder, RlaConfig, Sharing, Variant};
use crate::graph::{Graph, Op, Role};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape};

use super::{Aggregation, Family, Model, ModelSpec};

/// Per-block conv sequence `(kernel, out channels)` repeated `repeat` times;
/// each block ends at `resolution`.
#[derive(Clone, Copy, Debug)]
pub struct StageRow {
    pub resolution: usize,
    pub convs: &'static [(usize, usize)],
    pub repeat: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ArchTable {
    pub family: Family,
    /// `(kernel, out channels)` of the stem conv, at the input resolution.
    pub stem: (usize, usize),
    pub stages: &'static [StageRow],
    /// Channels entering the classifier (before any RLA channels).
    pub head_channels: usize,
}

pub const RESNET110: ArchTable = ArchTable {
    family: Family::Resnet110,
    stem: (3, 16),
    stages: &[
        StageRow {
            resolution: 32,
            convs: &[(3, 16), (3, 16)],
            repeat: 18,
        },
        StageRow {
            resolution: 16,
            convs: &[(3, 32), (3, 32)],
            repeat: 18,
        },
        StageRow {
            resolution: 8,
            convs: &[(3, 64), (3, 64)],
            repeat: 18,
        },
    ],
    head_channels: 64,
};

pub const RESNET164: ArchTable = ArchTable {
    family: Family::Resnet164,
    stem: (3, 16),
    stages: &[
        StageRow {
            resolution: 32,
            convs: &[(1, 16), (3, 16), (1, 64)],
            repeat: 18,
        },
        StageRow {
            resolution: 16,
            convs: &[(1, 32), (3, 32), (1, 128)],
            repeat: 18,
        },
        StageRow {
            resolution: 8,
            convs: &[(1, 64), (3, 64), (1, 256)],
            repeat: 18,
        },
    ],
    head_channels: 256,
};

pub const DENSENET_BC100: ArchTable = ArchTable {
    family: Family::DensenetBc100,
    stem: (3, 24),
    stages: &[
        StageRow {
            resolution: 32,
            convs: &[(1, 48), (3, 12)],
            repeat: 16,
        },
        StageRow {
            resolution: 16,
            convs: &[(1, 48), (3, 12)],
            repeat: 16,
        },
        StageRow {
            resolution: 8,
            convs: &[(1, 48), (3, 12)],
            repeat: 16,
        },
    ],
    head_channels: 342,
};

pub fn arch_table(family: Family) -> Option<&'static ArchTable> {
    match family {
        Family::Resnet110 => Some(&RESNET110),
        Family::Resnet164 => Some(&RESNET164),
        Family::DensenetBc100 => Some(&DENSENET_BC100),
        Family::Resnet50Shape => None,
    }
}

/// `(block scope, [(kernel, cout, out resolution)])` for the main-path convs
/// of every block/layer, in build order.
fn block_convs<T: Scalar>(graph: &Graph, store: &ParamStore<T>, shapes: &[Shape]) -> Vec<(String, Vec<(usize, usize, usize)>)> {
    let mut out: Vec<(String, Vec<(usize, usize, usize)>)> = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        if !matches!(node.op, Op::Conv2d { .. }) || node.role != Role::Main {
            continue;
        }
        let Some(pos) = node.name.rfind('.') else { continue };
        let scope = &node.name[..pos];
        // `block1.layer3.conv1.0` belongs to `block1.layer3`
        let scope = scope.strip_suffix(".conv1").unwrap_or(scope);
        let w = match graph.node(node.inputs[1]).op {
            Op::Param(p) => store.shape(p),
            _ => continue,
        };
        let entry = (w.h(), w.n(), shapes[i].h());
        match out.last_mut() {
            Some((s, v)) if s == scope => v.push(entry),
            _ => out.push((scope.to_string(), vec![entry])),
        }
    }
    out
}

/// Compare a built CIFAR model against its reference table. Returns every
/// mismatch found.
pub fn check_architecture<T: Scalar>(model: &Model<T>) -> Result<(), Vec<String>> {
    let Some(table) = arch_table(model.spec.family) else {
        return Err(vec![format!("no reference table for {}", model.spec.family)]);
    };
    let mut errs = Vec::new();
    let shapes = match model.graph.infer_shapes(&model.store, &[]) {
        Ok(s) => s,
        Err(e) => return Err(vec![e.to_string()]),
    };
    let blocks = block_convs(&model.graph, &model.store, &shapes);
    let expected: Vec<(usize, &StageRow)> = table
        .stages
        .iter()
        .enumerate()
        .flat_map(|(si, row)| std::iter::repeat((si, row)).take(row.repeat))
        .collect();
    if blocks.len() != expected.len() {
        errs.push(format!(
            "expected {} blocks, found {}",
            expected.len(),
            blocks.len()
        ));
    }
    for ((scope, convs), (si, row)) in blocks.iter().zip(&expected) {
        let want: Vec<(usize, usize)> = row.convs.to_vec();
        let got: Vec<(usize, usize)> = convs.iter().map(|&(k, c, _)| (k, c)).collect();
        let res = convs.last().map(|c| c.2);
        if got != want || res != Some(row.resolution) {
            errs.push(format!(
                "{scope} (stage {}): convs {convs:?}, expected {want:?} ending at {}",
                si + 1,
                row.resolution
            ));
        }
    }

    let stem = model
        .graph
        .nodes()
        .iter()
        .enumerate()
        .find(|(_, n)| n.role == Role::Stem && matches!(n.op, Op::Conv2d { .. }));
    match stem {
        Some((i, n)) => {
            let w = match model.graph.node(n.inputs[1]).op {
                Op::Param(p) => model.store.shape(p),
                _ => Shape::scalar(),
            };
            if (w.h(), w.n(), shapes[i].h()) != (table.stem.0, table.stem.1, 32) {
                errs.push(format!("stem conv {w} at {}", shapes[i]));
            }
        }
        None => errs.push("no stem conv".into()),
    }

    let k = model.spec.rla().map_or(0, |c| c.k);
    let logits = shapes[model.logits];
    let fc_in = model.graph.node(model.logits).inputs[0];
    if shapes[fc_in].c() != table.head_channels + k {
        errs.push(format!(
            "classifier input has {} channels, expected {}",
            shapes[fc_in].c(),
            table.head_channels + k
        ));
    }
    if logits.c() != model.spec.classes() {
        errs.push(format!("logits {logits}"));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tolerance {
    /// Absolute half-width in millions.
    Millions(f64),
    /// Relative half-width.
    Relative(f64),
}

impl Tolerance {
    pub fn accepts(self, count: usize, millions: f64) -> bool {
        let m = count as f64 / 1e6;
        match self {
            Tolerance::Millions(d) => (m - millions).abs() <= d + 1e-9,
            Tolerance::Relative(r) => ((m - millions) / millions).abs() <= r,
        }
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::Millions(d) => write!(f, "+/-{d}M"),
            Tolerance::Relative(r) => write!(f, "+/-{}%", r * 100.0),
        }
    }
}

/// A published parameter count, in millions, reported to two decimals.
#[derive(Clone, Debug)]
pub struct ParamTarget {
    pub name: &'static str,
    pub spec: ModelSpec,
    pub millions: f64,
    pub tolerance: Tolerance,
    /// Part of the gated golden set; the rest are reported only.
    pub gated: bool,
}

impl ParamTarget {
    pub fn accepts(&self, count: usize) -> bool {
        self.tolerance.accepts(count, self.millions)
    }
}

/// Half-width of the acceptance band around a published count, in millions.
pub const PARAM_TOLERANCE_M: f64 = 0.01;
/// Band for the ImageNet ResNet-50 shape, whose reference count follows an
/// unknown convention.
pub const RESNET50_TOLERANCE: f64 = 0.05;

fn rla(k: usize, variant: Variant) -> Aggregation {
    Aggregation::Rla(RlaConfig {
        variant,
        ..RlaConfig::with_k(k)
    })
}

/// Published CIFAR parameter counts.
pub fn param_targets() -> Vec<ParamTarget> {
    use Family::*;
    let t = |name, spec, millions| ParamTarget {
        name,
        spec,
        millions,
        tolerance: Tolerance::Millions(PARAM_TOLERANCE_M),
        gated: true,
    };
    let info = |name, spec, millions| ParamTarget {
        gated: false,
        ..t(name, spec, millions)
    };
    let mut v = vec![
        t("ResNet-164", ModelSpec::new(Resnet164, Aggregation::None), 1.72),
        t("RLA-ResNet-164 (k=12)", ModelSpec::new(Resnet164, rla(12, Variant::V1)), 1.74),
        t("ResNet-110", ModelSpec::new(Resnet110, Aggregation::None), 1.73),
        t("RLA-ResNet-110 (k=4)", ModelSpec::new(Resnet110, rla(4, Variant::V1)), 1.80),
        info(
            "ResNet-110 (CIFAR-100)",
            ModelSpec::new(Resnet110, Aggregation::None).with_classes(100),
            1.74,
        ),
        t("DenseNet-BC-100 (k=12)", ModelSpec::new(DensenetBc100, Aggregation::Dense), 0.80),
        t("Shared-Lag DenseNet", ModelSpec::new(DensenetBc100, Aggregation::SharedLag), 0.60),
        t("Shared-Ordinal DenseNet", ModelSpec::new(DensenetBc100, Aggregation::SharedOrdinal), 0.60),
        t(
            "RLA-v1 (k=12, unshared)",
            ModelSpec::new(
                Resnet164,
                Aggregation::Rla(RlaConfig {
                    sharing: Sharing::Unshared,
                    ..RlaConfig::with_k(12)
                }),
            ),
            1.90,
        ),
        info(
            "RLA-v1 (k=12, no exchange)",
            ModelSpec::new(
                Resnet164,
                Aggregation::Rla(RlaConfig {
                    exchange: false,
                    ..RlaConfig::with_k(12)
                }),
            ),
            1.72,
        ),
        info(
            "RLA-v1 (k=12, post-activated)",
            ModelSpec::new(
                Resnet164,
                Aggregation::Rla(RlaConfig {
                    activation_order: ActivationOrder::PostAct,
                    ..RlaConfig::with_k(12)
                }),
            ),
            1.74,
        ),
        t("RLA-v1 (k=8)", ModelSpec::new(Resnet164, rla(8, Variant::V1)), 1.73),
        t("RLA-v1 (k=16)", ModelSpec::new(Resnet164, rla(16, Variant::V1)), 1.75),
        t("RLA-v1 (k=24)", ModelSpec::new(Resnet164, rla(24, Variant::V1)), 1.78),
    ];
    let names = ["RLA-v2 (k=12)", "RLA-v3 (k=12)", "RLA-v4 (k=12)", "RLA-v5 (k=12)", "RLA-v6 (k=12)"];
    for (name, variant) in names.into_iter().zip(&Variant::ALL[1..]) {
        v.push(t(name, ModelSpec::new(Resnet164, rla(12, *variant)), 1.74));
    }
    for (name, agg, millions) in [
        ("ResNet-50", Aggregation::None, 24.37),
        ("RLA-ResNet-50 (k=32)", rla(32, Variant::V1), 24.67),
    ] {
        v.push(ParamTarget {
            tolerance: Tolerance::Relative(RESNET50_TOLERANCE),
            ..info(name, ModelSpec::new(Resnet50Shape, agg), millions)
        });
    }
    v
}

/// Published count for `spec`, if there is one.
pub fn param_target(spec: &ModelSpec) -> Option<ParamTarget> {
    let mut s = spec.clone();
    if s.classes == Some(s.family.default_classes()) {
        s.classes = None;
    }
    if s.family == Family::DensenetBc100 && s.aggregation == Aggregation::None {
        s.aggregation = Aggregation::Dense;
    }
    param_targets().into_iter().find(|t| t.spec == s)
}

/// Whether `count` lies in the +/-0.01M band of a two-decimal figure.
pub fn within_target(count: usize, millions: f64) -> bool {
    Tolerance::Millions(PARAM_TOLERANCE_M).accepts(count, millions)
}
