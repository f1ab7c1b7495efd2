//! Parameter and MAC accounting, shared-conv norm extraction and the
//! exponential decay fit.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Op;
use crate::model_zoo::{Model, SharedKind};
use crate::tensor::{Scalar, Shape};

/// One graph node that carries parameters or does arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub name: String,
    pub kind: &'static str,
    /// Parameters first used by this node; a shared buffer counts at its
    /// first use site only.
    pub params: usize,
    /// Multiply-accumulates of convolutions and linear layers.
    pub macs: u64,
    /// Per-element operations of normalisation, activations, sums and pools.
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelStats {
    pub model: String,
    pub resolution: usize,
    pub layers: Vec<LayerStats>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_elementwise: u64,
}

impl ModelStats {
    /// `name,kind,params,macs,elementwise` rows plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,params,macs,elementwise\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{},{}", l.name, l.kind, l.params, l.macs, l.elementwise);
        }
        let _ = writeln!(
            s,
            "total,,{},{},{}",
            self.total_params, self.total_macs, self.total_elementwise
        );
        s
    }
}

/// Parameters and MACs at the family's native input resolution.
pub fn count_parameters<T: Scalar>(model: &Model<T>) -> Result<ModelStats> {
    count_macs(model, model.spec.family.input_resolution())
}

/// Per-layer parameters and MACs for one `resolution x resolution` image.
/// Conv MACs are `Cout Cin Kh Kw Hout Wout`, linear MACs `in out`.
pub fn count_macs<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<ModelStats> {
    let graph = &model.graph;
    let store = &model.store;
    let input = match graph.node(model.input).op {
        Op::Input { c, .. } => Shape::new(1, c, resolution, resolution),
        _ => return Err(Error::invalid("count_macs", "model input is not an input node")),
    };
    let shapes = graph.infer_shapes(store, &[(model.input, input)])?;
    let mut seen = HashSet::new();
    let mut layers = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let out = shapes[i];
        let first_in = node.inputs.first().map(|&j| shapes[j]);
        let mut params = 0;
        for &j in &node.inputs {
            if let Op::Param(p) = graph.node(j).op {
                if seen.insert(p) {
                    params += store.shape(p).numel();
                }
            }
        }
        let (macs, elementwise) = match &node.op {
            Op::Conv2d { .. } => {
                let w = shapes[node.inputs[1]];
                let per_out = (w.c() * w.h() * w.w()) as u64;
                (per_out * out.numel() as u64, 0)
            }
            Op::Linear => {
                let w = shapes[node.inputs[1]];
                ((w.n() * w.c()) as u64 * out.n() as u64, 0)
            }
            Op::BatchNorm2d { .. } | Op::Relu | Op::Tanh | Op::Add | Op::Mul => {
                (0, out.numel() as u64)
            }
            Op::AvgPool2d { .. } | Op::MaxPool2d { .. } | Op::GlobalAvgPool | Op::SoftmaxXent => {
                (0, first_in.map_or(0, |s| s.numel()) as u64)
            }
            _ => (0, 0),
        };
        if params == 0 && macs == 0 && elementwise == 0 {
            continue;
        }
        layers.push(LayerStats {
            name: node.name.clone(),
            kind: node.op.kind(),
            params,
            macs,
            elementwise,
        });
    }
    Ok(ModelStats {
        model: model.spec.label(),
        resolution,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_elementwise: layers.iter().map(|l| l.elementwise).sum(),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormEntry {
    pub stage: usize,
    pub kind: SharedKind,
    /// Lag or ordinal; 1 for the RLA convs.
    pub index: usize,
    pub l1: f64,
}

/// L1 norm of every shared conv kernel, stage by stage. Dense banks are
/// indexed by lag or ordinal; an RLA stage gives its `g1` and `g2` pair.
pub fn extract_shared_norms<T: Scalar>(model: &Model<T>) -> Result<Vec<NormEntry>> {
    if model.shared.is_empty() {
        return Err(Error::NoSharedConvs);
    }
    Ok(model
        .shared
        .iter()
        .map(|s| NormEntry {
            stage: s.stage,
            kind: s.kind,
            index: s.index,
            l1: model.store.value(s.param).l1_norm(),
        })
        .collect())
}

/// Norms of one stage, in index order.
pub fn stage_norms(entries: &[NormEntry], stage: usize) -> Vec<f64> {
    entries.iter().filter(|e| e.stage == stage).map(|e| e.l1).collect()
}

pub fn norms_csv(entries: &[NormEntry]) -> String {
    let mut s = String::from("stage,kind,index,l1\n");
    for e in entries {
        let kind = match e.kind {
            SharedKind::Lag => "lag",
            SharedKind::Ordinal => "ordinal",
            SharedKind::RlaG1 => "rla_g1",
            SharedKind::RlaG2 => "rla_g2",
        };
        let _ = writeln!(s, "{},{kind},{},{}", e.stage, e.index, e.l1);
    }
    s
}

/// `y = a exp(-b l)` fitted to `series[l - 1]`, `l = 1..=n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub a: f64,
    pub b: f64,
    /// Coefficient of determination of the straight-line fit to `ln y`.
    /// Zero when the series is constant.
    pub r_squared: f64,
}

/// Least squares of `ln y` on `l`.
pub fn fit_exponential(series: &[f64]) -> Result<DecayFit> {
    if series.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", series.len())));
    }
    if let Some((i, v)) = series.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Fit(format!("value {v} at index {i} is not positive")));
    }
    let n = series.len() as f64;
    let xs: Vec<f64> = (1..=series.len()).map(|l| l as f64).collect();
    let ys: Vec<f64> = series.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        1.0 - ss_res / syy
    };
    Ok(DecayFit {
        a: intercept.exp(),
        b: if syy == 0.0 { 0.0 } else { -slope },
        r_squared,
    })
}
