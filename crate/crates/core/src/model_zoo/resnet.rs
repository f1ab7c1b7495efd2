use crate::aggregation::{rla_block_forward, rla_head, BlockOut, RlaConfig, RlaStage, Sharing};
use crate::error::Result;
use crate::graph::{Net, Role, Var};
use crate::tensor::Scalar;

use super::{Built, Family, ModelSpec, SharedConv, SharedKind};

#[derive(Clone, Copy)]
struct BlockDims {
    planes: usize,
    out: usize,
    stride: usize,
    bottleneck: bool,
}

/// Pre-activated residual branch plus shortcut. `input` feeds the branch,
/// the shortcut sees `x` (so the recurrent channels never reach it).
fn preact_block<T: Scalar>(net: &mut Net<T>, input: Var, x: Var, d: BlockDims) -> Result<BlockOut> {
    let a = net.bn_relu("bn1", input)?;
    let y = if d.bottleneck {
        let c1 = net.conv2d("conv1", a, d.planes, 1, 1, 0)?;
        let a2 = net.bn_relu("bn2", c1)?;
        let c2 = net.conv2d("conv2", a2, d.planes, 3, d.stride, 1)?;
        let a3 = net.bn_relu("bn3", c2)?;
        net.conv2d("conv3", a3, d.out, 1, 1, 0)?
    } else {
        let c1 = net.conv2d("conv1", a, d.planes, 3, d.stride, 1)?;
        let a2 = net.bn_relu("bn2", c1)?;
        net.conv2d("conv2", a2, d.out, 3, 1, 1)?
    };
    let shortcut = if d.stride != 1 || x.channels() != d.out {
        net.with_role(Role::Shortcut, |n| n.conv2d("shortcut", x, d.out, 1, d.stride, 0))?
    } else {
        x
    };
    Ok(BlockOut {
        residual: y,
        shortcut,
    })
}

/// Post-activated bottleneck of the ImageNet ResNet-50 (stride on the 3x3,
/// BN in the projection shortcut).
fn postact_block<T: Scalar>(net: &mut Net<T>, input: Var, x: Var, d: BlockDims) -> Result<BlockOut> {
    let c1 = net.conv2d("conv1", input, d.planes, 1, 1, 0)?;
    let a1 = net.bn_relu("bn1", c1)?;
    let c2 = net.conv2d("conv2", a1, d.planes, 3, d.stride, 1)?;
    let a2 = net.bn_relu("bn2", c2)?;
    let c3 = net.conv2d("conv3", a2, d.out, 1, 1, 0)?;
    let y = net.batchnorm("bn3", c3)?;
    let shortcut = if d.stride != 1 || x.channels() != d.out {
        net.with_role(Role::Shortcut, |n| -> Result<Var> {
            let s = n.conv2d("shortcut", x, d.out, 1, d.stride, 0)?;
            n.batchnorm("shortcut.bn", s)
        })?
    } else {
        x
    };
    Ok(BlockOut {
        residual: y,
        shortcut,
    })
}

/// `blocks` stride-1 pre-activated bottleneck blocks (`planes -> 4 planes`)
/// of one RLA stage, starting from `x` and `h`. Returns the final `(x, h)`.
pub fn rla_bottleneck_blocks<T: Scalar>(
    net: &mut Net<T>,
    mut x: Var,
    mut h: Var,
    planes: usize,
    blocks: usize,
    cfg: &RlaConfig,
) -> Result<(Var, Var)> {
    let mut stage = RlaStage::new(1, cfg.k);
    let d = BlockDims {
        planes,
        out: planes * 4,
        stride: 1,
        bottleneck: true,
    };
    for bi in 0..blocks {
        (x, h) = net.scoped(&format!("block{}", bi + 1), |net| {
            rla_block_forward(net, x, h, &mut stage, cfg, |n, input, x| preact_block(n, input, x, d))
        })?;
    }
    Ok((x, h))
}

struct Stages<'a> {
    spec: &'a ModelSpec,
    widths: &'a [usize],
    expansion: usize,
    bottleneck: bool,
    postact: bool,
}

/// Run all stages from `x`; returns the final `x`, the final `h` (with RLA)
/// and the per-stage recurrence state.
fn run_stages<T: Scalar>(
    net: &mut Net<T>,
    mut x: Var,
    s: &Stages<'_>,
) -> Result<(Var, Option<Var>, Vec<RlaStage>)> {
    let rla: Option<RlaConfig> = s.spec.rla().copied();
    let mut h = match &rla {
        Some(cfg) => Some(net.with_role(Role::Aggregation, |n| n.zeros_like("rla.h0", x, cfg.k))?),
        None => None,
    };
    let mut stages = Vec::new();
    for (si, (&planes, &blocks)) in s.widths.iter().zip(&s.spec.blocks_per_stage()).enumerate() {
        let mut stage = rla.map(|cfg| RlaStage::new(si + 1, cfg.k));
        for bi in 0..blocks {
            let d = BlockDims {
                planes,
                out: planes * s.expansion,
                stride: if bi == 0 && si > 0 { 2 } else { 1 },
                bottleneck: s.bottleneck,
            };
            let postact = s.postact;
            let block = move |n: &mut Net<T>, input: Var, x: Var| {
                if postact {
                    postact_block(n, input, x, d)
                } else {
                    preact_block(n, input, x, d)
                }
            };
            let scope = format!("stage{}.block{}", si + 1, bi + 1);
            (x, h) = net.scoped(&scope, |net| -> Result<(Var, Option<Var>)> {
                match (&mut stage, h, &rla) {
                    (Some(st), Some(hp), Some(cfg)) => {
                        let (xn, hn) = rla_block_forward(net, x, hp, st, cfg, block)?;
                        let xn = if postact { net.relu("out.relu", xn)? } else { xn };
                        Ok((xn, Some(hn)))
                    }
                    _ => {
                        let out = block(net, x, x)?;
                        let xn = net.add("add", out.shortcut, out.residual)?;
                        let xn = if postact { net.relu("out.relu", xn)? } else { xn };
                        Ok((xn, None))
                    }
                }
            })?;
        }
        if let Some(st) = stage {
            stages.push(st);
        }
    }
    Ok((x, h, stages))
}

fn shared_of(stages: &[RlaStage], cfg: Option<&RlaConfig>) -> Vec<SharedConv> {
    match cfg {
        Some(c) if c.sharing == Sharing::Shared => stages
            .iter()
            .flat_map(|st| {
                let (g1, g2) = st.convs[0];
                [
                    SharedConv {
                        stage: st.index,
                        index: 1,
                        kind: SharedKind::RlaG1,
                        param: g1,
                    },
                    SharedConv {
                        stage: st.index,
                        index: 1,
                        kind: SharedKind::RlaG2,
                        param: g2,
                    },
                ]
            })
            .collect(),
        _ => Vec::new(),
    }
}

fn head<T: Scalar>(net: &mut Net<T>, x: Var, h: Option<Var>, classes: usize) -> Result<Var> {
    match h {
        Some(h) => rla_head(net, x, h, classes),
        None => net.with_role(Role::Head, |n| {
            let p = n.global_avgpool("head.pool", x)?;
            n.linear("fc", p, classes)
        }),
    }
}

/// Pre-activated CIFAR ResNet-110 (basic blocks) or ResNet-164
/// (bottlenecks): Conv-BN-ReLU stem, three stages at 32/16/8, final BN-ReLU.
pub(crate) fn build_cifar<T: Scalar>(net: &mut Net<T>, spec: &ModelSpec) -> Result<Built> {
    let bottleneck = spec.family == Family::Resnet164;
    let image = net.input("image", 3, 32, 32)?;
    let x = net.with_role(Role::Stem, |n| -> Result<Var> {
        let c = n.conv2d("stem.conv", image, 16, 3, 1, 1)?;
        n.bn_relu("stem.bn", c)
    })?;
    let stages = Stages {
        spec,
        widths: &[16, 32, 64],
        expansion: if bottleneck { 4 } else { 1 },
        bottleneck,
        postact: false,
    };
    let (x, h, rla_stages) = run_stages(net, x, &stages)?;
    let x = net.with_role(Role::Head, |n| n.bn_relu("final.bn", x))?;
    let logits = head(net, x, h, spec.classes())?;
    Ok(Built {
        input: image.id,
        logits,
        shared: shared_of(&rla_stages, spec.rla()),
        rla_convs: rla_stages.into_iter().map(|s| s.convs).collect(),
    })
}

/// ImageNet ResNet-50 layout (7x7/2 stem, 3x3/2 max pool, bottleneck stages
/// 3-4-6-3). Construction and counting only.
pub(crate) fn build_imagenet<T: Scalar>(net: &mut Net<T>, spec: &ModelSpec) -> Result<Built> {
    let image = net.input("image", 3, 224, 224)?;
    let x = net.with_role(Role::Stem, |n| -> Result<Var> {
        let c = n.conv2d("stem.conv", image, 64, 7, 2, 3)?;
        let a = n.bn_relu("stem.bn", c)?;
        n.maxpool("stem.pool", a, 3, 2, 1)
    })?;
    let stages = Stages {
        spec,
        widths: &[64, 128, 256, 512],
        expansion: 4,
        bottleneck: true,
        postact: true,
    };
    let (x, h, rla_stages) = run_stages(net, x, &stages)?;
    let logits = head(net, x, h, spec.classes())?;
    Ok(Built {
        input: image.id,
        logits,
        shared: shared_of(&rla_stages, spec.rla()),
        rla_convs: rla_stages.into_iter().map(|s| s.convs).collect(),
    })
}
