use crate::aggregation::{dense_layer_forward, DenseBuffer, DenseLayerDims, DenseMode, SharedBank};
use crate::error::Result;
use crate::graph::{Net, Role, Var};
use crate::tensor::Scalar;

use super::{Aggregation, Built, ModelSpec, SharedConv, SharedKind};

pub(crate) const GROWTH: usize = 12;
/// Channels of the first block input: the image next to a `2 * growth`
/// channel stem conv.
pub(crate) const STEM_INPUT: usize = 3 + 2 * GROWTH;

/// DenseNet-BC-100 (growth 12, bottleneck 4x, compression 0.5) with dense,
/// lag-shared or ordinal-shared 1x1 bottleneck convs.
pub(crate) fn build<T: Scalar>(net: &mut Net<T>, spec: &ModelSpec) -> Result<Built> {
    let mode = match spec.aggregation {
        Aggregation::SharedLag => DenseMode::ByLag,
        Aggregation::SharedOrdinal => DenseMode::ByOrdinal,
        _ => DenseMode::DenseUnshared,
    };
    let dims = DenseLayerDims {
        growth: GROWTH,
        bottleneck: 4 * GROWTH,
    };
    let image = net.input("image", 3, 32, 32)?;
    let mut x0 = net.with_role(Role::Stem, |n| -> Result<Var> {
        let c = n.conv2d("stem.conv", image, 2 * GROWTH, 3, 1, 1)?;
        n.concat("stem.concat", &[image, c])
    })?;
    let layers = spec.blocks_per_stage();
    let mut shared = Vec::new();
    let mut out = x0;
    for (b, &count) in layers.iter().enumerate() {
        let mut buf = DenseBuffer::new(mode, x0);
        let bank_name = format!("block{}.shared_conv1", b + 1);
        let mut bank = SharedBank::new(count.saturating_sub(1), GROWTH, dims.bottleneck);
        for t in 1..=count {
            net.scoped(&format!("block{}.layer{t}", b + 1), |n| {
                dense_layer_forward(n, &mut buf, &mut bank, &bank_name, dims)
            })?;
        }
        let kind = if mode == DenseMode::ByLag {
            SharedKind::Lag
        } else {
            SharedKind::Ordinal
        };
        shared.extend(bank.convs().iter().enumerate().map(|(i, &param)| SharedConv {
            stage: b + 1,
            index: i + 1,
            kind,
            param,
        }));
        out = buf.concat(net, &format!("block{}.concat", b + 1))?;
        if b + 1 < layers.len() {
            x0 = net.with_role(Role::Transition, |n| {
                n.scoped(&format!("trans{}", b + 1), |n| -> Result<Var> {
                    let a = n.bn_relu("bn", out)?;
                    let c = n.conv2d("conv", a, out.channels() / 2, 1, 1, 0)?;
                    n.avgpool("pool", c, 2, 2)
                })
            })?;
        }
    }
    let logits = net.with_role(Role::Head, |n| -> Result<Var> {
        let a = n.bn_relu("final.bn", out)?;
        let p = n.global_avgpool("head.pool", a)?;
        n.linear("fc", p, spec.classes())
    })?;
    Ok(Built {
        input: image.id,
        logits,
        shared,
        rla_convs: Vec::new(),
    })
}
