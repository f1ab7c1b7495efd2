//! Recurrent layer aggregation: a small convolutional recurrence that runs
//! alongside the backbone and carries a `k`-channel summary `h` of every
//! block's residual output.
//!
//! Per block (default wiring):
//!
//! ```text
//! y  = block(concat(h, x))      x' = shortcut(x) + y
//! h' = g2(tanh(BN(g1(y) + h)))
//! ```
//!
//! `g1` is a 1x1 conv `C_out -> k`, `g2` a 3x3 conv `k -> k`; both are shared
//! across the blocks of a stage, the BN is per block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Init, Net, Role, Var};
use crate::params::{ParamId, ParamKind};
use crate::tensor::{Scalar, Shape};

/// What the recurrence reads from the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Residual branch output `y`.
    Residual,
    /// Block output `x' = shortcut + y`.
    Output,
    /// Shortcut branch (identity or projection of `x`).
    Shortcut,
}

/// Where the new information enters the recurrent unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    /// `h' = R(g1(tap) + h)`.
    AddThenRecurrent,
    /// `h' = R(h) + g1(tap)`.
    RecurrentThenAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
    ];

    pub fn tap(self) -> Tap {
        match self {
            Variant::V1 | Variant::V2 => Tap::Residual,
            Variant::V3 | Variant::V4 => Tap::Output,
            Variant::V5 | Variant::V6 => Tap::Shortcut,
        }
    }

    pub fn merge(self) -> Merge {
        match self {
            Variant::V1 | Variant::V3 | Variant::V5 => Merge::AddThenRecurrent,
            Variant::V2 | Variant::V4 | Variant::V6 => Merge::RecurrentThenAdd,
        }
    }

    pub fn from_parts(tap: Tap, merge: Merge) -> Variant {
        *Variant::ALL
            .iter()
            .find(|v| v.tap() == tap && v.merge() == merge)
            .expect("every (tap, merge) pair has a variant")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Variant::ALL.iter().position(|v| v == self).unwrap() + 1;
        write!(f, "v{i}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let i: usize = s
            .trim()
            .trim_start_matches(['v', 'V'])
            .parse()
            .map_err(|_| Error::InvalidSpec(format!("unknown RLA variant `{s}`")))?;
        Variant::ALL
            .get(i.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::InvalidSpec(format!("unknown RLA variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationOrder {
    /// BN-tanh-Conv.
    PreAct,
    /// Conv-BN-tanh.
    PostAct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Shared,
    Unshared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlaConfig {
    pub k: usize,
    pub variant: Variant,
    pub activation_order: ActivationOrder,
    pub sharing: Sharing,
    /// Drop BN and tanh from the recurrent unit.
    pub linear_mode: bool,
    /// Feed `h` into the blocks. When false the recurrence only observes the
    /// backbone and is read by the classifier head.
    pub exchange: bool,
}

impl Default for RlaConfig {
    fn default() -> Self {
        RlaConfig {
            k: 12,
            variant: Variant::V1,
            activation_order: ActivationOrder::PreAct,
            sharing: Sharing::Shared,
            linear_mode: false,
            exchange: true,
        }
    }
}

impl RlaConfig {
    pub fn with_k(k: usize) -> Self {
        RlaConfig {
            k,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidSpec("RLA channel k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-stage recurrence state during graph construction.
#[derive(Clone, Debug)]
pub struct RlaStage {
    /// 1-based stage number.
    pub index: usize,
    pub k: usize,
    g1: Option<ParamId>,
    g2: Option<ParamId>,
    blocks: usize,
    /// `(g1, g2)` buffers of every block, in block order.
    pub convs: Vec<(ParamId, ParamId)>,
}

impl RlaStage {
    pub fn new(index: usize, k: usize) -> Self {
        RlaStage {
            index,
            k,
            g1: None,
            g2: None,
            blocks: 0,
            convs: Vec::new(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn shared_g1(&self) -> Option<ParamId> {
        self.g1
    }

    pub fn shared_g2(&self) -> Option<ParamId> {
        self.g2
    }

    fn err(&self, detail: String) -> Error {
        Error::Aggregation {
            stage: self.index,
            block: self.blocks + 1,
            detail,
        }
    }
}

/// What a backbone block hands back to the recurrence.
#[derive(Clone, Copy, Debug)]
pub struct BlockOut {
    /// Residual branch `y`.
    pub residual: Var,
    /// Shortcut branch, `x` itself or its projection.
    pub shortcut: Var,
}

/// Conv weight site `name`: a fresh buffer for the first block of a shared
/// stage (or every block when unshared), otherwise another site of it.
fn conv_site<T: Scalar>(
    net: &mut Net<T>,
    name: &str,
    shape: Shape,
    shared: Option<ParamId>,
) -> Result<Var> {
    match shared {
        Some(id) => net.shared_param(name, id),
        None => net.param(name, ParamKind::Weight, shape, Init::HeNormal),
    }
}

/// `R(u)`: the recurrent transform with its per-block BN.
fn recurrent<T: Scalar>(net: &mut Net<T>, u: Var, g2: Var, cfg: &RlaConfig) -> Result<Var> {
    if cfg.linear_mode {
        return net.conv("g2", u, g2, 1, 1);
    }
    match cfg.activation_order {
        ActivationOrder::PreAct => {
            let b = net.batchnorm("bn", u)?;
            let t = net.tanh("tanh", b)?;
            net.conv("g2", t, g2, 1, 1)
        }
        ActivationOrder::PostAct => {
            let c = net.conv("g2", u, g2, 1, 1)?;
            let b = net.batchnorm("bn", c)?;
            net.tanh("tanh", b)
        }
    }
}

/// Build one backbone block wrapped by the recurrence, under the caller's
/// current scope. `block` receives the block input (`concat(h, x)`, or `x`
/// without exchange) and `x` itself, and returns its residual and shortcut
/// branches.
pub fn rla_block_forward<T: Scalar>(
    net: &mut Net<T>,
    x_prev: Var,
    h_prev: Var,
    stage: &mut RlaStage,
    cfg: &RlaConfig,
    block: impl FnOnce(&mut Net<T>, Var, Var) -> Result<BlockOut>,
) -> Result<(Var, Var)> {
    let entry = stage.blocks == 0;
    if h_prev.channels() != stage.k && !entry {
        return Err(stage.err(format!(
            "h has {} channels, expected k={}",
            h_prev.channels(),
            stage.k
        )));
    }
    let (xs, hs) = (x_prev.shape, h_prev.shape);
    if (xs.h(), xs.w()) != (hs.h(), hs.w()) {
        return Err(stage.err(format!(
            "h is {}x{} but x is {}x{}",
            hs.h(),
            hs.w(),
            xs.h(),
            xs.w()
        )));
    }

    let input = if cfg.exchange {
        net.with_role(Role::Main, |n| n.concat("rla.concat", &[h_prev, x_prev]))?
    } else {
        x_prev
    };
    let out = block(net, input, x_prev)?;
    let x_next = net.add("add", out.shortcut, out.residual)?;

    net.with_role(Role::Aggregation, |net| {
        net.scoped("rla", |net| {
            let (ys, ns) = (out.residual.shape, x_next.shape);
            let h_in = if (ns.h(), ns.w()) != (hs.h(), hs.w()) || hs.c() != stage.k {
                rla_stage_transition(net, h_prev, stage, (ns.h(), ns.w()))?
            } else {
                h_prev
            };
            let tap = match cfg.variant.tap() {
                Tap::Residual => out.residual,
                Tap::Output => x_next,
                Tap::Shortcut => out.shortcut,
            };
            debug_assert_eq!(tap.channels(), ys.c());
            let shared = cfg.sharing == Sharing::Shared;
            let w1 = conv_site(
                net,
                "g1.weight",
                Shape::new(stage.k, tap.channels(), 1, 1),
                if shared { stage.g1 } else { None },
            )?;
            let w2 = conv_site(
                net,
                "g2.weight",
                Shape::new(stage.k, stage.k, 3, 3),
                if shared { stage.g2 } else { None },
            )?;
            let (id1, id2) = (net.param_id(w1).unwrap(), net.param_id(w2).unwrap());
            if net.store().shape(id1).c() != tap.channels() {
                return Err(stage.err(format!(
                    "shared g1 expects {} channels, tap has {}",
                    net.store().shape(id1).c(),
                    tap.channels()
                )));
            }
            if shared {
                stage.g1 = Some(id1);
                stage.g2 = Some(id2);
            }
            stage.convs.push((id1, id2));

            let g1 = net.conv("g1", tap, w1, 1, 0)?;
            let h_next = match cfg.variant.merge() {
                Merge::AddThenRecurrent => {
                    let u = net.add("merge", g1, h_in)?;
                    recurrent(net, u, w2, cfg)?
                }
                Merge::RecurrentThenAdd => {
                    let r = recurrent(net, h_in, w2, cfg)?;
                    net.add("merge", r, g1)?
                }
            };
            stage.blocks += 1;
            Ok((x_next, h_next))
        })
    })
}

/// Carry `h` into a stage at half the resolution: 2x2 average pool, then a
/// 1x1 projection if the stage's `k` differs from `h`'s channels.
pub fn rla_stage_transition<T: Scalar>(
    net: &mut Net<T>,
    h: Var,
    next: &RlaStage,
    target: (usize, usize),
) -> Result<Var> {
    let s = h.shape;
    if (s.h(), s.w()) != (2 * target.0, 2 * target.1) {
        return Err(Error::Aggregation {
            stage: next.index,
            block: next.blocks + 1,
            detail: format!(
                "cannot carry h from {}x{} to {}x{}: only halving is supported",
                s.h(),
                s.w(),
                target.0,
                target.1
            ),
        });
    }
    let pooled = net.avgpool("pool", h, 2, 2)?;
    if pooled.channels() == next.k {
        return Ok(pooled);
    }
    net.conv2d("proj", pooled, next.k, 1, 1, 0)
}

/// Classifier over `concat(x, h)`: global average pool and a linear layer.
pub fn rla_head<T: Scalar>(net: &mut Net<T>, x: Var, h: Var, classes: usize) -> Result<Var> {
    net.with_role(Role::Head, |net| {
        let cat = net.concat("head.concat", &[x, h])?;
        let pooled = net.global_avgpool("head.pool", cat)?;
        net.linear("fc", pooled, classes)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_cover_every_wiring_once() {
        let mut pairs: Vec<(Tap, Merge)> = Variant::ALL.iter().map(|v| (v.tap(), v.merge())).collect();
        pairs.dedup();
        assert_eq!(pairs.len(), 6);
        for v in Variant::ALL {
            assert_eq!(Variant::from_parts(v.tap(), v.merge()), v);
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::V1.tap(), Tap::Residual);
        assert_eq!(Variant::V1.merge(), Merge::AddThenRecurrent);
        assert!("v7".parse::<Variant>().is_err());
        assert!("v0".parse::<Variant>().is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RlaConfig {
            k: 8,
            variant: Variant::V4,
            activation_order: ActivationOrder::PostAct,
            ..Default::default()
        };
        let s = toml::to_string(&cfg).unwrap();
        assert!(s.contains("variant = \"v4\""), "{s}");
        let back: RlaConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: RlaConfig = toml::from_str("k = 4").unwrap();
        assert_eq!(partial, RlaConfig::with_k(4));
    }
}
