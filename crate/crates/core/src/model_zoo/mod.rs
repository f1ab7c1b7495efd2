//! Declarative builders for the CIFAR ResNets, DenseNet-BC-100 and the
//! ImageNet ResNet-50 shape, each with optional layer aggregation.

mod densenet;
pub mod golden;
mod resnet;

pub use resnet::rla_bottleneck_blocks;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::RlaConfig;
use crate::error::{Error, Result};
use crate::exec::{Feeds, Mode, Session};
use crate::graph::{Graph, Net, NodeId, Op, Role, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet110,
    Resnet164,
    DensenetBc100,
    /// ImageNet ResNet-50, for construction and counting only.
    Resnet50Shape,
}

impl Family {
    pub fn is_cifar(self) -> bool {
        !matches!(self, Family::Resnet50Shape)
    }

    pub fn default_classes(self) -> usize {
        if self.is_cifar() {
            10
        } else {
            1000
        }
    }

    pub fn input_resolution(self) -> usize {
        if self.is_cifar() {
            32
        } else {
            224
        }
    }

    /// Blocks (or dense layers) per stage.
    pub fn default_blocks(self) -> Vec<usize> {
        match self {
            Family::Resnet110 | Family::Resnet164 => vec![18; 3],
            Family::DensenetBc100 => vec![16; 3],
            Family::Resnet50Shape => vec![3, 4, 6, 3],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Resnet110 => "resnet110",
            Family::Resnet164 => "resnet164",
            Family::DensenetBc100 => "densenet_bc100",
            Family::Resnet50Shape => "resnet50_shape",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "resnet110" | "resnet_110" => Ok(Family::Resnet110),
            "resnet164" | "resnet_164" => Ok(Family::Resnet164),
            "densenet_bc100" | "densenet_bc_100" | "densenet100" | "densenet" => {
                Ok(Family::DensenetBc100)
            }
            "resnet50_shape" | "resnet50" | "resnet_50" => Ok(Family::Resnet50Shape),
            _ => Err(Error::InvalidSpec(format!("unknown model family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain backbone. For DenseNet this is ordinary dense connectivity.
    #[default]
    None,
    Rla(RlaConfig),
    Dense,
    SharedLag,
    SharedOrdinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Defaults to 10 for CIFAR families and 1000 for ResNet-50.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Override for blocks (dense layers) per stage.
    #[serde(default)]
    pub blocks: Option<usize>,
}

/// One stage of a built model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub blocks: usize,
    /// Output channels of the stage (before any transition).
    pub channels: usize,
    pub resolution: usize,
}

impl ModelSpec {
    pub fn new(family: Family, aggregation: Aggregation) -> Self {
        ModelSpec {
            family,
            aggregation,
            classes: None,
            blocks: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes.unwrap_or(self.family.default_classes())
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = Some(classes);
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = Some(blocks);
        self
    }

    pub fn blocks_per_stage(&self) -> Vec<usize> {
        let d = self.family.default_blocks();
        match self.blocks {
            Some(b) => vec![b; d.len()],
            None => d,
        }
    }

    pub fn rla(&self) -> Option<&RlaConfig> {
        match &self.aggregation {
            Aggregation::Rla(c) => Some(c),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() == 0 {
            return Err(Error::InvalidSpec("classes must be >= 1".into()));
        }
        if self.blocks == Some(0) {
            return Err(Error::InvalidSpec("blocks per stage must be >= 1".into()));
        }
        let dense_family = self.family == Family::DensenetBc100;
        match (&self.aggregation, dense_family) {
            (Aggregation::Rla(cfg), false) => cfg.validate(),
            (Aggregation::None, _) => Ok(()),
            (Aggregation::Dense | Aggregation::SharedLag | Aggregation::SharedOrdinal, true) => {
                Ok(())
            }
            (agg, _) => Err(Error::InvalidSpec(format!(
                "aggregation {} is not defined for {}",
                aggregation_name(agg),
                self.family
            ))),
        }
    }

    /// `(blocks, output channels, resolution)` per stage.
    pub fn stage_plan(&self) -> Vec<StagePlan> {
        let blocks = self.blocks_per_stage();
        let res = self.family.input_resolution();
        match self.family {
            Family::Resnet110 | Family::Resnet164 => {
                let e = if self.family == Family::Resnet164 { 4 } else { 1 };
                [16, 32, 64]
                    .iter()
                    .zip(&blocks)
                    .enumerate()
                    .map(|(i, (&w, &b))| StagePlan {
                        blocks: b,
                        channels: w * e,
                        resolution: res >> i,
                    })
                    .collect()
            }
            Family::DensenetBc100 => {
                let mut c = densenet::STEM_INPUT;
                let mut out = Vec::new();
                for (i, &b) in blocks.iter().enumerate() {
                    let end = c + b * densenet::GROWTH;
                    out.push(StagePlan {
                        blocks: b,
                        channels: end,
                        resolution: res >> i,
                    });
                    c = end / 2;
                }
                out
            }
            Family::Resnet50Shape => [64, 128, 256, 512]
                .iter()
                .zip(&blocks)
                .enumerate()
                .map(|(i, (&w, &b))| StagePlan {
                    blocks: b,
                    channels: w * 4,
                    resolution: (res / 4) >> i,
                })
                .collect(),
        }
    }

    /// Short human-readable model name, e.g. `rla-resnet164(k=12,v1)`.
    pub fn label(&self) -> String {
        let base = self.family.to_string();
        match &self.aggregation {
            Aggregation::None => base,
            Aggregation::Rla(c) => format!("rla-{base}(k={},{})", c.k, c.variant),
            agg => format!("{}-{base}", aggregation_name(agg)),
        }
    }
}

fn aggregation_name(a: &Aggregation) -> &'static str {
    match a {
        Aggregation::None => "none",
        Aggregation::Rla(_) => "rla",
        Aggregation::Dense => "dense",
        Aggregation::SharedLag => "shared_lag",
        Aggregation::SharedOrdinal => "shared_ordinal",
    }
}

/// What a shared 1x1/3x3 conv buffer is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedKind {
    Lag,
    Ordinal,
    RlaG1,
    RlaG2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedConv {
    /// 1-based stage (dense block) number.
    pub stage: usize,
    /// Lag or ordinal index (1-based); 1 for the RLA pair.
    pub index: usize,
    pub kind: SharedKind,
    pub param: ParamId,
}

/// A built network: graph, parameters and the handles needed to run it.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub store: ParamStore<T>,
    pub input: NodeId,
    pub logits: NodeId,
    pub loss: NodeId,
    /// Shared aggregation convs, stage by stage.
    pub shared: Vec<SharedConv>,
    /// RLA `(g1, g2)` buffers per stage and block (empty without RLA).
    pub rla_convs: Vec<Vec<(ParamId, ParamId)>>,
}

pub(crate) struct Built {
    pub input: NodeId,
    pub logits: Var,
    pub shared: Vec<SharedConv>,
    pub rla_convs: Vec<Vec<(ParamId, ParamId)>>,
}

/// Build `spec` with parameters initialised from `seed`: He-normal convs,
/// BN `gamma = 1, beta = 0`, classifier bias zero.
pub fn build<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut net = Net::<T>::new(seed);
    let built = match spec.family {
        Family::Resnet110 | Family::Resnet164 => resnet::build_cifar(&mut net, spec)?,
        Family::Resnet50Shape => resnet::build_imagenet(&mut net, spec)?,
        Family::DensenetBc100 => densenet::build(&mut net, spec)?,
    };
    let loss = net.with_role(Role::Loss, |n| n.softmax_xent("loss", built.logits))?;
    let (graph, store) = net.finish();
    Ok(Model {
        spec: spec.clone(),
        graph,
        store,
        input: built.input,
        logits: built.logits.id,
        loss: loss.id,
        shared: built.shared,
        rla_convs: built.rla_convs,
    })
}

impl<T: Scalar> Model<T> {
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Logits `(N, classes, 1, 1)` for a batch of images.
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let feeds = Feeds::new().input(self.input, images.clone());
        let mut sess = Session::new(&self.graph, mode);
        sess.forward(&mut self.store, &feeds, &[self.logits])?;
        Ok(sess.value(self.logits).expect("computed").clone())
    }

    /// Re-point parameter site `site` at a private copy of its buffer,
    /// splitting it out of its share-group. Used for fault injection.
    pub fn split_share(&mut self, site: &str) -> Result<ParamId> {
        let id = self.store.detach(site)?;
        let node = self
            .graph
            .find(site)
            .ok_or_else(|| Error::UnknownParam(site.to_string()))?;
        self.graph.rebind_param(node, id);
        Ok(id)
    }
}

/// Weighted layers on the main path: convolutions of the stem, blocks and
/// transitions plus classifier layers. Projection shortcuts and the
/// aggregation convs are not counted.
pub fn depth(graph: &Graph) -> usize {
    graph
        .nodes()
        .iter()
        .filter(|n| match n.op {
            Op::Conv2d { .. } => matches!(n.role, Role::Stem | Role::Main | Role::Transition),
            Op::Linear => true,
            _ => false,
        })
        .count()
}

/// Main-path convolutions whose input is not `ReLU(BN(.))`, excluding the
/// stem. Empty for every pre-activated model.
pub fn preactivation_violations(graph: &Graph) -> Vec<String> {
    let mut bad = Vec::new();
    for node in graph.nodes() {
        if !matches!(node.op, Op::Conv2d { .. }) || !matches!(node.role, Role::Main | Role::Transition) {
            continue;
        }
        let src = graph.node(node.inputs[0]);
        let ok = matches!(src.op, Op::Relu)
            && matches!(graph.node(src.inputs[0]).op, Op::BatchNorm2d { .. });
        if !ok {
            bad.push(node.name.clone());
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Variant;

    #[test]
    fn spec_toml_roundtrip() {
        let spec = ModelSpec::new(
            Family::Resnet164,
            Aggregation::Rla(RlaConfig {
                variant: Variant::V3,
                ..RlaConfig::with_k(16)
            }),
        )
        .with_blocks(3);
        let s = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let parsed: ModelSpec = toml::from_str(
            "family = \"resnet110\"\n[aggregation]\ntype = \"rla\"\nk = 4\n",
        )
        .unwrap();
        assert_eq!(parsed.rla().unwrap().k, 4);
        assert_eq!(parsed.classes(), 10);
        assert!(toml::from_str::<ModelSpec>("family = \"resnet110\"\ndepth = 3\n").is_err());
    }

    #[test]
    fn invalid_combinations_rejected() {
        for (family, agg) in [
            (Family::Resnet164, Aggregation::SharedLag),
            (Family::Resnet110, Aggregation::Dense),
            (Family::DensenetBc100, Aggregation::Rla(RlaConfig::default())),
            (Family::Resnet164, Aggregation::Rla(RlaConfig::with_k(0))),
        ] {
            let spec = ModelSpec::new(family, agg);
            assert!(matches!(build::<f32>(&spec, 0), Err(Error::InvalidSpec(_))), "{spec:?}");
        }
        assert!(ModelSpec::new(Family::Resnet110, Aggregation::None).with_blocks(0).validate().is_err());
    }

    #[test]
    fn family_names_parse() {
        for f in [Family::Resnet110, Family::Resnet164, Family::DensenetBc100, Family::Resnet50Shape] {
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
        }
        assert!("vgg16".parse::<Family>().is_err());
    }

    fn count(spec: ModelSpec) -> usize {
        build::<f32>(&spec, 0).unwrap().param_count()
    }

    fn rla_spec(family: Family, k: usize) -> ModelSpec {
        ModelSpec::new(family, Aggregation::Rla(RlaConfig::with_k(k)))
    }

    #[test]
    fn exact_parameter_counts() {
        assert_eq!(count(ModelSpec::new(Family::Resnet110, Aggregation::None)), 1_730_554);
        assert_eq!(count(ModelSpec::new(Family::Resnet164, Aggregation::None)), 1_703_290);
        assert_eq!(count(rla_spec(Family::Resnet164, 12)), 1_739_458);
        assert_eq!(count(rla_spec(Family::Resnet110, 4)), 1_804_914);
        assert_eq!(count(ModelSpec::new(Family::DensenetBc100, Aggregation::SharedLag)), 591_623);
        assert_eq!(
            count(ModelSpec::new(Family::DensenetBc100, Aggregation::SharedOrdinal)),
            591_623
        );
        assert_eq!(count(ModelSpec::new(Family::DensenetBc100, Aggregation::Dense)), 773_063);
        assert_eq!(count(ModelSpec::new(Family::Resnet50Shape, Aggregation::None)), 25_557_032);
    }

    #[test]
    fn depth_matches_name() {
        for (spec, d) in [
            (ModelSpec::new(Family::Resnet110, Aggregation::None), 110),
            (rla_spec(Family::Resnet164, 12), 164),
            (ModelSpec::new(Family::DensenetBc100, Aggregation::SharedLag), 100),
            (ModelSpec::new(Family::Resnet50Shape, Aggregation::None), 50),
        ] {
            let m = build::<f32>(&spec, 0).unwrap();
            assert_eq!(depth(&m.graph), d, "{}", spec.label());
        }
    }

    #[test]
    fn cifar_models_match_reference_tables() {
        for spec in [
            ModelSpec::new(Family::Resnet110, Aggregation::None),
            rla_spec(Family::Resnet110, 4),
            rla_spec(Family::Resnet164, 12),
            ModelSpec::new(Family::DensenetBc100, Aggregation::Dense),
            ModelSpec::new(Family::DensenetBc100, Aggregation::SharedOrdinal),
        ] {
            let m = build::<f32>(&spec, 0).unwrap();
            if let Err(e) = golden::check_architecture(&m) {
                panic!("{}: {e:?}", spec.label());
            }
            assert!(preactivation_violations(&m.graph).is_empty(), "{}", spec.label());
        }
    }

    #[test]
    fn shared_groups_cover_blocks() {
        let m = build::<f32>(&rla_spec(Family::Resnet164, 12), 0).unwrap();
        assert_eq!(m.shared.len(), 6);
        for (stage, convs) in m.rla_convs.iter().enumerate() {
            assert_eq!(convs.len(), 18);
            assert!(convs.iter().all(|c| *c == convs[0]), "stage {}", stage + 1);
        }
        let d = build::<f32>(&ModelSpec::new(Family::DensenetBc100, Aggregation::SharedLag), 0).unwrap();
        assert_eq!(d.shared.len(), 45);
    }

    #[test]
    fn small_models_run_forward() {
        let images = Tensor::<f32>::full(crate::tensor::Shape::new(2, 3, 32, 32), 0.5);
        for spec in [
            rla_spec(Family::Resnet164, 4).with_blocks(1),
            ModelSpec::new(Family::DensenetBc100, Aggregation::SharedLag).with_blocks(2),
            ModelSpec::new(Family::Resnet110, Aggregation::None).with_blocks(1).with_classes(100),
        ] {
            let mut m = build::<f32>(&spec, 1).unwrap();
            let out = m.forward(&images, Mode::Train).unwrap();
            assert_eq!(out.shape().0, [2, spec.classes(), 1, 1]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn golden_targets_resolve() {
        let t = golden::param_target(&ModelSpec::new(Family::Resnet110, Aggregation::None).with_classes(10))
            .unwrap();
        assert_eq!(t.millions, 1.73);
        assert!(golden::param_target(&rla_spec(Family::Resnet110, 12)).is_none());
        assert_eq!(golden::param_targets().len(), 21);
        assert_eq!(golden::param_targets().iter().filter(|t| t.gated).count(), 16);
    }
}
