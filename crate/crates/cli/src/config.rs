use std::fs;
use std::path::{Path, PathBuf};

use rla_core::aggregation::{ActivationOrder, RlaConfig, Sharing, Variant};
use rla_core::model_zoo::{Aggregation, Family, ModelSpec};
use rla_core::training::{RunConfig, TrainConfig};
use serde::Deserialize;

use crate::args::{ModelArgs, TrainArgs};
use crate::error::CliError;

pub const DATA_ENV: &str = "RLA_CIFAR10_DIR";

/// Config file layout: a full run config, every table optional.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelSpec>,
    train: Option<TrainConfig>,
    data: Option<PathBuf>,
}

fn read_file(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// `[aggregation-]family`, e.g. `rla-resnet164`, `shared-lag-densenet_bc100`.
pub fn parse_model_name(name: &str) -> Result<(Family, Aggregation), CliError> {
    let lower = name.trim().to_ascii_lowercase().replace('_', "-");
    let prefixes: [(&str, Aggregation); 5] = [
        ("rla-", Aggregation::Rla(RlaConfig::default())),
        ("shared-lag-", Aggregation::SharedLag),
        ("shared-ordinal-", Aggregation::SharedOrdinal),
        ("dense-", Aggregation::Dense),
        ("plain-", Aggregation::None),
    ];
    let (agg, rest) = prefixes
        .iter()
        .find_map(|(p, a)| lower.strip_prefix(p).map(|r| (*a, r)))
        .unwrap_or((Aggregation::None, lower.as_str()));
    let family: Family = rest.parse().map_err(|e: rla_core::Error| CliError::Usage(e.to_string()))?;
    Ok((family, agg))
}

fn apply_model_flags(mut spec: Option<ModelSpec>, a: &ModelArgs) -> Result<ModelSpec, CliError> {
    if let Some(name) = &a.model {
        let (family, agg) = parse_model_name(name)?;
        let keep_rla = match (spec.as_ref().map(|s| &s.aggregation), &agg) {
            (Some(Aggregation::Rla(old)), Aggregation::Rla(_)) => Some(*old),
            _ => None,
        };
        let agg = keep_rla.map(Aggregation::Rla).unwrap_or(agg);
        spec = Some(match spec {
            Some(s) => ModelSpec {
                family,
                aggregation: agg,
                ..s
            },
            None => ModelSpec::new(family, agg),
        });
    }
    let mut spec = spec.ok_or_else(|| CliError::Usage("no model given: pass --model or --config".into()))?;
    let rla_flags = a.k.is_some() || a.variant.is_some() || a.unshared || a.post_act || a.no_exchange || a.linear;
    match &mut spec.aggregation {
        Aggregation::Rla(cfg) => {
            if let Some(k) = a.k {
                cfg.k = k;
            }
            if let Some(v) = &a.variant {
                cfg.variant = v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
            }
            if a.unshared {
                cfg.sharing = Sharing::Unshared;
            }
            if a.post_act {
                cfg.activation_order = ActivationOrder::PostAct;
            }
            if a.no_exchange {
                cfg.exchange = false;
            }
            if a.linear {
                cfg.linear_mode = true;
            }
        }
        _ if rla_flags => {
            return Err(CliError::Usage(format!(
                "RLA options given for non-RLA model {}",
                spec.label()
            )))
        }
        _ => {}
    }
    if a.classes.is_some() {
        spec.classes = a.classes;
    }
    if a.blocks.is_some() {
        spec.blocks = a.blocks;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn resolve_model(a: &ModelArgs) -> Result<ModelSpec, CliError> {
    let file = read_file(a.config.as_deref())?;
    apply_model_flags(file.model, a)
}

/// Full run config: the file's `[train]` table (or the desk or default
/// recipe), then flag overrides.
pub fn resolve_run(m: &ModelArgs, t: &TrainArgs) -> Result<RunConfig, CliError> {
    let file = read_file(m.config.as_deref())?;
    let model = apply_model_flags(file.model, m)?;
    let mut train = match (file.train, t.desk) {
        (Some(_), true) => {
            return Err(CliError::Usage("--desk conflicts with the config's [train] table".into()))
        }
        (Some(cfg), false) => cfg,
        (None, true) => TrainConfig::desk(),
        (None, false) => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = t.$field.clone() { train.$field = v; })*};
    }
    set!(epochs, batch, lr, milestones, train_size, val_size, seed);
    if t.no_augment {
        train.augment = false;
    }
    train.validate()?;
    let data = t
        .data
        .clone()
        .or(file.data)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from));
    Ok(RunConfig { model, train, data })
}

/// `--data`, else `RLA_CIFAR10_DIR`.
pub fn data_dir(flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or(CliError::MissingData)
}
