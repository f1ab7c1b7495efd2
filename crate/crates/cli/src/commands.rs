use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rla_core::analysis::{count_macs, extract_shared_norms, fit_exponential, norms_csv};
use rla_core::model_zoo::golden::param_target;
use rla_core::model_zoo::{build, depth, Model, ModelSpec};
use rla_core::timeseries::{
    arma_ar_coefficients, arma_impulse_response, recurrence_expand, ArmaParams, RecurrenceParams,
};
use rla_core::training::{checkpoint, evaluate, load_cifar10, load_cifar10_test, log_csv, Normalization, RunConfig};
use rla_core::verify::{run_suite, Suite, VerifyOptions};
use serde::Serialize;

use crate::args::{EvalSplit, ModelArgs, SuiteArg, TrainArgs, TsKind};
use crate::config::{data_dir, resolve_model, resolve_run};
use crate::error::CliError;

/// Print the resolved configuration to stderr so stdout stays parseable.
fn echo<S: Serialize>(what: &S) -> Result<(), CliError> {
    let text = toml::to_string(what).map_err(|e| CliError::Usage(format!("cannot render config: {e}")))?;
    eprintln!("# resolved config\n{}", text.trim_end());
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Shortest decimal form of `v` at 12 significant digits.
pub fn fmt_num(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[derive(Serialize)]
struct BuildEcho<'a> {
    model: &'a ModelSpec,
    seed: u64,
}

pub fn build_cmd(args: &ModelArgs, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let spec = resolve_model(args)?;
    let seed = seed.unwrap_or(0);
    echo(&BuildEcho { model: &spec, seed })?;
    let model = build::<f32>(&spec, seed)?;
    println!("model: {}", spec.label());
    println!("depth: {}", depth(&model.graph));
    println!("params: {}", model.param_count());
    for (i, st) in spec.stage_plan().iter().enumerate() {
        println!(
            "stage {}: {} blocks, {} channels, {}x{}",
            i + 1,
            st.blocks,
            st.channels,
            st.resolution,
            st.resolution
        );
    }
    if let Some(path) = out {
        let config = serde_json::json!({ "model": spec, "seed": seed });
        checkpoint::save(path, &model, None, config)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct CountEcho<'a> {
    model: &'a ModelSpec,
    resolution: usize,
}

pub fn count_cmd(args: &ModelArgs, resolution: Option<usize>, csv: Option<&Path>, golden: bool) -> Result<(), CliError> {
    let spec = resolve_model(args)?;
    let resolution = resolution.unwrap_or(spec.family.input_resolution());
    echo(&CountEcho {
        model: &spec,
        resolution,
    })?;
    let model = build::<f32>(&spec, 0)?;
    let stats = count_macs(&model, resolution)?;
    println!("model: {}", spec.label());
    println!("params: {} ({:.2}M)", stats.total_params, stats.total_params as f64 / 1e6);
    println!("macs: {} at {resolution}x{resolution}", stats.total_macs);
    println!("elementwise: {}", stats.total_elementwise);
    if let Some(path) = csv {
        write_file(path, stats.to_csv())?;
    }
    if golden {
        let target = param_target(&spec)
            .ok_or_else(|| CliError::Failed(format!("no published parameter count for {}", spec.label())))?;
        let ok = target.accepts(stats.total_params);
        println!(
            "golden: {} {}M {} -> {}{}",
            target.name,
            target.millions,
            target.tolerance,
            if ok { "ok" } else { "MISS" },
            if target.gated { "" } else { " (informational)" }
        );
        if !ok {
            return Err(CliError::Failed(format!(
                "{} has {} parameters, published {}M {}",
                spec.label(),
                stats.total_params,
                target.millions,
                target.tolerance
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyEcho {
    suites: Vec<String>,
    inject: bool,
    seed: u64,
}

pub fn verify_cmd(suite: SuiteArg, inject: bool, seed: u64) -> Result<(), CliError> {
    let suites: Vec<Suite> = match suite {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::Partition => vec![Suite::Partition],
        SuiteArg::Aggregation => vec![Suite::Aggregation],
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::Arma => vec![Suite::Arma],
    };
    echo(&VerifyEcho {
        suites: suites.iter().map(ToString::to_string).collect(),
        inject,
        seed,
    })?;
    let opts = VerifyOptions { seed, inject };
    let mut failed = 0;
    let mut total = 0;
    for s in suites {
        let report = run_suite(s, &opts)?;
        for c in &report.checks {
            total += 1;
            failed += usize::from(!c.passed);
            println!(
                "{} [{s}] {}: {:.3e} (tol {:.0e}) {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance,
                c.detail
            );
        }
    }
    println!("{} of {total} checks passed", total - failed);
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} check(s) failed")));
    }
    Ok(())
}

pub fn train_cmd(m: &ModelArgs, t: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let run = resolve_run(m, t)?;
    echo(&run)?;
    let dir = run.data.clone().ok_or(CliError::MissingData)?;
    let data = load_cifar10(&dir)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let result = rla_core::training::run(&run, &data, |e| {
        eprintln!(
            "epoch {:>3}  lr {:<8} loss {:.4}  val_acc {:.4}",
            e.epoch + 1,
            e.lr,
            e.train_loss,
            e.val_acc
        );
    })?;
    write_file(&out.join("log.csv"), log_csv(&result.outcome.log))?;
    let config_toml = toml::to_string(&run).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&out.join("config.toml"), config_toml)?;
    let json = serde_json::to_value(&run).map_err(|e| CliError::Usage(e.to_string()))?;
    checkpoint::save(&out.join("best.rlac"), &result.model, Some(result.normalization), json)?;
    println!(
        "best epoch {} val_acc {:.4}; wrote {}",
        result.outcome.best_epoch + 1,
        result.outcome.best_val_acc,
        out.display()
    );
    Ok(())
}

pub fn eval_cmd(ckpt: &Path, data: Option<&Path>, split: EvalSplit, batch: usize) -> Result<(), CliError> {
    let (mut model, manifest): (Model<f32>, _) = checkpoint::load(ckpt)?;
    eprintln!("# checkpoint config\n{}", manifest.config);
    let norm = manifest.normalization.unwrap_or_else(Normalization::identity);
    let dir = data_dir(data)?;
    let set = match split {
        EvalSplit::Test => load_cifar10_test(&dir)?,
        EvalSplit::Val => {
            let run: RunConfig = serde_json::from_value(manifest.config.clone())
                .map_err(|e| CliError::Usage(format!("checkpoint has no run config: {e}")))?;
            let all = load_cifar10(&dir)?;
            all.split(run.train.train_size, run.train.val_size, run.train.seed)?.1
        }
    };
    let acc = evaluate(&mut model, &set, &norm, batch)?;
    println!("model: {}", manifest.spec.label());
    println!("accuracy: {} ({} images)", fmt_num(acc), set.len());
    Ok(())
}

pub fn norms_cmd(ckpt: Option<&Path>, m: &ModelArgs, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let model: Model<f32> = match ckpt {
        Some(path) => {
            let (model, manifest) = checkpoint::load(path)?;
            echo(&BuildEcho {
                model: &manifest.spec,
                seed: 0,
            })?;
            model
        }
        None => {
            let spec = resolve_model(m)?;
            let seed = seed.unwrap_or(0);
            echo(&BuildEcho { model: &spec, seed })?;
            build(&spec, seed)?
        }
    };
    let csv = norms_csv(&extract_shared_norms(&model)?);
    match out {
        Some(path) => write_file(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// `(stage, kind) -> series` from a `norms` CSV, in file order.
fn read_norm_series(text: &str) -> Result<BTreeMap<(usize, String), Vec<f64>>, CliError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().trim();
    if header != "stage,kind,index,l1" {
        return Err(CliError::Usage(format!("unexpected norms CSV header `{header}`")));
    }
    let mut out: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || CliError::Usage(format!("norms CSV line {}: `{line}`", i + 2));
        let cols: Vec<&str> = line.trim().split(',').collect();
        let [stage, kind, _, l1] = cols[..] else {
            return Err(bad());
        };
        let stage: usize = stage.parse().map_err(|_| bad())?;
        let l1: f64 = l1.parse().map_err(|_| bad())?;
        out.entry((stage, kind.to_string())).or_default().push(l1);
    }
    Ok(out)
}

#[derive(Serialize)]
struct FitEcho<'a> {
    source: String,
    stage: Option<usize>,
    kind: Option<&'a str>,
}

pub fn fit_decay_cmd(
    csv: Option<&Path>,
    values: Option<&[f64]>,
    stage: Option<usize>,
    kind: Option<&str>,
) -> Result<(), CliError> {
    echo(&FitEcho {
        source: csv.map_or_else(|| "values".to_string(), |p| p.display().to_string()),
        stage,
        kind,
    })?;
    let mut rows = String::from("stage,kind,points,a,b,r_squared\n");
    let series: Vec<(String, String, Vec<f64>)> = match (csv, values) {
        (_, Some(v)) => vec![("-".into(), "-".into(), v.to_vec())],
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let selected: Vec<_> = read_norm_series(&text)?
                .into_iter()
                .filter(|((s, k), _)| stage.map_or(true, |x| x == *s) && kind.map_or(true, |x| x == k))
                .collect();
            let explicit = stage.is_some() || kind.is_some();
            selected
                .into_iter()
                .filter(|(_, v)| explicit || v.len() >= 3)
                .map(|((s, k), v)| (s.to_string(), k, v))
                .collect()
        }
        (None, None) => return Err(CliError::Usage("pass --csv or --values".into())),
    };
    if series.is_empty() {
        return Err(CliError::Usage("no series of at least 3 points selected".into()));
    }
    for (s, k, v) in series {
        let fit = fit_exponential(&v).map_err(|e| CliError::Usage(format!("stage {s} {k}: {e}")))?;
        let _ = writeln!(
            rows,
            "{s},{k},{},{},{},{}",
            v.len(),
            fmt_num(fit.a),
            fmt_num(fit.b),
            fmt_num(fit.r_squared)
        );
    }
    print!("{rows}");
    Ok(())
}

#[derive(Serialize)]
struct TsEcho {
    kind: String,
    lags: usize,
    params: BTreeMap<&'static str, f64>,
}

pub struct TsArgs {
    pub kind: TsKind,
    pub beta: Option<f64>,
    pub gamma: f64,
    pub alpha: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub lags: usize,
}

pub fn ts_expand_cmd(a: &TsArgs) -> Result<(), CliError> {
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| CliError::Usage(format!("--{name} is required for this kind")))
    };
    let mut params = BTreeMap::from([("gamma", a.gamma)]);
    let (header, first_lag, values) = match a.kind {
        TsKind::Ar | TsKind::Impulse => {
            let beta = need(a.beta, "beta")?;
            params.insert("beta", beta);
            let p = ArmaParams::new(beta, a.gamma)?;
            if a.kind == TsKind::Ar {
                ("lag,coefficient", 1, arma_ar_coefficients(p, a.lags)?)
            } else {
                ("lag,response", 0, arma_impulse_response(p, a.lags)?)
            }
        }
        TsKind::Recurrence => {
            let p = RecurrenceParams {
                alpha: need(a.alpha, "alpha")?,
                gamma: a.gamma,
                beta1: need(a.beta1, "beta1")?,
                beta2: need(a.beta2, "beta2")?,
            };
            params.extend([("alpha", p.alpha), ("beta1", p.beta1), ("beta2", p.beta2)]);
            ("lag,coefficient", 1, recurrence_expand(p, a.lags)?)
        }
    };
    echo(&TsEcho {
        kind: format!("{:?}", a.kind).to_lowercase(),
        lags: a.lags,
        params,
    })?;
    let mut out = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + first_lag, fmt_num(*v));
    }
    print!("{out}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_print_short() {
        assert_eq!(fmt_num(0.5 - 0.3), "0.2");
        assert_eq!(fmt_num((0.5 - 0.3) * 0.3), "0.06");
        assert_eq!(fmt_num((0.5 - 0.3) * 0.3 * 0.3), "0.018");
        assert_eq!(fmt_num(-1.25e-7), "-0.000000125");
    }

    #[test]
    fn norm_series_grouping() {
        let text = "stage,kind,index,l1\n1,lag,1,3\n1,lag,2,2\n2,lag,1,5\n";
        let s = read_norm_series(text).unwrap();
        assert_eq!(s[&(1, "lag".to_string())], vec![3.0, 2.0]);
        assert!(read_norm_series("a,b\n").is_err());
        assert!(read_norm_series("stage,kind,index,l1\n1,lag\n").is_err());
    }
}
