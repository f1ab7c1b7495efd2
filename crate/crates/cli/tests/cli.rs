use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rla_core::training::data::{encode_records, CifarRecord, PIXELS};

fn rla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rla"))
        .args(args)
        .env_remove("RLA_CIFAR10_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny CIFAR-10 directory: five training batches of `per_batch` records
/// and a test batch, with class-dependent brightness so there is signal.
fn fake_cifar(dir: &Path, per_batch: usize) {
    let batch = |offset: usize| {
        let records: Vec<CifarRecord> = (0..per_batch)
            .map(|i| {
                let label = ((i + offset) % 10) as u8;
                let pixels = (0..PIXELS)
                    .map(|p| (label as usize * 25 + (p * 7 + i * 13) % 20) as u8)
                    .collect();
                CifarRecord { label, pixels }
            })
            .collect();
        encode_records(&records)
    };
    for b in 1..=5 {
        fs::write(dir.join(format!("data_batch_{b}.bin")), batch(b)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), batch(0)).unwrap();
}

#[test]
fn count_golden_rla164() {
    let o = rla(&["count", "--model", "rla-resnet164", "--k", "12", "--golden"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("(1.74M)"), "{}", stdout(&o));
    assert!(stderr(&o).contains("# resolved config"));
}

#[test]
fn count_golden_miss_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("stats.csv");
    let o = rla(&["count", "--model", "resnet164", "--golden", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("MISS"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() > 100);
}

#[test]
fn ts_expand_ar_rows() {
    let o = rla(&["ts-expand", "--beta", "0.5", "--gamma", "0.3", "--lags", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "lag,coefficient\n1,0.2\n2,0.06\n3,0.018\n");
    let o = rla(&["ts-expand", "--kind", "impulse", "--beta", "0.5", "--gamma", "0.3", "--lags", "2"]);
    assert_eq!(stdout(&o), "lag,response\n0,1\n1,0.2\n2,0.1\n");
    let o = rla(&[
        "ts-expand", "--kind", "recurrence", "--alpha", "2", "--gamma", "0.5", "--beta1", "0.3", "--beta2", "-1",
        "--lags", "3",
    ]);
    assert_eq!(stdout(&o), "lag,coefficient\n1,0.3\n2,-2\n3,-1\n");
    assert_eq!(rla(&["ts-expand", "--beta", "0.5", "--gamma", "1.5", "--lags", "3"]).status.code(), Some(2));
}

#[test]
fn verify_detects_injected_split() {
    let clean = rla(&["verify", "--suite", "aggregation"]);
    assert_eq!(clean.status.code(), Some(0), "{}", stdout(&clean));
    let broken = rla(&["verify", "--suite", "aggregation", "--inject"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stdout(&broken).contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rla(&["count", "--model", "vgg16"]).status.code(), Some(2));
    assert_eq!(rla(&["count", "--model", "resnet164", "--nope"]).status.code(), Some(2));
    assert_eq!(rla(&["count", "--model", "resnet164", "--k", "4"]).status.code(), Some(2));
    assert_eq!(rla(&["count"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nfamily = \"resnet164\"\ndepth = 3\n").unwrap();
    assert_eq!(rla(&["count", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_data_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = rla(&["train", "--model", "rla-resnet110", "--desk", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = rla(&[
        "train", "--model", "rla-resnet110", "--desk", "--data", "/nonexistent/cifar", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[model]\nfamily = \"resnet164\"\n[model.aggregation]\ntype = \"rla\"\nk = 8\n",
    )
    .unwrap();
    let o = rla(&["count", "--config", cfg.to_str().unwrap(), "--golden"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("(1.73M)"));
    let o = rla(&["count", "--config", cfg.to_str().unwrap(), "--k", "24", "--golden"]);
    assert!(stdout(&o).contains("(1.78M)"));
    assert!(stderr(&o).contains("k = 24"));
}

#[test]
fn train_eval_norms_roundtrip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fake_cifar(dir.path(), 8);
    let data = dir.path().to_str().unwrap();
    let train = |out: &str| {
        rla(&[
            "train", "--model", "rla-resnet110", "--k", "4", "--blocks", "1", "--data", data, "--epochs", "2",
            "--milestones", "1", "--batch", "8", "--train-size", "24", "--val-size", "8", "--out", out,
        ])
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = train(a.to_str().unwrap());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(train(b.to_str().unwrap()).status.code(), Some(0));
    for f in ["log.csv", "best.rlac", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,val_acc\n0,0.1,"), "{log}");
    assert_eq!(log.lines().count(), 3);

    let ckpt = a.join("best.rlac");
    let ckpt = ckpt.to_str().unwrap();
    for split in ["test", "val"] {
        let o = rla(&["eval", "--checkpoint", ckpt, "--data", data, "--split", split]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("accuracy: "));
    }
    let o = rla(&["norms", "--checkpoint", ckpt]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("stage,kind,index,l1\n1,rla_g1,1,"), "{csv}");
    assert_eq!(csv.lines().count(), 7);
    let bad = dir.path().join("bad.rlac");
    fs::write(&bad, b"nope").unwrap();
    assert_eq!(rla(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", data]).status.code(), Some(3));
}

#[test]
fn norms_then_fit_decay() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("norms.csv");
    let o = rla(&["norms", "--model", "shared-lag-densenet_bc100", "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("1,lag,")).count(), 15);
    let o = rla(&["fit-decay", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);
    assert!(stdout(&o).contains("\n1,lag,15,"));

    let series: Vec<String> = (1..=6).map(|l| (2.0 * (-0.4 * l as f64).exp()).to_string()).collect();
    let o = rla(&["fit-decay", "--values", &series.join(",")]);
    assert_eq!(stdout(&o), "stage,kind,points,a,b,r_squared\n-,-,6,2,0.4,1\n");
    assert_eq!(rla(&["fit-decay", "--values", "1,0,2"]).status.code(), Some(2));
    assert_eq!(rla(&["norms", "--model", "resnet110"]).status.code(), Some(2));
}
