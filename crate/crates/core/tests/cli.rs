use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bce3s::dump::{format_classifier, format_samples};
use bce3s::geometry::construct_etf;
use bce3s::losses::{Classifier, LabeledFeature, Normalization};
use bce3s::rng;
use tempfile::TempDir;

const SMALL: &str = r#"
[data]
classes = 6
head_count = 60
imbalance_factor = 10.0
input_dim = 6
noise_sigma = 1.0
mean_scale = 3.0
test_per_class = 10
seed = 3

[model]
encoder_hidden = [12]
feature_dim = 6
projection_hidden = 6
projection_dim = 4

[train]
epochs_stage1 = 4
epochs_stage2 = 2
lr0 = 0.05
lr_stage2 = 0.5
batch_size = 16
seed = 3
metric_every = 2

[loss]
family = "bce"
lambda_ss = 0.02
lambda_cc = 0.01
r = 0.5

[split]
many = 30
few = 10
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bce3s"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).args(["--quiet"]).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, format!("{SMALL}\n{extra}")).unwrap();
    p
}

/// Writes `SMALL` with `key = value` lines replaced under their section.
fn config_with(dir: &Path, edits: &[(&str, &str, &str)]) -> PathBuf {
    let mut section = String::new();
    let mut out = String::new();
    for line in SMALL.lines() {
        if let Some(s) = line.strip_prefix('[') {
            section = s.trim_end_matches(']').to_string();
        }
        let key = line.split('=').next().unwrap_or("").trim();
        match edits.iter().find(|(s, k, _)| *s == section && *k == key) {
            Some((_, k, v)) => out += &format!("{k} = {v}\n"),
            None => out += &format!("{line}\n"),
        }
    }
    let p = dir.join("cfg.toml");
    fs::write(&p, out).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_reproducible_and_creates_directories() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["train.dump", "test.dump", "counts.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let counts = fs::read_to_string(a.join("counts.csv")).unwrap();
    assert!(counts.lines().count() >= 7);
}

#[test]
fn bad_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let unknown = write_config(dir.path(), "[bogus]\nx = 1\n");
    assert_eq!(code(&run(&["gen-data", "--config", s(&unknown)])), 2);

    let typo = config_with(dir.path(), &[("loss", "tau", "0.5")]);
    fs::write(&typo, fs::read_to_string(&typo).unwrap().replace("lambda_ss", "lamda_ss")).unwrap();
    let o = run(&["train", "--config", s(&typo)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda_ss"), "{}", stderr(&o));

    let bad_r = config_with(dir.path(), &[("loss", "r", "0.0")]);
    assert_eq!(code(&run(&["train", "--config", s(&bad_r)])), 2);

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&run(&["train", "--config", s(&missing)])), 2);

    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn uniform_loss_without_normalized_classifier_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config_with(dir.path(), &[("loss", "normalization", "\"none\"")]);
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("r = 0.5", "r = 0.5\nnormalization = \"none\"")).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = TempDir::new().unwrap();
    let ok = run(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() > 10);
    let strict = run(&["gradcheck", "--seeds", "2", "--tol", "1e-12", "--out", s(dir.path())]);
    assert_eq!(code(&strict), 4);
}

#[test]
fn malformed_dump_reports_line() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.dump");
    fs::write(&p, "ltr-dump v1, 2, 2, 3\n0,1.0,2.0\n1,0.5,x\n0,1,1\n").unwrap();
    let o = run(&["metrics", "--features", s(&p), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.dump:3:"), "{}", stderr(&o));
}

#[test]
fn metrics_on_etf_classifier() {
    let dir = TempDir::new().unwrap();
    let k = 100;
    let mut r = rng::stream(1, &[rng::tags::ETF]);
    let w = construct_etf(k, 128, &mut r).unwrap();
    let clf = Classifier::new(w.clone(), vec![0.0; k], Normalization::ClassifierOnly).unwrap();
    let feats: Vec<LabeledFeature> = (0..2 * k)
        .map(|i| {
            let mut x = w.row(i % k).to_vec();
            x[i % 7] += 0.1 * (i as f64).sin();
            LabeledFeature::new(x, i % k)
        })
        .collect();
    let fp = dir.path().join("f.dump");
    let cp = dir.path().join("c.dump");
    fs::write(&fp, format_samples(&feats, k).unwrap()).unwrap();
    fs::write(&cp, format_classifier(&clf)).unwrap();
    let o = run(&["metrics", "--features", s(&fp), "--classifier", s(&cp), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((v - 5000.0 / 99.0).abs() < 1e-9, "{line}");
    }
    let summary = fs::read_to_string(dir.path().join("metrics_summary.txt")).unwrap();
    assert!(summary.contains("classifier separability: 50.505 ± 0.000"), "{summary}");
}

fn read_csv_column(path: &Path, col: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == col).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn train_writes_both_stages_and_checkpoint_metrics_match() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "config.toml",
        "history.csv",
        "history.s2.csv",
        "metric_history.csv",
        "model.ckpt.s1",
        "model.ckpt.s2",
        "s1_metrics.csv",
        "s2_metrics.csv",
        "per_class_accuracy.csv",
        "eval.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(read_csv_column(&out.join("history.csv"), "epoch").len(), 4);
    assert_eq!(read_csv_column(&out.join("history.s2.csv"), "epoch").len(), 2);
    let eval = fs::read_to_string(out.join("eval.txt")).unwrap();
    assert!(eval.contains("Many") && eval.contains("Few") && eval.contains("All"));

    // Metrics recomputed from the stage-1 checkpoint agree with the
    // in-process values logged at the last epoch.
    let m = dir.path().join("m");
    let o = run(&["metrics", "--features", s(&out.join("model.ckpt.s1")), "--out", s(&m)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(m.join("metrics.csv")).unwrap(),
        fs::read_to_string(out.join("s1_metrics.csv")).unwrap()
    );
    let logged = read_csv_column(&out.join("metric_history.csv"), "clf_sep_mean");
    let clf = read_csv_column(&m.join("metrics.csv"), "clf_sep");
    let mean = clf.iter().sum::<f64>() / clf.len() as f64;
    assert!((logged.last().unwrap() - mean).abs() < 1e-9);

    // The saved config reproduces the run.
    let again = dir.path().join("again");
    let o = run(&["train", "--config", s(&out.join("config.toml")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["history.csv", "model.ckpt.s1", "model.ckpt.s2", "eval.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn disabled_terms_log_zero_losses() {
    let dir = TempDir::new().unwrap();
    let cfg = config_with(
        dir.path(),
        &[("loss", "lambda_ss", "0.0"), ("loss", "lambda_cc", "0.0"), ("train", "epochs_stage2", "0")],
    );
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = out.join("history.csv");
    assert!(read_csv_column(&h, "loss_ss").iter().all(|&v| v == 0.0));
    assert!(read_csv_column(&h, "loss_cc").iter().all(|&v| v == 0.0));
    assert!(read_csv_column(&h, "loss_sc").iter().all(|&v| v > 0.0));
    assert!(!out.join("model.ckpt.s2").exists());
}

#[test]
fn env_and_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = bin()
        .args(["gen-data", "--quiet", "--config", s(&cfg), "--out", s(&a)])
        .env("BCE3S_DATA__HEAD_COUNT", "80")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(a.join("counts.csv")).unwrap().contains(",80"));
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--seed", "99"]);
    assert_eq!(code(&o), 0);
    let c = dir.path().join("c");
    run(&["gen-data", "--config", s(&cfg), "--out", s(&c)]);
    assert_ne!(fs::read(b.join("train.dump")).unwrap(), fs::read(c.join("train.dump")).unwrap());
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = config_with(
        dir.path(),
        &[
            ("train", "lr0", "1e12"),
            ("train", "epochs_stage2", "0"),
            ("loss", "lambda_cc", "0.0"),
        ],
    );
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("r = 0.5", "r = 0.5\nnormalization = \"none\"")).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn ablation_records_failed_runs() {
    let dir = TempDir::new().unwrap();
    // Classifier normalization off: every variant with a uniform term fails,
    // the others still complete.
    let cfg = config_with(
        dir.path(),
        &[("train", "epochs_stage2", "0"), ("train", "epochs_stage1", "2"), ("loss", "lambda_cc", "0.0")],
    );
    let text = fs::read_to_string(&cfg).unwrap().replace("r = 0.5", "r = 0.5\nnormalization = \"feature_only\"")
        + "\n[ablation]\nseeds = [1, 2]\npreset = \"core\"\n";
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("abl");
    let o = run(&["ablation", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 3 * 2, "{runs}");
    for line in runs.lines().skip(1) {
        if line.contains("_cc") {
            assert!(line.contains("failed"), "{line}");
        } else {
            assert!(line.contains(",ok,"), "{line}");
        }
    }
    assert!(out.join("ablation_table.txt").is_file());
    assert!(out.join("ablation_summary.csv").is_file());
}

#[test]
fn etf_sim_converges_and_warns_when_infeasible() {
    let dir = TempDir::new().unwrap();
    let o = run(&["etf-sim", "--steps", "3000", "--inits", "3", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("etf_sim.csv")).unwrap();
    assert!(csv.lines().count() > 3);
    let o = bin()
        .args(["etf-sim", "--classes", "5", "--dim", "3", "--steps", "200", "--inits", "1", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).to_lowercase().contains("warning"), "{}", stderr(&o));
}
