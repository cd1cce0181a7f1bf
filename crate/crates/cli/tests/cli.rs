use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ddpnkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddpnkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ddpnkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn all_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

const TINY: &[&str] = &["--hidden", "8,8", "--epochs", "15", "--lr", "0.01"];

/// simulate → train (two members) inside `dir`.
fn small_sine_ensemble(dir: &Path, extra: &[&str]) {
    ok(
        dir,
        &["simulate", "--process", "sine-conflation", "--seed", "1", "--n-train", "200"],
    );
    let mut args = vec![
        "train",
        "--train",
        "data/sine-conflation_s1_train.csv",
        "--val",
        "data/sine-conflation_s1_val.csv",
        "--members",
        "2",
        "--seed",
        "1",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn simulate_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sine_ensemble(d, &[]);
    for i in 0..2 {
        assert!(d.join(format!("ckpt/double_poisson_s1_m{i}.ckpt")).is_file());
        let report = json(d.join(format!("reports/train_double_poisson_s1_m{i}.json")));
        assert_eq!(report["epochs"], 15);
        assert_eq!(report["train_loss"].as_array().unwrap().len(), 15);
    }
    ok(
        d,
        &[
            "eval",
            "--model",
            "ckpt/double_poisson_s1_m0.ckpt",
            "--data",
            "data/sine-conflation_s1_test.csv",
        ],
    );
    let metrics = json(d.join("reports/eval_double_poisson_s1_m0.json"));
    for key in ["mae", "crps_mean", "median_precision"] {
        assert!(metrics[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert!(metrics.get("auroc").is_none());
}

#[test]
fn ensemble_eval_decomposition_is_additive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sine_ensemble(d, &[]);
    ok(
        d,
        &[
            "ensemble-eval",
            "--manifest",
            "ckpt/double_poisson_s1.ensemble",
            "--data",
            "data/sine-conflation_s1_test.csv",
            "--ood-data",
            "data/sine-conflation_s1_val.csv",
            "--grid-n",
            "40",
        ],
    );
    let metrics = json(d.join("reports/ensemble_eval_double_poisson_s1.json"));
    assert!(metrics["auroc"].as_f64().is_some());
    let text = fs::read_to_string(d.join("reports/decomposition_double_poisson_s1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x,mean,aleatoric,epistemic,q025,q975,total"
    );
    let mut rows = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let (aleatoric, epistemic, total) = (v[2], v[3], v[6]);
        assert!(aleatoric > 0.0 && epistemic >= 0.0);
        assert!(
            (total - aleatoric - epistemic).abs() <= 1e-9 * total.max(1.0),
            "{line}"
        );
        assert!(v[4] <= v[1] && v[1] <= v[5], "interval should bracket the mean: {line}");
        rows += 1;
    }
    assert_eq!(rows, 40);
}

#[test]
fn ood_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sine_ensemble(d, &[]);
    ok(
        d,
        &[
            "ood",
            "--manifest",
            "ckpt/double_poisson_s1.ensemble",
            "--id-data",
            "data/sine-conflation_s1_test.csv",
            "--ood-range",
            "12.566,18.850",
            "--repeats",
            "3",
        ],
    );
    let report = json(d.join("reports/ood_double_poisson_s1.json"));
    assert_eq!(report["n_repeats"], 3);
    for key in ["auroc", "aupr", "fpr80"] {
        let m = report[key]["mean"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m), "{key} = {m}");
        assert!(report[key]["std"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn moments_grid_is_exact_on_the_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["moments-grid"]);
    let text = fs::read_to_string(dir.path().join("reports/moments_grid.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "mu0,var0,eps1,eps2");
    let mut diagonal = 0;
    let mut total = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        total += 1;
        if v[0] == v[1] {
            diagonal += 1;
            assert!(v[2] <= 1e-9 && v[3] <= 1e-9, "{line}");
        }
    }
    assert_eq!(total, 21 * 21);
    assert_eq!(diagonal, 21);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.cfg"),
        "# shared settings\nseed = 4\n\n[simulate]\nprocess = misspec-poisson\nn_train = 60\nn-val = 20\nn-test = 20\n\n[train]\nbeta = 0.25\nhidden = 4\nepochs = 3\n",
    )
    .unwrap();
    ok(d, &["--config", "run.cfg", "simulate"]);
    assert_eq!(
        fs::read_to_string(d.join("data/misspec-poisson_s4_train.csv"))
            .unwrap()
            .lines()
            .count(),
        61
    );
    ok(d, &["simulate", "--config", "run.cfg", "--seed", "5"]);
    assert!(d.join("data/misspec-poisson_s5_val.csv").is_file());

    ok(
        d,
        &[
            "train",
            "--config",
            "run.cfg",
            "--train",
            "data/misspec-poisson_s4_train.csv",
            "--val",
            "data/misspec-poisson_s4_val.csv",
            "--beta",
            "0.5",
        ],
    );
    let report = json(d.join("reports/train_double_poisson_b0.5_s4_m0.json"));
    assert_eq!(report["beta"], 0.5);
    assert_eq!(report["epochs"], 3);
    assert_eq!(report["hidden_widths"], serde_json::json!([4]));
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "[moments-grid]\nbogus = 1\n").unwrap();
    let out = ddpnkit(dir.path(), &["moments-grid", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ne!(ddpnkit(d, &["bogus-cmd"]).status.code(), Some(0));
    assert_eq!(ddpnkit(d, &["bogus-cmd"]).status.code(), Some(2));
    assert_eq!(ddpnkit(d, &["simulate", "--process", "nope"]).status.code(), Some(2));
    assert_eq!(ddpnkit(d, &["simulate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ddpnkit(d, &["simulate"]).status.code(), Some(2));
    assert_eq!(
        ddpnkit(d, &["eval", "--model", "missing.ckpt", "--data", "missing.csv"])
            .status
            .code(),
        Some(4)
    );
    assert_eq!(ddpnkit(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn failures_leave_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["simulate", "--process", "misspec-nb", "--out", "in", "--n-train", "100"],
    );
    let before = all_files(d);
    // a wildly large step size makes the network diverge
    let out = ddpnkit(
        d,
        &[
            "train",
            "--train",
            "in/data/misspec-nb_s0_train.csv",
            "--val",
            "in/data/misspec-nb_s0_val.csv",
            "--hidden",
            "16",
            "--epochs",
            "50",
            "--lr",
            "1e6",
            "--members",
            "3",
            "--out",
            "out",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("\"train_loss\""), "partial report expected: {stderr}");
    assert_eq!(all_files(d), before);
    assert!(!d.join("out").exists());
}

#[test]
fn gaussian_and_ddpn_reports_share_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sine_ensemble(d, &[]);
    let mut args = vec![
        "train",
        "--train",
        "data/sine-conflation_s1_train.csv",
        "--val",
        "data/sine-conflation_s1_val.csv",
        "--family",
        "gaussian",
        "--seed",
        "1",
    ];
    args.extend_from_slice(TINY);
    ok(d, &args);
    let mut keys = Vec::new();
    for model in ["double_poisson_s1_m0", "gaussian_s1_m0"] {
        ok(
            d,
            &[
                "eval",
                "--model",
                &format!("ckpt/{model}.ckpt"),
                "--data",
                "data/sine-conflation_s1_test.csv",
                "--ood-data",
                "data/sine-conflation_s1_val.csv",
            ],
        );
        let report = json(d.join(format!("reports/eval_{model}.json")));
        let k: Vec<String> = report.as_object().unwrap().keys().cloned().collect();
        keys.push(k);
    }
    assert_eq!(keys[0], keys[1]);
    assert_eq!(keys[0].len(), 6);
}

fn strip_wall_time(bytes: &[u8]) -> Vec<u8> {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    serde_json::to_vec(&v).unwrap()
}

fn full_run(dir: &Path, jobs: &str) {
    small_sine_ensemble(dir, &["--jobs", jobs]);
    let manifest = "ckpt/double_poisson_s1.ensemble";
    let test = "data/sine-conflation_s1_test.csv";
    ok(dir, &["eval", "--model", manifest, "--data", test, "--exact-moments"]);
    ok(
        dir,
        &["ensemble-eval", "--manifest", manifest, "--data", test, "--grid-n", "25"],
    );
    ok(
        dir,
        &[
            "ood",
            "--manifest",
            manifest,
            "--id-data",
            test,
            "--ood-range",
            "12.566,18.850",
            "--repeats",
            "4",
            "--seed",
            "9",
        ],
    );
    ok(dir, &["moments-grid", "--n", "7", "--terms", "60"]);
    ok(
        dir,
        &[
            "attenuation-demo",
            "--beta",
            "0.5",
            "--gamma-bias-init",
            "1",
            "--hidden",
            "8",
            "--epochs",
            "12",
            "--trace-every",
            "5",
            "--n",
            "80",
        ],
    );
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path(), "1");
    full_run(b.path(), "3");
    let (fa, fb) = (all_files(a.path()), all_files(b.path()));
    assert_eq!(
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>()
    );
    assert!(fa.len() >= 14, "{:?}", fa.keys());
    for (path, bytes) in &fa {
        let other = &fb[path];
        let is_train_report = path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .starts_with("train_");
        if is_train_report {
            assert_eq!(strip_wall_time(bytes), strip_wall_time(other), "{path:?}");
        } else {
            assert_eq!(bytes, other, "{path:?} differs between runs");
        }
    }
    let trace = String::from_utf8(fa[Path::new("reports/attenuation_b0.5_g1_s0.csv")].clone()).unwrap();
    let epochs: std::collections::BTreeSet<&str> =
        trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs.into_iter().collect::<Vec<_>>(), ["10", "12", "5"]);
}
