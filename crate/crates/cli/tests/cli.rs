//! Runs the `gmmc` binary end to end and checks its files and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmmc::centroids::generate_opt_means;
use gmmc::checkpoint::Checkpoint;
use gmmc::data::LabeledDataset;
use gmmc::model::GmmcModel;
use gmmc::net::{Network, NetworkSpec, ParameterVector};

fn gmmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmc"))
        .args(args)
        .env_remove("GMMC_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Data rows of a stamped CSV, skipping the stamp and header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="));
    lines.next().expect("header");
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// The bundled 2D toy config with the output redirected and `edit` applied.
fn toy_config(dir: &Path, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = fs::read_to_string(configs().join(name)).unwrap();
    let path = dir.join(name);
    fs::write(&path, edit(text)).unwrap();
    path
}

fn short(text: String, epochs: usize) -> String {
    text.replace("epochs = 30", &format!("epochs = {epochs}"))
        .replace("decay_epochs = [20]", "decay_epochs = []")
}

#[test]
fn means_prints_simplex_cosines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("means.txt");
    let o = gmmc(&[
        "means",
        "--classes",
        "3",
        "--dim",
        "2",
        "--scale",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("-0.5"), "{stdout}");
    let cs = gmmc::centroids::CentroidSet::read_text(fs::read(&out).unwrap().as_slice()).unwrap();
    assert_eq!((cs.num_classes(), cs.feature_dim()), (3, 2));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.txt");
    assert_eq!(
        code(&gmmc(&[
            "means",
            "--classes",
            "5",
            "--dim",
            "3",
            "--out",
            p(&out)
        ])),
        2
    );
    assert!(!out.exists());
    assert_eq!(code(&gmmc(&["means", "--classes", "3", "--dim", "2"])), 2);
    assert_eq!(code(&gmmc(&["train", "--config", "/nonexistent.toml"])), 2);
    let bad = toy_config(dir.path(), "toy2d-disc.toml", |t| {
        t.replace("spread", "sprad")
    });
    assert_eq!(code(&gmmc(&["train", "--config", p(&bad)])), 2);
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = toy_config(dir.path(), "toy2d-gen.toml", |t| short(t, 3));
    let o = gmmc(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.toml",
        "epochs.csv",
        "model.ckpt",
        "gamma2.txt",
        "status.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let epochs = rows(&run.join("epochs.csv"));
    assert_eq!(epochs.len(), 3);
    assert!(epochs
        .iter()
        .all(|r| r[1] == "generative" && r[2] == "0.5" && !r[5].is_empty()));
    let ckpt = run.join("model.ckpt");

    let samples = dir.path().join("samples");
    let o = gmmc(&[
        "sample",
        "--checkpoint",
        p(&ckpt),
        "--class",
        "1",
        "--count",
        "16",
        "--steps",
        "20",
        "--step-size",
        "0.01",
        "--out",
        p(&samples),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let xs = rows(&samples.join("samples.csv"));
    assert_eq!(xs.len(), 16);
    for r in &xs {
        assert_eq!(r[0], "1");
        assert!(r[1..]
            .iter()
            .all(|v| (-1.0..=1.0).contains(&v.parse::<f64>().unwrap())));
    }
    let e = rows(&samples.join("energies.csv"));
    let mean =
        |k: usize| e.iter().map(|r| r[k].parse::<f64>().unwrap()).sum::<f64>() / e.len() as f64;
    assert!(mean(3) < mean(2));

    let empty = dir.path().join("none");
    let o = gmmc(&[
        "sample",
        "--checkpoint",
        p(&ckpt),
        "--class",
        "0",
        "--count",
        "0",
        "--out",
        p(&empty),
    ]);
    assert_eq!(code(&o), 0);
    assert!(rows(&empty.join("samples.csv")).is_empty());
    let o = gmmc(&[
        "sample",
        "--checkpoint",
        p(&ckpt),
        "--class",
        "2",
        "--count",
        "1",
        "--out",
        p(&empty),
    ]);
    assert_eq!(code(&o), 2);

    let ev = dir.path().join("eval");
    let o = gmmc(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&cfg),
        "--suite",
        "robustness",
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve: Vec<f64> = rows(&ev.join("robustness.csv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect();
    assert_eq!(curve.len(), 4);
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    assert!(!rows(&ev.join("perturbations.csv")).is_empty());
    // The toy config holds out no class, so the ood suite has nothing to compare.
    let o = gmmc(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&cfg),
        "--suite",
        "ood",
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_epochs_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "toy2d-disc.toml", |t| short(t, 0));
    let run = dir.path().join("run");
    assert_eq!(
        code(&gmmc(&["train", "--config", p(&cfg), "--out", p(&run)])),
        0
    );
    assert!(rows(&run.join("epochs.csv")).is_empty());
    let model = Checkpoint::load(&run.join("model.ckpt"))
        .unwrap()
        .model()
        .unwrap();
    assert!(model.gamma2().is_some());
}

#[test]
fn output_root_prefixes_relative_output_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "toy2d-disc.toml", |t| short(t, 1));
    let o = Command::new(env!("CARGO_BIN_EXE_gmmc"))
        .args(["train", "--config", p(&cfg)])
        .env("GMMC_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("root/runs/toy2d-disc/model.ckpt").exists());
}

#[test]
fn divergence_exits_with_three_and_keeps_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "toy2d-disc.toml", |t| {
        t.replace("learning_rate = 1e-3", "learning_rate = 1e300")
            .replace("activation = \"tanh\"", "activation = \"identity\"")
    });
    let run = dir.path().join("run");
    let o = gmmc(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(run.join("status.txt"))
        .unwrap()
        .starts_with("failed"));
    assert!(!run.join("model.ckpt").exists());
    assert!(run.join("epochs.csv").exists());
}

/// Inputs at `+-0.9` and `+-1.0` mapped by `phi(x) = 10 x` onto the 1D
/// centroids `+-10`: every posterior saturates at exactly 1.
fn perfect_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = NetworkSpec::new(1, vec![1], vec![], 0).unwrap();
    let params = ParameterVector::from_values(&spec, vec![10.0, 0.0]).unwrap();
    let cs = generate_opt_means(2, 1, 10.0).unwrap();
    let model = GmmcModel::new(Network::new(spec, params).unwrap(), cs).unwrap();
    let sign = if model.classify(&[1.0]).unwrap() == 0 {
        1.0
    } else {
        -1.0
    };
    let xs = vec![0.9 * sign, sign, -0.9 * sign, -sign];
    let ds = LabeledDataset::new("perfect", 2, 1, xs, vec![0, 0, 1, 1]).unwrap();
    let data = dir.join("perfect.csv");
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    fs::write(&data, buf).unwrap();
    let ckpt = dir.join("perfect.ckpt");
    Checkpoint::from_model(&model, None).save(&ckpt).unwrap();
    (ckpt, data)
}

#[test]
fn perfect_model_has_zero_ece_and_three_ood_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = perfect_fixture(dir.path());
    let ood = dir.path().join("ood.csv");
    fs::write(&ood, "label,x1\n0,0.05\n0,-0.05\n0,0.0\n").unwrap();
    let ev = dir.path().join("eval");
    let o = gmmc(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&data),
        "--ood",
        p(&ood),
        "--suite",
        "all",
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let buckets = rows(&ev.join("calibration.csv"));
    assert_eq!(buckets.len(), 20);
    assert_eq!(buckets[19][1], "4");
    assert!(String::from_utf8(o.stdout).unwrap().contains("ECE"));
    let ood_rows = rows(&ev.join("ood.csv"));
    let names: Vec<&str> = ood_rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["logpx", "predictive", "approx_mass"]);
    for r in &ood_rows {
        let auroc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&auroc));
    }
    assert_eq!(ood_rows[0][1], "1");
    assert_eq!(ood_rows[1][1], "1");
    for name in names {
        assert!(ev.join(format!("ood_hist_{name}.csv")).exists());
    }
}

#[test]
fn eval_reports_zero_ece_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = perfect_fixture(dir.path());
    let args = gmmc_cli::commands::EvalArgs {
        checkpoint: ckpt,
        dataset: data,
        suite: gmmc_cli::commands::Suite::Calibration,
        out: dir.path().join("eval"),
        ood: None,
        seed: 0,
    };
    let summary = gmmc_cli::commands::cmd_eval(&args, &mut Vec::new()).unwrap();
    assert_eq!(summary.ece, Some(0.0));
}
