use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use palm::cli::score_dataset;
use palm::geometry::{gen_synthetic, SyntheticSpec};
use palm::io::{parse_scores, read_embeddings, read_model};
use palm::metrics::EvalReport;
use palm::scoring::ScoreSource;
use sha2::{Digest, Sha256};

fn palm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palm")).args(args).output().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Small synthetic data plus a 3-epoch model.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        fs::write(
            f.path("spec.json"),
            r#"{"train_per_class": 50, "test_per_class": 25, "ood_samples": 100}"#,
        )
        .unwrap();
        fs::write(
            f.path("cfg.json"),
            r#"{"epochs": 3, "base_lr": 0.01, "alpha": 0.95, "batch_size": 32}"#,
        )
        .unwrap();
        assert!(
            palm(&["gen", "--spec", &f.s("spec.json"), "--out", &f.s("d"), "--seed", "5"])
                .status
                .success()
        );
        let out = palm(&[
            "train",
            "--config",
            &f.s("cfg.json"),
            "--train",
            &f.s("d.train.palm"),
            "--out",
            &f.s("m.palm"),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

#[test]
fn gen_matches_library_and_manifest() {
    let f = Fixture::new();
    let spec = SyntheticSpec {
        train_per_class: 50,
        test_per_class: 25,
        ood_samples: 100,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    // Embedding files store single precision.
    let stored = |d: &palm::data::Dataset| palm::data::Dataset {
        inputs: d.inputs.mapv(|v| v as f32 as f64),
        labels: d.labels.clone(),
    };
    assert_eq!(
        read_embeddings(&f.path("d.train.palm")).unwrap(),
        stored(&data.id_train)
    );
    assert_eq!(read_embeddings(&f.path("d.ood.palm")).unwrap(), stored(&data.ood_test));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("d.manifest.json")).unwrap()).unwrap();
    for split in ["train", "test", "ood"] {
        let bytes = fs::read(f.path(&format!("d.{split}.palm"))).unwrap();
        let digest = hex::encode(Sha256::digest(&bytes));
        assert_eq!(manifest["files"][split]["sha256"], digest.as_str());
    }
    assert_eq!(manifest["files"]["ood"]["labeled"], false);
    assert_eq!(manifest["spec"]["seed"], 5);
}

#[test]
fn score_matches_library() {
    let f = Fixture::new();
    let model = read_model(&f.path("m.palm")).unwrap();
    let test = read_embeddings(&f.path("d.test.palm")).unwrap();
    let train = read_embeddings(&f.path("d.train.palm")).unwrap();
    for (metric, source) in [
        ("mahalanobis", ScoreSource::Mahalanobis),
        ("posterior", ScoreSource::Posterior),
        ("knn", ScoreSource::Knn),
    ] {
        let out = f.s(&format!("{metric}.csv"));
        let mut args = vec![
            "score".to_string(),
            "--model".into(),
            f.s("m.palm"),
            "--data".into(),
            f.s("d.test.palm"),
            "--metric".into(),
            metric.into(),
            "--out".into(),
            out.clone(),
        ];
        if metric == "knn" {
            args.extend(["--k".into(), "7".into(), "--train".into(), f.s("d.train.palm")]);
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let status = palm(&args);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let cli = parse_scores(&fs::read_to_string(&out).unwrap()).unwrap();
        let lib = score_dataset(&model, &test, source, 7, Some(&train)).unwrap();
        assert_eq!(cli, lib, "{metric}");
    }
}

fn score_file(f: &Fixture, data: &str, out: &str) {
    let o = palm(&[
        "score",
        "--model",
        &f.s("m.palm"),
        "--data",
        &f.s(data),
        "--metric",
        "mahalanobis",
        "--out",
        &f.s(out),
    ]);
    assert!(o.status.success());
}

#[test]
fn eval_report_and_hist_agree() {
    let f = Fixture::new();
    score_file(&f, "d.test.palm", "id.csv");
    score_file(&f, "d.ood.palm", "ood.csv");
    let out = palm(&[
        "eval",
        "--id",
        &f.s("id.csv"),
        "--ood",
        &f.s("ood.csv"),
        "--out",
        &f.s("r.json"),
        "--bins",
        "30",
        "--model",
        &f.s("m.palm"),
        "--id-data",
        &f.s("d.test.palm"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let report = EvalReport::from_json(&fs::read_to_string(f.path("r.json")).unwrap()).unwrap();
    assert!(stdout.contains(&format!("AUROC {}", report.auroc)));
    assert!(stdout.contains("FPR95"));
    assert_eq!((report.n_id, report.n_ood, report.bins), (100, 100, 30));
    assert!(report.compactness.is_some() && report.far_id_fraction.is_some());
    assert!(report.config_hash.is_some());

    let o = palm(&[
        "hist",
        "--id",
        &f.s("id.csv"),
        "--ood",
        &f.s("ood.csv"),
        "--bins",
        "30",
        "--out",
        &f.s("h.csv"),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(f.path("h.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bin_left,bin_right,p_id,p_ood,min"));
    let rows: Vec<Vec<f64>> = lines
        .clone()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 30);
    let p_id: f64 = rows.iter().map(|r| r[2]).sum();
    assert!((p_id - 1.0).abs() < 1e-12);
    let trailing = text.lines().last().unwrap().strip_prefix("# overlap_area=").unwrap();
    assert_eq!(trailing.parse::<f64>().unwrap(), report.overlap_area);
}

#[test]
fn failures_exit_with_usage_code_and_message() {
    let f = Fixture::new();
    let missing = palm(&[
        "eval",
        "--id",
        &f.s("nope.csv"),
        "--ood",
        &f.s("nope.csv"),
        "--out",
        &f.s("x.json"),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
    assert!(!Path::new(&f.path("x.json")).exists());
    let no_args = palm(&[]);
    assert_eq!(no_args.status.code(), Some(2));
}
