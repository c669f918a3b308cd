use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agefair::data::GroundTruth;
use agefair::harness::ExperimentReport;
use agefair::models::ProbeResult;

fn agefair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agefair"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_predictions(path: &Path, rows: &[(u8, u8, f64)]) {
    let mut text = String::from("id,true_label,pred_label,age\n");
    for (i, (t, p, a)) in rows.iter().enumerate() {
        text.push_str(&format!("r{i},{t},{p},{a}\n"));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn metric_on_all_correct_predictions_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.csv");
    let rows: Vec<(u8, u8, f64)> = (0..20)
        .map(|i| ((i % 2) as u8, (i % 2) as u8, 50.0 + i as f64))
        .collect();
    write_predictions(&path, &rows);
    let out = agefair(&["metric", path.to_str().unwrap(), "--groups", "2,5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("delta_eo(2) = 0.0"), "{text}");
    assert!(text.contains("delta_eo(5) = 0.0"), "{text}");
}

#[test]
fn metric_matches_a_hand_tally() {
    // Ages 1..=8 split at the median 4.5. Young group: negatives at ages 1, 2
    // (one false positive), positives at 3, 4 (no misses). Old group:
    // negatives at 5, 6 (none flagged), positives at 7, 8 (one missed).
    // FP rates (0.5, 0), FN rates (0, 0.5), so the score is 0.5 + 0.5.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.csv");
    let rows = [
        (0, 1, 1.0),
        (0, 0, 2.0),
        (1, 1, 3.0),
        (1, 1, 4.0),
        (0, 0, 5.0),
        (0, 0, 6.0),
        (1, 0, 7.0),
        (1, 1, 8.0),
    ];
    write_predictions(&path, &rows);
    let out = agefair(&["metric", path.to_str().unwrap(), "--groups", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "delta_eo(2) = 1.0");
}

#[test]
fn metric_reports_degenerate_groups_as_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.csv");
    // Every positive is old, so the young group has no false-negative rate.
    let rows: Vec<(u8, u8, f64)> = (0..10).map(|i| ((i >= 5) as u8, 0, i as f64)).collect();
    write_predictions(&path, &rows);
    let out = agefair(&["metric", path.to_str().unwrap(), "--groups", "2"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).starts_with("error[degenerate"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn gradcheck_passes_and_reports_the_worst_error() {
    let out = agefair(&["gradcheck", "--seed", "4"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    let worst: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .expect("summary line")
        .trim()
        .parse()
        .unwrap();
    assert!(worst < 1e-4, "{worst}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_are_categorized() {
    let out = agefair(&["train-everything"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).starts_with("error[usage]:"),
        "{}",
        stderr(&out)
    );

    let out = agefair(&["run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[usage]:"));

    let out = agefair(&["run", "--model", "svm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn library_errors_carry_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = agefair(&["metric", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[io]:"), "{}", stderr(&out));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "folds = 1\n").unwrap();
    let out = agefair(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).starts_with("error[config]:"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn synth_writes_data_and_ground_truth_that_probe_age_reads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    fs::write(
        &cfg,
        "synth.n = 150\nsynth.d = 12\nsynth.confound_strength = 0.6\n",
    )
    .unwrap();
    let out_dir = dir.path().join("syn");
    let out = agefair(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let truth: GroundTruth =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ground_truth.json")).unwrap())
            .unwrap();
    assert_eq!(truth.config.seed, 8);
    // Recompute the cosine between the effect vectors independently.
    let dot: f64 = truth
        .age_weights
        .iter()
        .zip(&truth.disease_weights)
        .map(|(a, b)| a * b)
        .sum();
    let na = truth.age_weights.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nd = truth
        .disease_weights
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt();
    assert!((dot / (na * nd) - 0.6).abs() < 1e-12);
    assert!((truth.weight_cosine - 0.6).abs() < 1e-12);

    let data = out_dir.join("data.csv");
    let header = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.starts_with("id,speaker,age,label,f0,"), "{header}");

    let json = dir.path().join("probe.json");
    let out = agefair(&[
        "probe-age",
        data.to_str().unwrap(),
        "--folds",
        "3",
        "--epochs",
        "20",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("age MAE "));
    let result: ProbeResult = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(result.fold_scores.len(), 3);
    assert!(result.mean < result.reference_mean);
}

#[test]
fn run_writes_a_consistent_report_and_per_fold_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = agefair(&[
        "run",
        "--seed",
        "3",
        "--folds",
        "3",
        "--groups",
        "2,5",
        "--model",
        "baseline_dnn,autoencoder",
        "--weight-decay",
        "0.01",
        "--set",
        "synth.n=120",
        "--set",
        "synth.d=8",
        "--set",
        "train.epochs=3",
        "--set",
        "probe.epochs=3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("| Model | Accuracy |"));

    let report =
        ExperimentReport::from_json(&fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    report.check_consistency().unwrap();
    assert_eq!(report.config.seed, 3);
    assert_eq!(report.config.train.adam.weight_decay, 0.01);
    assert_eq!(report.models.len(), 2);
    assert_eq!(
        fs::read_to_string(out_dir.join("report.md")).unwrap(),
        report.to_markdown()
    );
    for kind in ["baseline_dnn", "autoencoder"] {
        for fold in 0..3 {
            assert!(out_dir
                .join(format!("predictions/{kind}_fold{fold}.csv"))
                .exists());
            let hist = fs::read_to_string(out_dir.join(format!("histories/{kind}_fold{fold}.csv")))
                .unwrap();
            assert!(hist.starts_with("epoch,loss_c,loss_a,loss_r,loss_d\n"));
            assert_eq!(hist.lines().count(), 4);
        }
    }
}
