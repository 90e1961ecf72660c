use std::fs;
use std::path::Path;

use sct_core::data::{load_pairs, pair_paths};
use sct_core::ope::evaluate_dirs;
use sct_core::ImageTensor;

fn write_png(path: &Path, value: f64) {
    ImageTensor::filled(3, 2, 3, value).unwrap().save_png(path).unwrap();
}

#[test]
fn large_pair_set_is_matched_in_order() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["low", "normal"] {
        fs::create_dir(dir.path().join(sub)).unwrap();
    }
    // written in reverse so directory order cannot help
    for i in (0..485).rev() {
        let name = format!("{i}.png");
        write_png(&dir.path().join("low").join(&name), 0.1);
        write_png(&dir.path().join("normal").join(&name), 0.6);
    }
    let pairs = pair_paths(dir.path()).unwrap();
    assert_eq!(pairs.len(), 485);
    let names: Vec<&str> = pairs.iter().map(|p| p.name.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert!(pairs.iter().all(|p| p.low.file_name() == p.normal.file_name()));

    let loaded = load_pairs(dir.path()).unwrap();
    assert_eq!(loaded.len(), 485);
    let expect = (0.1f64 * 255.0).round() / 255.0;
    assert!(loaded[0]
        .low
        .tensor()
        .data()
        .iter()
        .all(|&v| (v - expect).abs() < 1e-12));
}

#[test]
fn orphan_images_are_named() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["low", "normal"] {
        fs::create_dir(dir.path().join(sub)).unwrap();
    }
    write_png(&dir.path().join("low/a.png"), 0.1);
    write_png(&dir.path().join("normal/a.png"), 0.5);
    write_png(&dir.path().join("low/b.png"), 0.1);
    let err = pair_paths(dir.path()).unwrap_err().to_string();
    assert!(err.contains("low/b.png"), "{err}");
}

fn write_track(path: &Path, boxes: &[(f64, f64, f64, f64)]) {
    let text: String = boxes.iter().map(|(x, y, w, h)| format!("{x},{y},{w},{h}\n")).collect();
    fs::write(path, text).unwrap();
}

#[test]
fn evaluation_over_directories() {
    let pred = tempfile::tempdir().unwrap();
    let truth = tempfile::tempdir().unwrap();
    let track: Vec<_> = (0..10).map(|i| (i as f64, 2.0, 10.0, 8.0)).collect();
    write_track(&pred.path().join("seq_a.txt"), &track);
    write_track(&truth.path().join("seq_a.txt"), &track);
    let shifted: Vec<_> = track.iter().map(|&(x, y, w, h)| (x + 100.0, y, w, h)).collect();
    write_track(&pred.path().join("seq_b.txt"), &shifted);
    write_track(&truth.path().join("seq_b.txt"), &track);
    write_track(&pred.path().join("only_pred.txt"), &track);
    write_track(&truth.path().join("only_truth.txt"), &track);
    fs::write(pred.path().join("broken.txt"), "1,2,3\n").unwrap();
    write_track(&truth.path().join("broken.txt"), &track);

    let report = evaluate_dirs(pred.path(), truth.path()).unwrap();
    assert!(!report.is_clean());
    assert_eq!(
        report.orphans,
        vec!["only_pred.txt (predictions only)", "only_truth.txt (ground truth only)"]
    );
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].1.contains("broken.txt:1:"), "{:?}", report.failures);

    let a = report.sequences.iter().find(|s| s.name == "seq_a.txt").unwrap();
    assert_eq!(a.precision_at_20, 1.0);
    assert_eq!(a.auc, 20.0 / 21.0);
    let b = report.sequences.iter().find(|s| s.name == "seq_b.txt").unwrap();
    assert_eq!(b.precision_at_20, 0.0);
    assert_eq!(b.auc, 0.0);
    let agg = report.aggregate.as_ref().unwrap();
    assert_eq!(agg.sequences, 2);
    assert_eq!(agg.precision_at_20, 0.5);

    let out = tempfile::tempdir().unwrap();
    let json = out.path().join("report.json");
    report.write_json(&json).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["aggregate"]["precision_at_20"], 0.5);
    assert_eq!(v["sequences"].as_array().unwrap().len(), 2);

    let csv_path = out.path().join("curves.csv");
    report.write_curves_csv(&csv_path).unwrap();
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,sequence,threshold,value"));
    // 51 precision + 21 success thresholds for two sequences and the aggregate
    assert_eq!(lines.count(), 3 * (51 + 21));
}

#[test]
fn empty_directories_are_an_error() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(evaluate_dirs(a.path(), b.path()).is_err());
}
