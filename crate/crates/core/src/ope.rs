//! One-pass-evaluation tracking metrics.
//!
//! Precision counts frames whose center location error is at most a pixel
//! threshold (0..=50). Success counts frames whose IoU exceeds an overlap
//! threshold on the grid `0, 0.05, ..., 1`; AUC is the mean over that grid.
//! Ground-truth frames with zero width or height are excluded and counted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Pixel threshold of the headline precision score.
pub const PRECISION_THRESHOLD: usize = 20;
pub const PRECISION_MAX: usize = 50;
pub const SUCCESS_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("non-finite box ({x}, {y}, {w}, {h})")));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::invalid(format!("negative box size {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        self.w == 0.0 || self.h == 0.0
    }
}

/// Center location error.
pub fn cle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    // extents measured edge-to-edge so that identical boxes give exactly 1
    let (ar, ab) = (a.x + a.w, a.y + a.h);
    let (br, bb) = (b.x + b.w, b.y + b.h);
    let area = |l: f64, t: f64, r: f64, btm: f64| (r - l) * (btm - t);
    let iw = (ar.min(br) - a.x.max(b.x)).max(0.0);
    let ih = (ab.min(bb) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = area(a.x, a.y, ar, ab) + area(b.x, b.y, br, bb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub name: String,
    pub predicted: Vec<BoundingBox>,
    pub truth: Vec<BoundingBox>,
}

impl TrajectoryPair {
    pub fn new(name: impl Into<String>, predicted: Vec<BoundingBox>, truth: Vec<BoundingBox>) -> Result<Self> {
        let name = name.into();
        if predicted.len() != truth.len() {
            return Err(Error::invalid(format!(
                "sequence {name}: {} predicted frames but {} ground-truth frames",
                predicted.len(),
                truth.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::invalid(format!("sequence {name} has no frames")));
        }
        Ok(Self { name, predicted, truth })
    }

    /// Frame pairs whose ground truth has positive area.
    fn valid_frames(&self) -> impl Iterator<Item = (&BoundingBox, &BoundingBox)> {
        self.predicted
            .iter()
            .zip(&self.truth)
            .filter(|(_, t)| !t.is_degenerate())
    }

    pub fn excluded_frames(&self) -> usize {
        self.truth.iter().filter(|t| t.is_degenerate()).count()
    }
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=PRECISION_MAX).map(|t| t as f64).collect()
}

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    fn fraction(thresholds: Vec<f64>, scores: &[f64], hit: impl Fn(f64, f64) -> bool) -> Self {
        let n = scores.len() as f64;
        let values = thresholds
            .iter()
            .map(|&t| {
                if scores.is_empty() {
                    0.0
                } else {
                    scores.iter().filter(|&&s| hit(s, t)).count() as f64 / n
                }
            })
            .collect();
        Self { thresholds, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn average(curves: &[&Curve]) -> Option<Curve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let values = (0..first.values.len())
            .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
            .collect();
        Some(Curve {
            thresholds: first.thresholds.clone(),
            values,
        })
    }
}

/// Fraction of valid frames with CLE at most each pixel threshold.
pub fn precision_curve(t: &TrajectoryPair) -> Curve {
    let errors: Vec<f64> = t.valid_frames().map(|(p, g)| cle(p, g)).collect();
    Curve::fraction(precision_thresholds(), &errors, |e, th| e <= th)
}

/// Fraction of valid frames with IoU strictly above each overlap threshold.
pub fn success_curve(t: &TrajectoryPair) -> Curve {
    let overlaps: Vec<f64> = t.valid_frames().map(|(p, g)| iou(p, g)).collect();
    Curve::fraction(success_thresholds(), &overlaps, |o, th| o > th)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceResult {
    pub name: String,
    pub frames: usize,
    pub excluded_frames: usize,
    pub precision_at_20: f64,
    pub auc: f64,
    #[serde(skip)]
    pub precision: Curve,
    #[serde(skip)]
    pub success: Curve,
}

pub fn evaluate(t: &TrajectoryPair) -> SequenceResult {
    let precision = precision_curve(t);
    let success = success_curve(t);
    SequenceResult {
        name: t.name.clone(),
        frames: t.truth.len(),
        excluded_frames: t.excluded_frames(),
        precision_at_20: precision.values[PRECISION_THRESHOLD],
        auc: success.mean(),
        precision,
        success,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub precision_at_20: f64,
    pub auc: f64,
    #[serde(skip)]
    pub precision: Curve,
    #[serde(skip)]
    pub success: Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpeReport {
    pub sequences: Vec<SequenceResult>,
    pub aggregate: Option<Aggregate>,
    /// Sequence files present in only one of the two directories.
    pub orphans: Vec<String>,
    /// Sequences that could not be evaluated, with the reason.
    pub failures: Vec<(String, String)>,
}

impl OpeReport {
    pub fn from_results(sequences: Vec<SequenceResult>) -> Self {
        let prec: Vec<&Curve> = sequences.iter().map(|s| &s.precision).collect();
        let succ: Vec<&Curve> = sequences.iter().map(|s| &s.success).collect();
        let aggregate = Curve::average(&prec)
            .zip(Curve::average(&succ))
            .map(|(p, s)| Aggregate {
                sequences: sequences.len(),
                precision_at_20: p.values[PRECISION_THRESHOLD],
                auc: s.mean(),
                precision: p,
                success: s,
            });
        Self {
            sequences,
            aggregate,
            orphans: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.orphans.is_empty() && self.failures.is_empty()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Long-format curve table: `metric,sequence,threshold,value`.
    pub fn write_curves_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["metric", "sequence", "threshold", "value"])?;
        let mut rows = |metric: &str, name: &str, c: &Curve| -> Result<()> {
            for (t, v) in c.thresholds.iter().zip(&c.values) {
                w.write_record([metric, name, &t.to_string(), &v.to_string()])?;
            }
            Ok(())
        };
        for s in &self.sequences {
            rows("precision", &s.name, &s.precision)?;
            rows("success", &s.name, &s.success)?;
        }
        if let Some(a) = &self.aggregate {
            rows("precision", "aggregate", &a.precision)?;
            rows("success", "aggregate", &a.success)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 comma-separated values, got {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
        }
        boxes.push(BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?);
    }
    Ok(boxes)
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoundingBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, path)
}

fn sequence_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_owned(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Evaluates every sequence file present in both directories.
/// Orphans and unreadable sequences are recorded in the report rather than aborting.
pub fn evaluate_dirs(pred_dir: impl AsRef<Path>, truth_dir: impl AsRef<Path>) -> Result<OpeReport> {
    let (pred_dir, truth_dir) = (pred_dir.as_ref(), truth_dir.as_ref());
    let pred = sequence_files(pred_dir)?;
    let mut truth = sequence_files(truth_dir)?;
    if pred.is_empty() && truth.is_empty() {
        return Err(Error::Dataset(format!(
            "no sequence files in {} or {}",
            pred_dir.display(),
            truth_dir.display()
        )));
    }
    let mut matched = Vec::new();
    let mut orphans = Vec::new();
    for (name, p) in pred {
        match truth.remove(&name) {
            Some(t) => matched.push((name, p, t)),
            None => orphans.push(format!("{name} (predictions only)")),
        }
    }
    orphans.extend(truth.into_keys().map(|n| format!("{n} (ground truth only)")));

    let outcomes: Vec<(String, Result<SequenceResult>)> = matched
        .par_iter()
        .map(|(name, p, t)| {
            let r = read_boxes(p)
                .and_then(|pb| Ok((pb, read_boxes(t)?)))
                .and_then(|(pb, tb)| TrajectoryPair::new(name.clone(), pb, tb))
                .map(|pair| evaluate(&pair));
            (name.clone(), r)
        })
        .collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (name, r) in outcomes {
        match r {
            Ok(s) => results.push(s),
            Err(e) => failures.push((name, e.to_string())),
        }
    }
    let mut report = OpeReport::from_results(results);
    report.orphans = orphans;
    report.failures = failures;
    Ok(report)
}
