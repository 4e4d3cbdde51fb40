//! CSV, text and SVG artifacts for curves and evaluations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::plot::{heatmap, line_chart, Series};
use super::{ConfusionMatrix, CurveLog, EpochRecord, EvalReport};

pub const CURVES_FILE: &str = "curves.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const ACCURACY_PLOT: &str = "accuracy.svg";
pub const LOSS_PLOT: &str = "loss.svg";
pub const CONFUSION_PLOT: &str = "confusion.svg";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Nine significant digits, which identify every `f32` uniquely.
fn sig9(v: f32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = (v.abs() as f64).log10().floor() as i32;
    let mut decimals = (8 - magnitude).clamp(0, 60) as usize;
    loop {
        let s = format!("{v:.decimals$}");
        if s.parse::<f32>() == Ok(v) || decimals >= 60 {
            return s;
        }
        decimals += 1;
    }
}

fn opt(v: Option<f32>) -> String {
    v.map_or(String::new(), sig9)
}

pub fn curves_to_csv(log: &CurveLog) -> String {
    let eval = log.has_eval();
    let mut out = String::from("epoch,train_loss,train_accuracy");
    if eval {
        out.push_str(",eval_accuracy,eval_macro_precision");
    }
    out.push('\n');
    for r in log.records() {
        let _ = write!(out, "{},{},{}", r.epoch, sig9(r.train_loss), sig9(r.train_accuracy));
        if eval {
            let _ = write!(out, ",{},{}", opt(r.eval_accuracy), opt(r.eval_macro_precision));
        }
        out.push('\n');
    }
    out
}

pub fn parse_curves_csv(text: &str) -> Result<CurveLog, ArtifactError> {
    let err = |line: usize, reason: String| ArtifactError::Parse { line, reason };
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let columns: Vec<&str> = head.split(',').collect();
    let eval = match columns.as_slice() {
        ["epoch", "train_loss", "train_accuracy"] => false,
        ["epoch", "train_loss", "train_accuracy", "eval_accuracy", "eval_macro_precision"] => true,
        _ => return Err(err(1, format!("unexpected header `{head}`"))),
    };
    let mut log = CurveLog::new();
    for (i, line) in lines {
        let n = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(err(n, format!("expected {} fields", columns.len())));
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| err(n, format!("bad number `{s}`")));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let record = EpochRecord {
            epoch: cells[0].parse().map_err(|_| err(n, format!("bad epoch `{}`", cells[0])))?,
            train_loss: num(cells[1])?,
            train_accuracy: num(cells[2])?,
            eval_accuracy: if eval { maybe(cells[3])? } else { None },
            eval_macro_precision: if eval { maybe(cells[4])? } else { None },
        };
        log.push(record).map_err(|e| err(n, e.to_string()))?;
    }
    Ok(log)
}

pub fn confusion_to_csv(m: &ConfusionMatrix, names: &[String]) -> String {
    let mut out = String::new();
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, row) in m.rows().enumerate() {
        out.push_str(names.get(i).map_or("", String::as_str));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses `confusion.csv` back into class names and the matrix.
pub fn parse_confusion_csv(text: &str) -> Result<(Vec<String>, ConfusionMatrix), ArtifactError> {
    let err = |line: usize, reason: String| ArtifactError::Parse { line, reason };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let names: Vec<String> = head.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        if names.get(i).map(String::as_str) != Some(label) {
            return Err(err(i + 2, format!("row label `{label}` out of order")));
        }
        let row = cells
            .map(|c| c.parse::<u64>().map_err(|_| err(i + 2, format!("bad count `{c}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let m = ConfusionMatrix::from_rows(rows).map_err(|e| err(1, e.to_string()))?;
    if m.classes() != names.len() {
        return Err(err(1, "matrix is not square in the class count".into()));
    }
    Ok((names, m))
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.6}"))
}

/// Human-readable `key: value` summary.
pub fn report_text(report: Option<&EvalReport>, log: Option<&CurveLog>, names: &[String], notes: &[String]) -> String {
    let mut out = String::new();
    if let Some(log) = log {
        let _ = writeln!(out, "epochs: {}", log.len());
        if let Some(last) = log.records().last() {
            let _ = writeln!(out, "final_train_loss: {}", sig9(last.train_loss));
            let _ = writeln!(out, "final_train_accuracy: {}", sig9(last.train_accuracy));
        } else {
            let _ = writeln!(out, "note: curve log is empty; accuracy and loss plots omitted");
        }
    }
    if let Some(r) = report {
        let _ = writeln!(out, "examples: {}", r.confusion.total());
        let _ = writeln!(out, "accuracy: {:.6}", r.accuracy);
        let _ = writeln!(out, "macro_precision: {}", fmt_ratio(r.macro_precision));
        let _ = writeln!(out, "micro_precision: {:.6}", r.micro_precision);
        for (c, name) in names.iter().enumerate() {
            let _ = writeln!(out, "precision[{name}]: {}", fmt_ratio(r.per_class_precision.get(c).copied().flatten()));
            let _ = writeln!(out, "recall[{name}]: {}", fmt_ratio(r.per_class_recall.get(c).copied().flatten()));
        }
        let excluded: Vec<&str> = r
            .undefined_precision_classes()
            .into_iter()
            .filter_map(|c| names.get(c).map(String::as_str))
            .collect();
        if !excluded.is_empty() {
            let _ = writeln!(
                out,
                "note: no predictions for {}; excluded from macro_precision",
                excluded.join(", ")
            );
        }
    }
    for n in notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

fn curve_plots(log: &CurveLog) -> Vec<(&'static str, String)> {
    if log.is_empty() {
        return Vec::new();
    }
    let pts = |f: &dyn Fn(&EpochRecord) -> Option<f32>| -> Vec<(f64, f64)> {
        log.records()
            .iter()
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v as f64)))
            .collect()
    };
    let mut acc = vec![Series {
        name: "train",
        points: pts(&|r| Some(r.train_accuracy)),
    }];
    let eval = pts(&|r| r.eval_accuracy);
    if !eval.is_empty() {
        acc.push(Series {
            name: "held-out",
            points: eval,
        });
    }
    let loss = [Series {
        name: "train",
        points: pts(&|r| Some(r.train_loss)),
    }];
    vec![
        (ACCURACY_PLOT, line_chart("Accuracy", "accuracy", &acc, Some((0.0, 1.0)))),
        (LOSS_PLOT, line_chart("Loss", "loss", &loss, None)),
    ]
}

/// Writes every file to a temporary name first and renames them only once
/// all writes have succeeded, so a failure leaves no artifact behind.
fn write_all(dir: &Path, files: Vec<(&'static str, String)>) -> Result<Vec<PathBuf>, ArtifactError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ArtifactError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut staged = Vec::with_capacity(files.len());
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (name, contents) in files {
        let tmp = dir.join(format!(".{name}.partial"));
        if let Err(e) = fs::write(&tmp, contents) {
            cleanup(&staged);
            let _ = fs::remove_file(&tmp);
            return Err(io(&tmp)(e));
        }
        staged.push((tmp, dir.join(name)));
    }
    for (i, (tmp, dst)) in staged.iter().enumerate() {
        if let Err(e) = fs::rename(tmp, dst) {
            cleanup(&staged[i..]);
            for (_, done) in &staged[..i] {
                let _ = fs::remove_file(done);
            }
            return Err(io(dst)(e));
        }
    }
    Ok(staged.into_iter().map(|(_, dst)| dst).collect())
}

/// Emits `curves.csv`, `confusion.csv`, `report.txt` and the SVG plots for
/// whichever of the curve log and evaluation report are given.
pub fn emit_artifacts(
    log: Option<&CurveLog>,
    report: Option<&EvalReport>,
    names: &[String],
    notes: &[String],
    dir: &Path,
) -> Result<Vec<PathBuf>, ArtifactError> {
    let mut files = Vec::new();
    if let Some(log) = log {
        files.push((CURVES_FILE, curves_to_csv(log)));
        files.extend(curve_plots(log));
    }
    if let Some(r) = report {
        files.push((CONFUSION_FILE, confusion_to_csv(&r.confusion, names)));
        let rows: Vec<Vec<u64>> = r.confusion.rows().map(<[u64]>::to_vec).collect();
        files.push((CONFUSION_PLOT, heatmap("Confusion matrix", names, &rows)));
    }
    files.push((REPORT_FILE, report_text(report, log, names, notes)));
    write_all(dir, files)
}

pub fn emit_curves(log: &CurveLog, dir: &Path) -> Result<Vec<PathBuf>, ArtifactError> {
    emit_artifacts(Some(log), None, &[], &[], dir)
}

pub fn emit_evaluation(report: &EvalReport, names: &[String], dir: &Path) -> Result<Vec<PathBuf>, ArtifactError> {
    emit_artifacts(None, Some(report), names, &[], dir)
}
