//! Text and CSV artifacts rendered from a loss history and a metrics JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{parse_history, HistoryRow, MetricsReport};

/// Files produced by [`write_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
    /// Set when the metrics carried no ROC curves.
    pub roc_skipped: bool,
}

/// Loss components per step, without the learning-rate column.
pub fn loss_curves_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,ce,kd_pca,kd_gl,kd_adv,total\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.ce, r.kd_pca, r.kd_gl, r.kd_adv, r.total);
    }
    out
}

/// One `fpr,tpr` file per class with a curve, plus an AUC summary.
pub fn roc_files(metrics: &MetricsReport) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut summary = String::from("class,auc\n");
    for ((class, pts), auc) in metrics.classes.iter().zip(&metrics.roc).zip(&metrics.auc) {
        if pts.is_empty() {
            continue;
        }
        let mut csv = String::from("fpr,tpr\n");
        for (x, y) in pts {
            let _ = writeln!(csv, "{x},{y}");
        }
        files.push((format!("roc_{class}.csv"), csv));
        if let Some(a) = auc {
            let _ = writeln!(summary, "{class},{a:.4}");
        }
    }
    if !files.is_empty() {
        files.push(("auc.csv".into(), summary));
    }
    files
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    if !path.exists() {
        return Err(Error::Dataset(format!("history file {} not found", path.display())));
    }
    parse_history(&std::fs::read_to_string(path)?)
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    if !path.exists() {
        return Err(Error::Dataset(format!("metrics file {} not found", path.display())));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Writes the confusion table, the per-class table, loss curves and ROC files.
pub fn write_report(rows: &[HistoryRow], metrics: &MetricsReport, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = ReportFiles::default();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body)?;
        files.written.push(p);
        Ok(())
    };
    put("confusion.txt", &metrics.confusion_table())?;
    put("classes.txt", &metrics.class_table())?;
    put("losses.csv", &loss_curves_csv(rows))?;
    let roc = roc_files(metrics);
    for (name, body) in &roc {
        put(name, body)?;
    }
    files.roc_skipped = roc.is_empty();
    if files.roc_skipped {
        log::warn!("metrics carry no ROC curves; ROC files omitted");
    }
    Ok(files)
}
