//! Classification metrics from a confusion matrix and from scores, and the
//! report files the `report` command renders.
//!
//! ```text
//! cargo run --example metrics_report -- [out_dir]
//! ```

use rand::Rng;
use xakd::cli::write_report;
use xakd::data::CLASSES;
use xakd::rng;
use xakd::train::{HistoryRow, MetricsReport};

fn main() -> xakd::Result<()> {
    let classes: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
    let confusion = vec![vec![89, 1, 14, 0], vec![1, 220, 6, 15], vec![0, 3, 93, 36], vec![4, 2, 1, 268]];
    let m = MetricsReport::from_confusion(classes.clone(), confusion)?;
    println!("{}\n{}", m.confusion_table(), m.class_table());

    // weakly informative scores: the true class gets a small bonus
    let mut r = rng::stream(11, "scores");
    let labels: Vec<usize> = (0..2000).map(|_| r.gen_range(0..4)).collect();
    let scores: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let raw: Vec<f64> = (0..4).map(|c| r.gen::<f64>() + if c == y { 0.3 } else { 0.0 }).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let scored = MetricsReport::from_scores(classes, &labels, &scores)?;
    for (c, a) in scored.classes.iter().zip(&scored.auc) {
        println!("AUC {c:<9} {:.3}", a.unwrap_or(f64::NAN));
    }

    let history: Vec<HistoryRow> = (0..20)
        .map(|step| {
            let f = (-(step as f64) / 8.0).exp();
            HistoryRow { step, ce: 1.4 * f, kd_pca: 0.3 * f, kd_gl: 0.5 * f, kd_adv: 0.7, total: 1.0 * f + 0.1, lr: 1e-3 }
        })
        .collect();
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("xakd-report"));
    let files = write_report(&history, &scored, &out)?;
    println!("\nwrote {} files under {}", files.written.len(), out.display());
    Ok(())
}
