use std::path::Path;
use std::process::{Command, Output};

use xakd::train::{write_history, HistoryRow, MetricsReport};

fn xakd(args: &[&str], env: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xakd"))
        .args(args)
        .env_clear()
        .envs(env.iter().copied())
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn count_params_prints_counts_and_compression() {
    let o = xakd(&["count-params", "--arch", "vit-base-16", "--versus", "mobilenet-v2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("85801732"), "{text}");
    assert!(text.contains("2228996"), "{text}");
    assert!(text.contains("compression: 97.40%"), "{text}");

    let o = xakd(&["--json", "count-params", "--arch", "mobilenet-v2", "--classes", "10"], &[]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["classes"], 10);
    assert_eq!(v["params"], 2_236_682);
}

#[test]
fn unknown_arch_is_a_runtime_error() {
    let o = xakd(&["count-params", "--arch", "resnet-9000"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[invalid]"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_2() {
    let o = xakd(&["finetune", "--model", "both"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"));
}

#[test]
fn bad_config_names_the_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = \"many\"\n").unwrap();
    let o = xakd(&["--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap(), "pretrain"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config] key=train.epochs"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let o = xakd(&["--out-dir", dir.path().to_str().unwrap(), "pretrain"], &[("XAKD_DISTILL__VIEWS", "0")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("key=distill.views"), "{}", stderr(&o));

    let o = xakd(&["--out-dir", dir.path().to_str().unwrap(), "pretrain"], &[("XAKD_TRAIN__NOPE", "1")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("key=train"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for cmd in ["eval", "quantize", "bench"] {
        let o = xakd(&["--out-dir", out, cmd, "--checkpoint", "/nonexistent/model.ckpt"], &[]);
        assert_eq!(o.status.code(), Some(3), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error[missing-checkpoint]"));
    }
    let o = xakd(&["--out-dir", out, "distill"], &[("XAKD_TEACHER__CHECKPOINT", "/nonexistent/t.ckpt")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("nodata");
    let o = xakd(
        &["--out-dir", dir.path().to_str().unwrap(), "finetune", "--model", "student"],
        &[("XAKD_DATA__ROOT", root.to_str().unwrap())],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[dataset]"), "{}", stderr(&o));
}

fn write_inputs(dir: &Path, metrics: &MetricsReport) -> (String, String) {
    let h = dir.join("history.csv");
    let rows: Vec<HistoryRow> = (0..3)
        .map(|step| HistoryRow { step, ce: 1.0, kd_pca: 0.5, kd_gl: 0.25, kd_adv: 0.7, total: 1.2, lr: 1e-3 })
        .collect();
    write_history(&h, &rows).unwrap();
    let m = dir.join("metrics.json");
    std::fs::write(&m, serde_json::to_string(metrics).unwrap()).unwrap();
    (h.display().to_string(), m.display().to_string())
}

#[test]
fn report_without_roc_warns_and_skips_roc_files() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ["a", "b"].map(String::from).to_vec();
    let metrics = MetricsReport::from_confusion(classes, vec![vec![3, 1], vec![0, 4]]).unwrap();
    let (h, m) = write_inputs(dir.path(), &metrics);
    let out = dir.path().join("report");
    let o = xakd(&["--out-dir", out.to_str().unwrap(), "report", "--history", &h, "--metrics", &m], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ROC files omitted"));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["classes.txt", "confusion.txt", "losses.csv"]);
    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().next(), Some("step,ce,kd_pca,kd_gl,kd_adv,total"));
    assert_eq!(losses.lines().count(), 4);
}

#[test]
fn report_with_scores_writes_roc_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ["a", "b"].map(String::from).to_vec();
    let labels = [0, 0, 1, 1, 1];
    let scores: Vec<Vec<f64>> = [0.9, 0.6, 0.4, 0.2, 0.7].iter().map(|&p| vec![p, 1.0 - p]).collect();
    let metrics = MetricsReport::from_scores(classes, &labels, &scores).unwrap();
    let (h, m) = write_inputs(dir.path(), &metrics);
    let out = dir.path().join("report");
    let o = xakd(&["--json", "--out-dir", out.to_str().unwrap(), "report", "--history", &h, "--metrics", &m], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["roc_skipped"], false);
    assert!(v["files"].as_array().unwrap().len() > 3);
}

#[test]
fn malformed_history_is_a_malformed_error() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("history.csv");
    std::fs::write(&h, "step,ce,kd_pca,kd_gl,kd_adv,total,lr\n0,1,2,3\n").unwrap();
    let m = dir.path().join("metrics.json");
    let metrics = MetricsReport::from_confusion(vec!["a".into(), "b".into()], vec![vec![1, 0], vec![0, 1]]).unwrap();
    std::fs::write(&m, serde_json::to_string(&metrics).unwrap()).unwrap();
    let o = xakd(
        &["--out-dir", dir.path().to_str().unwrap(), "report", "--history", h.to_str().unwrap(), "--metrics", m.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[malformed]"), "{}", stderr(&o));
}
