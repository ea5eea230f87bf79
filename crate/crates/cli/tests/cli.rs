use std::path::Path;
use std::process::{Command, Output};

fn guda(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guda")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "foo = 1\n").unwrap();
    let o = guda(&["--config", "bad.toml", "--out", "run", "synth"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("foo"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn report_on_empty_dir_lists_missing() {
    let dir = tempfile::tempdir().unwrap();
    let o = guda(&["--out", "empty", "report"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for f in ["align/metrics.json", "select/metrics.json", "eval/metrics.json"] {
        assert!(err.contains(f), "{err}");
    }
}

#[test]
fn stage_without_inputs_names_them() {
    let dir = tempfile::tempdir().unwrap();
    let o = guda(&["--out", "r", "align"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("clusters/assignments.tsv"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[nmt]\nlr = -1.0\n").unwrap();
    let o = guda(&["--config", "c.toml", "synth"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

fn precision_from_files(run: &Path, method: &str) -> f64 {
    let labels: Vec<usize> = std::fs::read_to_string(run.join("corpora/pool.b.labels.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    let sel = std::fs::read_to_string(run.join(format!("select/{method}.tsv"))).unwrap();
    let ids: Vec<usize> =
        sel.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    ids.iter().filter(|&&i| labels[i] == 1).count() as f64 / ids.len() as f64
}

#[test]
fn pipeline_then_report_and_stage_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let o = guda(&["--out", "run", "--jobs", "4", "pipeline"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in [
        "report/summary.csv",
        "report/summary.json",
        "align/adaptive.xpr",
        "classify/classifier.xpr",
        "adapt/base.xpr",
        "adapt/reverse.xpr",
        "adapt/adapted.xpr",
        "adapt/discriminators.xpr",
        "ablate/k.csv",
        "ablate/losses.csv",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let k_rows = std::fs::read_to_string(run.join("ablate/k.csv")).unwrap().lines().count();
    assert_eq!(k_rows, 7);

    let summary = std::fs::read(run.join("report/summary.csv")).unwrap();
    let json = std::fs::read(run.join("report/summary.json")).unwrap();
    assert_eq!(guda(&["--out", "run", "report"], dir.path()).status.code(), Some(0));
    assert_eq!(std::fs::read(run.join("report/summary.csv")).unwrap(), summary);
    assert_eq!(std::fs::read(run.join("report/summary.json")).unwrap(), json);

    let text = String::from_utf8(summary).unwrap();
    for method in ["ours", "random", "ced", "domain_finetune"] {
        let line = text.lines().find(|l| l.starts_with(&format!("select,precision_at_k.{method},"))).unwrap();
        let reported: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((reported - precision_from_files(&run, method)).abs() < 1e-6, "{method}");
    }

    let ours = std::fs::read(run.join("select/ours.tsv")).unwrap();
    std::fs::remove_file(run.join("select/ours.tsv")).unwrap();
    assert_eq!(guda(&["--out", "run", "select"], dir.path()).status.code(), Some(0));
    assert_eq!(std::fs::read(run.join("select/ours.tsv")).unwrap(), ours);
}
