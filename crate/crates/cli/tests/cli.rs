use std::path::{Path, PathBuf};
use std::process::Command;

fn cxr(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cxr")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn corda_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corda_shaped.csv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SUBCOMMANDS: [&[&str]; 10] = [
    &["synth"],
    &["report-composition"],
    &["split"],
    &["pretrain"],
    &["train-head"],
    &["cross-validate"],
    &["evaluate"],
    &["study", "serve"],
    &["study", "simulate"],
    &["study", "analyze"],
];

#[test]
fn help_exits_zero_and_lists_common_flags() {
    let (code, out, _) = cxr(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("report-composition"));
    for sub in SUBCOMMANDS {
        let mut args = sub.to_vec();
        args.push("--help");
        let (code, out, err) = cxr(&args);
        assert_eq!(code, 0, "{sub:?}: {err}");
        assert!(out.contains("--seed") && out.contains("--config"), "{sub:?}:\n{out}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let (code, _, err) = cxr(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());
    let (code, _, err) = cxr(&["split", "--manifest", "x.csv", "--out", "y", "--bogus"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, err) = cxr(&["report-composition", "--manifest", "/nonexistent/manifest.csv"]);
    assert_eq!(code, 2);
    assert!(err.contains("error"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nepochs = 'many'\n").unwrap();
    let (code, _, _) = cxr(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--manifest",
        "m",
        "--findings",
        "f",
        "--out",
        "o",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn composition_report_reproduces_the_site_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t1.csv");
    let (code, out, err) = cxr(&[
        "report-composition",
        "--manifest",
        s(&corda_manifest()),
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code, 0, "{err}");
    let total = out.lines().find(|l| l.starts_with("Total")).unwrap();
    let cells: Vec<&str> = total.split_whitespace().collect();
    assert_eq!(cells, vec!["Total", "906", "695", "1340/261"]);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.lines().any(|l| l == "Total,906,695,1340,261"));
}

#[test]
fn split_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a.csv"),
        dir.path().join("b.csv"),
        dir.path().join("c.csv"),
    );
    let m = corda_manifest();
    for out in [&a, &b] {
        let (code, _, err) = cxr(&["split", "--manifest", s(&m), "--k", "4", "--seed", "7", "--out", s(out)]);
        assert_eq!(code, 0, "{err}");
    }
    cxr(&["split", "--manifest", s(&m), "--k", "4", "--seed", "8", "--out", s(&c)]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn end_to_end_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.toml");
    std::fs::write(
        &cfg,
        "[train]\nchannels = [4, 8, 8, 16]\nimage_side = 32\npretrain_epochs = 1\nepochs = 3\nbatch_size = 16\nhidden_width = 16\n\n[synth]\nn_per_class = 24\nimage_size = 32\nbias_correlation = 0.8\n",
    )
    .unwrap();
    let data = d.join("data");
    let run = |args: &[&str]| {
        let mut full = vec!["--config", s(&cfg), "--seed", "3"];
        full.extend_from_slice(args);
        let (code, out, err) = cxr(&full);
        assert_eq!(code, 0, "{args:?}\nstdout: {out}\nstderr: {err}");
        out
    };
    run(&["synth", "--out", s(&data)]);
    let manifest = data.join("manifest.csv");
    let out = run(&["report-composition", "--manifest", s(&manifest)]);
    assert!(out.contains("S0") && out.contains("S1"));
    let enc = d.join("enc.ckpt");
    run(&[
        "pretrain",
        "--manifest",
        s(&manifest),
        "--findings",
        s(&data.join("findings.csv")),
        "--out",
        s(&enc),
    ]);
    let head = d.join("head.ckpt");
    let out = run(&[
        "train-head",
        "--manifest",
        s(&manifest),
        "--encoder",
        s(&enc),
        "--lambda",
        "1",
        "--out",
        s(&head),
    ]);
    assert!(out.contains("lambda 1"), "{out}");
    let curve = std::fs::read_to_string(d.join("head.ckpt.curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let folds = d.join("folds.csv");
    run(&["split", "--manifest", s(&manifest), "--k", "2", "--out", s(&folds)]);
    let (table, preds) = (d.join("table.csv"), d.join("preds.csv"));
    let out = run(&[
        "cross-validate",
        "--manifest",
        s(&manifest),
        "--folds",
        s(&folds),
        "--encoder",
        s(&enc),
        "--out",
        s(&table),
        "--predictions",
        s(&preds),
        "--epochs",
        "2",
    ]);
    assert!(out.contains("Avg."), "{out}");
    let table_text = std::fs::read_to_string(&table).unwrap();
    assert!(table_text.starts_with("method,S0,S1,avg\n"), "{table_text}");
    let metrics = d.join("metrics.csv");
    run(&["evaluate", "--predictions", s(&preds), "--out", s(&metrics)]);
    let m = std::fs::read_to_string(&metrics).unwrap();
    for group in ["baseline,all,48,", "fairkl,all,48,", "baseline,S0,", "fairkl,S1,"] {
        assert!(m.contains(group), "missing {group} in\n{m}");
    }
}
