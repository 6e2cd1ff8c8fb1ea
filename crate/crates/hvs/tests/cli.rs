use std::path::Path;
use std::process::Command;

fn hvs(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hvs")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "hvs {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = ["--data", "d.hvsd", "--split", "split.json"];
    hvs(d, &["gen-data", "--identities", "24", "--per-id", "20", "--dim", "8", "--test-identities", "6", "--out", "d.hvsd", "--split-out", "split.json"]);
    fn train<'a>(data: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        [data, &["--epochs", "2", "--batch-size", "32"], extra].concat()
    }
    hvs(d, &[&["train-gallery"][..], &train(&data, &["--hidden", "16,16", "--embedding-dim", "4", "--out", "g.hvsc"])].concat());
    hvs(
        d,
        &[
            &["train-query"][..],
            &train(&data, &["--method", "bct", "--gallery-ckpt", "g.hvsc", "--prune-method", "magnitude", "--prune-fraction", "0.5", "--out", "q.hvsc", "--log", "q.json"]),
        ]
        .concat(),
    );
    let report: serde_json::Value = serde_json::from_str(&hvs(d, &[&["eval"][..], &data, &["--query-ckpt", "q.hvsc", "--gallery-ckpt", "g.hvsc"]].concat())).unwrap();
    for key in ["m_qq", "m_qg", "m_gg", "compatible"] {
        assert!(report.get(key).is_some(), "missing {key} in {report}");
    }

    hvs(d, &[&["prune"][..], &data, &["--gallery-ckpt", "g.hvsc", "--method", "activation", "--fraction", "0.25", "--out", "p.hvsc"]].concat());
    std::fs::write(
        d.join("space.json"),
        r#"{"num_layers":2,"block_kinds":2,"width_choices":[0.5,1.0],"base_width":8,"input_dim":8,"embedding_dim":4}"#,
    )
    .unwrap();
    hvs(d, &[&["train-supernet"][..], &train(&data, &["--space", "space.json", "--warmup", "1", "--gallery-ckpt", "g.hvsc", "--out", "s.hvsc"])].concat());
    let out = hvs(
        d,
        &[&["search"][..], &data, &["--supernet-ckpt", "s.hvsc", "--gallery-ckpt", "g.hvsc", "--generations", "2", "--population", "6", "--crossover", "4", "--out", "search.json"]].concat(),
    );
    assert!(out.lines().count() >= 1);
    assert!(d.join("top5.json").exists());
}

#[test]
fn cost_curve_output() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = hvs(tmp.path(), &["cost-curve", "--gallery-flops", "7597", "--query-flops", "329", "--max-exp", "2", "--per-decade", "1"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("ratio,cost"));
    assert_eq!(lines.next().unwrap().split(',').nth(1).unwrap().parse::<f64>().unwrap(), 7597.0);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hvs"))
        .current_dir(tmp.path())
        .args(["eval", "--data", "missing.hvsd", "--query-ckpt", "q", "--gallery-ckpt", "g"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.hvsd"));
}
