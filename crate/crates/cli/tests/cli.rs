use std::path::Path;
use std::process::{Command, Output};

fn lisa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lisa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = lisa(&[
        "gen-synth", "--out", s(d), "--train", "30", "--dev", "8", "--test", "8", "--test-ood", "8",
        "--dim", "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let config = d.join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "# small model\nd_model = 16\nd_k = 4\nd_q = 4\nd_v = 4\nd_r = 8\nepochs = 2\n\
             train = {}\ndev = {}\nembeddings = {}\n",
            s(&d.join("train.conll")),
            s(&d.join("dev.conll")),
            s(&d.join("embeddings.txt"))
        ),
    )
    .unwrap();
    let ckpt = d.join("m.ckpt");
    let log = d.join("log.csv");
    let out = lisa(&[
        "train", "--config", s(&config), "--checkpoint", s(&ckpt), "--log", s(&log), "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

    let pred = d.join("pred.conll");
    let out = lisa(&[
        "predict", "--checkpoint", s(&ckpt), "--input", s(&d.join("test.conll")), "--output",
        s(&pred), "--parse-source", "external", "--parse-file", s(&d.join("test.heads")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let metrics = d.join("metrics.csv");
    let out = lisa(&[
        "evaluate", "--gold", s(&d.join("test.conll")), "--input", s(&pred), "--metrics",
        s(&metrics),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.contains("\nuas,all,,,1.000000,,,,"), "{csv}");
}

#[test]
fn failures_report_a_category_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = lisa(&["train", "--train", s(&d.join("missing.conll")), "--dev", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[config]:"), "{}", stderr(&out));

    let out = lisa(&["train", "--layers", "many"]);
    assert!(stderr(&out).starts_with("error[config]:"));

    let junk = d.join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let input = d.join("in.conll");
    std::fs::write(&input, "").unwrap();
    let out = lisa(&[
        "predict", "--checkpoint", s(&junk), "--input", s(&input), "--output",
        s(&d.join("o.conll")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[checkpoint]:"), "{}", stderr(&out));

    let bad = d.join("bad.conll");
    std::fs::write(&bad, "the DT 5 -\n").unwrap();
    let out = lisa(&["evaluate", "--gold", s(&bad), "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[corpus]:"), "{}", stderr(&out));
}
