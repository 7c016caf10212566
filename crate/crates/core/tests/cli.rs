use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use std::io::Write;

const TRAIN: &str = "我们 去 武汉市\n长江 大桥 很 长\n我们 爱 长江\n武汉市 长江 大桥\n";

fn hgseg(dir: &Path, args: &[&str], stdin: Option<&[u8]>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_hgseg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut input = child.stdin.take().unwrap();
    input.write_all(stdin.unwrap_or_default()).unwrap();
    drop(input);
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("train.txt"), TRAIN).unwrap();
    fs::write(d.path().join("test.txt"), "我们 去 长江 大桥\n").unwrap();
    d
}

#[test]
fn no_arguments_prints_usage() {
    let d = workdir();
    let o = hgseg(d.path(), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn usage_errors_exit_2() {
    let d = workdir();
    assert_eq!(hgseg(d.path(), &["train", "--bogus"], None).status.code(), Some(2));
    assert_eq!(hgseg(d.path(), &["frobnicate"], None).status.code(), Some(2));
    fs::write(d.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let o = hgseg(d.path(), &["--config", "bad.cfg", "build-lexicon", "train.txt"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_1_with_kind() {
    let d = workdir();
    let o = hgseg(d.path(), &["build-lexicon", "missing.txt"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error\tkind=io\t")), "{}", stderr(&o));

    fs::write(d.path().join("bad.txt"), b"\xe4\xbd\n\xff\n").unwrap();
    let o = hgseg(d.path(), &["extract-ngrams", "bad.txt"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error\tkind=encoding\t"), "{}", stderr(&o));

    let o = hgseg(d.path(), &["train", "--train", "train.txt", "-o", "out", "--lr=-1"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));
}

#[test]
fn lexicon_and_ngrams_to_stdout_and_files() {
    let d = workdir();
    let o = hgseg(d.path(), &["build-lexicon", "train.txt"], None);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "长江\t3"), "{out}");
    assert!(stderr(&o).contains("\"record\":\"effective-config\""));

    let o = hgseg(d.path(), &["extract-ngrams", "train.txt", "--min-freq", "2", "-o", "ng.txt"], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());
    let ng = fs::read_to_string(d.path().join("ng.txt")).unwrap();
    assert!(ng.lines().any(|l| l.starts_with("长江大桥\t2\t")), "{ng}");
    let side = fs::read_to_string(d.path().join("ng.txt.config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&side).unwrap();
    assert_eq!(v["command"]["extract-ngrams"]["min_freq"], 2);
}

#[test]
fn train_segment_evaluate() {
    let d = workdir();
    fs::write(
        d.path().join("run.cfg"),
        "# small model\nchar_dim = 8\nhidden_dim = 8\nbatch_size = 1\nlr = 0.1\nepochs = 3\n",
    )
    .unwrap();
    let o = hgseg(
        d.path(),
        &["--config", "run.cfg", "train", "--train", "train.txt", "-o", "out", "--epochs", "20"],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("out/config.json")).unwrap()).unwrap();
    // the command line wins over the config file
    assert_eq!(cfg["command"]["train"]["hyper"]["epochs"], 20);
    assert_eq!(cfg["command"]["train"]["hyper"]["char_dim"], 8);
    let log = fs::read_to_string(d.path().join("out/train.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"record\":\"epoch\"")).count(), 20);

    let o = hgseg(d.path(), &["segment", "--model", "out/best.ckpt"], Some("我们去长江大桥\n\n共3人\n".as_bytes()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].replace(' ', ""), "我们去长江大桥");
    assert_eq!(lines[1], "");
    assert_eq!(lines[2].replace(' ', ""), "共3人");

    let o = hgseg(d.path(), &["evaluate", "--gold", "test.txt", "--model", "out/best.ckpt", "--json"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(m["f1"].as_f64().unwrap() >= 0.0);

    fs::write(d.path().join("pred.txt"), "我们 去 长江大桥\n").unwrap();
    let o = hgseg(d.path(), &["evaluate", "--gold", "test.txt", "--pred", "pred.txt", "--train", "train.txt"], None);
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "0.666667");
    assert_eq!(row[1], "0.500000");

    let o = hgseg(d.path(), &["inspect-graph", "--model", "out/best.ckpt"], Some("长江大桥\n".as_bytes()));
    assert!(stdout(&o).contains("node\tword:0\t长江"), "{}", stdout(&o));
}

#[test]
fn resume_extends_training() {
    let d = workdir();
    let common = ["train", "--train", "train.txt", "--char-dim", "4", "--hidden-dim", "4", "-o", "out"];
    let run = |extra: &[&str]| {
        let mut args = common.to_vec();
        args.extend_from_slice(extra);
        let o = hgseg(d.path(), &args, None);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run(&["--epochs", "2"]);
    run(&["--epochs", "4", "--resume", "out/last.ckpt"]);
    let log = fs::read_to_string(d.path().join("out/train.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["record"] == "epoch")
        .map(|v| v["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
}

#[test]
fn dev_ratio_rejected_with_external_rows() {
    let d = workdir();
    fs::write(d.path().join("ext.jsonl"), "").unwrap();
    let o = hgseg(
        d.path(),
        &["train", "--train", "train.txt", "--dev-ratio", "0.25", "--ext-emb", "ext.jsonl", "-o", "out"],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_on_small_model() {
    let d = workdir();
    let o = hgseg(d.path(), &["grad-check", "train.txt", "--sentences", "2"], None);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("sentence\ttensor\tchecked\tmax_rel_error\n"));
}
