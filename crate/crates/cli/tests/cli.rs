use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xreid"))
        .args(args)
        .output()
        .expect("spawn xreid")
}

fn gen_small(path: &Path, seed: &str) {
    let out = xreid(&[
        "gen",
        "--out",
        path.to_str().unwrap(),
        "--seed",
        seed,
        "--identities",
        "4",
        "--clips",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const TINY: [&str; 10] = ["--epochs", "1", "--steps-per-epoch", "2", "--p", "2", "--k", "1", "--layers", "1"];

#[test]
fn unknown_flag_exits_2() {
    for args in [&["train", "--bogus"][..], &["gen", "--out", "x", "--nope", "1"], &["--wat"]] {
        assert_eq!(xreid(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.xrd");
    let out = xreid(&["eval", "--data", missing.to_str().unwrap(), "--ckpt", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.xrd");
    let run = dir.path().join("run");
    gen_small(&data, "5");

    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(TINY);
    let out = xreid(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,epoch,l_total,l_cpcl,l_tri,l_ce,l_cmcl"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 7);
        for f in &fields[2..] {
            assert_eq!(f.split('.').nth(1).map(str::len), Some(6), "{row}");
        }
    }

    let ckpt = run.join("ckpt");
    let out = xreid(&["eval", "--data", data.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "protocol,rank1,rank5,rank20,map");
    assert!(lines[1].starts_with("I2V,"));
    assert!(lines[2].starts_with("V2I,"));
    assert_eq!(csv, fs::read_to_string(run.join("eval.csv")).unwrap());
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.xrd");
    let other = dir.path().join("o.xrd");
    let run = dir.path().join("run");
    gen_small(&data, "1");
    let out = xreid(&[
        "gen",
        "--out",
        other.to_str().unwrap(),
        "--identities",
        "4",
        "--clips",
        "2",
        "--height",
        "16",
    ]);
    assert!(out.status.success());
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(TINY);
    assert!(xreid(&args).status.success());
    let ckpt = run.join("ckpt");
    let out = xreid(&["eval", "--data", other.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_case() {
    let out = xreid(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,max_rel_error,checked,pass"));
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for op in ["matmul", "softmax_rows", "layernorm", "sii", "lii", "cii", "cpcl", "triplet", "ce", "cmcl"] {
        assert!(names.contains(&op), "missing {op}");
    }
}
