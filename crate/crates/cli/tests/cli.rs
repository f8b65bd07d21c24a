use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use rawparse::oracle::sequential_parse;
use rawparse::parser::ParseOptions;

fn rawparse(args: &[&str], stdin: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_rawparse"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn oracle_container(input: &[u8]) -> Vec<u8> {
    let out = sequential_parse(input, &ParseOptions::default(), false).unwrap();
    let mut buf = Vec::new();
    out.table.write_to(&mut buf).unwrap();
    buf
}

fn write(dir: &Path, name: &str, data: &[u8]) -> String {
    let p = dir.join(name);
    std::fs::write(&p, data).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn parse_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let input = b"1,\"a,b\",2.5\n2,\"x\"\"y\",\n3,\"multi\nline\",-1e3\n";
    let path = write(dir.path(), "in.csv", input);
    for chunk in ["1", "7", "31", "64"] {
        let out = rawparse(&["parse", "-q", &path, "--chunk-size", chunk], b"");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(out.stdout, oracle_container(input), "chunk size {chunk}");
    }
}

#[test]
fn parse_stdin_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = b"1,2\n3,4\n";
    let target = dir.path().join("out.pprw");
    let out = rawparse(&["parse", "-q", "-", "-o", target.to_str().unwrap()], input);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&target).unwrap(), oracle_container(input));
}

#[test]
fn empty_input_gives_empty_container() {
    let out = rawparse(&["parse", "-q"], b"");
    assert!(out.status.success());
    assert_eq!(out.stdout, oracle_container(b""));
}

#[test]
fn sequential_engine_agrees() {
    let input = b"a,1\n\"b\nc\",2\n,3";
    let par = rawparse(&["parse", "-q", "--chunk-size", "3"], input);
    let seq = rawparse(&["parse", "-q", "--engine", "sequential"], input);
    assert!(par.status.success() && seq.status.success());
    assert_eq!(par.stdout, seq.stdout);
}

#[test]
fn csv_output() {
    let out = rawparse(&["parse", "-q", "--format", "csv"], b"1,\"a,b\"\n2,\n");
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, "1,\"a,b\"\n2,\n");
    let again = rawparse(&["parse", "-q", "--format", "csv"], text.as_bytes());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rawparse(&["parse", "--no-such-flag"], b"").status.code(), Some(2));
    assert_eq!(rawparse(&["parse", "--chunk-size", "65"], b"").status.code(), Some(2));
    assert_eq!(rawparse(&["parse", "--dialect", "nope"], b"").status.code(), Some(2));
}

#[test]
fn missing_file_exits_3() {
    let out = rawparse(&["parse", "/nonexistent/input.csv"], b"");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn validate_reports_ragged_input() {
    let out = rawparse(&["validate", "--expected-columns", "2"], b"1,a\n2\n3,c\n");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("invalid"));
    let out = rawparse(&["validate", "--expected-columns", "2"], b"1,a\n2,b\n");
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok"));
}

#[test]
fn strict_parse_fails_on_bad_column_count() {
    let out = rawparse(&["parse", "-q", "--strict", "--expected-columns", "2"], b"1,a\n2\n");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("record 1"));
}

#[test]
fn infer_reports_schema() {
    let out = rawparse(&["infer"], b"1,Apples\n2\n");
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["records"], 2);
    assert_eq!(v["min_columns"], 1);
    assert_eq!(v["max_columns"], 2);
    let text = v["schema"].to_string();
    assert!(text.contains("int64") && text.contains("utf8"), "{text}");
}

#[test]
fn gen_is_deterministic() {
    let args = ["gen", "--seed", "9", "--size", "20K", "--quote-density", "0"];
    let a = rawparse(&args, b"");
    let b = rawparse(&args, b"");
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(a.stdout.len() >= 20 << 10);
    assert!(!a.stdout.contains(&b'"'));
    let bad = rawparse(&["gen", "--quote-density", "2"], b"");
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_config() {
    let out = rawparse(
        &["bench", "--gen-size", "64K", "--chunk-sizes", "8,31", "--worker-counts", "1,2"],
        b"",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[col("hash")]).collect();
    assert_eq!(hashes.len(), 1);
    for r in &rows {
        let f = |name: &str| r[col(name)].parse::<f64>().unwrap();
        let stages = f("parse_s") + f("scan_s") + f("tag_s") + f("partition_s") + f("convert_s");
        assert!(stages <= f("wall_s") + 1e-6, "{r:?}");
    }
}
