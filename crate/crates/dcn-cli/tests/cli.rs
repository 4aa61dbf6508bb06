//! End-to-end tests driving the compiled `dcn` binary.

use std::process::{Command, Output};

fn dcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn bench_emits_header_and_one_row_per_op() {
    let out = dcn(&[
        "bench",
        "--op",
        "dcn-ref,dcn-opt",
        "--shape",
        "1x6x6x32",
        "--groups",
        "2",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "op,n,h,w,c,groups,dtype,stage,reps,median_us,p10_us,p90_us,checksum"
    );
    // own output round-trips: every row has one field per header column
    let ncols = lines[0].split(',').count();
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), ncols, "row {row:?}");
        assert_eq!(fields[1..5], ["1", "6", "6", "32"]);
        fields[9].parse::<f64>().expect("median_us numeric");
        fields[12].parse::<f32>().expect("checksum numeric");
    }
    assert!(lines[1].starts_with("dcn-ref,"));
    assert!(lines[2].starts_with("dcn-opt,"));
}

#[test]
fn bench_rejects_unknown_op_and_bad_shape() {
    let out = dcn(&["bench", "--op", "dcn-magic", "--shape", "1x4x4x32"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown operator"));

    let out = dcn(&["bench", "--op", "dcn-opt", "--shape", "1x4x4"]);
    assert_eq!(out.status.code(), Some(2));

    let out = dcn(&["bench", "--op", "dcn-opt", "--shape", "1x4x4x32", "--reps", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_skips_attention_beyond_dense_limit() {
    let out = dcn(&[
        "bench",
        "--op",
        "attention",
        "--shape",
        "1x100x160x32",
        "--groups",
        "1",
    ]);
    assert!(out.status.success());
    // header only; the skip goes to stderr
    assert_eq!(stdout(&out).lines().count(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skip"));
}

#[test]
fn verify_is_deterministic_across_runs_and_thread_caps() {
    let base = dcn(&["verify", "--seed", "7", "--cases", "25"]);
    assert!(base.status.success(), "{}", String::from_utf8_lossy(&base.stderr));
    let text = stdout(&base);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));

    let again = dcn(&["verify", "--seed", "7", "--cases", "25"]);
    assert_eq!(stdout(&again), text);

    for threads in ["1", "4"] {
        let capped = Command::new(env!("CARGO_BIN_EXE_dcn"))
            .args(["verify", "--seed", "7", "--cases", "25"])
            .env("DCN_THREADS", threads)
            .output()
            .unwrap();
        assert!(capped.status.success());
        assert_eq!(stdout(&capped), text, "DCN_THREADS={threads}");
    }
}

#[test]
fn verify_flags_a_corrupted_kernel() {
    let out = dcn(&["verify", "--seed", "7", "--cases", "25", "--corrupt-kernel"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAIL"));
    assert!(text.contains("first failure"));
    assert!(text.contains("seed="));
}

#[test]
fn roofline_prints_exact_counts() {
    let out = dcn(&["roofline", "--shape", "56x56x128", "--groups", "8"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("14450688"));
    assert!(text.contains("1480192"));
    assert!(text.contains("25690112"));

    let csv = dcn(&["roofline", "--shape", "56x56x128", "--groups", "8", "--csv"]);
    assert!(stdout(&csv).lines().nth(1).unwrap().starts_with("56,56,128,8,9,"));
}

#[test]
fn fixtures_are_deterministic_and_respect_force() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_str().unwrap();

    let first = dcn(&["fixtures", "--out", path]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let manifest1 = std::fs::read_to_string(dir.path().join("manifest.sha256")).unwrap();
    assert_eq!(manifest1.lines().count(), 8);

    let refused = dcn(&["fixtures", "--out", path]);
    assert_eq!(refused.status.code(), Some(2));

    let forced = dcn(&["fixtures", "--out", path, "--force"]);
    assert!(forced.status.success());
    let manifest2 = std::fs::read_to_string(dir.path().join("manifest.sha256")).unwrap();
    assert_eq!(manifest1, manifest2);
}
