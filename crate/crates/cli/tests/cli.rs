use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn btscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btscan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = btscan(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SMALL: [&str; 6] = ["--scanners", "6", "--bt-hosts", "4", "--scan-probes", "300"];

/// Small synthetic trace written to a fresh directory.
fn synth(extra: &[&str]) -> TempDir {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["synth", "--out", out];
    args.extend(extra);
    ok(&args);
    dir
}

#[test]
fn help_and_version_succeed() {
    ok(&["--help"]);
    ok(&["--version"]);
    ok(&["analyze", "--help"]);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&btscan(&[])), 64);
    assert_eq!(code(&btscan(&["frobnicate"])), 64);
    assert_eq!(code(&btscan(&["analyze"])), 64);
    let dir = synth(&["--scanners", "1", "--bt-hosts", "0", "--scan-probes", "10"]);
    let trace = dir.path().join("trace.ndjson");
    let trace = trace.to_str().unwrap();
    for bad in [
        vec!["--ppr-lower", "2", "--ppr-upper", "1"],
        vec!["--window", "0"],
        vec!["--threshold", "0"],
        vec!["--analyzers", "http,bogus"],
        vec!["--window", "soon"],
    ] {
        let mut args = vec!["analyze", "--input", trace, "--out", dir.path().to_str().unwrap()];
        args.extend(bad.iter().copied());
        assert_eq!(code(&btscan(&args)), 64, "{bad:?}");
    }
    assert_eq!(code(&btscan(&["synth", "--unconnectable", "1.5"])), 64);
    assert_eq!(
        code(&btscan(&["roc", "--input", trace])),
        64,
        "--input without --labels"
    );
}

#[test]
fn bad_signature_file_is_a_usage_error() {
    let dir = synth(&["--scanners", "1", "--bt-hosts", "0", "--scan-probes", "10"]);
    let sigs = dir.path().join("sigs.txt");
    fs::write(&sigs, "broken line without fields\n").unwrap();
    let out = btscan(&[
        "analyze",
        "--input",
        dir.path().join("trace.ndjson").to_str().unwrap(),
        "--signatures",
        sigs.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 64);
}

#[test]
fn unreadable_input_exits_2() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.pcap");
    assert_eq!(
        code(&btscan(&[
            "analyze",
            "--input",
            missing.to_str().unwrap(),
            "--out",
            out_dir
        ])),
        2
    );

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, [0u8, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let out = btscan(&["analyze", "--input", garbage.to_str().unwrap(), "--out", out_dir]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let bad_json = dir.path().join("bad.ndjson");
    fs::write(&bad_json, "{\"ts\": \"later\"}\n").unwrap();
    assert_eq!(
        code(&btscan(&[
            "analyze",
            "--input",
            bad_json.to_str().unwrap(),
            "--out",
            out_dir
        ])),
        2
    );
    // Nothing is written on failure.
    assert!(!dir.path().join("alarms.log").exists());
}

#[test]
fn synth_is_deterministic() {
    for format in ["ndjson", "pcap"] {
        let mut args = SMALL.to_vec();
        args.extend(["--seed", "5", "--format", format]);
        let a = synth(&args);
        let b = synth(&args);
        let name = format!("trace.{format}");
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap()
        );
        assert_eq!(read(a.path(), "labels.ndjson"), read(b.path(), "labels.ndjson"));
    }
    let mut other = SMALL.to_vec();
    other.extend(["--seed", "6"]);
    let mut five = SMALL.to_vec();
    five.extend(["--seed", "5"]);
    assert_ne!(
        read(synth(&other).path(), "trace.ndjson"),
        read(synth(&five).path(), "trace.ndjson")
    );
}

#[test]
fn zero_bt_hosts_labels_only_scanners() {
    let dir = synth(&["--bt-hosts", "0", "--scanners", "6", "--scan-probes", "50"]);
    let labels = read(dir.path(), "labels.ndjson");
    assert_eq!(labels.lines().count(), 6);
    assert!(labels.lines().all(|l| l.contains("scanner")), "{labels}");
}

fn analyze(dir: &Path, input: &str) -> (String, String, serde_json::Value) {
    let out = dir.to_str().unwrap();
    ok(&["analyze", "--input", &dir.join(input).to_string_lossy(), "--out", out]);
    let summary = serde_json::from_str(&read(dir, "summary.json")).unwrap();
    (read(dir, "alarms.log"), read(dir, "suppressions.log"), summary)
}

#[test]
fn analyze_bittorrent_only_trace() {
    let dir = synth(&["--scanners", "0", "--bt-hosts", "3"]);
    let (alarms, suppressions, summary) = analyze(dir.path(), "trace.ndjson");
    assert!(!alarms.contains("AddressScan"), "{alarms}");
    assert!(suppressions.lines().any(|l| l.contains("SuppressedByPrediction")));
    assert!(summary["alarms"]["SuppressedByPrediction"].as_u64().unwrap() > 0);
    assert!(!read(dir.path(), "peermap.ndjson").is_empty());
}

#[test]
fn analyze_scanner_only_trace_from_pcap() {
    let dir = synth(&["--scanners", "6", "--bt-hosts", "0", "--format", "pcap"]);
    let (alarms, suppressions, summary) = analyze(dir.path(), "trace.pcap");
    assert!(alarms.lines().any(|l| l.contains("AddressScan")), "{alarms}");
    assert!(suppressions.is_empty(), "{suppressions}");
    assert!(summary["packets"].as_u64().unwrap() > 0);
}

#[test]
fn analyze_flags_change_the_outcome() {
    let dir = synth(&["--scanners", "0", "--bt-hosts", "3"]);
    let out = dir.path().to_str().unwrap();
    let input = dir.path().join("trace.ndjson");
    ok(&[
        "analyze",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out,
        "--no-predicted",
        "--no-ppr",
    ]);
    assert!(read(dir.path(), "alarms.log").contains("AddressScan"));
    assert!(read(dir.path(), "suppressions.log").is_empty());
}

fn roc_csv(extra: &[&str]) -> String {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["roc", "--out", dir.path().to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
    read(dir.path(), "roc.csv")
}

#[test]
fn roc_rows_and_rerun_equality() {
    let full = roc_csv(&[]);
    let lines: Vec<&str> = full.lines().collect();
    assert_eq!(lines[0], "mode,threshold,tpr,fpr");
    assert_eq!(lines.len(), 1 + 24);
    assert_eq!(full, roc_csv(&[]));
    let single = roc_csv(&["--threshold", "50"]);
    assert_eq!(single.lines().count(), 1 + 3);
    assert!(single.lines().skip(1).all(|l| l.split(',').nth(1) == Some("50")));
}

#[test]
fn roc_from_files_matches_generated() {
    let mut args = SMALL.to_vec();
    args.extend(["--seed", "3"]);
    let dir = synth(&args);
    let trace = dir.path().join("trace.ndjson");
    let labels = dir.path().join("labels.ndjson");
    let from_files = roc_csv(&["--input", trace.to_str().unwrap(), "--labels", labels.to_str().unwrap()]);
    assert_eq!(from_files, roc_csv(&["--seed", "3"]));
}

fn hist_csv(extra: &[&str]) -> String {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["hist", "--out", dir.path().to_str().unwrap()];
    args.extend(extra);
    ok(&args);
    read(dir.path(), "histogram.csv")
}

#[test]
fn histogram_bins() {
    let csv = hist_csv(&["--scanners", "0", "--bt-hosts", "4", "--bin", "60"]);
    let rows: Vec<(f64, usize)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(csv.lines().next(), Some("bin_start_seconds,count"));
    assert!(!rows.is_empty());
    for (i, (start, _)) in rows.iter().enumerate() {
        assert_eq!(*start, i as f64 * 60.0);
    }
    assert_eq!(rows.iter().map(|r| r.1).sum::<usize>(), 4);

    let empty = hist_csv(&["--scanners", "6", "--bt-hosts", "0", "--scan-probes", "300"]);
    assert_eq!(empty.lines().count(), 1);
    assert_eq!(code(&btscan(&["hist", "--k", "0"])), 64);
}

#[test]
fn breakdown_conserves_flags() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["breakdown", "--out", dir.path().to_str().unwrap()];
    args.extend(SMALL);
    ok(&args);
    let b: serde_json::Value = serde_json::from_str(&read(dir.path(), "breakdown.json")).unwrap();
    let n = |k: &str| b[k].as_u64().unwrap();
    assert_eq!(n("total_flags_baseline"), n("suppressed") + n("residual_flags"));
    assert_eq!(n("residual_flags"), n("residual_true") + n("residual_false"));
    assert_eq!(n("new_flags"), 0);
}
