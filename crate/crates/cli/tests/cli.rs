use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn nmrpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmrpc"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("spawn nmrpc")
}

fn stdout(args: &[&str]) -> String {
    let out = nmrpc(args);
    assert!(
        out.status.success(),
        "nmrpc {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

/// Values of one named CSV column, parsed as numbers.
fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header
        .iter()
        .position(|h| *h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(nmrpc(&["bogus"]).status.code(), Some(1));
    assert_eq!(nmrpc(&["bars", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(nmrpc(&["scale", "--threads", "0"]).status.code(), Some(1));
    assert_eq!(nmrpc(&[]).status.code(), Some(1));
    assert_eq!(nmrpc(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one() {
    let out = nmrpc(&["--scenario", "scenarios/missing.json", "bars"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    let out = nmrpc(&["--override", "cost_params.t_cl=-1", "bars"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bars_has_every_interface_row() {
    let csv = stdout(&["bars"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,B,mrps,median_us,p99_us");
    let keys: Vec<String> = lines[1..]
        .iter()
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        keys,
        [
            "mmio,1",
            "doorbell,1",
            "doorbell,3",
            "doorbell,7",
            "doorbell,11",
            "doorbell,32",
            "coherent,1",
            "coherent,4"
        ]
    );
    let mrps = column(&csv, "mrps");
    assert!((mrps[7] - 12.4).abs() / 12.4 < 0.05, "coherent B=4 at {}", mrps[7]);
    assert!(
        (mrps[6] / mrps[1] - 1.88).abs() < 0.1,
        "coherent/doorbell ratio {}",
        mrps[6] / mrps[1]
    );
}

#[test]
fn reruns_are_byte_identical() {
    assert_eq!(stdout(&["bars"]), stdout(&["bars"]));
    let sweep = ["--seed", "3", "sweep", "--modes", "coherent:B1", "--loads", "2,6"];
    assert_eq!(stdout(&sweep), stdout(&sweep));
}

#[test]
fn zero_wire_delay_drops_every_median_by_two_hops() {
    let base = column(&stdout(&["bars"]), "median_us");
    let fast = column(&stdout(&["--override", "cost_params.t_wire=0", "bars"]), "median_us");
    // Paths without batching shift by exactly two hops. Coherent batches
    // also move relative to the NIC's poll cycle, which adds a little.
    for (b, f) in base.iter().zip(&fast) {
        assert!((b - f - 0.6).abs() <= 0.08, "median {b} -> {f}");
    }
}

#[test]
fn compare_rows_and_tor_shift() {
    let csv = stdout(&["compare"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "system,rtt_us,mrps,source");
    let sim: Vec<f64> = lines[1]
        .split(',')
        .skip(1)
        .take(2)
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((sim[0] - 2.1).abs() <= 0.2, "rtt {}", sim[0]);
    assert!((sim[1] - 12.4).abs() / 12.4 <= 0.1, "mrps {}", sim[1]);

    let fixture = std::fs::read_to_string(root().join("crates/core/data/related_work.csv")).unwrap();
    let shipped: Vec<String> = fixture.lines().skip(1).map(|l| format!("{l},published")).collect();
    assert_eq!(&lines[2..], &shipped[..]);

    let tor = stdout(&["compare", "--tor", "0.1"]);
    let rtt: f64 = tor.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((sim[0] - rtt - 0.4).abs() < 0.01, "{} -> {rtt}", sim[0]);
}

#[test]
fn calibrate_needs_two_batch_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.csv");
    std::fs::write(&one, "mode,B,mrps,role\ndoorbell,1,4.3,fit\n").unwrap();
    let out = nmrpc(&["calibrate", "--datapoints", one.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("underdetermined"));
}

#[test]
fn calibrated_params_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("fit.json");
    let residuals = dir.path().join("residuals.csv");
    stdout(&[
        "calibrate",
        "--out",
        params.to_str().unwrap(),
        "--residuals",
        residuals.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(&residuals).unwrap();
    for l in report.lines().filter(|l| l.contains(",holdout,")) {
        let err: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err.abs() <= 0.10, "{l}");
    }
    let csv = stdout(&["--params", params.to_str().unwrap(), "bars"]);
    let mrps = column(&csv, "mrps");
    assert!((mrps[0] - 4.2).abs() < 0.05);
}

#[test]
fn scenario_files_resolve_params_relative_to_themselves() {
    for name in ["single_core_coherent", "adaptive_ramp", "sync_rtt", "multi_core"] {
        let path = format!("scenarios/{name}.json");
        stdout(&["--scenario", &path, "compare"]);
    }
    // Running from another directory still finds ../params.
    let dir = tempfile::tempdir().unwrap();
    let scenario = root().join("scenarios/single_core_coherent.json");
    let out = Command::new(env!("CARGO_BIN_EXE_nmrpc"))
        .args(["--scenario", scenario.to_str().unwrap(), "rawbus", "--threads", "1,2"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn scale_and_rawbus_plateau() {
    let scale = stdout(&["scale", "--threads", "1,2,3,4,6,8"]);
    let achieved = column(&scale, "mrps");
    for &m in &achieved[3..] {
        assert!((40.0..=42.5).contains(&m), "scale plateau {m}");
    }
    let raw = column(&stdout(&["rawbus", "--threads", "1..8"]), "achieved_mrps");
    assert!((raw[7] - 80.0).abs() / 80.0 < 0.03, "raw plateau {}", raw[7]);
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bars.csv");
    let printed = stdout(&["--out", path.to_str().unwrap(), "bars"]);
    assert!(printed.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), stdout(&["bars"]));
}

#[test]
fn validate_passes_on_shipped_params() {
    let out = nmrpc(&["validate"]);
    let report = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{report}");
    assert_eq!(
        report.lines().filter(|l| l.starts_with("criterion ")).count(),
        7,
        "{report}"
    );
}
