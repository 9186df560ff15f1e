use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, SystemTime};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ddx_bi209_61p7.csv")
}

fn phasemem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasemem")).args(args).env_remove("PHASEMEM_SEED").output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn number_after(s: &str, key: &str) -> f64 {
    let rest = &s[s.find(key).unwrap_or_else(|| panic!("{key} missing in {s}")) + key.len()..];
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn analyze_prints_fixture_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasemem(&["analyze", fixture().to_str().unwrap(), "--fb", "15,135", "--eout", "9.45", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let ratio = number_after(&out, "15/135 deg:");
    assert!((ratio - 18.0).abs() < 2.0, "{out}");
    assert!(dir.path().join("analyze.manifest.json").exists());
}

#[test]
fn correlate_prints_estimate_and_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasemem(&[
        "correlate", "--gamma-up", "1", "--beta", "0.5", "--dj", "1", "--realizations", "10000", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let est = number_after(&out, "sample correlation:");
    assert!((est - 0.667).abs() < 0.02, "{out}");
    assert!(out.contains("closed form: 0.6667"), "{out}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // missing input
    assert_eq!(phasemem(&["analyze", "no_such_file.csv", "--out", out]).status.code(), Some(3));
    assert_eq!(phasemem(&["correlate", "--config", "no_such.json", "--out", out]).status.code(), Some(3));
    // bad config names the field
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"grid": {"points": 4096, "volum": 1.0}}"#).unwrap();
    let o = phasemem(&["density", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("volum"), "{}", text(&o.stderr));
    // out-of-range value
    assert_eq!(phasemem(&["correlate", "--gamma-up=-1", "--out", out]).status.code(), Some(2));
    // malformed DDX header
    let ddx = dir.path().join("typo.csv");
    fs::write(&ddx, "E_in_MeV,61.7\nE_out_MeV,thetta_deg,frame,value,err\n9.45,15,lab,4.9,0.5\n").unwrap();
    let o = phasemem(&["analyze", ddx.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    // infeasible model request
    assert_eq!(phasemem(&["density", "--q", "0.5", "--out", out]).status.code(), Some(4));
    // usage error
    assert_eq!(phasemem(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(phasemem(&["--help"]).status.code(), Some(0));
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_phasemem"))
        .args(["correlate", "--realizations", "50", "--out", dir.path().to_str().unwrap()])
        .env("PHASEMEM_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("correlate.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 77);
    assert_eq!(m["config"]["seed"], 77);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (d, t) in [(&a, "1"), (&b, "3")] {
        let o = phasemem(&["correlate", "--realizations", "300", "--seed", "5", "--threads", t, "--out", d.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["correlation.csv", "correlate.manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = phasemem(&["correlate", "--realizations", "200", "--beta", "0.2", "--seed", "8", "--out", first.to_str().unwrap()]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(first.join("correlate.manifest.json")).unwrap()).unwrap();
    let cfg = dir.path().join("resolved.json");
    fs::write(&cfg, serde_json::to_string(&m["config"]).unwrap()).unwrap();
    let second = dir.path().join("second");
    let o = phasemem(&["correlate", "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(fs::read(first.join("correlation.csv")).unwrap(), fs::read(second.join("correlation.csv")).unwrap());
}

fn report_lines(dir: &Path) -> (i32, Vec<String>) {
    let o = phasemem(&["report", dir.to_str().unwrap()]);
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap_or_default();
    (o.status.code().unwrap(), csv.lines().skip(1).map(String::from).collect())
}

#[test]
fn report_single_run_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r1");
    assert!(phasemem(&["correlate", "--realizations", "100", "--out", run.to_str().unwrap()]).status.success());
    let (code, rows) = report_lines(dir.path());
    assert_eq!(code, 0);
    assert_eq!(rows.len(), 1, "{rows:?}");
    assert!(rows[0].starts_with("r1/correlate.manifest.json,correlate,1,correlation,"), "{}", rows[0]);
}

fn set_mtime(path: &Path, t: SystemTime) {
    fs::File::options().write(true).open(path).unwrap().set_modified(t).unwrap();
}

#[test]
fn report_orders_by_time_and_flags_corrupt_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    assert!(phasemem(&["correlate", "--realizations", "100", "--out", r1.to_str().unwrap()]).status.success());
    assert!(phasemem(&["analyze", fixture().to_str().unwrap(), "--out", r2.to_str().unwrap()]).status.success());
    let base = SystemTime::now() - Duration::from_secs(3600);
    set_mtime(&r1.join("correlate.manifest.json"), base + Duration::from_secs(10));
    set_mtime(&r2.join("analyze.manifest.json"), base);
    let (_, rows) = report_lines(dir.path());
    assert!(rows[0].contains(",analyze,"), "{rows:?}");
    assert!(rows.last().unwrap().contains(",correlate,"), "{rows:?}");

    fs::write(dir.path().join("broken.manifest.json"), "{ not json").unwrap();
    set_mtime(&dir.path().join("broken.manifest.json"), base + Duration::from_secs(20));
    let (code, rows) = report_lines(dir.path());
    assert_eq!(code, 0);
    assert_eq!(rows.last().unwrap(), "broken.manifest.json,,,,,,,,invalid");
}

#[test]
fn report_on_empty_or_missing_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(phasemem(&["report", dir.path().to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(phasemem(&["report", dir.path().join("missing").to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn svg_format_adds_plots() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasemem(&["density", "--points", "512", "--format", "svg", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let svg = fs::read_to_string(dir.path().join("needle.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("density.manifest.json")).unwrap()).unwrap();
    assert!(m["outputs"].as_array().unwrap().iter().any(|f| f["path"] == "needle.svg"));
}
