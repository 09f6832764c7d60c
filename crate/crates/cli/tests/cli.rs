use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use entlink::timetag::decode_stream;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
n_cycles = 120000
set_cycles = 20000

[source]
pair_probability = 0.5
fss_ueV = 0.0

[detectors.xx]
efficiency = 1.0
jitter_fwhm_ps = 0.0
dark_rate_cps = 0.0

[detectors.x]
efficiency = 1.0
jitter_fwhm_ps = 0.0
dark_rate_cps = 0.0

[analysis]
slice_duration_ps = 60000000
"#;

const AUTOCORRELATION: &str = r#"
mode = "autocorrelation"
n_cycles = 200000

[source]
multi_photon_probability = 0.05
"#;

fn entlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entlink"))
        .args(args)
        .env_remove("ENTLINK_OUT")
        .output()
        .expect("binary runs")
}

fn config(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulated(dir: &TempDir, text: &str) -> (String, String) {
    let cfg = config(dir, "run.toml", text);
    let out = path_str(&dir.path().join("run"));
    let o = entlink(&["simulate", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    (cfg, out)
}

#[test]
fn simulate_then_fidelity_on_a_noiseless_source() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = simulated(&dir, SMALL);
    for f in ["manifest.json", "ch0_xx-p.etag", "ch1_xx-q.etag", "ch2_x-p.etag", "ch3_x-q.etag"] {
        assert!(Path::new(&out).join(f).exists(), "{f}");
    }
    let o = entlink(&["fidelity", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("peak ungated"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("fidelity.json")).unwrap()).unwrap();
    let peak = report["gated_peak"]["fidelity"].as_f64().unwrap();
    assert!(peak >= 0.99, "{peak}");
    let curve = fs::read_to_string(Path::new(&out).join("delay_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("tau_ps,fidelity,sigma"));
    assert!(Path::new(&out).join("fidelity_map.csv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "run.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(entlink(&["simulate", "--config", &cfg, "--out", &path_str(&a)]).status.success());
    assert!(entlink(&["--deterministic", "simulate", "--config", &cfg, "--out", &path_str(&b)]).status.success());
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn seed_flag_changes_the_streams() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "run.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(entlink(&["simulate", "--config", &cfg, "--out", &path_str(&a)]).status.success());
    assert!(entlink(&["simulate", "--config", &cfg, "--seed", "4", "--out", &path_str(&b)]).status.success());
    assert_ne!(fs::read(a.join("ch2_x-p.etag")).unwrap(), fs::read(b.join("ch2_x-p.etag")).unwrap());
    // the seed is part of the configuration the manifest was made from
    let o = entlink(&["fidelity", "--config", &cfg, "--out", &path_str(&b)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = entlink(&["fidelity", "--config", &cfg, "--seed", "4", "--out", &path_str(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn zero_pair_probability_leaves_only_darks() {
    let dir = TempDir::new().unwrap();
    let text = r#"
n_cycles = 1000000
[source]
pair_probability = 0.0
[detectors.x]
dark_rate_cps = 1000000.0
"#;
    let (_, out) = simulated(&dir, text);
    let (_, tags) = decode_stream(&fs::read(Path::new(&out).join("ch2_x-p.etag")).unwrap()).unwrap();
    // 1e6 cps over 1 ms of acquisition
    assert!((800..1200).contains(&tags.len()), "{}", tags.len());
    let (_, xx) = decode_stream(&fs::read(Path::new(&out).join("ch0_xx-p.etag")).unwrap()).unwrap();
    assert!(xx.len() < 10, "{}", xx.len());
}

#[test]
fn configuration_errors_exit_with_2_and_name_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "bad.toml", "[source]\npair_probability = 1.5\n");
    let o = entlink(&["simulate", "--config", &cfg, "--out", &path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("source.pair_probability"), "{}", stderr(&o));

    let (cfg, out) = simulated(&dir, SMALL);
    let o = entlink(&["fidelity", "--config", &cfg, "--out", &out, "--gate", "central:1200"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = entlink(&["fidelity", "--config", &cfg, "--out", &out, "--bin-ps", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gate_and_bin_overrides_are_applied() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = simulated(&dir, SMALL);
    let o = entlink(&["fidelity", "--config", &cfg, "--out", &out, "--gate", "window:100:500", "--bin-ps", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("fidelity.json")).unwrap()).unwrap();
    assert_eq!(report["geometry"]["bin_ps"], 100);
    assert_eq!(report["gate"]["mode"], "window");
    assert_eq!(report["gate"]["offset_ps"], 100);
}

#[test]
fn manifest_mismatch_needs_the_override() {
    let dir = TempDir::new().unwrap();
    let (_, out) = simulated(&dir, SMALL);
    let other = config(&dir, "other.toml", &SMALL.replace("seed = 3", "seed = 5"));
    let o = entlink(&["fidelity", "--config", &other, "--out", &out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("manifest mismatch"), "{}", stderr(&o));
    let o = entlink(&["fidelity", "--config", &other, "--out", &out, "--allow-config-mismatch"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn corrupted_stream_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = simulated(&dir, SMALL);
    let file = Path::new(&out).join("ch2_x-p.etag");
    let mut bytes = fs::read(&file).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    fs::write(&file, bytes).unwrap();
    let o = entlink(&["fidelity", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn g2_reports_both_variants() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = simulated(&dir, AUTOCORRELATION);
    let o = entlink(&["g2", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("g2.json")).unwrap()).unwrap();
    let ungated = report["g2_zero"].as_f64().unwrap();
    let gated = report["gated_g2_zero"].as_f64().unwrap();
    assert!(ungated > 0.05 && ungated < 0.5, "{ungated}");
    assert!(gated < ungated, "{gated} vs {ungated}");
    let csv = fs::read_to_string(Path::new(&out).join("g2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(Path::new(&out).join("g2_gated.csv").exists());

    let o = entlink(&["fidelity", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn stability_writes_one_row_per_slice() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = simulated(&dir, SMALL);
    let o = entlink(&["stability", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(Path::new(&out).join("stability.csv")).unwrap();
    // 120 µs of cycles in 60 µs slices, each holding one set per basis
    assert_eq!(csv.lines().count(), 1 + 2, "{csv}");

    let long = config(&dir, "long.toml", &SMALL.replace("slice_duration_ps = 60000000", "slice_duration_ps = 1000000000"));
    let o = entlink(&["stability", "--config", &long, "--out", &out, "--allow-config-mismatch"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn calibrate_aligns_the_drifted_link() {
    let dir = TempDir::new().unwrap();
    let text = r#"
[fiber]
loss_db = 6.0
[fiber.drift]
step_interval_ps = 1000000
angular_step_std_rad = 0.05
"#;
    let cfg = config(&dir, "link.toml", text);
    let out = dir.path().join("cal");
    let o = entlink(&["calibrate", "--config", &cfg, "--out", &path_str(&out), "--time-ps", "5000000000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(result["converged"], true);
    assert!(result["leakage"].as_f64().unwrap() <= 1e-2);
    let trace = fs::read_to_string(out.join("calibration_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,leakage"));
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "run.toml", SMALL);
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_entlink"))
        .args(["simulate", "--config", &cfg])
        .env("ENTLINK_OUT", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("manifest.json").exists());
}
