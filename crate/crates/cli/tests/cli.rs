use std::path::Path;
use std::process::{Command, Output};

use gridtwin_core::io::{self, ImpedanceFile, TopologyFile};

fn gridtwin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridtwin"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("GRIDTWIN_SEED")
        .env_remove("GRIDTWIN_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&gridtwin(d, &["generate", "--fixture", "feeder13"]));
    let samples = String::from_utf8(read(d, "samples.csv")).unwrap();
    // header plus 200 samples of 10 buses
    assert_eq!(samples.lines().count(), 1 + 200 * 10);
    let heat = d.join("heat.csv");
    ok(&gridtwin(d, &["identify-topology", "--emit-heatmap", heat.to_str().unwrap()]));
    assert!(heat.exists());
    ok(&gridtwin(d, &["estimate-impedance", "--method", "ls"]));
    let out = gridtwin(d, &["evaluate", "--out", d.join("report.md").to_str().unwrap()]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("precision 1.0000, recall 1.0000"), "{stdout}");
    let md = String::from_utf8(read(d, "report.md")).unwrap();
    assert!(md.starts_with("# Evaluation report"));
}

#[test]
fn intermediate_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&gridtwin(d, &["pipeline", "--fixture", "feeder37", "--sigma-v", "1e-6"]));
    let samples = io::read_samples(&d.join("samples.csv"), &d.join("sub.csv")).unwrap();
    let (a, b) = io::samples_to_csv(&samples);
    assert_eq!(a.as_bytes(), read(d, "samples.csv"));
    assert_eq!(b.as_bytes(), read(d, "sub.csv"));
    let topo = TopologyFile::read(&d.join("topology.json")).unwrap();
    assert_eq!(topo.to_json().as_bytes(), read(d, "topology.json"));
    let imp = ImpedanceFile::read(&d.join("impedances.json")).unwrap();
    assert_eq!(imp.to_json().as_bytes(), read(d, "impedances.json"));
    let net = io::read_network(&d.join("network.json")).unwrap();
    assert_eq!(io::network_to_json(&net).as_bytes(), read(d, "network.json"));
    let lib = io::read_library(&d.join("library.json")).unwrap();
    assert_eq!(io::library_to_json(&lib).as_bytes(), read(d, "library.json"));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--seed", "9", "generate", "--fixture", "feeder69", "--sigma-v", "1e-5", "--outliers", "0.1"];
    ok(&gridtwin(a.path(), &[&["--threads", "1"][..], &args].concat()));
    ok(&gridtwin(b.path(), &[&["--threads", "4"][..], &args].concat()));
    for f in ["samples.csv", "sub.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn seed_comes_from_the_environment() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&gridtwin(a.path(), &["--seed", "3", "generate", "-k", "20"]));
    let out = Command::new(env!("CARGO_BIN_EXE_gridtwin"))
        .args(["--out-dir", b.path().to_str().unwrap(), "generate", "-k", "20"])
        .env("GRIDTWIN_SEED", "3")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read(a.path(), "samples.csv"), read(b.path(), "samples.csv"));
}

#[test]
fn zero_samples_write_valid_files_and_fail_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&gridtwin(d, &["generate", "-k", "0"]));
    assert_eq!(String::from_utf8(read(d, "samples.csv")).unwrap().trim(), "k,bus,p,q,v");
    let out = gridtwin(d, &["identify-topology"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_separate_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(gridtwin(d, &["generate", "--fixture", "feeder999"]).status.code(), Some(2));
    assert_eq!(gridtwin(d, &["generate", "--outliers", "2"]).status.code(), Some(2));
    assert_eq!(gridtwin(d, &["--threads", "0", "generate"]).status.code(), Some(2));
    // no inputs yet
    assert_eq!(gridtwin(d, &["estimate-impedance"]).status.code(), Some(3));
    ok(&gridtwin(d, &["generate", "-k", "5"]));
    assert_eq!(gridtwin(d, &["identify-topology"]).status.code(), Some(3));
}

#[test]
fn lad_report_beats_ls_under_outliers() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let common = ["pipeline", "--outliers", "0.3", "--known-topology"];
    ok(&gridtwin(a.path(), &[&common[..], &["--method", "lad"]].concat()));
    ok(&gridtwin(b.path(), &[&common[..], &["--method", "ls"]].concat()));
    let max_err = |d: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&read(d, "report.json")).unwrap();
        v["max_rel_err_r"].as_f64().unwrap().max(v["max_rel_err_x"].as_f64().unwrap())
    };
    assert!(max_err(a.path()) < max_err(b.path()));
    assert!(max_err(a.path()) <= 1.0);
}

#[test]
fn custom_network_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let net = d.join("mine.json");
    std::fs::write(
        &net,
        r#"{"buses":[{"id":0},{"id":1},{"id":2},{"id":3}],
            "branches":[{"id":1,"parent":0,"r":0.01,"x":0.02},{"id":2,"parent":1,"r":0.02,"x":0.02},{"id":3,"parent":1,"r":0.015,"x":0.01}]}"#,
    )
    .unwrap();
    ok(&gridtwin(d, &["pipeline", "--fixture", net.to_str().unwrap(), "--known-topology", "-k", "30"]));
    // a given topology carries no fit diagnostics but still reads back
    let topo = TopologyFile::read(&d.join("topology.json")).unwrap();
    assert!(topo.lambda.is_nan());
    ok(&gridtwin(d, &["estimate-impedance", "--method", "ls"]));
}
