use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_limitlab"))
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Shipped config with sample sizes cut down to keep the CLI tests quick.
fn small_config(dir: &Path, name: &str, patch: impl FnOnce(&mut Value)) -> PathBuf {
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(shipped(name)).unwrap()).unwrap();
    cfg["experiments"] = serde_json::json!({
        "clt": {"count": 4000, "ns": [50, 100, 200]},
        "concentration": {"count": 20000, "ns": [100]},
        "moddev": {"n": 1000, "count": 20000, "interval": [0.5, 1.5]},
        "fclt": {"n": 200, "count": 4000},
        "rosenthal": {"maximal_ns": [50, 200], "maximal_count": 2000},
        "nonconv": {"n": 100, "count": 1000},
        "chf": {"count": 4000, "ks": [2, 4, 6, 8]},
        "gate": {"count": 40000},
        "decay": {"paths": 20},
        "multicorr": {"test_configs": 10, "max_gap": 10}
    });
    patch(&mut cfg);
    let path = dir.join(format!("small_{name}"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn clt_run_writes_report_with_clt_block() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "doubling_iid.json", |_| {});
    let out = tmp.path().join("r");
    let o = run(&["run", "clt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    assert_eq!(r["command"], "clt");
    assert_eq!(r["seed"], 1);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    let sections = r["sections"].as_array().unwrap();
    let names: Vec<&str> = sections.iter().map(|s| s["command"].as_str().unwrap()).collect();
    assert_eq!(names, ["gate", "clt"]);
    let clt = &sections[1];
    let ks = clt["verdicts"].as_array().unwrap().iter().find(|v| v["test"] == "ks_at_largest_n").unwrap();
    for key in ["statistic", "bound", "slack", "pass", "params"] {
        assert!(ks.get(key).is_some(), "missing {key}");
    }
    for file in clt["series"].as_array().unwrap() {
        assert!(out.join(file.as_str().unwrap()).exists());
    }
    assert!(r["timings"]["clt"].as_f64().unwrap() >= 0.0);
}

#[test]
fn invalid_resolution_exits_1_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "markov_two_map.json", |c| c["N"] = 4.into());
    let o = run(&["run", "variance", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("N must be a multiple of M"), "{err}");
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "markov_two_map.json", |c| c["observable"][1]["symbol"] = 5.into());
    let o = run(&["describe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("observable[1].symbol"));
    let cfg = small_config(tmp.path(), "markov_two_map.json", |c| c["experiments"]["clt"]["cont"] = 3.into());
    let o = run(&["describe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cont"));
    let o = run(&["describe", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failing_verdict_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "markov_two_map.json", |c| c["experiments"]["clt"]["ks_max"] = 0.0.into());
    let out = tmp.path().join("r");
    let o = run(&["run", "clt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(report(&out)["pass"], false);
}

#[test]
fn degenerate_observable_is_a_runtime_error_for_clt_and_skipped_in_all() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "coboundary.json", |_| {});
    let out = tmp.path().join("r");
    let o = run(&["run", "clt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["sections"][1]["status"], "error");
}

fn strip_timings(mut r: Value) -> Value {
    r.as_object_mut().unwrap().remove("timings");
    r
}

#[test]
fn run_all_is_deterministic_modulo_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "markov_two_map.json", |_| {});
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = run(&["run", "all", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--seed", "7"]);
    let ob = bin()
        .args(["run", "all", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "7", "--threads", "2"])
        .output()
        .unwrap();
    assert_eq!(oa.status.code(), ob.status.code());
    assert_ne!(oa.status.code(), Some(1), "{}", String::from_utf8_lossy(&oa.stdout));
    let (ra, rb) = (report(&a), report(&b));
    assert_eq!(ra["seed"], 7);
    let sections = ra["sections"].as_array().unwrap();
    assert_eq!(sections.len(), 14);
    assert_eq!(strip_timings(ra.clone()), strip_timings(rb));
    for s in sections {
        for f in s["series"].as_array().unwrap() {
            let f = f.as_str().unwrap();
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn coboundary_all_skips_standardized_tests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "coboundary.json", |_| {});
    let out = tmp.path().join("r");
    let o = run(&["run", "all", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--tolerance-profile", "strict"]);
    assert_ne!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    assert_eq!(r["profile"], "strict");
    let skipped: Vec<&str> = r["sections"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["status"] == "skipped")
        .map(|s| s["command"].as_str().unwrap())
        .collect();
    assert_eq!(skipped, ["clt", "moddev", "fclt", "rosenthal"]);
}

#[test]
fn threads_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "doubling_iid.json", |_| {});
    let o = bin()
        .args(["run", "mix-coeffs", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()])
        .env("RDS_LIMITLAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = bin()
        .args(["run", "mix-coeffs", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()])
        .env("RDS_LIMITLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn describe_summaries() {
    let text = |name: &str| {
        let o = run(&["describe", "--config", shipped(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        String::from_utf8(o.stdout).unwrap()
    };
    let iid = text("doubling_iid.json");
    assert!(iid.contains("min 1.000000, max 1.000000 (constant)"), "{iid}");
    assert!(iid.contains("s2 = 8.750000e-1"), "{iid}");
    let cob = text("coboundary.json");
    assert!(cob.contains("DEGENERATE"), "{cob}");
    let vec3 = text("vector3.json");
    assert!(vec3.contains("eigenvalues:") && vec3.contains("null direction"), "{vec3}");
    assert!(text("lazy_average.json").contains("uniformly expanding: false"));
}

#[test]
fn shipped_configs_round_trip() {
    use limitlab::config::ExperimentConfig;
    for entry in std::fs::read_dir(shipped("")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg, "{}", path.display());
    }
}
