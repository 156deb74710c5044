use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decoymix::export::write_observations;
use decoymix::metrics::evaluate;
use decoymix::scenario::{Scenario, ScenarioConfig};
use decoymix::sim::run;
use tempfile::TempDir;

fn decoymix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decoymix")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// A 4×4 grid with two zones and light traffic, small enough for sweeps.
fn small_grid(dir: &Path) -> PathBuf {
    let o = decoymix(
        &["gen-grid", "--rows", "4", "--cols", "4", "--zones", "2", "--vehicles", "30", "--arrival-rate-per-s", "0.2", "--out", "grid"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("grid/scenario.json")
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_grid_places_central_non_overlapping_zones() {
    let tmp = TempDir::new().unwrap();
    let o = decoymix(&["gen-grid", "--rows", "4", "--cols", "4", "--spacing-m", "500", "--zones", "2", "--out", "g"], tmp.path());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "16 junctions, 2 zones, 2 eavesdroppers in g");

    let cfg = ScenarioConfig::from_json(&fs::read_to_string(tmp.path().join("g/scenario.json")).unwrap()).unwrap();
    assert_eq!(cfg.zones.len(), 2);
    assert_eq!(cfg.eavesdroppers.len(), 2);
    assert!(cfg.eavesdroppers.iter().all(|e| e.range_m == Some(250.0)));
    let (a, b) = (cfg.zones[0].point(), cfg.zones[1].point());
    assert!(a.dist(b) >= 2.0 * cfg.zone_radius_m);
    // The scenario references the graph file next to it.
    let sc = Scenario::load(&tmp.path().join("g/scenario.json")).unwrap();
    assert_eq!(sc.graph.junctions.len(), 16);
    assert_eq!(sc.graph.edges.len(), 2 * 24);

    // A 4×4 grid has four interior junctions.
    let o = decoymix(&["gen-grid", "--rows", "4", "--cols", "4", "--zones", "5", "--out", "h"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("h").exists());
    let o = decoymix(&["gen-grid", "--rows", "4", "--cols", "4", "--zones", "2", "--out", "g"], tmp.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn sweep_writes_every_run_and_one_summary() {
    let tmp = TempDir::new().unwrap();
    let sc = small_grid(tmp.path());
    let sc = sc.to_str().unwrap();
    let args = ["run", "--scenario", sc, "--seeds", "1..5", "--sweep", "relay_fraction=0,0.25,0.5,0.75,1.0", "--out", "out"];
    let o = decoymix(&args, tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("25 runs"));

    let files = tree(&tmp.path().join("out"));
    let reports = files.iter().filter(|(p, _)| p.ends_with("report.json")).count();
    assert_eq!(reports, 25);
    for name in ["observations.csv", "events.jsonl", "truth.json"] {
        assert_eq!(files.iter().filter(|(p, _)| p.ends_with(name)).count(), 25);
    }
    let summary = fs::read_to_string(tmp.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    assert!(summary.lines().nth(3).unwrap().starts_with("relay_fraction=0.5,0.5,5,"));

    // Existing output without --force is refused and left untouched.
    let o = decoymix(&args, tmp.path());
    assert_eq!(code(&o), 3);
    assert_eq!(tree(&tmp.path().join("out")), files);

    // With --force, and a different worker count, the bytes are the same.
    let mut forced = args.to_vec();
    forced.extend(["--force", "--workers", "1"]);
    assert_eq!(code(&decoymix(&forced, tmp.path())), 0);
    assert_eq!(tree(&tmp.path().join("out")), files);
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let sc = small_grid(tmp.path());
    let sc = sc.to_str().unwrap();
    let cases: [&[&str]; 5] = [
        &["run", "--scenario", "missing.json", "--out", "o"],
        &["run", "--scenario", sc, "--seeds", "x", "--out", "o"],
        &["run", "--scenario", sc, "--sweep", "no_such_field=1", "--out", "o"],
        &["run", "--scenario", sc, "--sweep", "relay_fraction=2", "--out", "o"],
        &["run", "--scenario", sc, "--format", "xml", "--out", "o"],
    ];
    for args in cases {
        assert_eq!(code(&decoymix(args, tmp.path())), 2, "{args:?}");
        assert!(!tmp.path().join("o").exists(), "{args:?}");
    }
    fs::write(tmp.path().join("bad.json"), r#"{"graph": {"grid": {"rows": 4}}}"#).unwrap();
    assert_eq!(code(&decoymix(&["run", "--scenario", "bad.json", "--out", "o"], tmp.path())), 2);
}

#[test]
fn single_seed_json_summary_has_no_deviation() {
    let tmp = TempDir::new().unwrap();
    let sc = small_grid(tmp.path());
    let o = decoymix(&["run", "--scenario", sc.to_str().unwrap(), "--seeds", "3", "--format", "json", "--out", "o"], tmp.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o/summary.json")).unwrap()).unwrap();
    let point = &v[0];
    assert_eq!(point["label"], "base");
    let metrics = point["metrics"].as_array().unwrap();
    let (name, m) = (&metrics[0][0], &metrics[0][1]);
    assert_eq!(name, "success_rate");
    assert!(m["sd"].is_null());
    assert!(tmp.path().join("o/base/seed_3/report.json").exists());
}

#[test]
fn attack_reproduces_the_in_process_candidate_sets() {
    let tmp = TempDir::new().unwrap();
    let path = small_grid(tmp.path());
    let mut cfg = ScenarioConfig::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg.relay_fraction = 0.5;
    let sc = Scenario::build(cfg.clone(), path.parent().unwrap()).unwrap();
    let out = run(&sc).unwrap();
    let report = evaluate(&sc, &out).unwrap();

    fs::write(tmp.path().join("obs.csv"), write_observations(&out.observations)).unwrap();
    fs::write(tmp.path().join("truth.json"), decoymix::export::write_truth(&out.truth)).unwrap();
    fs::write(tmp.path().join("zones.json"), serde_json::to_string(&cfg.zones).unwrap()).unwrap();
    let o = decoymix(
        &["attack", "--obs", "obs.csv", "--graph", "grid/graph.json", "--zones", "zones.json", "--truth", "truth.json"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        serde_json::to_string(&v["links"]).unwrap(),
        serde_json::to_string(&serde_json::to_value(&report.links).unwrap()).unwrap()
    );
    assert_eq!(v["success_rate"].as_f64(), report.linkability.success_rate);
    assert_eq!(v["transitions"].as_u64(), Some(report.linkability.transitions as u64));
}

#[test]
fn attack_input_errors() {
    let tmp = TempDir::new().unwrap();
    small_grid(tmp.path());
    fs::write(tmp.path().join("zones.json"), r#"[{"x_m": 500.0, "y_m": 500.0}]"#).unwrap();
    let attack = |obs: &str| decoymix(&["attack", "--obs", obs, "--graph", "grid/graph.json", "--zones", "zones.json"], tmp.path());

    fs::write(tmp.path().join("bad.csv"), "time,pseudonym_id,x\n1,2,3\n").unwrap();
    assert_eq!(code(&attack("bad.csv")), 2);

    let header = "time,pseudonym_id,x,y,speed,heading,length,eavesdropper_id\n";
    fs::write(tmp.path().join("empty.csv"), header).unwrap();
    let o = attack("empty.csv");
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["candidate_sets"], 0);
    assert!(v["error"].as_str().unwrap().contains("no observed pseudonym changes"));
}
