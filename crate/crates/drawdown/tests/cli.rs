use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const MARKET: &str = r#""market":{"r":0.02,"mu":0.08,"sigma":0.2}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn problem(&self, name: &str, payout: &str, alpha: f64) -> PathBuf {
        self.file(name, &format!(r#"{{{MARKET},"payout":{payout},"alpha":{alpha}}}"#))
    }

    fn constant(&self) -> PathBuf {
        self.problem("constant.json", r#"{"kind":"constant","c":0.05}"#, 0.5)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn drawdown(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drawdown"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("DRAWDOWN_THREADS", t),
        None => cmd.env_remove("DRAWDOWN_THREADS"),
    };
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn evaluate_at_the_barrier() {
    let f = Fixture::new();
    let v = json(&drawdown(&["evaluate", s(&f.constant()), "--w", "1", "--m", "2"], None));
    assert_eq!(v["phi"], 1.0);
    assert_eq!(v["branch"], "Boundary");
    assert_eq!(v["w_s"], 2.5);
    assert_eq!(v["regime"], "FiniteSafe");
}

#[test]
fn evaluate_ruin_branch_matches_closed_form() {
    let f = Fixture::new();
    let v = json(&drawdown(&["evaluate", s(&f.constant()), "--w", "2", "--m", "3"], None));
    assert!((v["phi"].as_f64().unwrap() - 0.5f64.powf(3.25)).abs() < 1e-9);
    assert_eq!(v["branch"], "RuinBranch");
}

#[test]
fn evaluate_certain_drawdown() {
    let f = Fixture::new();
    let p = f.problem("prop.json", r#"{"kind":"proportional","kappa":0.03}"#, 0.8);
    let v = json(&drawdown(&["evaluate", s(&p), "--w", "1.5", "--m", "1.6"], None));
    assert_eq!(v["phi"], 1.0);
    assert_eq!(v["regime"], "InfiniteSafeCertainDrawdown");
    assert_eq!(v["k_of_m"], 0.0);
    assert!(v["w_s"].is_null());
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let c = f.constant();
    let outside = drawdown(&["evaluate", s(&c), "--w", "0.5", "--m", "2"], None);
    assert_eq!(outside.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&outside.stderr).contains("below the drawdown barrier"));

    let clamped = json(&drawdown(&["evaluate", s(&c), "--w", "2.7", "--m", "3", "--allow-outside"], None));
    assert_eq!(clamped["phi"], 0.0);

    let broken = f.file("broken.json", r#"{"market":{"r":0.02}}"#);
    let parse = drawdown(&["evaluate", s(&broken), "--w", "1", "--m", "2"], None);
    assert_eq!(parse.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&parse.stderr).contains("line"));

    assert_eq!(drawdown(&["evaluate", s(&c), "--w", "1"], None).status.code(), Some(1));
    assert_eq!(drawdown(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(drawdown(&["--help"], None).status.code(), Some(0));
    let missing = drawdown(&["evaluate", s(&f.path("nope.json")), "--w", "1", "--m", "2"], None);
    assert_eq!(missing.status.code(), Some(1));
}

fn sweep_spec(f: &Fixture, w: (f64, f64, usize), m: (f64, f64, usize), outputs: &str) -> PathBuf {
    f.file(
        "spec.json",
        &format!(
            r#"{{"w_grid":{{"min":{},"max":{},"count":{}}},"m_grid":{{"min":{},"max":{},"count":{}}},"outputs":{outputs}}}"#,
            w.0, w.1, w.2, m.0, m.1, m.2
        ),
    )
}

#[test]
fn sweep_outside_domain_has_only_a_header() {
    let f = Fixture::new();
    let spec = sweep_spec(&f, (5.0, 6.0, 2), (1.0, 2.0, 2), r#"["phi","g"]"#);
    let out = f.path("out.csv");
    let run = drawdown(&["sweep", s(&f.constant()), s(&spec), "--out", s(&out)], None);
    assert!(run.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), "w,m,phi,g\n");
    assert!(String::from_utf8_lossy(&run.stderr).contains("4 grid points outside"));
}

#[test]
fn sweep_is_monotone_and_reproducible() {
    let f = Fixture::new();
    let spec = sweep_spec(&f, (0.5, 2.5, 17), (1.2, 3.2, 5), r#"["phi","pi_star","g","k","v"]"#);
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    for out in [&a, &b] {
        assert!(drawdown(&["sweep", s(&f.constant()), s(&spec), "-o", s(out)], None).status.success());
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("w,m,phi,pi_star,g,k,v"));
    let mut by_m: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    let mut last_w = f64::NEG_INFINITY;
    for line in rows {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 7);
        let (w, phi): (f64, f64) = (cells[0].parse().unwrap(), cells[2].parse().unwrap());
        assert!(w >= last_w, "rows must be w-major");
        last_w = w;
        by_m.entry(cells[1].to_string()).or_default().push((w, phi));
    }
    assert_eq!(by_m.len(), 5);
    for (m, slice) in by_m {
        for pair in slice.windows(2) {
            assert!(pair[1].1 <= pair[0].1 + 1e-12, "phi rises along m = {m}: {pair:?}");
        }
    }
}

fn sim_config(f: &Fixture, n: u64) -> PathBuf {
    f.file(
        "sim.json",
        &format!(r#"{{"dt":0.01,"horizon":50,"n_paths":{n},"seed":99}}"#),
    )
}

#[test]
fn simulate_is_deterministic_and_appends_rows() {
    let f = Fixture::new();
    let (c, cfg, results) = (f.constant(), sim_config(&f, 500), f.path("results.csv"));
    let args = ["simulate", s(&c), s(&cfg), "--w0", "2", "--m0", "3", "--results", s(&results)];
    let one = drawdown(&args, Some("1"));
    let two = drawdown(&args, Some("3"));
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    assert_eq!(one.stdout, two.stdout);
    let v = json(&one);
    assert_eq!(v["strategy"], "optimal");
    assert_eq!(v["scenario_id"], "constant");
    let total = v["n_drawdown"].as_u64().unwrap() + v["n_safe_absorbed"].as_u64().unwrap() + v["n_censored"].as_u64().unwrap();
    assert_eq!(total, 500);

    let text = fs::read_to_string(&results).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "scenario_id,strategy,n_paths,dt,horizon,p_drawdown,stderr,n_safe,n_censored,mean_hit_time"
    );
    assert_eq!(lines[1], lines[2]);
    assert!(lines[1].starts_with("constant,optimal,500,0.01,50,"));
}

#[test]
fn simulate_all_safe_above_safe_level() {
    let f = Fixture::new();
    let (c, cfg, results) = (f.constant(), sim_config(&f, 200), f.path("r.csv"));
    let v = json(&drawdown(
        &["simulate", s(&c), s(&cfg), "--strategy", "all_safe", "--w0", "2.6", "--m0", "2.6", "--results", s(&results)],
        None,
    ));
    assert_eq!(v["p_drawdown"], 0.0);
    assert_eq!(v["n_drawdown"], 0);
    assert!(v["mean_hit_time"].is_null());
}

#[test]
fn simulate_rejects_bad_input() {
    let f = Fixture::new();
    let (c, results) = (f.constant(), f.path("r.csv"));
    let cfg = sim_config(&f, 10);
    let bad_strategy = drawdown(
        &["simulate", s(&c), s(&cfg), "--strategy", "bold", "--w0", "2", "--m0", "3", "--results", s(&results)],
        None,
    );
    assert_eq!(bad_strategy.status.code(), Some(1));
    let outside = drawdown(&["simulate", s(&c), s(&cfg), "--w0", "1", "--m0", "3", "--results", s(&results)], None);
    assert_eq!(outside.status.code(), Some(2));
    let zero = f.file("zero.json", r#"{"dt":0.01,"horizon":50,"n_paths":0,"seed":1}"#);
    let invalid = drawdown(&["simulate", s(&c), s(&zero), "--w0", "2", "--m0", "3", "--results", s(&results)], None);
    assert_eq!(invalid.status.code(), Some(1));
    assert!(!results.exists());
}

#[test]
fn feller_reports() {
    let f = Fixture::new();
    let v = json(&drawdown(&["feller", s(&f.constant()), "--m", "2"], None));
    assert_eq!(v["verdict"], "DivergesAtSafeLevel");
    assert_eq!(v["slope_condition"], "holds");
    assert_eq!(v["probes"].as_array().unwrap().len(), 12);

    let q = f.problem("quad.json", r#"{"kind":"quadratic_safe","b":0.004,"ws":2.5}"#, 0.5);
    let v = json(&drawdown(&["feller", s(&q), "--m", "2", "--probes", "12"], None));
    assert_eq!(v["verdict"], "DivergesAtSafeLevel");
    assert_eq!(v["slope_condition"], "fails");
    assert!(v["probes"][11]["v"].as_f64().unwrap() > 1e3);

    let p = f.problem("prop.json", r#"{"kind":"proportional","kappa":0.03}"#, 0.8);
    assert_eq!(drawdown(&["feller", s(&p), "--m", "2"], None).status.code(), Some(2));
}

#[test]
fn verify_fast() {
    let run = drawdown(&["verify", "--fast"], None);
    let text = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{text}");
    assert!(text.contains("PASS oracle_routes") && text.contains("SKIP monte_carlo"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_flags_a_decreasing_table() {
    let f = Fixture::new();
    let p = f.problem("bad.json", r#"{"kind":"tabulated","knots":[[0,0.06],[4,0.01]]}"#, 0.5);
    let run = drawdown(&["verify", s(&p), "--fast"], None);
    assert_eq!(run.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&run.stdout).contains("FAIL validation"));
}
