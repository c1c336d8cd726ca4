use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_lrvi");

const WORKSHOPS: &str = "\
ATOMS
attends binary 12
hot binary 3
PARFACTORS
phi attends hot : ground-table 1.2 0.4 0.7 1.6
EXTENDIBILITY
attends 120
hot 30
";

const HYBRID: &str = "\
ATOMS
x continuous 2 -6 6
y continuous 1 -6 6
PARFACTORS
anchor x : gaussian 0 1
pair x y : linear-gaussian 0 0.5
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn results_are_reproducible_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "w.lrvi", WORKSHOPS);
    let obs = write(dir.path(), "w.csv", "attends,hot\n1,1\n0,\n");
    let args = ["--seed", "4", "infer", &model, "--obs", &obs, "--query", "pmf:attends"];
    let first = run(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stdout));
    let second = run(&args);
    let (a, b) = (json(&first), json(&second));
    assert_eq!(a["result"], b["result"]);
    assert_eq!(serde_json::to_string(&a["result"]).unwrap(), serde_json::to_string(&b["result"]).unwrap());
    assert!(a["timings"]["cache_hits"].as_array().unwrap().is_empty());
    assert_eq!(b["timings"]["cache_hits"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("w.lrvi.lrvi-cache").is_dir());

    let fresh = run(&["--seed", "4", "--no-cache", "infer", &model, "--obs", &obs, "--query", "pmf:attends"]);
    assert_eq!(json(&fresh)["result"], a["result"]);
    let est = a["result"]["estimate"].as_array().unwrap();
    let s: f64 = est.iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((s - 1.0).abs() < 1e-9);
    assert!(a["result"]["bounds"]["parfactors"].is_array());
}

#[test]
fn lifted_model_reloads_to_the_same_answer() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "w.lrvi", WORKSHOPS);
    let lifted = run(&["--no-cache", "lift", &model]);
    assert!(lifted.status.success());
    let text = String::from_utf8(lifted.stdout).unwrap();
    let fitted = write(dir.path(), "fitted.lrvi", &text);
    let again = run(&["--no-cache", "lift", &fitted]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    let q = ["--query", "pmf:attends"];
    let a = json(&run(&["--no-cache", "infer", &model, q[0], q[1]]));
    let b = json(&run(&["--no-cache", "infer", &fitted, q[0], q[1]]));
    assert_eq!(a["result"]["estimate"], b["result"]["estimate"]);
    assert_eq!(b["result"]["fit_reports"][0]["method"], "given");
}

#[test]
fn elimination_and_sampling_agree() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "w.lrvi", WORKSHOPS);
    let obs = write(dir.path(), "w.csv", "hot\n1\n");
    let o = run(&["--no-cache", "verify", &model, "--obs", &obs, "--query", "pmf:attends", "--max-diff", "0.05"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(json(&o)["agree"], true);
}

#[test]
fn continuous_models_fit_and_report_densities() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "h.lrvi", HYBRID);
    let o = run(&["--no-cache", "infer", &model, "--query", "density:y:0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r = &json(&o)["result"];
    assert_eq!(r["fit_reports"][0]["method"], "kde");
    let grid = r["atoms"][0]["density_grid"].as_array().unwrap();
    assert_eq!(grid.len(), 11);
    // y - x ~ N(0, 0.5) with x ~ N(0, 1) gives y ~ N(0, 1.5).
    let d = r["estimate"][0].as_f64().unwrap();
    let exact = 1.0 / (2.0 * std::f64::consts::PI * 1.5f64).sqrt();
    assert!((d - exact).abs() / exact < 0.15, "{d} vs {exact}");
}

#[test]
fn failures_exit_with_error_documents() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "w.lrvi", WORKSHOPS);

    let usage = run(&["infer"]);
    assert_eq!(usage.status.code(), Some(1));

    let unknown = run(&["--no-cache", "infer", &model, "--query", "pmf:nobody"]);
    assert_eq!(unknown.status.code(), Some(2));
    let doc = json(&unknown);
    assert_eq!(doc["stage"], "infer");
    assert!(doc["message"].as_str().unwrap().contains("nobody"));

    let bad = write(dir.path(), "bad.lrvi", "ATOMS\nx binary 3\nPARFACTORS\ng y : gaussian 0 1\n");
    let parse = run(&["infer", &bad, "--query", "pmf:x"]);
    assert_eq!(parse.status.code(), Some(1));
    assert!(json(&parse)["message"].as_str().unwrap().contains("line 4"));

    let table = write(dir.path(), "t.lrvi", "ATOMS\nx binary 3\nPARFACTORS\nt x : hist-table\n  3,0 0\n  0,3 0\n");
    let ext = run(&["extend-check", &table, "--parfactor", "nope", "--n-bar", "10"]);
    assert_eq!(ext.status.code(), Some(1));
    let ok = run(&["extend-check", &table, "--parfactor", "t", "--n-bar", "10"]);
    assert!(ok.status.success());
    assert_eq!(json(&ok)["feasible"], true);

    let cont = write(dir.path(), "c.lrvi", "ATOMS\nx continuous 2\nPARFACTORS\ng x : gaussian 0 -1\n");
    let invalid = run(&["infer", &cont, "--query", "density:x:0"]);
    assert_eq!(invalid.status.code(), Some(1));
}

#[test]
fn bound_and_cluster_commands() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "w.lrvi", WORKSHOPS);
    let b = json(&run(&["bound", &model]));
    let v = b["parfactors"][0][1]["value"].as_f64().unwrap();
    // 2*2*12/120 + 2*2*3/30
    assert!((v - 0.8).abs() < 1e-12, "{v}");

    let csv = dir.path().join("m.csv");
    let c = csv.to_str().unwrap();
    assert!(run(&["synth", "--rows", "40", "--columns", "30", "--regimes", "3", "-o", c]).status.success());
    let a = run(&["--seed", "2", "cluster", c, "--k", "3"]);
    let b = run(&["--seed", "2", "cluster", c, "--k", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let sizes: u64 = json(&a)["sizes"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap()).sum();
    assert_eq!(sizes, 30);
}

#[test]
fn ground_tables_are_lifted_for_extend_check() {
    let dir = tempfile::tempdir().unwrap();
    let text = WORKSHOPS.replace("EXTENDIBILITY", "prior hot : ground-table 1.0 0.6\nEXTENDIBILITY");
    let model = write(dir.path(), "w.lrvi", &text);
    // An iid product extends to any larger population.
    let ok = run(&["extend-check", &model, "--parfactor", "prior", "--n-bar", "30"]);
    assert!(ok.status.success());
    assert_eq!(json(&ok)["feasible"], true);
    let pair = run(&["extend-check", &model, "--parfactor", "phi", "--n-bar", "30"]);
    assert_eq!(pair.status.code(), Some(2));
    assert_eq!(json(&pair)["parfactor"], "phi");
}

#[test]
fn bench_writes_fixed_columns() {
    let o = run(&["bench", "--sizes", "8", "--seeds", "1,2", "--steps", "300", "--burn-in", "30"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "method,size,seed,error,step_time_us");
    assert_eq!(lines.count(), 4);
}
