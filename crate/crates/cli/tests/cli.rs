use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn surf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surf"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Deterministic pseudo-normal noise.
struct Noise(u64);

impl Noise {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let (u, v) = (self.uniform(), self.uniform());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }
}

fn gaussian_table(dir: &Path) -> PathBuf {
    let mut rng = Noise(7);
    let (n, p) = (60, 8);
    let mut s = String::from("id");
    for j in 0..p {
        s += &format!(",x{j}");
    }
    s += ",y\n";
    for i in 0..n {
        let x: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let y = 2.0 * x[2] + rng.normal();
        s += &format!("s{i}");
        for v in &x {
            s += &format!(",{v}");
        }
        s += &format!(",{y}\n");
    }
    let path = dir.join("data.csv");
    fs::write(&path, s).unwrap();
    path
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

#[test]
fn select_finds_the_signal() {
    let dir = tempfile::tempdir().unwrap();
    let table = gaussian_table(dir.path());
    let out = dir.path().join("r.json");
    let o = surf(&[
        table.to_str().unwrap(), "-y", "y", "--family", "gaussian", "--B", "20", "--perms", "100",
        "--seed", "3", "-o", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    let steps = r["body"]["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 1);
    assert_eq!(steps[0]["name"], "x2");
    assert!(steps[0]["p_value"].as_f64().unwrap() <= 0.05);
    assert_eq!(r["body"]["seed"], 3);
}

#[test]
fn rank_mode_has_trace_and_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let table = gaussian_table(dir.path());
    let out = dir.path().join("r.json");
    let o = surf(&[
        table.to_str().unwrap(), "-y", "y", "--family", "gaussian", "--mode", "rank", "--B", "10",
        "-o", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let r = report(&out);
    assert_eq!(r["body"]["steps"], Value::Array(vec![]));
    assert_eq!(r["body"]["ranking"]["order"].as_array().unwrap().len(), 8);
}

#[test]
fn thread_count_does_not_change_the_body() {
    let dir = tempfile::tempdir().unwrap();
    let table = gaussian_table(dir.path());
    let bodies: Vec<Value> = ["1", "3"]
        .iter()
        .map(|t| {
            let out = dir.path().join(format!("r{t}.json"));
            let o = surf(&[
                table.to_str().unwrap(), "-y", "y", "--family", "gaussian", "--B", "12", "--perms", "40",
                "--threads", t, "-o", out.to_str().unwrap(),
            ]);
            assert!(o.status.success());
            report(&out)["body"].clone()
        })
        .collect();
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn text_report_lists_p_values() {
    let dir = tempfile::tempdir().unwrap();
    let table = gaussian_table(dir.path());
    let o = surf(&[
        table.to_str().unwrap(), "-y", "y", "--family", "gaussian", "--B", "10", "--perms", "40",
        "--format", "text",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("selected variables:"));
    assert!(text.lines().any(|l| l.contains("x2") && l.contains("p-value")));
}

#[test]
fn missing_response_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let table = gaussian_table(dir.path());
    let o = surf(&[table.to_str().unwrap(), "-y", "nope", "--family", "gaussian"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn bad_cell_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    fs::write(&path, "id\ta\tb\ty\ns1\t1\t2\t0\ns2\t3\toops\t1\n").unwrap();
    let o = surf(&[path.to_str().unwrap(), "-y", "y"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 3") && err.contains("column b"), "{err}");
}

#[test]
fn bad_flag_value_is_an_input_error() {
    let o = surf(&["x.csv", "-y", "y", "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = surf(&["x.csv", "-y", "y", "--family", "weibull"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn constant_response_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut s = String::from("id,a,b,y\n");
    for i in 0..12 {
        s += &format!("s{i},{},{},1\n", i % 5, (i * 7) % 3);
    }
    fs::write(&path, s).unwrap();
    let o = surf(&[path.to_str().unwrap(), "-y", "y", "--family", "gaussian", "--B", "10", "--perms", "20"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

fn figure_one(dir: &Path) -> (PathBuf, PathBuf) {
    let table = dir.join("otus.csv");
    let mut s = String::from("id,X1,X2,X3,X4,X5,X6,y\n");
    let mut rng = Noise(11);
    for i in 0..8 {
        let row: Vec<String> = (0..6).map(|_| format!("{}", (rng.uniform() * 50.0).floor())).collect();
        s += &format!("s{i},{},{}\n", row.join(","), i % 2);
    }
    fs::write(&table, s).unwrap();
    let tax = dir.join("tax.tsv");
    fs::write(
        &tax,
        "otu_id\tlineage\nX1\tK;P1;C1\nX2\tK;P1;C1\nX3\tK;P1;C1\nX4\tK;P2;C2\nX5\tK;P2;C2\nX6\tK;P2;\n",
    )
    .unwrap();
    (table, tax)
}

#[test]
fn aggregate_writes_ten_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (table, tax) = figure_one(dir.path());
    let design = dir.path().join("design.csv");
    let out = dir.path().join("r.json");
    let o = surf(&[
        table.to_str().unwrap(), "-y", "y", "--mode", "aggregate", "--taxonomy", tax.to_str().unwrap(),
        "--design-out", design.to_str().unwrap(), "-o", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&design).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 10);
    assert!(!header.contains(&"K;P1"));
    assert_eq!(text.lines().count(), 9);
    let r = report(&out);
    assert_eq!(r["body"]["design"]["dropped"][0]["node"], "K;P1");
    assert_eq!(r["body"]["design"]["dropped"][0]["equal_to"], "K;P1;C1");
}

#[test]
fn taxonomy_with_unknown_otu_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (table, _) = figure_one(dir.path());
    let tax = dir.path().join("bad.tsv");
    fs::write(&tax, "otu_id\tlineage\nX1\tK;P1\nX9\tK;P2\n").unwrap();
    let o = surf(&[
        table.to_str().unwrap(), "-y", "y", "--mode", "aggregate", "--taxonomy", tax.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("X9"));
}

#[test]
fn simulate_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(
        &cfg,
        r#"
seed = 5
[scenario]
name = "tiny"
family = "gaussian"
n_reps = 2
true_vars = [[0, 1.0]]
target_snr = 4.0
methods = ["surf", "lasso"]
[scenario.generator]
n = 40
p = 12
block_size = 4
[scenario.ranking]
B = 8
[scenario.forward]
n_perm = 20
"#,
    )
    .unwrap();
    let metrics = dir.path().join("m.csv");
    let out = dir.path().join("r.json");
    let o = surf(&[
        "--mode", "simulate", "--config", cfg.to_str().unwrap(), "--metrics-out", metrics.to_str().unwrap(),
        "-o", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(report(&out)["body"]["simulation"]["n_reps"], 2);
}
