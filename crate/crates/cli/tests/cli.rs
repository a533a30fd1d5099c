//! End-to-end runs of the `rfsurvey` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use rfsurvey::design::{make_design, DesignKind};
use rfsurvey::estimators::{greg_total, SurveySample};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfsurvey"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

/// Data lines of a CSV: no header, no comment.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const TOY: &str = "id,x,y\na,1,2\nb,2,4\nc,3,5\nd,4,9\ne,5,10\n";

#[test]
fn estimate_ht_on_supplied_sample() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pop.csv", TOY);
    write(dir.path(), "sample.csv", "id\nb\nd\ne\n");
    write(
        dir.path(),
        "exp.toml",
        r#"
seed = 3
[population]
file = "pop.csv"
id_column = "id"
study = ["y"]
[design]
n = 3
sample = "sample.csv"
[estimate]
study = "y"
estimators = [{ method = "ht" }]
"#,
    );
    let out = run(dir.path(), &["estimate", "--config", "exp.toml", "--out", "res"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(dir.path(), "res/estimate.csv");
    let r = rows(&text);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0][1], "ht");
    let point: f64 = r[0][3].parse().unwrap();
    assert!((point - (4.0 + 9.0 + 10.0) * 5.0 / 3.0).abs() < 1e-12);
    assert!(text.ends_with(&format!("# rfsurvey {} seed=3\n", env!("CARGO_PKG_VERSION"))));
}

#[test]
fn estimate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "exp.toml",
        r#"
[population]
synthetic = { n_units = 600 }
[design]
n = 60
[estimate]
study = "y3"
estimators = [{ method = "ht" }, { method = "greg" }, { method = "cart" }, { method = "rf", n_trees = 20 }]
"#,
    );
    let a = run(dir.path(), &["estimate", "--config", "exp.toml", "--seed", "9", "--out", "a", "--threads", "1"]);
    let b = run(dir.path(), &["estimate", "--config", "exp.toml", "--seed", "9", "--out", "b", "--threads", "3"]);
    assert!(a.status.success() && b.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let (ta, tb) = (read(dir.path(), "a/estimate.csv"), read(dir.path(), "b/estimate.csv"));
    assert_eq!(ta, tb);
    assert_eq!(rows(&ta).len(), 4);
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "exp.toml", "[design]\nn = 3\nsampel = \"x.csv\"\n");
    let out = run(dir.path(), &["estimate", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampel"));

    let out = run(dir.path(), &["mc", "--config", "exp.toml", "--preset", "figure2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mc_grid_gives_one_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "exp.toml",
        r#"
seed = 4
[population]
synthetic = { n_units = 500 }
[mc]
models = [2]
n = 50
replicates = 5
estimators = [{ method = "rf", n_trees = [2, 3], min_node_size = [5, 10] }]
"#,
    );
    let out = run(dir.path(), &["mc", "--config", "exp.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(dir.path(), "out/mc.csv");
    assert!(text.starts_with("model,n,estimator,R,RB,RE,MSE,coverage,ci_length,wall_time,var_rb\n"));
    let r = rows(&text);
    assert_eq!(r.len(), 4);
    assert!(r.iter().all(|row| row[0] == "y2" && row[1] == "50" && row[3] == "5"));
}

#[test]
fn calibrate_intercept_only_echoes_design_weights() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "p.csv", "id,d,h0\nu1,2.5,1\nu2,4,1\nu3,3.5,1\nTOTAL,,10\n");
    write(dir.path(), "exp.toml", "[calibrate]\nproblem = \"p.csv\"\n");
    let out = run(dir.path(), &["calibrate", "--config", "exp.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&read(dir.path(), "out/weights.csv"));
    let w: Vec<f64> = r.iter().map(|row| row[1].parse().unwrap()).collect();
    for (a, b) in w.iter().zip([2.5, 4.0, 3.5]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn calibrate_infeasible_targets_exit_numeric() {
    let dir = tempfile::tempdir().unwrap();
    // Two identical columns asked to reach different totals.
    write(dir.path(), "p.csv", "id,d,h0,h1\nu1,2,1,1\nu2,2,1,1\nTOTAL,,4,6\n");
    write(dir.path(), "exp.toml", "[calibrate]\nproblem = \"p.csv\"\n");
    let out = run(dir.path(), &["calibrate", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("residual"));
    assert_eq!(rows(&read(dir.path(), "out/residuals.csv")).len(), 2);
}

#[test]
fn chi_square_file_reproduces_greg_weights() {
    let big = 40;
    let x = Array2::from_shape_fn((big, 1), |(k, _)| ((k * 7) % 13) as f64 + 0.5 * k as f64);
    let y: Vec<f64> = (0..big).map(|k| 1.0 + 2.0 * x[[k, 0]] + ((k * 5) % 3) as f64).collect();
    let design = make_design::<f64>(DesignKind::Srswor { n: 10 }, big).unwrap();
    let sample = design.draw_sample(2);
    let ys = sample.gather(&y);
    let s = SurveySample::new(&design, &sample, &ys).unwrap();
    let greg = greg_total(x.view(), &s, true).unwrap().case_weights.unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("id,d,h0,h1\n");
    for (i, &k) in sample.members().iter().enumerate() {
        text.push_str(&format!("k{k},{},1,{}\n", s.inv_pi()[i], x[[k, 0]]));
    }
    text.push_str(&format!("TOTAL,,{big},{}\n", x.column(0).sum()));
    write(dir.path(), "p.csv", &text);
    write(dir.path(), "exp.toml", "[calibrate]\nproblem = \"p.csv\"\ndistance = \"chi_square\"\n");
    let out = run(dir.path(), &["calibrate", "--config", "exp.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&read(dir.path(), "out/weights.csv"));
    for (row, g) in r.iter().zip(&greg) {
        let w: f64 = row[1].parse().unwrap();
        assert!((w - g).abs() <= 1e-8 * (1.0 + g.abs()), "{w} vs {g}");
    }
}

#[test]
fn h5_diag_writes_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "exp.toml",
        "[h5]\nsizes = [300, 600]\nreplicates = 3\nn_trees = 4\nprobes = 10\n",
    );
    let out = run(dir.path(), &["h5-diag", "--config", "exp.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&read(dir.path(), "out/h5.csv"));
    assert_eq!(r.len(), 2);
    assert_eq!(r[1][0], "600");
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["mc", "--preset", "table2-Y2-n500"]);
    assert_eq!(out.status.code(), Some(2));
}
