use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mortality_gp::datastore::{write_csv, FactorSchema, StackedDataset};
use mortality_gp::synthetic::reference_icm;

fn mortgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mortgp"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

/// Two or one causes, ages 52..67, years 2006..2016.
fn write_data(dir: &Path, n_pop: usize) -> PathBuf {
    let ds = reference_icm(1.0).unwrap().simulate(0).unwrap();
    let names = ["C1", "C2"];
    let cells = ds
        .cells()
        .iter()
        .filter(|c| c.population.0[0] < n_pop && c.age <= 67.0 && c.year >= 2006.0)
        .cloned()
        .collect();
    let small = StackedDataset::new(FactorSchema::single("cause", &names[..n_pop]).unwrap(), cells).unwrap();
    let path = dir.join(format!("data{n_pop}.csv"));
    write_csv(&small, std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn fit(dir: &Path, data: &Path, extra: &[&str]) {
    let mut args = vec!["fit", "--data", data.to_str().unwrap(), "--factors", "cause", "--starts", "1", "--max-iter", "80"];
    args.extend_from_slice(extra);
    ok(&mortgp(dir, &args));
}

#[test]
fn sogp_fit_artifact_shape_and_predict_quantiles() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 1);
    fit(dir.path(), &data, &["--family", "sogp"]);
    let art: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(art["hyperparameters"]["lengthscales"].as_array().unwrap().len(), 1);
    let ls = &art["hyperparameters"]["lengthscales"][0];
    assert!(ls["theta_age"].is_f64() && ls["theta_year"].is_f64());
    assert_eq!(art["hyperparameters"]["sigma"].as_array().unwrap().len(), 1);
    assert_eq!(art["beta"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("fit_report.json").exists());

    let model = dir.path().join("model.json");
    let m = model.to_str().unwrap();
    ok(&mortgp(dir.path(), &["predict", "--model", m, "--ages", "62", "--years", "2010"]));
    let (_, rows) = csv_rows(&dir.path().join("predictions.csv"));
    assert_eq!(rows.len(), 1);

    ok(&mortgp(dir.path(), &["predict", "--model", m, "--years", "2015:2018", "--quantiles", "0.025,0.975"]));
    let (header, rows) = csv_rows(&dir.path().join("predictions.csv"));
    assert_eq!(header, ["population", "age", "year", "mean", "sd_latent", "sd_obs", "q_0.025", "q_0.975", "extrapolation"]);
    assert_eq!(rows.len(), 4 * 4);
    for r in &rows {
        let f = |i: usize| r[i].parse::<f64>().unwrap();
        let (mean, sd) = (f(3), f(4));
        assert!(f(5) > sd);
        assert!((f(6) - (mean - 1.95996 * sd)).abs() < 1e-5 * sd);
        assert!((f(7) - (mean + 1.95996 * sd)).abs() < 1e-5 * sd);
        assert_eq!(r[8], (f(2) > 2016.0).to_string());
    }
}

#[test]
fn commands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir(d).unwrap();
        fit(d, &data, &["--family", "icm", "--rank", "1", "--seed", "4"]);
        let m = d.join("model.json");
        ok(&mortgp(d, &["aggregate", "--model", m.to_str().unwrap(), "--sum-over", "cause", "--samples", "4000", "--years", "2017,2018", "--seed", "2"]));
    }
    for f in ["model.json", "aggregate.csv", "aggregate.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fit_report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("duration_secs");
        v
    };
    assert_eq!(report(&a), report(&b));
}

#[test]
fn unit_adjustment_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 2);
    fit(dir.path(), &data, &["--family", "icm", "--rank", "1"]);
    let m = dir.path().join("model.json");
    let predict = |model: &Path| {
        ok(&mortgp(dir.path(), &["predict", "--model", model.to_str().unwrap(), "--years", "2014:2019", "--mode", "observational"]));
        std::fs::read(dir.path().join("predictions.csv")).unwrap()
    };
    let before = predict(&m);
    ok(&mortgp(dir.path(), &["adjust-trend", "--model", m.to_str().unwrap(), "--population", "*", "--scale", "1.0"]));
    let adjusted = dir.path().join("model_adjusted.json");
    let art: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&adjusted).unwrap()).unwrap();
    assert_eq!(art["adjustments"].as_array().unwrap().len(), 2);
    assert_eq!(predict(&adjusted), before);
}

#[test]
fn select_rank_marks_one_choice() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 2);
    ok(&mortgp(
        dir.path(),
        &["select-rank", "--data", data.to_str().unwrap(), "--factors", "cause", "--starts", "1", "--max-iter", "60", "--candidates", "1,2"],
    ));
    let (_, rows) = csv_rows(&dir.path().join("rank_table.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().filter(|r| r[6] == "true").count(), 1);
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 2);
    let d = data.to_str().unwrap();
    let code = |args: &[&str]| {
        let out = mortgp(dir.path(), args);
        let err = String::from_utf8_lossy(&out.stderr).to_string();
        (out.status.code().unwrap(), err)
    };

    let (c, err) = code(&["fit", "--data", d, "--factors", "cause", "--rank", "5"]);
    assert_eq!(c, 2);
    assert!(err.starts_with("error[config]: ") && err.trim_end().lines().count() == 1, "{err}");
    assert_eq!(code(&["fit", "--data", d, "--factors", "cause", "--family", "gp"]).0, 2);
    assert_eq!(code(&["frobnicate"]).0, 2);

    let (c, err) = code(&["fit", "--data", "/nonexistent.csv", "--factors", "cause"]);
    assert_eq!(c, 3);
    assert!(err.starts_with("error[data]: "), "{err}");
    assert_eq!(code(&["fit", "--data", d, "--factors", "country"]).0, 3);

    let (c, err) = code(&["fit", "--data", d, "--factors", "cause", "--rank", "1", "--starts", "2", "--max-iter", "2"]);
    assert_eq!(c, 5);
    assert!(err.starts_with("error[optimization]: "), "{err}");

    fit(dir.path(), &data, &["--family", "icm", "--rank", "1"]);
    let m = dir.path().join("model.json");
    let m = m.to_str().unwrap();
    let (c, err) = code(&["predict", "--model", m, "--years", "2017", "--populations", "C7"]);
    assert_eq!(c, 3);
    assert!(err.contains("C7"), "{err}");
    assert_eq!(code(&["adjust-trend", "--model", m, "--population", "C7", "--scale", "0.5"]).0, 3);
    assert_eq!(code(&["aggregate", "--model", m, "--sum-over", "sex", "--years", "2017"]).0, 3);
    assert_eq!(code(&["predict", "--model", m, "--years", "2017", "--quantiles", "1.5"]).0, 2);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 2);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "data = \"data2.csv\"\nfactor_columns = [\"cause\"]\nfamily = \"icm\"\nrank = 1\nstarts = 1\nmax_iter = 200\n")
        .unwrap();
    ok(&mortgp(dir.path(), &["--config", cfg.to_str().unwrap(), "fit"]));
    let art: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(art["family"]["family"], "icm");
    assert_eq!(art["population_labels"].as_array().unwrap().len(), 2);

    std::fs::write(&cfg, "data = \"data2.csv\"\nfactor_columns = [\"cause\"]\nbogus = 1\n").unwrap();
    assert_eq!(mortgp(dir.path(), &["--config", cfg.to_str().unwrap(), "fit"]).status.code(), Some(2));
}

#[test]
fn backtest_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 2);
    let run = |sub: &str| {
        let d = dir.path().join(sub);
        std::fs::create_dir(&d).unwrap();
        ok(&mortgp(
            &d,
            &[
                "backtest", "--data", data.to_str().unwrap(), "--factors", "cause", "--family", "icm", "--rank", "1", "--starts", "1",
                "--max-iter", "40", "--windows", "2006-2013,2007-2014", "--horizon", "2",
            ],
        ));
        std::fs::read(d.join("backtest.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let (header, rows) = csv_rows(&dir.path().join("a").join("backtest.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "median");
    assert!(rows[0].iter().zip(&header).any(|(v, h)| h.contains("year") && v.split(' ').count() == 2));
}
