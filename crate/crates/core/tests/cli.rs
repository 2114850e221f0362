use std::path::Path;

use sport::cli::{main_with_args, EXIT_OK, EXIT_USER};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("sport").chain(args.iter().copied());
    let code = main_with_args(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const PANEL: &str = "\
id,time,sex,cd4,treatment,censored
1,0,f,350,0,0
1,1,f,320,1,0
1,2,f,400,1,0
2,0,m,700,0,0
2,1,m,680,0,0
2,2,m,650,0,1
3,0,f,250,0,0
3,1,f,240,1,0
3,2,f,300,1,0
4,0,m,820,0,0
4,1,m,790,0,0
4,2,m,760,0,0
";

const SIM: &str = r#"
n_subjects = 300
n_times = 3
seed = 5
monotone = true

[[baseline]]
kind = "categorical"
name = "sex"
levels = ["f", "m"]
probs = [0.5, 0.5]

[[time_varying]]
kind = "numeric"
name = "cd4"
initial_mean = 500.0
initial_sd = 150.0
drift = 0.0
treatment_effect = 40.0
noise_sd = 30.0

[treatment]
intercept = 0.0
coefficients = [["cd4", -0.002]]
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn data_flags(data: &str) -> Vec<String> {
    ["--data", data, "--id", "id", "--time", "time", "--treatment", "treatment", "--baseline", "sex", "--timevarying", "cd4"]
        .map(String::from)
        .to_vec()
}

fn with(base: &[&str], extra: &[String]) -> Vec<String> {
    base.iter().map(|s| s.to_string()).chain(extra.iter().cloned()).collect()
}

fn run_owned(args: &[String]) -> (i32, String, String) {
    run(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn out_of_range_beta_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "p.csv", PANEL);
    let mut args = with(&["check", "--rule", "static:1", "--beta", "0.7"], &data_flags(&data));
    let (code, out, err) = run_owned(&args);
    assert_eq!(code, EXIT_USER);
    assert!(out.is_empty());
    assert!(err.contains("beta must lie in (0, 0.5)"), "{err}");

    args.truncate(3);
    args.extend(["--gamma".into(), "0".into()]);
    args.extend(data_flags(&data));
    assert_eq!(run_owned(&args).0, EXIT_USER);
}

#[test]
fn missing_flags_and_bad_rules_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "p.csv", PANEL);
    let (code, _, err) = run_owned(&with(&["check"], &data_flags(&data)));
    assert_eq!(code, EXIT_USER);
    assert!(err.contains("--rule"), "{err}");
    let (code, _, err) = run_owned(&with(&["check", "--rule", "dynamic: cd5 < 3"], &data_flags(&data)));
    assert_eq!(code, EXIT_USER);
    assert!(err.contains("cd5"), "{err}");
    assert_eq!(run(&["frobnicate"]).0, EXIT_USER);
    assert_eq!(run(&["--help"]).0, EXIT_OK);
}

#[test]
fn validate_reports_row_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = PANEL.replace("1,1,f,320,1,0", "1,1,f,320,7,0").replace("3,1,f,240,1,0", "3,1,f,240,,0");
    let data = write(dir.path(), "bad.csv", &bad);
    let (code, out, err) = run_owned(&with(&["validate"], &data_flags(&data)));
    assert_eq!(code, EXIT_USER);
    assert!(out.is_empty());
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("row 2"), "{err}");

    let dup = write(dir.path(), "dup.csv", &PANEL.replace("4,2,m,760,0,0", "4,1,m,760,0,0"));
    let (code, _, err) = run_owned(&with(&["validate"], &data_flags(&dup)));
    assert_eq!(code, EXIT_USER);
    assert!(err.contains("validation error(s)"), "{err}");

    let good = write(dir.path(), "good.csv", PANEL);
    let (code, out, _) = run_owned(&with(&["validate"], &data_flags(&good)));
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("ok: 4 subjects, 12 records, times 0..2"), "{out}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "p.csv", PANEL);
    let config = write(
        dir.path(),
        "c.toml",
        &format!(
            "data = {data:?}\nid = \"id\"\ntime = \"time\"\ntreatment = \"treatment\"\nbaseline = [\"sex\"]\n\
             timevarying = [\"cd4\"]\nrule = \"static:1\"\nformat = \"json\"\nbeta = \"0.7\"\n"
        ),
    );
    let (code, _, err) = run(&["check", "--config", &config]);
    assert_eq!(code, EXIT_USER, "{err}");
    let (code, out, err) = run(&["check", "--config", &config, "--beta", "0.2"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.trim_start().starts_with('{'), "{out}");
    let (code, out, _) = run(&["check", "--config", &config, "--beta", "0.2", "--format", "csv"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("\"check\""), "{out}");

    let typo = write(dir.path(), "typo.toml", "alhpa = 0.1\n");
    let (code, _, err) = run(&["check", "--config", &typo]);
    assert_eq!(code, EXIT_USER);
    assert!(err.contains("alhpa"), "{err}");
}

#[test]
fn simulate_is_seeded_and_feeds_check() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write(dir.path(), "sim.toml", SIM);
    let (code, a, err) = run(&["simulate", "--config", &sim]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(run(&["simulate", "--config", &sim]).1, a);
    assert_ne!(run(&["simulate", "--config", &sim, "--seed", "6"]).1, a);
    assert_eq!(run(&["simulate", "--config", &sim, "--seed", "5"]).1, a);

    let out = dir.path().join("sim.csv");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["simulate", "--config", &sim, "--out", out_s]).0, EXIT_OK);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), a);

    let mut flags = data_flags(out_s);
    flags.extend(["--censoring".into(), "censored".into()]);
    let (code, md, err) = run_owned(&with(&["check", "--rule", "dynamic: cd4 < 400", "--monotone"], &flags));
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(md.matches("\n## ").count() + usize::from(md.starts_with("## ")), 2, "{md}");
    let (code, md, err) = run_owned(&with(&["check-censoring", "--pooled"], &flags));
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(md.contains("P(C_t=1"), "{md}");
    assert!(md.contains("pooled over time"), "{md}");
}

#[test]
fn trajectories_count_histories() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "p.csv", PANEL);
    let (code, csv, err) = run_owned(&with(&["trajectories", "--format", "csv"], &data_flags(&data)));
    assert_eq!(code, EXIT_OK, "{err}");
    let total: usize = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("\"2\""))
        .map(|l| l.split(',').nth(2).unwrap().trim_matches('"').parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 4, "{csv}");
}

#[test]
fn reshape_spreads_wide_columns() {
    let dir = tempfile::tempdir().unwrap();
    let wide = write(dir.path(), "w.csv", "id,sex,cd4_0,cd4_1,a_0,a_1\n1,f,300,310,0,1\n2,m,700,,0,\n");
    let (code, long, err) = run(&["reshape", "--data", &wide, "--id", "id", "--stems", "cd4,a"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<&str> = long.lines().collect();
    assert_eq!(lines.len(), 4, "{long}");
    assert!(lines[0].split(',').any(|h| h == "time"), "{long}");
}
