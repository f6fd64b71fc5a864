use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/toy")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longfactor"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out-dir", out.to_str().unwrap()]);
    run(&all)
}

fn toy_args(cmd: &str) -> Vec<String> {
    vec![
        cmd.into(),
        "--responses".into(),
        toy("responses.csv").display().to_string(),
        "--covariates".into(),
        toy("covariates.csv").display().to_string(),
        "--config".into(),
        toy("config.json").display().to_string(),
        "--seed".into(),
        "42".into(),
        "--threads".into(),
        "1".into(),
    ]
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn fit_matches_golden_params() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &as_strs(&toy_args("fit")));
    ok(&o);
    let got = std::fs::read(dir.path().join("params.json")).unwrap();
    let want = std::fs::read(toy("golden_params.json")).unwrap();
    assert!(got == want, "params.json differs from the golden copy");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for cmd in ["fit", "evaluate"] {
        ok(&run_in(a.path(), &as_strs(&toy_args(cmd))));
        ok(&run_in(b.path(), &as_strs(&toy_args(cmd))));
        for f in ["report.json", "params.json", "coefficients.csv", "wald.csv"] {
            let (pa, pb) = (a.path().join(f), b.path().join(f));
            if pa.exists() {
                assert_eq!(
                    std::fs::read(&pa).unwrap(),
                    std::fs::read(&pb).unwrap(),
                    "{cmd}: {f}"
                );
            }
        }
    }
}

#[test]
fn missing_covariates_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &[
            "fit",
            "--responses",
            toy("responses.csv").to_str().unwrap(),
            "--config",
            toy("config.json").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_csv_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "person,item,time,value\n1,1,1,0\n1,x,1,1\n").unwrap();
    let o = run_in(
        dir.path(),
        &["fit", "--responses", bad.to_str().unwrap(), "--k", "0"],
    );
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("bad.csv"), "{stderr}");
}

#[test]
fn unknown_flag_and_config_key_are_input_errors() {
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"sed": 1}"#).unwrap();
    let o = run_in(
        dir.path(),
        &[
            "fit",
            "--responses",
            toy("responses.csv").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_candidate_gives_one_ic_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = toy_args("select-k");
    args.extend(["--k-set".into(), "2".into()]);
    ok(&run_in(dir.path(), &as_strs(&args)));
    let ic = std::fs::read_to_string(dir.path().join("ic.csv")).unwrap();
    let lines: Vec<&str> = ic.lines().collect();
    assert_eq!(lines.len(), 2, "{ic}");
    assert!(lines[1].starts_with("2,"));
}

fn history_counts() -> BTreeMap<(usize, usize), u32> {
    let mut counts = BTreeMap::new();
    let text = std::fs::read_to_string(toy("responses.csv")).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (i, j): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let v: f64 = f[3].parse().unwrap();
        *counts.entry((i, j)).or_insert(0) += u32::from(v == 1.0);
    }
    counts
}

#[test]
fn perfect_history_gives_full_hist_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run_in(dir.path(), &as_strs(&toy_args("fit"))));

    // Next period repeats each person's most frequent items.
    let counts = history_counts();
    let n_persons = counts.keys().map(|k| k.0).max().unwrap();
    let mut future = String::from("person,item,value\n");
    let mut widest = 1;
    for i in 1..=n_persons {
        let row: Vec<u32> = (1..=6)
            .map(|j| counts.get(&(i, j)).copied().unwrap_or(0))
            .collect();
        let top = *row.iter().max().unwrap();
        let mut n_top = 0;
        for (j, &c) in row.iter().enumerate() {
            let hit = top > 0 && c == top;
            n_top += usize::from(hit);
            future.push_str(&format!("{i},{},{}\n", j + 1, u8::from(hit)));
        }
        widest = widest.max(n_top);
    }
    let future_path = dir.path().join("future.csv");
    std::fs::write(&future_path, future).unwrap();

    let out = dir.path().join("pred");
    let mut args = toy_args("predict");
    let params = dir.path().join("params.json").display().to_string();
    let top_k = widest.to_string();
    args.extend([
        "--params".into(),
        params,
        "--future".into(),
        future_path.display().to_string(),
        "--top-k".into(),
        top_k,
        "--strategy".into(),
        "hist".into(),
    ]);
    ok(&run_in(&out, &as_strs(&args)));
    let sens = std::fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    let row = sens.lines().nth(1).unwrap();
    let value: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(value, 1.0, "{sens}");
    for f in [
        "predictions.csv",
        "deviance.csv",
        "recommendations.csv",
        "report.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}
