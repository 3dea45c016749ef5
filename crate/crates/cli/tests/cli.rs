//! End-to-end tests of the command-line binary and its exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relmm::{apply_mdm, generate_complete, SimConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_relmm")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_table_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
[data]
response = "y"
na_token = "NA"

[[covariate]]
name = "intercept"
kind = "time_invariant"
missable = false

[[covariate]]
name = "x1"
kind = "time_invariant"
missable = true

[[covariate]]
name = "x2"
kind = "time_invariant"
missable = false

[[covariate]]
name = "t"
kind = "time_varying"
missable = false

[[covariate]]
name = "x4"
kind = "time_varying"
missable = true
"#,
    )
    .unwrap();
    path
}

fn export_dataset(dir: &Path, cfg: &SimConfig, masked: bool) -> PathBuf {
    let (full, _) = generate_complete(cfg, 0);
    let data = if masked { apply_mdm(&full, cfg, 0).unwrap().0 } else { full };
    let path = dir.join(if masked { "masked.csv" } else { "full.csv" });
    data.write_csv(&path, "NA").unwrap();
    path
}

#[test]
fn fit_complete_data_cce_equals_cdoe() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_table_config(dir.path());
    let csv = export_dataset(dir.path(), &SimConfig::table1(25, 1, 11), false);

    let out_cce = dir.path().join("cce");
    let out_cdoe = dir.path().join("cdoe");
    let r1 = run(&[
        "fit", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--method", "CCE", "--out", out_cce.to_str().unwrap(),
    ]);
    assert_eq!(code(&r1), 0, "{}", String::from_utf8_lossy(&r1.stderr));
    let r2 = run(&[
        "fit", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--method", "CDOE", "--out", out_cdoe.to_str().unwrap(),
    ]);
    assert_eq!(code(&r2), 0);

    let est_cce = std::fs::read_to_string(out_cce.join("estimates.csv")).unwrap();
    let est_cdoe = std::fs::read_to_string(out_cdoe.join("estimates.csv")).unwrap();
    // Complete data: the two pipelines fit identical models.
    assert_eq!(est_cce, est_cdoe);
}

#[test]
fn fit_cdoe_without_complete_records_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_table_config(dir.path());
    // x1 missing for every subject: a missing covariate in every row.
    let csv = dir.path().join("allmiss.csv");
    let mut text = String::from("subject,time,y,intercept,x1,x2,t,x4\n");
    for i in 1..=8 {
        for t in 1..=5 {
            text.push_str(&format!("{i},{t},1.{t},1.0,NA,0.0,{t}.0,0.5\n"));
        }
    }
    std::fs::write(&csv, text).unwrap();

    let r = run(&[
        "fit", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--method", "CDOE", "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no complete records"));
}

#[test]
fn fit_full_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_table_config(dir.path());
    let csv = export_dataset(dir.path(), &SimConfig::table1(25, 1, 12), false);
    let r = run(&[
        "fit", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--method", "FULL", "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 4);
}

#[test]
fn ccpe_reports_naive_se_smaller_than_cce() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_table_config(dir.path());
    let csv = export_dataset(dir.path(), &SimConfig::table2(100, 1, 13), true);

    let out_cce = dir.path().join("cce");
    let out_ccpe = dir.path().join("ccpe");
    let r1 = run(&[
        "fit", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--method", "CCE", "--out", out_cce.to_str().unwrap(),
    ]);
    assert_eq!(code(&r1), 0, "{}", String::from_utf8_lossy(&r1.stderr));
    let r2 = run(&[
        "fit", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--method", "CCPE", "--out", out_ccpe.to_str().unwrap(),
    ]);
    assert_eq!(code(&r2), 0, "{}", String::from_utf8_lossy(&r2.stderr));

    let parse = |p: PathBuf| -> Vec<(String, f64, String)> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[2].parse().unwrap(), f[3].to_string())
            })
            .collect()
    };
    let cce = parse(out_cce.join("estimates.csv"));
    let ccpe = parse(out_ccpe.join("estimates.csv"));
    assert_eq!(cce.len(), ccpe.len());
    let smaller = cce
        .iter()
        .zip(&ccpe)
        .filter(|((_, se_cce, _), (_, se_ccpe, _))| se_ccpe < se_cce)
        .count();
    // The refit treats predictions as data, so most terms shrink.
    assert!(smaller * 2 > cce.len(), "only {smaller} of {} terms shrank", cce.len());
    assert!(ccpe.iter().all(|(_, _, flag)| flag.contains("naive_se")));
}

#[test]
fn simulate_zero_nsim_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&[
        "simulate", "--preset", "table1", "--m", "20", "--nsim", "0",
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn simulate_unknown_preset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&[
        "simulate", "--preset", "table9", "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn simulate_is_byte_identical_across_runs_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str, jobs: &str| {
        vec![
            "simulate".to_string(), "--preset".into(), "table2".into(), "--m".into(), "20".into(),
            "--nsim".into(), "6".into(), "--seed".into(), "42".into(),
            "--out".into(), dir.path().join(out).display().to_string(),
            "--jobs".into(), jobs.into(),
        ]
    };
    for (out, jobs) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let argv = args(out, jobs);
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        let r = run(&argv);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    let a = std::fs::read(dir.path().join("a/mc_report.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/mc_report.csv")).unwrap();
    let c = std::fs::read(dir.path().join("c/mc_report.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn covcheck_preset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&[
        "covcheck", "--preset", "table1", "--m", "60", "--seeds", "5", "--seed", "9",
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/covcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6); // header + 5 seeds
    assert!(String::from_utf8_lossy(&r.stdout).contains("PASS"));
}

#[test]
fn covcheck_single_subject_design_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // One subject cannot identify the five fixed effects: singular
    // information. Seed chosen so the subject keeps complete records
    // (otherwise the failure is "no complete records", a different code).
    for seed in 0..50u64 {
        let cfg = SimConfig::table1(1, 1, seed);
        let (full, _) = generate_complete(&cfg, 0);
        let (masked, _) = apply_mdm(&full, &cfg, 0).unwrap();
        if relmm::complete_records(&masked).is_ok() {
            let r = run(&[
                "covcheck", "--preset", "table1", "--m", "1", "--seeds", "1",
                "--seed", &seed.to_string(),
                "--out", dir.path().join("o").to_str().unwrap(),
            ]);
            assert_eq!(code(&r), 3, "seed {seed}: {}", String::from_utf8_lossy(&r.stderr));
            return;
        }
    }
    panic!("no seed kept complete records");
}

#[test]
fn predict_writes_ebp_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_table_config(dir.path());
    let csv = export_dataset(dir.path(), &SimConfig::table2(40, 1, 14), true);
    let out = dir.path().join("o");
    let r = run(&[
        "predict", "--data", csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("subject,time,ebp\n"));
    assert!(preds.lines().count() > 1, "no predictions emitted");
    for line in preds.lines().skip(1) {
        let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(v.is_finite());
    }
}
