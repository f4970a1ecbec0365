use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dtrme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtrme"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two-stage trial shaped like the depression study: starting score `Q`,
/// slope `S`, preference `P`; clinician (`_c`) and self-report (`_s`)
/// measurements of `Q` and `S`.
fn stard_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    let mut lines = vec![
        "Q1_c,Q1_s,S1_c,S1_s,P1,A1,Q2_c,Q2_s,S2_c,S2_s,P2,A2,Y".to_string(),
    ];
    let mut u = ChaCha8Rng::seed_from_u64(seed + 1);
    for _ in 0..n {
        let q1 = g();
        let s1 = g();
        let p1 = f64::from(u.random::<f64>() < 0.5);
        let a1 = f64::from(u.random::<f64>() < expit(-0.3 + 0.6 * p1));
        let q2 = 0.5 * q1 - 0.3 * a1 + g();
        let s2 = g();
        let p2 = f64::from(u.random::<f64>() < 0.5);
        let a2 = f64::from(u.random::<f64>() < expit(0.2 - 0.5 * p2));
        let g1 = 0.5 + p1 - 0.3 * q1;
        let g2 = -0.2 + 0.4 * q2 + 0.5 * s2;
        let y = -q1 + 0.5 * s1 + p1 + a1 * g1 - q2 + a2 * g2 + g();
        let row = [
            q1 + 0.5 * g(),
            q1 + 0.5 * g(),
            s1 + 0.5 * g(),
            s1 + 0.5 * g(),
            p1,
            a1,
            q2 + 0.5 * g(),
            q2 + 0.5 * g(),
            s2 + 0.5 * g(),
            s2 + 0.5 * g(),
            p2,
            a2,
            y,
        ];
        lines.push(
            row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    let path = dir.join("trial.csv");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn stard_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "data": {{
    "path": "{}",
    "proxy_groups": [
      {{"targets": ["Q1", "S1"], "proxies": [["Q1_c", "S1_c"], ["Q1_s", "S1_s"]]}},
      {{"targets": ["Q2", "S2"], "proxies": [["Q2_c", "S2_c"], ["Q2_s", "S2_s"]]}}
    ],
    "treatment_columns": ["A1", "A2"],
    "outcome_column": "Y",
    "column_stages": {{"A1": 2, "P2": 2, "Q2": 2, "S2": 2, "Q2_c": 2, "Q2_s": 2,
                       "S2_c": 2, "S2_s": 2, "A2": 3}}
  }},
  "model": {{"stages": [
    {{"treatment": "A1", "treatment_model": "1 + P1",
      "treatment_free": "1 + P1 + S1 + Q1", "blip": "1 + P1 + Q1 + S1"}},
    {{"treatment": "A2", "treatment_model": "1 + P2",
      "treatment_free": "1 + P2 + S2 + Q2 + A1", "blip": "1 + Q2 + S2"}}
  ]}}{extra}
}}"#,
        data.display()
    );
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn fit_reports_blip_table_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = stard_csv(dir.path(), 600, 1);
    let cfg = stard_config(dir.path(), &data, "");
    let out = dir.path().join("coef.csv");
    let o = dtrme(&["fit", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# dtrme "));
    assert_eq!(lines[1], "# seed none");
    assert!(lines[2].starts_with("# config_sha256 "));
    assert_eq!(lines[3], "stage,term,estimate");
    let terms: Vec<&str> = lines[4..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        terms,
        ["A1", "A1*P1", "A1*Q1", "A1*S1", "A2", "A2*Q2", "A2*S2"]
    );
    let rule = fs::read_to_string(dir.path().join("coef.rule")).unwrap();
    assert!(rule.contains("stage2.blip = 1 + Q2 + S2"));
    assert!(dir.path().join("coef.corrector").exists());
}

#[test]
fn missing_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = stard_csv(dir.path(), 100, 2);
    let text = fs::read_to_string(&data).unwrap().replace("P1,", "Pref1,");
    fs::write(&data, text).unwrap();
    let cfg = stard_config(dir.path(), &data, "");
    let o = dtrme(&["fit", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown column `P1`"), "{}", stderr(&o));
}

#[test]
fn single_proxy_group_rejected_when_calibrating() {
    let dir = tempfile::tempdir().unwrap();
    let data = stard_csv(dir.path(), 100, 3);
    let cfg = stard_config(dir.path(), &data, "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace(r#"[["Q1_c", "S1_c"], ["Q1_s", "S1_s"]]"#, r#"[["Q1_c", "S1_c"]]"#);
    fs::write(&cfg, text).unwrap();
    let o = dtrme(&["fit", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("calibration needs 2"), "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"seed\": ").unwrap();
    let o = dtrme(&["fit", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = dtrme(&["fit", "--config", path_str(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = dtrme(&["simulate", "--scenario", "multistage-9"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dtrme(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |out: &Path, threads: &str| {
        dtrme(&[
            "simulate",
            "--scenario",
            "multistage-1",
            "--n",
            "2000",
            "--replicates",
            "200",
            "--seed",
            "7",
            "--threads",
            threads,
            "--out",
            path_str(out),
        ])
    };
    let o = args(&a, "4");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(args(&b, "1").status.success());
    let ta = fs::read(&a).unwrap();
    assert_eq!(ta, fs::read(&b).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert!(text.contains("# seed 7\n"));
    assert!(text.contains("scenario,proxy_mode,parameter,corrected_median,naive_median"));
    assert_eq!(text.lines().filter(|l| l.starts_with("multistage-1,")).count(), 16);
}

#[test]
fn bootstrap_header_precedes_interval_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = stard_csv(dir.path(), 300, 4);
    let cfg = stard_config(
        dir.path(),
        &data,
        r#", "bootstrap": {"B": 60, "Bp": 30, "zeta": {"mode": "fixed", "value": 0.1}}"#,
    );
    let o = dtrme(&["bootstrap", "--config", path_str(&cfg), "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    let pos = |prefix: &str| lines.iter().position(|l| l.starts_with(prefix)).unwrap();
    let table = pos("stage,term,estimate,lower,upper");
    for key in ["# p_hat ", "# zeta_hat 0.1", "# m "] {
        assert!(pos(key) < table, "{key}");
    }
    let m: usize = lines[pos("# m ")][4..].parse().unwrap();
    assert!((2..=300).contains(&m));
    assert_eq!(lines.len() - table - 1, 7);
    for l in &lines[table + 1..] {
        let f: Vec<f64> = l.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!(f[1] <= f[2]);
    }
    let again = dtrme(&["bootstrap", "--config", path_str(&cfg), "--seed", "11"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn predict_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = stard_csv(dir.path(), 600, 5);
    let cfg = stard_config(dir.path(), &data, "");
    let coef = dir.path().join("coef.csv");
    assert!(dtrme(&["fit", "--config", path_str(&cfg), "--out", path_str(&coef)])
        .status
        .success());
    let rule = dir.path().join("coef.rule");
    let corrector = dir.path().join("coef.corrector");

    // new patients, stage-one columns only
    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = stard_csv(fresh_dir.path(), 40, 6);
    let text = fs::read_to_string(&fresh).unwrap();
    let stage1: Vec<String> = text
        .lines()
        .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
        .collect();
    let stage1_path = dir.path().join("stage1.csv");
    fs::write(&stage1_path, stage1.join("\n")).unwrap();

    let predict_cfg = |name: &str, body: &str| {
        let base = fs::read_to_string(&cfg).unwrap();
        let text = format!(
            "{}, \"predict\": {body}\n}}",
            base.trim_end().trim_end_matches('}')
        );
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };

    let p = predict_cfg(
        "one.json",
        &format!(
            r#"{{"mode": "one-at-a-time", "rule_path": "{}", "corrector_path": "{}", "stages": [1]}}"#,
            rule.display(),
            corrector.display()
        ),
    );
    let o = dtrme(&["predict", "--config", path_str(&p), "--data", path_str(&stage1_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "row,A1");
    assert_eq!(rows.len(), 41);
    assert!(rows[1..].iter().all(|r| r.ends_with(",0") || r.ends_with(",1")));

    // single measured proxy
    let p = predict_cfg(
        "one_c.json",
        &format!(
            r#"{{"mode": "one-at-a-time", "rule_path": "{}", "corrector_path": "{}",
                "stages": [1], "available": {{"0": [0]}}}}"#,
            rule.display(),
            corrector.display()
        ),
    );
    let only_c: Vec<String> = stage1
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [f[0], f[2], f[4]].join(",")
        })
        .collect();
    let only_c_path = dir.path().join("only_c.csv");
    fs::write(&only_c_path, only_c.join("\n")).unwrap();
    let o = dtrme(&["predict", "--config", path_str(&p), "--data", path_str(&only_c_path)]);
    assert!(o.status.success(), "{}", stderr(&o));

    // both stages, pooled over the new cohort
    let p = predict_cfg(
        "pooled.json",
        &format!(r#"{{"mode": "pooled", "rule_path": "{}"}}"#, rule.display()),
    );
    let o = dtrme(&["predict", "--config", path_str(&p), "--data", path_str(&fresh)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("row,A1,A2\n"));

    // true covariates
    let truth = dir.path().join("truth.csv");
    fs::write(&truth, "P1,Q1,S1,Q2,S2\n1,0.5,0.1,-0.4,0.2\n0,-1,0,1,1\n").unwrap();
    let p = predict_cfg(
        "true.json",
        &format!(r#"{{"mode": "true", "rule_path": "{}"}}"#, rule.display()),
    );
    let o = dtrme(&["predict", "--config", path_str(&p), "--data", path_str(&truth)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn one_at_a_time_without_corrector_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let rule = dir.path().join("r.rule");
    fs::write(&rule, "stages = 1\nstage1.treatment = A\nstage1.blip = 1 + X\nstage1.psi = 1 -1\n").unwrap();
    let cfg = dir.path().join("p.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"predict": {{"mode": "one-at-a-time", "rule_path": "{}"}}}}"#,
            rule.display()
        ),
    )
    .unwrap();
    let o = dtrme(&["predict", "--config", path_str(&cfg), "--data", path_str(&rule)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corrector_path"), "{}", stderr(&o));
}
