use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use dtrme_core::dwols::{fit_dwols, DecisionRule, TrialDataset};
use dtrme_core::simulate::{run_study, write_summary_csv};
use dtrme_core::recommend::pooled_table;
use dtrme_core::{mn_bootstrap, DataTable, PseudoCorrector};

use crate::config::{PredictMode, RunConfig};
use crate::CliError;

fn provenance(cfg: &RunConfig, seed: Option<u64>) -> String {
    let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    format!(
        "# dtrme {}\n# seed {seed}\n# config_sha256 {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.digest()
    )
}

fn io_err(path: Option<&Path>, e: io::Error) -> CliError {
    match path {
        Some(p) => CliError::Internal(format!("{}: {e}", p.display())),
        None => CliError::Internal(e.to_string()),
    }
}

/// Writes `body` to `out`, or to standard output.
fn emit(out: Option<&Path>, body: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| io_err(Some(p), e))?);
            w.write_all(body).map_err(|e| io_err(Some(p), e))?;
            w.flush().map_err(|e| io_err(Some(p), e))
        }
        None => {
            let mut w = io::stdout().lock();
            w.write_all(body).map_err(|e| io_err(None, e))
        }
    }
}

fn read_artifact(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn fit(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let data = cfg.dataset()?;
    let specs = cfg.specs()?;
    let fit = fit_dwols(&data, &specs, &cfg.fit_options())?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    let header = provenance(cfg, cfg.seed);
    let mut body = header.clone();
    body.push_str("stage,term,estimate\n");
    for (stage, label, v) in fit.blip_estimates() {
        body.push_str(&csv_line(&[stage.to_string(), label, num(v)]));
    }
    emit(out, body.as_bytes())?;
    if let Some(out) = out {
        let rule = format!("{header}{}", fit.rule().to_text());
        emit(Some(&out.with_extension("rule")), rule.as_bytes())?;
        if cfg.calibration.enabled && !data.groups.is_empty() {
            let corrector = PseudoCorrector::from_fit(&fit, &data)?;
            let text = format!("{header}{}", corrector.to_text());
            emit(Some(&out.with_extension("corrector")), text.as_bytes())?;
        }
    }
    Ok(())
}

pub fn bootstrap(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let data = cfg.dataset()?;
    let specs = cfg.specs()?;
    let mut boot = cfg.bootstrap.clone();
    if let Some(s) = cfg.seed {
        boot.seed = s;
    }
    boot.validate()?;
    let report = mn_bootstrap(&data, &specs, &cfg.fit_options(), &boot)?;
    let mut body = provenance(cfg, Some(boot.seed));
    body.push_str(&format!("# p_hat {}\n", report.p_hat));
    match report.zeta_hat {
        Some(z) => body.push_str(&format!("# zeta_hat {z}\n")),
        None => body.push_str("# zeta_hat none\n"),
    }
    body.push_str(&format!("# m {}\n", report.m));
    body.push_str(&format!(
        "# resamples {} failures {}\n",
        report.resamples.len(),
        report.failures
    ));
    body.push_str("stage,term,estimate,lower,upper\n");
    for (i, (stage, label)) in report.labels.iter().enumerate() {
        body.push_str(&csv_line(&[
            stage.to_string(),
            label.clone(),
            num(report.estimates[i]),
            num(report.lower[i]),
            num(report.upper[i]),
        ]));
    }
    emit(out, body.as_bytes())
}

pub fn simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let mut scenario = cfg.scenario()?;
    if let Some(s) = cfg.seed {
        scenario.seed = s;
    }
    let summary = run_study(&scenario)?;
    if summary.flagged {
        log::warn!(
            "{} of {} replicates failed",
            summary.failures,
            summary.attempted
        );
    }
    let mut body = provenance(cfg, Some(scenario.seed)).into_bytes();
    body.extend(
        format!(
            "# replicates {} failures {}\n",
            summary.attempted, summary.failures
        )
        .bytes(),
    );
    write_summary_csv(&summary.rows, &mut body)?;
    emit(out, &body)
}

pub fn predict(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let p = &cfg.predict;
    let rule_path = p
        .rule_path
        .as_deref()
        .ok_or_else(|| CliError::Config("predict.rule_path is required".into()))?;
    let rule = DecisionRule::from_text(&read_artifact(rule_path)?)?;
    let stages: Vec<usize> = if p.stages.is_empty() {
        (1..=rule.stages.len()).collect()
    } else {
        p.stages.clone()
    };
    for s in &stages {
        if *s == 0 || *s > rule.stages.len() {
            return Err(CliError::Config(format!(
                "stage {s} is outside the rule's 1..={} stages",
                rule.stages.len()
            )));
        }
    }
    // groups whose targets the requested stages never read need not be measured
    let needed: HashSet<&str> = stages
        .iter()
        .flat_map(|s| rule.stages[s - 1].formula.columns())
        .collect();
    let used = |targets: &[String]| targets.iter().any(|t| needed.contains(t.as_str()));

    let table = match p.mode {
        PredictMode::OneAtATime => {
            let path = p.corrector_path.as_deref().ok_or_else(|| {
                CliError::Config("one-at-a-time prediction needs predict.corrector_path".into())
            })?;
            let mut c = PseudoCorrector::from_text(&read_artifact(path)?)?;
            for (g, avail) in &p.available {
                c = c.with_available(*g, avail)?;
            }
            c.groups.retain(|g| used(&g.group.targets));
            c.impute(&DataTable::from_csv_path(cfg.data_path()?)?, &[])?
        }
        PredictMode::Pooled => {
            let mut groups = cfg.groups();
            if groups.is_empty() {
                return Err(CliError::Config(
                    "pooled prediction needs data.proxy_groups".into(),
                ));
            }
            groups.retain(|g| used(&g.targets));
            let table = DataTable::from_csv_path(cfg.data_path()?)?;
            pooled_table(
                &TrialDataset::new(table, groups, ""),
                cfg.calibration.delta_scheme,
                &[],
            )?
        }
        PredictMode::True => DataTable::from_csv_path(cfg.data_path()?)?,
    };
    let decisions = stages
        .iter()
        .map(|s| rule.decide_stage(s - 1, &table))
        .collect::<Result<Vec<_>, _>>()?;

    let mut body = provenance(cfg, cfg.seed);
    let mut head = vec!["row".to_string()];
    head.extend(stages.iter().map(|s| rule.stages[s - 1].treatment.clone()));
    body.push_str(&csv_line(&head));
    for i in 0..table.n_rows() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(decisions.iter().map(|d| num(d[i])));
        body.push_str(&csv_line(&rec));
    }
    emit(out, body.as_bytes())
}
