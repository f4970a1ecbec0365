//! Dynamic weighted ordinary least squares with optional regression calibration.
//!
//! Stages are fitted backwards. At each stage a logistic treatment model
//! gives `π̂`, rows get balancing weights `|a - π̂|`, and the current
//! pseudo-outcome is regressed on treatment-free terms plus treatment times
//! blip terms. The blip coefficients then produce the pseudo-outcome for the
//! previous stage.
//!
//! Error-prone covariates are declared as [`ProxyGroup`]s. Before fitting,
//! each group's target columns are filled either with the calibrated `X̂`
//! or, for a naive analysis, with the δ-weighted proxy combination.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    combine_proxies, delta_weights, fit_calibration, fit_calibration_conditional, table_matrix,
    variance_components, CalibrationModel, DeltaScheme, DeltaWeights, ProxySet,
};
use crate::error::{Error, Result};
use crate::regress::{logistic_irls, wls};
use crate::table::{build_design, DataTable, DesignMatrix, Formula};

/// `k` proxies of the `d` covariates named in `targets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyGroup {
    /// Column names the formulas use for the (unobserved) covariates.
    pub targets: Vec<String>,
    /// `proxies[j][c]` is the column holding proxy `j` of `targets[c]`.
    pub proxies: Vec<Vec<String>>,
    /// Error-free covariates entering the calibration model.
    #[serde(default)]
    pub error_free: Vec<String>,
}

impl ProxyGroup {
    pub fn new(targets: &[&str], proxies: &[&[&str]]) -> Self {
        ProxyGroup {
            targets: targets.iter().map(|s| s.to_string()).collect(),
            proxies: proxies
                .iter()
                .map(|p| p.iter().map(|s| s.to_string()).collect())
                .collect(),
            error_free: Vec::new(),
        }
    }

    pub fn with_error_free(mut self, cols: &[&str]) -> Self {
        self.error_free = cols.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn k(&self) -> usize {
        self.proxies.len()
    }

    fn validate(&self, table: &DataTable) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Invalid("proxy group without target columns".into()));
        }
        for (j, p) in self.proxies.iter().enumerate() {
            if p.len() != self.targets.len() {
                return Err(Error::Dimension(format!(
                    "proxy {j} of {:?} lists {} columns, expected {}",
                    self.targets,
                    p.len(),
                    self.targets.len()
                )));
            }
            for c in p {
                table.column(c)?;
            }
        }
        for c in &self.error_free {
            table.column(c)?;
        }
        Ok(())
    }

    fn proxy_set(&self, table: &DataTable) -> Result<ProxySet> {
        ProxySet::from_table(table, &self.proxies)
    }

    fn z(&self, table: &DataTable) -> Result<Option<DMatrix<f64>>> {
        if self.error_free.is_empty() {
            Ok(None)
        } else {
            table_matrix(table, &self.error_free).map(Some)
        }
    }
}

/// Observed trial data plus the roles of its columns.
#[derive(Debug, Clone)]
pub struct TrialDataset {
    pub table: DataTable,
    pub groups: Vec<ProxyGroup>,
    pub outcome: String,
    /// First stage whose models may use each column. Unlisted columns are
    /// baseline.
    pub column_stage: HashMap<String, usize>,
}

impl TrialDataset {
    pub fn new(table: DataTable, groups: Vec<ProxyGroup>, outcome: &str) -> Self {
        TrialDataset {
            table,
            groups,
            outcome: outcome.to_string(),
            column_stage: HashMap::new(),
        }
    }

    pub fn with_stage(mut self, column: &str, stage: usize) -> Self {
        self.column_stage.insert(column.to_string(), stage);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.table.n_rows()
    }

    /// Same roles, rows picked by index (with repetition).
    pub fn resample(&self, rows: &[usize]) -> Result<TrialDataset> {
        Ok(TrialDataset {
            table: self.table.take_rows(rows)?,
            groups: self.groups.clone(),
            outcome: self.outcome.clone(),
            column_stage: self.column_stage.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub treatment: String,
    pub treatment_formula: Formula,
    pub treatment_free_formula: Formula,
    pub blip_formula: Formula,
}

impl StageSpec {
    pub fn new(
        treatment: &str,
        treatment_model: &str,
        treatment_free: &str,
        blip: &str,
    ) -> Result<Self> {
        let blip_formula: Formula = blip.parse()?;
        if !blip_formula.intercept {
            return Err(Error::Invalid(format!(
                "blip model for `{treatment}` must include an intercept"
            )));
        }
        Ok(StageSpec {
            treatment: treatment.to_string(),
            treatment_formula: treatment_model.parse()?,
            treatment_free_formula: treatment_free.parse()?,
            blip_formula,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    #[default]
    Regret,
    Blip,
}

/// A column computed from another after covariate substitution, for models
/// that are nonlinear in a covariate (the formula language has no transforms).
#[derive(Clone, Copy)]
pub struct DerivedColumn {
    pub name: &'static str,
    pub source: &'static str,
    pub map: fn(f64) -> f64,
}

impl fmt::Debug for DerivedColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = f({})", self.name, self.source)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub formulation: Formulation,
    /// `true`: targets are the calibrated `X̂`. `false`: the δ-combined proxy.
    pub calibrate: bool,
    pub delta_scheme: DeltaScheme,
    /// Re-impute on the treated subset when forming pseudo-outcomes.
    pub conditional_calibration: bool,
    pub derived: Vec<DerivedColumn>,
}

impl FitOptions {
    pub fn corrected() -> Self {
        FitOptions {
            calibrate: true,
            ..Default::default()
        }
    }

    pub fn naive() -> Self {
        FitOptions::default()
    }
}

#[derive(Debug, Clone)]
pub struct StageFit {
    pub treatment: String,
    pub psi: Vec<f64>,
    pub psi_labels: Vec<String>,
    pub beta: Vec<f64>,
    pub beta_labels: Vec<String>,
    pub alpha: Vec<f64>,
    pub alpha_labels: Vec<String>,
    pub propensity: Vec<f64>,
    pub weights: Vec<f64>,
    /// Pseudo-outcome regressed at this stage.
    pub response: Vec<f64>,
    /// Pseudo-outcome handed to the previous stage.
    pub pseudo_outcome: Vec<f64>,
    pub a_opt: Vec<f64>,
    pub blip_formula: Formula,
}

#[derive(Debug, Clone)]
pub struct DtrFit {
    pub stages: Vec<StageFit>,
    pub formulation: Formulation,
    /// One per proxy group; `None` for naive fits.
    pub calibration: Vec<Option<CalibrationModel>>,
    pub delta: Vec<DeltaWeights>,
    /// Input table with target and derived columns filled in.
    pub table: DataTable,
    pub warnings: Vec<String>,
}

impl DtrFit {
    pub fn rule(&self) -> DecisionRule {
        DecisionRule {
            stages: self
                .stages
                .iter()
                .map(|s| RuleStage {
                    treatment: s.treatment.clone(),
                    formula: s.blip_formula.clone(),
                    psi: s.psi.clone(),
                })
                .collect(),
        }
    }

    /// `(stage, label, ψ̂)` for every blip coefficient, stage 1 first.
    pub fn blip_estimates(&self) -> Vec<(usize, String, f64)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(j, s)| {
                s.psi_labels
                    .iter()
                    .zip(&s.psi)
                    .map(move |(l, v)| (j + 1, l.clone(), *v))
            })
            .collect()
    }

    pub fn psi_vector(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| s.psi.iter().copied())
            .collect()
    }
}

/// `v = |a - π̂|`.
pub fn balance_weights(a: &[f64], propensity: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(propensity)
        .map(|(a, p)| (a - p).abs())
        .collect()
}

/// `ψ'x` for one blip design row.
pub fn blip_value(psi: &[f64], row: &[f64]) -> f64 {
    psi.iter().zip(row).map(|(p, x)| p * x).sum()
}

/// 1 when the blip is strictly positive.
pub fn optimal_treatment(blip: f64) -> f64 {
    if blip > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `ỹ + γ̂(a_opt) - γ̂(a)`, with `blip` the stage blip at treatment 1.
pub fn pseudo_outcome_regret(next: f64, blip: f64, a: f64) -> f64 {
    next + (optimal_treatment(blip) - a) * blip
}

/// `ỹ - a γ̂`.
pub fn pseudo_outcome_blip(next: f64, blip: f64, a: f64) -> f64 {
    next - a * blip
}

/// Label of the coefficient on `treatment * term`.
pub fn blip_label(treatment: &str, term_label: &str) -> String {
    if term_label == crate::table::INTERCEPT_LABEL {
        treatment.to_string()
    } else {
        format!("{treatment}*{term_label}")
    }
}

fn blip_design_values(table: &DataTable, formula: &Formula) -> Result<DesignMatrix> {
    build_design(table, formula)
}

fn stage_warnings(data: &TrialDataset, specs: &[StageSpec]) -> Vec<String> {
    let mut warnings = Vec::new();
    for (j, spec) in specs.iter().enumerate() {
        let stage = j + 1;
        let cols: BTreeSet<&str> = [
            &spec.treatment_formula,
            &spec.treatment_free_formula,
            &spec.blip_formula,
        ]
        .iter()
        .flat_map(|f| f.columns())
        .collect();
        for c in cols {
            if let Some(&s) = data.column_stage.get(c) {
                if s > stage {
                    warnings.push(format!(
                        "stage {stage} model references `{c}`, which is only available from stage {s}"
                    ));
                }
            }
        }
    }
    warnings
}

struct Substitution {
    table: DataTable,
    calibration: Vec<Option<CalibrationModel>>,
    delta: Vec<DeltaWeights>,
}

fn set_columns(table: &mut DataTable, names: &[String], values: &DMatrix<f64>) -> Result<()> {
    for (c, name) in names.iter().enumerate() {
        let col: Vec<f64> = values.column(c).iter().copied().collect();
        if table.contains(name) {
            table.set_column(name, col)?;
        } else {
            table.push_column(name, col)?;
        }
    }
    Ok(())
}

fn apply_derived(table: &mut DataTable, derived: &[DerivedColumn]) -> Result<()> {
    for d in derived {
        let col: Vec<f64> = table
            .column(d.source)?
            .iter()
            .map(|&v| (d.map)(v))
            .collect();
        if table.contains(d.name) {
            table.set_column(d.name, col)?;
        } else {
            table.push_column(d.name, col)?;
        }
    }
    Ok(())
}

/// Fills every group's target columns; `beta` supplies per-group
/// coefficient blocks for the blup_optimal scheme.
fn substitute(
    data: &TrialDataset,
    options: &FitOptions,
    beta: Option<&[DMatrix<f64>]>,
) -> Result<Substitution> {
    let mut table = data.table.clone();
    let mut calibration = Vec::with_capacity(data.groups.len());
    let mut delta = Vec::with_capacity(data.groups.len());
    for (g, group) in data.groups.iter().enumerate() {
        group.validate(&data.table)?;
        let proxies = group.proxy_set(&data.table)?;
        let hint = beta.map(|b| &b[g]);
        if options.calibrate {
            if group.k() < 2 {
                return Err(Error::TooFew {
                    what: "proxies per error-prone covariate",
                    needed: 2,
                    found: group.k(),
                });
            }
            let z = group.z(&data.table)?;
            let model = fit_calibration(&proxies, z.as_ref(), options.delta_scheme, hint)?;
            let combined = combine_proxies(&proxies, &model.delta)?;
            let xhat = model.impute(&combined, z.as_ref())?;
            set_columns(&mut table, &group.targets, &xhat)?;
            delta.push(model.delta.clone());
            calibration.push(Some(model));
        } else {
            let weights = if group.k() == 1 {
                DeltaWeights {
                    delta: vec![1.0],
                    scheme: options.delta_scheme,
                }
            } else if options.delta_scheme == DeltaScheme::Equal {
                delta_weights(
                    DeltaScheme::Equal,
                    &vec![DMatrix::zeros(0, 0); group.k()],
                    None,
                )?
            } else {
                let vc = variance_components(&proxies);
                delta_weights(options.delta_scheme, &vc.m_j, hint)?
            };
            let combined = combine_proxies(&proxies, &weights)?;
            set_columns(&mut table, &group.targets, &combined)?;
            delta.push(weights);
            calibration.push(None);
        }
    }
    apply_derived(&mut table, &options.derived)?;
    Ok(Substitution {
        table,
        calibration,
        delta,
    })
}

/// Per-group `r x d` blocks of treatment-free coefficients on the targets.
fn beta_blocks(data: &TrialDataset, stages: &[StageFit]) -> Vec<DMatrix<f64>> {
    data.groups
        .iter()
        .map(|g| {
            let rows: Vec<Vec<f64>> = stages
                .iter()
                .map(|s| {
                    g.targets
                        .iter()
                        .map(|t| {
                            s.beta_labels
                                .iter()
                                .position(|l| l == t)
                                .map(|i| s.beta[i])
                                .unwrap_or(0.0)
                        })
                        .collect()
                })
                .filter(|r: &Vec<f64>| r.iter().any(|v| *v != 0.0))
                .collect();
            if rows.is_empty() {
                DMatrix::identity(1, g.targets.len())
                    .rows(0, 1)
                    .into_owned()
            } else {
                DMatrix::from_fn(rows.len(), g.targets.len(), |i, j| rows[i][j])
            }
        })
        .collect()
}

/// Blip values on a table where the groups used by `formula` were
/// re-imputed from a calibration fitted on treated rows only.
fn conditional_blip_design(
    data: &TrialDataset,
    options: &FitOptions,
    sub: &Substitution,
    formula: &Formula,
    a: &[f64],
) -> Result<DesignMatrix> {
    let used: BTreeSet<&str> = formula.columns().into_iter().collect();
    let mut table = sub.table.clone();
    let mut touched = false;
    for (g, group) in data.groups.iter().enumerate() {
        let refs_group = group.targets.iter().any(|t| used.contains(t.as_str()))
            || options
                .derived
                .iter()
                .any(|d| used.contains(d.name) && group.targets.iter().any(|t| t == d.source));
        if !refs_group {
            continue;
        }
        let proxies = group.proxy_set(&data.table)?;
        let z = group.z(&data.table)?;
        let scheme = sub.delta[g].scheme;
        let model =
            fit_calibration_conditional(&proxies, z.as_ref(), scheme, None, a).or_else(|e| {
                match scheme {
                    DeltaScheme::BlupOptimal => fit_calibration_conditional(
                        &proxies,
                        z.as_ref(),
                        DeltaScheme::TraceInverse,
                        None,
                        a,
                    ),
                    _ => Err(e),
                }
            })?;
        let combined = combine_proxies(&proxies, &model.delta)?;
        let xhat = model.impute(&combined, z.as_ref())?;
        set_columns(&mut table, &group.targets, &xhat)?;
        touched = true;
    }
    if touched {
        apply_derived(&mut table, &options.derived)?;
    }
    blip_design_values(&table, formula)
}

/// Backward-recursive dWOLS over `specs` (stage 1 first).
pub fn fit_dwols(data: &TrialDataset, specs: &[StageSpec], options: &FitOptions) -> Result<DtrFit> {
    if options.calibrate && options.delta_scheme == DeltaScheme::BlupOptimal {
        let preliminary = FitOptions {
            delta_scheme: DeltaScheme::TraceInverse,
            ..options.clone()
        };
        let first = fit_dwols(data, specs, &preliminary)?;
        let beta = beta_blocks(data, &first.stages);
        return fit_with_beta(data, specs, options, Some(&beta));
    }
    fit_with_beta(data, specs, options, None)
}

fn fit_with_beta(
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    beta: Option<&[DMatrix<f64>]>,
) -> Result<DtrFit> {
    if specs.is_empty() {
        return Err(Error::Invalid("at least one stage is required".into()));
    }
    let sub = substitute(data, options, beta)?;
    let table = &sub.table;
    let n = table.n_rows();
    let mut response: Vec<f64> = table.column(&data.outcome)?.to_vec();
    let mut stages = Vec::with_capacity(specs.len());

    for spec in specs.iter().rev() {
        let a = table.binary_column(&spec.treatment)?.to_vec();
        let ones = a.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == n {
            return Err(Error::SingleClass(spec.treatment.clone()));
        }

        let tx_design = build_design(table, &spec.treatment_formula)?;
        let logit = logistic_irls(&tx_design, &a)?;
        let weights = balance_weights(&a, &logit.fitted_probabilities);

        let tf_design = build_design(table, &spec.treatment_free_formula)?;
        let blip_design = blip_design_values(table, &spec.blip_formula)?;
        let mut treated = blip_design.clone();
        for (i, mut row) in treated.values.row_iter_mut().enumerate() {
            row *= a[i];
        }
        treated.term_labels = blip_design
            .term_labels
            .iter()
            .map(|l| blip_label(&spec.treatment, l))
            .collect();
        let design = tf_design.hconcat(&treated)?;
        let fit = wls(&design, &response, &weights)?;
        let p_tf = tf_design.n_cols();
        let beta_hat = fit.coefficients[..p_tf].to_vec();
        let psi = fit.coefficients[p_tf..].to_vec();

        let pseudo_design = if options.conditional_calibration && options.calibrate {
            conditional_blip_design(data, options, &sub, &spec.blip_formula, &a)?
        } else {
            blip_design.clone()
        };
        let mut a_opt = Vec::with_capacity(n);
        let mut pseudo = Vec::with_capacity(n);
        for i in 0..n {
            let fitted_blip = blip_value(&psi, blip_design.values.row(i).transpose().as_slice());
            a_opt.push(optimal_treatment(fitted_blip));
            let g = blip_value(&psi, pseudo_design.values.row(i).transpose().as_slice());
            pseudo.push(match options.formulation {
                Formulation::Regret => pseudo_outcome_regret(response[i], g, a[i]),
                Formulation::Blip => pseudo_outcome_blip(response[i], g, a[i]),
            });
        }

        stages.push(StageFit {
            treatment: spec.treatment.clone(),
            psi,
            psi_labels: treated.term_labels.clone(),
            beta: beta_hat,
            beta_labels: tf_design.term_labels.clone(),
            alpha: logit.coefficients,
            alpha_labels: logit.term_labels,
            propensity: logit.fitted_probabilities,
            weights,
            response: std::mem::replace(&mut response, pseudo.clone()),
            pseudo_outcome: pseudo,
            a_opt,
            blip_formula: spec.blip_formula.clone(),
        });
    }
    stages.reverse();
    Ok(DtrFit {
        stages,
        formulation: options.formulation,
        calibration: sub.calibration,
        delta: sub.delta,
        table: sub.table,
        warnings: stage_warnings(data, specs),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleStage {
    pub treatment: String,
    pub formula: Formula,
    pub psi: Vec<f64>,
}

/// Per stage: treat iff `ψ̂'h > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    pub stages: Vec<RuleStage>,
}

impl DecisionRule {
    /// Decisions for every row and stage; `out[j][i]` is stage `j+1`, row `i`.
    pub fn decide(&self, table: &DataTable) -> Result<Vec<Vec<f64>>> {
        (0..self.stages.len())
            .map(|j| self.decide_stage(j, table))
            .collect()
    }

    pub fn decide_stage(&self, stage: usize, table: &DataTable) -> Result<Vec<f64>> {
        let s = &self.stages[stage];
        let design = build_design(table, &s.formula)?;
        if design.n_cols() != s.psi.len() {
            return Err(Error::Dimension(format!(
                "rule for `{}` has {} coefficients, design has {} columns",
                s.treatment,
                s.psi.len(),
                design.n_cols()
            )));
        }
        Ok(design
            .values
            .row_iter()
            .map(|r| optimal_treatment(blip_value(&s.psi, r.transpose().as_slice())))
            .collect())
    }

    /// Decisions for a single row of `table`, one per stage.
    pub fn recommend(&self, table: &DataTable, row: usize) -> Result<Vec<f64>> {
        let single = table.take_rows(&[row])?;
        (0..self.stages.len())
            .map(|j| self.decide_stage(j, &single).map(|v| v[0]))
            .collect()
    }

    /// Flat `key = value` text form.
    pub fn to_text(&self) -> String {
        let mut out = format!("stages = {}\n", self.stages.len());
        for (j, s) in self.stages.iter().enumerate() {
            let k = j + 1;
            out.push_str(&format!("stage{k}.treatment = {}\n", s.treatment));
            out.push_str(&format!("stage{k}.blip = {}\n", s.formula));
            let psi: Vec<String> = s.psi.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!("stage{k}.psi = {}\n", psi.join(" ")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |key: &str| -> Result<&(usize, String)> {
            kv.get(key).ok_or_else(|| Error::Artifact {
                line: 0,
                message: format!("missing key `{key}`"),
            })
        };
        let (line, count) = get("stages")?;
        let count: usize = count.parse().map_err(|_| Error::Artifact {
            line: *line,
            message: "stage count is not an integer".into(),
        })?;
        let mut stages = Vec::with_capacity(count);
        for k in 1..=count {
            let treatment = get(&format!("stage{k}.treatment"))?.1.clone();
            let (line, blip) = get(&format!("stage{k}.blip"))?;
            let formula: Formula = blip.parse().map_err(|e: Error| Error::Artifact {
                line: *line,
                message: e.to_string(),
            })?;
            let (line, psi) = get(&format!("stage{k}.psi"))?;
            let psi = parse_floats(psi, *line)?;
            if psi.len() != formula.n_columns() {
                return Err(Error::Artifact {
                    line: *line,
                    message: format!(
                        "{} coefficients for a blip model with {} columns",
                        psi.len(),
                        formula.n_columns()
                    ),
                });
            }
            stages.push(RuleStage {
                treatment,
                formula,
                psi,
            });
        }
        Ok(DecisionRule { stages })
    }
}

/// `key = value` lines; `#` starts a comment line. Values keep their line number.
pub fn parse_key_values(text: &str) -> Result<HashMap<String, (usize, String)>> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Artifact {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        if out
            .insert(k.trim().to_string(), (i + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::Artifact {
                line: i + 1,
                message: format!("duplicate key `{}`", k.trim()),
            });
        }
    }
    Ok(out)
}

pub fn parse_floats(text: &str, line: usize) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Artifact {
                line,
                message: format!("`{t}` is not a number"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use crate::regress::expit;
    use crate::rng::stream;

    #[test]
    fn weights_balance_identity() {
        assert_abs_diff_eq!(balance_weights(&[1.0], &[0.3])[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(balance_weights(&[0.0], &[0.3])[0], 0.3, epsilon = 1e-15);
        let p = 0.3;
        let v1 = balance_weights(&[1.0], &[p])[0];
        let v0 = balance_weights(&[0.0], &[p])[0];
        assert_abs_diff_eq!(p * v1, (1.0 - p) * v0, epsilon = 1e-15);
    }

    #[test]
    fn blip_and_decisions() {
        assert_eq!(blip_value(&[1.0, 1.0], &[1.0, 2.0]), 3.0);
        assert_eq!(blip_value(&[0.0, 0.0], &[1.0, -7.0]), 0.0);
        for x2 in [-3.0, 0.0, 0.4, 5.0] {
            assert_abs_diff_eq!(
                blip_value(&[1.0, 1.0, -1.0, -1.0], &[1.0, x2, 1.0, x2]),
                0.0,
                epsilon = 1e-15
            );
        }
        assert_eq!(optimal_treatment(3.0), 1.0);
        assert_eq!(optimal_treatment(0.0), 0.0);
        assert_eq!(optimal_treatment(-0.001), 0.0);
    }

    #[test]
    fn pseudo_outcomes() {
        // already optimal: unchanged
        assert_eq!(pseudo_outcome_regret(5.0, 3.0, 1.0), 5.0);
        assert_eq!(pseudo_outcome_regret(5.0, -3.0, 0.0), 5.0);
        // ψ=(1,1), x=2, a=0
        assert_eq!(
            pseudo_outcome_regret(5.0, blip_value(&[1.0, 1.0], &[1.0, 2.0]), 0.0),
            8.0
        );
        // ψ=(1,-1), x=2, a=1
        assert_eq!(
            pseudo_outcome_regret(5.0, blip_value(&[1.0, -1.0], &[1.0, 2.0]), 1.0),
            6.0
        );
        assert_eq!(pseudo_outcome_blip(5.0, 3.0, 0.0), 5.0);
        assert_eq!(pseudo_outcome_blip(5.0, 3.0, 1.0), 2.0);
    }

    #[test]
    fn stage_spec_requires_blip_intercept() {
        assert!(StageSpec::new("A", "1 + X", "1 + X", "0 + X").is_err());
        assert!(StageSpec::new("A", "1 + X", "1 + X", "1 + X").is_ok());
    }

    /// Error-free one-stage data with `Y = 1 + X + A(ψ0 + ψ1 X) + ε`.
    fn one_stage(n: usize, seed: u64, psi: (f64, f64)) -> DataTable {
        let mut rng = stream(seed, "dwols-test", &[]);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let mut x = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: f64 = norm.sample(&mut rng);
            let ai = if rng.random::<f64>() < expit(0.3 + 0.8 * xi) {
                1.0
            } else {
                0.0
            };
            y.push(1.0 + xi + ai * (psi.0 + psi.1 * xi) + norm.sample(&mut rng));
            x.push(xi);
            a.push(ai);
        }
        DataTable::new(vec![("X", x), ("A", a), ("Y", y)]).unwrap()
    }

    #[test]
    fn error_free_fit_recovers_blip() {
        let n = 10_000;
        let data = TrialDataset::new(one_stage(n, 1, (1.0, 1.0)), vec![], "Y");
        let spec = StageSpec::new("A", "1 + X", "1 + X", "1 + X").unwrap();
        let fit = fit_dwols(&data, &[spec], &FitOptions::naive()).unwrap();
        let s = &fit.stages[0];
        assert_eq!(s.psi_labels, vec!["A", "A*X"]);
        // standard errors are about 0.03 here; 3 SE
        assert_abs_diff_eq!(s.psi[0], 1.0, epsilon = 0.1);
        assert_abs_diff_eq!(s.psi[1], 1.0, epsilon = 0.1);
        assert_eq!(s.response, data.table.column("Y").unwrap());
    }

    #[test]
    fn constant_propensity_matches_ols() {
        let table = one_stage(300, 2, (0.5, -1.0));
        let data = TrialDataset::new(table.clone(), vec![], "Y");
        let spec = StageSpec::new("A", "1", "1 + X", "1 + X").unwrap();
        let fit = fit_dwols(&data, &[spec], &FitOptions::naive()).unwrap();
        let a = table.column("A").unwrap();
        let x = table.column("X").unwrap();
        let ax: Vec<f64> = a.iter().zip(x).map(|(a, x)| a * x).collect();
        let t = DataTable::new(vec![("X", x.to_vec()), ("A", a.to_vec()), ("AX", ax)]).unwrap();
        let d = build_design(&t, &"1 + X + A + AX".parse().unwrap()).unwrap();
        let ols = wls(&d, table.column("Y").unwrap(), &vec![1.0; 300]).unwrap();
        // intercept-only treatment model: weights take two values, not one
        let p = a.iter().sum::<f64>() / 300.0;
        let expected: Vec<f64> = a
            .iter()
            .map(|&ai| if ai == 1.0 { 1.0 - p } else { p })
            .collect();
        for (w, e) in fit.stages[0].weights.iter().zip(&expected) {
            assert_abs_diff_eq!(w, e, epsilon = 1e-9);
        }
        // with p̂ = 0.5 everywhere the weights are constant and dWOLS is OLS
        let balanced: Vec<f64> = (0..300).map(|i| (i % 2) as f64).collect();
        let mut tb = table.clone();
        tb.set_column("A", balanced.clone()).unwrap();
        let data = TrialDataset::new(tb.clone(), vec![], "Y");
        let spec = StageSpec::new("A", "1", "1 + X", "1 + X").unwrap();
        let fit = fit_dwols(&data, &[spec], &FitOptions::naive()).unwrap();
        assert!(fit.stages[0]
            .weights
            .iter()
            .all(|w| (w - 0.5).abs() < 1e-12));
        let bx: Vec<f64> = balanced.iter().zip(x).map(|(a, x)| a * x).collect();
        let t = DataTable::new(vec![("X", x.to_vec()), ("A", balanced), ("AX", bx)]).unwrap();
        let d = build_design(&t, &"1 + X + A + AX".parse().unwrap()).unwrap();
        let ols2 = wls(&d, tb.column("Y").unwrap(), &vec![1.0; 300]).unwrap();
        for (a, b) in fit.stages[0].psi.iter().zip(&ols2.coefficients[2..]) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert_eq!(ols.coefficients.len(), 4);
    }

    fn proxied_two_stage(n: usize, seed: u64) -> TrialDataset {
        let mut rng = stream(seed, "dwols-two-stage", &[]);
        let std = Normal::new(0.0, 1.0).unwrap();
        let err = Normal::new(0.0, 0.5).unwrap();
        let cols = ["X11", "X12", "X21", "X22", "A1", "A2", "Y", "X1", "X2"];
        let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(n); cols.len()];
        for _ in 0..n {
            let x1: f64 = std.sample(&mut rng);
            let p11 = x1 + err.sample(&mut rng);
            let p12 = x1 + err.sample(&mut rng);
            let a1 = (rng.random::<f64>() < expit(p11)) as u8 as f64;
            let x2 = a1 + std.sample(&mut rng);
            let p21 = x2 + err.sample(&mut rng);
            let p22 = x2 + err.sample(&mut rng);
            let a2 = (rng.random::<f64>() < expit(p21)) as u8 as f64;
            let g1 = 1.0 + x1;
            let g2 = 1.0 + x2;
            let y = x1 - (optimal_treatment(g1) - a1) * g1 - (optimal_treatment(g2) - a2) * g2
                + std.sample(&mut rng);
            for (c, v) in [p11, p12, p21, p22, a1, a2, y, x1, x2]
                .into_iter()
                .enumerate()
            {
                data[c].push(v);
            }
        }
        let table = DataTable::new(cols.iter().copied().zip(data).collect()).unwrap();
        TrialDataset::new(
            table,
            vec![
                ProxyGroup::new(&["X1"], &[&["X11"], &["X12"]]),
                ProxyGroup::new(&["X2"], &[&["X21"], &["X22"]]),
            ],
            "Y",
        )
        .with_stage("X2", 2)
        .with_stage("A1", 2)
        .with_stage("X21", 2)
        .with_stage("X22", 2)
        .with_stage("A2", 3)
    }

    fn two_stage_specs() -> Vec<StageSpec> {
        vec![
            StageSpec::new("A1", "1 + X1", "1 + X1", "1 + X1").unwrap(),
            StageSpec::new("A2", "1 + X2", "1 + X2", "1 + X2").unwrap(),
        ]
    }

    fn weighted_arm_means(fit: &DtrFit, stage: usize, col: &str) -> (f64, f64) {
        let s = &fit.stages[stage];
        let a = fit.table.column(&s.treatment).unwrap();
        let x = fit.table.column(col).unwrap();
        let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..a.len() {
            let v = s.weights[i];
            if a[i] == 1.0 {
                n1 += v * x[i];
                d1 += v;
            } else {
                n0 += v * x[i];
                d0 += v;
            }
        }
        (n1 / d1, n0 / d0)
    }

    #[test]
    fn calibrated_fit_balances_imputed_covariates() {
        let data = proxied_two_stage(2000, 3);
        let fit = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap();
        for (stage, col) in [(0, "X1"), (1, "X2")] {
            let (m1, m0) = weighted_arm_means(&fit, stage, col);
            assert_abs_diff_eq!(m1, m0, epsilon = 1e-6);
        }
        assert!(fit.calibration.iter().all(|c| c.is_some()));
        assert!(fit.warnings.is_empty());
    }

    #[test]
    fn oracle_columns_are_replaced() {
        let data = proxied_two_stage(500, 4);
        let fit = fit_dwols(&data, &two_stage_specs(), &FitOptions::naive()).unwrap();
        let x1 = fit.table.column("X1").unwrap();
        let p11 = data.table.column("X11").unwrap();
        let p12 = data.table.column("X12").unwrap();
        let d = &fit.delta[0].delta;
        for i in 0..x1.len() {
            assert_abs_diff_eq!(x1[i], d[0] * p11[i] + d[1] * p12[i], epsilon = 1e-12);
        }
        assert_ne!(x1, data.table.column("X1").unwrap());
    }

    #[test]
    fn formulations_share_final_stage() {
        let data = proxied_two_stage(1000, 5);
        let regret = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap();
        let blip = fit_dwols(
            &data,
            &two_stage_specs(),
            &FitOptions {
                formulation: Formulation::Blip,
                ..FitOptions::corrected()
            },
        )
        .unwrap();
        assert_eq!(regret.stages[1].psi, blip.stages[1].psi);
        assert_eq!(regret.rule().stages[1], blip.rule().stages[1]);
        // the two pseudo-outcomes differ by the per-row γ̂(â_opt)
        let s = &regret.stages[1];
        for i in 0..data.n_rows() {
            let shift = regret.stages[1].pseudo_outcome[i] - blip.stages[1].pseudo_outcome[i];
            let x = regret.table.column("X2").unwrap()[i];
            let g = s.psi[0] + s.psi[1] * x;
            assert_abs_diff_eq!(shift, optimal_treatment(g) * g, epsilon = 1e-9);
        }
    }

    #[test]
    fn regret_error_decomposition() {
        // ψ̂ forced to the truth (1, 1); X known from the generator
        let data = proxied_two_stage(1000, 6);
        let fit = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap();
        let xhat = fit.table.column("X2").unwrap();
        let x = data.table.column("X2").unwrap();
        let a = data.table.column("A2").unwrap();
        let (p0, p1) = (1.0, 1.0);
        for i in 0..x.len() {
            let a_hat = optimal_treatment(p0 + p1 * xhat[i]);
            let a_opt = optimal_treatment(p0 + p1 * x[i]);
            let mu_hat = (a_hat - a[i]) * (p0 + p1 * xhat[i]);
            let mu = (a_opt - a[i]) * (p0 + p1 * x[i]);
            let rhs =
                (a_hat - a_opt) * (p0 + p1 * xhat[i]) + (a_opt - a[i]) * p1 * (xhat[i] - x[i]);
            assert_abs_diff_eq!(mu_hat - mu, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn future_columns_warn() {
        let data = proxied_two_stage(300, 7);
        let specs = vec![
            StageSpec::new("A1", "1 + X1", "1 + X1 + X2", "1 + X1").unwrap(),
            StageSpec::new("A2", "1 + X2", "1 + X2", "1 + X2").unwrap(),
        ];
        let fit = fit_dwols(&data, &specs, &FitOptions::corrected()).unwrap();
        assert_eq!(fit.warnings.len(), 1);
        assert!(fit.warnings[0].contains("`X2`"));
    }

    #[test]
    fn single_proxy_calibration_is_rejected() {
        let mut data = proxied_two_stage(100, 8);
        data.groups[0].proxies.pop();
        let err = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap_err();
        assert!(matches!(
            err,
            Error::TooFew {
                needed: 2,
                found: 1,
                ..
            }
        ));
        // the naive path uses the single proxy directly
        let fit = fit_dwols(&data, &two_stage_specs(), &FitOptions::naive()).unwrap();
        assert_eq!(
            fit.table.column("X1").unwrap(),
            data.table.column("X11").unwrap()
        );
    }

    #[test]
    fn single_class_stage_is_rejected() {
        let mut data = proxied_two_stage(100, 9);
        data.table.set_column("A2", vec![1.0; 100]).unwrap();
        assert!(matches!(
            fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn blup_optimal_scheme_runs() {
        let data = proxied_two_stage(800, 10);
        let opts = FitOptions {
            delta_scheme: DeltaScheme::BlupOptimal,
            ..FitOptions::corrected()
        };
        let fit = fit_dwols(&data, &two_stage_specs(), &opts).unwrap();
        // d = 1: same weights as trace_inverse
        let ti = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap();
        for (a, b) in fit.delta.iter().zip(&ti.delta) {
            for (x, y) in a.delta.iter().zip(&b.delta) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conditional_calibration_only_moves_pseudo_outcomes() {
        let data = proxied_two_stage(1500, 11);
        let plain = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap();
        let cond = fit_dwols(
            &data,
            &two_stage_specs(),
            &FitOptions {
                conditional_calibration: true,
                formulation: Formulation::Blip,
                ..FitOptions::corrected()
            },
        )
        .unwrap();
        assert_eq!(plain.stages[1].psi, cond.stages[1].psi);
        let a = data.table.column("A2").unwrap();
        let blip_plain = fit_dwols(
            &data,
            &two_stage_specs(),
            &FitOptions {
                formulation: Formulation::Blip,
                ..FitOptions::corrected()
            },
        )
        .unwrap();
        let mut moved = 0;
        for i in 0..a.len() {
            let (p, c) = (
                blip_plain.stages[1].pseudo_outcome[i],
                cond.stages[1].pseudo_outcome[i],
            );
            if a[i] == 0.0 {
                assert_eq!(p, c);
            } else if (p - c).abs() > 1e-9 {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn rule_round_trip_and_recommend() {
        let data = proxied_two_stage(400, 12);
        let fit = fit_dwols(&data, &two_stage_specs(), &FitOptions::corrected()).unwrap();
        let rule = fit.rule();
        let back = DecisionRule::from_text(&rule.to_text()).unwrap();
        assert_eq!(rule, back);
        let decided = rule.decide(&fit.table).unwrap();
        assert_eq!(decided[0], fit.stages[0].a_opt);
        assert_eq!(decided[1], fit.stages[1].a_opt);
        let one = rule.recommend(&fit.table, 17).unwrap();
        assert_eq!(one, vec![decided[0][17], decided[1][17]]);

        let rule = DecisionRule::from_text(
            "stages = 1\nstage1.treatment = A\nstage1.blip = 1 + x\nstage1.psi = 1 1\n",
        )
        .unwrap();
        let t = DataTable::new(vec![("x", vec![0.0, -1.0, 2.0])]).unwrap();
        assert_eq!(rule.decide(&t).unwrap()[0], vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            rule.recommend(&DataTable::new(vec![("z", vec![1.0])]).unwrap(), 0),
            Err(Error::UnknownColumn(_))
        ));
        assert!(DecisionRule::from_text("stages = 1\nstage1.treatment = A\n").is_err());
    }
}
