//! Generative scenarios and Monte Carlo replicate runners.
//!
//! Generators return the observed trial separately from its oracle columns
//! (true covariates, true optimal treatments), so analyses cannot see them.
//! Observed proxy columns are `X1_p1`, `X1_p2`, ...; the fitted models refer
//! to the targets `X1`, `X2` (or `X` in the one-stage study), which only
//! exist after substitution.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::DeltaScheme;
use crate::dwols::{
    fit_dwols, optimal_treatment, DecisionRule, DerivedColumn, DtrFit, FitOptions, ProxyGroup,
    StageSpec, TrialDataset,
};
use crate::error::{Error, Result};
use crate::mnboot::{
    bootstrap_with_m, estimate_p, quantile_sorted, resample_size, BootstrapConfig,
};
use crate::recommend::{optimal_rate, pooled_table, PseudoCorrector};
use crate::regress::expit;
use crate::rng::{child_seed, stream, StreamRng};
use crate::table::DataTable;

/// Prefix of every column that only the evaluation may read.
pub const ORACLE_PREFIX: &str = "oracle_";

/// Distribution of a proxy given the true value `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModel {
    /// `x + N(0, variance)`.
    Normal { variance: f64 },
    /// `x + t_df`.
    T { df: f64 },
    /// `x + U(lo, hi)`.
    UniformAdd { lo: f64, hi: f64 },
    /// `x * Gamma(shape, rate)`.
    GammaMult { shape: f64, rate: f64 },
    /// `x * U(lo, hi)`.
    UniformMult { lo: f64, hi: f64 },
    /// `x` itself.
    Exact,
}

impl ErrorModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ErrorModel::Normal { variance } => variance > 0.0,
            ErrorModel::T { df } => df > 2.0,
            ErrorModel::UniformAdd { lo, hi } | ErrorModel::UniformMult { lo, hi } => lo < hi,
            ErrorModel::GammaMult { shape, rate } => shape > 0.0 && rate > 0.0,
            ErrorModel::Exact => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid error model {self:?}")))
        }
    }

    /// Observed value for true value `x`.
    pub fn apply(&self, x: f64, rng: &mut StreamRng) -> f64 {
        match *self {
            ErrorModel::Normal { variance } => {
                x + Normal::new(0.0, variance.sqrt()).unwrap().sample(rng)
            }
            ErrorModel::T { df } => x + StudentT::new(df).unwrap().sample(rng),
            ErrorModel::UniformAdd { lo, hi } => x + Uniform::new(lo, hi).unwrap().sample(rng),
            ErrorModel::GammaMult { shape, rate } => {
                x * Gamma::new(shape, 1.0 / rate).unwrap().sample(rng)
            }
            ErrorModel::UniformMult { lo, hi } => x * Uniform::new(lo, hi).unwrap().sample(rng),
            ErrorModel::Exact => x,
        }
    }

    /// Variance of the additive error, or of the multiplier.
    pub fn variance(&self) -> f64 {
        match *self {
            ErrorModel::Normal { variance } => variance,
            ErrorModel::T { df } => df / (df - 2.0),
            ErrorModel::UniformAdd { lo, hi } | ErrorModel::UniformMult { lo, hi } => {
                (hi - lo).powi(2) / 12.0
            }
            ErrorModel::GammaMult { shape, rate } => shape / (rate * rate),
            ErrorModel::Exact => 0.0,
        }
    }
}

/// Linear predictor of the true treatment mechanism in the observed `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentForm {
    #[default]
    Linear,
    Quadratic,
    Exponential,
    Mixed,
}

impl TreatmentForm {
    pub fn predictor(&self, w: f64, alpha: [f64; 2]) -> f64 {
        let base = alpha[0] + alpha[1] * w;
        match self {
            TreatmentForm::Linear => base,
            TreatmentForm::Quadratic => base + w * w,
            TreatmentForm::Exponential => base + w.exp(),
            TreatmentForm::Mixed => base + w * w + w.exp(),
        }
    }
}

/// `f(X1)` in the two-stage outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentFree {
    #[default]
    Linear,
    Quadratic,
    Cubic,
    Exponential,
    Complex,
}

impl TreatmentFree {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TreatmentFree::Linear => x,
            TreatmentFree::Quadratic => x + x * x,
            TreatmentFree::Cubic => x + x * x - x.powi(3),
            TreatmentFree::Exponential => x.exp() - x.powi(3),
            TreatmentFree::Complex => {
                if x >= -0.5 {
                    x.exp()
                } else {
                    0.0
                }
            }
        }
    }
}

/// Which observed value drives the true treatment assignment at a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyUsage {
    FirstProxy,
    MeanProxies,
}

impl ProxyUsage {
    fn label(&self) -> &'static str {
        match self {
            ProxyUsage::FirstProxy => "first",
            ProxyUsage::MeanProxies => "mean",
        }
    }
}

fn modes_label(modes: &[ProxyUsage; 2]) -> String {
    format!("{}/{}", modes[0].label(), modes[1].label())
}

/// The four combinations, in table order.
pub fn all_proxy_modes() -> Vec<[ProxyUsage; 2]> {
    use ProxyUsage::*;
    vec![
        [FirstProxy, FirstProxy],
        [MeanProxies, MeanProxies],
        [MeanProxies, FirstProxy],
        [FirstProxy, MeanProxies],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    OneStage,
    Multistage(u8),
    Coverage(u8),
    Prediction,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::OneStage => f.write_str("one-stage"),
            Scenario::Multistage(k) => write!(f, "multistage-{k}"),
            Scenario::Coverage(k) => write!(f, "coverage-{k}"),
            Scenario::Prediction => f.write_str("prediction"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let numbered = |prefix: &str, max: u8| -> Option<u8> {
            s.strip_prefix(prefix)
                .and_then(|k| k.parse::<u8>().ok())
                .filter(|k| (1..=max).contains(k))
        };
        if s == "one-stage" {
            Ok(Scenario::OneStage)
        } else if s == "prediction" {
            Ok(Scenario::Prediction)
        } else if let Some(k) = numbered("multistage-", 5) {
            Ok(Scenario::Multistage(k))
        } else if let Some(k) = numbered("coverage-", 3) {
            Ok(Scenario::Coverage(k))
        } else {
            Err(Error::Invalid(format!(
                "unknown scenario `{s}` (one-stage, multistage-1..5, coverage-1..3, prediction)"
            )))
        }
    }
}

impl Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to generate and analyse one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Proxy error models: `[X1_p1, X1_p2, X2_p1, X2_p2]`, or two entries
    /// for the one-stage study.
    pub errors: Vec<ErrorModel>,
    pub treatment: [TreatmentForm; 2],
    /// `(α_j0, α_j1)` per stage.
    pub alpha: [[f64; 2]; 2],
    pub treatment_free: TreatmentFree,
    /// Blip coefficients, stage 1 then stage 2, in blip-formula order.
    pub psi: Vec<f64>,
    /// Treatment mechanisms to run; each is a separate set of replicates.
    pub proxy_modes: Vec<[ProxyUsage; 2]>,
    /// Outcome noise variance.
    pub noise_variance: f64,
    /// Patients treated per replicate in the prediction study.
    pub predict_n: usize,
    /// Bootstrap resamples per experiment in the coverage study.
    pub resamples: usize,
    /// Resamples for `p̂` in the coverage study.
    pub p_resamples: usize,
    /// ζ values for the m-out-of-n intervals of the coverage study.
    pub zetas: Vec<f64>,
}

impl ScenarioConfig {
    /// Default configuration of a named scenario.
    pub fn named(name: &str) -> Result<Self> {
        Ok(Self::for_scenario(name.parse()?))
    }

    pub fn for_scenario(scenario: Scenario) -> Self {
        let normal = |variance| ErrorModel::Normal { variance };
        let base = ScenarioConfig {
            scenario,
            n: 2000,
            replicates: 200,
            seed: 1,
            errors: vec![normal(0.25); 4],
            treatment: [TreatmentForm::Linear; 2],
            alpha: [[0.0, 1.0]; 2],
            treatment_free: TreatmentFree::Linear,
            psi: vec![1.0, 1.0, 1.0, 1.0],
            proxy_modes: all_proxy_modes(),
            noise_variance: 1.0,
            predict_n: 5000,
            resamples: 500,
            p_resamples: 200,
            zetas: vec![0.05, 0.10],
        };
        match scenario {
            Scenario::OneStage => ScenarioConfig {
                n: 1000,
                replicates: 500,
                errors: vec![normal(0.25), ErrorModel::T { df: 8.0 }],
                psi: vec![1.0, 1.0],
                proxy_modes: vec![[ProxyUsage::FirstProxy; 2]],
                ..base
            },
            Scenario::Multistage(2) => ScenarioConfig {
                psi: vec![1.0, 0.0, 1.0, 0.0],
                ..base
            },
            Scenario::Multistage(_) => base,
            Scenario::Coverage(k) => {
                let errors = match k {
                    1 => vec![normal(1.0); 4],
                    2 => vec![
                        normal(1.0),
                        ErrorModel::UniformAdd { lo: -1.0, hi: 1.0 },
                        normal(1.0),
                        ErrorModel::GammaMult {
                            shape: 1.0,
                            rate: 1.0,
                        },
                    ],
                    _ => vec![
                        ErrorModel::UniformAdd { lo: -1.0, hi: 1.0 },
                        ErrorModel::GammaMult {
                            shape: 1.0,
                            rate: 1.0,
                        },
                        normal(0.25),
                        ErrorModel::UniformAdd { lo: -1.0, hi: 1.0 },
                    ],
                };
                ScenarioConfig {
                    n: 1000,
                    errors,
                    psi: if k == 3 {
                        vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0]
                    } else {
                        vec![1.0, 1.0, 1.0, 1.0]
                    },
                    proxy_modes: vec![[ProxyUsage::FirstProxy; 2]],
                    zetas: if k == 3 {
                        vec![0.075, 0.05, 0.10]
                    } else {
                        vec![0.05, 0.10]
                    },
                    ..base
                }
            }
            Scenario::Prediction => ScenarioConfig {
                n: 1000,
                errors: vec![
                    ErrorModel::T { df: 10.0 },
                    normal(1.0),
                    normal(0.25),
                    normal(0.25),
                ],
                alpha: [[1.0, -1.0]; 2],
                psi: vec![1.0, -1.0, 3.0, -2.0],
                proxy_modes: vec![[ProxyUsage::FirstProxy; 2]],
                noise_variance: 2.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (proxies, psi) = match self.scenario {
            Scenario::OneStage => (2, 2),
            Scenario::Coverage(3) => (4, 6),
            _ => (4, 4),
        };
        if self.errors.len() != proxies {
            return Err(Error::Invalid(format!(
                "{} needs {proxies} error models, got {}",
                self.scenario,
                self.errors.len()
            )));
        }
        if self.psi.len() != psi {
            return Err(Error::Invalid(format!(
                "{} needs {psi} blip coefficients, got {}",
                self.scenario,
                self.psi.len()
            )));
        }
        for e in &self.errors {
            e.validate()?;
        }
        if self.n < 10 || self.replicates == 0 {
            return Err(Error::Invalid(
                "simulation needs n >= 10 and at least one replicate".into(),
            ));
        }
        if self.proxy_modes.is_empty() {
            return Err(Error::Invalid("no proxy modes to simulate".into()));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Invalid("noise variance must be non-negative".into()));
        }
        if self.scenario == Scenario::Prediction && self.predict_n == 0 {
            return Err(Error::Invalid("prediction cohort is empty".into()));
        }
        if let Scenario::Coverage(_) = self.scenario {
            if self.resamples == 0 || self.p_resamples < 2 {
                return Err(Error::Invalid(
                    "coverage study needs resamples >= 1 and p_resamples >= 2".into(),
                ));
            }
            if self.zetas.iter().any(|z| !(*z > 0.0)) {
                return Err(Error::Invalid("zeta values must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Observed trial plus the columns only evaluation may use.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub data: TrialDataset,
    /// `oracle_*` columns, row-aligned with `data.table`.
    pub oracle: DataTable,
}

impl SimulatedTrial {
    /// Observed and oracle columns side by side.
    pub fn full_table(&self) -> Result<DataTable> {
        let mut t = self.data.table.clone();
        for name in self.oracle.names() {
            t.push_column(name.clone(), self.oracle.column(name)?.to_vec())?;
        }
        Ok(t)
    }
}

fn std_normal(rng: &mut StreamRng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn bernoulli(p: f64, rng: &mut StreamRng) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn build(columns: Vec<(&str, Vec<f64>)>) -> Result<DataTable> {
    DataTable::new(columns)
}

/// `X ~ N(0,1)`, two proxies, `P(A=1 | X_p1 = w) = H(1 - 0.5w + 1.5 exp(w - 1))`,
/// `Y = X + exp(X) + A(ψ0 + ψ1 X) + ε`.
pub fn generate_one_stage(cfg: &ScenarioConfig, rng: &mut StreamRng) -> Result<SimulatedTrial> {
    let n = cfg.n;
    let sd = cfg.noise_variance.sqrt();
    let mut cols: [Vec<f64>; 5] = Default::default();
    for _ in 0..n {
        let x = std_normal(rng);
        let p1 = cfg.errors[0].apply(x, rng);
        let p2 = cfg.errors[1].apply(x, rng);
        let a = bernoulli(expit(1.0 - 0.5 * p1 + 1.5 * (p1 - 1.0).exp()), rng);
        let y = x + x.exp() + a * (cfg.psi[0] + cfg.psi[1] * x) + sd * std_normal(rng);
        for (c, v) in [x, p1, p2, a, y].into_iter().enumerate() {
            cols[c].push(v);
        }
    }
    let [x, p1, p2, a, y] = cols;
    let table = build(vec![("X_p1", p1), ("X_p2", p2), ("A", a), ("Y", y)])?;
    let data = TrialDataset::new(table, vec![ProxyGroup::new(&["X"], &[&["X_p1"], &["X_p2"]])], "Y");
    Ok(SimulatedTrial {
        data,
        oracle: build(vec![("oracle_X", x)])?,
    })
}

/// Two-stage generator shared by the multistage, coverage and prediction
/// families.
///
/// Multistage and prediction: `X2 ~ N(A1, 1)` and the outcome is written with
/// regrets, `Y = f(X1) - Σ (A_j^opt - A_j) γ_j + ε`. Coverage: `X2 ~ N(0,1)`
/// independent of `A1`, `Y = X1 + X2 + Σ A_j γ_j + ε`, and scenario 3 adds a
/// binary `Z2` entering `γ2 = ψ20 + ψ21 X2 + ψ22 Z2 + ψ23 X2 Z2`.
pub fn generate_two_stage(
    cfg: &ScenarioConfig,
    modes: [ProxyUsage; 2],
    rng: &mut StreamRng,
) -> Result<SimulatedTrial> {
    let coverage = matches!(cfg.scenario, Scenario::Coverage(_));
    let with_z = cfg.scenario == Scenario::Coverage(3);
    let sd = cfg.noise_variance.sqrt();
    let n = cfg.n;
    let mut obs: [Vec<f64>; 8] = Default::default();
    let mut orc: [Vec<f64>; 4] = Default::default();
    for _ in 0..n {
        let x1 = std_normal(rng);
        let p11 = cfg.errors[0].apply(x1, rng);
        let p12 = cfg.errors[1].apply(x1, rng);
        let w1 = usage_value(modes[0], p11, p12);
        let a1 = bernoulli(expit(cfg.treatment[0].predictor(w1, cfg.alpha[0])), rng);
        let x2 = if coverage { 0.0 } else { a1 } + std_normal(rng);
        let p21 = cfg.errors[2].apply(x2, rng);
        let p22 = cfg.errors[3].apply(x2, rng);
        let w2 = usage_value(modes[1], p21, p22);
        let a2 = bernoulli(expit(cfg.treatment[1].predictor(w2, cfg.alpha[1])), rng);
        let z2 = if with_z { bernoulli(0.5, rng) } else { 0.0 };
        let g1 = cfg.psi[0] + cfg.psi[1] * x1;
        let mut g2 = cfg.psi[2] + cfg.psi[3] * x2;
        if with_z {
            g2 += cfg.psi[4] * z2 + cfg.psi[5] * x2 * z2;
        }
        let (o1, o2) = (optimal_treatment(g1), optimal_treatment(g2));
        let eps = sd * std_normal(rng);
        let y = if coverage {
            x1 + x2 + a1 * g1 + a2 * g2 + eps
        } else {
            cfg.treatment_free.eval(x1) - (o1 - a1) * g1 - (o2 - a2) * g2 + eps
        };
        for (c, v) in [p11, p12, a1, p21, p22, a2, z2, y].into_iter().enumerate() {
            obs[c].push(v);
        }
        for (c, v) in [x1, x2, o1, o2].into_iter().enumerate() {
            orc[c].push(v);
        }
    }
    let [p11, p12, a1, p21, p22, a2, z2, y] = obs;
    let mut columns = vec![
        ("X1_p1", p11),
        ("X1_p2", p12),
        ("A1", a1),
        ("X2_p1", p21),
        ("X2_p2", p22),
        ("A2", a2),
    ];
    if with_z {
        columns.push(("Z2", z2));
    }
    columns.push(("Y", y));
    let table = build(columns)?;
    let mut g2 = ProxyGroup::new(&["X2"], &[&["X2_p1"], &["X2_p2"]]);
    if with_z {
        g2 = g2.with_error_free(&["Z2"]);
    }
    let mut data = TrialDataset::new(
        table,
        vec![ProxyGroup::new(&["X1"], &[&["X1_p1"], &["X1_p2"]]), g2],
        "Y",
    );
    for c in ["X2", "X2_p1", "X2_p2", "A1", "Z2"] {
        data = data.with_stage(c, 2);
    }
    data = data.with_stage("A2", 3);
    let [x1, x2, o1, o2] = orc;
    Ok(SimulatedTrial {
        data,
        oracle: build(vec![
            ("oracle_X1", x1),
            ("oracle_X2", x2),
            ("oracle_A1opt", o1),
            ("oracle_A2opt", o2),
        ])?,
    })
}

fn usage_value(mode: ProxyUsage, first: f64, second: f64) -> f64 {
    match mode {
        ProxyUsage::FirstProxy => first,
        ProxyUsage::MeanProxies => 0.5 * (first + second),
    }
}

/// Generates one replicate of `cfg`.
pub fn generate(
    cfg: &ScenarioConfig,
    modes: [ProxyUsage; 2],
    rng: &mut StreamRng,
) -> Result<SimulatedTrial> {
    match cfg.scenario {
        Scenario::OneStage => generate_one_stage(cfg, rng),
        _ => generate_two_stage(cfg, modes, rng),
    }
}

/// Fitted models of the two-stage families.
pub fn two_stage_specs(scenario: Scenario) -> Vec<StageSpec> {
    let stage2 = if scenario == Scenario::Coverage(3) {
        StageSpec::new("A2", "1 + X2", "1 + X2 + Z2", "1 + X2 + Z2 + X2*Z2")
    } else {
        StageSpec::new("A2", "1 + X2", "1 + X2", "1 + X2")
    };
    vec![
        StageSpec::new("A1", "1 + X1", "1 + X1", "1 + X1").expect("valid formula"),
        stage2.expect("valid formula"),
    ]
}

/// Analysis `k` (1..=4) of the one-stage study: which of the treatment and
/// treatment-free models are correctly specified.
pub fn one_stage_analysis(k: usize) -> (Vec<StageSpec>, Vec<DerivedColumn>) {
    let correct_tx = k == 2 || k == 4;
    let correct_tf = k == 3 || k == 4;
    let tx = if correct_tx { "1 + X + expXm1" } else { "1 + X" };
    let tf = if correct_tf { "1 + X + expX" } else { "1 + X" };
    let derived = vec![
        DerivedColumn {
            name: "expX",
            source: "X",
            map: f64::exp,
        },
        DerivedColumn {
            name: "expXm1",
            source: "X",
            map: |x| (x - 1.0).exp(),
        },
    ];
    (
        vec![StageSpec::new("A", tx, tf, "1 + X").expect("valid formula")],
        derived,
    )
}

/// One line of a study summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub proxy_mode: String,
    pub parameter: String,
    pub corrected_median: Option<f64>,
    pub naive_median: Option<f64>,
    pub corrected_lo: Option<f64>,
    pub corrected_hi: Option<f64>,
    pub naive_lo: Option<f64>,
    pub naive_hi: Option<f64>,
    pub coverage: Option<f64>,
    pub optimal_rate_stage1: Option<f64>,
    pub optimal_rate_stage2: Option<f64>,
}

impl SummaryRow {
    fn new(scenario: Scenario, proxy_mode: &str, parameter: &str) -> Self {
        SummaryRow {
            scenario: scenario.to_string(),
            proxy_mode: proxy_mode.to_string(),
            parameter: parameter.to_string(),
            corrected_median: None,
            naive_median: None,
            corrected_lo: None,
            corrected_hi: None,
            naive_lo: None,
            naive_hi: None,
            coverage: None,
            optimal_rate_stage1: None,
            optimal_rate_stage2: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub scenario: Scenario,
    pub rows: Vec<SummaryRow>,
    /// Replicates attempted, over all proxy modes.
    pub attempted: usize,
    pub failures: usize,
    /// More than 2% of replicates failed.
    pub flagged: bool,
}

impl StudySummary {
    pub fn row(&self, proxy_mode: &str, parameter: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.proxy_mode == proxy_mode && r.parameter == parameter)
    }
}

/// Median and central 95% band (type-7 quantiles).
pub fn band(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some((
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.025),
        quantile_sorted(&v, 0.975),
    ))
}

fn fill_estimates(row: &mut SummaryRow, corrected: &[f64], naive: &[f64]) {
    if let Some((m, lo, hi)) = band(corrected) {
        row.corrected_median = Some(m);
        row.corrected_lo = Some(lo);
        row.corrected_hi = Some(hi);
    }
    if let Some((m, lo, hi)) = band(naive) {
        row.naive_median = Some(m);
        row.naive_lo = Some(lo);
        row.naive_hi = Some(hi);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the study for `cfg.scenario`.
pub fn run_study(cfg: &ScenarioConfig) -> Result<StudySummary> {
    cfg.validate()?;
    match cfg.scenario {
        Scenario::OneStage => one_stage_study(cfg),
        Scenario::Multistage(_) => multistage_study(cfg),
        Scenario::Coverage(_) => coverage_study(cfg),
        Scenario::Prediction => prediction_study(cfg),
    }
}

fn finish(
    scenario: Scenario,
    rows: Vec<SummaryRow>,
    attempted: usize,
    failures: usize,
) -> Result<StudySummary> {
    if failures == attempted {
        return Err(Error::Simulation(format!(
            "all {attempted} replicates of {scenario} failed"
        )));
    }
    let flagged = failures as f64 > 0.02 * attempted as f64;
    if flagged {
        log::warn!("{failures} of {attempted} replicates of {scenario} failed");
    }
    Ok(StudySummary {
        scenario,
        rows,
        attempted,
        failures,
        flagged,
    })
}

/// Corrected and naive ψ̂ per replicate; `None` when either fit fails.
type Paired = Option<(Vec<f64>, Vec<f64>)>;

fn paired_fits(
    data: &TrialDataset,
    specs: &[StageSpec],
    derived: &[DerivedColumn],
) -> Result<(DtrFit, DtrFit)> {
    let corrected = FitOptions {
        derived: derived.to_vec(),
        ..FitOptions::corrected()
    };
    let naive = FitOptions {
        derived: derived.to_vec(),
        ..FitOptions::naive()
    };
    Ok((
        fit_dwols(data, specs, &corrected)?,
        fit_dwols(data, specs, &naive)?,
    ))
}

fn summarize_pairs(
    scenario: Scenario,
    mode: &str,
    labels: &[String],
    pairs: &[Paired],
) -> Vec<SummaryRow> {
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = pairs.iter().flatten().collect();
    labels
        .iter()
        .enumerate()
        .map(|(c, label)| {
            let mut row = SummaryRow::new(scenario, mode, label);
            let corrected: Vec<f64> = ok.iter().map(|(a, _)| a[c]).collect();
            let naive: Vec<f64> = ok.iter().map(|(_, b)| b[c]).collect();
            fill_estimates(&mut row, &corrected, &naive);
            row
        })
        .collect()
}

/// Four analyses of the one-stage study, corrected and naive, on common data.
pub fn one_stage_study(cfg: &ScenarioConfig) -> Result<StudySummary> {
    let results: Vec<Vec<Paired>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(cfg.seed, "replicate", &[r as u64]);
            let trial = match generate_one_stage(cfg, &mut rng) {
                Ok(t) => t,
                Err(_) => return vec![None; 4],
            };
            (1..=4)
                .map(|k| {
                    let (specs, derived) = one_stage_analysis(k);
                    paired_fits(&trial.data, &specs, &derived)
                        .ok()
                        .map(|(c, n)| (c.psi_vector(), n.psi_vector()))
                })
                .collect()
        })
        .collect();
    let labels = vec!["A".to_string(), "A*X".to_string()];
    let mut rows = Vec::new();
    let mut failures = 0;
    for k in 0..4 {
        let pairs: Vec<Paired> = results.iter().map(|r| r[k].clone()).collect();
        failures += pairs.iter().filter(|p| p.is_none()).count();
        rows.extend(summarize_pairs(
            cfg.scenario,
            &format!("analysis{}", k + 1),
            &labels,
            &pairs,
        ));
    }
    finish(cfg.scenario, rows, 4 * cfg.replicates, failures)
}

/// Appendix-style multistage tables: one block of rows per proxy mode.
pub fn multistage_study(cfg: &ScenarioConfig) -> Result<StudySummary> {
    let specs = two_stage_specs(cfg.scenario);
    let labels: Vec<String> = ["A1", "A1*X1", "A2", "A2*X2"]
        .into_iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    let mut failures = 0;
    for (m, modes) in cfg.proxy_modes.iter().enumerate() {
        let pairs: Vec<Paired> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream(cfg.seed, "replicate", &[m as u64, r as u64]);
                let trial = generate_two_stage(cfg, *modes, &mut rng).ok()?;
                paired_fits(&trial.data, &specs, &[])
                    .ok()
                    .map(|(c, n)| (c.psi_vector(), n.psi_vector()))
            })
            .collect();
        failures += pairs.iter().filter(|p| p.is_none()).count();
        rows.extend(summarize_pairs(
            cfg.scenario,
            &modes_label(modes),
            &labels,
            &pairs,
        ));
    }
    finish(
        cfg.scenario,
        rows,
        cfg.replicates * cfg.proxy_modes.len(),
        failures,
    )
}

/// Interval methods of the coverage study, in output order.
fn coverage_methods(cfg: &ScenarioConfig) -> Vec<(String, Option<f64>)> {
    let mut out = vec![("nn".to_string(), None)];
    for &z in &cfg.zetas {
        out.push((format!("mn_{z}"), Some(z)));
    }
    out
}

struct CoverageExperiment {
    estimates: Vec<f64>,
    /// Per method, per parameter: interval covers the truth.
    covered: Vec<Vec<bool>>,
}

fn coverage_experiment(
    cfg: &ScenarioConfig,
    specs: &[StageSpec],
    r: usize,
) -> Result<CoverageExperiment> {
    let mut rng = stream(cfg.seed, "replicate", &[r as u64]);
    let trial = generate_two_stage(cfg, cfg.proxy_modes[0], &mut rng)?;
    let data = &trial.data;
    let options = FitOptions::corrected();
    let full = fit_dwols(data, specs, &options)?;
    let boot = BootstrapConfig {
        b: cfg.resamples,
        bp: cfg.p_resamples,
        seed: child_seed(cfg.seed, "coverage-bootstrap", &[r as u64]),
        ..BootstrapConfig::default()
    };
    let n = data.n_rows();
    let p_hat = if cfg.zetas.is_empty() {
        0.0
    } else {
        estimate_p(data, specs, &options, &boot)?
    };
    let mut covered = Vec::new();
    for (_, zeta) in coverage_methods(cfg) {
        let m = zeta.map_or(n, |z| resample_size(n, p_hat, z));
        let report = bootstrap_with_m(&full, data, specs, &options, &boot, m)?;
        covered.push(
            cfg.psi
                .iter()
                .enumerate()
                .map(|(c, truth)| report.lower[c] <= *truth && *truth <= report.upper[c])
                .collect(),
        );
    }
    Ok(CoverageExperiment {
        estimates: full.psi_vector(),
        covered,
    })
}

/// Bootstrap interval coverage of the true blip parameters (corrected fits).
pub fn coverage_study(cfg: &ScenarioConfig) -> Result<StudySummary> {
    let specs = two_stage_specs(cfg.scenario);
    let experiments: Vec<Option<CoverageExperiment>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| coverage_experiment(cfg, &specs, r).ok())
        .collect();
    let ok: Vec<&CoverageExperiment> = experiments.iter().flatten().collect();
    let failures = cfg.replicates - ok.len();
    let labels: Vec<String> = specs
        .iter()
        .flat_map(|s| {
            s.blip_formula
                .labels()
                .into_iter()
                .map(|l| crate::dwols::blip_label(&s.treatment, &l))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut rows = Vec::new();
    for (k, (method, _)) in coverage_methods(cfg).iter().enumerate() {
        for (c, label) in labels.iter().enumerate() {
            let mut row = SummaryRow::new(cfg.scenario, method, label);
            let est: Vec<f64> = ok.iter().map(|e| e.estimates[c]).collect();
            fill_estimates(&mut row, &est, &[]);
            if !ok.is_empty() {
                let hits = ok.iter().filter(|e| e.covered[k][c]).count();
                row.coverage = Some(hits as f64 / ok.len() as f64);
            }
            rows.push(row);
        }
    }
    finish(cfg.scenario, rows, cfg.replicates, failures)
}

/// Decision methods of the prediction study, in output order.
pub const PREDICTION_METHODS: [&str; 6] =
    ["true", "pooled", "one_both", "one_p1", "one_p2", "naive"];

/// Rates per method: `[stage1, stage2]`.
type Rates = Vec<[f64; 2]>;

/// Shared randomness of the deployment cohort. `X2` is only formed once a
/// method has chosen `A1`, as `A1 + u`.
struct Cohort {
    x1: Vec<f64>,
    p11: Vec<f64>,
    p12: Vec<f64>,
    u: Vec<f64>,
    /// Additive noise draws for the stage-2 proxies.
    e21: Vec<f64>,
    e22: Vec<f64>,
}

fn draw_cohort(cfg: &ScenarioConfig, rng: &mut StreamRng) -> Result<Cohort> {
    for e in &cfg.errors[2..] {
        if !matches!(e, ErrorModel::Normal { .. } | ErrorModel::T { .. } | ErrorModel::UniformAdd { .. } | ErrorModel::Exact) {
            return Err(Error::Invalid(
                "prediction study needs additive stage-2 proxy errors".into(),
            ));
        }
    }
    let n = cfg.predict_n;
    let mut c = Cohort {
        x1: Vec::with_capacity(n),
        p11: Vec::with_capacity(n),
        p12: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        e21: Vec::with_capacity(n),
        e22: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x1 = std_normal(rng);
        c.x1.push(x1);
        c.p11.push(cfg.errors[0].apply(x1, rng));
        c.p12.push(cfg.errors[1].apply(x1, rng));
        c.u.push(std_normal(rng));
        c.e21.push(cfg.errors[2].apply(0.0, rng));
        c.e22.push(cfg.errors[3].apply(0.0, rng));
    }
    Ok(c)
}

impl Cohort {
    fn x2(&self, a1: &[f64]) -> Vec<f64> {
        a1.iter().zip(&self.u).map(|(a, u)| a + u).collect()
    }

    fn stage1_table(&self) -> Result<DataTable> {
        build(vec![("X1_p1", self.p11.clone()), ("X1_p2", self.p12.clone())])
    }

    fn stage2_table(&self, a1: &[f64]) -> Result<DataTable> {
        let x2 = self.x2(a1);
        let p21 = x2.iter().zip(&self.e21).map(|(x, e)| x + e).collect();
        let p22 = x2.iter().zip(&self.e22).map(|(x, e)| x + e).collect();
        build(vec![
            ("X1_p1", self.p11.clone()),
            ("X1_p2", self.p12.clone()),
            ("A1", a1.to_vec()),
            ("X2_p1", p21),
            ("X2_p2", p22),
        ])
    }
}

fn truth_decisions(psi: &[f64], x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|x| optimal_treatment(psi[0] + psi[1] * x))
        .collect()
}

fn rates_for(
    cfg: &ScenarioConfig,
    cohort: &Cohort,
    mut stage1: impl FnMut() -> Result<Vec<f64>>,
    mut stage2: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<[f64; 2]> {
    let d1 = stage1()?;
    let d2 = stage2(&d1)?;
    let opt1 = truth_decisions(&cfg.psi[0..2], &cohort.x1);
    let opt2 = truth_decisions(&cfg.psi[2..4], &cohort.x2(&d1));
    Ok([optimal_rate(&d1, &opt1)?, optimal_rate(&d2, &opt2)?])
}

fn cohort_dataset(table: DataTable, stage2: bool) -> TrialDataset {
    let mut groups = vec![ProxyGroup::new(&["X1"], &[&["X1_p1"], &["X1_p2"]])];
    if stage2 {
        groups.push(ProxyGroup::new(&["X2"], &[&["X2_p1"], &["X2_p2"]]));
    }
    TrialDataset::new(table, groups, "Y")
}

fn combined_naive(table: &DataTable, fit: &DtrFit, stage2: bool) -> Result<DataTable> {
    let mut out = table.clone();
    let groups: &[(&str, [&str; 2])] = &[("X1", ["X1_p1", "X1_p2"]), ("X2", ["X2_p1", "X2_p2"])];
    for (g, (target, cols)) in groups.iter().enumerate().take(if stage2 { 2 } else { 1 }) {
        let d = &fit.delta[g].delta;
        let a = table.column(cols[0])?;
        let b = table.column(cols[1])?;
        let v = a.iter().zip(b).map(|(a, b)| d[0] * a + d[1] * b).collect();
        out.push_column(*target, v)?;
    }
    Ok(out)
}

fn prediction_replicate(cfg: &ScenarioConfig, specs: &[StageSpec], r: usize) -> Result<(Rates, Vec<f64>, Vec<f64>)> {
    let mut rng = stream(cfg.seed, "replicate", &[r as u64]);
    let trial = generate_two_stage(cfg, cfg.proxy_modes[0], &mut rng)?;
    let (corrected, naive) = paired_fits(&trial.data, specs, &[])?;
    let rule: DecisionRule = corrected.rule();
    let naive_rule = naive.rule();
    let corrector = PseudoCorrector::from_fit(&corrected, &trial.data)?;
    let mut crng = stream(cfg.seed, "cohort", &[r as u64]);
    let cohort = draw_cohort(cfg, &mut crng)?;

    let mut rates = Vec::with_capacity(PREDICTION_METHODS.len());
    // decisions from the true covariates
    rates.push(rates_for(
        cfg,
        &cohort,
        || rule.decide_stage(0, &build(vec![("X1", cohort.x1.clone())])?),
        |d1| {
            rule.decide_stage(
                1,
                &build(vec![("X1", cohort.x1.clone()), ("X2", cohort.x2(d1))])?,
            )
        },
    )?);
    // fresh calibration on the whole cohort
    rates.push(rates_for(
        cfg,
        &cohort,
        || {
            let t = pooled_table(&cohort_dataset(cohort.stage1_table()?, false), DeltaScheme::TraceInverse, &[])?;
            rule.decide_stage(0, &t)
        },
        |d1| {
            let t = pooled_table(&cohort_dataset(cohort.stage2_table(d1)?, true), DeltaScheme::TraceInverse, &[])?;
            rule.decide_stage(1, &t)
        },
    )?);
    // frozen corrector with both proxies, then each proxy alone
    for subset in [vec![0, 1], vec![0], vec![1]] {
        let c = corrector
            .clone()
            .with_available(0, &subset)?
            .with_available(1, &subset)?;
        let first = PseudoCorrector {
            groups: vec![c.groups[0].clone()],
        };
        rates.push(rates_for(
            cfg,
            &cohort,
            || rule.decide_stage(0, &first.impute(&cohort.stage1_table()?, &[])?),
            |d1| rule.decide_stage(1, &c.impute(&cohort.stage2_table(d1)?, &[])?),
        )?);
    }
    // naive rule on the fitted proxy combination
    rates.push(rates_for(
        cfg,
        &cohort,
        || naive_rule.decide_stage(0, &combined_naive(&cohort.stage1_table()?, &naive, false)?),
        |d1| naive_rule.decide_stage(1, &combined_naive(&cohort.stage2_table(d1)?, &naive, true)?),
    )?);
    Ok((rates, corrected.psi_vector(), naive.psi_vector()))
}

/// Optimal-treatment rates of future decisions under each information regime.
pub fn prediction_study(cfg: &ScenarioConfig) -> Result<StudySummary> {
    let specs = two_stage_specs(cfg.scenario);
    let results: Vec<Option<(Rates, Vec<f64>, Vec<f64>)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| prediction_replicate(cfg, &specs, r).ok())
        .collect();
    let ok: Vec<&(Rates, Vec<f64>, Vec<f64>)> = results.iter().flatten().collect();
    let failures = cfg.replicates - ok.len();
    let mut rows = Vec::new();
    for (k, method) in PREDICTION_METHODS.iter().enumerate() {
        let mut row = SummaryRow::new(cfg.scenario, method, "optimal_rate");
        if !ok.is_empty() {
            let s1: Vec<f64> = ok.iter().map(|o| o.0[k][0]).collect();
            let s2: Vec<f64> = ok.iter().map(|o| o.0[k][1]).collect();
            row.optimal_rate_stage1 = Some(mean(&s1));
            row.optimal_rate_stage2 = Some(mean(&s2));
        }
        rows.push(row);
    }
    let labels = ["A1", "A1*X1", "A2", "A2*X2"];
    for (c, label) in labels.iter().enumerate() {
        let mut row = SummaryRow::new(cfg.scenario, "fit", label);
        let corrected: Vec<f64> = ok.iter().map(|o| o.1[c]).collect();
        let naive: Vec<f64> = ok.iter().map(|o| o.2[c]).collect();
        fill_estimates(&mut row, &corrected, &naive);
        rows.push(row);
    }
    finish(cfg.scenario, rows, cfg.replicates, failures)
}

/// Summary rows as CSV with a header line; missing values are empty fields.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Simulation(format!("writing summary: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Simulation(format!("writing summary: {e}")))?;
    Ok(())
}
