//! Run configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dtrme_core::dwols::{ProxyGroup, StageSpec, TrialDataset};
use dtrme_core::simulate::ScenarioConfig;
use dtrme_core::{BootstrapConfig, DataTable, DeltaScheme, FitOptions, Formulation};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub calibration: CalibrationSection,
    pub bootstrap: BootstrapConfig,
    pub simulate: SimulateSection,
    pub predict: PredictSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub proxy_groups: Vec<ProxyGroup>,
    /// Added to every proxy group's calibration model.
    pub error_free_columns: Vec<String>,
    pub treatment_columns: Vec<String>,
    pub outcome_column: Option<String>,
    /// First stage (1-based) whose models may use a column; unlisted columns
    /// are baseline.
    pub column_stages: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageModel {
    pub treatment: String,
    pub treatment_model: String,
    pub treatment_free: String,
    pub blip: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub formulation: Formulation,
    pub stages: Vec<StageModel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// `false` runs the naive analysis on the δ-combined proxies.
    pub enabled: bool,
    pub delta_scheme: DeltaScheme,
    pub conditional: bool,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            enabled: true,
            delta_scheme: DeltaScheme::default(),
            conditional: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Option<String>,
    /// Fields replacing the scenario defaults.
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    #[default]
    OneAtATime,
    Pooled,
    True,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub mode: PredictMode,
    pub corrector_path: Option<PathBuf>,
    pub rule_path: Option<PathBuf>,
    /// Stages (1-based) to decide; all when empty.
    pub stages: Vec<usize>,
    /// Proxy indices (0-based) measured for each group, by group index.
    pub available: BTreeMap<usize, Vec<usize>>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .path
            .as_deref()
            .ok_or_else(|| config_err("no data file (set data.path or --data)"))
    }

    pub fn groups(&self) -> Vec<ProxyGroup> {
        self.data
            .proxy_groups
            .iter()
            .map(|g| {
                let mut g = g.clone();
                for c in &self.data.error_free_columns {
                    if !g.error_free.contains(c) {
                        g.error_free.push(c.clone());
                    }
                }
                g
            })
            .collect()
    }

    pub fn specs(&self) -> Result<Vec<StageSpec>, CliError> {
        if self.model.stages.is_empty() {
            return Err(config_err("model.stages is empty"));
        }
        let treatments: Vec<&str> = self
            .model
            .stages
            .iter()
            .map(|s| s.treatment.as_str())
            .collect();
        if !self.data.treatment_columns.is_empty()
            && self
                .data
                .treatment_columns
                .iter()
                .map(String::as_str)
                .ne(treatments.iter().copied())
        {
            return Err(config_err(format!(
                "data.treatment_columns {:?} disagree with model stages {treatments:?}",
                self.data.treatment_columns
            )));
        }
        self.model
            .stages
            .iter()
            .map(|s| {
                StageSpec::new(&s.treatment, &s.treatment_model, &s.treatment_free, &s.blip)
                    .map_err(CliError::from)
            })
            .collect()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            formulation: self.model.formulation,
            calibrate: self.calibration.enabled,
            delta_scheme: self.calibration.delta_scheme,
            conditional_calibration: self.calibration.conditional,
            derived: Vec::new(),
        }
    }

    pub fn outcome(&self) -> Result<&str, CliError> {
        self.data
            .outcome_column
            .as_deref()
            .ok_or_else(|| config_err("data.outcome_column is not set"))
    }

    /// Reads the data file and attaches column roles.
    pub fn dataset(&self) -> Result<TrialDataset, CliError> {
        let table = DataTable::from_csv_path(self.data_path()?)?;
        self.dataset_from(table)
    }

    pub fn dataset_from(&self, table: DataTable) -> Result<TrialDataset, CliError> {
        let outcome = self.outcome()?;
        table.column(outcome)?;
        for t in &self.data.treatment_columns {
            table.binary_column(t)?;
        }
        let mut data = TrialDataset::new(table, self.groups(), outcome);
        for (c, s) in &self.data.column_stages {
            data = data.with_stage(c, *s);
        }
        Ok(data)
    }

    /// Scenario defaults with `simulate.overrides` applied.
    pub fn scenario(&self) -> Result<ScenarioConfig, CliError> {
        let name = self
            .simulate
            .scenario
            .as_deref()
            .ok_or_else(|| config_err("no scenario (set simulate.scenario or --scenario)"))?;
        let base = ScenarioConfig::named(name).map_err(|e| config_err(e.to_string()))?;
        let mut value = serde_json::to_value(&base).expect("scenario serializes");
        let obj = value.as_object_mut().expect("scenario is an object");
        for (k, v) in &self.simulate.overrides {
            if k == "scenario" {
                return Err(config_err("set the scenario with simulate.scenario"));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: ScenarioConfig = serde_json::from_value(value)
            .map_err(|e| config_err(format!("simulate.overrides: {e}")))?;
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}
