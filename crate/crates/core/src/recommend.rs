//! Treatment assignment for new patients.
//!
//! Three information regimes: one patient at a time with a calibration frozen
//! at fitting time ([`PseudoCorrector`]), a whole cohort at once (fresh
//! calibration on the cohort), or true covariates.

use nalgebra::{DMatrix, DVector};

use crate::calibration::{
    blup_blocks, combine_proxies, fit_calibration, impute_with, table_matrix, DeltaScheme,
    DeltaWeights, ProxySet,
};
use crate::dwols::{
    parse_floats, parse_key_values, DecisionRule, DerivedColumn, DtrFit, ProxyGroup, TrialDataset,
};
use crate::error::{Error, Result};
use crate::table::DataTable;

/// Calibration components of one proxy group, frozen at fitting time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGroup {
    pub group: ProxyGroup,
    pub mu_x: DVector<f64>,
    pub mu_z: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub m_j: Vec<DMatrix<f64>>,
    pub sigma_xz: DMatrix<f64>,
    pub sigma_zz: DMatrix<f64>,
    pub delta: Vec<f64>,
    /// Proxy indices measured at decision time.
    pub available: Vec<usize>,
}

impl FrozenGroup {
    /// Weights over the available proxies and the predictor gain for them.
    fn subset_gain(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let total: f64 = self.available.iter().map(|&j| self.delta[j]).sum();
        if !(total > 0.0) {
            return Err(Error::Invalid(format!(
                "available proxies of {:?} carry no weight",
                self.group.targets
            )));
        }
        let d = self.mu_x.len();
        let mut weights = Vec::with_capacity(self.available.len());
        let mut error = DMatrix::zeros(d, d);
        for &j in &self.available {
            let w = self.delta[j] / total;
            error += &self.m_j[j] * (w * w);
            weights.push(w);
        }
        let (gain, _) = blup_blocks(&self.sigma_xx, &error, &self.sigma_xz, &self.sigma_zz)?;
        Ok((weights, gain))
    }

    fn impute(&self, table: &DataTable) -> Result<DMatrix<f64>> {
        let (weights, gain) = self.subset_gain()?;
        let cols: Vec<Vec<String>> = self
            .available
            .iter()
            .map(|&j| self.group.proxies[j].clone())
            .collect();
        let proxies = ProxySet::from_table(table, &cols)?;
        let combined = combine_proxies(
            &proxies,
            &DeltaWeights {
                delta: weights,
                scheme: DeltaScheme::Equal,
            },
        )?;
        let z = if self.group.error_free.is_empty() {
            None
        } else {
            Some(table_matrix(table, &self.group.error_free)?)
        };
        impute_with(&gain, &self.mu_x, &self.mu_z, &combined, z.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCorrector {
    pub groups: Vec<FrozenGroup>,
}

impl PseudoCorrector {
    /// Freezes the calibration of a corrected fit; all proxies available.
    pub fn from_fit(fit: &DtrFit, data: &TrialDataset) -> Result<Self> {
        let groups = data
            .groups
            .iter()
            .zip(&fit.calibration)
            .map(|(g, model)| {
                let model = model.as_ref().ok_or_else(|| {
                    Error::Invalid("a pseudo-corrector needs a calibrated fit".into())
                })?;
                Ok(FrozenGroup {
                    group: g.clone(),
                    mu_x: model.mu_x.clone(),
                    mu_z: model.mu_z.clone(),
                    sigma_xx: model.sigma_xx_2.clone(),
                    m_j: model.m_j.clone(),
                    sigma_xz: model.sigma_xz.clone(),
                    sigma_zz: model.sigma_zz.clone(),
                    delta: model.delta.delta.clone(),
                    available: (0..g.k()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PseudoCorrector { groups })
    }

    /// Restricts group `group` to the listed proxy indices.
    pub fn with_available(mut self, group: usize, proxies: &[usize]) -> Result<Self> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| Error::Invalid(format!("no proxy group {group}")))?;
        if proxies.is_empty() || proxies.iter().any(|&j| j >= g.delta.len()) {
            return Err(Error::Invalid(format!(
                "invalid proxy subset {proxies:?} for {:?}",
                g.group.targets
            )));
        }
        g.available = proxies.to_vec();
        Ok(self)
    }

    /// Copy of `table` with every group's targets imputed, then `derived` applied.
    pub fn impute(&self, table: &DataTable, derived: &[DerivedColumn]) -> Result<DataTable> {
        let mut out = table.clone();
        for g in &self.groups {
            let xhat = g.impute(table)?;
            for (c, name) in g.group.targets.iter().enumerate() {
                let col: Vec<f64> = xhat.column(c).iter().copied().collect();
                upsert(&mut out, name, col)?;
            }
        }
        for d in derived {
            let col: Vec<f64> = out.column(d.source)?.iter().map(|&v| (d.map)(v)).collect();
            upsert(&mut out, d.name, col)?;
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("groups = {}\n", self.groups.len());
        for (i, g) in self.groups.iter().enumerate() {
            let p = format!("group{}", i + 1);
            out.push_str(&format!("{p}.targets = {}\n", g.group.targets.join(",")));
            let proxies: Vec<String> = g.group.proxies.iter().map(|c| c.join(",")).collect();
            out.push_str(&format!("{p}.proxies = {}\n", proxies.join(";")));
            out.push_str(&format!(
                "{p}.error_free = {}\n",
                g.group.error_free.join(",")
            ));
            let avail: Vec<String> = g.available.iter().map(|j| j.to_string()).collect();
            out.push_str(&format!("{p}.available = {}\n", avail.join(" ")));
            out.push_str(&format!("{p}.delta = {}\n", floats(&g.delta)));
            out.push_str(&format!(
                "{p}.mu_x = {}\n",
                matrix_text(&DMatrix::from_column_slice(
                    g.mu_x.len(),
                    1,
                    g.mu_x.as_slice()
                ))
            ));
            out.push_str(&format!(
                "{p}.mu_z = {}\n",
                matrix_text(&DMatrix::from_column_slice(
                    g.mu_z.len(),
                    1,
                    g.mu_z.as_slice()
                ))
            ));
            out.push_str(&format!("{p}.sigma_xx = {}\n", matrix_text(&g.sigma_xx)));
            out.push_str(&format!("{p}.sigma_xz = {}\n", matrix_text(&g.sigma_xz)));
            out.push_str(&format!("{p}.sigma_zz = {}\n", matrix_text(&g.sigma_zz)));
            for (j, m) in g.m_j.iter().enumerate() {
                out.push_str(&format!("{p}.m{} = {}\n", j + 1, matrix_text(m)));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |key: &str| -> Result<(usize, &str)> {
            kv.get(key)
                .map(|(l, v)| (*l, v.as_str()))
                .ok_or_else(|| Error::Artifact {
                    line: 0,
                    message: format!("missing key `{key}`"),
                })
        };
        let (line, count) = get("groups")?;
        let count: usize = count.parse().map_err(|_| Error::Artifact {
            line,
            message: "group count is not an integer".into(),
        })?;
        let names = |s: &str| -> Vec<String> {
            s.split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect()
        };
        let mut groups = Vec::with_capacity(count);
        for i in 1..=count {
            let p = format!("group{i}");
            let targets = names(get(&format!("{p}.targets"))?.1);
            let proxies: Vec<Vec<String>> = get(&format!("{p}.proxies"))?
                .1
                .split(';')
                .map(names)
                .collect();
            let error_free = names(get(&format!("{p}.error_free"))?.1);
            let (line, avail) = get(&format!("{p}.available"))?;
            let available = parse_floats(avail, line)?
                .into_iter()
                .map(|v| v as usize)
                .collect();
            let (line, delta) = get(&format!("{p}.delta"))?;
            let delta = parse_floats(delta, line)?;
            let mat = |key: &str| -> Result<DMatrix<f64>> {
                let (line, v) = get(&format!("{p}.{key}"))?;
                parse_matrix(v, line)
            };
            let mu_x = mat("mu_x")?;
            let mu_z = mat("mu_z")?;
            let m_j = (1..=proxies.len())
                .map(|j| mat(&format!("m{j}")))
                .collect::<Result<Vec<_>>>()?;
            let g = FrozenGroup {
                group: ProxyGroup {
                    targets,
                    proxies,
                    error_free,
                },
                mu_x: mu_x.column(0).into_owned(),
                mu_z: if mu_z.ncols() == 0 {
                    DVector::zeros(0)
                } else {
                    mu_z.column(0).into_owned()
                },
                sigma_xx: mat("sigma_xx")?,
                m_j,
                sigma_xz: mat("sigma_xz")?,
                sigma_zz: mat("sigma_zz")?,
                delta,
                available,
            };
            check_frozen(&g, line)?;
            groups.push(g);
        }
        Ok(PseudoCorrector { groups })
    }
}

fn check_frozen(g: &FrozenGroup, line: usize) -> Result<()> {
    let d = g.group.targets.len();
    let q = g.group.error_free.len();
    let k = g.group.proxies.len();
    let ok = g.mu_x.len() == d
        && g.mu_z.len() == q
        && g.sigma_xx.shape() == (d, d)
        && g.sigma_xz.shape() == (d, q)
        && g.sigma_zz.shape() == (q, q)
        && g.delta.len() == k
        && g.m_j.iter().all(|m| m.shape() == (d, d))
        && g.available.iter().all(|&j| j < k)
        && !g.available.is_empty();
    if ok {
        Ok(())
    } else {
        Err(Error::Artifact {
            line,
            message: format!("inconsistent dimensions for group {:?}", g.group.targets),
        })
    }
}

fn upsert(table: &mut DataTable, name: &str, col: Vec<f64>) -> Result<()> {
    if table.contains(name) {
        table.set_column(name, col)
    } else {
        table.push_column(name, col)
    }
}

fn floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `rows cols v11 v12 ...`, row-major.
pub fn matrix_text(m: &DMatrix<f64>) -> String {
    let mut parts = vec![m.nrows().to_string(), m.ncols().to_string()];
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            parts.push(format!("{:e}", m[(r, c)]));
        }
    }
    parts.join(" ")
}

pub fn parse_matrix(text: &str, line: usize) -> Result<DMatrix<f64>> {
    let v = parse_floats(text, line)?;
    let bad = || Error::Artifact {
        line,
        message: "matrix must be `rows cols values...`".into(),
    };
    if v.len() < 2 || v[0] < 0.0 || v[1] < 0.0 || v[0].fract() != 0.0 || v[1].fract() != 0.0 {
        return Err(bad());
    }
    let (r, c) = (v[0] as usize, v[1] as usize);
    if v.len() != 2 + r * c {
        return Err(bad());
    }
    Ok(DMatrix::from_row_slice(r, c, &v[2..]))
}

/// Decisions from frozen calibration: `out[stage][row]`.
pub fn predict_one(
    corrector: &PseudoCorrector,
    rule: &DecisionRule,
    patients: &DataTable,
    derived: &[DerivedColumn],
) -> Result<Vec<Vec<f64>>> {
    let imputed = corrector.impute(patients, derived)?;
    rule.decide(&imputed)
}

/// Decisions after calibrating on the whole cohort.
pub fn predict_pooled(
    rule: &DecisionRule,
    cohort: &TrialDataset,
    scheme: DeltaScheme,
    derived: &[DerivedColumn],
) -> Result<Vec<Vec<f64>>> {
    rule.decide(&pooled_table(cohort, scheme, derived)?)
}

/// Cohort table with targets replaced by a fresh calibration on the cohort.
pub fn pooled_table(
    cohort: &TrialDataset,
    scheme: DeltaScheme,
    derived: &[DerivedColumn],
) -> Result<DataTable> {
    let mut table = cohort.table.clone();
    for g in &cohort.groups {
        if g.k() < 2 {
            return Err(Error::TooFew {
                what: "proxies per error-prone covariate",
                needed: 2,
                found: g.k(),
            });
        }
        let proxies = ProxySet::from_table(&cohort.table, &g.proxies)?;
        let z = if g.error_free.is_empty() {
            None
        } else {
            Some(table_matrix(&cohort.table, &g.error_free)?)
        };
        let model = fit_calibration(&proxies, z.as_ref(), scheme, None)?;
        let xhat = model.impute(&combine_proxies(&proxies, &model.delta)?, z.as_ref())?;
        for (c, name) in g.targets.iter().enumerate() {
            upsert(&mut table, name, xhat.column(c).iter().copied().collect())?;
        }
    }
    for d in derived {
        let col: Vec<f64> = table
            .column(d.source)?
            .iter()
            .map(|&v| (d.map)(v))
            .collect();
        upsert(&mut table, d.name, col)?;
    }
    Ok(table)
}

/// Decisions from the true covariates.
pub fn predict_true(rule: &DecisionRule, table: &DataTable) -> Result<Vec<Vec<f64>>> {
    rule.decide(table)
}

/// Share of matching decisions.
pub fn optimal_rate(decisions: &[f64], optimal: &[f64]) -> Result<f64> {
    if decisions.len() != optimal.len() || decisions.is_empty() {
        return Err(Error::Dimension(format!(
            "{} decisions for {} optimal treatments",
            decisions.len(),
            optimal.len()
        )));
    }
    let hits = decisions
        .iter()
        .zip(optimal)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / decisions.len() as f64)
}
