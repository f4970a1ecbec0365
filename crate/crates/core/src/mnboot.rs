//! m-out-of-n bootstrap for dWOLS blip parameters.
//!
//! The resample size is `m = n^{(1 + ζ(1 - p))/(1 + ζ)}`, where `p` is the
//! estimated share of patients whose final-stage optimal treatment is not
//! identified and `ζ` is tuned by a double bootstrap. Every resample reruns
//! the whole fit, calibration included.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dwols::{fit_dwols, DtrFit, FitOptions, StageSpec, TrialDataset};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::table::build_design;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaGrid {
    pub start: f64,
    pub step: f64,
    pub max: f64,
}

impl Default for ZetaGrid {
    fn default() -> Self {
        ZetaGrid {
            start: 0.025,
            step: 0.025,
            max: 0.30,
        }
    }
}

impl ZetaGrid {
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0usize;
        loop {
            let z = self.start + self.step * i as f64;
            if z > self.max + 1e-12 {
                break;
            }
            out.push(z);
            i += 1;
        }
        out
    }
}

/// How the final resample size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum ZetaMode {
    /// Double bootstrap over the grid.
    #[default]
    Adaptive,
    /// Given ζ, estimated `p̂`.
    Fixed(f64),
    /// `m = n`.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "B1")]
    pub b1: usize,
    #[serde(rename = "B2")]
    pub b2: usize,
    #[serde(rename = "Bp")]
    pub bp: usize,
    pub zeta_grid: ZetaGrid,
    pub zeta: ZetaMode,
    pub level: f64,
    pub p_level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 1000,
            b1: 100,
            b2: 250,
            bp: 200,
            zeta_grid: ZetaGrid::default(),
            zeta: ZetaMode::Adaptive,
            level: 0.95,
            p_level: 0.05,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.b1 == 0 || self.b2 == 0 || self.bp < 2 {
            return Err(Error::Invalid(
                "bootstrap counts must be positive (Bp at least 2)".into(),
            ));
        }
        for (name, v) in [("level", self.level), ("p_level", self.p_level)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!(
                    "bootstrap {name} must lie in (0, 1)"
                )));
            }
        }
        let g = self.zeta_grid;
        if !(g.start > 0.0 && g.step > 0.0 && g.max >= g.start) {
            return Err(Error::Invalid(
                "zeta grid needs start > 0, step > 0, max >= start".into(),
            ));
        }
        if let ZetaMode::Fixed(z) = self.zeta {
            if !(z > 0.0) {
                return Err(Error::Invalid("zeta must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapReport {
    pub p_hat: f64,
    pub zeta_hat: Option<f64>,
    pub m: usize,
    /// `(stage, label)` for each parameter.
    pub labels: Vec<(usize, String)>,
    pub estimates: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `B x p` resample estimates, in resample order.
    pub resamples: Vec<Vec<f64>>,
    /// Resamples that failed twice and were dropped.
    pub failures: usize,
}

/// `round_half_up(n^{(1+ζ(1-p))/(1+ζ)})`, clamped to `[2, n]`.
pub fn resample_size(n: usize, p: f64, zeta: f64) -> usize {
    let p = p.clamp(0.0, 1.0);
    let exponent = (1.0 + zeta * (1.0 - p)) / (1.0 + zeta);
    let m = (n as f64).powf(exponent);
    let m = (m + 0.5).floor() as usize;
    m.clamp(2.min(n), n)
}

/// Type-7 quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed percentile interval at `level`.
pub fn percentile_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}

fn draw_rows(n: usize, m: usize, seed: u64, domain: &str, path: &[u64]) -> Vec<usize> {
    let mut rng = stream(seed, domain, path);
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

/// Fits `count` resamples of size `m`; a failed resample is redrawn once.
fn resample_fits(
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    m: usize,
    count: usize,
    seed: u64,
    domain: &str,
    prefix: &[u64],
) -> Result<(Vec<DtrFit>, usize)> {
    let n = data.n_rows();
    let results: Vec<Option<DtrFit>> = (0..count)
        .into_par_iter()
        .map(|b| {
            (0..2u64).find_map(|attempt| {
                let mut path = prefix.to_vec();
                path.extend([b as u64, attempt]);
                let rows = draw_rows(n, m, seed, domain, &path);
                data.resample(&rows)
                    .and_then(|d| fit_dwols(&d, specs, options))
                    .ok()
            })
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures as f64 > 0.05 * count as f64 {
        return Err(Error::Bootstrap(format!(
            "{failures} of {count} resamples of size {m} failed to fit after a retry"
        )));
    }
    Ok((results.into_iter().flatten().collect(), failures))
}

/// Share of patients whose final-stage blip Wald interval covers zero.
pub fn estimate_p(
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
) -> Result<f64> {
    let full = fit_dwols(data, specs, options)?;
    estimate_p_from(&full, data, specs, options, config, &[])
}

fn estimate_p_from(
    full: &DtrFit,
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
    prefix: &[u64],
) -> Result<f64> {
    let last = full.stages.len() - 1;
    let (fits, _) = resample_fits(
        data,
        specs,
        options,
        data.n_rows(),
        config.bp,
        config.seed,
        "p-hat",
        prefix,
    )?;
    let p = full.stages[last].psi.len();
    let draws = DMatrix::from_fn(fits.len(), p, |r, c| fits[r].stages[last].psi[c]);
    let k = draws.nrows() as f64;
    let mean = DVector::from_fn(p, |c, _| draws.column(c).sum() / k);
    let mut cov = DMatrix::zeros(p, p);
    for r in 0..draws.nrows() {
        let d = draws.row(r).transpose() - &mean;
        cov += &d * d.transpose();
    }
    cov /= k - 1.0;
    if !cov.iter().all(|v| v.is_finite()) || cov.diagonal().iter().all(|v| *v <= 0.0) {
        return Err(Error::Bootstrap(
            "final-stage blip resample covariance is degenerate".into(),
        ));
    }
    let z = Normal::standard().inverse_cdf(1.0 - config.p_level / 2.0);
    let design = build_design(&full.table, &full.stages[last].blip_formula)?;
    let psi = DVector::from_column_slice(&full.stages[last].psi);
    let mut ambiguous = 0usize;
    for row in design.values.row_iter() {
        let h = row.transpose();
        let g = h.dot(&psi);
        let var = (h.transpose() * &cov * &h)[(0, 0)].max(0.0);
        if g.abs() <= z * var.sqrt() {
            ambiguous += 1;
        }
    }
    Ok(ambiguous as f64 / design.n_rows() as f64)
}

#[derive(Debug, Clone)]
pub struct ZetaSelection {
    pub zeta: f64,
    /// `(ζ, mean coverage across parameters)` for every ζ tried.
    pub trace: Vec<(f64, f64)>,
    /// No grid value reached the nominal level.
    pub exhausted: bool,
}

/// Double bootstrap: the smallest grid ζ whose inner m-out-of-n intervals
/// cover the full-data estimates at the nominal rate on average.
pub fn select_zeta(
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
) -> Result<ZetaSelection> {
    let full = fit_dwols(data, specs, options)?;
    select_zeta_from(&full, data, specs, options, config)
}

fn select_zeta_from(
    full: &DtrFit,
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
) -> Result<ZetaSelection> {
    let grid = config.zeta_grid.values();
    if grid.is_empty() {
        return Err(Error::Invalid("empty zeta grid".into()));
    }
    let n = data.n_rows();
    let target = full.psi_vector();

    // outer resamples and their p̂ are shared by every ζ
    let outer: Vec<Option<(TrialDataset, f64)>> = (0..config.b1)
        .into_par_iter()
        .map(|b1| {
            let rows = draw_rows(n, n, config.seed, "outer", &[b1 as u64]);
            let d = data.resample(&rows).ok()?;
            let fit = fit_dwols(&d, specs, options).ok()?;
            let p = estimate_p_from(&fit, &d, specs, options, config, &[b1 as u64]).ok()?;
            Some((d, p))
        })
        .collect();
    let failed = outer.iter().filter(|o| o.is_none()).count();
    if failed as f64 > 0.05 * config.b1 as f64 {
        return Err(Error::Bootstrap(format!(
            "{failed} of {} outer resamples failed",
            config.b1
        )));
    }

    let mut trace = Vec::with_capacity(grid.len());
    for (zi, &zeta) in grid.iter().enumerate() {
        let covered: Vec<Option<Vec<bool>>> = outer
            .par_iter()
            .enumerate()
            .map(|(b1, o)| {
                let (d, p) = o.as_ref()?;
                let m = resample_size(n, *p, zeta);
                let (fits, _) = resample_fits(
                    d,
                    specs,
                    options,
                    m,
                    config.b2,
                    config.seed,
                    "inner",
                    &[b1 as u64, zi as u64],
                )
                .ok()?;
                Some(
                    (0..target.len())
                        .map(|c| {
                            let v: Vec<f64> = fits.iter().map(|f| f.psi_vector()[c]).collect();
                            let (lo, hi) = percentile_interval(&v, config.level);
                            lo <= target[c] && target[c] <= hi
                        })
                        .collect(),
                )
            })
            .collect();
        let ok: Vec<&Vec<bool>> = covered.iter().flatten().collect();
        if ok.is_empty() {
            return Err(Error::Bootstrap(format!(
                "no inner bootstrap succeeded at zeta {zeta}"
            )));
        }
        let per_param: Vec<f64> = (0..target.len())
            .map(|c| ok.iter().filter(|v| v[c]).count() as f64 / ok.len() as f64)
            .collect();
        let mean = per_param.iter().sum::<f64>() / per_param.len() as f64;
        trace.push((zeta, mean));
        if mean >= config.level {
            return Ok(ZetaSelection {
                zeta,
                trace,
                exhausted: false,
            });
        }
    }
    let zeta = *grid.last().unwrap();
    warn!("no zeta in the grid reached the nominal level; using {zeta}");
    Ok(ZetaSelection {
        zeta,
        trace,
        exhausted: true,
    })
}

/// Percentile intervals from `B` resamples of size `m`.
pub fn bootstrap_with_m(
    full: &DtrFit,
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
    m: usize,
) -> Result<BootstrapReport> {
    let (fits, failures) =
        resample_fits(data, specs, options, m, config.b, config.seed, "final", &[])?;
    let estimates = full.psi_vector();
    let labels = full
        .blip_estimates()
        .into_iter()
        .map(|(s, l, _)| (s, l))
        .collect();
    let resamples: Vec<Vec<f64>> = fits.iter().map(|f| f.psi_vector()).collect();
    let mut lower = Vec::with_capacity(estimates.len());
    let mut upper = Vec::with_capacity(estimates.len());
    for c in 0..estimates.len() {
        let v: Vec<f64> = resamples.iter().map(|r| r[c]).collect();
        let (lo, hi) = percentile_interval(&v, config.level);
        lower.push(lo);
        upper.push(hi);
    }
    Ok(BootstrapReport {
        p_hat: 0.0,
        zeta_hat: None,
        m,
        labels,
        estimates,
        lower,
        upper,
        resamples,
        failures,
    })
}

/// Standard n-out-of-n percentile bootstrap.
pub fn percentile_bootstrap(
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
) -> Result<BootstrapReport> {
    let full = fit_dwols(data, specs, options)?;
    bootstrap_with_m(&full, data, specs, options, config, data.n_rows())
}

/// Full procedure: `p̂`, `ζ̂` (per `config.zeta`), then `B` resamples of size `m̂`.
pub fn mn_bootstrap(
    data: &TrialDataset,
    specs: &[StageSpec],
    options: &FitOptions,
    config: &BootstrapConfig,
) -> Result<BootstrapReport> {
    config.validate()?;
    let full = fit_dwols(data, specs, options)?;
    let n = data.n_rows();
    let (p_hat, zeta_hat, m) = match config.zeta {
        ZetaMode::Standard => (0.0, None, n),
        ZetaMode::Fixed(z) => {
            let p = estimate_p_from(&full, data, specs, options, config, &[])?;
            (p, Some(z), resample_size(n, p, z))
        }
        ZetaMode::Adaptive => {
            let p = estimate_p_from(&full, data, specs, options, config, &[])?;
            let sel = select_zeta_from(&full, data, specs, options, config)?;
            (p, Some(sel.zeta), resample_size(n, p, sel.zeta))
        }
    };
    let mut report = bootstrap_with_m(&full, data, specs, options, config, m)?;
    report.p_hat = p_hat;
    report.zeta_hat = zeta_hat;
    Ok(report)
}
