//! Regression calibration from replicate or unbiased proxy measurements.
//!
//! Given `k` unbiased proxies `X*_1, ..., X*_k` of a `d`-dimensional
//! covariate `X` (and optionally error-free covariates `Z`), the fitted
//! [`CalibrationModel`] holds ANOVA-style plug-in estimates of the means and
//! covariance blocks and imputes `X̂ = E[X | X*, Z]` with the best linear
//! unbiased predictor.
//!
//! Estimator definitions, with `X̄*·j` the mean of proxy `j` and `X̄ᵢ*(j)`
//! the mean of the other proxies of row `i`:
//!
//! ```text
//! Σ_X*j   = 1/(n-1) Σᵢ (X*ᵢⱼ - X̄*·j)(X*ᵢⱼ - X̄*·j)'
//! M       = (k-1)/(kn) Σᵢ Σⱼ (X*ᵢⱼ - X̄ᵢ*(j))(X*ᵢⱼ - X̄ᵢ*(j))'
//! Σ_XX(1) = (1/k) (Σⱼ Σ_X*j - M)
//! Mⱼ      = Σ_X*j - Σ_XX(1)
//! X*      = Σⱼ δⱼ X*ⱼ,   μ_X = mean(X*)
//! Σ_XX(2) = Σ_X* - Σⱼ δⱼ² Mⱼ
//! ```
//!
//! `Σ_XX(2)` feeds the predictor; `Σ_XX(1)` only enters through `Mⱼ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regress::{expit, RCOND_TOLERANCE};
use crate::table::DataTable;

/// `k` proxies, each an `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    proxies: Vec<DMatrix<f64>>,
}

impl ProxySet {
    pub fn new(proxies: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = proxies.first().ok_or(Error::TooFew {
            what: "proxies",
            needed: 1,
            found: 0,
        })?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::Dimension("proxy matrices must be non-empty".into()));
        }
        if let Some(bad) = proxies.iter().find(|p| p.shape() != shape) {
            return Err(Error::Dimension(format!(
                "proxy shapes differ: {:?} vs {:?}",
                shape,
                bad.shape()
            )));
        }
        Ok(ProxySet { proxies })
    }

    /// Proxies from table columns: `columns[j]` lists the `d` columns of proxy `j`.
    pub fn from_table(table: &DataTable, columns: &[Vec<String>]) -> Result<Self> {
        let mats = columns
            .iter()
            .map(|cols| table_matrix(table, cols))
            .collect::<Result<Vec<_>>>()?;
        ProxySet::new(mats)
    }

    /// Univariate proxies from plain vectors.
    pub fn from_vectors(proxies: &[Vec<f64>]) -> Result<Self> {
        ProxySet::new(
            proxies
                .iter()
                .map(|v| DMatrix::from_column_slice(v.len(), 1, v))
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.proxies.len()
    }

    pub fn n(&self) -> usize {
        self.proxies[0].nrows()
    }

    pub fn d(&self) -> usize {
        self.proxies[0].ncols()
    }

    pub fn proxy(&self, j: usize) -> &DMatrix<f64> {
        &self.proxies[j]
    }

    pub fn select_rows(&self, rows: &[usize]) -> ProxySet {
        ProxySet {
            proxies: self.proxies.iter().map(|p| p.select_rows(rows)).collect(),
        }
    }
}

/// `n x cols.len()` matrix of the named columns.
pub fn table_matrix(table: &DataTable, cols: &[String]) -> Result<DMatrix<f64>> {
    let data = cols
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(table.n_rows(), cols.len(), |i, j| {
        data[j][i]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaScheme {
    /// `1/k` for every proxy.
    Equal,
    /// Inverse error-variance traces, normalized.
    #[default]
    TraceInverse,
    /// Inverse of `Tr(β'β Mⱼ)`, normalized; needs the outcome coefficients.
    BlupOptimal,
}

impl std::str::FromStr for DeltaScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(DeltaScheme::Equal),
            "trace_inverse" => Ok(DeltaScheme::TraceInverse),
            "blup_optimal" => Ok(DeltaScheme::BlupOptimal),
            other => Err(Error::Invalid(format!("unknown delta scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaWeights {
    pub delta: Vec<f64>,
    pub scheme: DeltaScheme,
}

/// Proxy weights under `scheme` given per-proxy error covariances `m_j`.
///
/// `beta_hint` is the `r x d` block of outcome-model coefficients that
/// multiplies `X̂`; it is required by [`DeltaScheme::BlupOptimal`].
pub fn delta_weights(
    scheme: DeltaScheme,
    m_j: &[DMatrix<f64>],
    beta_hint: Option<&DMatrix<f64>>,
) -> Result<DeltaWeights> {
    let k = m_j.len();
    if k == 0 {
        return Err(Error::TooFew {
            what: "proxies",
            needed: 1,
            found: 0,
        });
    }
    let inverse_normalized = |traces: Vec<f64>| -> Result<Vec<f64>> {
        if let Some((proxy, &trace)) = traces
            .iter()
            .enumerate()
            .find(|(_, t)| !(**t > 0.0) || !t.is_finite())
        {
            return Err(Error::DegenerateErrorVariance { proxy, trace });
        }
        let inv: Vec<f64> = traces.iter().map(|t| 1.0 / t).collect();
        let total: f64 = inv.iter().sum();
        Ok(inv.into_iter().map(|v| v / total).collect())
    };
    let delta = match scheme {
        DeltaScheme::Equal => vec![1.0 / k as f64; k],
        DeltaScheme::TraceInverse => inverse_normalized(m_j.iter().map(|m| m.trace()).collect())?,
        DeltaScheme::BlupOptimal => {
            let beta = beta_hint.ok_or_else(|| {
                Error::Invalid("blup_optimal weights need the outcome coefficient block".into())
            })?;
            let d = m_j[0].nrows();
            if beta.ncols() != d {
                return Err(Error::Dimension(format!(
                    "coefficient block has {} columns, covariate has dimension {d}",
                    beta.ncols()
                )));
            }
            let btb = beta.tr_mul(beta);
            inverse_normalized(m_j.iter().map(|m| (&btb * m).trace()).collect())?
        }
    };
    Ok(DeltaWeights { delta, scheme })
}

/// Row-wise weighted sum `Σⱼ δⱼ X*ⱼ`.
pub fn combine_proxies(proxies: &ProxySet, delta: &DeltaWeights) -> Result<DMatrix<f64>> {
    if delta.delta.len() != proxies.k() {
        return Err(Error::Dimension(format!(
            "{} weights for {} proxies",
            delta.delta.len(),
            proxies.k()
        )));
    }
    let mut out = DMatrix::zeros(proxies.n(), proxies.d());
    for (p, &w) in proxies.proxies.iter().zip(&delta.delta) {
        out += p * w;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub mu_x: DVector<f64>,
    pub mu_z: DVector<f64>,
    /// `Σ_X*j` for each proxy.
    pub proxy_cov: Vec<DMatrix<f64>>,
    pub sigma_xx_1: DMatrix<f64>,
    pub sigma_xx_2: DMatrix<f64>,
    /// Pooled within-row proxy scatter `M`.
    pub m_pooled: DMatrix<f64>,
    pub m_j: Vec<DMatrix<f64>>,
    pub sigma_xstar: DMatrix<f64>,
    pub sigma_xz: DMatrix<f64>,
    pub sigma_zz: DMatrix<f64>,
    pub delta: DeltaWeights,
    /// Conditional covariance of `X` given `(X*, Z)`.
    pub cond_cov: DMatrix<f64>,
    /// `d x (d + q)` predictor gain applied to centered `(X*, Z)`.
    pub gain: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// `1/(n-1) Σᵢ (aᵢ - ā)(bᵢ - b̄)'`.
fn cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ac = center(a);
    let bc = center(b);
    ac.tr_mul(&bc) / (n as f64 - 1.0)
}

fn center(a: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(a);
    let mut c = a.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    c
}

/// Inverse of a symmetric matrix, rejecting near-singular input.
pub(crate) fn checked_sym_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if !(rcond >= RCOND_TOLERANCE) {
        return Err(Error::SingularCalibration { rcond });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    Ok(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

fn z_or_empty(z: Option<&DMatrix<f64>>, n: usize) -> Result<DMatrix<f64>> {
    match z {
        Some(z) if z.ncols() > 0 => {
            if z.nrows() != n {
                return Err(Error::Dimension(format!(
                    "Z has {} rows, proxies have {n}",
                    z.nrows()
                )));
            }
            Ok(z.clone())
        }
        _ => Ok(DMatrix::zeros(n, 0)),
    }
}

/// Proxy covariances and the error decomposition that does not depend on δ.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub proxy_cov: Vec<DMatrix<f64>>,
    pub m_pooled: DMatrix<f64>,
    pub sigma_xx_1: DMatrix<f64>,
    pub m_j: Vec<DMatrix<f64>>,
}

/// `Σ_X*j`, `M`, `Σ_XX(1)` and `Mⱼ`. Needs `k >= 2` for a meaningful split.
pub fn variance_components(proxies: &ProxySet) -> VarianceComponents {
    let k = proxies.k();
    let n = proxies.n();
    let d = proxies.d();
    let proxy_cov: Vec<DMatrix<f64>> = proxies
        .proxies
        .iter()
        .map(|p| symmetrize(&cross_cov(p, p)))
        .collect();

    let total: DMatrix<f64> = proxies
        .proxies
        .iter()
        .fold(DMatrix::zeros(n, d), |acc, p| acc + p);
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    for p in &proxies.proxies {
        // X*ᵢⱼ minus the mean of the other k-1 proxies of row i
        let loo = (&total - p) / (k as f64 - 1.0);
        let dev = p - loo;
        scatter += dev.tr_mul(&dev);
    }
    let m_pooled = symmetrize(&(scatter * ((k as f64 - 1.0) / (k as f64 * n as f64))));

    let sum_cov = proxy_cov
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, c| acc + c);
    let sigma_xx_1 = (sum_cov - &m_pooled) / k as f64;
    let m_j = proxy_cov.iter().map(|c| c - &sigma_xx_1).collect();
    VarianceComponents {
        proxy_cov,
        m_pooled,
        sigma_xx_1,
        m_j,
    }
}

/// Fits every plug-in component from the proxies (and optional `Z`).
pub fn fit_calibration(
    proxies: &ProxySet,
    z: Option<&DMatrix<f64>>,
    scheme: DeltaScheme,
    beta_hint: Option<&DMatrix<f64>>,
) -> Result<CalibrationModel> {
    let k = proxies.k();
    let n = proxies.n();
    let d = proxies.d();
    if k < 2 {
        return Err(Error::TooFew {
            what: "proxies",
            needed: 2,
            found: k,
        });
    }
    if n < 3 {
        return Err(Error::TooFew {
            what: "rows",
            needed: 3,
            found: n,
        });
    }
    let z = z_or_empty(z, n)?;
    let q = z.ncols();
    let VarianceComponents {
        proxy_cov,
        m_pooled,
        sigma_xx_1,
        m_j,
    } = variance_components(proxies);

    let delta = delta_weights(scheme, &m_j, beta_hint)?;
    let combined = combine_proxies(proxies, &delta)?;
    let mu_x = column_means(&combined);
    let mu_z = column_means(&z);
    let sigma_xstar = symmetrize(&cross_cov(&combined, &combined));
    let sigma_xz = cross_cov(&combined, &z);
    let sigma_zz = symmetrize(&cross_cov(&z, &z));
    let weighted_error = delta
        .delta
        .iter()
        .zip(&m_j)
        .fold(DMatrix::zeros(d, d), |acc, (w, m)| acc + m * (w * w));
    let sigma_xx_2 = symmetrize(&(&sigma_xstar - &weighted_error));

    let (gain, cond_cov) = blup_blocks(&sigma_xx_2, &weighted_error, &sigma_xz, &sigma_zz)?;

    debug_assert_eq!(gain.shape(), (d, d + q));
    Ok(CalibrationModel {
        mu_x,
        mu_z,
        proxy_cov,
        sigma_xx_1,
        sigma_xx_2,
        m_pooled,
        m_j,
        sigma_xstar,
        sigma_xz,
        sigma_zz,
        delta,
        cond_cov,
        gain,
    })
}

/// Gain `[Σ_XX, Σ_XZ] J⁻¹` and conditional covariance for the predictor,
/// where `J = [[Σ_XX + E, Σ_XZ], [Σ_ZX, Σ_ZZ]]` and `E` is the error
/// covariance of the combined proxy.
pub(crate) fn blup_blocks(
    sigma_xx: &DMatrix<f64>,
    error_cov: &DMatrix<f64>,
    sigma_xz: &DMatrix<f64>,
    sigma_zz: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = sigma_xx.nrows();
    let q = sigma_zz.nrows();
    let mut joint = DMatrix::zeros(d + q, d + q);
    joint
        .view_mut((0, 0), (d, d))
        .copy_from(&symmetrize(&(sigma_xx + error_cov)));
    if q > 0 {
        joint.view_mut((0, d), (d, q)).copy_from(sigma_xz);
        joint
            .view_mut((d, 0), (q, d))
            .copy_from(&sigma_xz.transpose());
        joint.view_mut((d, d), (q, q)).copy_from(sigma_zz);
    }
    let joint_inv = checked_sym_inverse(&joint)?;
    let mut cross = DMatrix::zeros(d, d + q);
    cross.view_mut((0, 0), (d, d)).copy_from(sigma_xx);
    if q > 0 {
        cross.view_mut((0, d), (d, q)).copy_from(sigma_xz);
    }
    let gain = &cross * joint_inv;
    let cond_cov = symmetrize(&(sigma_xx - &gain * cross.transpose()));
    Ok((gain, cond_cov))
}

impl CalibrationModel {
    pub fn d(&self) -> usize {
        self.mu_x.len()
    }

    pub fn q(&self) -> usize {
        self.mu_z.len()
    }

    pub fn k(&self) -> usize {
        self.m_j.len()
    }

    /// Error covariance of the combined proxy, `Σⱼ δⱼ² Mⱼ`.
    pub fn combined_error_cov(&self) -> DMatrix<f64> {
        self.delta
            .delta
            .iter()
            .zip(&self.m_j)
            .fold(DMatrix::zeros(self.d(), self.d()), |acc, (w, m)| {
                acc + m * (w * w)
            })
    }

    /// `X̂ᵢ = μ_X + G [(X*ᵢ - μ_X)', (Zᵢ - μ_Z)']'` for every row.
    pub fn impute(&self, xstar: &DMatrix<f64>, z: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        impute_with(&self.gain, &self.mu_x, &self.mu_z, xstar, z)
    }
}

pub(crate) fn impute_with(
    gain: &DMatrix<f64>,
    mu_x: &DVector<f64>,
    mu_z: &DVector<f64>,
    xstar: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let n = xstar.nrows();
    let d = mu_x.len();
    let q = mu_z.len();
    if xstar.ncols() != d {
        return Err(Error::Dimension(format!(
            "X* has {} columns, model expects {d}",
            xstar.ncols()
        )));
    }
    let z = z_or_empty(z, n)?;
    if z.ncols() != q {
        return Err(Error::Dimension(format!(
            "Z has {} columns, model expects {q}",
            z.ncols()
        )));
    }
    let mut centered = DMatrix::zeros(n, d + q);
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] = xstar[(i, j)] - mu_x[j];
        }
        for j in 0..q {
            centered[(i, d + j)] = z[(i, j)] - mu_z[j];
        }
    }
    let mut out = centered * gain.transpose();
    for mut row in out.row_iter_mut() {
        for j in 0..d {
            row[j] += mu_x[j];
        }
    }
    Ok(out)
}

/// Best linear unbiased prediction of `X` for each row of `xstar`.
pub fn blup_impute(
    model: &CalibrationModel,
    xstar: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    model.impute(xstar, z)
}

/// Calibration fitted on the rows where `mask` is nonzero.
pub fn fit_calibration_conditional(
    proxies: &ProxySet,
    z: Option<&DMatrix<f64>>,
    scheme: DeltaScheme,
    beta_hint: Option<&DMatrix<f64>>,
    mask: &[f64],
) -> Result<CalibrationModel> {
    if mask.len() != proxies.n() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} rows",
            mask.len(),
            proxies.n()
        )));
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0.0).collect();
    if rows.len() < 3 {
        return Err(Error::TooFew {
            what: "rows in the conditioning subset",
            needed: 3,
            found: rows.len(),
        });
    }
    let sub = proxies.select_rows(&rows);
    let z_sub = z.filter(|z| z.ncols() > 0).map(|z| z.select_rows(&rows));
    fit_calibration(&sub, z_sub.as_ref(), scheme, beta_hint)
}

/// Approximate `P(A=1 | Z, X*)` from a logistic model fitted on `X̂`,
/// attenuated by the conditional covariance of `X`.
pub fn attenuated_probability(
    alpha0: f64,
    alpha_x: &[f64],
    alpha_z: &[f64],
    xhat: &[f64],
    z: &[f64],
    cond_cov: &DMatrix<f64>,
) -> f64 {
    let lin = alpha0
        + alpha_x.iter().zip(xhat).map(|(a, x)| a * x).sum::<f64>()
        + alpha_z.iter().zip(z).map(|(a, v)| a * v).sum::<f64>();
    let ax = DVector::from_column_slice(alpha_x);
    let quad = (ax.transpose() * cond_cov * &ax)[(0, 0)];
    expit(lin / (1.0 + quad / (1.7 * 1.7)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn equal_weights() {
        let w = delta_weights(DeltaScheme::Equal, &[scalar(1.0), scalar(3.0)], None).unwrap();
        assert_eq!(w.delta, vec![0.5, 0.5]);
    }

    #[test]
    fn trace_inverse_weights() {
        let w = delta_weights(
            DeltaScheme::TraceInverse,
            &[scalar(0.25), scalar(1.0)],
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(w.delta[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(w.delta[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn blup_optimal_matches_trace_inverse_in_one_dimension() {
        let m = [scalar(0.25), scalar(1.0), scalar(0.4)];
        let a = delta_weights(DeltaScheme::TraceInverse, &m, None).unwrap();
        let b = delta_weights(DeltaScheme::BlupOptimal, &m, Some(&scalar(-2.7))).unwrap();
        for (x, y) in a.delta.iter().zip(&b.delta) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
        assert!(delta_weights(DeltaScheme::BlupOptimal, &m, None).is_err());
    }

    #[test]
    fn blup_optimal_multivariate_uses_coefficient_block() {
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.1]);
        let m2 = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 1.0]);
        // outcome only depends on the first coordinate: proxy 2 is better for it
        let beta = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let w = delta_weights(DeltaScheme::BlupOptimal, &[m1, m2], Some(&beta)).unwrap();
        assert_abs_diff_eq!(w.delta[0], (1.0 / 1.0) / (1.0 + 10.0), epsilon = 1e-14);
        assert_abs_diff_eq!(w.delta[1], 10.0 / 11.0, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_trace_is_an_error() {
        let err = delta_weights(
            DeltaScheme::TraceInverse,
            &[scalar(0.3), scalar(-0.01)],
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateErrorVariance { proxy: 1, .. }
        ));
    }

    #[test]
    fn combine_examples() {
        let p = ProxySet::from_vectors(&[vec![1.0], vec![2.0]]).unwrap();
        let mean = DeltaWeights {
            delta: vec![0.5, 0.5],
            scheme: DeltaScheme::Equal,
        };
        assert_eq!(combine_proxies(&p, &mean).unwrap()[(0, 0)], 1.5);
        let first = DeltaWeights {
            delta: vec![1.0, 0.0],
            scheme: DeltaScheme::Equal,
        };
        assert_eq!(combine_proxies(&p, &first).unwrap()[(0, 0)], 1.0);
        let w = DeltaWeights {
            delta: vec![0.8, 0.2],
            scheme: DeltaScheme::TraceInverse,
        };
        assert_abs_diff_eq!(
            combine_proxies(&p, &w).unwrap()[(0, 0)],
            1.2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_error_is_identity() {
        let x = vec![0.3, -1.2, 2.0, 0.7, -0.4];
        let z = DMatrix::from_column_slice(5, 1, &[1.0, 0.0, 1.0, 1.0, 0.0]);
        let p = ProxySet::from_vectors(&[x.clone(), x.clone()]).unwrap();
        let m = fit_calibration(&p, Some(&z), DeltaScheme::Equal, None).unwrap();
        assert!(m.m_pooled.amax() < 1e-15);
        assert!(m.m_j.iter().all(|mj| mj.amax() < 1e-14));
        assert_abs_diff_eq!(
            m.sigma_xx_1[(0, 0)],
            m.proxy_cov[0][(0, 0)],
            epsilon = 1e-14
        );
        let xs = DMatrix::from_column_slice(5, 1, &x);
        let xhat = m.impute(&xs, Some(&z)).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(xhat[(i, 0)], x[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn univariate_shrinkage() {
        // μ = 0, Σ_XX = 1, combined error variance 0.125
        let (gain, cond) = blup_blocks(
            &scalar(1.0),
            &scalar(0.125),
            &DMatrix::zeros(1, 0),
            &DMatrix::zeros(0, 0),
        )
        .unwrap();
        let xhat = impute_with(
            &gain,
            &DVector::from_element(1, 0.0),
            &DVector::zeros(0),
            &scalar(1.125),
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(xhat[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cond[(0, 0)], 1.0 - 1.0 / 1.125, epsilon = 1e-14);
    }

    fn simulate(n: usize, seed: u64) -> (Vec<f64>, ProxySet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let err = Normal::new(0.0, 0.5).unwrap();
        let x: Vec<f64> = (0..n).map(|_| std.sample(&mut rng)).collect();
        let p1 = x.iter().map(|v| v + err.sample(&mut rng)).collect();
        let p2 = x.iter().map(|v| v + err.sample(&mut rng)).collect();
        (x, ProxySet::from_vectors(&[p1, p2]).unwrap())
    }

    #[test]
    fn variance_components_are_consistent() {
        let (_, p) = simulate(100_000, 11);
        let m = fit_calibration(&p, None, DeltaScheme::TraceInverse, None).unwrap();
        assert_abs_diff_eq!(m.sigma_xx_1[(0, 0)], 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(m.sigma_xx_2[(0, 0)], 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(m.sigma_xx_1[(0, 0)], m.sigma_xx_2[(0, 0)], epsilon = 0.02);
        for mj in &m.m_j {
            assert_abs_diff_eq!(mj[(0, 0)], 0.25, epsilon = 0.02);
        }
        assert_abs_diff_eq!(m.delta.delta[0], 0.5, epsilon = 0.05);
    }

    #[test]
    fn combined_proxy_mean_is_unbiased() {
        let (x, p) = simulate(20_000, 5);
        for delta in [vec![0.5, 0.5], vec![0.9, 0.1], vec![1.0, 0.0]] {
            let w = DeltaWeights {
                delta,
                scheme: DeltaScheme::Equal,
            };
            let c = combine_proxies(&p, &w).unwrap();
            let n = x.len() as f64;
            let diff: Vec<f64> = (0..x.len()).map(|i| c[(i, 0)] - x[i]).collect();
            let mean = diff.iter().sum::<f64>() / n;
            let mean_c = c.sum() / n;
            let mean_x = x.iter().sum::<f64>() / n;
            let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let var_c = c.iter().map(|v| (v - mean_c).powi(2)).sum::<f64>() / (n - 1.0);
            // E[X*] = E[X]: the combined mean is within 3 SE of the true mean of X (0)
            assert!(mean_c.abs() <= 3.0 * (var_c / n).sqrt());
            assert!((mean_c - mean_x).abs() <= 3.0 * sd / n.sqrt());
        }
    }

    #[test]
    fn equal_error_covariances_give_equal_trace_weights() {
        let (_, p) = simulate(50_000, 9);
        let m = fit_calibration(&p, None, DeltaScheme::TraceInverse, None).unwrap();
        assert_abs_diff_eq!(m.delta.delta[0], 0.5, epsilon = 0.03);
        let same = vec![scalar(0.3); 3];
        let exact = delta_weights(DeltaScheme::TraceInverse, &same, None).unwrap();
        assert!(exact.delta.iter().all(|d| (d - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn imputation_is_shift_equivariant() {
        let (_, p) = simulate(200, 3);
        let m = fit_calibration(&p, None, DeltaScheme::TraceInverse, None).unwrap();
        let shifted = ProxySet::new(
            (0..2)
                .map(|j| p.proxy(j).map(|v| v + 3.5))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let ms = fit_calibration(&shifted, None, DeltaScheme::TraceInverse, None).unwrap();
        let a = m
            .impute(&combine_proxies(&p, &m.delta).unwrap(), None)
            .unwrap();
        let b = ms
            .impute(&combine_proxies(&shifted, &ms.delta).unwrap(), None)
            .unwrap();
        for i in 0..a.nrows() {
            assert_abs_diff_eq!(b[(i, 0)], a[(i, 0)] + 3.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn conditional_fit_matches_subset() {
        let (_, p) = simulate(60, 8);
        let all = fit_calibration(&p, None, DeltaScheme::TraceInverse, None).unwrap();
        let c = fit_calibration_conditional(&p, None, DeltaScheme::TraceInverse, None, &[1.0; 60])
            .unwrap();
        assert_eq!(all, c);

        let mask: Vec<f64> = (0..60).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let rows: Vec<usize> = (0..60).filter(|i| i % 3 == 0).collect();
        let c =
            fit_calibration_conditional(&p, None, DeltaScheme::TraceInverse, None, &mask).unwrap();
        let direct =
            fit_calibration(&p.select_rows(&rows), None, DeltaScheme::TraceInverse, None).unwrap();
        assert_eq!(c, direct);

        let mut two = vec![0.0; 60];
        two[0] = 1.0;
        two[5] = 1.0;
        assert!(matches!(
            fit_calibration_conditional(&p, None, DeltaScheme::Equal, None, &two),
            Err(Error::TooFew { .. })
        ));
    }

    #[test]
    fn preconditions() {
        let p = ProxySet::from_vectors(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            fit_calibration(&p, None, DeltaScheme::Equal, None),
            Err(Error::TooFew { needed: 2, .. })
        ));
        let p = ProxySet::from_vectors(&[vec![1.0, 2.0], vec![1.5, 2.5]]).unwrap();
        assert!(matches!(
            fit_calibration(&p, None, DeltaScheme::Equal, None),
            Err(Error::TooFew { needed: 3, .. })
        ));
        assert!(ProxySet::from_vectors(&[vec![1.0, 2.0], vec![1.5]]).is_err());
    }

    #[test]
    fn collinear_z_is_singular() {
        let (_, p) = simulate(50, 4);
        let c = combine_proxies(
            &p,
            &DeltaWeights {
                delta: vec![0.5, 0.5],
                scheme: DeltaScheme::Equal,
            },
        )
        .unwrap();
        // Z equal to the combined proxy makes the joint block singular
        let err = fit_calibration(&p, Some(&c), DeltaScheme::Equal, None).unwrap_err();
        assert!(matches!(err, Error::SingularCalibration { .. }));
    }

    #[test]
    fn attenuated_probability_cases() {
        let zero = DMatrix::zeros(1, 1);
        assert_abs_diff_eq!(
            attenuated_probability(0.3, &[1.2], &[0.5], &[0.7], &[2.0], &zero),
            expit(0.3 + 1.2 * 0.7 + 0.5 * 2.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            attenuated_probability(0.3, &[0.0], &[0.5], &[9.0], &[2.0], &scalar(50.0)),
            expit(0.3 + 1.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            attenuated_probability(0.0, &[1.0], &[], &[1.0], &[], &scalar(1.0)),
            expit(1.0 / (1.0f64 + 1.0 / 2.89).sqrt()),
            epsilon = 1e-15
        );
    }
}
