//! Weighted least squares and logistic regression.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::table::DesignMatrix;

/// Inverse logit, `1 / (1 + exp(-x))`.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Reciprocal condition threshold below which a system is treated as singular.
pub const RCOND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub term_labels: Vec<String>,
}

impl WlsFit {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.term_labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.coefficients[i])
    }
}

/// Least squares on a matrix already scaled by the square-root weights.
fn solve_scaled(
    scaled: DMatrix<f64>,
    rhs: DVector<f64>,
    labels: &[String],
) -> Result<DVector<f64>> {
    let p = scaled.ncols();
    let qr = scaled.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..p).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if !(rcond >= RCOND_TOLERANCE) {
        let terms = diag
            .iter()
            .enumerate()
            .filter(|(_, &d)| !(d > RCOND_TOLERANCE * max))
            .map(|(j, _)| labels.get(j).cloned().unwrap_or_else(|| format!("#{j}")))
            .collect();
        return Err(Error::RankDeficient { rcond, terms });
    }
    let mut qty = rhs;
    qr.q_tr_mul(&mut qty);
    let top = qty.rows(0, p).into_owned();
    r.solve_upper_triangular(&top).ok_or(Error::RankDeficient {
        rcond,
        terms: labels.to_vec(),
    })
}

/// Minimizes `sum w_i (y_i - d_i' b)^2` through a QR decomposition of the
/// row-scaled design.
pub fn wls(design: &DesignMatrix, y: &[f64], weights: &[f64]) -> Result<WlsFit> {
    let n = design.n_rows();
    let p = design.n_cols();
    if y.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows, response {} and weights {}",
            y.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Invalid(format!(
            "weights must be finite and >= 0, found {w}"
        )));
    }
    if n < p {
        return Err(Error::RankDeficient {
            rcond: 0.0,
            terms: design.term_labels.clone(),
        });
    }
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, p, |i, j| design.values[(i, j)] * sw[i]);
    let rhs = DVector::from_iterator(n, y.iter().zip(&sw).map(|(v, s)| v * s));
    let coef = solve_scaled(scaled, rhs, &design.term_labels)?;
    let fitted = &design.values * &coef;
    let residuals = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    Ok(WlsFit {
        coefficients: coef.iter().copied().collect(),
        residuals,
        term_labels: design.term_labels.clone(),
    })
}

/// `max_j |sum_i d_ij w_i r_i|`, the weighted normal-equation residual.
pub fn normal_equation_residual(design: &DesignMatrix, weights: &[f64], residuals: &[f64]) -> f64 {
    let wr = DVector::from_iterator(
        residuals.len(),
        residuals.iter().zip(weights).map(|(r, w)| r * w),
    );
    design.values.tr_mul(&wr).amax()
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub fitted_probabilities: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub term_labels: Vec<String>,
}

impl LogisticFit {
    /// `max_j |sum_i d_ij (a_i - p_i)|`.
    pub fn score_residual(&self, design: &DesignMatrix, a: &[f64]) -> f64 {
        score_residual(design, a, &self.fitted_probabilities)
    }
}

fn score_residual(design: &DesignMatrix, a: &[f64], p: &[f64]) -> f64 {
    let r = DVector::from_iterator(a.len(), a.iter().zip(p).map(|(a, p)| a - p));
    design.values.tr_mul(&r).amax()
}

pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_TOLERANCE: f64 = 1e-10;
pub const PROBABILITY_CLAMP: f64 = 1e-12;
pub const SEPARATION_NORM: f64 = 1e3;

/// Maximum likelihood logistic regression by Newton / IRLS, started at zero.
pub fn logistic_irls(design: &DesignMatrix, a: &[f64]) -> Result<LogisticFit> {
    let n = design.n_rows();
    let p = design.n_cols();
    if a.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows, response has {}",
            a.len()
        )));
    }
    if a.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NotBinary("logistic response".into()));
    }
    let ones = a.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::SingleClass("logistic response".into()));
    }
    if n < p {
        return Err(Error::RankDeficient {
            rcond: 0.0,
            terms: design.term_labels.clone(),
        });
    }

    let x = &design.values;
    let mut alpha = DVector::<f64>::zeros(p);
    let mut prob = vec![0.5; n];
    let mut score = score_residual(design, a, &prob);
    let mut iterations = 0;
    let mut converged = score <= IRLS_TOLERANCE;

    while !converged && iterations < IRLS_MAX_ITER {
        iterations += 1;
        let eta = x * &alpha;
        let mut sw = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let pi = prob[i].clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
            let w = pi * (1.0 - pi);
            sw.push(w.sqrt());
            z.push(eta[i] + (a[i] - pi) / w);
        }
        let scaled = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * sw[i]);
        let rhs = DVector::from_iterator(n, z.iter().zip(&sw).map(|(v, s)| v * s));
        let next = solve_scaled(scaled, rhs, &design.term_labels)?;
        let step = (&next - &alpha).amax();
        alpha = next;
        let norm = alpha.norm();
        if !norm.is_finite() || norm > SEPARATION_NORM {
            return Err(Error::Separation { norm });
        }
        let eta = x * &alpha;
        prob = eta.iter().map(|&e| expit(e)).collect();
        score = score_residual(design, a, &prob);
        converged = step <= IRLS_TOLERANCE * (1.0 + norm);
    }
    if !converged {
        // diverging coefficients drive fitted probabilities to 0 or 1
        if prob
            .iter()
            .any(|&q| q < PROBABILITY_CLAMP || q > 1.0 - PROBABILITY_CLAMP)
        {
            return Err(Error::Separation {
                norm: alpha.norm(),
            });
        }
        return Err(Error::NonConvergence { iterations, score });
    }
    Ok(LogisticFit {
        coefficients: alpha.iter().copied().collect(),
        fitted_probabilities: prob,
        converged,
        iterations,
        term_labels: design.term_labels.clone(),
    })
}
