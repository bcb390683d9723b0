//! Scoring, KL estimation, Gaussian baselines and coefficient diagnostics.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apply::{forward_batch, logpdf, logpdf_batch, row_vec};
use crate::dpm::{dpm_logpdf, dpm_logpdf_batch, DpmChain};
use crate::error::{Error, Result};
use crate::fit::FittedMap;
use crate::linalg::{cholesky_jittered, log_det_from_factor};
use crate::optim::{nelder_mead, NelderMeadConfig};
use crate::ordering::{sample_covariance, Locations};
use crate::scenarios::{true_logpdf, TrueMap};
use crate::special::{norm_quantile, LN_2PI};

/// Relative ridge added to the tapered sample covariance.
pub const SAMP_TAP_RIDGE: f64 = 1e-6;

/// Anything that assigns a log density to a field in original coordinates.
pub trait LogDensity: Sync {
    fn log_density(&self, y: &[f64]) -> Result<f64>;

    /// Log densities of the rows of a count×N matrix.
    fn log_density_batch(&self, fields: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..fields.nrows()).into_par_iter().map(|r| self.log_density(&row_vec(fields, r))).collect()
    }
}

impl LogDensity for FittedMap {
    fn log_density(&self, y: &[f64]) -> Result<f64> {
        logpdf(self, y)
    }

    fn log_density_batch(&self, fields: &DMatrix<f64>) -> Result<Vec<f64>> {
        logpdf_batch(self, fields)
    }
}

impl LogDensity for DpmChain {
    fn log_density(&self, y: &[f64]) -> Result<f64> {
        dpm_logpdf(self, y)
    }

    fn log_density_batch(&self, fields: &DMatrix<f64>) -> Result<Vec<f64>> {
        dpm_logpdf_batch(self, fields)
    }
}

impl LogDensity for TrueMap {
    fn log_density(&self, y: &[f64]) -> Result<f64> {
        true_logpdf(self, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub method: String,
    /// Mean negative log density over the fields that scored finitely.
    pub mean: f64,
    pub se: f64,
    /// Negative log density per field; nonfinite entries were excluded.
    pub values: Vec<f64>,
    pub excluded: usize,
    /// Replicates behind the model, when known.
    pub n: Option<usize>,
    pub n_vars: usize,
    pub seed: Option<u64>,
}

impl ScoreReport {
    /// Two-column table `field,neg_log_density`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("field,neg_log_density\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

/// Mean and standard error over the finite entries; returns the excluded count.
fn mean_se(values: &[f64]) -> Result<(f64, f64, usize)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let k = finite.len();
    if k < 2 {
        return Err(Error::data(format!("need at least 2 finite scores, got {k}")));
    }
    let mean = finite.iter().sum::<f64>() / k as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok((mean, (var / k as f64).sqrt(), values.len() - k))
}

/// Mean negative log density of the test fields (rows of `fields`).
pub fn log_score(model: &dyn LogDensity, fields: &DMatrix<f64>, method: &str) -> Result<ScoreReport> {
    if fields.nrows() < 2 {
        return Err(Error::invalid("scoring needs at least 2 test fields"));
    }
    let values: Vec<f64> = model.log_density_batch(fields)?.into_iter().map(|v| -v).collect();
    let (mean, se, excluded) = mean_se(&values)?;
    Ok(ScoreReport { method: method.to_string(), mean, se, values, excluded, n: None, n_vars: fields.ncols(), seed: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    /// Standard error of the per-field differences.
    pub se: f64,
    pub values: Vec<f64>,
    pub excluded: usize,
}

/// Monte Carlo KL divergence from the truth: mean of `log p_true − log p_model`.
pub fn kl_estimate(truth: &TrueMap, model: &dyn LogDensity, fields: &DMatrix<f64>) -> Result<KlEstimate> {
    if fields.nrows() < 2 {
        return Err(Error::invalid("KL estimation needs at least 2 test fields"));
    }
    let lp_true = truth.log_density_batch(fields)?;
    let lp = model.log_density_batch(fields)?;
    let values: Vec<f64> = lp_true.iter().zip(&lp).map(|(a, b)| a - b).collect();
    let (kl, se, excluded) = mean_se(&values)?;
    Ok(KlEstimate { kl, se, values, excluded })
}

/// Zero-mean Gaussian model used by the baselines.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    chol: DMatrix<f64>,
    log_det: f64,
    /// Fitted (variance, range) for the exponential baseline.
    pub params: Option<(f64, f64)>,
}

impl GaussianModel {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() == 0 {
            return Err(Error::invalid("covariance must be a nonempty square matrix"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("baseline covariance is not positive definite"))?
            .unpack();
        let log_det = log_det_from_factor(&chol);
        Ok(Self { chol, log_det, params: None })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }
}

impl LogDensity for GaussianModel {
    fn log_density(&self, y: &[f64]) -> Result<f64> {
        let n = self.chol.nrows();
        if y.len() != n {
            return Err(Error::invalid(format!("field has length {}, model expects {n}", y.len())));
        }
        let w = self
            .chol
            .solve_lower_triangular(&nalgebra::DVector::from_column_slice(y))
            .expect("factor has a positive diagonal");
        Ok(-0.5 * w.norm_squared() - 0.5 * self.log_det - 0.5 * n as f64 * LN_2PI)
    }
}

fn check_training(y: &DMatrix<f64>, locs: &Locations) -> Result<()> {
    if y.nrows() < 2 {
        return Err(Error::data(format!("need at least 2 replicates, got {}", y.nrows())));
    }
    if y.ncols() != locs.len() {
        return Err(Error::invalid(format!("data has {} variables but {} locations", y.ncols(), locs.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("training data contain nonfinite values"));
    }
    Ok(())
}

/// Sample covariance tapered by an exponential correlation whose range is
/// the largest pairwise distance, plus a small ridge.
pub fn samp_tap_covariance(y: &DMatrix<f64>, locs: &Locations) -> Result<DMatrix<f64>> {
    tapered_covariance(y, locs, locs.diameter())
}

/// Sample covariance times `exp(−h / range)` plus the ridge.
pub fn tapered_covariance(y: &DMatrix<f64>, locs: &Locations, range: f64) -> Result<DMatrix<f64>> {
    check_training(y, locs)?;
    if !(range > 0.0) {
        return Err(Error::invalid("taper range must be positive"));
    }
    let mut cov = sample_covariance(y);
    let n = cov.nrows();
    for j in 0..n {
        for i in 0..n {
            cov[(i, j)] *= (-locs.dist(i, j) / range).exp();
        }
    }
    let ridge = SAMP_TAP_RIDGE * cov.trace() / n as f64;
    for i in 0..n {
        cov[(i, i)] += ridge;
    }
    Ok(cov)
}

pub fn baseline_samp_tap(y: &DMatrix<f64>, locs: &Locations) -> Result<GaussianModel> {
    GaussianModel::new(&samp_tap_covariance(y, locs)?)
}

/// Profile log-likelihood of zero-mean data under `s² exp(−h / range)` with
/// the variance maximized out. Returns (loglik, variance).
pub fn exp_cov_profile(y: &DMatrix<f64>, dist: &DMatrix<f64>, range: f64) -> Result<(f64, f64)> {
    let (n, nv) = y.shape();
    let corr = dist.map(|h| (-h / range).exp());
    let (chol, _) = cholesky_jittered(&corr).ok_or_else(|| Error::numerical("exponential correlation is singular"))?;
    let l = chol.unpack();
    let w = l.solve_lower_triangular(&y.transpose()).expect("factor has a positive diagonal");
    let variance = w.norm_squared() / (n * nv) as f64;
    let ll = -0.5 * n as f64 * (log_det_from_factor(&l) + nv as f64 * (variance.ln() + 1.0 + LN_2PI));
    Ok((ll, variance))
}

/// Exponential covariance with variance and range fitted by maximum likelihood.
///
/// The variance is profiled out and the range is found by Nelder–Mead on its
/// logarithm, starting from a tenth of the domain diameter.
pub fn baseline_exp_cov(y: &DMatrix<f64>, locs: &Locations) -> Result<GaussianModel> {
    check_training(y, locs)?;
    let dist = locs.distance_matrix();
    let start = (0.1 * locs.diameter()).ln();
    let objective = |v: &[f64]| match exp_cov_profile(y, &dist, v[0].exp()) {
        Ok((ll, _)) if ll.is_finite() => -ll,
        _ => f64::INFINITY,
    };
    let res = nelder_mead(objective, &[start], &NelderMeadConfig { f_tol: 1e-6, max_evals: 200, step: 1.0 });
    if !res.f.is_finite() {
        return Err(Error::numerical("exponential covariance fit failed"));
    }
    let range = res.x[0].exp();
    let (_, variance) = exp_cov_profile(y, &dist, range)?;
    let cov = dist.map(|h| variance * (-h / range).exp());
    let mut model = GaussianModel::new(&cov)?;
    model.params = Some((variance, range));
    Ok(model)
}

/// Summary of map coefficients (rows are fields, columns ordered variables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefDiagnostics {
    pub fields: usize,
    pub coord_mean: Vec<f64>,
    pub coord_var: Vec<f64>,
    pub pooled_mean: f64,
    pub pooled_var: f64,
    pub pooled_skewness: f64,
    pub pooled_excess_kurtosis: f64,
    /// (probability, empirical quantile, standard normal quantile).
    pub qq: Vec<(f64, f64, f64)>,
    pub qq_max_abs_dev: f64,
    /// Lag-1 autocorrelation per coordinate across the field sequence.
    pub lag1: Option<Vec<f64>>,
    pub clamped: usize,
}

impl CoefDiagnostics {
    /// Per-coordinate table `index,mean,var[,lag1]`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.lag1.is_some() { "index,mean,var,lag1\n" } else { "index,mean,var\n" });
        for i in 0..self.coord_mean.len() {
            let _ = write!(s, "{i},{},{}", self.coord_mean[i], self.coord_var[i]);
            if let Some(l) = &self.lag1 {
                let _ = write!(s, ",{}", l[i]);
            }
            s.push('\n');
        }
        s
    }
}

const QQ_PROBS: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

/// Moments, quantile comparison and optional lag-1 autocorrelations of coefficients.
pub fn diagnose_coefficients(z: &DMatrix<f64>, sequence: bool) -> Result<CoefDiagnostics> {
    let (k, nv) = z.shape();
    if k < 2 || nv == 0 {
        return Err(Error::invalid("diagnostics need at least 2 fields"));
    }
    let coord_mean: Vec<f64> = z.column_iter().map(|c| c.mean()).collect();
    let coord_var: Vec<f64> = z
        .column_iter()
        .zip(&coord_mean)
        .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64)
        .collect();
    let mut all: Vec<f64> = z.iter().copied().collect();
    let total = all.len() as f64;
    let pooled_mean = all.iter().sum::<f64>() / total;
    let m2 = all.iter().map(|v| (v - pooled_mean).powi(2)).sum::<f64>() / total;
    let m3 = all.iter().map(|v| (v - pooled_mean).powi(3)).sum::<f64>() / total;
    let m4 = all.iter().map(|v| (v - pooled_mean).powi(4)).sum::<f64>() / total;
    all.sort_by(f64::total_cmp);
    let qq: Vec<(f64, f64, f64)> = QQ_PROBS.iter().map(|&p| (p, quantile_sorted(&all, p), norm_quantile(p))).collect();
    let qq_max_abs_dev = qq.iter().map(|(_, e, t)| (e - t).abs()).fold(0.0, f64::max);
    let lag1 = sequence.then(|| {
        z.column_iter()
            .zip(&coord_mean)
            .map(|(c, m)| {
                let den: f64 = c.iter().map(|v| (v - m).powi(2)).sum();
                let num: f64 = (0..k - 1).map(|t| (c[t] - m) * (c[t + 1] - m)).sum();
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    });
    Ok(CoefDiagnostics {
        fields: k,
        coord_mean,
        coord_var,
        pooled_mean,
        pooled_var: m2 * total / (total - 1.0),
        pooled_skewness: m3 / m2.powf(1.5),
        pooled_excess_kurtosis: m4 / (m2 * m2) - 3.0,
        qq,
        qq_max_abs_dev,
        lag1,
        clamped: 0,
    })
}

/// Diagnostics of the coefficients of held-out fields under a fitted map.
/// With `sequence` the rows of `fields` are treated as consecutive in time.
pub fn coef_diagnostics(map: &FittedMap, fields: &DMatrix<f64>, sequence: bool) -> Result<CoefDiagnostics> {
    let coefs = forward_batch(map, fields)?;
    let z = DMatrix::from_fn(coefs.len(), map.n_vars(), |r, i| coefs[r].z[i]);
    let mut d = diagnose_coefficients(&z, sequence)?;
    d.clamped = coefs.iter().map(|c| c.clamped.len()).sum();
    Ok(d)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = p * (x.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

/// Sample bimodality coefficient `(g² + 1) / (κ + 3(n−1)²/((n−2)(n−3)))`
/// with bias-corrected skewness g and excess kurtosis κ. Values above 5/9
/// point to a bimodal or heavily flattened distribution.
pub fn bimodality_coefficient(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    assert!(x.len() > 3, "bimodality coefficient needs at least 4 values");
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let g1 = m3 / m2.powf(1.5);
    let skew = g1 * (n * (n - 1.0)).sqrt() / (n - 2.0);
    let g2 = m4 / (m2 * m2) - 3.0;
    let kurt = (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * g2 + 6.0);
    (skew * skew + 1.0) / (kurt + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
}

/// Number of strict interior local maxima of a sequence.
pub fn count_local_maxima(values: &[f64]) -> usize {
    values.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count()
}
