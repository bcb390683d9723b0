//! Per-row posterior updates, the integrated likelihood and empirical-Bayes fitting.

use std::cell::Cell;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Standardization;
use crate::kernel::{covariance_sym, row_prior_unchecked, Hyper, RowPrior, Smoothness, Theta};
use crate::linalg::{cholesky_jittered, log_det_from_factor};
use crate::optim::{nelder_mead, NelderMeadConfig};
use crate::ordering::{maximin_order, FirstPoint, Locations, OrderConfig, Ordering};
use crate::special::{ln_gamma, LN_2PI};

thread_local! {
    static OP_COUNT: Cell<u64> = const { Cell::new(0) };
}

#[inline]
fn count_ops(_k: u64) {
    #[cfg(debug_assertions)]
    OP_COUNT.with(|c| c.set(c.get() + _k));
}

/// Returns and resets the floating-point operation estimate accumulated by
/// row fits on the current thread. Always 0 in release builds.
pub fn take_op_count() -> u64 {
    OP_COUNT.with(|c| c.replace(0))
}

/// Posterior sufficient statistics for one regression.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedRow {
    pub prior: RowPrior,
    /// Lower Cholesky factor of `G = K + I`.
    pub chol_g: DMatrix<f64>,
    pub alpha_tilde: f64,
    pub beta_tilde: f64,
    pub d_hat2: f64,
    /// `G⁻¹ y`.
    pub solve_y: DVector<f64>,
    /// n×m neighbor covariates.
    pub train_x: DMatrix<f64>,
}

impl FittedRow {
    pub fn n(&self) -> usize {
        self.solve_y.len()
    }

    /// This row's contribution to the integrated log-likelihood.
    pub fn log_marginal(&self) -> f64 {
        let n = self.n() as f64;
        let p = &self.prior;
        -0.5 * log_det_from_factor(&self.chol_g) + p.alpha * p.beta.ln() - self.alpha_tilde * self.beta_tilde.ln()
            + ln_gamma(self.alpha_tilde)
            - ln_gamma(p.alpha)
            - 0.5 * n * LN_2PI
    }
}

fn check_row_inputs(y: &DVector<f64>, x: &DMatrix<f64>, prior: &RowPrior) -> Result<()> {
    if x.nrows() != y.len() || x.ncols() != prior.m() {
        return Err(Error::invalid(format!(
            "covariates are {}×{}, expected {}×{}",
            x.nrows(),
            x.ncols(),
            y.len(),
            prior.m()
        )));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::data("nonfinite value in regression data"));
    }
    Ok(())
}

fn factor_g(y: &DVector<f64>, x: &DMatrix<f64>, prior: &RowPrior) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = y.len();
    let mut g = covariance_sym(prior, x);
    g /= prior.mean_d2;
    for j in 0..n {
        g[(j, j)] += 1.0;
    }
    let (n64, m64) = (n as u64, prior.m() as u64);
    count_ops(n64 * n64 * (m64 + 1) + n64 * n64 * n64 / 3);
    cholesky_jittered(&g)
        .map(|(c, _)| c)
        .ok_or_else(|| Error::numerical("Cholesky factorization of G failed after maximum jitter"))
}

/// Conjugate posterior for `y = f(x) + ε`, `f | d ~ GP(0, d² K)`, `d² ~ IG(α, β)`.
pub fn fit_row(y: &DVector<f64>, x: &DMatrix<f64>, prior: &RowPrior) -> Result<FittedRow> {
    check_row_inputs(y, x, prior)?;
    let chol = factor_g(y, x, prior)?;
    let solve_y = chol.solve(y);
    count_ops(2 * (y.len() as u64).pow(2));
    let quad = y.dot(&solve_y).max(0.0);
    let alpha_tilde = prior.alpha + 0.5 * y.len() as f64;
    let beta_tilde = prior.beta + 0.5 * quad;
    Ok(FittedRow {
        prior: prior.clone(),
        chol_g: chol.unpack(),
        alpha_tilde,
        beta_tilde,
        d_hat2: beta_tilde / alpha_tilde,
        solve_y,
        train_x: x.clone(),
    })
}

/// Per-row log marginal without keeping the factorization. With a purely
/// linear kernel and fewer neighbors than replicates, `G = I + W Wᵀ` is
/// handled through the m×m matrix `I + WᵀW`.
pub fn row_log_marginal(y: &DVector<f64>, x: &DMatrix<f64>, prior: &RowPrior) -> Result<f64> {
    check_row_inputs(y, x, prior)?;
    let n = y.len();
    let m = prior.m();
    let (log_det, quad) = if prior.sigma2 == 0.0 && m < n {
        if m == 0 {
            (0.0, y.norm_squared())
        } else {
            let scale = 1.0 / prior.mean_d2.sqrt();
            let mut w = x.clone();
            for (k, mut col) in w.column_iter_mut().enumerate() {
                col *= prior.q[k] * scale;
            }
            let mut a = w.tr_mul(&w);
            for k in 0..m {
                a[(k, k)] += 1.0;
            }
            count_ops((n * m * m + m * m * m) as u64);
            let (chol, _) = cholesky_jittered(&a)
                .ok_or_else(|| Error::numerical("Cholesky factorization of I + WᵀW failed"))?;
            let b = w.tr_mul(y);
            let ab = chol.solve(&b);
            let l = chol.unpack();
            (log_det_from_factor(&l), (y.norm_squared() - b.dot(&ab)).max(0.0))
        }
    } else {
        let chol = factor_g(y, x, prior)?;
        let solve = chol.solve(y);
        let l = chol.unpack();
        (log_det_from_factor(&l), y.dot(&solve).max(0.0))
    };
    let alpha_tilde = prior.alpha + 0.5 * n as f64;
    let beta_tilde = prior.beta + 0.5 * quad;
    Ok(-0.5 * log_det + prior.alpha * prior.beta.ln() - alpha_tilde * beta_tilde.ln() + ln_gamma(alpha_tilde)
        - ln_gamma(prior.alpha)
        - 0.5 * n as f64 * LN_2PI)
}

/// Prior for ordered row `i`, with the active set clipped to the stored neighbors.
pub fn prior_for_row(hyper: &Hyper, ordering: &Ordering, i: usize) -> RowPrior {
    let mut prior = row_prior_unchecked(hyper, ordering.ell[i], i);
    prior.q.truncate(ordering.neighbors[i].len());
    prior
}

/// n×m matrix whose k-th column is ordered variable `neighbors[k]`.
pub fn design_matrix(y_ordered: &DMatrix<f64>, neighbors: &[usize], m: usize) -> DMatrix<f64> {
    let n = y_ordered.nrows();
    let mut x = DMatrix::zeros(n, m);
    for (k, &j) in neighbors.iter().take(m).enumerate() {
        x.column_mut(k).copy_from(&y_ordered.column(j));
    }
    x
}

fn check_ordered(y_ordered: &DMatrix<f64>, ordering: &Ordering) -> Result<()> {
    if y_ordered.ncols() != ordering.len() {
        return Err(Error::invalid(format!(
            "data has {} variables but the ordering has {}",
            y_ordered.ncols(),
            ordering.len()
        )));
    }
    Ok(())
}

/// Each row's contribution to the integrated log-likelihood, in ordered index order.
pub fn row_log_marginals(y_ordered: &DMatrix<f64>, ordering: &Ordering, hyper: &Hyper) -> Result<Vec<f64>> {
    hyper.validate()?;
    check_ordered(y_ordered, ordering)?;
    (0..ordering.len())
        .into_par_iter()
        .map(|i| {
            let prior = prior_for_row(hyper, ordering, i);
            let x = design_matrix(y_ordered, &ordering.neighbors[i], prior.m());
            let y = DVector::from_column_slice(y_ordered.column(i).as_slice());
            row_log_marginal(&y, &x, &prior).map_err(|e| with_row(e, i))
        })
        .collect()
}

/// Log integrated likelihood of the ordered n×N data; terms are summed left to right.
pub fn integrated_loglik(y_ordered: &DMatrix<f64>, ordering: &Ordering, hyper: &Hyper) -> Result<f64> {
    Ok(row_log_marginals(y_ordered, ordering, hyper)?.iter().sum())
}

fn with_row(e: Error, i: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("row {i}: {msg}")),
        Error::Data(msg) => Error::Data(format!("row {i}: {msg}")),
        Error::InvalidInput(msg) => Error::InvalidInput(format!("row {i}: {msg}")),
        other => other,
    }
}

/// Fits every row at fixed hyperparameters.
pub fn fit_rows(y_ordered: &DMatrix<f64>, ordering: &Ordering, hyper: &Hyper) -> Result<Vec<FittedRow>> {
    hyper.validate()?;
    check_ordered(y_ordered, ordering)?;
    (0..ordering.len())
        .into_par_iter()
        .map(|i| {
            let prior = prior_for_row(hyper, ordering, i);
            let x = design_matrix(y_ordered, &ordering.neighbors[i], prior.m());
            let y = DVector::from_column_slice(y_ordered.column(i).as_slice());
            fit_row(&y, &x, &prior).map_err(|e| with_row(e, i))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub m_max: usize,
    pub g: f64,
    pub epsilon: f64,
    /// Fix θ_σ1 = −∞ so every regression is linear.
    pub linear_only: bool,
    pub smoothness: Smoothness,
    /// Standardize each variable to mean 0, sd 1 before fitting.
    pub standardize: bool,
    /// Plug-in map that ignores posterior uncertainty in f and d.
    pub simplified: bool,
    pub restarts: usize,
    pub optimizer: NelderMeadConfig,
    /// Overrides the default optimizer start.
    pub theta0: Option<Theta>,
    pub first_point: FirstPoint,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            m_max: 30,
            g: 4.0,
            epsilon: 0.01,
            linear_only: false,
            smoothness: Smoothness::default(),
            standardize: true,
            simplified: false,
            restarts: 3,
            optimizer: NelderMeadConfig::default(),
            theta0: None,
            first_point: FirstPoint::Centroid,
        }
    }
}

impl FitConfig {
    pub fn hyper(&self, theta: Theta) -> Hyper {
        Hyper {
            theta,
            g: self.g,
            epsilon: self.epsilon,
            m_max: self.m_max,
            linear_only: self.linear_only,
            smoothness: self.smoothness,
        }
    }

    /// Default start `(log(0.1·v), 1, log v, 1, 0, −0.7)` for average variance `v`.
    pub fn default_start(&self, var: f64) -> Theta {
        let sigma1 = if self.linear_only { f64::NEG_INFINITY } else { (0.1 * var).ln() };
        Theta { sigma1, sigma2: 1.0, d1: var.ln(), d2: 1.0, gamma: 0.0, q: -0.7 }
    }

    fn encode(&self, t: &Theta) -> Vec<f64> {
        let lq = (-t.q).ln();
        if self.linear_only {
            vec![t.d1, t.d2, lq]
        } else {
            vec![t.sigma1, t.sigma2, t.d1, t.d2, t.gamma, lq]
        }
    }

    fn decode(&self, v: &[f64], start: &Theta) -> Theta {
        if self.linear_only {
            Theta { sigma1: f64::NEG_INFINITY, sigma2: start.sigma2, d1: v[0], d2: v[1], gamma: start.gamma, q: -v[2].exp() }
        } else {
            Theta { sigma1: v[0], sigma2: v[1], d1: v[2], d2: v[3], gamma: v[4], q: -v[5].exp() }
        }
    }
}

/// Outcome of one optimizer restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub start: Theta,
    pub end: Theta,
    pub loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

/// A fitted posterior map. Rows are indexed in ordered coordinates.
#[derive(Debug, Clone)]
pub struct FittedMap {
    pub(crate) ordering: Ordering,
    pub(crate) hyper: Hyper,
    pub(crate) rows: Vec<FittedRow>,
    pub(crate) n: usize,
    pub(crate) standardization: Standardization,
    pub(crate) simplified: bool,
    pub(crate) loglik: f64,
    pub(crate) trace: Vec<RestartTrace>,
}

impl FittedMap {
    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn rows(&self) -> &[FittedRow] {
        &self.rows
    }

    /// Number of training replicates.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of variables N.
    pub fn n_vars(&self) -> usize {
        self.rows.len()
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn simplified(&self) -> bool {
        self.simplified
    }

    /// Integrated log-likelihood at the stored hyperparameters.
    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn trace(&self) -> &[RestartTrace] {
        &self.trace
    }

    /// Active neighbor count of each ordered row.
    pub fn active_neighbors(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.prior.m()).collect()
    }

    /// The same posterior evaluated as the plug-in (simplified) map, or back.
    pub fn into_simplified(mut self, simplified: bool) -> Self {
        self.simplified = simplified;
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        ordering: Ordering,
        hyper: Hyper,
        rows: Vec<FittedRow>,
        n: usize,
        standardization: Standardization,
        simplified: bool,
        trace: Vec<RestartTrace>,
    ) -> Result<Self> {
        ordering.validate()?;
        if rows.len() != ordering.len() || standardization.len() != ordering.len() {
            return Err(Error::format("map components disagree on the number of variables"));
        }
        let loglik = rows.iter().map(|r| r.log_marginal()).sum();
        Ok(Self { ordering, hyper, rows, n, standardization, simplified, loglik, trace })
    }
}

/// Applies the standardization and reorders columns into ordered coordinates.
pub(crate) fn prepare(y_raw: &DMatrix<f64>, ordering: &Ordering, standardize: bool) -> Result<(DMatrix<f64>, Standardization)> {
    let n = y_raw.nrows();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 replicates, got {n}")));
    }
    if y_raw.ncols() != ordering.len() {
        return Err(Error::invalid(format!(
            "data has {} variables but the ordering has {}",
            y_raw.ncols(),
            ordering.len()
        )));
    }
    let stdz = Standardization::estimate(y_raw)?;
    let stdz = if standardize { stdz } else { Standardization::identity(y_raw.ncols()) };
    let ys = stdz.apply_matrix(y_raw);
    let mut yo = DMatrix::zeros(n, ordering.len());
    for (i, &p) in ordering.perm.iter().enumerate() {
        yo.column_mut(i).copy_from(&ys.column(p));
    }
    Ok((yo, stdz))
}

/// Orders the locations by maximin and fits the map by empirical Bayes.
pub fn fit_map(y_raw: &DMatrix<f64>, locs: &Locations, config: &FitConfig) -> Result<FittedMap> {
    if y_raw.ncols() != locs.len() {
        return Err(Error::invalid(format!("data has {} variables but {} locations", y_raw.ncols(), locs.len())));
    }
    let ordering = maximin_order(locs, &OrderConfig { m_max: config.m_max, first: config.first_point })?;
    fit_with_ordering(y_raw, ordering, config)
}

/// Empirical-Bayes fit with a precomputed ordering.
pub fn fit_with_ordering(y_raw: &DMatrix<f64>, ordering: Ordering, config: &FitConfig) -> Result<FittedMap> {
    let (yo, stdz) = prepare(y_raw, &ordering, config.standardize)?;
    let n = yo.nrows() as f64;
    let var = yo
        .column_iter()
        .map(|c| {
            let mu = c.mean();
            c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0)
        })
        .sum::<f64>()
        / yo.ncols() as f64;
    let start = config.theta0.unwrap_or_else(|| config.default_start(var));
    let start_hyper = config.hyper(start);
    start_hyper.validate()?;

    let objective = |v: &[f64]| -> f64 {
        let h = config.hyper(config.decode(v, &start));
        match integrated_loglik(&yo, &ordering, &h) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };

    let x0 = config.encode(&start);
    let f0 = objective(&x0);
    let mut best_x = x0.clone();
    let mut best_f = f0;
    let mut trace = Vec::new();
    for r in 0..config.restarts.max(1) {
        let (from, step) = if r == 0 {
            (x0.clone(), config.optimizer.step)
        } else {
            let perturbed: Vec<f64> = best_x
                .iter()
                .enumerate()
                .map(|(j, v)| v + if (j + r) % 2 == 0 { 0.5 } else { -0.5 })
                .collect();
            (perturbed, 0.5 * config.optimizer.step)
        };
        let cfg = NelderMeadConfig { step, ..config.optimizer };
        let res = nelder_mead(objective, &from, &cfg);
        debug!("restart {r}: loglik {} after {} evaluations", -res.f, res.evals);
        trace.push(RestartTrace {
            start: config.decode(&from, &start),
            end: config.decode(&res.x, &start),
            loglik: -res.f,
            evals: res.evals,
            converged: res.converged,
        });
        if res.f < best_f {
            best_f = res.f;
            best_x = res.x;
        }
    }
    if !(best_f < f0) {
        warn!("hyperparameter search did not improve on its starting point");
    }
    let hyper = config.hyper(config.decode(&best_x, &start));
    let rows = fit_rows(&yo, &ordering, &hyper)?;
    FittedMap::from_parts(ordering, hyper, rows, yo.nrows(), stdz, config.simplified, trace)
}

/// Fits all rows at the given hyperparameters without searching.
pub fn fit_with_hyper(
    y_raw: &DMatrix<f64>,
    ordering: Ordering,
    hyper: &Hyper,
    standardize: bool,
    simplified: bool,
) -> Result<FittedMap> {
    let (yo, stdz) = prepare(y_raw, &ordering, standardize)?;
    let rows = fit_rows(&yo, &ordering, hyper)?;
    FittedMap::from_parts(ordering, hyper.clone(), rows, yo.nrows(), stdz, simplified, Vec::new())
}
