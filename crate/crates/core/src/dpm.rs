//! Dirichlet-process-mixture model for the regression residuals.
//!
//! Each row keeps the Gaussian-process regression of the basic map, with
//! `f_i ~ GP(0, C_i)`, but the residuals of the n replicates follow a
//! Dirichlet process mixture of normals whose base measure is
//! normal-inverse-gamma. Posterior sampling is Metropolis-within-Gibbs, and
//! predictions average a mixture of Gaussians over the retained states.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{design_matrix, prepare, prior_for_row};
use crate::io::Standardization;
use crate::kernel::{covariance_against, covariance_sym, Hyper, RowPrior, Smoothness, Theta};
use crate::linalg::{cholesky_jittered, log_det_from_factor};
use crate::ordering::Ordering;
use crate::special::{ln_gamma, norm_logpdf_scaled, t_logpdf_scaled, LN_2PI};

/// Floor applied to β̃ when rounding makes the leave-one-out scatter vanish.
pub const BETA_FLOOR: f64 = 1e-12;

/// Names of the three Metropolis blocks, in update order.
pub const BLOCKS: [&str; 3] = ["concentration", "kernel", "noise"];

/// The ten hyperparameters: the six of the basic map plus the concentration
/// `ζ_i = exp(zeta[0]) ℓ_i^zeta[1]` and the base-measure precision
/// `η_i = exp(eta[0]) ℓ_i^eta[1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpmTheta {
    pub map: Theta,
    pub zeta: [f64; 2],
    pub eta: [f64; 2],
}

impl DpmTheta {
    pub fn from_map(map: Theta) -> Self {
        Self { map, zeta: [0.0, 0.0], eta: [0.0, 0.0] }
    }

    pub fn to_array(self) -> [f64; 10] {
        let m = self.map.to_array();
        [m[0], m[1], m[2], m[3], m[4], m[5], self.zeta[0], self.zeta[1], self.eta[0], self.eta[1]]
    }

    pub fn from_array(a: [f64; 10]) -> Self {
        Self {
            map: Theta::from_array([a[0], a[1], a[2], a[3], a[4], a[5]]),
            zeta: [a[6], a[7]],
            eta: [a[8], a[9]],
        }
    }

    pub fn zeta_at(&self, ell: f64) -> f64 {
        (self.zeta[0] + self.zeta[1] * ell.ln()).exp()
    }

    pub fn eta_at(&self, ell: f64) -> f64 {
        (self.eta[0] + self.eta[1] * ell.ln()).exp()
    }
}

/// Normal-inverse-gamma law: `d² ~ IG(alpha, beta)`, `μ | d² ~ N(xi, d²/eta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nig {
    pub xi: f64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Nig {
    /// Conjugate update from `count` observations with the given sum and sum of squares.
    pub fn posterior(&self, count: usize, sum: f64, sumsq: f64) -> Nig {
        if count == 0 {
            return *self;
        }
        let c = count as f64;
        let mean = sum / c;
        let eta = self.eta + c;
        let scatter = (sumsq - sum * mean).max(0.0);
        let shift = c * self.eta * (mean - self.xi).powi(2) / eta;
        Nig {
            xi: (self.eta * self.xi + sum) / eta,
            eta,
            alpha: self.alpha + 0.5 * c,
            beta: (self.beta + 0.5 * scatter + 0.5 * shift).max(BETA_FLOOR),
        }
    }

    /// Log density of one new observation after integrating out (μ, d²).
    pub fn predictive_logpdf(&self, x: f64) -> f64 {
        let scale2 = self.beta * (self.eta + 1.0) / (self.alpha * self.eta);
        t_logpdf_scaled(x, 2.0 * self.alpha, self.xi, scale2)
    }

    /// Joint log density at (μ, d²).
    pub fn logpdf(&self, mu: f64, d2: f64) -> f64 {
        norm_logpdf_scaled(mu, self.xi, d2 / self.eta) + self.alpha * self.beta.ln() - ln_gamma(self.alpha)
            - (self.alpha + 1.0) * d2.ln()
            - self.beta / d2
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let g: f64 = Gamma::new(self.alpha, 1.0).expect("shape is positive").sample(rng);
        let d2 = self.beta / g;
        let mu = self.xi + (d2 / self.eta).sqrt() * rng.sample::<f64, _>(StandardNormal);
        (mu, d2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpmConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub g: f64,
    pub epsilon: f64,
    pub m_max: usize,
    pub smoothness: Smoothness,
    pub standardize: bool,
    /// Starting hyperparameters; the basic map's default start when absent.
    pub theta0: Option<DpmTheta>,
    /// When false the hyperparameters stay at `theta0` and only Steps 1–3 run.
    pub update_theta: bool,
    /// Initial random-walk standard deviations for the three blocks.
    pub proposal_scales: [f64; 3],
    pub target_accept: f64,
}

impl Default for DpmConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            burn_in: 2000,
            thin: 10,
            g: 4.0,
            epsilon: 0.01,
            m_max: 30,
            smoothness: Smoothness::default(),
            standardize: true,
            theta0: None,
            update_theta: true,
            proposal_scales: [0.1, 0.05, 0.05],
            target_accept: 0.3,
        }
    }
}

impl DpmConfig {
    pub fn hyper(&self, map: Theta) -> Hyper {
        Hyper { theta: map, g: self.g, epsilon: self.epsilon, m_max: self.m_max, linear_only: false, smoothness: self.smoothness }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(Error::invalid(format!(
                "need burn-in ({}) below the iteration count ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if self.proposal_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("proposal scales must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target acceptance must lie in (0, 1)"));
        }
        Ok(())
    }

    /// θ must give a valid map prior, at least one active neighbor, and finite ζ, η.
    fn admissible(&self, theta: &DpmTheta) -> bool {
        let h = self.hyper(theta.map);
        h.validate().is_ok()
            && theta.map.q > self.epsilon.ln()
            && theta.zeta.iter().chain(&theta.eta).all(|v| v.is_finite())
    }
}

/// One row of a sampler state. Cluster `k` has parameters `mu[k]`, `d2[k]`
/// and the replicates whose label is `k`; `fresh` is a draw from the base
/// measure used as the new-cluster component in predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowState {
    /// Residuals; kept only in the final state.
    pub eps: Vec<f64>,
    pub labels: Vec<u32>,
    pub mu: Vec<f64>,
    pub d2: Vec<f64>,
    pub fresh: [f64; 2],
}

impl RowState {
    pub fn n_clusters(&self) -> usize {
        self.mu.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.mu.len()];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpmState {
    pub theta: DpmTheta,
    pub iteration: usize,
    pub rows: Vec<RowState>,
}

/// Retained states of a DPM run together with everything needed to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmChain {
    pub(crate) ordering: Ordering,
    pub(crate) config: DpmConfig,
    pub(crate) standardization: Standardization,
    pub(crate) y_ordered: DMatrix<f64>,
    pub(crate) states: Vec<DpmState>,
    pub(crate) last: DpmState,
    pub(crate) acceptance: [f64; 3],
    pub(crate) scales: [f64; 3],
}

impl DpmChain {
    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn config(&self) -> &DpmConfig {
        &self.config
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Training data, standardized and in ordered coordinates.
    pub fn y_ordered(&self) -> &DMatrix<f64> {
        &self.y_ordered
    }

    pub fn states(&self) -> &[DpmState] {
        &self.states
    }

    /// Full final state, residuals included.
    pub fn last(&self) -> &DpmState {
        &self.last
    }

    /// Post burn-in acceptance rate of each Metropolis block.
    pub fn acceptance(&self) -> [f64; 3] {
        self.acceptance
    }

    /// Proposal scales after adaptation.
    pub fn proposal_scales(&self) -> [f64; 3] {
        self.scales
    }

    pub fn n(&self) -> usize {
        self.y_ordered.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.y_ordered.ncols()
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        ordering: Ordering,
        config: DpmConfig,
        standardization: Standardization,
        y_ordered: DMatrix<f64>,
        states: Vec<DpmState>,
        last: DpmState,
        acceptance: [f64; 3],
        scales: [f64; 3],
    ) -> Result<Self> {
        let (n, n_vars) = y_ordered.shape();
        ordering.validate()?;
        if ordering.len() != n_vars || standardization.len() != n_vars {
            return Err(Error::format("chain parts disagree on the number of variables"));
        }
        if states.is_empty() {
            return Err(Error::format("chain holds no states"));
        }
        for s in states.iter().chain(std::iter::once(&last)) {
            if s.rows.len() != n_vars {
                return Err(Error::format("state has the wrong number of rows"));
            }
            for r in &s.rows {
                if r.labels.len() != n || r.mu.len() != r.d2.len() || r.labels.iter().any(|&l| l as usize >= r.mu.len()) {
                    return Err(Error::format("state row has inconsistent labels"));
                }
            }
        }
        Ok(Self { ordering, config, standardization, y_ordered, states, last, acceptance, scales })
    }
}

#[derive(Debug, Clone)]
struct Cluster {
    count: usize,
    sum: f64,
    sumsq: f64,
    mu: f64,
    d2: f64,
}

/// Kernel quantities that depend on the map hyperparameters only.
struct KernelPart {
    prior: RowPrior,
    c: DMatrix<f64>,
    /// Lower Cholesky factor of `c`; absent when the row has no neighbors.
    chol_c: Option<DMatrix<f64>>,
}

struct LiveRow {
    y: DVector<f64>,
    kernel: KernelPart,
    eps: DVector<f64>,
    labels: Vec<usize>,
    clusters: Vec<Cluster>,
}

fn kernel_part(yo: &DMatrix<f64>, ordering: &Ordering, hyper: &Hyper, i: usize) -> Result<KernelPart> {
    let prior = prior_for_row(hyper, ordering, i);
    let x = design_matrix(yo, &ordering.neighbors[i], prior.m());
    if prior.m() == 0 {
        let n = yo.nrows();
        return Ok(KernelPart { prior, c: DMatrix::zeros(n, n), chol_c: None });
    }
    let c = covariance_sym(&prior, &x);
    let (chol, _) = cholesky_jittered(&c)
        .ok_or_else(|| Error::numerical(format!("row {i}: kernel covariance is not positive definite")))?;
    Ok(KernelPart { prior, c, chol_c: Some(chol.unpack()) })
}

/// log N(r | 0, C) from the factor of C; zero for rows without a kernel.
fn gaussian_loglik(kernel: &KernelPart, r: &DVector<f64>) -> f64 {
    match &kernel.chol_c {
        None => 0.0,
        Some(l) => {
            let w = l.solve_lower_triangular(r).expect("factor has a positive diagonal");
            -0.5 * w.norm_squared() - 0.5 * log_det_from_factor(l) - 0.5 * r.len() as f64 * LN_2PI
        }
    }
}

fn base_measure(theta: &DpmTheta, prior: &RowPrior, ell: f64) -> Nig {
    Nig { xi: 0.0, eta: theta.eta_at(ell), alpha: prior.alpha, beta: prior.beta }
}

impl LiveRow {
    fn refresh_stats(&mut self) {
        for c in &mut self.clusters {
            c.count = 0;
            c.sum = 0.0;
            c.sumsq = 0.0;
        }
        for (j, &k) in self.labels.iter().enumerate() {
            let e = self.eps[j];
            let c = &mut self.clusters[k];
            c.count += 1;
            c.sum += e;
            c.sumsq += e * e;
        }
    }

    /// Step 1: residuals given cluster parameters and the kernel.
    fn draw_residuals<R: Rng>(&mut self, i: usize, rng: &mut R) -> Result<()> {
        let n = self.y.len();
        let Some(l_c) = &self.kernel.chol_c else {
            self.eps.copy_from(&self.y);
            return Ok(());
        };
        let d = DVector::from_fn(n, |j, _| self.clusters[self.labels[j]].d2);
        let mu = DVector::from_fn(n, |j, _| self.clusters[self.labels[j]].mu);
        let mut g = self.kernel.c.clone();
        for j in 0..n {
            g[(j, j)] += d[j];
        }
        let (chol_g, _) = cholesky_jittered(&g)
            .ok_or_else(|| Error::numerical(format!("row {i}: noise-adjusted covariance is not positive definite")))?;
        let s = chol_g.solve(&(&self.y - &mu));
        let eps_hat = &mu + d.component_mul(&s);
        let z1 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = l_c * z1;
        let b = DVector::from_fn(n, |j, _| d[j].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let w = chol_g.solve(&(a + &b));
        self.eps = eps_hat + b - d.component_mul(&w);
        Ok(())
    }

    fn remove(&mut self, j: usize) {
        let k = self.labels[j];
        let e = self.eps[j];
        let c = &mut self.clusters[k];
        c.count -= 1;
        c.sum -= e;
        c.sumsq -= e * e;
        if c.count == 0 {
            let last = self.clusters.len() - 1;
            self.clusters.swap_remove(k);
            if k != last {
                for l in &mut self.labels {
                    if *l == last {
                        *l = k;
                    }
                }
            }
        }
    }

    /// Step 2: sequential label updates with the parameters integrated out.
    fn draw_labels<R: Rng>(&mut self, base: &Nig, zeta: f64, rng: &mut R) {
        self.refresh_stats();
        let new_term = zeta.ln();
        let mut logw = Vec::with_capacity(self.clusters.len() + 1);
        for j in 0..self.y.len() {
            self.remove(j);
            let e = self.eps[j];
            logw.clear();
            for c in &self.clusters {
                let post = base.posterior(c.count, c.sum, c.sumsq);
                logw.push((c.count as f64).ln() + post.predictive_logpdf(e));
            }
            logw.push(new_term + base.predictive_logpdf(e));
            let k = categorical(&logw, rng.random::<f64>());
            if k == self.clusters.len() {
                self.clusters.push(Cluster { count: 0, sum: 0.0, sumsq: 0.0, mu: 0.0, d2: base.beta / base.alpha });
            }
            let c = &mut self.clusters[k];
            c.count += 1;
            c.sum += e;
            c.sumsq += e * e;
            self.labels[j] = k;
        }
        self.refresh_stats();
    }

    /// Step 3: cluster parameters from their conditional posteriors.
    fn draw_params<R: Rng>(&mut self, base: &Nig, rng: &mut R) {
        for c in &mut self.clusters {
            let (mu, d2) = base.posterior(c.count, c.sum, c.sumsq).sample(rng);
            c.mu = mu;
            c.d2 = d2;
        }
    }

    fn snapshot(&self, fresh: (f64, f64), keep_eps: bool) -> RowState {
        RowState {
            eps: if keep_eps { self.eps.iter().copied().collect() } else { Vec::new() },
            labels: self.labels.iter().map(|&l| l as u32).collect(),
            mu: self.clusters.iter().map(|c| c.mu).collect(),
            d2: self.clusters.iter().map(|c| c.d2).collect(),
            fresh: [fresh.0, fresh.1],
        }
    }
}

/// Index drawn from unnormalized log weights using one uniform.
fn categorical(logw: &[f64], u: f64) -> usize {
    let hi = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|w| (w - hi).exp()).sum();
    let mut target = u * total;
    for (k, w) in logw.iter().enumerate() {
        target -= (w - hi).exp();
        if target < 0.0 {
            return k;
        }
    }
    logw.len() - 1
}

fn concentration_target(theta: &DpmTheta, rows: &[LiveRow], ell: &[f64]) -> f64 {
    rows.iter()
        .zip(ell)
        .map(|(r, &l)| {
            let z = theta.zeta_at(l);
            let n = r.labels.len() as f64;
            r.clusters.len() as f64 * z.ln() + ln_gamma(z) - ln_gamma(n + z)
        })
        .sum()
}

fn noise_target(theta: &DpmTheta, config: &DpmConfig, rows: &[LiveRow], ell: &[f64]) -> f64 {
    let hyper = config.hyper(theta.map);
    let alpha = 2.0 + 1.0 / (config.g * config.g);
    let terms: Vec<f64> = rows
        .par_iter()
        .zip(ell)
        .map(|(r, &l)| {
            let mean_d2 = (hyper.theta.d1 + hyper.theta.d2 * l.ln()).exp();
            let base = Nig { xi: 0.0, eta: theta.eta_at(l), alpha, beta: mean_d2 * (alpha - 1.0) };
            r.clusters.iter().map(|c| base.logpdf(c.mu, c.d2)).sum::<f64>()
        })
        .collect();
    terms.iter().sum()
}

struct Adaptive {
    log_scale: [f64; 3],
    accepted: [usize; 3],
    proposed: [usize; 3],
}

impl Adaptive {
    fn propose<R: Rng + ?Sized>(&self, block: usize, values: &mut [f64], rng: &mut R) {
        let s = self.log_scale[block].exp();
        for v in values {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// Records the outcome; during burn-in the scale moves toward the target rate.
    fn record(&mut self, block: usize, log_ratio: f64, accepted: bool, it: usize, config: &DpmConfig) {
        if it < config.burn_in {
            let prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
            self.log_scale[block] += (prob - config.target_accept) / ((it + 1) as f64).powf(0.6);
        } else {
            self.proposed[block] += 1;
            self.accepted[block] += accepted as usize;
        }
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio.is_finite() && (log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio)
}

/// Runs the Metropolis-within-Gibbs sampler on an n×N replicate matrix.
///
/// States are retained every `thin` iterations after `burn_in`. Rows are
/// updated in parallel with per-row generators seeded from `rng`, so the
/// chain does not depend on the thread count.
pub fn dpm_gibbs<R: Rng + ?Sized>(y_raw: &DMatrix<f64>, ordering: Ordering, config: &DpmConfig, rng: &mut R) -> Result<DpmChain> {
    config.validate()?;
    let (yo, stdz) = prepare(y_raw, &ordering, config.standardize)?;
    let (n, n_vars) = yo.shape();
    let mut theta = match config.theta0 {
        Some(t) => t,
        None => {
            let var = yo.column_iter().map(|c| c.variance()).sum::<f64>() / n_vars as f64 * n as f64 / (n - 1) as f64;
            let var = if var > 0.0 { var } else { 1.0 };
            DpmTheta::from_map(Theta::from_array([(0.1 * var).ln(), 1.0, var.ln(), 1.0, 0.0, -0.7]))
        }
    };
    if !config.admissible(&theta) {
        return Err(Error::invalid(
            "starting hyperparameters are not admissible (need finite values and ln(epsilon) < theta_q < 0)",
        ));
    }
    let ell = ordering.ell.clone();
    let hyper = config.hyper(theta.map);
    let mut rows: Vec<LiveRow> = (0..n_vars)
        .into_par_iter()
        .map(|i| {
            let kernel = kernel_part(&yo, &ordering, &hyper, i)?;
            let y = DVector::from_column_slice(yo.column(i).as_slice());
            let d2 = kernel.prior.mean_d2;
            Ok(LiveRow {
                eps: y.clone(),
                y,
                kernel,
                labels: vec![0; n],
                clusters: vec![Cluster { count: n, sum: 0.0, sumsq: 0.0, mu: 0.0, d2 }],
            })
        })
        .collect::<Result<_>>()?;

    let mut adapt = Adaptive { log_scale: config.proposal_scales.map(f64::ln), accepted: [0; 3], proposed: [0; 3] };
    let mut states = Vec::new();
    for it in 0..config.iterations {
        let seeds: Vec<u64> = (0..n_vars).map(|_| rng.random()).collect();
        rows.par_iter_mut()
            .zip(seeds)
            .enumerate()
            .try_for_each(|(i, (row, seed))| -> Result<()> {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let base = base_measure(&theta, &row.kernel.prior, ell[i]);
                row.draw_residuals(i, &mut r)?;
                row.draw_labels(&base, theta.zeta_at(ell[i]), &mut r);
                row.draw_params(&base, &mut r);
                Ok(())
            })?;

        if config.update_theta {
            update_concentration(&mut theta, &rows, &ell, &mut adapt, it, config, rng);
            update_kernel(&mut theta, &mut rows, &yo, &ordering, &mut adapt, it, config, rng);
            update_noise(&mut theta, &mut rows, &ell, &mut adapt, it, config, rng);
        }

        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            states.push(snapshot(&theta, &rows, &ell, it, false, rng));
        }
        if (it + 1) % 100 == 0 {
            let mean_k = rows.iter().map(|r| r.clusters.len()).sum::<usize>() as f64 / n_vars as f64;
            debug!("iteration {}: mean clusters per row {mean_k:.2}, theta {:?}", it + 1, theta.to_array());
        }
    }
    let last = snapshot(&theta, &rows, &ell, config.iterations - 1, true, rng);
    let acceptance = [0, 1, 2].map(|b| {
        if adapt.proposed[b] == 0 {
            f64::NAN
        } else {
            adapt.accepted[b] as f64 / adapt.proposed[b] as f64
        }
    });
    let scales = adapt.log_scale.map(f64::exp);
    info!("dpm sampler done: {} states, acceptance {acceptance:?}", states.len());
    DpmChain::from_parts(ordering, config.clone(), stdz, yo, states, last, acceptance, scales)
}

fn snapshot<R: Rng + ?Sized>(theta: &DpmTheta, rows: &[LiveRow], ell: &[f64], it: usize, keep_eps: bool, rng: &mut R) -> DpmState {
    let rows = rows
        .iter()
        .zip(ell)
        .map(|(r, &l)| {
            let fresh = base_measure(theta, &r.kernel.prior, l).sample(rng);
            r.snapshot(fresh, keep_eps)
        })
        .collect();
    DpmState { theta: *theta, iteration: it, rows }
}

fn update_concentration<R: Rng + ?Sized>(
    theta: &mut DpmTheta,
    rows: &[LiveRow],
    ell: &[f64],
    adapt: &mut Adaptive,
    it: usize,
    config: &DpmConfig,
    rng: &mut R,
) {
    let mut prop = *theta;
    adapt.propose(0, &mut prop.zeta, rng);
    let log_ratio = if config.admissible(&prop) {
        concentration_target(&prop, rows, ell) - concentration_target(theta, rows, ell)
    } else {
        f64::NEG_INFINITY
    };
    let ok = accept(log_ratio, rng);
    if ok {
        *theta = prop;
    }
    adapt.record(0, log_ratio, ok, it, config);
}

#[allow(clippy::too_many_arguments)]
fn update_kernel<R: Rng + ?Sized>(
    theta: &mut DpmTheta,
    rows: &mut [LiveRow],
    yo: &DMatrix<f64>,
    ordering: &Ordering,
    adapt: &mut Adaptive,
    it: usize,
    config: &DpmConfig,
    rng: &mut R,
) {
    let mut prop = *theta;
    let t = prop.map;
    let mut v = [t.sigma1, t.sigma2, t.gamma, t.q];
    adapt.propose(1, &mut v, rng);
    prop.map = Theta { sigma1: v[0], sigma2: v[1], gamma: v[2], q: v[3], ..t };

    let mut proposed: Option<Vec<KernelPart>> = None;
    let log_ratio = if config.admissible(&prop) {
        let hyper = config.hyper(prop.map);
        let parts: Result<Vec<(KernelPart, f64, f64)>> = rows
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let part = kernel_part(yo, ordering, &hyper, i)?;
                let resid = &r.y - &r.eps;
                let new = gaussian_loglik(&part, &resid);
                let old = gaussian_loglik(&r.kernel, &resid);
                Ok((part, new, old))
            })
            .collect();
        match parts {
            Ok(parts) => {
                let diff: f64 = parts.iter().map(|(_, new, old)| new - old).sum();
                proposed = Some(parts.into_iter().map(|(p, _, _)| p).collect());
                diff
            }
            Err(_) => f64::NEG_INFINITY,
        }
    } else {
        f64::NEG_INFINITY
    };
    let ok = accept(log_ratio, rng);
    if ok {
        *theta = prop;
        for (r, p) in rows.iter_mut().zip(proposed.expect("accepted proposals were evaluated")) {
            r.kernel = p;
        }
    }
    adapt.record(1, log_ratio, ok, it, config);
}

fn update_noise<R: Rng + ?Sized>(
    theta: &mut DpmTheta,
    rows: &mut [LiveRow],
    ell: &[f64],
    adapt: &mut Adaptive,
    it: usize,
    config: &DpmConfig,
    rng: &mut R,
) {
    let mut prop = *theta;
    let mut v = [prop.map.d1, prop.map.d2, prop.eta[0], prop.eta[1]];
    adapt.propose(2, &mut v, rng);
    prop.map.d1 = v[0];
    prop.map.d2 = v[1];
    prop.eta = [v[2], v[3]];
    let log_ratio = if config.admissible(&prop) {
        noise_target(&prop, config, rows, ell) - noise_target(theta, config, rows, ell)
    } else {
        f64::NEG_INFINITY
    };
    let ok = accept(log_ratio, rng);
    if ok {
        *theta = prop;
        let hyper = config.hyper(theta.map);
        for (r, &l) in rows.iter_mut().zip(ell) {
            let mean_d2 = (hyper.theta.d1 + hyper.theta.d2 * l.ln()).exp();
            r.kernel.prior.mean_d2 = mean_d2;
            r.kernel.prior.beta = mean_d2 * (r.kernel.prior.alpha - 1.0);
        }
    }
    adapt.record(2, log_ratio, ok, it, config);
}

/// Per-state, per-row quantities of the predictive mixture.
struct RowPredictive {
    prior: RowPrior,
    x: DMatrix<f64>,
    chol_g: Option<DMatrix<f64>>,
    /// `G⁻¹ (y − μ)`.
    weights_y: DVector<f64>,
    /// (log weight, μ, d²) per component, the fresh cluster last.
    comps: Vec<(f64, f64, f64)>,
}

impl RowPredictive {
    fn new(chain: &DpmChain, state: &DpmState, i: usize) -> Result<Self> {
        let hyper = chain.config.hyper(state.theta.map);
        let prior = prior_for_row(&hyper, &chain.ordering, i);
        let yo = &chain.y_ordered;
        let n = yo.nrows();
        let x = design_matrix(yo, &chain.ordering.neighbors[i], prior.m());
        let rs = &state.rows[i];
        let zeta = state.theta.zeta_at(chain.ordering.ell[i]);
        let denom = (n as f64 + zeta).ln();
        let mut comps: Vec<(f64, f64, f64)> = rs
            .counts()
            .iter()
            .zip(rs.mu.iter().zip(&rs.d2))
            .map(|(&c, (&mu, &d2))| ((c as f64).ln() - denom, mu, d2))
            .collect();
        comps.push((zeta.ln() - denom, rs.fresh[0], rs.fresh[1]));
        if prior.m() == 0 {
            return Ok(Self { prior, x, chol_g: None, weights_y: DVector::zeros(n), comps });
        }
        let mut g = covariance_sym(&prior, &x);
        let mut r = DVector::from_column_slice(yo.column(i).as_slice());
        for (j, &l) in rs.labels.iter().enumerate() {
            g[(j, j)] += rs.d2[l as usize];
            r[j] -= rs.mu[l as usize];
        }
        let (chol, _) = cholesky_jittered(&g)
            .ok_or_else(|| Error::numerical(format!("row {i}: noise-adjusted covariance is not positive definite")))?;
        let weights_y = chol.solve(&r);
        Ok(Self { prior, x, chol_g: Some(chol.unpack()), weights_y, comps })
    }

    /// Location and variance of the regression at the covariates of `yo`.
    fn predict(&self, neighbors: &[usize], yo: &[f64]) -> (f64, f64) {
        let Some(l) = &self.chol_g else {
            return (0.0, 0.0);
        };
        let xstar: Vec<f64> = neighbors[..self.prior.m()].iter().map(|&j| yo[j]).collect();
        let (k, k0) = covariance_against(&self.prior, &self.x, &xstar);
        let w = l.solve_lower_triangular(&k).expect("factor has a positive diagonal");
        (k.dot(&self.weights_y), (k0 - w.norm_squared()).max(0.0))
    }

    fn log_density(&self, f: f64, v: f64, y: f64) -> f64 {
        log_sum_exp(self.comps.iter().map(|&(lw, mu, d2)| lw + norm_logpdf_scaled(y, f + mu, v + d2)))
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + it.map(|v| (v - hi).exp()).sum::<f64>().ln()
}

fn ordered_fields(chain: &DpmChain, fields: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    if fields.ncols() != chain.n_vars() {
        return Err(Error::invalid(format!("fields have {} variables, chain expects {}", fields.ncols(), chain.n_vars())));
    }
    (0..fields.nrows())
        .map(|r| {
            let y: Vec<f64> = fields.row(r).iter().copied().collect();
            if let Some(j) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::data(format!("field {r} entry {j} is not finite")));
            }
            Ok(chain.ordering.to_ordered(&chain.standardization.apply(&y)))
        })
        .collect()
}

/// Predictive log density of each row of a count×N matrix of fields, in raw units.
///
/// Every retained state contributes a Gaussian mixture per variable; the
/// per-variable densities are averaged over states before taking logs.
pub fn dpm_logpdf_batch(chain: &DpmChain, fields: &DMatrix<f64>) -> Result<Vec<f64>> {
    let yos = ordered_fields(chain, fields)?;
    let count = yos.len();
    let n_states = chain.states.len() as f64;
    let per_row: Vec<Vec<f64>> = (0..chain.n_vars())
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![f64::NEG_INFINITY; count];
            for state in &chain.states {
                let pred = RowPredictive::new(chain, state, i)?;
                for (a, yo) in acc.iter_mut().zip(&yos) {
                    let (f, v) = pred.predict(&chain.ordering.neighbors[i], yo);
                    let lp = pred.log_density(f, v, yo[i]);
                    *a = log_add_exp(*a, lp);
                }
            }
            Ok(acc.into_iter().map(|a| a - n_states.ln()).collect())
        })
        .collect::<Result<_>>()?;
    let jac = chain.standardization.log_jacobian();
    Ok((0..count).map(|r| per_row.iter().map(|row| row[r]).sum::<f64>() + jac).collect())
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Predictive log density of one field in original coordinates.
pub fn dpm_logpdf(chain: &DpmChain, y: &[f64]) -> Result<f64> {
    let m = DMatrix::from_row_slice(1, y.len(), y);
    Ok(dpm_logpdf_batch(chain, &m)?[0])
}

/// Log predictive density of ordered variable `i` at each of `values`, given
/// the field `y` (original coordinates, raw units). Only the ordered
/// predecessors of `i` in `y` are used, so this is the i-th conditional factor
/// of the density, averaged over retained states.
pub fn dpm_conditional_logpdf(chain: &DpmChain, y: &[f64], i: usize, values: &[f64]) -> Result<Vec<f64>> {
    if i >= chain.n_vars() {
        return Err(Error::invalid(format!("variable {i} out of range for {} variables", chain.n_vars())));
    }
    let yo = ordered_fields(chain, &DMatrix::from_row_slice(1, y.len(), y))?.remove(0);
    let orig = chain.ordering.perm[i];
    let (mean, sd) = (chain.standardization.mean[orig], chain.standardization.sd[orig]);
    let mut acc = vec![f64::NEG_INFINITY; values.len()];
    for state in &chain.states {
        let pred = RowPredictive::new(chain, state, i)?;
        let (f, v) = pred.predict(&chain.ordering.neighbors[i], &yo);
        for (a, x) in acc.iter_mut().zip(values) {
            *a = log_add_exp(*a, pred.log_density(f, v, (x - mean) / sd));
        }
    }
    let shift = (chain.states.len() as f64).ln() + sd.ln();
    Ok(acc.into_iter().map(|a| a - shift).collect())
}

/// Ancestral draws from the predictive: for each variable in order, a state
/// is picked uniformly, then a mixture component, then a Gaussian value.
pub fn dpm_sample<R: Rng + ?Sized>(chain: &DpmChain, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
    let n_vars = chain.n_vars();
    let n_states = chain.states.len();
    // Random inputs are drawn up front so the output is independent of scheduling.
    let mut picks = vec![(0usize, 0.0f64, 0.0f64); count * n_vars];
    for p in picks.iter_mut() {
        *p = (rng.random_range(0..n_states), rng.random::<f64>(), rng.sample(StandardNormal));
    }
    let mut yos = vec![vec![0.0; n_vars]; count];
    for i in 0..n_vars {
        let mut used: Vec<usize> = (0..count).map(|r| picks[r * n_vars + i].0).collect();
        used.sort_unstable();
        used.dedup();
        let preds: Vec<RowPredictive> =
            used.par_iter().map(|&s| RowPredictive::new(chain, &chain.states[s], i)).collect::<Result<_>>()?;
        let values: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|r| {
                let (s, u, z) = picks[r * n_vars + i];
                let pred = &preds[used.binary_search(&s).expect("state was prepared")];
                let (f, v) = pred.predict(&chain.ordering.neighbors[i], &yos[r]);
                let logw: Vec<f64> = pred.comps.iter().map(|c| c.0).collect();
                let (_, mu, d2) = pred.comps[categorical(&logw, u)];
                f + mu + (v + d2).sqrt() * z
            })
            .collect();
        for (yo, v) in yos.iter_mut().zip(values) {
            yo[i] = v;
        }
    }
    let mut out = DMatrix::zeros(count, n_vars);
    for (r, yo) in yos.iter().enumerate() {
        let y = chain.standardization.invert(&chain.ordering.to_original(yo));
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}
