//! Hyperparameters, per-row priors and the row covariance kernel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six global hyperparameters controlling nonlinearity, noise scale,
/// kernel range and neighbor relevance.
///
/// `sigma1 = -inf` switches the nonlinear kernel component off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub sigma1: f64,
    pub sigma2: f64,
    pub d1: f64,
    pub d2: f64,
    pub gamma: f64,
    /// Must be negative so that relevance decays with neighbor rank.
    pub q: f64,
}

impl Theta {
    pub fn to_array(self) -> [f64; 6] {
        [self.sigma1, self.sigma2, self.d1, self.d2, self.gamma, self.q]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { sigma1: a[0], sigma2: a[1], d1: a[2], d2: a[3], gamma: a[4], q: a[5] }
    }

    pub fn is_linear(&self) -> bool {
        self.sigma1 == f64::NEG_INFINITY
    }
}

// JSON has no infinities, so the linear-only marker `sigma1 = -inf` travels as null.
impl Serialize for Theta {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let arr: [Option<f64>; 6] = self.to_array().map(|v| v.is_finite().then_some(v));
        arr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Theta {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let arr = <[Option<f64>; 6]>::deserialize(d)?;
        Ok(Self::from_array(arr.map(|v| v.unwrap_or(f64::NEG_INFINITY))))
    }
}

/// Matérn smoothness of the nonlinear kernel component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Smoothness {
    #[serde(rename = "0.5")]
    Half,
    #[default]
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[serde(rename = "2.5")]
    FiveHalves,
}

impl Smoothness {
    /// Matérn correlation at scaled distance `t ≥ 0`.
    #[inline]
    pub fn correlation(self, t: f64) -> f64 {
        match self {
            Smoothness::Half => (-t).exp(),
            Smoothness::ThreeHalves => {
                let a = 3f64.sqrt() * t;
                (1.0 + a) * (-a).exp()
            }
            Smoothness::FiveHalves => {
                let a = 5f64.sqrt() * t;
                (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }
}

/// Everything that, together with a length scale, determines a row prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub theta: Theta,
    /// Prior coefficient of variation of d_i².
    pub g: f64,
    /// Relevance cutoff for the neighbor weights.
    pub epsilon: f64,
    pub m_max: usize,
    pub linear_only: bool,
    #[serde(default)]
    pub smoothness: Smoothness,
}

impl Hyper {
    pub fn new(theta: Theta) -> Self {
        Self { theta, g: 4.0, epsilon: 0.01, m_max: 30, linear_only: false, smoothness: Smoothness::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.theta;
        let others = [t.sigma2, t.d1, t.d2, t.gamma, t.q];
        if others.iter().any(|v| !v.is_finite()) || t.sigma1.is_nan() || t.sigma1 == f64::INFINITY {
            return Err(Error::invalid(format!("nonfinite hyperparameter in {:?}", t.to_array())));
        }
        if !(t.q < 0.0) {
            return Err(Error::invalid(format!("theta_q must be negative, got {}", t.q)));
        }
        if !(self.g > 0.0) {
            return Err(Error::invalid("g must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if self.m_max < 1 {
            return Err(Error::invalid("m_max must be at least 1"));
        }
        Ok(())
    }

    /// Number of neighbors with relevance `exp(theta_q k) ≥ epsilon`, capped at `m_max`.
    pub fn active_neighbors(&self) -> usize {
        sparsity(self.theta.q, self.epsilon, self.m_max)
    }
}

/// `min(m_max, max{k : exp(theta_q k) ≥ epsilon})`, or 0 if no k qualifies.
pub fn sparsity(theta_q: f64, epsilon: f64, m_max: usize) -> usize {
    let raw = (epsilon.ln() / theta_q).floor();
    let mut k = if raw.is_finite() && raw > 0.0 { (raw as usize).min(m_max) } else { 0 };
    // Correct for rounding right at the threshold.
    while k < m_max && (theta_q * (k + 1) as f64).exp() >= epsilon {
        k += 1;
    }
    while k > 0 && (theta_q * k as f64).exp() < epsilon {
        k -= 1;
    }
    k
}

/// Prior parameters for one regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowPrior {
    pub sigma2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Prior mean of d_i².
    pub mean_d2: f64,
    pub gamma: f64,
    /// Relevance weights for neighbors 1..=m.
    pub q: Vec<f64>,
    pub smoothness: Smoothness,
}

impl RowPrior {
    /// Active neighbor count.
    pub fn m(&self) -> usize {
        self.q.len()
    }
}

/// Prior for the regression at ordered position `i` (0-based) with length scale `ell`.
///
/// The active neighbor count is clipped to the `i` available predecessors.
pub fn row_prior(hyper: &Hyper, ell: f64, i: usize) -> Result<RowPrior> {
    hyper.validate()?;
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(Error::invalid(format!("length scale must be positive, got {ell}")));
    }
    Ok(row_prior_unchecked(hyper, ell, i))
}

pub(crate) fn row_prior_unchecked(hyper: &Hyper, ell: f64, i: usize) -> RowPrior {
    let t = &hyper.theta;
    let ln_ell = ell.ln();
    let sigma2 = if hyper.linear_only || t.is_linear() {
        0.0
    } else {
        (t.sigma1 + t.sigma2 * ln_ell).exp()
    };
    let inv_g2 = 1.0 / (hyper.g * hyper.g);
    let mean_d2 = (t.d1 + t.d2 * ln_ell).exp();
    let m = hyper.active_neighbors().min(i);
    RowPrior {
        sigma2,
        alpha: 2.0 + inv_g2,
        beta: mean_d2 * (1.0 + inv_g2),
        mean_d2,
        gamma: t.gamma.exp(),
        q: (1..=m).map(|k| (t.q * k as f64).exp()).collect(),
        smoothness: hyper.smoothness,
    }
}

/// Unnormalized covariance `C(u, u') = uᵀu' + σ² ρ(‖u − u'‖ / γ)` with
/// `u = diag(q) x`. Rows of `x` and `x2` are inputs; with no active
/// neighbors the covariance is identically zero.
pub fn covariance_eval(prior: &RowPrior, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = prior.m();
    if x.ncols() != m || x2.ncols() != m {
        return Err(Error::invalid(format!(
            "kernel expects {m} neighbor columns, got {} and {}",
            x.ncols(),
            x2.ncols()
        )));
    }
    let (a, b) = (x.nrows(), x2.nrows());
    if m == 0 {
        return Ok(DMatrix::zeros(a, b));
    }
    let u = scale_columns(x, &prior.q);
    let u2 = scale_columns(x2, &prior.q);
    let mut c = &u * u2.transpose();
    if prior.sigma2 > 0.0 {
        let inv_gamma = 1.0 / prior.gamma;
        for j in 0..b {
            for i in 0..a {
                let mut d2 = 0.0;
                for k in 0..m {
                    let diff = u[(i, k)] - u2[(j, k)];
                    d2 += diff * diff;
                }
                c[(i, j)] += prior.sigma2 * prior.smoothness.correlation(d2.sqrt() * inv_gamma);
            }
        }
    }
    Ok(c)
}

/// Symmetric training covariance `C(X, X)`. Squared distances come from the
/// Gram matrix, `‖u_a − u_b‖² = G_aa + G_bb − 2 G_ab`, and the lower triangle
/// is mirrored so the result is exactly symmetric.
pub(crate) fn covariance_sym(prior: &RowPrior, x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = prior.m();
    let n = x.nrows();
    debug_assert_eq!(x.ncols(), m);
    if m == 0 {
        return DMatrix::zeros(n, n);
    }
    let u = scale_columns(x, &prior.q);
    let mut c = &u * u.transpose();
    let sq: Vec<f64> = (0..n).map(|i| c[(i, i)]).collect();
    let s = c.as_mut_slice();
    let inv_gamma = 1.0 / prior.gamma;
    for j in 0..n {
        for i in j..n {
            let mut v = s[j * n + i];
            if prior.sigma2 > 0.0 {
                let d2 = (sq[i] + sq[j] - 2.0 * v).max(0.0);
                v += prior.sigma2 * prior.smoothness.correlation(d2.sqrt() * inv_gamma);
            }
            s[j * n + i] = v;
            s[i * n + j] = v;
        }
    }
    c
}

/// Cross covariances `C(x_j, x*)` against every training row plus the prior
/// variance `C(x*, x*)`, both unnormalized. Rows without neighbors have C ≡ 0.
pub(crate) fn covariance_against(prior: &RowPrior, train: &DMatrix<f64>, xstar: &[f64]) -> (DVector<f64>, f64) {
    let m = prior.m();
    let n = train.nrows();
    if m == 0 {
        return (DVector::zeros(n), 0.0);
    }
    let us: Vec<f64> = xstar.iter().zip(&prior.q).map(|(x, q)| x * q).collect();
    let self_lin: f64 = us.iter().map(|u| u * u).sum();
    let mut lin = DVector::zeros(n);
    let mut d2 = DVector::<f64>::zeros(n);
    for (k, (col, usk)) in train.column_iter().zip(&us).enumerate() {
        let qk = prior.q[k];
        for j in 0..n {
            let u = col[j] * qk;
            lin[j] += u * usk;
            let diff = u - usk;
            d2[j] += diff * diff;
        }
    }
    if prior.sigma2 > 0.0 {
        let inv_gamma = 1.0 / prior.gamma;
        for j in 0..n {
            lin[j] += prior.sigma2 * prior.smoothness.correlation(d2[j].sqrt() * inv_gamma);
        }
    }
    (lin, self_lin + prior.sigma2)
}

/// Row kernel `K = C / E(d²)`.
pub fn kernel_eval(prior: &RowPrior, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(covariance_eval(prior, x, x2)? / prior.mean_d2)
}

fn scale_columns(x: &DMatrix<f64>, q: &[f64]) -> DMatrix<f64> {
    let mut u = x.clone();
    for (k, mut col) in u.column_iter_mut().enumerate() {
        col *= q[k];
    }
    u
}
