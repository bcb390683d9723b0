//! Simulation scenarios with known ground-truth maps.
//!
//! Every scenario starts from the ordered-conditional regressions of a
//! zero-mean Gaussian process with covariance `exp(-h / 0.3)`, truncated to the
//! 30 nearest previously ordered neighbors. The nonlinear variants add a sine
//! of the two leading regression terms, and the bimodal variant shifts the
//! noise by ±3.5 d_i.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordering::{maximin_order, Locations, OrderConfig, Ordering};
use crate::special::norm_logpdf_scaled;

pub const SCENARIO_RANGE: f64 = 0.3;
pub const SCENARIO_NEIGHBORS: usize = 30;
pub const SINE_AMPLITUDE: f64 = 2.0;
pub const SINE_FREQUENCY: f64 = 4.0;
pub const BIMODAL_OFFSET: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    LR900,
    NR900,
    NI3600,
    NR900B,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::LR900, Scenario::NR900, Scenario::NI3600, Scenario::NR900B];

    pub fn kind(self) -> TruthKind {
        match self {
            Scenario::LR900 => TruthKind::Linear,
            Scenario::NR900 | Scenario::NI3600 => TruthKind::Sine,
            Scenario::NR900B => TruthKind::SineBimodal,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::LR900 => "LR900",
            Scenario::NR900 => "NR900",
            Scenario::NI3600 => "NI3600",
            Scenario::NR900B => "NR900B",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LR900" => Ok(Scenario::LR900),
            "NR900" => Ok(Scenario::NR900),
            "NI3600" => Ok(Scenario::NI3600),
            "NR900B" => Ok(Scenario::NR900B),
            _ => Err(Error::invalid(format!("unknown scenario {s:?}; expected LR900, NR900, NI3600 or NR900B"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Linear,
    Sine,
    SineBimodal,
}

/// A ground-truth triangular map in ordered coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueMap {
    pub ordering: Ordering,
    /// `coef[i][k]` multiplies ordered variable `ordering.neighbors[i][k]`.
    pub coef: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub kind: TruthKind,
}

impl TrueMap {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    fn linear_part(&self, i: usize, yo: &[f64]) -> f64 {
        self.coef[i].iter().zip(&self.ordering.neighbors[i]).map(|(b, &j)| b * yo[j]).sum()
    }

    /// Conditional location f_i of ordered variable `i` given the ordered prefix.
    pub fn mean(&self, i: usize, yo: &[f64]) -> f64 {
        let lin = self.linear_part(i, yo);
        if self.kind == TruthKind::Linear {
            return lin;
        }
        let arg: f64 = self.coef[i].iter().zip(&self.ordering.neighbors[i]).take(2).map(|(b, &j)| b * yo[j]).sum();
        lin + SINE_AMPLITUDE * (SINE_FREQUENCY * arg).sin()
    }

    /// Log density of the noise term for row `i`.
    fn noise_logpdf(&self, i: usize, r: f64) -> f64 {
        let d = self.d[i];
        match self.kind {
            TruthKind::SineBimodal => {
                let a = norm_logpdf_scaled(r, BIMODAL_OFFSET * d, d * d);
                let b = norm_logpdf_scaled(r, -BIMODAL_OFFSET * d, d * d);
                let hi = a.max(b);
                hi + (0.5 * ((a - hi).exp() + (b - hi).exp())).ln()
            }
            _ => norm_logpdf_scaled(r, 0.0, d * d),
        }
    }
}

/// Ordered-conditional regressions of the GP with covariance `exp(-h / range)`,
/// truncated to `m_max` nearest ordered neighbors.
pub fn gaussian_from_locations(locs: &Locations, range: f64, m_max: usize, kind: TruthKind) -> Result<TrueMap> {
    if !(range > 0.0) {
        return Err(Error::invalid("range must be positive"));
    }
    let ordering = maximin_order(locs, &OrderConfig { m_max, ..Default::default() })?;
    let cov = |a: usize, b: usize| (-locs.dist(ordering.perm[a], ordering.perm[b]) / range).exp();
    let rows: Vec<(Vec<f64>, f64)> = (0..ordering.len())
        .into_par_iter()
        .map(|i| {
            let nb = &ordering.neighbors[i];
            if nb.is_empty() {
                return Ok((Vec::new(), 1.0));
            }
            let k_nn = DMatrix::from_fn(nb.len(), nb.len(), |a, b| cov(nb[a], nb[b]));
            let k_in = DVector::from_fn(nb.len(), |a, _| cov(i, nb[a]));
            let chol = k_nn
                .cholesky()
                .ok_or_else(|| Error::numerical(format!("neighbor covariance of row {i} is not positive definite")))?;
            let b = chol.solve(&k_in);
            let d2 = 1.0 - k_in.dot(&b);
            if !(d2 > 0.0) {
                return Err(Error::numerical(format!("nonpositive conditional variance at row {i}")));
            }
            Ok((b.iter().copied().collect(), d2.sqrt()))
        })
        .collect::<Result<_>>()?;
    let (coef, d) = rows.into_iter().unzip();
    Ok(TrueMap { ordering, coef, d, kind })
}

/// 30×30 regular grid on the unit square, row-major in x.
pub fn unit_grid(k: usize) -> Locations {
    let step = 1.0 / (k - 1) as f64;
    let coords = DMatrix::from_fn(k * k, 2, |r, c| if c == 0 { (r % k) as f64 * step } else { (r / k) as f64 * step });
    Locations::euclidean(coords).expect("grid coordinates are valid")
}

/// Builds a scenario's locations and truth. Only NI3600 consumes randomness.
pub fn make_scenario<R: Rng + ?Sized>(name: Scenario, rng: &mut R) -> Result<(TrueMap, Locations)> {
    let locs = match name {
        Scenario::NI3600 => {
            let coords = DMatrix::from_fn(3600, 2, |_, _| rng.random::<f64>());
            Locations::euclidean(coords)?
        }
        _ => unit_grid(30),
    };
    let truth = gaussian_from_locations(&locs, SCENARIO_RANGE, SCENARIO_NEIGHBORS, name.kind())?;
    Ok((truth, locs))
}

/// Ancestral draws from the truth; rows are fields in original coordinates.
pub fn scenario_sample<R: Rng + ?Sized>(truth: &TrueMap, rng: &mut R, count: usize) -> DMatrix<f64> {
    let n_vars = truth.len();
    let mut out = DMatrix::zeros(count, n_vars);
    let mut yo = vec![0.0; n_vars];
    for r in 0..count {
        for i in 0..n_vars {
            let mut eps = truth.d[i] * rng.sample::<f64, _>(StandardNormal);
            if truth.kind == TruthKind::SineBimodal {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                eps += sign * BIMODAL_OFFSET * truth.d[i];
            }
            yo[i] = truth.mean(i, &yo) + eps;
        }
        for (i, &p) in truth.ordering.perm.iter().enumerate() {
            out[(r, p)] = yo[i];
        }
    }
    out
}

/// Exact log density of a field in original coordinates.
pub fn true_logpdf(truth: &TrueMap, y: &[f64]) -> Result<f64> {
    if y.len() != truth.len() {
        return Err(Error::invalid(format!("field has length {}, truth expects {}", y.len(), truth.len())));
    }
    let yo = truth.ordering.to_ordered(y);
    let terms: Vec<f64> = (0..truth.len()).map(|i| truth.noise_logpdf(i, yo[i] - truth.mean(i, &yo))).collect();
    Ok(terms.iter().sum())
}
