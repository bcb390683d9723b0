//! Evaluating a fitted map: forward transform, inverse, density and sampling.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FittedMap, FittedRow};
use crate::kernel::covariance_against;
use crate::special::{norm_logpdf_scaled, normal_to_t, t_logpdf_scaled, t_to_normal};

/// Map coefficients in ordered coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub z: Vec<f64>,
    /// Ordered indices whose coefficient hit the ±8.2 clamp.
    pub clamped: Vec<usize>,
}

/// Posterior mean `f̂` and scaled variance `v` of the regression at covariates `xstar`.
pub fn gp_predict(row: &FittedRow, xstar: &[f64]) -> Result<(f64, f64)> {
    if xstar.len() != row.prior.m() {
        return Err(Error::invalid(format!("expected {} covariates, got {}", row.prior.m(), xstar.len())));
    }
    Ok(predict(row, xstar))
}

fn predict(row: &FittedRow, xstar: &[f64]) -> (f64, f64) {
    if row.prior.m() == 0 {
        return (0.0, 0.0);
    }
    let (mut k, k0) = covariance_against(&row.prior, &row.train_x, xstar);
    k /= row.prior.mean_d2;
    let f = k.dot(&row.solve_y);
    let w = row
        .chol_g
        .solve_lower_triangular(&k)
        .expect("Cholesky factor has a positive diagonal");
    let v = (k0 / row.prior.mean_d2 - w.norm_squared()).max(0.0);
    (f, v)
}

fn covariates(map: &FittedMap, yo: &[f64], i: usize) -> Vec<f64> {
    let m = map.rows[i].prior.m();
    map.ordering.neighbors[i][..m].iter().map(|&j| yo[j]).collect()
}

fn check_field(map: &FittedMap, y: &[f64]) -> Result<()> {
    if y.len() != map.n_vars() {
        return Err(Error::invalid(format!("field has length {}, map expects {}", y.len(), map.n_vars())));
    }
    if let Some(j) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("field entry {j} is not finite")));
    }
    Ok(())
}

/// Standardized field in ordered coordinates.
fn to_ordered(map: &FittedMap, y: &[f64]) -> Vec<f64> {
    map.ordering.to_ordered(&map.standardization.apply(y))
}

/// Per-row predictive location, spread and dof for an ordered field.
fn row_terms(map: &FittedMap, yo: &[f64], i: usize) -> (f64, f64) {
    let row = &map.rows[i];
    let (f, v) = predict(row, &covariates(map, yo, i));
    let scale2 = if map.simplified { row.d_hat2 } else { row.d_hat2 * (v + 1.0) };
    (f, scale2)
}

/// Map coefficients of a field given in original coordinates.
pub fn forward(map: &FittedMap, y: &[f64]) -> Result<Coefficients> {
    check_field(map, y)?;
    let yo = to_ordered(map, y);
    let out: Vec<(f64, bool)> = (0..map.n_vars())
        .into_par_iter()
        .map(|i| {
            let (f, scale2) = row_terms(map, &yo, i);
            let s = (yo[i] - f) / scale2.sqrt();
            if map.simplified {
                (s, false)
            } else {
                t_to_normal(s, 2.0 * map.rows[i].alpha_tilde)
            }
        })
        .collect();
    let clamped = out.iter().enumerate().filter(|(_, (_, c))| *c).map(|(i, _)| i).collect();
    Ok(Coefficients { z: out.into_iter().map(|(z, _)| z).collect(), clamped })
}

/// Recursively inverts the map; returns the field in original coordinates.
pub fn inverse(map: &FittedMap, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != map.n_vars() {
        return Err(Error::invalid(format!("coefficients have length {}, map expects {}", z.len(), map.n_vars())));
    }
    if let Some(j) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("coefficient {j} is not finite")));
    }
    let mut yo = vec![0.0; z.len()];
    for i in 0..z.len() {
        let (f, scale2) = row_terms(map, &yo, i);
        let s = if map.simplified { z[i] } else { normal_to_t(z[i], 2.0 * map.rows[i].alpha_tilde) };
        yo[i] = f + s * scale2.sqrt();
    }
    Ok(map.standardization.invert(&map.ordering.to_original(&yo)))
}

/// Posterior predictive log density of a field in original (raw-data) units.
pub fn logpdf(map: &FittedMap, y: &[f64]) -> Result<f64> {
    check_field(map, y)?;
    let yo = to_ordered(map, y);
    let terms: Vec<f64> = (0..map.n_vars())
        .into_par_iter()
        .map(|i| {
            let (f, scale2) = row_terms(map, &yo, i);
            if map.simplified {
                norm_logpdf_scaled(yo[i], f, scale2)
            } else {
                t_logpdf_scaled(yo[i], 2.0 * map.rows[i].alpha_tilde, f, scale2)
            }
        })
        .collect();
    Ok(terms.iter().sum::<f64>() + map.standardization.log_jacobian())
}

/// Log densities of each row of a count×N matrix of fields.
pub fn logpdf_batch(map: &FittedMap, fields: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..fields.nrows())
        .into_par_iter()
        .map(|r| logpdf(map, &row_vec(fields, r)))
        .collect()
}

/// Coefficients of each row of a count×N matrix of fields.
pub fn forward_batch(map: &FittedMap, fields: &DMatrix<f64>) -> Result<Vec<Coefficients>> {
    (0..fields.nrows())
        .into_par_iter()
        .map(|r| forward(map, &row_vec(fields, r)))
        .collect()
}

pub(crate) fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

/// Draws `count` fields by inverting standard normal coefficients.
pub fn sample<R: Rng + ?Sized>(map: &FittedMap, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
    let n_vars = map.n_vars();
    let zs: Vec<Vec<f64>> = (0..count).map(|_| (0..n_vars).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let fields: Vec<Vec<f64>> = zs.par_iter().map(|z| inverse(map, z)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(count, n_vars, |r, j| fields[r][j]))
}

/// Keeps the first `k` coefficients of `y_ref` and redraws the rest.
pub fn conditional_sample<R: Rng + ?Sized>(map: &FittedMap, y_ref: &[f64], k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if k > map.n_vars() {
        return Err(Error::invalid(format!("k = {k} exceeds N = {}", map.n_vars())));
    }
    let mut z = if k > 0 { forward(map, y_ref)?.z } else { vec![0.0; map.n_vars()] };
    for zi in z.iter_mut().skip(k) {
        *zi = rng.sample(StandardNormal);
    }
    inverse(map, &z)
}
