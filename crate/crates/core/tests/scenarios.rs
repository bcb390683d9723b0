mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tmap::scenarios::{
    gaussian_from_locations, make_scenario, scenario_sample, true_logpdf, Scenario, TruthKind, BIMODAL_OFFSET,
};
use tmap::special::LN_2PI;

fn exp_cov(locs: &tmap::Locations, range: f64) -> DMatrix<f64> {
    let n = locs.len();
    DMatrix::from_fn(n, n, |a, b| (-locs.dist(a, b) / range).exp())
}

#[test]
fn first_row_has_unit_variance_and_no_regression() {
    let (truth, locs) = make_scenario(Scenario::LR900, &mut rng(0)).unwrap();
    assert_eq!(locs.len(), 900);
    assert!(truth.coef[0].is_empty());
    assert_eq!(truth.d[0], 1.0);
    assert!(truth.coef.iter().all(|c| c.len() <= 30));
    assert!(truth.d.iter().all(|d| *d > 0.0));
}

#[test]
fn truncated_rows_match_dense_conditionals() {
    let (truth, locs) = make_scenario(Scenario::LR900, &mut rng(0)).unwrap();
    let ord = &truth.ordering;
    let cov = exp_cov(&locs, 0.3);
    for i in 1..40 {
        // Condition on every predecessor.
        let prefix: Vec<usize> = (0..i).map(|j| ord.perm[j]).collect();
        let k_pp = DMatrix::from_fn(i, i, |a, b| cov[(prefix[a], prefix[b])]);
        let k_ip = DVector::from_fn(i, |a, _| cov[(ord.perm[i], prefix[a])]);
        let b_full = k_pp.clone().cholesky().unwrap().solve(&k_ip);
        let d2_full = 1.0 - k_ip.dot(&b_full);
        let d2 = truth.d[i] * truth.d[i];
        if i <= 30 {
            for (k, &j) in ord.neighbors[i].iter().enumerate() {
                assert!((truth.coef[i][k] - b_full[j]).abs() < 1e-8, "row {i}");
            }
            assert!((d2 - d2_full).abs() < 1e-10);
        } else {
            // Dropping predecessors can only increase the conditional variance, and only slightly.
            assert!(d2 >= d2_full - 1e-12 && d2 <= d2_full * 1.05, "row {i}: {d2} vs {d2_full}");
        }
    }
}

#[test]
fn bimodal_offsets_are_symmetric() {
    let (truth, _) = make_scenario(Scenario::NR900B, &mut rng(0)).unwrap();
    assert_eq!(truth.kind, TruthKind::SineBimodal);
    let draws = scenario_sample(&truth, &mut rng(1), 4000);
    // Row 1 has no predecessors, so y = ±3.5 + N(0, 1).
    let first = truth.ordering.perm[0];
    let col = draws.column(first);
    let positive = col.iter().filter(|v| **v > 0.0).count() as f64 / 4000.0;
    assert!((positive - 0.5).abs() < 0.03);
    let abs_mean = col.iter().map(|v| v.abs()).sum::<f64>() / 4000.0;
    assert!((abs_mean - BIMODAL_OFFSET).abs() < 0.05);
}

#[test]
fn sample_covariance_matches_exponential_covariance() {
    let (truth, locs) = make_scenario(Scenario::LR900, &mut rng(0)).unwrap();
    let count = 10_000;
    let y = scenario_sample(&truth, &mut rng(2), count);
    let cov = exp_cov(&locs, 0.3);
    let mut r = rng(3);
    for _ in 0..20 {
        let (a, b) = (r.random_range(0..900), r.random_range(0..900));
        let prods: Vec<f64> = (0..count).map(|k| y[(k, a)] * y[(k, b)]).collect();
        let mean = prods.iter().sum::<f64>() / count as f64;
        let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        let se = (var / count as f64).sqrt();
        assert!((mean - cov[(a, b)]).abs() < 4.0 * se, "pair ({a}, {b}): {mean} vs {}", cov[(a, b)]);
    }
}

#[test]
fn sampling_is_seeded() {
    let (truth, _) = make_scenario(Scenario::NR900, &mut rng(0)).unwrap();
    assert_eq!(scenario_sample(&truth, &mut rng(4), 3), scenario_sample(&truth, &mut rng(4), 3));
    let (_, a) = make_scenario(Scenario::NI3600, &mut rng(5)).unwrap();
    let (_, b) = make_scenario(Scenario::NI3600, &mut rng(5)).unwrap();
    assert_eq!(a.coords(), b.coords());
}

/// Least-squares R² of `y` on the columns of `x` (with intercept).
fn r_squared(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    let beta = (design.transpose() * &design).cholesky().unwrap().solve(&(design.transpose() * y));
    let resid = y - &design * beta;
    let mean = y.mean();
    1.0 - resid.norm_squared() / y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
}

#[test]
fn nonlinear_scenario_has_sine_ridge() {
    let (truth, _) = make_scenario(Scenario::NR900, &mut rng(0)).unwrap();
    let count = 2000;
    let y = scenario_sample(&truth, &mut rng(6), count);
    let ord = &truth.ordering;
    let i = 79;
    let (c1, c2) = (ord.neighbors[i][0], ord.neighbors[i][1]);
    let (b1, b2) = (truth.coef[i][0], truth.coef[i][1]);
    let mut lin = DMatrix::zeros(count, 2);
    let mut sine = DMatrix::zeros(count, 1);
    let mut resid = DVector::zeros(count);
    for k in 0..count {
        let yo = ord.to_ordered(&row(&y, k));
        lin[(k, 0)] = yo[c1];
        lin[(k, 1)] = yo[c2];
        sine[(k, 0)] = (4.0 * (b1 * yo[c1] + b2 * yo[c2])).sin();
        let f_lin: f64 = truth.coef[i].iter().zip(&ord.neighbors[i]).map(|(b, &j)| b * yo[j]).sum();
        resid[k] = yo[i] - f_lin;
    }
    let (r2_sine, r2_lin) = (r_squared(&sine, &resid), r_squared(&lin, &resid));
    assert!(r2_sine > r2_lin, "sine {r2_sine} vs linear {r2_lin}");
}

#[test]
fn linear_truth_density_is_multivariate_normal() {
    let mut r = rng(7);
    let locs = random_locs(25, &mut r);
    let truth = gaussian_from_locations(&locs, 0.3, 24, TruthKind::Linear).unwrap();
    let cov = exp_cov(&locs, 0.3);
    let chol = cov.clone().cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let y = scenario_sample(&truth, &mut r, 5);
    for k in 0..5 {
        let v = DVector::from_vec(row(&y, k));
        let quad = v.dot(&chol.solve(&v));
        let dense = -0.5 * (25.0 * LN_2PI + logdet + quad);
        assert!((true_logpdf(&truth, &row(&y, k)).unwrap() - dense).abs() < 1e-8);
    }
}

#[test]
fn median_field_beats_perturbed_field() {
    let (truth, _) = make_scenario(Scenario::LR900, &mut rng(0)).unwrap();
    let zero = vec![0.0; 900];
    let mut shifted = zero.clone();
    shifted[truth.ordering.perm[0]] = 3.0;
    assert!(true_logpdf(&truth, &zero).unwrap() > true_logpdf(&truth, &shifted).unwrap());
}

#[test]
fn mean_negative_log_density_matches_entropy() {
    let (truth, _) = make_scenario(Scenario::LR900, &mut rng(0)).unwrap();
    let count = 2000;
    let y = scenario_sample(&truth, &mut rng(8), count);
    let vals: Vec<f64> = (0..count).map(|k| -true_logpdf(&truth, &row(&y, k)).unwrap()).collect();
    let mean = vals.iter().sum::<f64>() / count as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt();
    let entropy: f64 = truth.d.iter().map(|d| 0.5 * (LN_2PI + 1.0) + d.ln()).sum();
    assert!((mean - entropy).abs() < 3.0 * sd / (count as f64).sqrt(), "{mean} vs {entropy}");
}
