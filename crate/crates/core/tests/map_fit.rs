mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use tmap::fit::{fit_rows, prior_for_row, row_log_marginals, take_op_count};
use tmap::special::ln_gamma;
use tmap::{
    fit_map, fit_row, integrated_loglik, kernel_eval, maximin_order, row_prior, FitConfig, Hyper, OrderConfig,
    Ordering, RowPrior, Smoothness,
};

fn prior(sigma2: f64, q: Vec<f64>, mean_d2: f64) -> RowPrior {
    RowPrior { sigma2, alpha: 2.0625, beta: mean_d2 * 1.0625, mean_d2, gamma: 0.8, q, smoothness: Smoothness::ThreeHalves }
}

fn ordered(y: &DMatrix<f64>, ord: &Ordering) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), y.ncols(), |r, i| y[(r, ord.perm[i])])
}

/// log t_{2α}(y | 0, (β/α) G), evaluated with dense determinant and inverse.
fn mvt_logpdf(y: &DVector<f64>, g: &DMatrix<f64>, alpha: f64, beta: f64) -> f64 {
    let n = y.len() as f64;
    let nu = 2.0 * alpha;
    let sigma = g * (beta / alpha);
    let quad = (y.transpose() * sigma.clone().try_inverse().unwrap() * y)[(0, 0)];
    ln_gamma(0.5 * (nu + n)) - ln_gamma(0.5 * nu) - 0.5 * n * (nu * std::f64::consts::PI).ln()
        - 0.5 * sigma.determinant().ln()
        - 0.5 * (nu + n) * (1.0 + quad / nu).ln()
}

#[test]
fn first_row_with_identity_g() {
    let p = prior(0.0, vec![], 0.5);
    let y = DVector::from_element(4, 1.0);
    let row = fit_row(&y, &DMatrix::zeros(4, 0), &p).unwrap();
    assert_eq!(row.alpha_tilde, 4.0625);
    assert!((row.beta_tilde - (p.beta + 2.0)).abs() < 1e-15);
    assert_eq!(row.chol_g, DMatrix::identity(4, 4));
}

#[test]
fn shape_update_adds_half_n() {
    let p = prior(0.3, vec![0.7], 1.0);
    let mut r = rng(1);
    let x = DMatrix::from_fn(10, 1, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(10, |_, _| r.sample::<f64, _>(StandardNormal));
    assert_eq!(fit_row(&y, &x, &p).unwrap().alpha_tilde, 7.0625);
}

#[test]
fn beta_tilde_matches_dense_inverse() {
    let p = prior(0.6, vec![0.8, 0.5], 0.7);
    let x = DMatrix::from_row_slice(3, 2, &[0.3, -1.0, 1.2, 0.4, -0.5, 0.9]);
    let y = DVector::from_vec(vec![0.7, -0.2, 1.5]);
    let row = fit_row(&y, &x, &p).unwrap();
    let g = kernel_eval(&p, &x, &x).unwrap() + DMatrix::identity(3, 3);
    let quad = (y.transpose() * g.try_inverse().unwrap() * &y)[(0, 0)];
    assert!((row.beta_tilde - (p.beta + 0.5 * quad)).abs() < 1e-13);
    assert!((row.d_hat2 - row.beta_tilde / row.alpha_tilde).abs() < 1e-16);
}

#[test]
fn integrated_loglik_equals_multivariate_t_product() {
    let mut r = rng(2);
    let locs = random_locs(5, &mut r);
    let y = gp_samples(&locs, 3, 0.3, &mut r);
    let ord = maximin_order(&locs, &OrderConfig::default()).unwrap();
    let yo = ordered(&y, &ord);
    for th in [[0.1, 0.5, -0.3, 0.8, 0.2, -0.4], [-1.0, 1.5, 0.2, 0.0, -0.5, -1.2]] {
        let hyper = Hyper::new(theta(th));
        let mut oracle = 0.0;
        for i in 0..5 {
            let p = prior_for_row(&hyper, &ord, i);
            let x = DMatrix::from_fn(3, p.m(), |rr, k| yo[(rr, ord.neighbors[i][k])]);
            let g = kernel_eval(&p, &x, &x).unwrap() + DMatrix::identity(3, 3);
            oracle += mvt_logpdf(&yo.column(i).into(), &g, p.alpha, p.beta);
        }
        let ll = integrated_loglik(&yo, &ord, &hyper).unwrap();
        assert!(((ll - oracle) / oracle).abs() < 1e-10, "{ll} vs {oracle}");
    }
}

#[test]
fn single_variable_is_univariate_t_marginal() {
    let ord = Ordering { perm: vec![0], ell: vec![1.0], neighbors: vec![vec![]] };
    let y = DMatrix::from_column_slice(4, 1, &[0.3, -1.1, 0.8, 2.0]);
    let hyper = Hyper::new(theta([0.0, 1.0, 0.4, 1.0, 0.0, -0.7]));
    let p = row_prior(&hyper, 1.0, 0).unwrap();
    let oracle = mvt_logpdf(&y.column(0).into(), &DMatrix::identity(4, 4), p.alpha, p.beta);
    assert!((integrated_loglik(&y, &ord, &hyper).unwrap() - oracle).abs() < 1e-12);
}

/// ∫∫ ∏_j N(y_j | b x_j, d²) N(b | 0, d² q² / E d²) IG(d² | α, β) db dd² by Simpson's rule,
/// with `x = None` meaning no regression term.
fn quadrature_row(y: &[f64], x: Option<&[f64]>, p: &RowPrior) -> f64 {
    let (s_lo, s_hi, ns) = (-12.0, 25.0, 4000);
    let (u_lo, u_hi, nu) = (-12.0, 12.0, if x.is_some() { 1600 } else { 2 });
    let hs = (s_hi - s_lo) / ns as f64;
    let hu = (u_hi - u_lo) / nu as f64;
    let ws = simpson_weights(ns, hs);
    let wu = simpson_weights(nu, hu);
    let log_ig = |d2: f64| p.alpha * p.beta.ln() - ln_gamma(p.alpha) - (p.alpha + 1.0) * d2.ln() - p.beta / d2;
    let mut total = 0.0;
    for (a, wa) in ws.iter().enumerate() {
        let s = s_lo + a as f64 * hs;
        let d2 = s.exp();
        let base = log_ig(d2) + s;
        for (b, wb) in wu.iter().enumerate() {
            let (coef, lw) = match x {
                Some(_) => {
                    let u = u_lo + b as f64 * hu;
                    (u * d2.sqrt() * p.q[0] / p.mean_d2.sqrt(), -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln())
                }
                None => (0.0, -(u_hi - u_lo).ln()),
            };
            let mut ll = 0.0;
            for (j, yj) in y.iter().enumerate() {
                let mean = x.map_or(0.0, |x| coef * x[j]);
                ll += -0.5 * ((2.0 * std::f64::consts::PI * d2).ln() + (yj - mean).powi(2) / d2);
            }
            total += wa * wb * (base + lw + ll).exp();
        }
    }
    total.ln()
}

#[test]
fn two_variable_loglik_matches_quadrature() {
    let ord = Ordering { perm: vec![0, 1], ell: vec![1.2, 0.6], neighbors: vec![vec![], vec![0]] };
    let y = DMatrix::from_row_slice(2, 2, &[0.4, 0.9, -1.3, -0.6]);
    let mut hyper = Hyper::new(theta([0.0, 1.0, -0.2, 0.7, 0.0, -0.5]));
    hyper.linear_only = true;
    let ll = integrated_loglik(&y, &ord, &hyper).unwrap();
    let p0 = prior_for_row(&hyper, &ord, 0);
    let p1 = prior_for_row(&hyper, &ord, 1);
    let col0 = [y[(0, 0)], y[(1, 0)]];
    let col1 = [y[(0, 1)], y[(1, 1)]];
    let oracle = quadrature_row(&col0, None, &p0) + quadrature_row(&col1, Some(&col0), &p1);
    assert!((ll - oracle).abs() < 1e-6, "{ll} vs {oracle}");
}

#[test]
fn linear_only_fit_has_no_nonlinear_variance() {
    let mut r = rng(3);
    let locs = random_locs(30, &mut r);
    let y = gp_samples(&locs, 15, 0.3, &mut r);
    let cfg = FitConfig { linear_only: true, restarts: 1, ..Default::default() };
    let map = fit_map(&y, &locs, &cfg).unwrap();
    assert!(map.rows().iter().all(|row| row.prior.sigma2 == 0.0));
    assert!(map.hyper().theta.is_linear());
}

/// Draws n replicates from the linear prior model at `hyper`.
fn simulate_linear_model(ord: &Ordering, hyper: &Hyper, n: usize, r: &mut impl Rng) -> DMatrix<f64> {
    let n_vars = ord.len();
    let mut yo = DMatrix::zeros(n, n_vars);
    for i in 0..n_vars {
        let p = prior_for_row(hyper, ord, i);
        let d2 = 1.0 / Gamma::new(p.alpha, 1.0 / p.beta).unwrap().sample(r);
        let b: Vec<f64> = p
            .q
            .iter()
            .map(|q| Normal::new(0.0, (d2 / p.mean_d2).sqrt() * q).unwrap().sample(r))
            .collect();
        for j in 0..n {
            let f: f64 = b.iter().enumerate().map(|(k, bk)| bk * yo[(j, ord.neighbors[i][k])]).sum();
            yo[(j, i)] = f + d2.sqrt() * r.sample::<f64, _>(StandardNormal);
        }
    }
    let mut y = DMatrix::zeros(n, n_vars);
    for (i, &p) in ord.perm.iter().enumerate() {
        y.column_mut(p).copy_from(&yo.column(i));
    }
    y
}

#[test]
fn optimum_beats_grid_around_generator() {
    let mut r = rng(4);
    let locs = random_locs(40, &mut r);
    let cfg = FitConfig { linear_only: true, standardize: false, m_max: 10, ..Default::default() };
    let ord = maximin_order(&locs, &OrderConfig { m_max: 10, ..Default::default() }).unwrap();
    let truth = cfg.hyper(theta([f64::NEG_INFINITY, 1.0, -0.5, 0.8, 0.0, -0.6]));
    let y = simulate_linear_model(&ord, &truth, 40, &mut r);
    let map = fit_map(&y, &locs, &cfg).unwrap();
    let yo = ordered(&y, &ord);
    for dd in [-0.25, 0.0, 0.25] {
        for dq in [-0.25, 0.0, 0.25] {
            let mut h = truth.clone();
            h.theta.d1 += dd;
            h.theta.q = -((-h.theta.q).ln() + dq).exp();
            let ll = integrated_loglik(&yo, &ord, &h).unwrap();
            assert!(map.loglik() >= ll, "grid point ({dd}, {dq}): {ll} > {}", map.loglik());
        }
    }
}

#[test]
fn rows_are_independent_of_thread_count() {
    let mut r = rng(5);
    let locs = random_locs(60, &mut r);
    let y = gp_samples(&locs, 20, 0.3, &mut r);
    let ord = maximin_order(&locs, &OrderConfig::default()).unwrap();
    let yo = ordered(&y, &ord);
    let hyper = Hyper::new(theta([-1.0, 0.5, 0.0, 1.0, 0.0, -0.5]));
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            (fit_rows(&yo, &ord, &hyper).unwrap(), integrated_loglik(&yo, &ord, &hyper).unwrap())
        })
    };
    let (a, lla) = run(1);
    let (b, llb) = run(3);
    assert_eq!(a, b);
    assert_eq!(lla.to_bits(), llb.to_bits());
}

#[test]
fn loglik_is_sum_of_row_terms() {
    let mut r = rng(6);
    let locs = random_locs(40, &mut r);
    let y = gp_samples(&locs, 12, 0.3, &mut r);
    let ord = maximin_order(&locs, &OrderConfig::default()).unwrap();
    let yo = ordered(&y, &ord);
    for linear in [false, true] {
        let mut hyper = Hyper::new(theta([-0.5, 0.5, 0.0, 1.0, 0.0, -0.4]));
        hyper.linear_only = linear;
        let terms = row_log_marginals(&yo, &ord, &hyper).unwrap();
        let total: f64 = terms.iter().sum();
        assert_eq!(total, integrated_loglik(&yo, &ord, &hyper).unwrap());
        // The stored factorization path agrees with the likelihood-only path.
        let rows = fit_rows(&yo, &ord, &hyper).unwrap();
        for (t, row) in terms.iter().zip(&rows) {
            assert!((t - row.log_marginal()).abs() < 1e-9 * t.abs().max(1.0));
        }
    }
}

#[test]
fn row_work_is_cubic_in_n_plus_quadratic_times_m() {
    let mut r = rng(7);
    for &(n, m) in &[(5usize, 1usize), (20, 3), (60, 10), (120, 30)] {
        let x = DMatrix::from_fn(n, m, |_, _| r.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let p = prior(0.5, (1..=m).map(|k| (-0.2 * k as f64).exp()).collect(), 1.0);
        take_op_count();
        fit_row(&y, &x, &p).unwrap();
        let ops = take_op_count();
        let bound = 4 * ((n * n * n) + n * n * m) as u64;
        if cfg!(debug_assertions) {
            assert!(ops > 0 && ops <= bound, "n={n} m={m}: {ops} > {bound}");
        }
    }
}

#[test]
fn row_errors_name_the_row() {
    let ord = Ordering { perm: vec![0, 1], ell: vec![1.0, 0.5], neighbors: vec![vec![], vec![0]] };
    let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, f64::NAN]);
    let hyper = Hyper::new(theta([0.0, 1.0, 0.0, 1.0, 0.0, -0.7]));
    let err = fit_rows(&y, &ord, &hyper).unwrap_err();
    assert!(err.to_string().contains("row 1"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fitted_row_invariants(
        vals in proptest::collection::vec(-4.0f64..4.0, 40),
        s2 in 0.0f64..3.0, md in 0.05f64..5.0, tq in 0.1f64..1.5,
        n in 2usize..10, m in 0usize..4,
    ) {
        let q = (1..=m).map(|k| (-tq * k as f64).exp()).collect();
        let p = prior(s2, q, md);
        let x = DMatrix::from_fn(n, m, |i, k| vals[(i * 4 + k) % 40]);
        let y = DVector::from_fn(n, |i, _| vals[(i * 7 + 3) % 40]);
        let row = fit_row(&y, &x, &p).unwrap();
        prop_assert!(row.beta_tilde >= p.beta);
        prop_assert!(row.alpha_tilde > n as f64 / 2.0 + 2.0);
        prop_assert!(row.chol_g.diagonal().iter().all(|d| *d > 0.0));
    }
}
