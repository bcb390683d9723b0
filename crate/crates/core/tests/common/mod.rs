#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tmap::{fit_with_hyper, maximin_order, FittedMap, Hyper, Locations, OrderConfig, Theta};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid(k: usize) -> Locations {
    let step = 1.0 / (k - 1) as f64;
    let coords = DMatrix::from_fn(k * k, 2, |r, c| if c == 0 { (r % k) as f64 * step } else { (r / k) as f64 * step });
    Locations::euclidean(coords).unwrap()
}

pub fn random_locs(n: usize, rng: &mut impl Rng) -> Locations {
    let coords = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
    Locations::euclidean(coords).unwrap()
}

/// `count` draws from a zero-mean GP with covariance `exp(-h / range)`.
pub fn gp_samples(locs: &Locations, count: usize, range: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let n = locs.len();
    let cov = DMatrix::from_fn(n, n, |a, b| (-locs.dist(a, b) / range).exp());
    let l = cov.cholesky().unwrap().unpack();
    let z = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    (l * z).transpose()
}

pub fn theta(a: [f64; 6]) -> Theta {
    Theta::from_array(a)
}

/// Map with fixed hyperparameters fitted to GP data on random locations.
pub fn small_map(n_vars: usize, n: usize, theta: [f64; 6], linear: bool, seed: u64) -> (FittedMap, DMatrix<f64>) {
    let mut r = rng(seed);
    let locs = random_locs(n_vars, &mut r);
    let y = gp_samples(&locs, n, 0.3, &mut r);
    let mut hyper = Hyper::new(Theta::from_array(theta));
    hyper.linear_only = linear;
    hyper.m_max = 10;
    let ordering = maximin_order(&locs, &OrderConfig { m_max: 10, ..Default::default() }).unwrap();
    (fit_with_hyper(&y, ordering, &hyper, true, false).unwrap(), y)
}

pub fn row(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n % 2 == 0);
    (0..=n)
        .map(|k| {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}
