//! Maximin orderings, length scales and nearest-neighbor conditioning sets.
//!
//! Locations are embedded once at construction: planar and 3-D coordinates
//! are stored as points in R³ (zero padded), lon/lat pairs become points on
//! the unit sphere so that chordal distance is plain Euclidean distance, and
//! a precomputed distance matrix is used as-is.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Earth radius in km; only used to report chordal distances in physical units.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Euclidean,
    /// lon/lat in degrees, chordal distance on the unit sphere.
    Chordal,
    Precomputed,
}

#[derive(Debug, Clone)]
enum Repr {
    Points(Vec<[f64; 3]>),
    Matrix(DMatrix<f64>),
}

/// A set of N ≥ 2 locations together with the metric used to compare them.
#[derive(Debug, Clone)]
pub struct Locations {
    coords: DMatrix<f64>,
    metric: MetricKind,
    repr: Repr,
}

impl Locations {
    /// Planar (dim 2) or 3-D coordinates, one row per location.
    pub fn euclidean(coords: DMatrix<f64>) -> Result<Self> {
        let dim = coords.ncols();
        if !(2..=3).contains(&dim) {
            return Err(Error::invalid(format!("coordinate dimension must be 2 or 3, got {dim}")));
        }
        Self::check_common(&coords)?;
        let pts = coords
            .row_iter()
            .map(|r| {
                let mut p = [0.0; 3];
                for (k, v) in r.iter().enumerate() {
                    p[k] = *v;
                }
                p
            })
            .collect();
        Ok(Self { coords, metric: MetricKind::Euclidean, repr: Repr::Points(pts) })
    }

    /// Longitude/latitude pairs in degrees.
    pub fn chordal(lonlat: DMatrix<f64>) -> Result<Self> {
        if lonlat.ncols() != 2 {
            return Err(Error::invalid("chordal metric requires lon/lat pairs (dim 2)"));
        }
        Self::check_common(&lonlat)?;
        let mut pts = Vec::with_capacity(lonlat.nrows());
        for (i, r) in lonlat.row_iter().enumerate() {
            let (lon, lat) = (r[0], r[1]);
            if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                return Err(Error::data(format!("location {i}: lon/lat ({lon}, {lat}) out of range")));
            }
            let (lon, lat) = (lon.to_radians(), lat.to_radians());
            pts.push([lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]);
        }
        Ok(Self { coords: lonlat, metric: MetricKind::Chordal, repr: Repr::Points(pts) })
    }

    /// A symmetric N × N distance matrix with zero diagonal.
    pub fn precomputed(dist: DMatrix<f64>) -> Result<Self> {
        let n = dist.nrows();
        if dist.ncols() != n {
            return Err(Error::invalid("distance matrix must be square"));
        }
        if n < 2 {
            return Err(Error::invalid("need at least two locations"));
        }
        for i in 0..n {
            if dist[(i, i)] != 0.0 {
                return Err(Error::data(format!("distance matrix diagonal entry {i} is nonzero")));
            }
            for j in 0..i {
                let d = dist[(i, j)];
                if !d.is_finite() || d < 0.0 || d != dist[(j, i)] {
                    return Err(Error::data(format!(
                        "distance matrix entry ({i},{j}) is negative, nonfinite or asymmetric"
                    )));
                }
            }
        }
        Ok(Self {
            coords: DMatrix::zeros(n, 0),
            metric: MetricKind::Precomputed,
            repr: Repr::Matrix(dist),
        })
    }

    fn check_common(coords: &DMatrix<f64>) -> Result<()> {
        if coords.nrows() < 2 {
            return Err(Error::invalid("need at least two locations"));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "location {} has a nonfinite coordinate",
                i % coords.nrows()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            Repr::Points(p) => p.len(),
            Repr::Matrix(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    /// Input coordinates (N × dim); empty for precomputed distances.
    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    /// Distance between original indices `a` and `b` (unit sphere for chordal).
    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        match &self.repr {
            Repr::Points(p) => {
                let (x, y) = (&p[a], &p[b]);
                let d0 = x[0] - y[0];
                let d1 = x[1] - y[1];
                let d2 = x[2] - y[2];
                (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
            }
            Repr::Matrix(m) => m[(a, b)],
        }
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| (0..i).map(|j| self.dist(i, j)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    /// Full N × N distance matrix.
    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.dist(i, j))
    }

    /// Index of the location nearest the centroid, lowest index on ties.
    ///
    /// Without coordinates, the point minimizing the sum of squared distances
    /// to all others is used, which coincides with the centroid rule for
    /// Euclidean points.
    pub fn centroid_index(&self) -> usize {
        let n = self.len();
        let score: Vec<f64> = match &self.repr {
            Repr::Points(p) => {
                let mut c = [0.0; 3];
                for q in p {
                    for k in 0..3 {
                        c[k] += q[k];
                    }
                }
                for v in &mut c {
                    *v /= n as f64;
                }
                p.iter()
                    .map(|q| (0..3).map(|k| (q[k] - c[k]).powi(2)).sum::<f64>())
                    .collect()
            }
            Repr::Matrix(m) => (0..n)
                .map(|i| (0..n).map(|j| m[(i, j)] * m[(i, j)]).sum::<f64>())
                .collect(),
        };
        let mut best = 0;
        for (i, s) in score.iter().enumerate() {
            if *s < score[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FirstPoint {
    /// The location closest to the coordinate-wise centroid.
    #[default]
    Centroid,
    /// A user-chosen original index.
    Index(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderConfig {
    pub m_max: usize,
    pub first: FirstPoint,
}

impl Default for OrderConfig {
    fn default() -> Self {
        Self { m_max: 30, first: FirstPoint::Centroid }
    }
}

/// A maximin ordering with its length scales and conditioning sets.
///
/// `perm[i]` is the original index of the i-th ordered variable. `neighbors[i]`
/// holds ordered indices `< i`, nearest first. All indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub perm: Vec<usize>,
    pub ell: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

impl Ordering {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `inverse()[orig] = position of orig in the ordering`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    /// Reorders a field given in original coordinates.
    pub fn to_ordered(&self, y: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| y[p]).collect()
    }

    /// Inverse of [`Ordering::to_ordered`].
    pub fn to_original(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = y[i];
        }
        out
    }

    /// Checks the structural invariants; used when loading from disk.
    pub fn validate(&self) -> Result<()> {
        let n = self.perm.len();
        if self.ell.len() != n || self.neighbors.len() != n {
            return Err(Error::format("ordering arrays have inconsistent lengths"));
        }
        let mut seen = vec![false; n];
        for &p in &self.perm {
            if p >= n || seen[p] {
                return Err(Error::format("ordering is not a permutation"));
            }
            seen[p] = true;
        }
        for (i, nb) in self.neighbors.iter().enumerate() {
            if nb.iter().any(|&j| j >= i) {
                return Err(Error::format(format!("neighbor of {i} is not a predecessor")));
            }
        }
        if self.ell.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::format("length scales must be positive"));
        }
        Ok(())
    }
}

/// Greedy exact maximin ordering.
///
/// Each step picks the unordered location whose distance to the ordered set
/// is largest (lowest original index on exact ties). `ell[0]` is the domain
/// diameter; `ell[i]` is the distance from the i-th point to its nearest
/// predecessor. Neighbor sets are filled with `config.m_max` entries.
pub fn maximin_order(locs: &Locations, config: &OrderConfig) -> Result<Ordering> {
    if config.m_max < 1 {
        return Err(Error::invalid("m_max must be at least 1"));
    }
    let n = locs.len();
    let first = match config.first {
        FirstPoint::Centroid => locs.centroid_index(),
        FirstPoint::Index(i) if i < n => i,
        FirstPoint::Index(i) => {
            return Err(Error::invalid(format!("first point {i} out of range for {n} locations")))
        }
    };

    let mut perm = Vec::with_capacity(n);
    let mut ell = Vec::with_capacity(n);
    let mut ordered = vec![false; n];
    let mut mindist: Vec<f64> = (0..n).map(|j| locs.dist(first, j)).collect();
    // Which ordered point realizes mindist; only used for error messages.
    let mut closest = vec![first; n];
    ordered[first] = true;
    perm.push(first);
    ell.push(locs.diameter());

    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if !ordered[j] && mindist[j] > best_d {
                best = j;
                best_d = mindist[j];
            }
        }
        if best_d <= 0.0 {
            return Err(Error::data(format!(
                "duplicate locations: {} and {} coincide",
                closest[best], best
            )));
        }
        ordered[best] = true;
        perm.push(best);
        ell.push(best_d);
        for j in 0..n {
            if !ordered[j] {
                let d = locs.dist(best, j);
                if d < mindist[j] {
                    mindist[j] = d;
                    closest[j] = best;
                }
            }
        }
    }

    let neighbors = nearest_neighbors(locs, &perm, config.m_max)?;
    Ok(Ordering { perm, ell, neighbors })
}

/// For each ordered position i, the `min(m_max, i)` nearest predecessors
/// (as ordered indices), ascending by distance, lower index on ties.
pub fn nearest_neighbors(locs: &Locations, perm: &[usize], m_max: usize) -> Result<Vec<Vec<usize>>> {
    if m_max < 1 {
        return Err(Error::invalid("m_max must be at least 1"));
    }
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    Ok((0..perm.len())
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> =
                (0..i).map(|j| (locs.dist(perm[i], perm[j]), j)).collect();
            let m = m_max.min(i);
            if m > 0 && m < cand.len() {
                cand.select_nth_unstable_by(m - 1, by_key);
                cand.truncate(m);
            }
            cand.sort_by(by_key);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Correlation-based distance `(1 - |R|)^{1/2}` between variables.
///
/// `R` is the correlation matrix of the sample covariance of `y` (n × N,
/// one replicate per row) tapered element-wise by `exp(-d / range)`.
pub fn correlation_distance(y: &DMatrix<f64>, range: f64, locs: &Locations) -> Result<DMatrix<f64>> {
    let (n, nvar) = y.shape();
    if n < 2 {
        return Err(Error::invalid("correlation distance needs at least two replicates"));
    }
    if !(range > 0.0) {
        return Err(Error::invalid("taper range must be positive"));
    }
    if locs.len() != nvar {
        return Err(Error::invalid(format!(
            "{} locations for {} variables",
            locs.len(),
            nvar
        )));
    }
    let cov = sample_covariance(y);
    if let Some(j) = (0..nvar).find(|&j| !(cov[(j, j)] > 0.0)) {
        return Err(Error::data(format!("column {j} has zero variance")));
    }
    let sd: Vec<f64> = (0..nvar).map(|j| cov[(j, j)].sqrt()).collect();
    let mut out = DMatrix::zeros(nvar, nvar);
    for i in 0..nvar {
        for j in 0..i {
            let taper = (-locs.dist(i, j) / range).exp();
            let r = (cov[(i, j)] * taper / (sd[i] * sd[j])).abs().min(1.0);
            let d = (1.0 - r).sqrt();
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    Ok(out)
}

/// Sample covariance (n - 1 denominator) of the columns of `y`.
pub fn sample_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows();
    let means = y.row_mean();
    let mut centered = y.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    centered.transpose() * &centered / (n as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_locs(n: usize, seed: u64) -> Locations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Locations::euclidean(DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>())).unwrap()
    }

    /// Recomputes every candidate's minimum distance from scratch at each step.
    fn brute_force_maximin(locs: &Locations, first: usize) -> Vec<usize> {
        let n = locs.len();
        let mut perm = vec![first];
        while perm.len() < n {
            let mut best = None;
            let mut best_d = f64::NEG_INFINITY;
            for j in 0..n {
                if perm.contains(&j) {
                    continue;
                }
                let d = perm.iter().map(|&p| locs.dist(p, j)).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(j);
                }
            }
            perm.push(best.unwrap());
        }
        perm
    }

    #[test]
    fn two_points() {
        let locs = Locations::euclidean(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0])).unwrap();
        let ord = maximin_order(&locs, &OrderConfig::default()).unwrap();
        assert_eq!(ord.perm, vec![0, 1]);
        assert!((ord.ell[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!((ord.ell[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(ord.neighbors[0], Vec::<usize>::new());
        assert_eq!(ord.neighbors[1], vec![0]);
    }

    #[test]
    fn matches_brute_force_greedy() {
        let locs = random_locs(50, 11);
        let ord = maximin_order(&locs, &OrderConfig::default()).unwrap();
        assert_eq!(ord.perm, brute_force_maximin(&locs, ord.perm[0]));
    }

    #[test]
    fn length_scales_are_prefix_minima_and_nonincreasing() {
        let locs = random_locs(120, 5);
        let ord = maximin_order(&locs, &OrderConfig::default()).unwrap();
        for i in 1..ord.len() {
            let direct = (0..i)
                .map(|j| locs.dist(ord.perm[i], ord.perm[j]))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(ord.ell[i], direct);
            assert!(ord.ell[i] <= ord.ell[i - 1] + 1e-12);
        }
        let mut sorted = ord.perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..120).collect::<Vec<_>>());
    }

    #[test]
    fn neighbors_match_exhaustive_scan() {
        let locs = random_locs(50, 3);
        let ord = maximin_order(&locs, &OrderConfig { m_max: 10, ..Default::default() }).unwrap();
        for i in 0..50 {
            let mut all: Vec<(f64, usize)> =
                (0..i).map(|j| (locs.dist(ord.perm[i], ord.perm[j]), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all.iter().take(10).map(|x| x.1).collect();
            assert_eq!(ord.neighbors[i], expect, "row {i}");
            let d: Vec<f64> = ord.neighbors[i].iter().map(|&j| locs.dist(ord.perm[i], ord.perm[j])).collect();
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!(ord.neighbors[0].is_empty());
        assert_eq!(ord.neighbors[1], vec![0]);
    }

    #[test]
    fn duplicate_locations_rejected() {
        let locs = Locations::euclidean(DMatrix::from_row_slice(
            3,
            2,
            &[0.0, 0.0, 1.0, 0.5, 0.0, 0.0],
        ))
        .unwrap();
        assert!(matches!(maximin_order(&locs, &OrderConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn zero_neighbor_cap_rejected() {
        let locs = random_locs(5, 1);
        assert!(maximin_order(&locs, &OrderConfig { m_max: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn chordal_distance_on_unit_sphere() {
        let ll = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 90.0, 0.0, 0.0, 90.0]);
        let locs = Locations::chordal(ll).unwrap();
        assert!((locs.dist(0, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert!((locs.dist(0, 2) - 2f64.sqrt()).abs() < 1e-15);
        assert!(Locations::chordal(DMatrix::from_row_slice(2, 2, &[200.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn centroid_rule_agrees_for_precomputed_metric() {
        let locs = random_locs(40, 9);
        let pre = Locations::precomputed(locs.distance_matrix()).unwrap();
        assert_eq!(locs.centroid_index(), pre.centroid_index());
        let a = maximin_order(&locs, &OrderConfig::default()).unwrap();
        let b = maximin_order(&pre, &OrderConfig::default()).unwrap();
        assert_eq!(a.perm, b.perm);
    }

    #[test]
    fn correlation_distance_hand_case() {
        // 3 variables, 4 replicates, on a line with spacing 1 and taper range 2.
        let y = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 1.5, 2.0, 1.0, -1.0, 0.0, -3.0, 1.0]);
        let locs = Locations::euclidean(DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0])).unwrap();
        let d = correlation_distance(&y, 2.0, &locs).unwrap();
        // Direct evaluation from the definition.
        let col = |j: usize| (0..4).map(|r| y[(r, j)]).collect::<Vec<f64>>();
        let cov = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / 4.0;
            let mb = b.iter().sum::<f64>() / 4.0;
            a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 3.0
        };
        for i in 0..3 {
            assert_eq!(d[(i, i)], 0.0);
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let (a, b) = (col(i), col(j));
                let r = cov(&a, &b) / (cov(&a, &a) * cov(&b, &b)).sqrt();
                let taper = (-((i as f64) - (j as f64)).abs() / 2.0).exp();
                let expect = (1.0 - (r * taper).abs()).sqrt();
                assert!((d[(i, j)] - expect).abs() < 1e-14);
                assert_eq!(d[(i, j)], d[(j, i)]);
            }
        }
    }

    #[test]
    fn identical_columns_give_tapered_distance() {
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -0.5, -0.5]);
        let locs = Locations::euclidean(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.3, 0.4])).unwrap();
        let d = correlation_distance(&y, 1.5, &locs).unwrap();
        let expect = (1.0 - (-0.5f64 / 1.5).exp()).sqrt();
        assert!((d[(0, 1)] - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_column_named() {
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let locs = random_locs(2, 2);
        match correlation_distance(&y, 1.0, &locs) {
            Err(Error::Data(msg)) => assert!(msg.contains("column 1")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
