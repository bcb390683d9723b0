//! Derivative-free Nelder–Mead minimization.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NelderMeadConfig {
    /// Stop once the spread of objective values across the simplex falls below this.
    pub f_tol: f64,
    pub max_evals: usize,
    /// Initial simplex edge length along each coordinate.
    pub step: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self { f_tol: 1e-4, max_evals: 500, step: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with the standard reflection/expansion/contraction/shrink
/// coefficients (1, 2, 1/2, 1/2). Nonfinite objective values are treated as +∞.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], cfg: &NelderMeadConfig) -> Minimum {
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    if dim == 0 {
        let v = eval(x0, &mut evals);
        return Minimum { x: vec![], f: v, evals, converged: true };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for j in 0..dim {
        let mut p = x0.to_vec();
        p[j] += cfg.step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    let mut converged = false;
    while evals < cfg.max_evals {
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = idx.iter().map(|&k| simplex[k].clone()).collect();
        values = idx.iter().map(|&k| values[k]).collect();

        let (best, worst) = (values[0], values[dim]);
        if best.is_finite() && worst - best <= cfg.f_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for p in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[dim]).map(|(c, w)| c + t * (w - c)).collect()
        };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[dim] = xe;
                values[dim] = fe;
            } else {
                simplex[dim] = xr;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = xr;
            values[dim] = fr;
            continue;
        }
        // Outside contraction if the reflection beat the worst point, inside otherwise.
        let xc = if fr < values[dim] { along(-0.5) } else { along(0.5) };
        let fc = eval(&xc, &mut evals);
        if fc < values[dim].min(fr) {
            simplex[dim] = xc;
            values[dim] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        for k in 1..=dim {
            let p: Vec<f64> = simplex[0].iter().zip(&simplex[k]).map(|(b, v)| b + 0.5 * (v - b)).collect();
            values[k] = eval(&p, &mut evals);
            simplex[k] = p;
        }
    }

    let best = (0..=dim).min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b))).unwrap();
    Minimum { x: simplex[best].clone(), f: values[best], evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let cfg = NelderMeadConfig { f_tol: 1e-14, max_evals: 5000, step: 0.5 };
        let m = nelder_mead(rosen, &[-1.2, 1.0], &cfg);
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{:?}", m.x);
    }

    #[test]
    fn respects_evaluation_budget() {
        let m = nelder_mead(|x| x.iter().map(|v| v * v).sum(), &[3.0; 5], &NelderMeadConfig { max_evals: 40, ..Default::default() });
        assert!(m.evals <= 40 + 6);
        assert!(m.f < 45.0);
    }

    #[test]
    fn infeasible_region_is_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.2).powi(2) };
        let m = nelder_mead(f, &[1.0], &NelderMeadConfig { f_tol: 1e-12, max_evals: 500, step: 1.0 });
        assert!((m.x[0] - 0.2).abs() < 1e-4);
    }
}
