//! Scalar special functions: standard normal and Student-t CDFs, quantiles
//! and densities, plus the probability-integral transforms between them.
//!
//! Tail probabilities are always computed on the negative half-line so that
//! small probabilities keep full relative precision.

use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc_inv;
pub use statrs::function::gamma::ln_gamma;

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest magnitude a map coefficient may take.
pub const Z_CLAMP: f64 = 8.2;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Complementary error function with full relative precision in the upper tail.
pub fn erfc(t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t < 0.0 {
        return 2.0 - erfc(-t);
    }
    if t < 2.5 {
        // erf(t) = 2/√π e^{-t²} Σ 2ⁿ t^{2n+1} / (2n+1)!!, all terms positive.
        let two_t2 = 2.0 * t * t;
        let mut term = t;
        let mut sum = t;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= two_t2 / (2.0 * n + 1.0);
            sum += term;
            if term <= sum * 1e-17 {
                break;
            }
        }
        return 1.0 - 2.0 * FRAC_1_SQRT_PI * (-t * t).exp() * sum;
    }
    // Continued fraction t + (1/2)/(t + 1/(t + (3/2)/(t + ...))), modified Lentz.
    let tiny = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in 1..5000 {
        let a = 0.5 * k as f64;
        d = t + a * d;
        d = if d.abs() < tiny { 1.0 / tiny } else { 1.0 / d };
        c = t + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    FRAC_1_SQRT_PI * (-t * t).exp() / f
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Φ⁻¹(p) for p ∈ (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p <= 0.5 {
        norm_quantile_lower(p)
    } else {
        -norm_quantile_lower(1.0 - p)
    }
}

/// Quantile for p ∈ (0, 0.5]: inverse-erfc start polished by Halley steps.
fn norm_quantile_lower(p: f64) -> f64 {
    let mut z = -SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..3 {
        let f = norm_cdf(z);
        let dens = norm_logpdf(z).exp();
        if !(dens > 0.0) {
            break;
        }
        let r = (f - p) / dens;
        let step = r / (1.0 + 0.5 * z * r);
        z -= step;
        if step.abs() <= f64::EPSILON * z.abs() {
            break;
        }
    }
    z
}

/// ln B(a, b).
fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Regularized incomplete beta I_x(a, b).
///
/// The continued fraction is evaluated on whichever side of the mean
/// converges, so a small result keeps its relative precision when x is
/// below the mean.
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    beta_reg_split(a, b, x, 1.0 - x)
}

/// I_x(a, b) with `y = 1 - x` supplied separately, so callers that know
/// the complement exactly do not lose it to rounding.
fn beta_reg_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - beta_reg_split(b, a, y, x);
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    ln_front.exp() * beta_cf(a, b, x) / a
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    d = if d.abs() < tiny { 1.0 / tiny } else { 1.0 / d };
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for num in [
            m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + num * d;
            d = if d.abs() < tiny { 1.0 / tiny } else { 1.0 / d };
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

/// Log density of N(mean, var) at x.
pub fn norm_logpdf_scaled(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Log density of the standard t distribution with `dof` degrees of freedom.
pub fn t_logpdf(x: f64, dof: f64) -> f64 {
    ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI).ln()
        - 0.5 * (dof + 1.0) * (x * x / dof).ln_1p()
}

/// Log density of the location-scale t: `(x - loc) / sqrt(scale2)` is standard t.
pub fn t_logpdf_scaled(x: f64, dof: f64, loc: f64, scale2: f64) -> f64 {
    t_logpdf((x - loc) / scale2.sqrt(), dof) - 0.5 * scale2.ln()
}

/// P(T ≤ -|x|) for T standard t.
fn t_lower_tail(x: f64, dof: f64) -> f64 {
    let x2 = x * x;
    let denom = dof + x2;
    0.5 * beta_reg_split(0.5 * dof, 0.5, dof / denom, x2 / denom)
}

pub fn t_cdf(x: f64, dof: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        t_lower_tail(x, dof)
    } else {
        1.0 - t_lower_tail(x, dof)
    }
}

/// The t quantile for a lower-tail probability `p ∈ (0, 0.5]`; result ≤ 0.
fn t_quantile_lower(p: f64, dof: f64) -> f64 {
    debug_assert!(p > 0.0 && p <= 0.5);
    if p == 0.5 {
        return 0.0;
    }
    // Cornish-Fisher start, then safeguarded Newton on ln F.
    let z = norm_quantile(p);
    let z2 = z * z;
    let g1 = (z2 + 1.0) * z / 4.0;
    let g2 = ((5.0 * z2 + 16.0) * z2 + 3.0) * z / 96.0;
    let g3 = (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) * z / 384.0;
    let mut s = z + g1 / dof + g2 / (dof * dof) + g3 / (dof * dof * dof);
    if !(s < 0.0) || !s.is_finite() {
        s = z.min(-1e-3);
    }

    let target = p.ln();
    let mut hi = 0.0;
    let mut lo = s;
    while t_lower_tail(lo, dof) > p {
        hi = lo;
        lo *= 2.0;
        if !lo.is_finite() {
            return f64::NEG_INFINITY;
        }
    }
    if s <= lo || s >= hi {
        s = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f_cdf = t_lower_tail(s, dof);
        if f_cdf > p {
            hi = s;
        } else {
            lo = s;
        }
        let dens = t_logpdf(s, dof).exp();
        let step = (f_cdf.ln() - target) * f_cdf / dens;
        let mut next = s - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - s).abs() <= 4.0 * f64::EPSILON * s.abs();
        s = next;
        if done || hi - lo <= 4.0 * f64::EPSILON * lo.abs() {
            break;
        }
    }
    s
}

/// t quantile for p ∈ (0, 1).
pub fn t_quantile(p: f64, dof: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p <= 0.5 {
        t_quantile_lower(p, dof)
    } else {
        -t_quantile_lower(1.0 - p, dof)
    }
}

/// Φ⁻¹(F_ν(s)), evaluated through the lower tail on both sides.
///
/// Returns the coefficient and whether it had to be clamped to ±[`Z_CLAMP`].
pub fn t_to_normal(s: f64, dof: f64) -> (f64, bool) {
    let tail = t_lower_tail(s, dof);
    let mut z = if tail > 0.0 {
        -SQRT_2 * erfc_inv(2.0 * tail)
    } else {
        f64::NEG_INFINITY
    };
    if s > 0.0 {
        z = -z;
    }
    if z.abs() > Z_CLAMP {
        (Z_CLAMP.copysign(z), true)
    } else {
        (z, false)
    }
}

/// F_ν⁻¹(Φ(z)); `z` is clamped to ±[`Z_CLAMP`] before inversion.
pub fn normal_to_t(z: f64, dof: f64) -> f64 {
    let z = z.clamp(-Z_CLAMP, Z_CLAMP);
    let tail = norm_cdf(-z.abs());
    let s = t_quantile_lower(tail.min(0.5), dof);
    if z > 0.0 {
        -s
    } else {
        s
    }
}
