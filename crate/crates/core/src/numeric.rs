//! Small numerical kernels shared by the estimators: fixed-order summation,
//! log-log regression, Gauss–Legendre panels and the Bessel functions needed
//! for Fourier transforms of round spheres.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} usable points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("non-positive value {value} at index {index} cannot be log-transformed")]
    NonPositive { index: usize, value: f64 },
    #[error("abscissa values are all equal")]
    DegenerateAbscissa,
}

/// Result of a straight-line fit, usually in log-log coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(min, max)` of the fitted abscissa (in the original, un-logged units).
    pub range: (f64, f64),
}

/// Pairwise (cascade) summation. The split points depend only on the length,
/// so the result is reproducible regardless of how the input was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64), FitError> {
    assert_eq!(x.len(), y.len(), "linear_fit: length mismatch");
    let n = x.len();
    if n < 2 {
        return Err(FitError::InsufficientData { needed: 2, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(FitError::DegenerateAbscissa);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (slope * a + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok((slope, intercept, r2))
}

/// Fits `log y = slope * log x + intercept`.
pub fn power_law_fit(x: &[f64], y: &[f64]) -> Result<ScalingFit, FitError> {
    for (index, &value) in x.iter().chain(y.iter()).enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            let index = if index < x.len() { index } else { index - x.len() };
            return Err(FitError::NonPositive { index, value });
        }
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (slope, intercept, r_squared) = linear_fit(&lx, &ly)?;
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
        range: (lo, hi),
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` panels of `order` points.
pub fn composite_gauss_legendre(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * order);
    let mut weights = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + h * p as f64;
        for (x, w) in gx.iter().zip(&gw) {
            nodes.push(lo + 0.5 * h * (x + 1.0));
            weights.push(0.5 * h * w);
        }
    }
    (nodes, weights)
}

/// Bessel function of the first kind `J_n(x)` for integer order `n ∈ {0, 1}`
/// (any non-negative integer works, accuracy is tuned for small orders).
pub fn bessel_j(n: u32, x: f64) -> f64 {
    let ax = x.abs();
    let value = if ax < 25.0 {
        // Trapezoid on the periodic integral representation; aliasing error
        // is of size J_{64-n}(x), negligible for x < 25.
        let m = 64usize;
        let nf = n as f64;
        let mut acc = 0.0;
        for k in 0..m {
            let tau = 2.0 * PI * k as f64 / m as f64;
            acc += (nf * tau - ax * tau.sin()).cos();
        }
        acc / m as f64
    } else {
        hankel_asymptotic(n as f64, ax)
    };
    if x < 0.0 && n % 2 == 1 {
        -value
    } else {
        value
    }
}

fn hankel_asymptotic(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut p = 0.0;
    let mut q = 0.0;
    let mut term = 1.0;
    let mut last = f64::INFINITY;
    for k in 0..30 {
        let kf = k as f64;
        if k > 0 {
            term *= (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
        }
        if term.abs() > last {
            break;
        }
        last = term.abs();
        match k % 4 {
            0 => p += term,
            1 => q += term,
            2 => p -= term,
            _ => q -= term,
        }
        if term.abs() < 1e-17 {
            break;
        }
    }
    let chi = x - (0.5 * nu + 0.25) * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Fourier transform of the normalized uniform measure on the unit sphere
/// `S^{m-1} ⊂ R^m`, evaluated at a frequency of length `rho`
/// (convention `e^{-2πi x·ζ}`). Supported for `m ∈ {1, 2, 3, 4}`.
#[inline]
pub fn sphere_fourier(m: usize, rho: f64) -> Option<f64> {
    let x = 2.0 * PI * rho;
    let v = match m {
        1 => x.cos(),
        2 => bessel_j(0, x),
        3 => {
            if x.abs() < 1e-4 {
                1.0 - x * x / 6.0
            } else {
                x.sin() / x
            }
        }
        4 => {
            if x.abs() < 1e-4 {
                1.0 - x * x / 8.0
            } else {
                2.0 * bessel_j(1, x) / x
            }
        }
        _ => return None,
    };
    Some(v)
}

/// Surface area of the unit sphere `S^{n-1} ⊂ R^n`.
pub fn unit_sphere_area(n: usize) -> f64 {
    2.0 * PI.powf(n as f64 / 2.0) / gamma_half(n)
}

/// `Γ(n / 2)` for a positive integer `n`.
pub fn gamma_half(n: usize) -> f64 {
    assert!(n >= 1);
    if n.is_multiple_of(2) {
        (1..n / 2).map(|k| k as f64).product()
    } else {
        // Γ(k + 1/2) = (2k)! √π / (4^k k!)
        let mut g = PI.sqrt();
        let k = (n - 1) / 2;
        for j in 0..k {
            g *= j as f64 + 0.5;
        }
        g
    }
}

/// Unit vector in the same direction, or `None` for a (near) zero vector.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|c| c / n).collect())
    } else {
        None
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Angle between `u` and `v` in `[0, π]`, as `atan2(|rejection of u from v|·|v|, u·v)`.
/// Returns `None` when either vector is zero.
pub fn angle_between(u: &[f64], v: &[f64]) -> Option<f64> {
    let vv = dot(v, v);
    let uu = dot(u, u);
    if !(vv > 0.0) || !(uu > 0.0) {
        return None;
    }
    let uv = dot(u, v);
    let c = uv / vv;
    let rej: f64 = u.iter().zip(v).map(|(a, b)| (a - c * b).powi(2)).sum::<f64>().sqrt();
    Some((rej * vv.sqrt()).atan2(uv))
}
