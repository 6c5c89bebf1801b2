use serde::{Deserialize, Serialize};

use super::{check_acute, FrequencyPair, OscError};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::numeric::{dot, power_law_fit};

/// Largest admissible `|u|` or `|v'|` for the local chart.
pub const CHART_RADIUS: f64 = 0.3;
pub const CRITICAL_TOL: f64 = 1e-9;
pub const DET_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEval {
    pub value: f64,
    /// Ordered `(u₁, u'₁..u'_{d-2}, v'₁..v'_{d-2})`.
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub matrix: Vec<Vec<f64>>,
    /// Determinant of the assembled matrix by LU elimination.
    pub det_direct: f64,
    /// `|ξ_d + sin α η₁ + cos α η_d| · |(η₁ξ_d − ξ₁η_d)/sin α|^{d-2}`.
    pub det_closed: f64,
    pub degenerate: bool,
}

fn check_chart(u1: f64, u_prime: &[f64], v_prime: &[f64], dim: usize) -> Result<(), OscError> {
    if dim < 2 || u_prime.len() != dim - 2 || v_prime.len() != dim - 2 {
        return Err(OscError::InvalidInput(format!(
            "u' and v' must have length d - 2 = {}",
            dim.saturating_sub(2)
        )));
    }
    let u = (u1 * u1 + dot(u_prime, u_prime)).sqrt();
    let v = dot(v_prime, v_prime).sqrt();
    if !(u <= CHART_RADIUS && v <= CHART_RADIUS) {
        return Err(OscError::InvalidInput(format!(
            "chart point outside radius {CHART_RADIUS}: |u| = {u}, |v'| = {v}"
        )));
    }
    Ok(())
}

/// Quadratic truncation of the local chart around `x⁰ = e_d`,
/// `y⁰ = sin α e₁ + cos α e_d`. Dimension is `u_prime.len() + 2`.
pub fn parametrize_u(u1: f64, u_prime: &[f64], v_prime: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>), OscError> {
    check_acute(alpha)?;
    let d = u_prime.len() + 2;
    check_chart(u1, u_prime, v_prime, d)?;
    let (s, c) = alpha.sin_cos();
    let up2 = dot(u_prime, u_prime);
    let vp2 = dot(v_prime, v_prime);
    let uv = dot(u_prime, v_prime);

    let mut x = Vec::with_capacity(d);
    x.push(u1);
    x.extend_from_slice(u_prime);
    x.push(1.0 - 0.5 * (u1 * u1 + up2));

    let y1 = s + c * u1 + (c / s) * uv - vp2 / (2.0 * s) - (c * c / (2.0 * s)) * up2 - 0.5 * s * u1 * u1;
    let yd = c - s * u1 - uv + 0.5 * c * up2 - 0.5 * c * u1 * u1;
    let mut y = Vec::with_capacity(d);
    y.push(y1);
    y.extend_from_slice(v_prime);
    y.push(yd);
    Ok((x, y))
}

/// `U_α(u, v') · (ξ, η)`.
pub fn phase_value(u1: f64, u_prime: &[f64], v_prime: &[f64], alpha: f64, fp: &FrequencyPair) -> Result<f64, OscError> {
    check_dim(fp, u_prime.len())?;
    let (x, y) = parametrize_u(u1, u_prime, v_prime, alpha)?;
    Ok(dot(&x, &fp.xi) + dot(&y, &fp.eta))
}

fn check_dim(fp: &FrequencyPair, m: usize) -> Result<(), OscError> {
    if fp.dim() != m + 2 {
        return Err(OscError::InvalidInput(format!(
            "frequency dimension {} does not match chart dimension {}",
            fp.dim(),
            m + 2
        )));
    }
    Ok(())
}

pub fn phase_gradient(
    u1: f64,
    u_prime: &[f64],
    v_prime: &[f64],
    alpha: f64,
    fp: &FrequencyPair,
) -> Result<Vec<f64>, OscError> {
    check_acute(alpha)?;
    let m = u_prime.len();
    check_dim(fp, m)?;
    check_chart(u1, u_prime, v_prime, m + 2)?;
    let (s, c) = alpha.sin_cos();
    let cot = c / s;
    let (xi, eta) = (&fp.xi, &fp.eta);
    let (xi1, xid, eta1, etad) = (xi[0], xi[m + 1], eta[0], eta[m + 1]);

    let mut g = vec![0.0; 1 + 2 * m];
    g[0] = xi1 - u1 * xid + c * eta1 - s * u1 * eta1 - s * etad - c * u1 * etad;
    for k in 0..m {
        let (u, v) = (u_prime[k], v_prime[k]);
        g[1 + k] = xi[1 + k] - u * xid + cot * v * eta1 - (c * c / s) * u * eta1 - v * etad + c * u * etad;
        g[1 + m + k] = cot * u * eta1 - v * eta1 / s + eta[1 + k] - u * etad;
    }
    Ok(g)
}

/// Constant Hessian of the truncated phase in `(u₁, u', v')` order.
pub fn hessian_matrix(alpha: f64, fp: &FrequencyPair) -> Result<Vec<Vec<f64>>, OscError> {
    check_acute(alpha)?;
    let d = fp.dim();
    let m = d - 2;
    let (s, c) = alpha.sin_cos();
    let (xid, eta1, etad) = (fp.xi[d - 1], fp.eta[0], fp.eta[d - 1]);
    let n = 1 + 2 * m;
    let mut h = vec![vec![0.0; n]; n];
    h[0][0] = -xid - s * eta1 - c * etad;
    let a = -xid - (c * c / s) * eta1 + c * etad;
    let b = (c / s) * eta1 - etad;
    let e = -eta1 / s;
    for k in 0..m {
        let (i, j) = (1 + k, 1 + m + k);
        h[i][i] = a;
        h[i][j] = b;
        h[j][i] = b;
        h[j][j] = e;
    }
    Ok(h)
}

pub fn phase_eval(
    u1: f64,
    u_prime: &[f64],
    v_prime: &[f64],
    alpha: f64,
    fp: &FrequencyPair,
) -> Result<PhaseEval, OscError> {
    Ok(PhaseEval {
        value: phase_value(u1, u_prime, v_prime, alpha, fp)?,
        gradient: phase_gradient(u1, u_prime, v_prime, alpha, fp)?,
        hessian: hessian_matrix(alpha, fp)?,
    })
}

/// Norm of `(ξ₁ + cos α η₁ − sin α η_d, ξ', η')`.
pub fn critical_point_residual(fp: &FrequencyPair, alpha: f64) -> f64 {
    let d = fp.dim();
    let (s, c) = alpha.sin_cos();
    let lead = fp.xi[0] + c * fp.eta[0] - s * fp.eta[d - 1];
    let rest: f64 = fp.xi_prime().iter().chain(fp.eta_prime()).map(|v| v * v).sum();
    (lead * lead + rest).sqrt()
}

/// Closest-in-spirit critical pair: zero `ξ'`, `η'` and solve for `ξ₁`.
pub fn project_to_critical(fp: &FrequencyPair, alpha: f64) -> FrequencyPair {
    let d = fp.dim();
    let (s, c) = alpha.sin_cos();
    let mut xi = vec![0.0; d];
    let mut eta = vec![0.0; d];
    eta[0] = fp.eta[0];
    eta[d - 1] = fp.eta[d - 1];
    xi[d - 1] = fp.xi[d - 1];
    xi[0] = s * eta[d - 1] - c * eta[0];
    FrequencyPair { xi, eta }
}

pub fn closed_form_determinant(fp: &FrequencyPair, alpha: f64) -> f64 {
    let d = fp.dim();
    let (s, c) = alpha.sin_cos();
    let (xi1, xid, eta1, etad) = (fp.xi[0], fp.xi[d - 1], fp.eta[0], fp.eta[d - 1]);
    let first = (xid + s * eta1 + c * etad).abs();
    let second = ((eta1 * xid - xi1 * etad) / s).abs();
    first * second.powi(d as i32 - 2)
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            a.swap(piv, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let (top, bottom) = a.split_at_mut(row);
                for (x, p) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    det
}

/// Assembles the Hessian and compares its determinant against the closed
/// form. With `at_critical`, the pair must satisfy the critical equations
/// and the two determinants must agree.
pub fn phase_hessian(alpha: f64, fp: &FrequencyPair, at_critical: bool) -> Result<HessianReport, OscError> {
    let matrix = hessian_matrix(alpha, fp)?;
    let d = fp.dim();
    let scale = fp
        .xi
        .iter()
        .chain(&fp.eta)
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-300);
    if at_critical {
        let res = critical_point_residual(fp, alpha);
        if res > CRITICAL_TOL * scale.max(1.0) {
            return Err(OscError::CriticalEquationsViolated(res));
        }
    }
    let det_direct = determinant(&matrix).abs();
    let det_closed = closed_form_determinant(fp, alpha);
    let floor = 1e-12 * (scale / alpha.sin()).powi(2 * d as i32 - 3);
    let degenerate = det_closed <= floor;
    if at_critical {
        let diff = (det_direct - det_closed).abs();
        if diff > DET_REL_TOL * det_direct.max(det_closed) + floor {
            return Err(OscError::HessianMismatch {
                direct: det_direct,
                closed: det_closed,
            });
        }
    }
    Ok(HessianReport {
        matrix,
        det_direct,
        det_closed,
        degenerate,
    })
}

/// Fitted convergence orders of `| |x(u)| − 1 |` and `|x·y − cos α|` as
/// the chart point shrinks along one fixed random direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartOrder {
    pub radii: Vec<f64>,
    pub norm_residuals: Vec<f64>,
    pub inner_residuals: Vec<f64>,
    pub norm_order: f64,
    pub inner_order: f64,
}

pub fn chart_order(dim: usize, alpha: f64, radii: &[f64], seed: u64) -> Result<ChartOrder, OscError> {
    check_acute(alpha)?;
    if dim < 2 {
        return Err(OscError::InvalidInput("dimension must be at least 2".into()));
    }
    let m = dim - 2;
    let mut rng = crate::rng::stream_rng(seed, 0);
    // entries bounded away from zero so no residual term cancels identically
    let mut dir: Vec<f64> = (0..1 + 2 * m)
        .map(|_| {
            let v: f64 = rng.random_range(0.3..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let n = dot(&dir, &dir).sqrt();
    dir.iter_mut().for_each(|v| *v /= n);
    let mut norm_res = Vec::with_capacity(radii.len());
    let mut inner_res = Vec::with_capacity(radii.len());
    for &h in radii {
        let p: Vec<f64> = dir.iter().map(|v| v * h).collect();
        let (x, y) = parametrize_u(p[0], &p[1..1 + m], &p[1 + m..], alpha)?;
        norm_res.push((dot(&x, &x).sqrt() - 1.0).abs());
        inner_res.push((dot(&x, &y) - alpha.cos()).abs());
    }
    let norm_order = power_law_fit(radii, &norm_res)?.slope;
    let inner_order = power_law_fit(radii, &inner_res)?.slope;
    Ok(ChartOrder {
        radii: radii.to_vec(),
        norm_residuals: norm_res,
        inner_residuals: inner_res,
        norm_order,
        inner_order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianTrials {
    pub dim: usize,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

/// Compares the direct and closed-form determinants at `trials` random
/// critical pairs (Gaussian frequencies projected onto the critical set,
/// `α` uniform in `[0.1, π/2 − 0.1]`).
pub fn hessian_trials(dim: usize, trials: usize, seed: u64) -> Result<HessianTrials, OscError> {
    if dim < 2 {
        return Err(OscError::InvalidInput("dimension must be at least 2".into()));
    }
    let mut rng = crate::rng::stream_rng(seed, 0);
    let mut failures = 0;
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..trials {
        let alpha = rng.random_range(0.1..std::f64::consts::FRAC_PI_2 - 0.1);
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect() };
        let raw = FrequencyPair::new(draw(), draw())?;
        let fp = project_to_critical(&raw, alpha);
        let (direct, closed) = match phase_hessian(alpha, &fp, true) {
            Ok(r) => (r.det_direct, r.det_closed),
            Err(OscError::HessianMismatch { direct, closed }) => {
                failures += 1;
                (direct, closed)
            }
            Err(e) => return Err(e),
        };
        let scale = direct.max(closed);
        if scale > 0.0 {
            max_rel_err = max_rel_err.max((direct - closed).abs() / scale);
        }
    }
    Ok(HessianTrials {
        dim,
        trials,
        failures,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn base_point_is_exact() {
        for alpha in [PI / 6.0, PI / 4.0, PI / 3.0] {
            let (x, y) = parametrize_u(0.0, &[0.0, 0.0], &[0.0, 0.0], alpha).unwrap();
            assert_eq!(x, vec![0.0, 0.0, 0.0, 1.0]);
            assert_eq!(y, vec![alpha.sin(), 0.0, 0.0, alpha.cos()]);
        }
    }

    #[test]
    fn chart_rejects_bad_inputs() {
        assert!(parametrize_u(0.0, &[0.0], &[0.0], 0.0).is_err());
        assert!(parametrize_u(0.5, &[0.0], &[0.0], 1.0).is_err());
        assert!(parametrize_u(0.0, &[0.0], &[], 1.0).is_err());
    }

    #[test]
    fn residuals_are_cubic() {
        let alpha = PI / 4.0;
        let dir_u = [0.6, -0.3, 0.2];
        let dir_v = [0.5, 0.4];
        let mut prev: Option<(f64, f64)> = None;
        for h in [0.2, 0.1, 0.05, 0.025] {
            let up: Vec<f64> = dir_u[1..].iter().map(|v| v * h).collect();
            let vp: Vec<f64> = dir_v.iter().map(|v| v * h).collect();
            let (x, y) = parametrize_u(dir_u[0] * h, &up, &vp, alpha).unwrap();
            let r1 = (dot(&x, &x).sqrt() - 1.0).abs();
            let r2 = (dot(&x, &y) - alpha.cos()).abs();
            if let Some((p1, p2)) = prev {
                assert!((p1 / r1).log2() > 2.5, "{p1} {r1}");
                assert!((p2 / r2).log2() > 2.5, "{p2} {r2}");
            }
            prev = Some((r1, r2));
        }
    }

    #[test]
    fn gradient_vanishes_at_critical_base_point() {
        let alpha = PI / 3.0;
        let eta = vec![1.0, 0.0, 0.0, 2.0];
        let mut xi = vec![0.0, 0.0, 0.0, 1.0];
        xi[0] = alpha.sin() * eta[3] - alpha.cos() * eta[0];
        let fp = FrequencyPair::new(xi, eta).unwrap();
        let g = phase_gradient(0.0, &[0.0, 0.0], &[0.0, 0.0], alpha, &fp).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let zero = FrequencyPair::zero(4);
        let g0 = phase_gradient(0.1, &[0.05, -0.1], &[0.2, 0.0], alpha, &zero).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let alpha = 0.9;
        let fp = FrequencyPair::new(vec![0.3, -1.1, 0.7, 2.0], vec![1.5, 0.2, -0.4, -0.8]).unwrap();
        let p = [0.05, -0.08, 0.1, 0.04, -0.12];
        let f = |q: &[f64]| phase_value(q[0], &q[1..3], &q[3..5], alpha, &fp).unwrap();
        let g = phase_gradient(p[0], &p[1..3], &p[3..5], alpha, &fp).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn d2_determinant_is_single_factor() {
        let alpha: f64 = 0.8;
        let eta = vec![0.4, 1.3];
        let xi = vec![alpha.sin() * 1.3 - alpha.cos() * 0.4, -0.7];
        let fp = FrequencyPair::new(xi, eta).unwrap();
        let rep = phase_hessian(alpha, &fp, true).unwrap();
        let want = (-0.7 + alpha.sin() * 0.4 + alpha.cos() * 1.3).abs();
        assert!((rep.det_direct - want).abs() < 1e-14);
        assert!((rep.det_closed - want).abs() < 1e-14);
    }

    #[test]
    fn determinant_identity_at_fixture() {
        let alpha = PI / 3.0;
        let eta = vec![1.0, 0.0, 0.0, 2.0];
        let xi = vec![alpha.sin() * 2.0 - alpha.cos(), 0.0, 0.0, 1.0];
        let fp = FrequencyPair::new(xi, eta).unwrap();
        let rep = phase_hessian(alpha, &fp, true).unwrap();
        assert!((rep.det_direct - rep.det_closed).abs() <= 1e-9 * rep.det_closed);
        assert!(!rep.degenerate);
    }

    #[test]
    fn degenerate_direction_flagged() {
        let alpha = PI / 4.0;
        let fp = FrequencyPair::new(vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]).unwrap();
        let rep = phase_hessian(alpha, &fp, true).unwrap();
        assert_eq!(rep.det_closed, 0.0);
        assert!(rep.degenerate);
    }

    #[test]
    fn off_critical_is_rejected() {
        let fp = FrequencyPair::new(vec![1.0, 0.5, 0.0], vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            phase_hessian(0.7, &fp, true),
            Err(OscError::CriticalEquationsViolated(_))
        ));
        assert!(phase_hessian(0.7, &fp, false).is_ok());
    }

    #[test]
    fn residual_examples() {
        let a = PI / 2.0;
        let fp = FrequencyPair::new(vec![1.0, 0.0, 3.7], vec![0.0, 0.0, 1.0]).unwrap();
        assert!(critical_point_residual(&fp, a) < 1e-15);
        let fp = FrequencyPair::new(vec![0.0, 0.4, 0.0], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(critical_point_residual(&fp, 1.0) >= 0.4);
        let raw = FrequencyPair::new(vec![0.3, 0.2, -1.0, 0.9], vec![1.1, -0.5, 0.3, 0.2]).unwrap();
        assert!(critical_point_residual(&project_to_critical(&raw, 0.6), 0.6) <= 1e-12);
    }

    #[test]
    fn chart_orders_are_cubic() {
        for d in [3, 4] {
            let o = chart_order(d, PI / 6.0, &[0.2, 0.1, 0.05, 0.025], 1).unwrap();
            assert!(o.norm_order > 2.7 && o.inner_order > 2.7, "{o:?}");
        }
    }

    #[test]
    fn random_critical_pairs_satisfy_identity() {
        for d in 2..=5 {
            let t = hessian_trials(d, 100, d as u64).unwrap();
            assert_eq!(t.failures, 0);
            assert!(t.max_rel_err <= DET_REL_TOL);
        }
    }

    #[test]
    fn lu_determinant_basics() {
        assert_eq!(determinant(&[vec![2.0, 0.0], vec![0.0, 3.0]]), 6.0);
        assert_eq!(determinant(&[vec![0.0, 1.0], vec![1.0, 0.0]]), -1.0);
        assert_eq!(determinant(&[vec![1.0, 2.0], vec![2.0, 4.0]]), 0.0);
    }
}
