use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{decay_bound, tail_prefactor, FrequencyPair, OscError, RotationBlock, SigmaEngine};
use crate::measure::{measure_fourier, DiscreteMeasure};
use crate::numeric::{angle_between, norm, pairwise_sum, power_law_fit, unit_sphere_area, ScalingFit};
use crate::rng::{batched, derive_seed};

/// Relative standard error above which an estimate is flagged unstable.
pub const UNSTABLE_REL_SE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEstimate {
    pub r: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub unstable: bool,
}

impl ProbeEstimate {
    fn from_weights(r: f64, w: &[f64], scale: f64) -> Self {
        let n = w.len() as f64;
        let mean = pairwise_sum(w) / n;
        let sq: Vec<f64> = w.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = if w.len() > 1 {
            pairwise_sum(&sq) / (n - 1.0)
        } else {
            0.0
        };
        let estimate = scale * mean;
        let stderr = scale * (var / n).sqrt();
        Self {
            r,
            estimate,
            stderr,
            unstable: !(stderr <= UNSTABLE_REL_SE * estimate.abs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub fit: ScalingFit,
    pub predicted: f64,
    pub points: Vec<ProbeEstimate>,
}

impl ProbeFit {
    pub fn any_unstable(&self) -> bool {
        self.points.iter().any(|p| p.unstable)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `C₁(α)` as the largest observed ratio `|σ̂_α| / bound` over unit
/// directions scaled by each `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Fit {
    pub c1: f64,
    pub ratios: Vec<f64>,
}

pub fn fit_c1(engine: &SigmaEngine, directions: &[FrequencyPair], r_list: &[f64]) -> Result<C1Fit, OscError> {
    if directions.is_empty() || r_list.is_empty() {
        return Err(OscError::InsufficientData { needed: 1, got: 0 });
    }
    let mut ratios = Vec::with_capacity(directions.len() * r_list.len());
    for dir in directions {
        for &r in r_list {
            let fp = dir.scaled(r);
            let est = engine.evaluate(&fp)?;
            ratios.push(est.abs() / decay_bound(&fp, engine.alpha()));
        }
    }
    let c1 = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(C1Fit { c1, ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub checked: usize,
    /// Points with `|σ̂| > C₁·bound + 3·stderr`.
    pub violations: usize,
    pub max_ratio: f64,
}

pub fn check_decay_bound(engine: &SigmaEngine, c1: f64, pairs: &[FrequencyPair]) -> Result<BoundCheck, OscError> {
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for fp in pairs {
        let est = engine.evaluate(fp)?;
        let bound = decay_bound(fp, engine.alpha());
        if est.abs() > c1 * bound + 3.0 * est.stderr() {
            violations += 1;
        }
        max_ratio = max_ratio.max(est.abs() / bound);
    }
    Ok(BoundCheck {
        checked: pairs.len(),
        violations,
        max_ratio,
    })
}

/// Monte Carlo estimate of
/// `∫_{R/2 ≤ |ξ| ≤ 2R} |ξ + g_α η|^{-1} sin(∠(ξ, η))^{-(d-2)} dξ`.
///
/// Proposal: an even mixture of polar sampling on the annulus (radius
/// `∝ ρ^{d-1}`, polar angle to `η` uniform, which cancels the angular
/// singularity) and a `|ζ|^{-1}`-weighted ball of radius `|η|/2` around
/// `−g_α η`.
pub fn annulus_probe(eta: &[f64], alpha: f64, r: f64, n: usize, seed: u64) -> Result<ProbeEstimate, OscError> {
    let d = eta.len();
    let g = RotationBlock::new(alpha)?;
    if d < 3 {
        return Err(OscError::InvalidInput("annulus probe needs d >= 3".into()));
    }
    let eta_norm = norm(eta);
    if !(eta_norm > 0.0) {
        return Err(OscError::InvalidInput("eta must be nonzero".into()));
    }
    if !(r > 0.0) || eta_norm < r / 2.0 || eta_norm > 2.0 * r {
        return Err(OscError::InvalidInput(format!(
            "|eta| = {eta_norm} not within a factor 2 of R = {r}"
        )));
    }
    if n < 2 {
        return Err(OscError::InvalidInput("need at least two samples".into()));
    }
    let eta_hat: Vec<f64> = eta.iter().map(|v| v / eta_norm).collect();
    let center: Vec<f64> = g.apply(eta).into_iter().map(|v| -v).collect();
    let (a, b) = (r / 2.0, 2.0 * r);
    let df = d as f64;
    let k_polar = (b.powi(d as i32) - a.powi(d as i32)) * std::f64::consts::PI * unit_sphere_area(d - 1);
    let q_polar_scaled = df / k_polar; // q_A · sin^{d-2}θ
    let rb = eta_norm / 2.0;
    let z_ball = unit_sphere_area(d) * rb.powi(d as i32 - 1) / (df - 1.0);

    let parts = batched(n, seed, |rng, range| {
        range
            .map(|_| {
                let xi: Vec<f64> = if rng.random::<bool>() {
                    let u: f64 = rng.random();
                    let rho = (a.powi(d as i32) + u * (b.powi(d as i32) - a.powi(d as i32))).powf(1.0 / df);
                    let theta = std::f64::consts::PI * rng.random::<f64>();
                    // ω uniform in η̂⊥
                    let mut w = unit_vector(rng, d);
                    let p: f64 = w.iter().zip(&eta_hat).map(|(x, y)| x * y).sum();
                    w.iter_mut().zip(&eta_hat).for_each(|(x, e)| *x -= p * e);
                    let wn = norm(&w);
                    w.iter()
                        .zip(&eta_hat)
                        .map(|(wv, e)| rho * (theta.cos() * e + theta.sin() * wv / wn))
                        .collect()
                } else {
                    let rad = rb * rng.random::<f64>().powf(1.0 / (df - 1.0));
                    let dir = unit_vector(rng, d);
                    center.iter().zip(&dir).map(|(c, u)| c + rad * u).collect()
                };
                let rho = norm(&xi);
                if rho < a || rho > b {
                    return 0.0;
                }
                let zeta: Vec<f64> = xi.iter().zip(&center).map(|(x, c)| x - c).collect();
                let zn = norm(&zeta);
                let sin_t = angle_between(&xi, eta).map(f64::sin).unwrap_or(0.0);
                let sin_k = sin_t.powi(d as i32 - 2);
                let q_ball = if zn < rb { 1.0 / (zn * z_ball) } else { 0.0 };
                // f/q with the sin^{-(d-2)} factor cleared from numerator and denominator
                1.0 / (zn * (0.5 * q_polar_scaled + 0.5 * q_ball * sin_k))
            })
            .collect::<Vec<f64>>()
    });
    let w: Vec<f64> = parts.into_iter().flatten().collect();
    Ok(ProbeEstimate::from_weights(r, &w, 1.0))
}

/// Runs [`annulus_probe`] with `η = R·η̂` for each `R` and fits the growth
/// exponent (predicted `d − 1`). Each `R` uses its own derived seed.
pub fn annulus_scaling(eta_dir: &[f64], alpha: f64, r_list: &[f64], n: usize, seed: u64) -> Result<ProbeFit, OscError> {
    let en = norm(eta_dir);
    if !(en > 0.0) {
        return Err(OscError::InvalidInput("eta must be nonzero".into()));
    }
    let mut points = Vec::with_capacity(r_list.len());
    for (i, &r) in r_list.iter().enumerate() {
        let eta: Vec<f64> = eta_dir.iter().map(|v| v * r / en).collect();
        points.push(annulus_probe(&eta, alpha, r, n, derive_seed(seed, i as u64))?);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.r).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    Ok(ProbeFit {
        fit: power_law_fit(&xs, &ys)?,
        predicted: eta_dir.len() as f64 - 1.0,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProbe {
    pub probe: ProbeFit,
    pub s_hat: f64,
    pub prefactor: f64,
}

fn shell_point(rng: &mut ChaCha8Rng, dim: usize, a: f64, b: f64) -> Vec<f64> {
    let k = dim as i32;
    let u: f64 = rng.random();
    let rho = (a.powi(k) + u * (b.powi(k) - a.powi(k))).powf(1.0 / dim as f64);
    unit_vector(rng, dim).into_iter().map(|v| v * rho).collect()
}

/// Shell-restricted tail integral
/// `∬_{R ≤ |ξ|,|η| ≤ 4R} |μ̂(ξ+η)||μ̂(ξ)||μ̂(η)||σ̂_α(tξ, rη)| t^{d-1} r^{d-1} dξ dη`
/// for each `R`, by uniform sampling of both shells; the fitted exponent is
/// reported against `−(3ŝ − 2d − 3)/2`.
#[allow(clippy::too_many_arguments)]
pub fn tail_probe(
    mu: &DiscreteMeasure,
    engine: &SigmaEngine,
    t: f64,
    r: f64,
    r_list: &[f64],
    n: usize,
    seed: u64,
    s_hat: f64,
) -> Result<TailProbe, OscError> {
    let d = mu.dim();
    if engine.dim() != d {
        return Err(OscError::InvalidInput("engine and measure dimensions differ".into()));
    }
    if !(t > 0.0 && r > 0.0) {
        return Err(OscError::InvalidInput("t and r must be positive".into()));
    }
    if n < 2 || r_list.len() < 2 {
        return Err(OscError::InsufficientData {
            needed: 2,
            got: n.min(r_list.len()),
        });
    }
    let df = d as f64;
    let scale_tr = t.powf(df - 1.0) * r.powf(df - 1.0);
    let mut points = Vec::with_capacity(r_list.len());
    for (i, &big_r) in r_list.iter().enumerate() {
        let (a, b) = (big_r, 4.0 * big_r);
        let vol = unit_sphere_area(d) * (b.powi(d as i32) - a.powi(d as i32)) / df;
        let parts = batched(n, derive_seed(seed, i as u64), |rng, range| {
            range
                .map(|_| {
                    let xi = shell_point(rng, d, a, b);
                    let eta = shell_point(rng, d, a, b);
                    let sum: Vec<f64> = xi.iter().zip(&eta).map(|(x, e)| x + e).collect();
                    let m = measure_fourier(mu, &sum).norm()
                        * measure_fourier(mu, &xi).norm()
                        * measure_fourier(mu, &eta).norm();
                    (xi, eta, m)
                })
                .collect::<Vec<_>>()
        });
        let mut w = Vec::with_capacity(n);
        for (xi, eta, m) in parts.into_iter().flatten() {
            if m == 0.0 {
                w.push(0.0);
                continue;
            }
            let fp = FrequencyPair {
                xi: xi.iter().map(|v| v * t).collect(),
                eta: eta.iter().map(|v| v * r).collect(),
            };
            w.push(m * engine.evaluate(&fp)?.abs());
        }
        points.push(ProbeEstimate::from_weights(big_r, &w, vol * vol * scale_tr));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.r).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    Ok(TailProbe {
        probe: ProbeFit {
            fit: power_law_fit(&xs, &ys)?,
            predicted: -(3.0 * s_hat - 2.0 * df - 3.0) / 2.0,
            points,
        },
        s_hat,
        prefactor: tail_prefactor(1.0, t, r, d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillatory::{generic_direction, SigmaMethod};
    use std::f64::consts::PI;

    #[test]
    fn annulus_probe_preconditions() {
        assert!(annulus_probe(&[0.0, 0.0, 0.0, 0.0], 1.0, 4.0, 100, 1).is_err());
        assert!(annulus_probe(&[1.0, 0.0], 1.0, 1.0, 100, 1).is_err());
        assert!(annulus_probe(&[20.0, 0.0, 0.0], 1.0, 4.0, 100, 1).is_err());
    }

    #[test]
    fn annulus_probe_matches_plain_integration() {
        // Oracle: uniform sampling of the bounding cube, no importance weights.
        let alpha = 0.9;
        let eta = [2.0, 0.5, -1.0];
        let r = 2.0;
        let est = annulus_probe(&eta, alpha, r, 200_000, 4).unwrap();
        let g = RotationBlock::new(alpha).unwrap();
        let c: Vec<f64> = g.apply(&eta).into_iter().map(|v| -v).collect();
        let mut rng = crate::rng::stream_rng(99, 0);
        let n = 400_000;
        let side = 4.0;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: Vec<f64> = (0..3).map(|_| side * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let rho = norm(&xi);
            if !(1.0..=4.0).contains(&rho) {
                vals.push(0.0);
                continue;
            }
            let z: Vec<f64> = xi.iter().zip(&c).map(|(a, b)| a - b).collect();
            let s = angle_between(&xi, &eta).unwrap().sin();
            vals.push((2.0 * side).powi(3) / (norm(&z) * s));
        }
        let plain = ProbeEstimate::from_weights(r, &vals, 1.0);
        assert!(
            (est.estimate - plain.estimate).abs() < 4.0 * plain.stderr.hypot(est.stderr),
            "{} vs {} ± {}",
            est.estimate,
            plain.estimate,
            plain.stderr
        );
    }

    #[test]
    fn fitted_c1_bounds_its_calibration_points() {
        let alpha = PI / 4.0;
        let e = SigmaEngine::new(4, alpha, SigmaMethod::Quadrature).unwrap();
        let dirs: Vec<_> = (0..5).map(|s| generic_direction(4, alpha, s)).collect();
        let c1 = fit_c1(&e, &dirs, &[4.0, 8.0, 16.0]).unwrap();
        let pairs: Vec<_> = dirs.iter().map(|d| d.scaled(8.0)).collect();
        let check = check_decay_bound(&e, c1.c1, &pairs).unwrap();
        assert_eq!(check.violations, 0);
        assert!(check.max_ratio <= c1.c1);
    }

    #[test]
    fn tail_probe_reports_symmetric_prefactor() {
        let mu = DiscreteMeasure::point_mass(vec![0.5, 0.5]).unwrap();
        let e = SigmaEngine::new(2, 1.0, SigmaMethod::Quadrature).unwrap();
        let a = tail_probe(&mu, &e, 0.4, 0.9, &[1.0, 2.0], 200, 1, 0.0).unwrap();
        let b = tail_probe(&mu, &e, 0.9, 0.4, &[1.0, 2.0], 200, 1, 0.0).unwrap();
        assert_eq!(a.prefactor, b.prefactor);
        assert_eq!(a.probe.predicted, 3.5);
    }
}
