use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{resonance_distance, FrequencyPair, OscError};
use crate::numeric::{angle_between, composite_gauss_legendre, dot, norm, pairwise_sum, power_law_fit, sphere_fourier};
use crate::rng::{batched, derive_seed, BATCH_SIZE};

/// A point of the incidence manifold `|x| = |y| = 1`, `x·y = cos α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn check_surface_args(dim: usize, alpha: f64) -> Result<(), OscError> {
    if dim < 2 {
        return Err(OscError::InvalidInput(format!("dimension {dim} < 2")));
    }
    if !(alpha > 0.0 && alpha < PI) {
        return Err(OscError::InvalidAlpha(alpha));
    }
    Ok(())
}

fn unit_gaussian(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = norm(out);
        if n > 1e-12 {
            out.iter_mut().for_each(|v| *v /= n);
            return;
        }
    }
}

fn draw_pair(rng: &mut ChaCha8Rng, alpha: f64, x: &mut [f64], y: &mut [f64]) {
    let (s, c) = alpha.sin_cos();
    unit_gaussian(rng, x);
    // w: uniform unit vector in x⊥
    loop {
        for v in y.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let p = dot(y, x);
        y.iter_mut().zip(x.iter()).for_each(|(w, xv)| *w -= p * xv);
        let n = norm(y);
        if n > 1e-9 {
            y.iter_mut()
                .zip(x.iter())
                .for_each(|(w, xv)| *w = c * xv + s * (*w / n));
            return;
        }
    }
}

/// Draws `n` points from the normalized surface measure `σ_α`.
pub fn sample_sigma(dim: usize, alpha: f64, n: usize, seed: u64) -> Result<Vec<SurfaceSample>, OscError> {
    check_surface_args(dim, alpha)?;
    if n == 0 {
        return Err(OscError::InvalidInput("need at least one sample".into()));
    }
    let parts = batched(n, seed, |rng, range| {
        range
            .map(|_| {
                let mut x = vec![0.0; dim];
                let mut y = vec![0.0; dim];
                draw_pair(rng, alpha, &mut x, &mut y);
                SurfaceSample { x, y }
            })
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub value: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
}

impl SigmaEstimate {
    fn exact(value: Complex64) -> Self {
        Self {
            value,
            stderr_re: 0.0,
            stderr_im: 0.0,
        }
    }

    pub fn abs(&self) -> f64 {
        self.value.norm()
    }

    /// Standard error of the complex estimate, `(se_re² + se_im²)^{1/2}`.
    pub fn stderr(&self) -> f64 {
        self.stderr_re.hypot(self.stderr_im)
    }
}

/// How `σ̂_α` is evaluated.
///
/// `Plain` averages `e^{-2πi(x·ξ + y·η)}` over surface samples. `Conditional`
/// integrates the two sphere fibres in closed form and averages the
/// remaining one-dimensional factor over the same samples' `x·η̂`
/// coordinate; it is unbiased with far smaller variance. `Quadrature`
/// evaluates that one-dimensional integral by Gauss–Legendre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaMethod {
    Plain { n: usize, seed: u64 },
    Conditional { n: usize, seed: u64 },
    Quadrature,
}

impl SigmaMethod {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            SigmaMethod::Plain { n, .. } => SigmaMethod::Plain { n, seed },
            SigmaMethod::Conditional { n, .. } => SigmaMethod::Conditional { n, seed },
            SigmaMethod::Quadrature => SigmaMethod::Quadrature,
        }
    }
}

enum Cache {
    Plain { xs: Vec<f64>, ys: Vec<f64> },
    Conditional { p: Vec<f64>, s: Vec<f64> },
    Quadrature,
}

/// Cached evaluator of `σ̂_α` for one `(d, α)`. Samples are drawn once and
/// reused for every frequency pair.
pub struct SigmaEngine {
    dim: usize,
    alpha: f64,
    cache: Cache,
}

#[derive(Clone, Copy)]
struct Reduced {
    a_par: f64,
    a_perp: f64,
    eta: f64,
    eta_sin: f64,
}

impl SigmaEngine {
    pub fn new(dim: usize, alpha: f64, method: SigmaMethod) -> Result<Self, OscError> {
        check_surface_args(dim, alpha)?;
        let cache = match method {
            SigmaMethod::Plain { n, seed } => {
                if n == 0 {
                    return Err(OscError::InvalidInput("need at least one sample".into()));
                }
                let parts = batched(n, seed, |rng, range| {
                    let mut xs = Vec::with_capacity(range.len() * dim);
                    let mut ys = Vec::with_capacity(range.len() * dim);
                    let mut x = vec![0.0; dim];
                    let mut y = vec![0.0; dim];
                    for _ in range {
                        draw_pair(rng, alpha, &mut x, &mut y);
                        xs.extend_from_slice(&x);
                        ys.extend_from_slice(&y);
                    }
                    (xs, ys)
                });
                let (mut xs, mut ys) = (Vec::with_capacity(n * dim), Vec::with_capacity(n * dim));
                for (a, b) in parts {
                    xs.extend(a);
                    ys.extend(b);
                }
                Cache::Plain { xs, ys }
            }
            SigmaMethod::Conditional { n, seed } => {
                Self::check_closed_form(dim)?;
                if n == 0 {
                    return Err(OscError::InvalidInput("need at least one sample".into()));
                }
                let parts = batched(n, seed, |rng, range| {
                    let mut x = vec![0.0; dim];
                    let mut y = vec![0.0; dim];
                    range
                        .map(|_| {
                            draw_pair(rng, alpha, &mut x, &mut y);
                            x[0]
                        })
                        .collect::<Vec<_>>()
                });
                let p: Vec<f64> = parts.into_iter().flatten().collect();
                let s = p.iter().map(|v| (1.0 - v * v).max(0.0).sqrt()).collect();
                Cache::Conditional { p, s }
            }
            SigmaMethod::Quadrature => {
                Self::check_closed_form(dim)?;
                Cache::Quadrature
            }
        };
        Ok(Self { dim, alpha, cache })
    }

    fn check_closed_form(dim: usize) -> Result<(), OscError> {
        if sphere_fourier(dim - 1, 0.0).is_none() {
            return Err(OscError::Unsupported(format!(
                "closed-form fibre integrals need 2 <= d <= 5, got {dim}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of cached samples (zero for quadrature).
    pub fn samples(&self) -> usize {
        match &self.cache {
            Cache::Plain { xs, .. } => xs.len() / self.dim,
            Cache::Conditional { p, .. } => p.len(),
            Cache::Quadrature => 0,
        }
    }

    fn reduce(&self, fp: &FrequencyPair) -> Reduced {
        let c = self.alpha.cos();
        let a: Vec<f64> = fp.xi.iter().zip(&fp.eta).map(|(x, e)| x + c * e).collect();
        let eta = norm(&fp.eta);
        let a2 = dot(&a, &a);
        let a_par = if eta > 0.0 { dot(&a, &fp.eta) / eta } else { a2.sqrt() };
        Reduced {
            a_par,
            a_perp: (a2 - a_par * a_par).max(0.0).sqrt(),
            eta,
            eta_sin: self.alpha.sin() * eta,
        }
    }

    /// `e^{-2πi p a∥} J(s|a⊥|) J(sin α |η| s)` with `s = (1 − p²)^{1/2}`.
    #[inline]
    fn fibre_term(&self, p: f64, s: f64, r: Reduced) -> (f64, f64) {
        let m = self.dim - 1;
        let j1 = sphere_fourier(m, s * r.a_perp).unwrap();
        let j2 = sphere_fourier(m, r.eta_sin * s).unwrap();
        let amp = j1 * j2;
        let (sn, cs) = (2.0 * PI * p * r.a_par).sin_cos();
        (amp * cs, -amp * sn)
    }

    pub fn evaluate(&self, fp: &FrequencyPair) -> Result<SigmaEstimate, OscError> {
        if fp.dim() != self.dim {
            return Err(OscError::InvalidInput(format!(
                "frequency dimension {} != {}",
                fp.dim(),
                self.dim
            )));
        }
        if fp.xi.iter().chain(&fp.eta).all(|&v| v == 0.0) {
            return Ok(SigmaEstimate::exact(Complex64::new(1.0, 0.0)));
        }
        let est = match &self.cache {
            Cache::Plain { xs, ys } => {
                let d = self.dim;
                let sums: Vec<[f64; 4]> = xs
                    .par_chunks(BATCH_SIZE * d)
                    .zip(ys.par_chunks(BATCH_SIZE * d))
                    .map(|(xc, yc)| {
                        let mut acc = [0.0; 4];
                        for (x, y) in xc.chunks_exact(d).zip(yc.chunks_exact(d)) {
                            let ph = 2.0 * PI * (dot(x, &fp.xi) + dot(y, &fp.eta));
                            let (sn, cs) = ph.sin_cos();
                            acc[0] += cs;
                            acc[1] -= sn;
                            acc[2] += cs * cs;
                            acc[3] += sn * sn;
                        }
                        acc
                    })
                    .collect();
                finish(&sums, xs.len() / d)
            }
            Cache::Conditional { p, s } => {
                let r = self.reduce(fp);
                let sums: Vec<[f64; 4]> = p
                    .par_chunks(BATCH_SIZE)
                    .zip(s.par_chunks(BATCH_SIZE))
                    .map(|(pc, sc)| {
                        let mut acc = [0.0; 4];
                        for (&pv, &sv) in pc.iter().zip(sc) {
                            let (re, im) = self.fibre_term(pv, sv, r);
                            acc[0] += re;
                            acc[1] += im;
                            acc[2] += re * re;
                            acc[3] += im * im;
                        }
                        acc
                    })
                    .collect();
                finish(&sums, p.len())
            }
            Cache::Quadrature => SigmaEstimate::exact(self.quadrature(self.reduce(fp))),
        };
        Ok(est)
    }

    fn quadrature(&self, r: Reduced) -> Complex64 {
        let a = (r.a_par * r.a_par + r.a_perp * r.a_perp).sqrt();
        let panels = 16 + (4.0 * (a + r.eta)).ceil() as usize;
        let (nodes, weights) = composite_gauss_legendre(0.0, PI, panels, 16);
        let k = self.dim as i32 - 2;
        let mut re = Vec::with_capacity(nodes.len());
        let mut im = Vec::with_capacity(nodes.len());
        let mut wsum = Vec::with_capacity(nodes.len());
        for (&t, &w) in nodes.iter().zip(&weights) {
            let wt = w * t.sin().powi(k);
            let (fr, fi) = self.fibre_term(t.cos(), t.sin(), r);
            re.push(wt * fr);
            im.push(wt * fi);
            wsum.push(wt);
        }
        let z = pairwise_sum(&wsum);
        let v = Complex64::new(pairwise_sum(&re) / z, pairwise_sum(&im) / z);
        clamp_unit(v)
    }
}

fn clamp_unit(v: Complex64) -> Complex64 {
    let n = v.norm();
    if n > 1.0 {
        v / n
    } else {
        v
    }
}

fn finish(sums: &[[f64; 4]], n: usize) -> SigmaEstimate {
    let col = |k: usize| pairwise_sum(&sums.iter().map(|s| s[k]).collect::<Vec<_>>());
    let nf = n as f64;
    let (mr, mi) = (col(0) / nf, col(1) / nf);
    let se = |sq: f64, mean: f64| {
        if n < 2 {
            0.0
        } else {
            ((sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0) / nf).sqrt()
        }
    };
    SigmaEstimate {
        value: clamp_unit(Complex64::new(mr, mi)),
        stderr_re: se(col(2), mr),
        stderr_im: se(col(3), mi),
    }
}

/// Plain Monte Carlo `σ̂_α(ξ, η)` over `n` fresh surface samples.
pub fn sigma_hat_mc(fp: &FrequencyPair, alpha: f64, n: usize, seed: u64) -> Result<SigmaEstimate, OscError> {
    SigmaEngine::new(fp.dim(), alpha, SigmaMethod::Plain { n, seed })?.evaluate(fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayRegime {
    Generic,
    Resonant,
}

impl DecayRegime {
    pub fn classify(direction: &FrequencyPair, alpha: f64) -> Self {
        let scale = norm(&direction.xi).max(norm(&direction.eta));
        if resonance_distance(direction, alpha) <= 1e-9 * scale {
            DecayRegime::Resonant
        } else {
            DecayRegime::Generic
        }
    }

    pub fn predicted_exponent(self, dim: usize) -> f64 {
        let d = dim as f64;
        match self {
            DecayRegime::Generic => -(2.0 * d - 3.0) / 2.0,
            DecayRegime::Resonant => -(d - 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub r: f64,
    pub abs_sigma: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub direction: FrequencyPair,
    pub alpha: f64,
    pub regime: DecayRegime,
    pub predicted: f64,
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    /// First and last `R` entering the fit.
    pub r_range: (f64, f64),
    pub window: usize,
    /// All evaluated points; those after the noise floor are not fitted.
    pub points: Vec<DecayPoint>,
    pub used: usize,
}

/// Points of the geometric window `R·2^{[-1/2, 1/2]}` around `R`.
pub fn window_scales(window: usize) -> Vec<f64> {
    if window <= 1 {
        return vec![1.0];
    }
    (0..window)
        .map(|j| 2f64.powf(j as f64 / (window - 1) as f64 - 0.5))
        .collect()
}

fn check_geometric(r_list: &[f64]) -> Result<(), OscError> {
    if r_list.len() < 4 {
        return Err(OscError::InsufficientData {
            needed: 4,
            got: r_list.len(),
        });
    }
    if r_list.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(OscError::InvalidInput("R values must be positive".into()));
    }
    let q = r_list[1] / r_list[0];
    let geometric = q > 1.0 && r_list.windows(2).all(|w| ((w[1] / w[0]) - q).abs() <= 1e-9 * q);
    if !geometric {
        return Err(OscError::InvalidInput("R list must be increasing and geometric".into()));
    }
    Ok(())
}

/// Fits `log |σ̂_α(Rξ₀, Rη₀)|` against `log R`.
///
/// With `window > 1`, each `|σ̂|` is replaced by its root-mean-square over
/// `window` geometrically spaced scales in `R·2^{[-1/2, 1/2]}`, which averages
/// out the oscillation of `σ̂` along the ray. The fit stops at the first `R`
/// whose value is within five standard errors of zero.
pub fn decay_exponent_fit(
    engine: &SigmaEngine,
    direction: &FrequencyPair,
    r_list: &[f64],
    window: usize,
) -> Result<DecayFit, OscError> {
    check_geometric(r_list)?;
    let alpha = engine.alpha();
    let regime = DecayRegime::classify(direction, alpha);
    let scales = window_scales(window);
    let mut points = Vec::with_capacity(r_list.len());
    // adjacent octave windows share an endpoint
    let mut seen: Vec<(f64, SigmaEstimate)> = Vec::new();
    for &r in r_list {
        let mut sq = 0.0;
        let mut se2 = 0.0;
        for &s in &scales {
            let lam = r * s;
            let est = match seen.iter().find(|(l, _)| (l - lam).abs() <= 1e-12 * lam) {
                Some((_, e)) => *e,
                None => {
                    let e = engine.evaluate(&direction.scaled(lam))?;
                    seen.push((lam, e));
                    e
                }
            };
            sq += est.abs().powi(2);
            se2 += est.stderr().powi(2);
        }
        let k = scales.len() as f64;
        points.push(DecayPoint {
            r,
            abs_sigma: (sq / k).sqrt(),
            stderr: (se2 / k).sqrt(),
        });
    }
    let used = points
        .iter()
        .position(|p| p.abs_sigma < 5.0 * p.stderr || p.abs_sigma < 1e-13)
        .unwrap_or(points.len());
    if used < 4 {
        return Err(OscError::InsufficientData { needed: 4, got: used });
    }
    let xs: Vec<f64> = points[..used].iter().map(|p| p.r).collect();
    let ys: Vec<f64> = points[..used].iter().map(|p| p.abs_sigma).collect();
    let fit = power_law_fit(&xs, &ys)?;
    Ok(DecayFit {
        direction: direction.clone(),
        alpha,
        regime,
        predicted: regime.predicted_exponent(direction.dim()),
        exponent: fit.slope,
        prefactor: fit.intercept.exp(),
        r_squared: fit.r_squared,
        r_range: (xs[0], xs[used - 1]),
        window: window.max(1),
        points,
        used,
    })
}

/// Random unit pair with angle in `[π/6, 5π/6]` and resonance distance at
/// least `1/2`.
pub fn generic_direction(dim: usize, alpha: f64, seed: u64) -> FrequencyPair {
    let mut rng = crate::rng::stream_rng(derive_seed(seed, 0x6e65), 0);
    let mut xi = vec![0.0; dim];
    let mut eta = vec![0.0; dim];
    loop {
        unit_gaussian(&mut rng, &mut xi);
        unit_gaussian(&mut rng, &mut eta);
        let fp = FrequencyPair {
            xi: xi.clone(),
            eta: eta.clone(),
        };
        let theta = angle_between(&xi, &eta).unwrap_or(0.0);
        if theta.sin() >= 0.5 && resonance_distance(&fp, alpha) >= 0.5 {
            return fp;
        }
    }
}

/// `η₀ = (cos φ, 0', sin φ)`, `ξ₀ = −g_α η₀`.
pub fn resonant_direction(dim: usize, alpha: f64, phi: f64) -> Result<FrequencyPair, OscError> {
    let g = super::RotationBlock::new(alpha)?;
    let mut eta = vec![0.0; dim];
    eta[0] = phi.cos();
    eta[dim - 1] = phi.sin();
    let xi = g.apply(&eta).into_iter().map(|v| -v).collect();
    Ok(FrequencyPair { xi, eta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_lie_on_surface() {
        for d in 2..=5 {
            let alpha = 1.1;
            for s in sample_sigma(d, alpha, 2000, 3).unwrap() {
                assert!((norm(&s.x) - 1.0).abs() <= 1e-10);
                assert!((norm(&s.y) - 1.0).abs() <= 1e-10);
                assert!((dot(&s.x, &s.y) - alpha.cos()).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn planar_fibre_has_two_points() {
        let alpha = PI / 3.0;
        let n = 100_000;
        let samples = sample_sigma(2, alpha, n, 11).unwrap();
        let plus = samples
            .iter()
            .filter(|s| {
                let cross = s.x[0] * s.y[1] - s.x[1] * s.y[0];
                (cross - alpha.sin()).abs() < 1e-9
            })
            .count();
        let minus = samples
            .iter()
            .filter(|s| {
                let cross = s.x[0] * s.y[1] - s.x[1] * s.y[0];
                (cross + alpha.sin()).abs() < 1e-9
            })
            .count();
        assert_eq!(plus + minus, n);
        assert!((plus as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn mean_of_x_is_zero() {
        let n = 100_000;
        let samples = sample_sigma(3, 0.8, n, 5).unwrap();
        for k in 0..3 {
            let m: f64 = samples.iter().map(|s| s.x[k]).sum::<f64>() / n as f64;
            // coordinate variance is 1/d
            assert!(m.abs() < 3.0 * (1.0 / 3.0f64 / n as f64).sqrt());
        }
    }

    #[test]
    fn zero_frequency_is_exactly_one() {
        let fp = FrequencyPair::zero(4);
        let est = sigma_hat_mc(&fp, 1.0, 1000, 1).unwrap();
        assert_eq!(est.value, Complex64::new(1.0, 0.0));
        for m in [SigmaMethod::Conditional { n: 100, seed: 1 }, SigmaMethod::Quadrature] {
            let e = SigmaEngine::new(4, 1.0, m).unwrap();
            assert_eq!(e.evaluate(&fp).unwrap().value, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn negation_conjugates() {
        let fp = FrequencyPair::new(vec![0.4, -0.2, 0.9], vec![0.1, 0.7, -0.3]).unwrap();
        let a = sigma_hat_mc(&fp, 0.9, 20_000, 8).unwrap();
        let b = sigma_hat_mc(&fp.negated(), 0.9, 20_000, 8).unwrap();
        assert!((a.value - b.value.conj()).norm() <= 3.0 * a.stderr());
    }

    #[test]
    fn zero_eta_reduces_to_sphere_transform() {
        let e = SigmaEngine::new(3, 0.7, SigmaMethod::Quadrature).unwrap();
        let fp = FrequencyPair::new(vec![0.3, 1.1, -0.4], vec![0.0; 3]).unwrap();
        let want = sphere_fourier(3, norm(&fp.xi)).unwrap();
        let got = e.evaluate(&fp).unwrap().value;
        assert!((got.re - want).abs() < 1e-12 && got.im.abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn estimators_agree() {
        let alpha = PI / 3.0;
        for d in [2, 3, 4, 5] {
            let dir = generic_direction(d, alpha, d as u64);
            let fp = dir.scaled(1.3);
            let quad = SigmaEngine::new(d, alpha, SigmaMethod::Quadrature)
                .unwrap()
                .evaluate(&fp)
                .unwrap();
            let plain = sigma_hat_mc(&fp, alpha, 200_000, 2).unwrap();
            let cond = SigmaEngine::new(d, alpha, SigmaMethod::Conditional { n: 200_000, seed: 2 })
                .unwrap()
                .evaluate(&fp)
                .unwrap();
            assert!(
                (plain.value - quad.value).norm() <= 4.0 * plain.stderr(),
                "d={d}: plain {} quad {}",
                plain.value,
                quad.value
            );
            assert!(
                (cond.value - quad.value).norm() <= 4.0 * cond.stderr().max(1e-12),
                "d={d}: cond {} quad {}",
                cond.value,
                quad.value
            );
            assert!(cond.stderr() < plain.stderr());
        }
    }

    #[test]
    fn window_scales_span_one_octave() {
        let s = window_scales(9);
        assert_eq!(s.len(), 9);
        assert!((s[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s[8] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(window_scales(1), vec![1.0]);
    }

    #[test]
    fn regimes_and_predictions() {
        let alpha = PI / 3.0;
        let res = resonant_direction(4, alpha, 0.4).unwrap();
        assert_eq!(DecayRegime::classify(&res, alpha), DecayRegime::Resonant);
        let gen = generic_direction(4, alpha, 9);
        assert_eq!(DecayRegime::classify(&gen, alpha), DecayRegime::Generic);
        assert_eq!(DecayRegime::Generic.predicted_exponent(4), -2.5);
        assert_eq!(DecayRegime::Resonant.predicted_exponent(4), -2.0);
    }

    #[test]
    fn decay_fit_rejects_short_or_irregular_lists() {
        let e = SigmaEngine::new(4, 1.0, SigmaMethod::Quadrature).unwrap();
        let dir = generic_direction(4, 1.0, 1);
        assert!(decay_exponent_fit(&e, &dir, &[8.0, 16.0, 32.0], 1).is_err());
        assert!(decay_exponent_fit(&e, &dir, &[8.0, 16.0, 30.0, 64.0], 1).is_err());
    }

    #[test]
    fn resonant_decay_matches_prediction() {
        let alpha = PI / 3.0;
        let e = SigmaEngine::new(4, alpha, SigmaMethod::Quadrature).unwrap();
        let dir = resonant_direction(4, alpha, 0.3).unwrap();
        let fit = decay_exponent_fit(&e, &dir, &[8.0, 16.0, 32.0, 64.0], 9).unwrap();
        assert!((fit.exponent + 2.0).abs() < 0.3, "{}", fit.exponent);
    }
}
