//! Discrete stand-ins for Frostman measures: weighted point clouds, the
//! generators that build them, mollification, Frostman exponent fits and the
//! Fourier transform of an atomic measure.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{weighted::WeightedAliasIndex, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{composite_gauss_legendre, power_law_fit, unit_sphere_area, FitError};
use crate::rng::{batched, stream_rng};

/// Largest number of atoms a generator will emit.
pub const MAX_GENERATED_POINTS: usize = 1 << 24;
const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("insufficient data: need at least {needed} radii, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid radii: {0}")]
    InvalidRadii(String),
    #[error("invalid mollifier: {0}")]
    InvalidMollifier(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned box `[lo, hi]` declared to contain the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn unit_cube(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    pub fn hull(dim: usize, points: &[Vec<f64>]) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Self { lo, hi }
    }

    fn expanded(&self, by: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|v| v - by).collect(),
            hi: self.hi.iter().map(|v| v + by).collect(),
        }
    }
}

#[derive(Deserialize)]
struct RawMeasure {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    #[serde(default)]
    bounds: Option<BoundingBox>,
}

/// Weighted point cloud approximating a compactly supported probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure")]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    bounds: BoundingBox,
}

impl TryFrom<RawMeasure> for DiscreteMeasure {
    type Error = MeasureError;

    fn try_from(raw: RawMeasure) -> Result<Self, Self::Error> {
        match raw.bounds {
            Some(b) => Self::with_bounds(raw.dim, raw.points, raw.weights, b),
            None => Self::new(raw.dim, raw.points, raw.weights),
        }
    }
}

impl DiscreteMeasure {
    /// Builds a measure whose declared box is the unit cube when the points fit
    /// in it, and the tight hull of the points otherwise.
    pub fn new(dim: usize, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        let unit = BoundingBox::unit_cube(dim);
        let bounds = if points.iter().any(|p| p.len() != dim) || points.iter().all(|p| unit.contains(p)) {
            unit
        } else {
            BoundingBox::hull(dim, &points)
        };
        Self::with_bounds(dim, points, weights, bounds)
    }

    pub fn with_bounds(
        dim: usize,
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        bounds: BoundingBox,
    ) -> Result<Self, MeasureError> {
        let bad = |m: String| Err(MeasureError::InvalidMeasure(m));
        if dim == 0 {
            return bad("dimension must be positive".into());
        }
        if points.is_empty() {
            return bad("at least one point is required".into());
        }
        if points.len() != weights.len() {
            return bad(format!("{} points but {} weights", points.len(), weights.len()));
        }
        if bounds.lo.len() != dim || bounds.hi.len() != dim {
            return bad("bounding box dimension mismatch".into());
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return bad(format!("point {i} has {} coordinates, expected {dim}", p.len()));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return bad(format!("point {i} has a non-finite coordinate"));
            }
            if !bounds.contains(p) {
                return bad(format!("point {i} lies outside the declared bounding box"));
            }
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
        {
            return bad(format!("weight {i} is {w}"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return bad(format!("weights sum to {total}, expected 1"));
        }
        Ok(Self {
            dim,
            points,
            weights,
            bounds,
        })
    }

    /// Equal weights on the given points.
    pub fn uniform(dim: usize, points: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        let n = points.len().max(1);
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn point_mass(point: Vec<f64>) -> Result<Self, MeasureError> {
        let dim = point.len();
        Self::new(dim, vec![point], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bounds(&self) -> &BoundingBox {
        &self.bounds
    }

    pub fn mass_of(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.weights[i]).sum()
    }

    pub fn has_equal_weights(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| *w == w0)
    }

    /// Normalized restriction to a subset of atoms.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self, MeasureError> {
        let mass = self.mass_of(indices);
        if !(mass > 0.0) {
            return Err(MeasureError::InvalidMeasure("restriction has zero mass".into()));
        }
        let points = indices.iter().map(|&i| self.points[i].clone()).collect();
        let mut weights: Vec<f64> = indices.iter().map(|&i| self.weights[i] / mass).collect();
        // absorb the rounding so the invariant holds to the last bit we can manage
        let drift = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        Self::with_bounds(self.dim, points, weights, self.bounds.clone())
    }

    /// Index sampler following the weights.
    pub fn sampler(&self) -> IndexSampler {
        if self.has_equal_weights() {
            IndexSampler::Uniform(self.len())
        } else {
            IndexSampler::Alias(WeightedAliasIndex::new(self.weights.clone()).expect("validated weights"))
        }
    }

    pub fn to_json(&self) -> Result<String, MeasureError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MeasureError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Draws atom indices with probability equal to their weight.
pub enum IndexSampler {
    Uniform(usize),
    Alias(WeightedAliasIndex<f64>),
}

impl IndexSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            IndexSampler::Uniform(n) => rng.random_range(0..*n),
            IndexSampler::Alias(a) => a.sample(rng),
        }
    }
}

/// Axis-aligned Cantor product: at every level each interval keeps its two
/// end pieces of relative length `ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CantorSpec {
    pub dim: usize,
    pub ratio: f64,
    pub depth: u32,
    #[serde(default)]
    pub seed: u64,
    /// Perturb every atom by at most `ratio^depth / 10` per coordinate.
    #[serde(default)]
    pub jitter: bool,
}

impl CantorSpec {
    /// `d · ln 2 / ln(1/a)`.
    pub fn nominal_dimension(&self) -> f64 {
        self.dim as f64 * 2f64.ln() / (1.0 / self.ratio).ln()
    }

    fn validate(&self) -> Result<(), MeasureError> {
        if !(self.ratio > 0.0 && self.ratio < 0.5) {
            return Err(MeasureError::InvalidSpec(format!(
                "ratio {} outside (0, 1/2)",
                self.ratio
            )));
        }
        if self.dim == 0 || self.depth == 0 {
            return Err(MeasureError::InvalidSpec("dim and depth must be at least 1".into()));
        }
        let bits = self.dim as u64 * self.depth as u64;
        if bits > MAX_GENERATED_POINTS.trailing_zeros() as u64 {
            return Err(MeasureError::InvalidSpec(format!(
                "2^{bits} atoms exceeds the generator limit"
            )));
        }
        Ok(())
    }
}

pub fn gen_cantor_product(spec: &CantorSpec) -> Result<DiscreteMeasure, MeasureError> {
    spec.validate()?;
    let side = spec.ratio.powi(spec.depth as i32);
    // left endpoints of the 2^depth surviving intervals on [0, 1]
    let mut lefts = vec![0.0f64];
    let mut len = 1.0;
    for _ in 0..spec.depth {
        let child = len * spec.ratio;
        lefts = lefts.iter().flat_map(|&l| [l, l + len - child]).collect();
        len = child;
    }
    let centers: Vec<f64> = lefts.iter().map(|l| l + 0.5 * side).collect();
    let per_axis = centers.len();
    let count = per_axis.pow(spec.dim as u32);
    let mut rng = stream_rng(spec.seed, 0);
    let mut points = Vec::with_capacity(count);
    let mut idx = vec![0usize; spec.dim];
    for _ in 0..count {
        let mut p: Vec<f64> = idx.iter().map(|&i| centers[i]).collect();
        if spec.jitter {
            for c in p.iter_mut() {
                *c += rng.random_range(-1.0..=1.0) * side / 10.0;
            }
        }
        points.push(p);
        for k in (0..spec.dim).rev() {
            idx[k] += 1;
            if idx[k] < per_axis {
                break;
            }
            idx[k] = 0;
        }
    }
    let w = 1.0 / count as f64;
    DiscreteMeasure::with_bounds(spec.dim, points, vec![w; count], BoundingBox::unit_cube(spec.dim))
}

pub fn gen_uniform_cube(dim: usize, n_points: usize, seed: u64) -> Result<DiscreteMeasure, MeasureError> {
    if dim == 0 || n_points == 0 {
        return Err(MeasureError::InvalidSpec(
            "uniform cube needs dim >= 1 and n_points >= 1".into(),
        ));
    }
    if n_points > MAX_GENERATED_POINTS {
        return Err(MeasureError::InvalidSpec(format!(
            "{n_points} points exceeds the generator limit"
        )));
    }
    let points: Vec<Vec<f64>> = batched(n_points, seed, |rng, range| {
        range
            .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let w = 1.0 / n_points as f64;
    let mut weights = vec![w; n_points];
    // n * (1/n) may miss 1 by a few ulps for large n
    let drift = 1.0 - weights.iter().sum::<f64>();
    if drift.abs() > MASS_TOLERANCE {
        weights[0] += drift;
    }
    DiscreteMeasure::with_bounds(dim, points, weights, BoundingBox::unit_cube(dim))
}

/// Declarative generator description, as read from a JSON spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Cantor {
        dim: usize,
        ratio: f64,
        depth: u32,
        #[serde(default)]
        jitter: bool,
    },
    Uniform {
        dim: usize,
        n_points: usize,
    },
    PointMass {
        point: Vec<f64>,
    },
    Atoms {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl MeasureSpec {
    pub fn dim(&self) -> usize {
        match self {
            MeasureSpec::Cantor { dim, .. } | MeasureSpec::Uniform { dim, .. } => *dim,
            MeasureSpec::PointMass { point } => point.len(),
            MeasureSpec::Atoms { points, .. } => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<DiscreteMeasure, MeasureError> {
        match self {
            MeasureSpec::Cantor {
                dim,
                ratio,
                depth,
                jitter,
            } => gen_cantor_product(&CantorSpec {
                dim: *dim,
                ratio: *ratio,
                depth: *depth,
                seed,
                jitter: *jitter,
            }),
            MeasureSpec::Uniform { dim, n_points } => gen_uniform_cube(*dim, *n_points, seed),
            MeasureSpec::PointMass { point } => DiscreteMeasure::point_mass(point.clone()),
            MeasureSpec::Atoms { points, weights } => DiscreteMeasure::new(self.dim(), points.clone(), weights.clone()),
        }
    }
}

/// Fitted Frostman profile `μ(B(x, r)) ≤ c_hat · r^s_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrostmanEstimate {
    pub s_hat: f64,
    pub c_hat: f64,
    /// Largest amount (in natural log units) by which a measured ball mass
    /// exceeds the fitted line.
    pub residual: f64,
    pub radii: Vec<f64>,
    pub max_masses: Vec<f64>,
}

/// Which centers the ball masses are evaluated at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenterPlan {
    /// Every atom, or an evenly strided subset of at most `max_centers` atoms.
    Subsample {
        max_centers: usize,
    },
    AllPoints,
    Explicit {
        centers: Vec<Vec<f64>>,
    },
}

impl Default for CenterPlan {
    fn default() -> Self {
        CenterPlan::Subsample { max_centers: 512 }
    }
}

impl CenterPlan {
    fn centers(&self, mu: &DiscreteMeasure) -> Vec<Vec<f64>> {
        match self {
            CenterPlan::AllPoints => mu.points.clone(),
            CenterPlan::Subsample { max_centers } => {
                let n = mu.len();
                let k = (*max_centers).clamp(1, n);
                (0..k).map(|j| mu.points[j * n / k].clone()).collect()
            }
            CenterPlan::Explicit { centers } => centers.clone(),
        }
    }
}

/// Closed-ball mass `μ(B(center, r))`.
pub fn ball_mass(mu: &DiscreteMeasure, center: &[f64], r: f64) -> f64 {
    let r2 = r * r;
    mu.points
        .iter()
        .zip(&mu.weights)
        .filter(|(p, _)| sq_dist(p, center) <= r2)
        .map(|(_, w)| *w)
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Maximum ball mass over `centers` for each radius.
pub fn max_ball_masses(mu: &DiscreteMeasure, radii: &[f64], centers: &[Vec<f64>]) -> Vec<f64> {
    let per_center: Vec<Vec<f64>> = centers
        .par_iter()
        .map(|c| {
            let d2: Vec<f64> = mu.points.iter().map(|p| sq_dist(p, c)).collect();
            radii
                .iter()
                .map(|r| {
                    let r2 = r * r;
                    d2.iter()
                        .zip(&mu.weights)
                        .filter(|(d, _)| **d <= r2)
                        .map(|(_, w)| *w)
                        .sum()
                })
                .collect()
        })
        .collect();
    (0..radii.len())
        .map(|j| per_center.iter().map(|m| m[j]).fold(0.0, f64::max))
        .collect()
}

pub fn estimate_frostman(
    mu: &DiscreteMeasure,
    radii: &[f64],
    plan: &CenterPlan,
) -> Result<FrostmanEstimate, MeasureError> {
    if radii.len() < 4 {
        return Err(MeasureError::InsufficientData {
            needed: 4,
            got: radii.len(),
        });
    }
    if radii.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(MeasureError::InvalidRadii("radii must lie in (0, 1]".into()));
    }
    if radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(MeasureError::InvalidRadii("radii must be strictly decreasing".into()));
    }
    let centers = plan.centers(mu);
    let masses = max_ball_masses(mu, radii, &centers);
    let fit = power_law_fit(radii, &masses)?;
    let s_hat = fit.slope.clamp(0.0, mu.dim as f64);
    let logs: Vec<(f64, f64)> = radii.iter().zip(&masses).map(|(r, m)| (r.ln(), m.ln())).collect();
    let intercept = logs.iter().map(|(lr, lm)| lm - s_hat * lr).sum::<f64>() / logs.len() as f64;
    let residual = logs
        .iter()
        .map(|(lr, lm)| lm - (intercept + s_hat * lr))
        .fold(f64::NEG_INFINITY, f64::max);
    let c_hat = radii
        .iter()
        .zip(&masses)
        .map(|(r, m)| m / r.powf(s_hat))
        .fold(0.0, f64::max);
    Ok(FrostmanEstimate {
        s_hat,
        c_hat,
        residual,
        radii: radii.to_vec(),
        max_masses: masses,
    })
}

/// Largest `ln(μ(B(x, r)) / (c · r^s))` over the given centers. Positive
/// values certify that the declared profile `(s, c)` fails at scale `r`.
pub fn profile_violation(mu: &DiscreteMeasure, s: f64, c: f64, r: f64, centers: &[Vec<f64>]) -> f64 {
    let m = max_ball_masses(mu, &[r], centers)[0];
    if m <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (m / (c * r.powf(s))).ln()
}

/// Smooth bump profiles supported in the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpProfile {
    /// `c · exp(-1 / (1 - |x|²))` on `|x| < 1`.
    #[default]
    Standard,
}

impl BumpProfile {
    fn shape(self, r2: f64) -> f64 {
        match self {
            BumpProfile::Standard => {
                if r2 < 1.0 {
                    (-1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    fn radial_integral(self, dim: usize, panels: usize) -> f64 {
        let (x, w) = composite_gauss_legendre(0.0, 1.0, panels, 16);
        x.iter()
            .zip(&w)
            .map(|(r, w)| w * r.powi(dim as i32 - 1) * self.shape(r * r))
            .sum::<f64>()
            * unit_sphere_area(dim)
    }

    /// Normalizing constant `c` so that the profile integrates to one in `R^dim`.
    /// The quadrature is repeated at twice the resolution and must agree to 1e-9.
    pub fn normalization(self, dim: usize) -> Result<f64, MeasureError> {
        let coarse = self.radial_integral(dim, 64);
        let fine = self.radial_integral(dim, 128);
        if ((coarse - fine) / fine).abs() > 1e-9 {
            return Err(MeasureError::InvalidMollifier(format!(
                "profile normalization did not converge ({coarse} vs {fine})"
            )));
        }
        Ok(1.0 / fine)
    }

    /// Normalized density at `x`.
    pub fn density(self, x: &[f64], normalization: f64) -> f64 {
        normalization * self.shape(x.iter().map(|v| v * v).sum())
    }

    /// Draws a point from the normalized profile by rejection from the uniform ball.
    pub fn sample<R: Rng + ?Sized>(self, dim: usize, rng: &mut R) -> Vec<f64> {
        let peak = self.shape(0.0);
        loop {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn == 0.0 {
                continue;
            }
            let radius = rng.random::<f64>().powf(1.0 / dim as f64);
            let p: Vec<f64> = g.iter().map(|v| v / gn * radius).collect();
            if rng.random::<f64>() * peak < self.shape(radius * radius) {
                return p;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub profile: BumpProfile,
}

impl MollifierSpec {
    pub fn new(epsilon: f64) -> Result<Self, MeasureError> {
        let spec = Self {
            epsilon,
            profile: BumpProfile::Standard,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(MeasureError::InvalidMollifier(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// One draw from `μ ∗ φ_ε`, atom by atom: every atom is displaced by an
/// independent sample of `φ_ε` and keeps its weight.
///
/// The unit displacements depend only on `seed` and the atom index, so calls
/// that differ only in `ε` use common random numbers.
pub fn mollify_sample(mu: &DiscreteMeasure, moll: &MollifierSpec, seed: u64) -> Result<DiscreteMeasure, MeasureError> {
    moll.validate()?;
    moll.profile.normalization(mu.dim)?;
    let dim = mu.dim;
    let eps = moll.epsilon;
    let points: Vec<Vec<f64>> = batched(mu.len(), seed, |rng, range| {
        range
            .map(|i| {
                let d = moll.profile.sample(dim, rng);
                mu.points[i]
                    .iter()
                    .zip(&d)
                    .map(|(p, v)| p + eps * v)
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    Ok(DiscreteMeasure {
        dim,
        points,
        weights: mu.weights.clone(),
        bounds: mu.bounds.expanded(eps),
    })
}

/// `Σ wᵢ e^{-2πi xᵢ·ξ}`.
pub fn measure_fourier(mu: &DiscreteMeasure, xi: &[f64]) -> Complex64 {
    assert_eq!(xi.len(), mu.dim, "frequency dimension mismatch");
    let mut re = 0.0;
    let mut im = 0.0;
    for (p, w) in mu.points.iter().zip(&mu.weights) {
        let phase = 2.0 * PI * p.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        let (s, c) = phase.sin_cos();
        re += w * c;
        im -= w * s;
    }
    Complex64::new(re, im)
}
