//! Triangle classes `(t, r, α)` of point triples, the pushforward of a triple
//! product measure onto them, and coverage and incidence statistics.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{mollify_sample, DiscreteMeasure, MeasureError, MollifierSpec};
use crate::numeric::{angle_between, norm, pairwise_sum, power_law_fit, sub, FitError, ScalingFit};
use crate::rng::{derive_seed, stream_rng, BATCH_SIZE};

/// Angles this close to 0 or π count as collinear.
pub const DEGENERATE_ANGLE_TOL: f64 = 1e-12;
/// Largest triple count exact enumeration accepts.
pub const MAX_EXACT_TRIPLES: u128 = 100_000_000;
const SLAB_TOL: f64 = 1e-12;
/// Fixed-point scale for exact-mode accumulation; integer sums make the
/// result independent of enumeration order.
const FIXED_SCALE: f64 = 1.329_227_995_784_916e36; // 2^120

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("degenerate triple: {0}")]
    DegenerateTriple(&'static str),
    #[error("invalid bin edges: {0}")]
    InvalidEdges(String),
    #[error("exact enumeration of {0} triples exceeds the limit of {MAX_EXACT_TRIPLES}")]
    TooManyTriples(u128),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("insufficient data: {got} usable points, need {needed}")]
    InsufficientData { needed: usize, got: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Congruence class of a triangle: sides `t = |x − z|`, `r = |y − z|` and the
/// angle `α` between them at `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleClass {
    pub t: f64,
    pub r: f64,
    pub alpha: f64,
}

pub fn triangle_map(x: &[f64], y: &[f64], z: &[f64]) -> Result<TriangleClass, ConfigError> {
    let u = sub(x, z);
    let v = sub(y, z);
    let (t, r) = (norm(&u), norm(&v));
    if !(t > 0.0) || !(r > 0.0) {
        return Err(ConfigError::DegenerateTriple("coincident vertex"));
    }
    let alpha = angle_between(&u, &v).ok_or(ConfigError::DegenerateTriple("coincident vertex"))?;
    if !(DEGENERATE_ANGLE_TOL..=PI - DEGENERATE_ANGLE_TOL).contains(&alpha) {
        return Err(ConfigError::DegenerateTriple("collinear through the vertex"));
    }
    Ok(TriangleClass { t, r, alpha })
}

/// Planar representative `z = 0`, `x = t e₁`, `y = r (cos α, sin α, 0, …)`.
pub fn reconstruct(class: &TriangleClass, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert!(dim >= 2);
    let z = vec![0.0; dim];
    let mut x = z.clone();
    x[0] = class.t;
    let mut y = z.clone();
    y[0] = class.r * class.alpha.cos();
    y[1] = class.r * class.alpha.sin();
    (x, y, z)
}

/// Strictly increasing bin boundaries along the three axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub edges_t: Vec<f64>,
    pub edges_r: Vec<f64>,
    pub edges_alpha: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

impl BinSpec {
    /// `n` equal bins per axis over the given ranges.
    pub fn regular(t: (f64, f64), r: (f64, f64), alpha: (f64, f64), n: [usize; 3]) -> Result<Self, ConfigError> {
        let spec = Self {
            edges_t: linspace(t.0, t.1, n[0]),
            edges_r: linspace(r.0, r.1, n[1]),
            edges_alpha: linspace(alpha.0, alpha.1, n[2]),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 32³ bins over `(0, √d]² × (0, π)`.
    pub fn default_for(dim: usize) -> Self {
        let diam = (dim as f64).sqrt();
        Self::regular((0.0, diam), (0.0, diam), (0.0, PI), [32, 32, 32]).expect("valid default")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, e) in [("t", &self.edges_t), ("r", &self.edges_r), ("alpha", &self.edges_alpha)] {
            if e.len() < 2 {
                return Err(ConfigError::InvalidEdges(format!("{name}: need at least two edges")));
            }
            if e.iter().any(|v| !v.is_finite()) || e.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(ConfigError::InvalidEdges(format!(
                    "{name}: edges must be finite and strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [
            self.edges_t.len() - 1,
            self.edges_r.len() - 1,
            self.edges_alpha.len() - 1,
        ]
    }

    /// Flat row-major (t, r, α) index of the half-open bin holding `c`.
    pub fn locate(&self, c: &TriangleClass) -> Option<usize> {
        let [_, nr, na] = self.shape();
        let i = bin_of(&self.edges_t, c.t)?;
        let j = bin_of(&self.edges_r, c.r)?;
        let k = bin_of(&self.edges_alpha, c.alpha)?;
        Some((i * nr + j) * na + k)
    }
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    if !(v >= edges[0] && v < edges[edges.len() - 1]) {
        return None;
    }
    Some(edges.partition_point(|e| *e <= v) - 1)
}

/// Binned approximation of the configuration measure. Mass that falls outside
/// the edges or on degenerate triples is kept in its own bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigHistogram {
    pub edges_t: Vec<f64>,
    pub edges_r: Vec<f64>,
    pub edges_alpha: Vec<f64>,
    /// Row-major over (t, r, α).
    pub mass: Vec<f64>,
    pub out_of_range: f64,
    pub excluded: f64,
    /// Number of Monte Carlo draws, absent for exact enumeration.
    pub samples: Option<u64>,
}

impl ConfigHistogram {
    fn empty(bins: &BinSpec) -> Self {
        let [a, b, c] = bins.shape();
        Self {
            edges_t: bins.edges_t.clone(),
            edges_r: bins.edges_r.clone(),
            edges_alpha: bins.edges_alpha.clone(),
            mass: vec![0.0; a * b * c],
            out_of_range: 0.0,
            excluded: 0.0,
            samples: None,
        }
    }

    pub fn bins(&self) -> BinSpec {
        BinSpec {
            edges_t: self.edges_t.clone(),
            edges_r: self.edges_r.clone(),
            edges_alpha: self.edges_alpha.clone(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.bins().shape()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, nr, na] = self.shape();
        (i * nr + j) * na + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.mass[self.index(i, j, k)]
    }

    /// Binned mass.
    pub fn total(&self) -> f64 {
        pairwise_sum(&self.mass)
    }

    /// Binomial standard error of each bin, for Monte Carlo histograms.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let n = self.samples? as f64;
        Some(self.mass.iter().map(|p| (p * (1.0 - p) / n).max(0.0).sqrt()).collect())
    }

    /// Rows of `t, r, alpha, mass[, stderr]` at bin centres, one per bin.
    pub fn csv_rows(&self) -> Vec<String> {
        let [nt, nr, na] = self.shape();
        let se = self.standard_errors();
        let mid = |e: &[f64], i: usize| 0.5 * (e[i] + e[i + 1]);
        let mut rows = Vec::with_capacity(self.mass.len());
        for i in 0..nt {
            for j in 0..nr {
                for k in 0..na {
                    let idx = self.index(i, j, k);
                    let mut row = format!(
                        "{},{},{},{}",
                        mid(&self.edges_t, i),
                        mid(&self.edges_r, j),
                        mid(&self.edges_alpha, k),
                        self.mass[idx]
                    );
                    if let Some(se) = &se {
                        row.push_str(&format!(",{}", se[idx]));
                    }
                    rows.push(row);
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    Exact,
    MonteCarlo { n: u64, seed: u64 },
}

fn same_dim(ms: &[&DiscreteMeasure]) -> Result<usize, ConfigError> {
    let d = ms[0].dim();
    if ms.iter().any(|m| m.dim() != d) {
        return Err(ConfigError::DimensionMismatch(
            ms.iter().map(|m| m.dim().to_string()).collect::<Vec<_>>().join(" vs "),
        ));
    }
    Ok(d)
}

/// Where a triple lands: a bin, outside the edges, or nowhere (degenerate).
enum Slot {
    Bin(usize),
    Outside,
    Excluded,
}

fn slot(bins: &BinSpec, x: &[f64], y: &[f64], z: &[f64]) -> Slot {
    match triangle_map(x, y, z) {
        Ok(c) => bins.locate(&c).map_or(Slot::Outside, Slot::Bin),
        Err(_) => Slot::Excluded,
    }
}

/// Pushes `mu1 × mu2 × mu3` forward under `(x, y, z) ↦ (|x−z|, |y−z|, α(x,z,y))`.
pub fn pushforward_histogram(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    bins: &BinSpec,
    sampling: Sampling,
) -> Result<ConfigHistogram, ConfigError> {
    same_dim(&[mu1, mu2, mu3])?;
    bins.validate()?;
    match sampling {
        Sampling::Exact => exact_histogram(mu1, mu2, mu3, bins),
        Sampling::MonteCarlo { n, seed } => mc_histogram(mu1, mu2, mu3, bins, n, seed),
    }
}

fn exact_histogram(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    bins: &BinSpec,
) -> Result<ConfigHistogram, ConfigError> {
    let count = mu1.len() as u128 * mu2.len() as u128 * mu3.len() as u128;
    if count > MAX_EXACT_TRIPLES {
        return Err(ConfigError::TooManyTriples(count));
    }
    let nbins = bins.shape().iter().product::<usize>();
    let add = |mut a: Vec<u128>, b: Vec<u128>| {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
        a
    };
    // two trailing slots hold out-of-range and excluded mass
    let acc = (0..mu1.len())
        .into_par_iter()
        .fold(
            || vec![0u128; nbins + 2],
            |mut acc, i| {
                let x = mu1.point(i);
                let wx = mu1.weights()[i];
                for (j, y) in mu2.points().iter().enumerate() {
                    let wxy = wx * mu2.weights()[j];
                    for (k, z) in mu3.points().iter().enumerate() {
                        let w = ((wxy * mu3.weights()[k]) * FIXED_SCALE) as u128;
                        let at = match slot(bins, x, y, z) {
                            Slot::Bin(b) => b,
                            Slot::Outside => nbins,
                            Slot::Excluded => nbins + 1,
                        };
                        acc[at] += w;
                    }
                }
                acc
            },
        )
        .reduce(|| vec![0u128; nbins + 2], add);
    let mut hist = ConfigHistogram::empty(bins);
    for (m, a) in hist.mass.iter_mut().zip(&acc) {
        *m = *a as f64 / FIXED_SCALE;
    }
    hist.out_of_range = acc[nbins] as f64 / FIXED_SCALE;
    hist.excluded = acc[nbins + 1] as f64 / FIXED_SCALE;
    Ok(hist)
}

/// Counts per bin (plus the two overflow slots) over `n` weighted triple draws.
/// Integer counts make the parallel reduction order irrelevant.
fn mc_counts<F>(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    n: u64,
    seed: u64,
    slots: usize,
    classify: F,
) -> Vec<u64>
where
    F: Fn(&[f64], &[f64], &[f64], &mut Vec<u64>) + Sync,
{
    let (s1, s2, s3) = (mu1.sampler(), mu2.sampler(), mu3.sampler());
    let batches = (n as usize).div_ceil(BATCH_SIZE);
    (0..batches)
        .into_par_iter()
        .fold(
            || vec![0u64; slots],
            |mut acc, b| {
                let mut rng = stream_rng(seed, b as u64);
                let len = BATCH_SIZE.min(n as usize - b * BATCH_SIZE);
                for _ in 0..len {
                    let i = s1.sample(&mut rng);
                    let j = s2.sample(&mut rng);
                    let k = s3.sample(&mut rng);
                    classify(mu1.point(i), mu2.point(j), mu3.point(k), &mut acc);
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; slots],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        )
}

fn mc_histogram(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    bins: &BinSpec,
    n: u64,
    seed: u64,
) -> Result<ConfigHistogram, ConfigError> {
    if n == 0 {
        return Err(ConfigError::InvalidQuery(
            "Monte Carlo needs at least one sample".into(),
        ));
    }
    let nbins = bins.shape().iter().product::<usize>();
    let counts = mc_counts(mu1, mu2, mu3, n, seed, nbins + 2, |x, y, z, acc| {
        let at = match slot(bins, x, y, z) {
            Slot::Bin(b) => b,
            Slot::Outside => nbins,
            Slot::Excluded => nbins + 1,
        };
        acc[at] += 1;
    });
    let nf = n as f64;
    let mut hist = ConfigHistogram::empty(bins);
    for (m, c) in hist.mass.iter_mut().zip(&counts) {
        *m = *c as f64 / nf;
    }
    hist.out_of_range = counts[nbins] as f64 / nf;
    hist.excluded = counts[nbins + 1] as f64 / nf;
    hist.samples = Some(n);
    Ok(hist)
}

/// Closed sub-ranges of the three axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBox {
    pub t: (f64, f64),
    pub r: (f64, f64),
    pub alpha: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub bins_in_box: usize,
    pub occupied: usize,
    pub fraction: f64,
    pub covered: bool,
    /// Bin index ranges `[lo, hi)` per axis of the largest fully occupied sub-box.
    pub largest_subbox: Option<[(usize, usize); 3]>,
    pub largest_subbox_bins: usize,
}

/// Indices of bins lying entirely inside `[lo, hi]`.
fn bins_within(edges: &[f64], (lo, hi): (f64, f64)) -> Vec<usize> {
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    (0..edges.len() - 1)
        .filter(|&i| edges[i] >= lo - tol && edges[i + 1] <= hi + tol)
        .collect()
}

pub fn interior_probe(hist: &ConfigHistogram, bx: &ProbeBox, min_mass: f64) -> CoverageReport {
    let it = bins_within(&hist.edges_t, bx.t);
    let ir = bins_within(&hist.edges_r, bx.r);
    let ia = bins_within(&hist.edges_alpha, bx.alpha);
    let (a, b, c) = (it.len(), ir.len(), ia.len());
    let total = a * b * c;
    if total == 0 {
        return CoverageReport {
            bins_in_box: 0,
            occupied: 0,
            fraction: 0.0,
            covered: false,
            largest_subbox: None,
            largest_subbox_bins: 0,
        };
    }
    let occ = |i: usize, j: usize, k: usize| {
        let m = hist.get(it[i], ir[j], ia[k]);
        m > 0.0 && m >= min_mass
    };
    // 3-D prefix sums of the occupancy indicator
    let idx = |i: usize, j: usize, k: usize| (i * (b + 1) + j) * (c + 1) + k;
    let mut pre = vec![0usize; (a + 1) * (b + 1) * (c + 1)];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                pre[idx(i + 1, j + 1, k + 1)] = occ(i, j, k) as usize
                    + pre[idx(i, j + 1, k + 1)]
                    + pre[idx(i + 1, j, k + 1)]
                    + pre[idx(i + 1, j + 1, k)]
                    + pre[idx(i, j, k)]
                    - pre[idx(i, j, k + 1)]
                    - pre[idx(i, j + 1, k)]
                    - pre[idx(i + 1, j, k)];
            }
        }
    }
    let occupied = pre[idx(a, b, c)];
    let column = |i0: usize, i1: usize, j0: usize, j1: usize, k: usize| {
        let s = |i, j| pre[idx(i, j, k + 1)] - pre[idx(i, j, k)];
        s(i1, j1) + s(i0, j0) - s(i0, j1) - s(i1, j0)
    };
    let mut best: Option<[(usize, usize); 3]> = None;
    let mut best_bins = 0;
    for i0 in 0..a {
        for i1 in i0 + 1..=a {
            for j0 in 0..b {
                for j1 in j0 + 1..=b {
                    let area = (i1 - i0) * (j1 - j0);
                    if area * c <= best_bins {
                        continue;
                    }
                    let mut run_start = 0;
                    for k in 0..=c {
                        if k == c || column(i0, i1, j0, j1, k) != area {
                            let len = k - run_start;
                            if len > 0 && area * len > best_bins {
                                best_bins = area * len;
                                best = Some([
                                    (it[i0], it[i1 - 1] + 1),
                                    (ir[j0], ir[j1 - 1] + 1),
                                    (ia[run_start], ia[k - 1] + 1),
                                ]);
                            }
                            run_start = k + 1;
                        }
                    }
                }
            }
        }
    }
    let fraction = occupied as f64 / total as f64;
    CoverageReport {
        bins_in_box: total,
        occupied,
        fraction,
        covered: occupied == total,
        largest_subbox: best,
        largest_subbox_bins: best_bins,
    }
}

/// Mass per α bin, summed over t and r.
pub fn angle_marginal(hist: &ConfigHistogram) -> Vec<f64> {
    let [nt, nr, na] = hist.shape();
    (0..na)
        .map(|k| {
            let col: Vec<f64> = (0..nt)
                .flat_map(|i| (0..nr).map(move |j| (i, j)))
                .map(|(i, j)| hist.get(i, j, k))
                .collect();
            pairwise_sum(&col)
        })
        .collect()
}

/// Slab `[t, t+ε] × [r, r+ε] × [α, α+ε]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlabQuery {
    pub t: f64,
    pub r: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl SlabQuery {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let q = self;
        if ![q.t, q.r, q.alpha, q.epsilon].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(ConfigError::InvalidQuery(
                "t, r, alpha and epsilon must be positive".into(),
            ));
        }
        if !(q.epsilon < q.t.min(q.r).min(q.alpha)) {
            return Err(ConfigError::InvalidQuery(format!(
                "epsilon {} must be below min(t, r, alpha)",
                q.epsilon
            )));
        }
        if !(q.alpha + q.epsilon < FRAC_PI_2) {
            return Err(ConfigError::InvalidQuery(format!(
                "alpha + epsilon = {} must stay below π/2",
                q.alpha + q.epsilon
            )));
        }
        Ok(())
    }

    pub fn contains(&self, c: &TriangleClass) -> bool {
        let inside = |v: f64, lo: f64| v >= lo - SLAB_TOL && v <= lo + self.epsilon + SLAB_TOL;
        inside(c.t, self.t) && inside(c.r, self.r) && inside(c.alpha, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlabEstimate {
    pub epsilon: f64,
    pub mass: f64,
    pub stderr: f64,
    pub hits: u64,
    pub samples: u64,
}

/// Slab masses for several ε around the same base class from one set of draws.
pub fn incidence_slab_masses(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    base: (f64, f64, f64),
    eps_list: &[f64],
    n: u64,
    seed: u64,
) -> Result<Vec<SlabEstimate>, ConfigError> {
    same_dim(&[mu1, mu2, mu3])?;
    if n == 0 {
        return Err(ConfigError::InvalidQuery(
            "Monte Carlo needs at least one sample".into(),
        ));
    }
    let queries: Vec<SlabQuery> = eps_list
        .iter()
        .map(|&epsilon| SlabQuery {
            t: base.0,
            r: base.1,
            alpha: base.2,
            epsilon,
        })
        .collect();
    for q in &queries {
        q.validate()?;
    }
    let counts = mc_counts(mu1, mu2, mu3, n, seed, queries.len(), |x, y, z, acc| {
        if let Ok(c) = triangle_map(x, y, z) {
            for (slot, q) in acc.iter_mut().zip(&queries) {
                if q.contains(&c) {
                    *slot += 1;
                }
            }
        }
    });
    let nf = n as f64;
    Ok(queries
        .iter()
        .zip(counts)
        .map(|(q, hits)| {
            let p = hits as f64 / nf;
            SlabEstimate {
                epsilon: q.epsilon,
                mass: p,
                stderr: (p * (1.0 - p) / nf).sqrt(),
                hits,
                samples: n,
            }
        })
        .collect())
}

/// Monte Carlo estimate of the triple-product mass of one slab.
pub fn incidence_slab_mass(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    q: &SlabQuery,
    n: u64,
    seed: u64,
) -> Result<SlabEstimate, ConfigError> {
    let est = incidence_slab_masses(mu1, mu2, mu3, (q.t, q.r, q.alpha), &[q.epsilon], n, seed)?;
    Ok(est[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceFit {
    pub fit: ScalingFit,
    pub estimates: Vec<SlabEstimate>,
}

/// Fits `log(slab mass)` against `log ε`; slabs with no hits are dropped.
pub fn incidence_scaling_fit(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    mu3: &DiscreteMeasure,
    base: (f64, f64, f64),
    eps_list: &[f64],
    n: u64,
    seed: u64,
) -> Result<IncidenceFit, ConfigError> {
    if eps_list.len() < 4 {
        return Err(ConfigError::InsufficientData {
            needed: 4,
            got: eps_list.len(),
        });
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(ConfigError::InvalidQuery(
            "epsilon list must be strictly decreasing".into(),
        ));
    }
    let estimates = incidence_slab_masses(mu1, mu2, mu3, base, eps_list, n, seed)?;
    let usable: Vec<&SlabEstimate> = estimates.iter().filter(|e| e.hits > 0).collect();
    if usable.len() < 4 {
        return Err(ConfigError::InsufficientData {
            needed: 4,
            got: usable.len(),
        });
    }
    let eps: Vec<f64> = usable.iter().map(|e| e.epsilon).collect();
    let mass: Vec<f64> = usable.iter().map(|e| e.mass).collect();
    Ok(IncidenceFit {
        fit: power_law_fit(&eps, &mass)?,
        estimates,
    })
}

/// Total variation distance, counting the overflow buckets as extra atoms.
pub fn tv_distance(a: &ConfigHistogram, b: &ConfigHistogram) -> f64 {
    let diffs: Vec<f64> = a.mass.iter().zip(&b.mass).map(|(x, y)| (x - y).abs()).collect();
    0.5 * (pairwise_sum(&diffs) + (a.out_of_range - b.out_of_range).abs() + (a.excluded - b.excluded).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub epsilons: Vec<f64>,
    /// Binned plus out-of-range mass of each mollified histogram.
    pub retained: Vec<f64>,
    pub excluded: Vec<f64>,
    /// TV distance between consecutive histograms.
    pub distances: Vec<f64>,
    pub decreasing: bool,
}

/// Histograms of `δ(μ_ε)` along a decreasing ε sequence. The mollifier draws
/// and the triple draws reuse the same seeds for every ε.
pub fn delta_stability(
    mu: &DiscreteMeasure,
    molls: &[MollifierSpec],
    bins: &BinSpec,
    n: u64,
    seed: u64,
) -> Result<StabilityReport, ConfigError> {
    if molls.windows(2).any(|w| !(w[1].epsilon < w[0].epsilon)) {
        return Err(ConfigError::InvalidQuery(
            "epsilon sequence must be strictly decreasing".into(),
        ));
    }
    let moll_seed = derive_seed(seed, 1);
    let mc_seed = derive_seed(seed, 2);
    let hists = molls
        .iter()
        .map(|m| {
            let smooth = mollify_sample(mu, m, moll_seed)?;
            pushforward_histogram(
                &smooth,
                &smooth,
                &smooth,
                bins,
                Sampling::MonteCarlo { n, seed: mc_seed },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let distances: Vec<f64> = hists.windows(2).map(|w| tv_distance(&w[0], &w[1])).collect();
    Ok(StabilityReport {
        epsilons: molls.iter().map(|m| m.epsilon).collect(),
        retained: hists.iter().map(|h| h.total() + h.out_of_range).collect(),
        excluded: hists.iter().map(|h| h.excluded).collect(),
        decreasing: distances.windows(2).all(|w| w[1] < w[0]),
        distances,
    })
}

/// Uniformly random rotation (Haar, via QR of a Gaussian matrix) and translation,
/// for invariance checks.
pub fn random_rigid_motion<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<f64>) {
    use rand_distr::StandardNormal;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &q {
            let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            q.push(v.iter().map(|x| x / n).collect());
        }
    }
    let tau = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (q, tau)
}

pub fn apply_rigid_motion(rot: &[Vec<f64>], tau: &[f64], p: &[f64]) -> Vec<f64> {
    rot.iter()
        .zip(tau)
        .map(|(row, t)| row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::gen_uniform_cube;

    fn e(d: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    #[test]
    fn triangle_map_examples() {
        let c = triangle_map(&e(4, 0), &e(4, 1), &[0.0; 4]).unwrap();
        assert_eq!((c.t, c.r), (1.0, 1.0));
        assert!((c.alpha - FRAC_PI_2).abs() < 1e-15);
        let y = [0.5, 3f64.sqrt() / 2.0, 0.0, 0.0];
        let c = triangle_map(&e(4, 0), &y, &[0.0; 4]).unwrap();
        assert!((c.alpha - PI / 3.0).abs() < 1e-15 && (c.r - 1.0).abs() < 1e-15);
        assert!(triangle_map(&[0.0; 4], &e(4, 1), &[0.0; 4]).is_err());
        assert!(triangle_map(&e(2, 0), &[2.0, 0.0], &[0.0; 2]).is_err());
        assert!(triangle_map(&e(2, 0), &[-2.0, 0.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn reconstruction_round_trips() {
        for (t, r, alpha) in [(0.3, 0.7, 0.2), (1.0, 1.0, 3.0), (2.0, 0.1, 1e-6)] {
            let class = TriangleClass { t, r, alpha };
            let (x, y, z) = reconstruct(&class, 4);
            let back = triangle_map(&x, &y, &z).unwrap();
            assert!((back.t - t).abs() < 1e-12 && (back.r - r).abs() < 1e-12 && (back.alpha - alpha).abs() < 1e-12);
        }
    }

    fn atom(p: Vec<f64>) -> DiscreteMeasure {
        DiscreteMeasure::point_mass(p).unwrap()
    }

    #[test]
    fn three_point_masses_fill_one_bin() {
        let (x, y, z) = (atom(vec![0.9, 0.1]), atom(vec![0.1, 0.8]), atom(vec![0.2, 0.2]));
        let h = pushforward_histogram(&x, &y, &z, &BinSpec::default_for(2), Sampling::Exact).unwrap();
        assert_eq!(h.mass.iter().filter(|m| **m > 0.0).count(), 1);
        assert!((h.total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_point_mass_is_all_excluded() {
        let p = atom(vec![0.5, 0.5, 0.5]);
        let h = pushforward_histogram(&p, &p, &p, &BinSpec::default_for(3), Sampling::Exact).unwrap();
        assert_eq!(h.total(), 0.0);
        assert!((h.excluded - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bad_edges_and_sizes_rejected() {
        let mu = gen_uniform_cube(2, 10, 1).unwrap();
        let mut bins = BinSpec::default_for(2);
        bins.edges_r[3] = bins.edges_r[2];
        assert!(matches!(
            pushforward_histogram(&mu, &mu, &mu, &bins, Sampling::Exact),
            Err(ConfigError::InvalidEdges(_))
        ));
        let big = gen_uniform_cube(2, 500, 1).unwrap();
        assert!(matches!(
            pushforward_histogram(&big, &big, &big, &BinSpec::default_for(2), Sampling::Exact),
            Err(ConfigError::TooManyTriples(_))
        ));
        let other = gen_uniform_cube(3, 10, 1).unwrap();
        assert!(pushforward_histogram(&mu, &other, &mu, &BinSpec::default_for(2), Sampling::Exact).is_err());
    }

    #[test]
    fn swapping_first_two_measures_transposes_exactly() {
        let a = gen_uniform_cube(3, 12, 1).unwrap();
        let b = gen_uniform_cube(3, 9, 2).unwrap();
        let c = gen_uniform_cube(3, 7, 3).unwrap();
        let bins = BinSpec::default_for(3);
        let h1 = pushforward_histogram(&a, &b, &c, &bins, Sampling::Exact).unwrap();
        let h2 = pushforward_histogram(&b, &a, &c, &bins, Sampling::Exact).unwrap();
        let [nt, nr, na] = h1.shape();
        for i in 0..nt {
            for j in 0..nr {
                for k in 0..na {
                    assert_eq!(h1.get(i, j, k), h2.get(j, i, k));
                }
            }
        }
    }

    #[test]
    fn mass_is_conserved() {
        let mu = gen_uniform_cube(2, 25, 4).unwrap();
        let bins = BinSpec::regular((0.2, 0.8), (0.2, 0.8), (0.5, 2.5), [6, 6, 6]).unwrap();
        for sampling in [Sampling::Exact, Sampling::MonteCarlo { n: 50_000, seed: 3 }] {
            let h = pushforward_histogram(&mu, &mu, &mu, &bins, sampling).unwrap();
            assert!((h.total() + h.out_of_range + h.excluded - 1.0).abs() < 1e-9);
            assert!(h.excluded > 0.0 && h.out_of_range > 0.0);
        }
    }

    #[test]
    fn monte_carlo_matches_exact_enumeration() {
        let mu = gen_uniform_cube(4, 40, 7).unwrap();
        let bins = BinSpec::regular((0.0, 2.0), (0.0, 2.0), (0.0, PI), [8, 8, 8]).unwrap();
        let exact = pushforward_histogram(&mu, &mu, &mu, &bins, Sampling::Exact).unwrap();
        let n = 1_000_000u64;
        let mc = pushforward_histogram(&mu, &mu, &mu, &bins, Sampling::MonteCarlo { n, seed: 5 }).unwrap();
        let occupied: Vec<usize> = (0..exact.mass.len()).filter(|&i| exact.mass[i] > 0.0).collect();
        let within = occupied
            .iter()
            .filter(|&&i| {
                let p = exact.mass[i];
                (mc.mass[i] - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
            })
            .count();
        assert!(
            within as f64 >= 0.99 * occupied.len() as f64,
            "{within}/{}",
            occupied.len()
        );
    }

    #[test]
    fn probe_edge_cases() {
        let p = atom(vec![0.5, 0.5]);
        let h = pushforward_histogram(&p, &p, &p, &BinSpec::default_for(2), Sampling::Exact).unwrap();
        let bx = ProbeBox {
            t: (0.0, 1.0),
            r: (0.0, 1.0),
            alpha: (0.0, PI),
        };
        let rep = interior_probe(&h, &bx, 0.0);
        assert_eq!(rep.fraction, 0.0);
        assert!(!rep.covered);

        let (x, y, z) = (atom(vec![0.9, 0.1]), atom(vec![0.1, 0.8]), atom(vec![0.2, 0.2]));
        let bins = BinSpec::regular((0.0, 1.0), (0.0, 1.0), (0.0, PI), [4, 4, 4]).unwrap();
        let h = pushforward_histogram(&x, &y, &z, &bins, Sampling::Exact).unwrap();
        let c = triangle_map(&[0.9, 0.1], &[0.1, 0.8], &[0.2, 0.2]).unwrap();
        let cell = |v: f64, w: f64| ((v / w).floor() * w, (v / w).floor() * w + w);
        let one = ProbeBox {
            t: cell(c.t, 0.25),
            r: cell(c.r, 0.25),
            alpha: cell(c.alpha, PI / 4.0),
        };
        let rep = interior_probe(&h, &one, 0.0);
        assert!(rep.covered && rep.bins_in_box == 1);
        assert_eq!(rep.largest_subbox_bins, 1);
        let wider = ProbeBox { t: (0.0, 1.0), ..one };
        assert!(!interior_probe(&h, &wider, 0.0).covered);
    }

    #[test]
    fn largest_subbox_on_a_known_pattern() {
        let bins = BinSpec::regular((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), [4, 4, 4]).unwrap();
        let mut h = ConfigHistogram::empty(&bins);
        for i in 1..3 {
            for j in 0..4 {
                for k in 0..3 {
                    let idx = h.index(i, j, k);
                    h.mass[idx] = 0.01;
                }
            }
        }
        let idx = h.index(0, 0, 0);
        h.mass[idx] = 0.01;
        let rep = interior_probe(
            &h,
            &ProbeBox {
                t: (0.0, 1.0),
                r: (0.0, 1.0),
                alpha: (0.0, 1.0),
            },
            0.005,
        );
        assert_eq!(rep.occupied, 25);
        assert_eq!(rep.largest_subbox_bins, 24);
        assert_eq!(rep.largest_subbox, Some([(1, 3), (0, 4), (0, 3)]));
        assert_eq!(
            interior_probe(
                &h,
                &ProbeBox {
                    t: (0.0, 1.0),
                    r: (0.0, 1.0),
                    alpha: (0.0, 1.0)
                },
                0.02
            )
            .occupied,
            0
        );
    }

    #[test]
    fn angle_marginal_conserves_mass() {
        let (x, y, z) = (atom(e(3, 0)), atom(e(3, 1)), atom(vec![0.0; 3]));
        let bins = BinSpec::regular((0.0, 2.0), (0.0, 2.0), (0.0, PI), [4, 4, 7]).unwrap();
        let h = pushforward_histogram(&x, &y, &z, &bins, Sampling::Exact).unwrap();
        let m = angle_marginal(&h);
        assert_eq!(m[3], 1.0);
        let mu = gen_uniform_cube(3, 20, 2).unwrap();
        let h = pushforward_histogram(&mu, &mu, &mu, &BinSpec::default_for(3), Sampling::Exact).unwrap();
        assert!((angle_marginal(&h).iter().sum::<f64>() - h.total()).abs() < 1e-12);
    }

    #[test]
    fn slab_queries() {
        let mu = gen_uniform_cube(4, 100, 1).unwrap();
        let q = SlabQuery {
            t: 0.1,
            r: 0.5,
            alpha: 0.5,
            epsilon: 0.2,
        };
        assert!(incidence_slab_mass(&mu, &mu, &mu, &q, 100, 1).is_err());
        let q = SlabQuery {
            alpha: 1.5,
            epsilon: 0.1,
            t: 0.5,
            ..q
        };
        assert!(q.validate().is_err());

        let class = TriangleClass {
            t: 0.3,
            r: 0.4,
            alpha: 0.6,
        };
        let (x, y, z) = reconstruct(&class, 3);
        let shift = |p: Vec<f64>| p.iter().map(|v| v + 0.2).collect::<Vec<f64>>();
        let (x, y, z) = (atom(shift(x)), atom(shift(y)), atom(shift(z)));
        let q = SlabQuery {
            t: 0.3,
            r: 0.4,
            alpha: 0.6,
            epsilon: 0.05,
        };
        assert_eq!(incidence_slab_mass(&x, &y, &z, &q, 1000, 2).unwrap().mass, 1.0);
        let fit = incidence_scaling_fit(&x, &y, &z, (0.3, 0.4, 0.6), &[0.2, 0.1, 0.05, 0.025], 100, 3).unwrap();
        assert!(fit.fit.slope.abs() < 1e-12);
        let other = gen_uniform_cube(2, 10, 1).unwrap();
        assert!(incidence_scaling_fit(&x, &y, &other, (0.3, 0.4, 0.6), &[0.2, 0.1, 0.05, 0.025], 100, 3).is_err());
    }

    #[test]
    fn slab_mass_shrinks_with_epsilon() {
        let mu = gen_uniform_cube(4, 2000, 9).unwrap();
        let est = incidence_slab_masses(&mu, &mu, &mu, (0.5, 0.5, PI / 4.0), &[0.2, 0.1, 0.05], 200_000, 4).unwrap();
        assert!(est[0].mass > est[1].mass && est[1].mass > est[2].mass);
    }

    #[test]
    fn stability_distances() {
        let mu = gen_uniform_cube(3, 300, 5).unwrap();
        let bins = BinSpec::default_for(3);
        let one = delta_stability(&mu, &[MollifierSpec::new(0.1).unwrap()], &bins, 1000, 1).unwrap();
        assert!(one.distances.is_empty());
        let molls: Vec<MollifierSpec> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&e| MollifierSpec::new(e).unwrap())
            .collect();
        let rep = delta_stability(&mu, &molls, &bins, 100_000, 1).unwrap();
        assert_eq!(rep.distances.len(), 3);
        for (kept, ex) in rep.retained.iter().zip(&rep.excluded) {
            assert!((kept + ex - 1.0).abs() < 1e-9);
        }
        assert!(rep.decreasing, "{:?}", rep.distances);
        let mut rev = molls.clone();
        rev.reverse();
        assert!(delta_stability(&mu, &rev, &bins, 1000, 1).is_err());
    }
}
