//! Stopping-time search over 4-adic cube subdivisions for three subsets with
//! positive mass, a coordinate gap, and angles bounded away from 0 and π/2.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::DiscreteMeasure;
use crate::numeric::{angle_between, norm, sub};
use crate::rng::{derive_seed, stream_rng};

/// Deepest subdivision level; `4^level` cells per axis stay exact in `f64`.
pub const MAX_LEVEL: u32 = 24;
pub const ANGLE_TOL: f64 = 1e-6;
pub const MAX_REFINE_ROUNDS: u32 = 8;
const INTERIOR_SAMPLES: usize = 1000;
const MAX_CANDIDATE_TRIPLES: usize = 4096;
const FALLBACK_CHILDREN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeparatorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid cube address: {0}")]
    InvalidCube(String),
    #[error("exhausted iterations: level {level} exceeds the bound {n_max}; cube {cube:?} has mass {mass}")]
    ExhaustedIterations {
        level: u32,
        n_max: u32,
        cube: CubeAddress,
        mass: f64,
    },
    #[error("invalid separation: {0}")]
    InvalidSeparation(String),
    #[error("refinement failed after {rounds} rounds: {reason}")]
    RefinementFailed { rounds: u32, reason: String },
}

/// Cell `k · 4^-level + [0, 4^-level)^d` of the unit cube.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CubeAddress {
    pub level: u32,
    pub coords: Vec<u64>,
}

impl CubeAddress {
    pub fn new(level: u32, coords: Vec<u64>) -> Result<Self, SeparatorError> {
        if level > MAX_LEVEL {
            return Err(SeparatorError::InvalidCube(format!("level {level} > {MAX_LEVEL}")));
        }
        if coords.is_empty() {
            return Err(SeparatorError::InvalidCube("empty coordinates".into()));
        }
        let n = 1u64 << (2 * level);
        if let Some(k) = coords.iter().find(|k| **k >= n) {
            return Err(SeparatorError::InvalidCube(format!(
                "coordinate {k} out of range for level {level}"
            )));
        }
        Ok(Self { level, coords })
    }

    pub fn root(dim: usize) -> Self {
        Self {
            level: 0,
            coords: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn side(&self) -> f64 {
        0.25f64.powi(self.level as i32)
    }

    pub fn lo(&self) -> Vec<f64> {
        let s = self.side();
        self.coords.iter().map(|&k| k as f64 * s).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        let s = self.side();
        self.coords.iter().map(|&k| (k + 1) as f64 * s).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        let s = self.side();
        self.coords.iter().map(|&k| (k as f64 + 0.5) * s).collect()
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.side() * (self.dim() as f64).sqrt()
    }

    /// The level-`level` cell holding `p`; cells are half-open except that the
    /// upper face of the unit cube belongs to the last cell.
    pub fn containing(p: &[f64], level: u32) -> Self {
        let n = 1u64 << (2 * level);
        let scale = n as f64;
        let coords = p
            .iter()
            .map(|&x| ((x * scale).floor().max(0.0) as u64).min(n - 1))
            .collect();
        Self { level, coords }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().all(|x| (0.0..=1.0).contains(x)) && Self::containing(p, self.level) == *self
    }

    pub fn child(&self, offsets: &[u64]) -> Self {
        Self {
            level: self.level + 1,
            coords: self.coords.iter().zip(offsets).map(|(k, o)| 4 * k + o).collect(),
        }
    }

    /// Per-axis position (0..4) of a child inside its parent.
    pub fn offsets(&self) -> Vec<u64> {
        self.coords.iter().map(|k| k % 4).collect()
    }

    pub fn parent(&self) -> Option<Self> {
        (self.level > 0).then(|| Self {
            level: self.level - 1,
            coords: self.coords.iter().map(|k| k / 4).collect(),
        })
    }
}

/// The `2^d` collections of children of `cube`. Collection `j` fixes, on axis
/// `k`, the child index to `{b, b + 2}` where `b` is bit `d-1-k` of `j`, so
/// collections come out ordered lexicographically by parity signature.
pub fn collections_of(cube: &CubeAddress) -> Result<Vec<Vec<CubeAddress>>, SeparatorError> {
    if cube.level + 1 > MAX_LEVEL {
        return Err(SeparatorError::InvalidCube(format!(
            "cannot subdivide below level {MAX_LEVEL}"
        )));
    }
    let d = cube.dim();
    Ok((0..1usize << d)
        .map(|sig| {
            (0..1usize << d)
                .map(|hi| {
                    let offsets: Vec<u64> = (0..d)
                        .map(|k| {
                            let bit = (sig >> (d - 1 - k)) & 1;
                            let high = (hi >> (d - 1 - k)) & 1;
                            (bit + 2 * high) as u64
                        })
                        .collect();
                    cube.child(&offsets)
                })
                .collect()
        })
        .collect())
}

/// Which branch of the stopping-time procedure a step took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCase {
    /// Three cubes above the threshold: done.
    Three,
    /// Exactly two above the threshold, the larger one heavy enough to recurse into.
    TwoRecurse,
    /// Exactly two above the threshold, completed by a third positive cube.
    TwoThird,
    /// One cube above the threshold: recurse into it.
    One,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Iteration number; children of `cube` live at this level.
    pub iteration: u32,
    pub cube: CubeAddress,
    pub mass: f64,
    /// Mass lower bound the procedure guarantees for `cube`.
    pub tracked_bound: f64,
    pub case: StopCase,
}

/// Raw outcome of the stopping-time search, before roles and angle bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingTime {
    pub cubes: Vec<CubeAddress>,
    pub iterations: u32,
    pub n_max: u32,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// `E₁, E₂, E₃`; the certified angle is taken at a point of `E₃`.
    pub cubes: Vec<CubeAddress>,
    pub members: Vec<Vec<usize>>,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub iterations: u32,
    #[serde(default)]
    pub refinements: u32,
    #[serde(default)]
    pub needs_refinement: bool,
}

impl Separation {
    /// Separation on the given cubes with members gathered from `mu` and the
    /// constants left at zero until [`certify`] fills them.
    pub fn from_cubes(cubes: Vec<CubeAddress>, mu: &DiscreteMeasure, iterations: u32) -> Self {
        let members = cubes
            .iter()
            .map(|c| (0..mu.len()).filter(|&i| c.contains(mu.point(i))).collect())
            .collect();
        Self {
            cubes,
            members,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            c4: 0.0,
            iterations,
            refinements: 0,
            needs_refinement: true,
        }
    }

    pub fn masses(&self, mu: &DiscreteMeasure) -> Vec<f64> {
        self.members.iter().map(|m| mu.mass_of(m)).collect()
    }

    /// Checks every type invariant against `mu`.
    pub fn check(&self, mu: &DiscreteMeasure) -> Result<(), SeparatorError> {
        let bad = |m: String| Err(SeparatorError::InvalidSeparation(m));
        if self.cubes.len() != 3 || self.members.len() != 3 {
            return bad("expected three cubes and three member sets".into());
        }
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return bad(format!("c1 = {}, c2 = {}", self.c1, self.c2));
        }
        if !(0.0 < self.c3 && self.c3 <= self.c4 && self.c4 < FRAC_PI_2) {
            return bad(format!("angle bounds c3 = {}, c4 = {}", self.c3, self.c4));
        }
        let mut seen = vec![false; mu.len()];
        for (cube, members) in self.cubes.iter().zip(&self.members) {
            for &i in members {
                if i >= mu.len() || seen[i] {
                    return bad(format!("member {i} repeated or out of range"));
                }
                seen[i] = true;
                if !cube.contains(mu.point(i)) {
                    return bad(format!("member {i} lies outside its cube"));
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(mu: &DiscreteMeasure, c_mu: f64, s: f64) -> Result<(), SeparatorError> {
    let d = mu.dim() as f64;
    if !(s > (d + 1.0) / 2.0) || !s.is_finite() {
        return Err(SeparatorError::InvalidInput(format!(
            "s = {s} must exceed (d+1)/2 = {}",
            (d + 1.0) / 2.0
        )));
    }
    if !(c_mu >= 1.0) || !c_mu.is_finite() {
        return Err(SeparatorError::InvalidInput(format!(
            "C_mu = {c_mu} must be at least 1"
        )));
    }
    if mu.weights().iter().filter(|w| **w > 0.0).count() < 3 {
        return Err(SeparatorError::InvalidInput(
            "need at least three atoms with positive weight".into(),
        ));
    }
    if mu.points().iter().any(|p| p.iter().any(|x| !(0.0..=1.0).contains(x))) {
        return Err(SeparatorError::InvalidInput("points must lie in the unit cube".into()));
    }
    Ok(())
}

/// `ceil((log₂ C + 1) / (2s − (d+1)))`, at least 1.
pub fn iteration_bound(dim: usize, c_mu: f64, s: f64) -> u32 {
    let b = (c_mu.log2() + 1.0) / (2.0 * s - (dim as f64 + 1.0));
    (b.ceil() as u32).max(1)
}

/// Groups the atoms of `indices` by their child cell at `level`.
fn child_masses(mu: &DiscreteMeasure, indices: &[usize], level: u32) -> BTreeMap<CubeAddress, (f64, Vec<usize>)> {
    let mut out: BTreeMap<CubeAddress, (f64, Vec<usize>)> = BTreeMap::new();
    for &i in indices {
        let e = out
            .entry(CubeAddress::containing(mu.point(i), level))
            .or_insert((0.0, Vec::new()));
        e.0 += mu.weights()[i];
        e.1.push(i);
    }
    out
}

/// Runs the stopping-time subdivision and returns the three cubes it stops on.
pub fn stopping_time(
    mu: &DiscreteMeasure,
    c_mu: f64,
    s: f64,
    max_iter_override: Option<u32>,
) -> Result<StoppingTime, SeparatorError> {
    check_inputs(mu, c_mu, s)?;
    let d = mu.dim();
    let n_max = max_iter_override
        .unwrap_or_else(|| iteration_bound(d, c_mu, s))
        .min(MAX_LEVEL);
    let two_d = (1u64 << d) as f64;
    let mut cube = CubeAddress::root(d);
    let mut indices: Vec<usize> = (0..mu.len()).collect();
    let mut tracked = 1.0;
    let mut trace = Vec::new();

    for iteration in 1..=n_max {
        let mass = mu.mass_of(&indices);
        let children = child_masses(mu, &indices, iteration);
        let mass_of = |c: &CubeAddress| children.get(c).map_or(0.0, |e| e.0);

        // heaviest collection, first signature wins ties
        let mut best: Option<(f64, Vec<CubeAddress>)> = None;
        for coll in collections_of(&cube)? {
            let m: f64 = coll.iter().map(mass_of).sum();
            if best.as_ref().is_none_or(|(bm, _)| m > *bm) {
                best = Some((m, coll));
            }
        }
        let (coll_mass, coll) = best.expect("at least one collection");
        let threshold = coll_mass / (two_d * two_d);
        let mut ranked: Vec<(f64, CubeAddress)> = coll
            .into_iter()
            .map(|c| (mass_of(&c), c))
            .filter(|(m, _)| *m > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let heavy = ranked.iter().filter(|(m, _)| *m >= threshold).count();

        let step = |case| TraceStep {
            iteration,
            cube: cube.clone(),
            mass,
            tracked_bound: tracked,
            case,
        };
        let next = if heavy >= 3 {
            trace.push(step(StopCase::Three));
            None
        } else if heavy == 2 {
            if ranked[0].0 >= mass / (2.0 * two_d) || ranked.len() < 3 {
                trace.push(step(StopCase::TwoRecurse));
                Some(ranked[0].1.clone())
            } else {
                trace.push(step(StopCase::TwoThird));
                None
            }
        } else {
            trace.push(step(StopCase::One));
            Some(ranked[0].1.clone())
        };

        match next {
            None => {
                let mut cubes: Vec<CubeAddress> = ranked.into_iter().take(3).map(|(_, c)| c).collect();
                cubes.sort();
                return Ok(StoppingTime {
                    cubes,
                    iterations: iteration,
                    n_max,
                    trace,
                });
            }
            Some(c) => {
                indices = children.get(&c).map(|e| e.1.clone()).unwrap_or_default();
                cube = c;
                tracked = 0.5 * 2f64.powi(-((d as i32 + 1) * iteration as i32));
            }
        }
    }
    Err(SeparatorError::ExhaustedIterations {
        level: cube.level,
        n_max,
        mass: mu.mass_of(&indices),
        cube,
    })
}

/// Angle interval at `z` from bounding cones: each difference box `X − Z`
/// lies in a ball around the centre difference, hence in a cone of half-angle
/// `asin(h / |c|)`.
fn cone_interval(x: &CubeAddress, y: &CubeAddress, z: &CubeAddress) -> (f64, f64) {
    let cz = z.center();
    let cu = sub(&x.center(), &cz);
    let cv = sub(&y.center(), &cz);
    let hu = x.half_diagonal() + z.half_diagonal();
    let hv = y.half_diagonal() + z.half_diagonal();
    let (nu, nv) = (norm(&cu), norm(&cv));
    let theta = match angle_between(&cu, &cv) {
        Some(t) => t,
        None => return (0.0, PI),
    };
    if hu >= nu || hv >= nv {
        return (0.0, PI);
    }
    let spread = (hu / nu).asin() + (hv / nv).asin();
    ((theta - spread).max(0.0), (theta + spread).min(PI))
}

/// Distance from the interval to the forbidden values 0 and π/2.
fn margin((lo, hi): (f64, f64)) -> f64 {
    lo.min(FRAC_PI_2 - hi)
}

/// Orders three cubes as `[x, y, z]`: `z` is the vertex with the widest
/// cone-interval margin, `x` the farther of the remaining two.
pub fn assign_roles(cubes: &[CubeAddress]) -> (Vec<CubeAddress>, f64) {
    let mut best: Option<(f64, f64, Vec<CubeAddress>)> = None;
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| cubes[a].cmp(&cubes[b]));
    for &zi in &order {
        let others: Vec<usize> = order.iter().copied().filter(|&i| i != zi).collect();
        let z = &cubes[zi];
        let dist = |i: usize| norm(&sub(&cubes[i].center(), &z.center()));
        let (xi, yi) = if dist(others[1]) > dist(others[0]) {
            (others[1], others[0])
        } else {
            (others[0], others[1])
        };
        let interval = cone_interval(&cubes[xi], &cubes[yi], z);
        let m = margin(interval);
        let centre_gap = angle_between(
            &sub(&cubes[xi].center(), &z.center()),
            &sub(&cubes[yi].center(), &z.center()),
        )
        .map_or(PI, |t| (t - FRAC_PI_4).abs());
        let better = match &best {
            None => true,
            Some((bm, bg, _)) => m > *bm || (m == *bm && centre_gap < *bg),
        };
        if better {
            best = Some((m, centre_gap, vec![cubes[xi].clone(), cubes[yi].clone(), z.clone()]));
        }
    }
    let (m, _, roles) = best.expect("three cubes");
    (roles, m)
}

fn box_gap(a: &CubeAddress, b: &CubeAddress, k: usize) -> f64 {
    let (alo, ahi) = (a.lo()[k], a.hi()[k]);
    let (blo, bhi) = (b.lo()[k], b.hi()[k]);
    (blo - ahi).max(alo - bhi).max(0.0)
}

fn box_distance(a: &CubeAddress, b: &CubeAddress) -> f64 {
    (0..a.dim()).map(|k| box_gap(a, b, k).powi(2)).sum::<f64>().sqrt()
}

fn corners(c: &CubeAddress) -> Vec<Vec<f64>> {
    let (lo, hi) = (c.lo(), c.hi());
    let d = c.dim();
    (0..1usize << d)
        .map(|m| (0..d).map(|k| if (m >> k) & 1 == 1 { hi[k] } else { lo[k] }).collect())
        .collect()
}

/// Largest angle between vertices of the difference boxes `X − Z` and `Y − Z`.
/// When it is below π/2 it bounds the angle over the whole boxes, because
/// `{u : ∠(u, v) ≤ θ}` is convex for θ < π/2.
fn vertex_angle_max(x: &CubeAddress, y: &CubeAddress, z: &CubeAddress) -> Option<f64> {
    let diff_corners = |a: &CubeAddress| -> Vec<Vec<f64>> {
        let d = a.dim();
        let lo: Vec<f64> = (0..d).map(|k| a.lo()[k] - z.hi()[k]).collect();
        let hi: Vec<f64> = (0..d).map(|k| a.hi()[k] - z.lo()[k]).collect();
        (0..1usize << d)
            .map(|m| (0..d).map(|k| if (m >> k) & 1 == 1 { hi[k] } else { lo[k] }).collect())
            .collect()
    };
    let us = diff_corners(x);
    let vs = diff_corners(y);
    let mut worst: f64 = 0.0;
    for u in &us {
        for v in &vs {
            worst = worst.max(angle_between(u, v)?);
        }
    }
    (worst < FRAC_PI_2).then_some(worst)
}

fn address_seed(cubes: &[CubeAddress]) -> u64 {
    let mut seed = 0x5eed;
    for c in cubes {
        seed = derive_seed(seed, c.level as u64);
        for &k in &c.coords {
            seed = derive_seed(seed, k);
        }
    }
    seed
}

/// Fills `c1..c4` for the cubes and members of `sep`. Roles are read as
/// `x ∈ E₁, y ∈ E₂, z ∈ E₃`.
pub fn certify(sep: &Separation, mu: &DiscreteMeasure) -> Result<Separation, SeparatorError> {
    if sep.cubes.len() != 3 || sep.members.len() != 3 {
        return Err(SeparatorError::InvalidSeparation(
            "expected three cubes and three member sets".into(),
        ));
    }
    if sep.members.iter().any(|m| m.is_empty()) {
        return Err(SeparatorError::InvalidSeparation("empty member set".into()));
    }
    let d = mu.dim();
    if sep.cubes.iter().any(|c| c.dim() != d) {
        return Err(SeparatorError::InvalidSeparation("cube dimension mismatch".into()));
    }
    let c1 = sep.members.iter().map(|m| mu.mass_of(m)).fold(f64::INFINITY, f64::min);
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let c2 = pairs
        .iter()
        .map(|&(i, j)| {
            (0..d)
                .map(|k| box_gap(&sep.cubes[i], &sep.cubes[j], k))
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);

    let (x, y, z) = (&sep.cubes[0], &sep.cubes[1], &sep.cubes[2]);
    let (xs, ys, zs) = (corners(x), corners(y), corners(z));
    let mut lo = PI;
    let mut hi: f64 = 0.0;
    let mut degenerate = false;
    let mut observe = |px: &[f64], py: &[f64], pz: &[f64]| match angle_between(&sub(px, pz), &sub(py, pz)) {
        Some(a) => {
            lo = lo.min(a);
            hi = hi.max(a);
        }
        None => degenerate = true,
    };
    for px in &xs {
        for py in &ys {
            for pz in &zs {
                observe(px, py, pz);
            }
        }
    }
    let mut rng = stream_rng(address_seed(&sep.cubes), 0);
    let mut interior = |c: &CubeAddress| -> Vec<f64> {
        c.lo()
            .iter()
            .zip(c.hi())
            .map(|(a, b)| rng.random_range(*a..b))
            .collect()
    };
    for _ in 0..INTERIOR_SAMPLES {
        let (px, py, pz) = (interior(x), interior(y), interior(z));
        observe(&px, &py, &pz);
    }

    let (dx, dy) = (box_distance(x, z), box_distance(y, z));
    let (hx, hy, hz) = (x.half_diagonal(), y.half_diagonal(), z.half_diagonal());
    let ratios = [hx / dx, hy / dy, hz / dx, hz / dy];
    let (mut c3, mut c4) = if degenerate || ratios.iter().any(|r| !(*r < 1.0)) {
        (0.0, PI)
    } else {
        let slack: f64 = ratios.iter().map(|r| r.asin()).sum();
        ((lo - slack).max(0.0), (hi + slack).min(PI))
    };
    let (clo, chi) = cone_interval(x, y, z);
    c3 = c3.max(clo);
    c4 = c4.min(chi);
    if let Some(v) = vertex_angle_max(x, y, z) {
        c4 = c4.min(v);
    }
    let needs_refinement = c4 >= FRAC_PI_2 - ANGLE_TOL || c3 <= ANGLE_TOL;
    Ok(Separation {
        c1,
        c2,
        c3,
        c4,
        needs_refinement,
        ..sep.clone()
    })
}

/// Positive-mass children of `cube` among `members`, as (mass, address, atoms).
fn positive_children(
    mu: &DiscreteMeasure,
    cube: &CubeAddress,
    members: &[usize],
) -> Vec<(f64, CubeAddress, Vec<usize>)> {
    child_masses(mu, members, cube.level + 1)
        .into_iter()
        .filter(|(_, (m, _))| *m > 0.0)
        .map(|(c, (m, idx))| (m, c, idx))
        .collect()
}

/// Subdivides the three cubes and keeps the child triple whose geometry best
/// separates the angle from 0 and π/2, for up to [`MAX_REFINE_ROUNDS`] rounds.
pub fn refine_for_angles(sep: &Separation, mu: &DiscreteMeasure) -> Result<Separation, SeparatorError> {
    let current = certify(sep, mu)?;
    if !current.needs_refinement && current.check(mu).is_ok() {
        return Ok(sep.clone());
    }
    let mut cubes = sep.cubes.clone();
    let mut members = sep.members.clone();
    for round in 1..=MAX_REFINE_ROUNDS {
        if cubes.iter().any(|c| c.level + 1 > MAX_LEVEL) {
            return Err(SeparatorError::RefinementFailed {
                rounds: round - 1,
                reason: "reached the deepest subdivision level".into(),
            });
        }
        let mut candidates: Vec<Vec<(f64, CubeAddress, Vec<usize>)>> = cubes
            .iter()
            .zip(&members)
            .map(|(c, m)| positive_children(mu, c, m))
            .collect();
        if candidates.iter().map(|c| c.len()).product::<usize>() > MAX_CANDIDATE_TRIPLES {
            for list in candidates.iter_mut() {
                let corner: Vec<_> = list
                    .iter()
                    .filter(|(_, c, _)| c.offsets().iter().all(|o| *o == 0 || *o == 3))
                    .cloned()
                    .collect();
                if !corner.is_empty() {
                    *list = corner;
                } else {
                    list.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                    list.truncate(FALLBACK_CHILDREN);
                }
            }
        }
        let mut best: Option<(f64, Vec<CubeAddress>)> = None;
        for a in &candidates[0] {
            for b in &candidates[1] {
                for c in &candidates[2] {
                    let (roles, m) = assign_roles(&[a.1.clone(), b.1.clone(), c.1.clone()]);
                    if best.as_ref().is_none_or(|(bm, _)| m > *bm) {
                        best = Some((m, roles));
                    }
                }
            }
        }
        let Some((_, roles)) = best else {
            return Err(SeparatorError::RefinementFailed {
                rounds: round,
                reason: "a cube has no child with positive mass".into(),
            });
        };
        let find = |c: &CubeAddress| -> Vec<usize> {
            candidates
                .iter()
                .flatten()
                .find(|(_, cc, _)| cc == c)
                .map(|(_, _, idx)| idx.clone())
                .unwrap_or_default()
        };
        members = roles.iter().map(find).collect();
        cubes = roles;
        let trial = certify(
            &Separation {
                cubes: cubes.clone(),
                members: members.clone(),
                refinements: sep.refinements + round,
                ..sep.clone()
            },
            mu,
        )?;
        if !trial.needs_refinement && trial.check(mu).is_ok() {
            return Ok(trial);
        }
    }
    Err(SeparatorError::RefinementFailed {
        rounds: MAX_REFINE_ROUNDS,
        reason: "angle interval still touches 0 or π/2".into(),
    })
}

/// Full pipeline: stopping time, role assignment, certification and, when the
/// angle bounds are not yet valid, refinement.
pub fn separate_three(
    mu: &DiscreteMeasure,
    c_mu: f64,
    s: f64,
    max_iter_override: Option<u32>,
) -> Result<Separation, SeparatorError> {
    let st = stopping_time(mu, c_mu, s, max_iter_override)?;
    let (roles, _) = assign_roles(&st.cubes);
    let sep = certify(&Separation::from_cubes(roles, mu, st.iterations), mu)?;
    let sep = if sep.needs_refinement {
        refine_for_angles(&sep, mu)?
    } else {
        sep
    };
    sep.check(mu)?;
    Ok(sep)
}
