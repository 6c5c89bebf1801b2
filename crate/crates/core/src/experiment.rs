//! Configured runs: JSON config in, CSV/JSON artifacts and a verdict report out.
//!
//! Every artifact starts with the SHA-256 of the normalized configuration and
//! the seed (as `#` lines in CSV, as fields in JSON). The hash covers the
//! numeric parameters only, so two runs with the same parameters write
//! byte-identical files regardless of output directory or thread count.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{
    delta_stability, incidence_scaling_fit, interior_probe, pushforward_histogram, BinSpec, ProbeBox, Sampling,
};
use crate::measure::{estimate_frostman, profile_violation, CenterPlan, DiscreteMeasure, MeasureSpec, MollifierSpec};
use crate::oscillatory::{
    annulus_scaling, chart_order, check_decay_bound, decay_exponent_fit, fit_c1, generic_direction, hessian_trials,
    resonant_direction, tail_probe, FrequencyPair, SigmaEngine, SigmaMethod, DET_REL_TOL,
};
use crate::rng::derive_seed;
use crate::separator::{iteration_bound, separate_three, SeparatorError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad configuration; maps to exit status 2.
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("run failed: {0}")]
    Run(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Usage(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Generate,
    Separate,
    Configset,
    Incidence,
    Fourier,
    Tailprobe,
    All,
}

impl Subcommand {
    fn includes(self, other: Subcommand) -> bool {
        self == other || self == Subcommand::All
    }
}

const TAG_MEASURE: u64 = 1;
const TAG_CONFIGSET: u64 = 2;
const TAG_INCIDENCE: u64 = 3;
const TAG_FOURIER: u64 = 4;
const TAG_TAIL: u64 = 5;
const TAG_ANNULUS: u64 = 6;
const TAG_CHECKS: u64 = 7;

fn default_measure() -> MeasureSpec {
    MeasureSpec::Uniform { dim: 4, n_points: 2000 }
}

fn default_radii() -> Vec<f64> {
    (1..=6).map(|k| 0.5f64.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateParams {
    /// Strictly decreasing radii in `(0, 1]` for the Frostman fit.
    pub radii: Vec<f64>,
    pub centers: CenterPlan,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self {
            radii: default_radii(),
            centers: CenterPlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SeparateParams {
    /// Declared Frostman exponent; defaults to the ambient dimension.
    pub s: Option<f64>,
    /// Declared Frostman constant; defaults to 2.
    pub c_mu: Option<f64>,
    pub max_iter: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularBins {
    pub t: (f64, f64),
    pub r: (f64, f64),
    pub alpha: (f64, f64),
    pub n: [usize; 3],
}

impl RegularBins {
    fn default_for(dim: usize) -> Self {
        let diam = (dim as f64).sqrt();
        Self {
            t: (0.0, diam),
            r: (0.0, diam),
            alpha: (0.0, PI),
            n: [32, 32, 32],
        }
    }

    fn spec(&self) -> Result<BinSpec, ExperimentError> {
        if self.n.contains(&0) {
            return usage("bins.n entries must be positive");
        }
        BinSpec::regular(self.t, self.r, self.alpha, self.n).map_err(|e| ExperimentError::Usage(format!("bins: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigsetParams {
    /// Defaults to 32³ bins over `(0, √d]² × (0, π)`.
    pub bins: Option<RegularBins>,
    pub mode: HistogramMode,
    pub samples: u64,
    pub probe: Option<ProbeBox>,
    pub min_mass: f64,
    /// Strictly decreasing mollifier scales; empty skips the stability run.
    pub mollify: Vec<f64>,
}

impl Default for ConfigsetParams {
    fn default() -> Self {
        Self {
            bins: None,
            mode: HistogramMode::MonteCarlo,
            samples: 1_000_000,
            probe: None,
            min_mass: 0.0,
            mollify: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncidenceParams {
    pub base: (f64, f64, f64),
    pub epsilons: Vec<f64>,
    pub samples: u64,
    pub expected_slope: f64,
    pub tolerance: f64,
}

impl Default for IncidenceParams {
    fn default() -> Self {
        Self {
            base: (0.5, 0.5, FRAC_PI_4),
            epsilons: vec![0.2, 0.1, 0.05, 0.025],
            samples: 1_000_000,
            expected_slope: 3.0,
            tolerance: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Plain,
    Conditional,
    Quadrature,
}

impl Estimator {
    fn method(self, n: usize, seed: u64) -> SigmaMethod {
        match self {
            Estimator::Plain => SigmaMethod::Plain { n, seed },
            Estimator::Conditional => SigmaMethod::Conditional { n, seed },
            Estimator::Quadrature => SigmaMethod::Quadrature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSpec {
    /// Random unit pair, drawn from the run seed.
    Generic,
    /// `η₀ = (cos φ, 0', sin φ)`, `ξ₀ = −g_α η₀`.
    Resonant {
        phi: f64,
    },
    Explicit {
        xi: Vec<f64>,
        eta: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierParams {
    /// Defaults to the measure's dimension.
    pub dim: Option<usize>,
    pub alpha: f64,
    pub direction: DirectionSpec,
    pub r_list: Vec<f64>,
    pub window: usize,
    pub estimator: Estimator,
    pub samples: usize,
    pub tolerance: f64,
    /// Scales at which `C₁(α)` is calibrated before the bound check.
    pub c1_r_list: Vec<f64>,
    pub c1_directions: usize,
}

impl Default for FourierParams {
    fn default() -> Self {
        Self {
            dim: None,
            alpha: FRAC_PI_3,
            direction: DirectionSpec::Generic,
            r_list: vec![8.0, 16.0, 32.0, 64.0],
            window: 9,
            estimator: Estimator::Conditional,
            samples: 1_000_000,
            tolerance: 0.3,
            c1_r_list: vec![4.0, 8.0, 16.0],
            c1_directions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailprobeParams {
    pub t: f64,
    pub r: f64,
    pub alpha: f64,
    pub r_list: Vec<f64>,
    pub samples: usize,
    pub estimator: Estimator,
    pub estimator_samples: usize,
    /// Frostman exponent for the prediction; fitted from the measure when absent.
    pub s_hat: Option<f64>,
    pub annulus_dims: Vec<usize>,
    pub annulus_r_list: Vec<f64>,
    pub annulus_samples: usize,
    pub annulus_tolerance: f64,
}

impl Default for TailprobeParams {
    fn default() -> Self {
        Self {
            t: 0.5,
            r: 0.5,
            alpha: FRAC_PI_3,
            r_list: vec![1.0, 2.0, 4.0, 8.0],
            samples: 2000,
            estimator: Estimator::Quadrature,
            estimator_samples: 100_000,
            s_hat: None,
            annulus_dims: vec![3, 4],
            annulus_r_list: vec![4.0, 8.0, 16.0, 32.0],
            annulus_samples: 200_000,
            annulus_tolerance: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub subcommand: Option<Subcommand>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 lets rayon decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_measure")]
    pub measure: MeasureSpec,
    #[serde(default)]
    pub generate: GenerateParams,
    #[serde(default)]
    pub separate: SeparateParams,
    #[serde(default)]
    pub configset: ConfigsetParams,
    #[serde(default)]
    pub incidence: IncidenceParams,
    #[serde(default)]
    pub fourier: FourierParams,
    #[serde(default)]
    pub tailprobe: TailprobeParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn check_decreasing(name: &str, v: &[f64], min_len: usize) -> Result<(), ExperimentError> {
    if v.len() < min_len {
        return usage(format!("{name}: need at least {min_len} values, got {}", v.len()));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) || v.windows(2).any(|w| !(w[1] < w[0])) {
        return usage(format!("{name}: values must be positive and strictly decreasing"));
    }
    Ok(())
}

fn check_increasing(name: &str, v: &[f64], min_len: usize) -> Result<(), ExperimentError> {
    if v.len() < min_len {
        return usage(format!("{name}: need at least {min_len} values, got {}", v.len()));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) || v.windows(2).any(|w| !(w[1] > w[0])) {
        return usage(format!("{name}: values must be positive and strictly increasing"));
    }
    Ok(())
}

fn check_acute(name: &str, a: f64) -> Result<(), ExperimentError> {
    if !(a > 0.0 && a < std::f64::consts::FRAC_PI_2) {
        return usage(format!("{name}: alpha = {a} must lie in (0, π/2)"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Usage(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills dimension-dependent defaults and checks every precondition.
    pub fn validate(mut self) -> Result<Self, ExperimentError> {
        let dim = self.measure.dim();
        if dim == 0 {
            return usage("measure: dimension must be positive");
        }
        match &self.measure {
            MeasureSpec::Uniform { n_points, .. } if *n_points == 0 => {
                return usage("measure.n_points must be positive")
            }
            MeasureSpec::Cantor { ratio, .. } if !(*ratio > 0.0 && *ratio < 0.5) => {
                return usage("measure.ratio must lie in (0, 1/2)")
            }
            _ => {}
        }

        let g = &self.generate;
        check_decreasing("generate.radii", &g.radii, 4)?;
        if g.radii[0] > 1.0 {
            return usage("generate.radii: values must lie in (0, 1]");
        }

        let sp = &mut self.separate;
        let s = *sp.s.get_or_insert(dim as f64);
        let c = *sp.c_mu.get_or_insert(2.0);
        if !(s > (dim as f64 + 1.0) / 2.0) {
            return usage(format!(
                "separate.s = {s} must exceed (d+1)/2 = {}",
                (dim as f64 + 1.0) / 2.0
            ));
        }
        if !(c >= 1.0) {
            return usage(format!("separate.c_mu = {c} must be at least 1"));
        }

        let cs = &mut self.configset;
        let bins = *cs.bins.get_or_insert(RegularBins::default_for(dim));
        bins.spec()?;
        if cs.mode == HistogramMode::MonteCarlo && cs.samples == 0 {
            return usage("configset.samples must be positive");
        }
        if let Some(p) = &cs.probe {
            if !(p.t.0 < p.t.1 && p.r.0 < p.r.1 && p.alpha.0 < p.alpha.1) {
                return usage("configset.probe: each range needs lo < hi");
            }
        }
        if !cs.mollify.is_empty() {
            check_decreasing("configset.mollify", &cs.mollify, 2)?;
        }

        let inc = &self.incidence;
        check_decreasing(
            "incidence.epsilons (the slab fit needs a strictly decreasing ε list)",
            &inc.epsilons,
            4,
        )?;
        for &epsilon in &inc.epsilons {
            crate::config::SlabQuery {
                t: inc.base.0,
                r: inc.base.1,
                alpha: inc.base.2,
                epsilon,
            }
            .validate()
            .map_err(|e| ExperimentError::Usage(format!("incidence: {e}")))?;
        }
        if inc.samples == 0 {
            return usage("incidence.samples must be positive");
        }

        let f = &mut self.fourier;
        let fd = *f.dim.get_or_insert(dim);
        check_acute("fourier.alpha", f.alpha)?;
        if !(2..=5).contains(&fd) && f.estimator != Estimator::Plain {
            return usage("fourier.dim must lie in 2..=5 for the conditional and quadrature estimators");
        }
        if fd < 2 {
            return usage("fourier.dim must be at least 2");
        }
        check_increasing("fourier.r_list", &f.r_list, 4)?;
        check_increasing("fourier.c1_r_list", &f.c1_r_list, 1)?;
        if f.window == 0 || f.c1_directions == 0 {
            return usage("fourier.window and fourier.c1_directions must be positive");
        }
        if f.estimator != Estimator::Quadrature && f.samples == 0 {
            return usage("fourier.samples must be positive");
        }
        match &f.direction {
            DirectionSpec::Explicit { xi, eta } => {
                FrequencyPair::new(xi.clone(), eta.clone())
                    .map_err(|e| ExperimentError::Usage(format!("fourier.direction: {e}")))?;
                if xi.len() != fd {
                    return usage("fourier.direction: length must equal fourier.dim");
                }
            }
            DirectionSpec::Resonant { phi } if !phi.is_finite() => {
                return usage("fourier.direction.phi must be finite")
            }
            _ => {}
        }

        let tp = &self.tailprobe;
        check_acute("tailprobe.alpha", tp.alpha)?;
        if !(tp.t > 0.0 && tp.r > 0.0) {
            return usage("tailprobe.t and tailprobe.r must be positive");
        }
        check_increasing("tailprobe.r_list", &tp.r_list, 2)?;
        check_increasing("tailprobe.annulus_r_list", &tp.annulus_r_list, 2)?;
        if tp.samples < 2 || tp.annulus_samples < 2 {
            return usage("tailprobe sample counts must be at least 2");
        }
        if tp.annulus_dims.iter().any(|&d| d < 3) {
            return usage("tailprobe.annulus_dims entries must be at least 3");
        }
        if !(2..=5).contains(&dim) && tp.estimator != Estimator::Plain {
            return usage("tailprobe needs 2 <= d <= 5 for the conditional and quadrature estimators");
        }
        Ok(self)
    }

    /// SHA-256 of the normalized parameters, excluding `subcommand`, `out`
    /// and `threads`.
    pub fn hash(&self) -> String {
        let mut core = self.clone();
        core.subcommand = None;
        core.out = None;
        core.threads = 0;
        let text = serde_json::to_string(&core).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub status: Status,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Verdict {
    fn new(check: &str, status: Status, value: f64, target: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            status,
            value,
            target,
            tolerance,
            detail: detail.into(),
        }
    }

    fn within(check: &str, value: f64, target: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        let ok = (value - target).abs() <= tolerance;
        Self::new(
            check,
            if ok { Status::Pass } else { Status::Fail },
            value,
            target,
            tolerance,
            detail,
        )
    }

    fn failed(check: &str, detail: impl Into<String>) -> Self {
        Self::new(check, Status::Fail, f64::NAN, f64::NAN, 0.0, detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subcommand: Subcommand,
    pub config_sha256: String,
    pub seed: u64,
    /// Normalized configuration without the run location.
    pub config: ExperimentConfig,
    pub verdicts: Vec<Verdict>,
    pub artifacts: Vec<String>,
    /// Not serialized, so the report file stays reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.verdicts.iter().any(|v| v.status == Status::Fail)
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(self.failed())
    }
}

/// Writes artifacts with the shared provenance header.
struct Sink {
    dir: PathBuf,
    hash: String,
    seed: u64,
    written: Vec<String>,
}

impl Sink {
    fn csv(&mut self, name: &str, what: &str, columns: &str, rows: &[String]) -> Result<(), ExperimentError> {
        let mut text = String::new();
        let _ = writeln!(text, "# triconf {what}");
        let _ = writeln!(text, "# config_sha256={}", self.hash);
        let _ = writeln!(text, "# seed={}", self.seed);
        let _ = writeln!(text, "{columns}");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        self.put(name, text)
    }

    fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<(), ExperimentError> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            config_sha256: &'a str,
            seed: u64,
            data: &'a T,
        }
        let text = serde_json::to_string_pretty(&Envelope {
            config_sha256: &self.hash,
            seed: self.seed,
            data,
        })
        .map_err(|e| ExperimentError::Run(e.to_string()))?;
        self.put(name, text + "\n")
    }

    fn put(&mut self, name: &str, text: String) -> Result<(), ExperimentError> {
        fs::write(self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }
}

/// Runs `sub` (or the config's own subcommand) and writes artifacts into
/// `config.out` (default `./out`).
pub fn run(config: ExperimentConfig, sub: Option<Subcommand>) -> Result<RunReport, ExperimentError> {
    let start = Instant::now();
    let mut config = config.validate()?;
    let sub = match sub.or(config.subcommand) {
        Some(s) => s,
        None => return usage("no subcommand given"),
    };
    config.subcommand = Some(sub);
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    let dir = fs::canonicalize(&dir)?;

    let hash = config.hash();
    let seed = config.seed;
    let mut sink = Sink {
        dir,
        hash: hash.clone(),
        seed,
        written: Vec::new(),
    };
    let mu = config
        .measure
        .generate(derive_seed(seed, TAG_MEASURE))
        .map_err(|e| ExperimentError::Run(format!("measure generation: {e}")))?;

    let mut verdicts = Vec::new();
    if sub.includes(Subcommand::Generate) {
        run_generate(&config, &mu, &mut sink, &mut verdicts)?;
    }
    if sub.includes(Subcommand::Separate) {
        run_separate(&config, &mu, &mut sink, &mut verdicts)?;
    }
    if sub.includes(Subcommand::Configset) {
        run_configset(&config, &mu, &mut sink, &mut verdicts)?;
    }
    if sub.includes(Subcommand::Incidence) {
        run_incidence(&config, &mu, &mut sink, &mut verdicts)?;
    }
    if sub.includes(Subcommand::Fourier) {
        run_fourier(&config, &mut sink, &mut verdicts)?;
    }
    if sub.includes(Subcommand::Tailprobe) {
        run_tailprobe(&config, &mu, &mut sink, &mut verdicts)?;
    }

    let mut echo = config.clone();
    echo.out = None;
    echo.threads = 0;
    let mut report = RunReport {
        subcommand: sub,
        config_sha256: hash,
        seed,
        config: echo,
        verdicts,
        artifacts: Vec::new(),
        wall_clock_s: 0.0,
    };
    report.artifacts = sink.written.clone();
    report.artifacts.push("report.json".into());
    let text = serde_json::to_string_pretty(&report).map_err(|e| ExperimentError::Run(e.to_string()))?;
    fs::write(sink.dir.join("report.json"), text + "\n")?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn run_generate(
    cfg: &ExperimentConfig,
    mu: &DiscreteMeasure,
    sink: &mut Sink,
    verdicts: &mut Vec<Verdict>,
) -> Result<(), ExperimentError> {
    sink.json("measure.json", mu)?;
    let d = mu.dim() as f64;
    match estimate_frostman(mu, &cfg.generate.radii, &cfg.generate.centers) {
        Ok(est) => {
            let rows: Vec<String> = est
                .radii
                .iter()
                .zip(&est.max_masses)
                .map(|(r, m)| format!("{r},{m}"))
                .collect();
            sink.csv("frostman.csv", "frostman ball masses", "radius,max_mass", &rows)?;
            sink.json("frostman.json", &est)?;
            let threshold = (d + 1.0) / 2.0;
            let status = if est.s_hat > threshold {
                Status::Pass
            } else {
                Status::Flag
            };
            verdicts.push(Verdict::new(
                "frostman_s_hat",
                status,
                est.s_hat,
                threshold,
                0.0,
                "fitted exponent against the separation threshold (d+1)/2; flag when at or below",
            ));
        }
        Err(e) => verdicts.push(Verdict::failed("frostman_s_hat", e.to_string())),
    }
    Ok(())
}

fn run_separate(
    cfg: &ExperimentConfig,
    mu: &DiscreteMeasure,
    sink: &mut Sink,
    verdicts: &mut Vec<Verdict>,
) -> Result<(), ExperimentError> {
    let p = &cfg.separate;
    let (s, c) = (p.s.expect("validated"), p.c_mu.expect("validated"));
    let bound = p.max_iter.unwrap_or_else(|| iteration_bound(mu.dim(), c, s));
    match separate_three(mu, c, s, p.max_iter) {
        Ok(sep) => {
            let masses = sep.masses(mu);
            let rows: Vec<String> = sep
                .cubes
                .iter()
                .zip(&masses)
                .zip(&sep.members)
                .enumerate()
                .map(|(i, ((cube, m), members))| {
                    let coords: Vec<String> = cube.coords.iter().map(|k| k.to_string()).collect();
                    format!("E{},{},{},{},{}", i + 1, cube.level, coords.join(" "), m, members.len())
                })
                .collect();
            sink.csv(
                "separation.csv",
                "separation cubes",
                "role,level,coords,mass,members",
                &rows,
            )?;
            sink.json("separation.json", &sep)?;
            verdicts.push(Verdict::new(
                "separation_c1",
                Status::Pass,
                sep.c1,
                0.0,
                0.0,
                "smallest piece mass; must be positive",
            ));
            verdicts.push(Verdict::new(
                "separation_c2",
                Status::Pass,
                sep.c2,
                0.0,
                0.0,
                "smallest coordinate gap between pieces; must be positive",
            ));
            let angles_ok = 0.0 < sep.c3 && sep.c3 <= sep.c4 && sep.c4 < std::f64::consts::FRAC_PI_2;
            verdicts.push(Verdict::new(
                "separation_angle_c4",
                if angles_ok { Status::Pass } else { Status::Fail },
                sep.c4,
                std::f64::consts::FRAC_PI_2,
                0.0,
                format!("angle bounds c3 = {} <= c4 < π/2", sep.c3),
            ));
            verdicts.push(Verdict::new(
                "separation_iterations",
                if sep.iterations <= bound {
                    Status::Pass
                } else {
                    Status::Fail
                },
                sep.iterations as f64,
                bound as f64,
                0.0,
                "stopping-time iterations against the iteration bound",
            ));
        }
        Err(SeparatorError::ExhaustedIterations { cube, mass, level, .. }) => {
            let r = cube.side() * (mu.dim() as f64).sqrt() / 2.0;
            let excess = profile_violation(mu, s, c, r, &[cube.center()]);
            let detail = format!(
                "iterations exhausted at level {level} on a cube of mass {mass}; log-excess over C r^s at r = {r}"
            );
            let status = if excess > 0.0 { Status::Flag } else { Status::Fail };
            verdicts.push(Verdict::new("separation_profile", status, excess, 0.0, 0.0, detail));
        }
        Err(e) => verdicts.push(Verdict::failed("separation", e.to_string())),
    }
    Ok(())
}

fn run_configset(
    cfg: &ExperimentConfig,
    mu: &DiscreteMeasure,
    sink: &mut Sink,
    verdicts: &mut Vec<Verdict>,
) -> Result<(), ExperimentError> {
    let p = &cfg.configset;
    let bins = p.bins.expect("validated").spec()?;
    let seed = derive_seed(cfg.seed, TAG_CONFIGSET);
    let sampling = match p.mode {
        HistogramMode::Exact => Sampling::Exact,
        HistogramMode::MonteCarlo => Sampling::MonteCarlo { n: p.samples, seed },
    };
    let hist = match pushforward_histogram(mu, mu, mu, &bins, sampling) {
        Ok(h) => h,
        Err(e) => {
            verdicts.push(Verdict::failed("configset_histogram", e.to_string()));
            return Ok(());
        }
    };
    let columns = if hist.samples.is_some() {
        "t,r,alpha,mass,stderr"
    } else {
        "t,r,alpha,mass"
    };
    sink.csv(
        "histogram.csv",
        "triangle configuration histogram (bin centres)",
        columns,
        &hist.csv_rows(),
    )?;
    let balance = hist.total() + hist.out_of_range + hist.excluded;
    verdicts.push(Verdict::within(
        "configset_mass_balance",
        balance,
        1.0,
        1e-9,
        format!(
            "binned + out of range ({}) + degenerate ({})",
            hist.out_of_range, hist.excluded
        ),
    ));
    if let Some(bx) = &p.probe {
        let cov = interior_probe(&hist, bx, p.min_mass);
        sink.json("coverage.json", &cov)?;
        verdicts.push(Verdict::new(
            "configset_coverage",
            if cov.covered { Status::Pass } else { Status::Flag },
            cov.fraction,
            1.0,
            0.0,
            format!("{} of {} bins in the probe box occupied", cov.occupied, cov.bins_in_box),
        ));
    }
    if !p.mollify.is_empty() {
        let molls: Vec<MollifierSpec> = p
            .mollify
            .iter()
            .map(|&e| MollifierSpec::new(e))
            .collect::<Result<_, _>>()
            .map_err(|e| ExperimentError::Usage(format!("configset.mollify: {e}")))?;
        let n = if p.mode == HistogramMode::MonteCarlo {
            p.samples
        } else {
            1_000_000
        };
        match delta_stability(mu, &molls, &bins, n, derive_seed(seed, 1)) {
            Ok(rep) => {
                sink.json("stability.json", &rep)?;
                let last = rep.distances.last().copied().unwrap_or(0.0);
                verdicts.push(Verdict::new(
                    "configset_stability",
                    if rep.decreasing { Status::Pass } else { Status::Flag },
                    last,
                    0.0,
                    0.0,
                    "TV distance between the two finest mollifications; flag unless distances decrease",
                ));
            }
            Err(e) => verdicts.push(Verdict::failed("configset_stability", e.to_string())),
        }
    }
    Ok(())
}

fn run_incidence(
    cfg: &ExperimentConfig,
    mu: &DiscreteMeasure,
    sink: &mut Sink,
    verdicts: &mut Vec<Verdict>,
) -> Result<(), ExperimentError> {
    let p = &cfg.incidence;
    let seed = derive_seed(cfg.seed, TAG_INCIDENCE);
    match incidence_scaling_fit(mu, mu, mu, p.base, &p.epsilons, p.samples, seed) {
        Ok(fit) => {
            let rows: Vec<String> = fit
                .estimates
                .iter()
                .map(|e| format!("{},{},{},{},{}", e.epsilon, e.mass, e.stderr, e.hits, e.samples))
                .collect();
            sink.csv(
                "incidence.csv",
                "incidence slab masses",
                "epsilon,mass,stderr,hits,samples",
                &rows,
            )?;
            sink.json("incidence_fit.json", &fit)?;
            verdicts.push(Verdict::within(
                "incidence_slope",
                fit.fit.slope,
                p.expected_slope,
                p.tolerance,
                "log slab mass against log ε",
            ));
        }
        Err(e) => verdicts.push(Verdict::failed("incidence_slope", e.to_string())),
    }
    Ok(())
}

fn run_fourier(cfg: &ExperimentConfig, sink: &mut Sink, verdicts: &mut Vec<Verdict>) -> Result<(), ExperimentError> {
    let p = &cfg.fourier;
    let dim = p.dim.expect("validated");
    let seed = derive_seed(cfg.seed, TAG_FOURIER);
    let checks = derive_seed(cfg.seed, TAG_CHECKS);

    let mut orders = Vec::new();
    let mut worst: f64 = f64::INFINITY;
    for (i, a) in [PI / 6.0, PI / 4.0, PI / 3.0].into_iter().enumerate() {
        for d in [3, 4] {
            let o = chart_order(d, a, &[0.2, 0.1, 0.05, 0.025], derive_seed(checks, (i * 8 + d) as u64))
                .map_err(|e| ExperimentError::Run(e.to_string()))?;
            worst = worst.min(o.norm_order).min(o.inner_order);
            orders.push(format!("{d},{a},{},{}", o.norm_order, o.inner_order));
        }
    }
    sink.csv(
        "chart_orders.csv",
        "chart residual orders",
        "dim,alpha,norm_order,inner_order",
        &orders,
    )?;
    verdicts.push(Verdict::new(
        "chart_order",
        if worst >= 2.7 { Status::Pass } else { Status::Fail },
        worst,
        2.7,
        0.0,
        "smallest fitted residual order; must be at least the target",
    ));

    let mut worst_det: f64 = 0.0;
    let mut failures = 0;
    for d in 2..=5 {
        let t = hessian_trials(d, 100, derive_seed(checks, 100 + d as u64))
            .map_err(|e| ExperimentError::Run(e.to_string()))?;
        worst_det = worst_det.max(t.max_rel_err);
        failures += t.failures;
    }
    verdicts.push(Verdict::new(
        "hessian_identity",
        if failures == 0 { Status::Pass } else { Status::Fail },
        worst_det,
        0.0,
        DET_REL_TOL,
        "largest relative gap between direct and closed-form determinants",
    ));

    let direction = match &p.direction {
        DirectionSpec::Generic => generic_direction(dim, p.alpha, seed),
        DirectionSpec::Resonant { phi } => {
            resonant_direction(dim, p.alpha, *phi).map_err(|e| ExperimentError::Usage(e.to_string()))?
        }
        DirectionSpec::Explicit { xi, eta } => FrequencyPair {
            xi: xi.clone(),
            eta: eta.clone(),
        },
    };
    let engine = SigmaEngine::new(dim, p.alpha, p.estimator.method(p.samples, seed))
        .map_err(|e| ExperimentError::Usage(e.to_string()))?;
    match decay_exponent_fit(&engine, &direction, &p.r_list, p.window) {
        Ok(fit) => {
            let rows: Vec<String> = fit
                .points
                .iter()
                .enumerate()
                .map(|(i, pt)| format!("{},{},{},{}", pt.r, pt.abs_sigma, pt.stderr, u8::from(i < fit.used)))
                .collect();
            sink.csv("fourier.csv", "sigma hat decay", "R,abs_sigma,stderr,used", &rows)?;
            sink.json("decay_fit.json", &fit)?;
            verdicts.push(Verdict::within(
                "decay_exponent",
                fit.exponent,
                fit.predicted,
                p.tolerance,
                format!("{:?} direction, window {}", fit.regime, fit.window),
            ));
        }
        Err(e) => verdicts.push(Verdict::failed("decay_exponent", e.to_string())),
    }

    let dirs: Vec<FrequencyPair> = (0..p.c1_directions)
        .map(|k| generic_direction(dim, p.alpha, derive_seed(seed, 10 + k as u64)))
        .collect();
    let c1 = fit_c1(&engine, &dirs, &p.c1_r_list).map_err(|e| ExperimentError::Run(e.to_string()))?;
    let pairs: Vec<FrequencyPair> = dirs
        .iter()
        .flat_map(|d| p.r_list.iter().map(move |&r| d.scaled(r)))
        .collect();
    let check = check_decay_bound(&engine, c1.c1, &pairs).map_err(|e| ExperimentError::Run(e.to_string()))?;
    sink.json("decay_bound.json", &(&c1, &check))?;
    verdicts.push(Verdict::new(
        "decay_bound",
        if check.violations == 0 {
            Status::Pass
        } else {
            Status::Fail
        },
        check.violations as f64,
        0.0,
        0.0,
        format!("violations beyond 3 standard errors of C1 = {} times the bound", c1.c1),
    ));
    Ok(())
}

fn run_tailprobe(
    cfg: &ExperimentConfig,
    mu: &DiscreteMeasure,
    sink: &mut Sink,
    verdicts: &mut Vec<Verdict>,
) -> Result<(), ExperimentError> {
    let p = &cfg.tailprobe;
    let seed = derive_seed(cfg.seed, TAG_TAIL);
    let aseed = derive_seed(cfg.seed, TAG_ANNULUS);

    let mut rows = Vec::new();
    for &d in &p.annulus_dims {
        let mut eta = vec![0.0; d];
        eta[0] = 0.6;
        eta[d - 1] = 0.8;
        match annulus_scaling(
            &eta,
            p.alpha,
            &p.annulus_r_list,
            p.annulus_samples,
            derive_seed(aseed, d as u64),
        ) {
            Ok(fit) => {
                for pt in &fit.points {
                    rows.push(format!(
                        "{d},{},{},{},{}",
                        pt.r,
                        pt.estimate,
                        pt.stderr,
                        u8::from(pt.unstable)
                    ));
                }
                let mut v = Verdict::within(
                    &format!("annulus_growth_d{d}"),
                    fit.fit.slope,
                    fit.predicted,
                    p.annulus_tolerance,
                    "log annulus integral against log R",
                );
                if v.status == Status::Pass && fit.any_unstable() {
                    v.status = Status::Flag;
                    v.detail.push_str("; some estimates unstable");
                }
                verdicts.push(v);
            }
            Err(e) => verdicts.push(Verdict::failed(&format!("annulus_growth_d{d}"), e.to_string())),
        }
    }
    sink.csv(
        "annulus.csv",
        "annulus integral estimates",
        "dim,R,estimate,stderr,unstable",
        &rows,
    )?;

    let s_hat = match p.s_hat {
        Some(s) => s,
        None => {
            estimate_frostman(mu, &cfg.generate.radii, &cfg.generate.centers)
                .map_err(|e| ExperimentError::Run(e.to_string()))?
                .s_hat
        }
    };
    let engine = SigmaEngine::new(
        mu.dim(),
        p.alpha,
        p.estimator.method(p.estimator_samples, derive_seed(seed, 1)),
    )
    .map_err(|e| ExperimentError::Usage(e.to_string()))?;
    match tail_probe(mu, &engine, p.t, p.r, &p.r_list, p.samples, seed, s_hat) {
        Ok(tp) => {
            let rows: Vec<String> = tp
                .probe
                .points
                .iter()
                .map(|pt| format!("{},{},{},{}", pt.r, pt.estimate, pt.stderr, u8::from(pt.unstable)))
                .collect();
            sink.csv(
                "tailprobe.csv",
                "shell tail integral estimates",
                "R,estimate,stderr,unstable",
                &rows,
            )?;
            sink.json("tailprobe.json", &tp)?;
            let same_sign = tp.probe.fit.slope.signum() == tp.probe.predicted.signum();
            verdicts.push(Verdict::new(
                "tail_exponent",
                if same_sign { Status::Pass } else { Status::Flag },
                tp.probe.fit.slope,
                tp.probe.predicted,
                f64::INFINITY,
                format!("sign check only against -(3 s_hat - 2d - 3)/2 with s_hat = {s_hat}"),
            ));
        }
        Err(e) => verdicts.push(Verdict::failed("tail_exponent", e.to_string())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_default_bins() {
        let cfg = ExperimentConfig::from_json(r#"{"subcommand": "configset"}"#)
            .unwrap()
            .validate()
            .unwrap();
        assert_eq!(cfg.configset.bins.unwrap().n, [32, 32, 32]);
        assert_eq!(cfg.fourier.dim, Some(4));
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = ExperimentConfig::from_json(r#"{"sede": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let nested = ExperimentConfig::from_json(r#"{"incidence": {"epsilon": [0.1]}}"#).unwrap_err();
        assert!(nested.to_string().contains("epsilon"));
    }

    #[test]
    fn unordered_epsilons_are_rejected() {
        let cfg = ExperimentConfig::from_json(r#"{"incidence": {"epsilons": [0.1, 0.2, 0.05, 0.025]}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("decreasing"), "{err}");
    }

    #[test]
    fn hash_ignores_run_location() {
        let a = ExperimentConfig::default().validate().unwrap();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        b.threads = 3;
        b.subcommand = Some(Subcommand::Fourier);
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
