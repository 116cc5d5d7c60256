//! Scenario files: parsing, validation and dispatch.
//!
//! A scenario is a JSON document
//!
//! ```json
//! {"command": "hdist", "parameters": {...}, "output": {"result": "r.json", "csv": "t.csv"}}
//! ```
//!
//! Parsing builds every domain object up front, so a scenario that parses
//! cannot fail validation later and nothing is written for one that does not.
//! The result file holds only the computed payload; run metadata (digest,
//! version, wall time) lives in the [`RunRecord`] so that reruns produce
//! byte-identical result files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{
    apply_gauge, commutant_dimension, gauge_group_factors, horizontal_lift, induced_length, induced_speed, lift_length,
    lift_projection_error, project_pi, random_right_gauge, relative_gauge, standard_purification, Purification,
};
use crate::distance::{
    check_unitary_invariance, dynamic_distance, segment_uncertainties, DistanceProblem, OptimizerConfig,
};
use crate::error::Error;
use crate::evolution::{
    conjugate_trajectory, energy_uncertainty, evolve_von_neumann, h_distance, HamiltonianPath, Segment,
    StateTrajectory, DEFAULT_QUADRATURE_POINTS,
};
use crate::io::{
    path_to_json, to_json_bytes, write_lift_csv, write_trajectory_csv, MatrixJson, PurificationJson, SegmentJson,
};
use crate::linalg::{
    hs_norm, random_unitary, seeded_rng, DensityOperator, HermitianOperator, UnitaryOperator, DEFAULT_GROUPING_TOL,
};
use crate::twin::{
    check_distribution_invariance, discriminate_representations, make_entangler, DistributionCheck, Entangler,
    LinearGenerator, TwinReport,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const COMMANDS: [&str; 6] = ["evolve", "hdist", "dyndist", "lift", "gauge", "twin"];

/// Shipped scenario skeletons, one per command.
pub const TEMPLATES: [(&str, &str); 6] = [
    ("evolve", include_str!("../templates/evolve.json")),
    ("hdist", include_str!("../templates/hdist.json")),
    ("dyndist", include_str!("../templates/dyndist.json")),
    ("lift", include_str!("../templates/lift.json")),
    ("gauge", include_str!("../templates/gauge.json")),
    ("twin", include_str!("../templates/twin.json")),
];

pub fn template(name: &str) -> Option<&'static str> {
    TEMPLATES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Rejected scenario, with the JSON key path of the offending value.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub path: String,
    pub reason: String,
}

impl ValidationError {
    fn new(path: impl Into<String>, reason: impl fmt::Display) -> Self {
        Self {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug)]
pub enum RunError {
    Validation(ValidationError),
    Compute(Error),
    Io { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Compute(_) => 1,
            RunError::Validation(_) => 2,
            RunError::Io { .. } => 3,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Validation(e) => write!(f, "invalid scenario: {e}"),
            RunError::Compute(e) => write!(f, "computation failed: {e}"),
            RunError::Io { path, message } => write!(f, "{}: {message}", path.display()),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ValidationError> for RunError {
    fn from(e: ValidationError) -> Self {
        RunError::Validation(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Compute(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub result: PathBuf,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    command: String,
    #[serde(default)]
    parameters: Option<serde_json::Value>,
    output: OutputPaths,
}

fn default_samples() -> usize {
    2
}

fn default_quadrature() -> usize {
    DEFAULT_QUADRATURE_POINTS
}

fn default_grouping_tol() -> f64 {
    DEFAULT_GROUPING_TOL
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvolveParams {
    rho0: MatrixJson,
    path: Vec<SegmentJson>,
    #[serde(default)]
    t0: f64,
    #[serde(default = "default_samples")]
    samples_per_segment: usize,
    #[serde(default)]
    conjugate_by: Option<MatrixJson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HDistParams {
    rho0: MatrixJson,
    path: Vec<SegmentJson>,
    #[serde(default)]
    t0: f64,
    #[serde(default = "default_quadrature")]
    quadrature_points: usize,
    #[serde(default = "default_samples")]
    samples_per_segment: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OptimizerParams {
    restarts: usize,
    max_iterations: usize,
    penalty_schedule: Vec<f64>,
    convergence_tol: f64,
    endpoint_tol: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            restarts: d.restarts,
            max_iterations: d.max_iterations,
            penalty_schedule: d.penalty_schedule,
            convergence_tol: d.convergence_tol,
            endpoint_tol: d.endpoint_tol,
        }
    }
}

impl OptimizerParams {
    fn config(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            restarts: self.restarts,
            seed,
            max_iterations: self.max_iterations,
            penalty_schedule: self.penalty_schedule.clone(),
            convergence_tol: self.convergence_tol,
            endpoint_tol: self.endpoint_tol,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DynDistParams {
    rho0: MatrixJson,
    rho1: MatrixJson,
    duration: f64,
    segments: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    optimizer: OptimizerParams,
    #[serde(default = "default_samples")]
    samples_per_segment: usize,
    #[serde(default)]
    invariance_seed: Option<u64>,
}

fn default_lift_samples() -> usize {
    17
}

fn default_lift_steps() -> usize {
    8
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LiftParams {
    rho0: MatrixJson,
    #[serde(default)]
    rho1: Option<MatrixJson>,
    #[serde(default)]
    path: Option<Vec<SegmentJson>>,
    #[serde(default)]
    duration: Option<f64>,
    #[serde(default)]
    segments: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    optimizer: OptimizerParams,
    #[serde(default)]
    purification: Option<PurificationJson>,
    #[serde(default = "default_lift_samples")]
    samples_per_segment: usize,
    #[serde(default = "default_lift_steps")]
    steps_per_sample: usize,
    #[serde(default = "default_grouping_tol")]
    grouping_tol: f64,
    #[serde(default = "default_true")]
    gauge_translate: bool,
}

fn default_gauge_samples() -> usize {
    16
}

fn default_cutoff() -> f64 {
    1e-10
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GaugeParams {
    rho: MatrixJson,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_gauge_samples")]
    samples: usize,
    #[serde(default = "default_grouping_tol")]
    grouping_tol: f64,
    #[serde(default = "default_cutoff")]
    commutant_cutoff: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
enum EntanglerParams {
    Matrix(MatrixJson),
    Random(RandomEntanglerParams),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomEntanglerParams {
    d: usize,
    angle_scale: f64,
}

fn default_twin_samples() -> usize {
    10_000
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TwinParams {
    generator: MatrixJson,
    entangler: EntanglerParams,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_twin_samples")]
    samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvolveJob {
    pub rho0: DensityOperator,
    pub path: HamiltonianPath,
    pub samples_per_segment: usize,
    pub conjugate_by: Option<UnitaryOperator>,
}

#[derive(Debug, Clone)]
pub struct HDistJob {
    pub rho0: DensityOperator,
    pub path: HamiltonianPath,
    pub quadrature_points: usize,
    pub samples_per_segment: usize,
}

#[derive(Debug, Clone)]
pub struct DynDistJob {
    pub problem: DistanceProblem,
    pub config: OptimizerConfig,
    pub samples_per_segment: usize,
    /// Also run the conjugated problem with this Haar unitary.
    pub invariance_unitary: Option<UnitaryOperator>,
}

#[derive(Debug, Clone)]
pub enum LiftBase {
    Path(HamiltonianPath),
    Optimized(Box<DynDistJob>),
}

#[derive(Debug, Clone)]
pub struct LiftJob {
    pub rho0: DensityOperator,
    pub base: LiftBase,
    pub purification: Purification,
    pub samples_per_segment: usize,
    pub steps_per_sample: usize,
    pub grouping_tol: f64,
    pub gauge_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct GaugeJob {
    pub rho: DensityOperator,
    pub seed: u64,
    pub samples: usize,
    pub grouping_tol: f64,
    pub commutant_cutoff: f64,
}

#[derive(Debug, Clone)]
pub struct TwinJob {
    pub generator: LinearGenerator,
    pub entangler: Entangler,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub enum Job {
    Evolve(EvolveJob),
    HDist(HDistJob),
    DynDist(DynDistJob),
    Lift(LiftJob),
    Gauge(GaugeJob),
    Twin(TwinJob),
}

impl Job {
    pub fn command(&self) -> &'static str {
        match self {
            Job::Evolve(_) => "evolve",
            Job::HDist(_) => "hdist",
            Job::DynDist(_) => "dyndist",
            Job::Lift(_) => "lift",
            Job::Gauge(_) => "gauge",
            Job::Twin(_) => "twin",
        }
    }
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub job: Job,
    pub output: OutputPaths,
    pub digest: String,
    pub seed_override: Option<u64>,
}

pub fn parse_scenario(text: &[u8]) -> Result<Scenario, ValidationError> {
    parse_scenario_with_seed(text, None)
}

/// Parses and validates; `seed` replaces the scenario's `seed` parameter for
/// the commands that have one and is ignored by the others.
pub fn parse_scenario_with_seed(text: &[u8], seed: Option<u64>) -> Result<Scenario, ValidationError> {
    let digest = hex::encode(Sha256::digest(text));
    let mut de = serde_json::Deserializer::from_slice(text);
    let envelope: Envelope = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        ValidationError::new(path, e.into_inner())
    })?;
    de.end().map_err(|e| ValidationError::new(".", e))?;

    let mut params = envelope
        .parameters
        .unwrap_or(serde_json::Value::Object(Default::default()));
    let seeded = matches!(envelope.command.as_str(), "dyndist" | "lift" | "gauge" | "twin");
    if let (Some(s), true) = (seed, seeded) {
        match params.as_object_mut() {
            Some(obj) => {
                obj.insert("seed".into(), serde_json::Value::from(s));
            }
            None => return Err(ValidationError::new("parameters", "expected an object")),
        }
    }

    let output = envelope.output;
    if output.result.as_os_str().is_empty() {
        return Err(ValidationError::new("output.result", "result path is empty"));
    }
    let job = match envelope.command.as_str() {
        "evolve" => Job::Evolve(build_evolve(typed(&params)?)?),
        "hdist" => Job::HDist(build_hdist(typed(&params)?)?),
        "dyndist" => Job::DynDist(build_dyndist(typed(&params)?)?),
        "lift" => Job::Lift(build_lift(typed(&params)?)?),
        "gauge" => Job::Gauge(build_gauge(typed(&params)?)?),
        "twin" => Job::Twin(build_twin(typed(&params)?)?),
        other => {
            return Err(ValidationError::new(
                "command",
                format!("unknown command \"{other}\"; expected one of {}", COMMANDS.join(", ")),
            ))
        }
    };
    if output.csv.is_some() && matches!(job, Job::Gauge(_) | Job::Twin(_)) {
        return Err(ValidationError::new(
            "output.csv",
            format!("the {} command does not produce a CSV", job.command()),
        ));
    }
    Ok(Scenario {
        job,
        output,
        digest,
        seed_override: seed.filter(|_| seeded),
    })
}

fn typed<T: DeserializeOwned>(params: &serde_json::Value) -> Result<T, ValidationError> {
    serde_path_to_error::deserialize(params).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." {
            "parameters".to_string()
        } else {
            format!("parameters.{inner}")
        };
        ValidationError::new(path, e.into_inner())
    })
}

fn at<T>(path: &str, r: crate::Result<T>) -> Result<T, ValidationError> {
    r.map_err(|e| ValidationError::new(format!("parameters.{path}"), e))
}

fn density(path: &str, m: &MatrixJson) -> Result<DensityOperator, ValidationError> {
    at(path, m.to_matrix().and_then(DensityOperator::new))
}

fn hamiltonian_path(segments: &[SegmentJson], t0: f64) -> Result<HamiltonianPath, ValidationError> {
    let mut out = Vec::with_capacity(segments.len());
    for (i, s) in segments.iter().enumerate() {
        let generator = at(
            &format!("path[{i}].generator"),
            s.generator.to_matrix().and_then(HermitianOperator::new),
        )?;
        out.push(Segment {
            generator,
            duration: s.duration,
        });
    }
    at("path", HamiltonianPath::new(out, t0))
}

fn positive(path: &str, value: usize, min: usize) -> Result<(), ValidationError> {
    if value < min {
        return Err(ValidationError::new(
            format!("parameters.{path}"),
            format!("must be at least {min}, got {value}"),
        ));
    }
    Ok(())
}

fn same_dim(rho: &DensityOperator, path: &HamiltonianPath) -> Result<(), ValidationError> {
    if rho.dim() != path.dim() {
        return Err(ValidationError::new(
            "parameters.path",
            format!("generators are {0}x{0} but rho0 is {1}x{1}", path.dim(), rho.dim()),
        ));
    }
    Ok(())
}

fn build_evolve(p: EvolveParams) -> Result<EvolveJob, ValidationError> {
    let rho0 = density("rho0", &p.rho0)?;
    let path = hamiltonian_path(&p.path, p.t0)?;
    same_dim(&rho0, &path)?;
    positive("samples_per_segment", p.samples_per_segment, 2)?;
    let conjugate_by = match &p.conjugate_by {
        Some(m) => {
            let u = at("conjugate_by", m.to_matrix().and_then(UnitaryOperator::new))?;
            if u.dim() != rho0.dim() {
                return Err(ValidationError::new(
                    "parameters.conjugate_by",
                    "dimension does not match rho0",
                ));
            }
            Some(u)
        }
        None => None,
    };
    Ok(EvolveJob {
        rho0,
        path,
        samples_per_segment: p.samples_per_segment,
        conjugate_by,
    })
}

fn build_hdist(p: HDistParams) -> Result<HDistJob, ValidationError> {
    let rho0 = density("rho0", &p.rho0)?;
    let path = hamiltonian_path(&p.path, p.t0)?;
    same_dim(&rho0, &path)?;
    positive("quadrature_points", p.quadrature_points, 8)?;
    positive("samples_per_segment", p.samples_per_segment, 2)?;
    Ok(HDistJob {
        rho0,
        path,
        quadrature_points: p.quadrature_points,
        samples_per_segment: p.samples_per_segment,
    })
}

fn build_problem(
    rho0: DensityOperator,
    rho1: &MatrixJson,
    duration: f64,
    segments: usize,
    optimizer: &OptimizerParams,
    seed: u64,
    samples_per_segment: usize,
) -> Result<DynDistJob, ValidationError> {
    let rho1 = density("rho1", rho1)?;
    let problem = at("rho1", DistanceProblem::new(rho0, rho1, duration, segments))?;
    let config = optimizer.config(seed);
    at("optimizer", config.validate())?;
    positive("samples_per_segment", samples_per_segment, 2)?;
    Ok(DynDistJob {
        problem,
        config,
        samples_per_segment,
        invariance_unitary: None,
    })
}

fn build_dyndist(p: DynDistParams) -> Result<DynDistJob, ValidationError> {
    let rho0 = density("rho0", &p.rho0)?;
    let dim = rho0.dim();
    let mut job = build_problem(
        rho0,
        &p.rho1,
        p.duration,
        p.segments,
        &p.optimizer,
        p.seed,
        p.samples_per_segment,
    )?;
    job.invariance_unitary = p.invariance_seed.map(|s| random_unitary(dim, s));
    Ok(job)
}

fn build_lift(p: LiftParams) -> Result<LiftJob, ValidationError> {
    let rho0 = density("rho0", &p.rho0)?;
    positive("samples_per_segment", p.samples_per_segment, 2)?;
    positive("steps_per_sample", p.steps_per_sample, 1)?;
    if !(p.grouping_tol > 0.0 && p.grouping_tol.is_finite()) {
        return Err(ValidationError::new("parameters.grouping_tol", "must be positive"));
    }
    let base = match (&p.path, &p.rho1) {
        (Some(segments), None) => {
            if p.duration.is_some() || p.segments.is_some() {
                return Err(ValidationError::new(
                    "parameters",
                    "duration and segments only apply when the path is optimized from rho1",
                ));
            }
            let path = hamiltonian_path(segments, 0.0)?;
            same_dim(&rho0, &path)?;
            LiftBase::Path(path)
        }
        (None, Some(rho1)) => {
            let duration = p
                .duration
                .ok_or_else(|| ValidationError::new("parameters.duration", "required with rho1"))?;
            let segments = p
                .segments
                .ok_or_else(|| ValidationError::new("parameters.segments", "required with rho1"))?;
            LiftBase::Optimized(Box::new(build_problem(
                rho0.clone(),
                rho1,
                duration,
                segments,
                &p.optimizer,
                p.seed,
                p.samples_per_segment,
            )?))
        }
        _ => return Err(ValidationError::new("parameters", "give exactly one of path or rho1")),
    };
    let purification = match &p.purification {
        Some(j) => {
            let psi = at("purification", j.to_purification(p.grouping_tol))?;
            let error = at("purification", project_pi(&psi).and_then(|r| r.hs_distance(&rho0)))?;
            if error > 1e-8 {
                return Err(ValidationError::new(
                    "parameters.purification",
                    format!("projects {error:e} away from rho0"),
                ));
            }
            psi
        }
        None => at("rho0", standard_purification(&rho0, p.grouping_tol))?,
    };
    Ok(LiftJob {
        rho0,
        base,
        purification,
        samples_per_segment: p.samples_per_segment,
        steps_per_sample: p.steps_per_sample,
        grouping_tol: p.grouping_tol,
        gauge_seed: p.gauge_translate.then_some(p.seed),
    })
}

fn build_gauge(p: GaugeParams) -> Result<GaugeJob, ValidationError> {
    let rho = density("rho", &p.rho)?;
    if !(p.grouping_tol > 0.0 && p.grouping_tol.is_finite()) {
        return Err(ValidationError::new("parameters.grouping_tol", "must be positive"));
    }
    if !(p.commutant_cutoff > 0.0 && p.commutant_cutoff.is_finite()) {
        return Err(ValidationError::new("parameters.commutant_cutoff", "must be positive"));
    }
    Ok(GaugeJob {
        rho,
        seed: p.seed,
        samples: p.samples,
        grouping_tol: p.grouping_tol,
        commutant_cutoff: p.commutant_cutoff,
    })
}

fn build_twin(p: TwinParams) -> Result<TwinJob, ValidationError> {
    let generator = at("generator", p.generator.to_real().and_then(LinearGenerator::new))?;
    let entangler = match &p.entangler {
        EntanglerParams::Matrix(m) => at("entangler.matrix", m.to_real().and_then(|q| Entangler::new(q, p.seed)))?,
        EntanglerParams::Random(r) => at("entangler.random", make_entangler(r.d, p.seed, r.angle_scale))?,
    };
    if entangler.dim() != generator.dim() {
        return Err(ValidationError::new(
            "parameters.entangler",
            format!(
                "dimension {} does not match generator dimension {}",
                entangler.dim(),
                generator.dim()
            ),
        ));
    }
    positive("samples", p.samples, crate::twin::MIN_SAMPLES)?;
    Ok(TwinJob {
        generator,
        entangler,
        seed: p.seed,
        samples: p.samples,
    })
}

#[derive(Serialize)]
struct EvolvePayload {
    samples: usize,
    spectral_drift: f64,
    final_state: MatrixJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    conjugated: Option<ConjugatedPayload>,
}

#[derive(Serialize)]
struct ConjugatedPayload {
    final_state: MatrixJson,
    spectral_drift: f64,
    /// `max_t |U rho(t) U^dagger - rho_U(t)|_HS` against direct evolution of
    /// the conjugated problem.
    max_deviation: f64,
}

#[derive(Serialize)]
struct HDistPayload {
    distance: f64,
    quadrature_points: usize,
    segment_uncertainties: Vec<f64>,
}

#[derive(Serialize)]
struct DynDistPayload {
    distance: f64,
    endpoint_defect: f64,
    converged: bool,
    restart_index: usize,
    path: Vec<SegmentJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    invariance: Option<InvariancePayload>,
}

#[derive(Serialize)]
struct InvariancePayload {
    d: f64,
    d_conjugated: f64,
    gap: f64,
    conjugated_converged: bool,
}

#[derive(Serialize)]
struct GaugeTranslatedPayload {
    lift_length: f64,
    projection_error: f64,
    equivariance_error: f64,
}

#[derive(Serialize)]
struct LiftPayload {
    #[serde(skip_serializing_if = "Option::is_none")]
    optimized: Option<DynDistPayload>,
    samples: usize,
    k: usize,
    base_induced_length: f64,
    lift_length: f64,
    length_gap: f64,
    projection_error: f64,
    uncertainty_length: f64,
    /// `uncertainty_length - base_induced_length`.
    speed_gap_length: f64,
    /// Largest pointwise `uncertainty - induced speed` over the samples.
    max_speed_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gauge_translated: Option<GaugeTranslatedPayload>,
}

#[derive(Serialize)]
struct ActionPayload {
    max_constraint_drift: f64,
    max_projection_change: f64,
}

#[derive(Serialize)]
struct GaugePayload {
    spectrum: Vec<f64>,
    factor_dims: Vec<usize>,
    algebra_dim: usize,
    commutant_dimension: usize,
    samples: usize,
    right_action: ActionPayload,
    left_action: ActionPayload,
    max_relative_gauge_residual: f64,
}

#[derive(Serialize)]
struct TwinPayload {
    #[serde(flatten)]
    report: TwinReport,
    distribution: DistributionCheck,
}

/// Result of computing a scenario, before anything is written.
#[derive(Debug, Clone)]
pub struct Computed {
    pub result: Vec<u8>,
    pub csv: Option<Vec<u8>>,
    pub converged: bool,
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>) -> crate::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Runs the job and serializes its outputs in memory.
pub fn compute(s: &Scenario) -> Result<Computed, RunError> {
    let want_csv = s.output.csv.is_some();
    match &s.job {
        Job::Evolve(j) => {
            let traj = evolve_von_neumann(&j.rho0, &j.path, j.samples_per_segment)?;
            let conjugated = match &j.conjugate_by {
                Some(u) => {
                    let moved = conjugate_trajectory(&traj, u)?;
                    let direct = evolve_von_neumann(&j.rho0.conjugate(u)?, moved.path(), j.samples_per_segment)?;
                    let mut max_deviation: f64 = 0.0;
                    for (a, b) in moved.states().iter().zip(direct.states()) {
                        max_deviation = max_deviation.max(a.hs_distance(b)?);
                    }
                    Some(ConjugatedPayload {
                        final_state: MatrixJson::from_matrix(moved.final_state().matrix()),
                        spectral_drift: moved.spectral_drift(),
                        max_deviation,
                    })
                }
                None => None,
            };
            let payload = EvolvePayload {
                samples: traj.len(),
                spectral_drift: traj.spectral_drift(),
                final_state: MatrixJson::from_matrix(traj.final_state().matrix()),
                conjugated,
            };
            let csv = want_csv
                .then(|| csv_bytes(|b| write_trajectory_csv(b, &traj, j.rho0.dim())))
                .transpose()?;
            Ok(Computed {
                result: to_json_bytes(&payload)?,
                csv,
                converged: true,
            })
        }
        Job::HDist(j) => {
            let payload = HDistPayload {
                distance: h_distance(&j.rho0, &j.path, j.quadrature_points)?,
                quadrature_points: j.quadrature_points,
                segment_uncertainties: segment_uncertainties(&j.rho0, &j.path)?,
            };
            let csv = want_csv
                .then(|| {
                    let traj = evolve_von_neumann(&j.rho0, &j.path, j.samples_per_segment)?;
                    csv_bytes(|b| write_trajectory_csv(b, &traj, j.rho0.dim()))
                })
                .transpose()?;
            Ok(Computed {
                result: to_json_bytes(&payload)?,
                csv,
                converged: true,
            })
        }
        Job::DynDist(j) => {
            let (payload, path) = run_dyndist(j)?;
            let csv = want_csv
                .then(|| {
                    let traj = evolve_von_neumann(j.problem.rho0(), &path, j.samples_per_segment)?;
                    csv_bytes(|b| write_trajectory_csv(b, &traj, j.problem.dim()))
                })
                .transpose()?;
            let converged = payload.converged;
            Ok(Computed {
                result: to_json_bytes(&payload)?,
                csv,
                converged,
            })
        }
        Job::Lift(j) => {
            let (payload, times, lift) = run_lift(j)?;
            let converged = payload.optimized.as_ref().is_none_or(|o| o.converged);
            let csv = want_csv
                .then(|| csv_bytes(|b| write_lift_csv(b, &times, &lift, j.rho0.dim(), j.purification.k())))
                .transpose()?;
            Ok(Computed {
                result: to_json_bytes(&payload)?,
                csv,
                converged,
            })
        }
        Job::Gauge(j) => Ok(Computed {
            result: to_json_bytes(&run_gauge(j)?)?,
            csv: None,
            converged: true,
        }),
        Job::Twin(j) => {
            let payload = TwinPayload {
                report: discriminate_representations(&j.generator, &j.entangler)?,
                distribution: check_distribution_invariance(&j.entangler, j.samples, j.seed)?,
            };
            Ok(Computed {
                result: to_json_bytes(&payload)?,
                csv: None,
                converged: true,
            })
        }
    }
}

fn run_dyndist(j: &DynDistJob) -> crate::Result<(DynDistPayload, HamiltonianPath)> {
    let (r, invariance) = match &j.invariance_unitary {
        Some(u) => {
            let check = check_unitary_invariance(&j.problem, u, &j.config)?;
            let inv = InvariancePayload {
                d: check.d,
                d_conjugated: check.d_conjugated,
                gap: check.gap,
                conjugated_converged: check.conjugated.converged,
            };
            (check.original, Some(inv))
        }
        None => (dynamic_distance(&j.problem, &j.config)?, None),
    };
    let payload = DynDistPayload {
        distance: r.distance,
        endpoint_defect: r.endpoint_defect,
        converged: r.converged,
        restart_index: r.restart_index,
        path: path_to_json(&r.best_path),
        invariance,
    };
    Ok((payload, r.best_path))
}

fn max_speed_gap(traj: &StateTrajectory, grouping_tol: f64) -> crate::Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..traj.len() {
        let h = traj.generator_after(i.min(traj.len().saturating_sub(2)));
        let rho = &traj.states()[i];
        worst = worst.max(energy_uncertainty(h, rho)? - induced_speed(rho, h, grouping_tol)?);
    }
    Ok(worst)
}

fn run_lift(j: &LiftJob) -> crate::Result<(LiftPayload, Vec<f64>, Vec<Purification>)> {
    let (optimized, path) = match &j.base {
        LiftBase::Path(p) => (None, p.clone()),
        LiftBase::Optimized(d) => {
            let (payload, path) = run_dyndist(d)?;
            (Some(payload), path)
        }
    };
    let traj = evolve_von_neumann(&j.rho0, &path, j.samples_per_segment)?;
    let lift = horizontal_lift(&traj, &j.purification, j.steps_per_sample)?;
    let base = induced_length(&traj, j.grouping_tol)?;
    let up = lift_length(&traj, &lift);
    let uncertainty = crate::bundle::uncertainty_length(&traj)?;

    let gauge_translated = match j.gauge_seed {
        Some(seed) => {
            let g = random_right_gauge(j.purification.sigma(), seed);
            let start = apply_gauge(&j.purification, &g)?;
            let moved = horizontal_lift(&traj, &start, j.steps_per_sample)?;
            let mut equivariance: f64 = 0.0;
            for (a, b) in lift.iter().zip(&moved) {
                let expected = apply_gauge(a, &g)?;
                equivariance = equivariance.max(hs_norm(&(expected.psi() - b.psi())));
            }
            Some(GaugeTranslatedPayload {
                lift_length: lift_length(&traj, &moved),
                projection_error: lift_projection_error(&traj, &moved),
                equivariance_error: equivariance,
            })
        }
        None => None,
    };
    let payload = LiftPayload {
        optimized,
        samples: traj.len(),
        k: j.purification.k(),
        base_induced_length: base,
        lift_length: up,
        length_gap: (base - up).abs(),
        projection_error: lift_projection_error(&traj, &lift),
        uncertainty_length: uncertainty,
        speed_gap_length: uncertainty - base,
        max_speed_gap: max_speed_gap(&traj, j.grouping_tol)?,
        gauge_translated,
    };
    Ok((payload, traj.times().to_vec(), lift))
}

fn run_gauge(j: &GaugeJob) -> crate::Result<GaugePayload> {
    let structure = gauge_group_factors(&j.rho, j.grouping_tol)?;
    let psi0 = standard_purification(&j.rho, j.grouping_tol)?;
    let mut rng = seeded_rng(j.seed);
    let mut right = ActionPayload {
        max_constraint_drift: 0.0,
        max_projection_change: 0.0,
    };
    let mut left = ActionPayload {
        max_constraint_drift: 0.0,
        max_projection_change: 0.0,
    };
    let mut residual: f64 = 0.0;
    for _ in 0..j.samples {
        let g = random_right_gauge(psi0.sigma(), rng.random());
        let moved = apply_gauge(&psi0, &g)?;
        right.max_constraint_drift = right.max_constraint_drift.max(moved.constraint_drift());
        right.max_projection_change = right
            .max_projection_change
            .max(project_pi(&moved)?.hs_distance(&j.rho)?);
        residual = residual.max(relative_gauge(&psi0, &moved)?.1);

        let v = structure.sample(rng.random());
        let moved = apply_gauge(&psi0, &v)?;
        left.max_constraint_drift = left.max_constraint_drift.max(moved.constraint_drift());
        left.max_projection_change = left.max_projection_change.max(project_pi(&moved)?.hs_distance(&j.rho)?);
    }
    Ok(GaugePayload {
        spectrum: structure.spectrum().values().to_vec(),
        factor_dims: structure.factor_dims().to_vec(),
        algebra_dim: structure.algebra_dim(),
        commutant_dimension: commutant_dimension(&j.rho, j.commutant_cutoff),
        samples: j.samples,
        right_action: right,
        left_action: left,
        max_relative_gauge_residual: residual,
    })
}

/// Metadata of one run. The payload is the exact content of the result file.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub scenario_digest: String,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    pub wall_time_seconds: f64,
    pub converged: bool,
    pub result_path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    pub payload: serde_json::Value,
}

impl RunRecord {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            1
        }
    }
}

fn resolve(out_dir: Option<&Path>, p: &Path) -> PathBuf {
    match out_dir {
        Some(dir) => dir.join(p),
        None => p.to_path_buf(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let io = |e: std::io::Error| RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut f = crate::io::create_file(path).map_err(io)?;
    std::io::Write::write_all(&mut f, bytes).map_err(io)
}

/// Computes the scenario and writes its result JSON (and CSV, if requested)
/// relative to `out_dir`. Nothing is written if the computation fails.
pub fn run_scenario(s: &Scenario, out_dir: Option<&Path>) -> Result<RunRecord, RunError> {
    let start = Instant::now();
    let computed = compute(s)?;
    let wall_time_seconds = start.elapsed().as_secs_f64();
    let result_path = resolve(out_dir, &s.output.result);
    let csv_path = s.output.csv.as_ref().map(|p| resolve(out_dir, p));
    write_file(&result_path, &computed.result)?;
    if let (Some(p), Some(bytes)) = (&csv_path, &computed.csv) {
        write_file(p, bytes)?;
    }
    let payload = serde_json::from_slice(&computed.result)
        .map_err(|e| RunError::Compute(Error::NumericalConsistency(format!("result is not valid JSON: {e}"))))?;
    Ok(RunRecord {
        command: s.job.command(),
        scenario_digest: s.digest.clone(),
        version: VERSION,
        seed_override: s.seed_override,
        wall_time_seconds,
        converged: computed.converged,
        result_path,
        csv_path,
        payload,
    })
}
