//! Exact von Neumann evolution along piecewise-constant Hamiltonian paths
//! and the path integral of the energy uncertainty.

use crate::error::{Error, Result};
use crate::linalg::{trace, DensityOperator, HermitianOperator, Propagator, UnitaryOperator};

/// Variance below this magnitude is treated as rounding noise.
pub const VARIANCE_CLAMP: f64 = 1e-12;
/// Default number of Simpson subintervals per segment.
pub const DEFAULT_QUADRATURE_POINTS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub generator: HermitianOperator,
    pub duration: f64,
}

/// A control: Hermitian generators held constant for given durations.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPath {
    segments: Vec<Segment>,
    t0: f64,
    dim: usize,
}

impl HamiltonianPath {
    pub fn new(segments: Vec<Segment>, t0: f64) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidInput("path needs at least one segment".into()))?;
        let dim = first.generator.dim();
        if !t0.is_finite() {
            return Err(Error::InvalidInput(format!("start time must be finite, got {t0}")));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.generator.dim() != dim {
                return Err(Error::InvalidInput(format!(
                    "segment {i} has dimension {}, expected {dim}",
                    s.generator.dim()
                )));
            }
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "segment {i} duration must be positive and finite, got {}",
                    s.duration
                )));
            }
        }
        Ok(Self { segments, t0, dim })
    }

    /// Single segment starting at `t = 0`.
    pub fn constant(generator: HermitianOperator, duration: f64) -> Result<Self> {
        Self::new(vec![Segment { generator, duration }], 0.0)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Segments in reverse order with negated generators; undoes `self`.
    pub fn reversed(&self) -> Self {
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|s| Segment {
                generator: s.generator.scale(-1.0),
                duration: s.duration,
            })
            .collect();
        Self {
            segments,
            t0: self.t0,
            dim: self.dim,
        }
    }

    /// Every generator replaced by `U H U^dagger`.
    pub fn conjugate(&self, u: &UnitaryOperator) -> Result<Self> {
        if u.dim() != self.dim {
            return Err(Error::InvalidInput(format!(
                "unitary has dimension {}, path has {}",
                u.dim(),
                self.dim
            )));
        }
        let segments = self
            .segments
            .iter()
            .map(|s| Segment {
                generator: s.generator.conjugate(u),
                duration: s.duration,
            })
            .collect();
        Ok(Self {
            segments,
            t0: self.t0,
            dim: self.dim,
        })
    }

    /// Total propagator of the path.
    pub fn propagator(&self) -> UnitaryOperator {
        self.segments
            .iter()
            .fold(UnitaryOperator::identity(self.dim), |acc, s| {
                Propagator::new(&s.generator).at(s.duration).compose(&acc)
            })
    }
}

/// Sampled solution of the von Neumann equation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    times: Vec<f64>,
    states: Vec<DensityOperator>,
    /// Segment governing the interval `[times[i], times[i + 1]]`.
    interval_segments: Vec<usize>,
    path: HamiltonianPath,
}

impl StateTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DensityOperator] {
        &self.states
    }

    pub fn path(&self) -> &HamiltonianPath {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DensityOperator {
        self.states.last().expect("trajectory is non-empty")
    }

    /// Generator acting on the interval that starts at sample `i`.
    pub fn generator_after(&self, i: usize) -> &HermitianOperator {
        &self.path.segments[self.interval_segments[i]].generator
    }

    /// Largest eigenvalue deviation from the initial spectrum.
    pub fn spectral_drift(&self) -> f64 {
        let s0 = self.states[0].spectrum();
        self.states
            .iter()
            .filter_map(|s| s.spectrum().max_deviation(s0))
            .fold(0.0, f64::max)
    }
}

/// Solves `i rho' = [H, rho]` exactly on each segment. Each segment is
/// sampled at `samples_per_segment` equally spaced times including both
/// ends; shared segment boundaries appear once.
pub fn evolve_von_neumann(
    rho0: &DensityOperator,
    path: &HamiltonianPath,
    samples_per_segment: usize,
) -> Result<StateTrajectory> {
    if rho0.dim() != path.dim() {
        return Err(Error::InvalidInput(format!(
            "state has dimension {}, path has {}",
            rho0.dim(),
            path.dim()
        )));
    }
    if samples_per_segment < 2 {
        return Err(Error::InvalidInput(format!(
            "samples_per_segment must be at least 2, got {samples_per_segment}"
        )));
    }
    let mut times = vec![path.t0];
    let mut states = vec![rho0.clone()];
    let mut interval_segments = Vec::new();
    let mut t_start = path.t0;
    let mut start_state = rho0.clone();
    let last = samples_per_segment - 1;
    for (k, seg) in path.segments.iter().enumerate() {
        let prop = Propagator::new(&seg.generator);
        for j in 1..=last {
            let dt = seg.duration * j as f64 / last as f64;
            let state = start_state.conjugate(&prop.at(dt))?;
            times.push(t_start + dt);
            states.push(state);
            interval_segments.push(k);
        }
        t_start += seg.duration;
        start_state = states.last().unwrap().clone();
    }
    Ok(StateTrajectory {
        times,
        states,
        interval_segments,
        path: path.clone(),
    })
}

/// Final state of the evolution without sampling.
pub fn evolve_final(rho0: &DensityOperator, path: &HamiltonianPath) -> Result<DensityOperator> {
    if rho0.dim() != path.dim() {
        return Err(Error::InvalidInput(format!(
            "state has dimension {}, path has {}",
            rho0.dim(),
            path.dim()
        )));
    }
    rho0.conjugate(&path.propagator())
}

/// `sqrt(Tr(H^2 rho) - Tr(H rho)^2)`.
pub fn energy_uncertainty(h: &HermitianOperator, rho: &DensityOperator) -> Result<f64> {
    if h.dim() != rho.dim() {
        return Err(Error::InvalidInput(format!(
            "operator has dimension {}, state has {}",
            h.dim(),
            rho.dim()
        )));
    }
    let h_rho = h.matrix() * rho.matrix();
    let mean = trace(&h_rho).re;
    let second = trace(&(h.matrix() * &h_rho)).re;
    let variance = second - mean * mean;
    if variance < -VARIANCE_CLAMP {
        return Err(Error::NumericalConsistency(format!(
            "negative energy variance {variance:e}"
        )));
    }
    Ok(variance.max(0.0).sqrt())
}

/// Integral of the energy uncertainty along the exact trajectory.
///
/// Each segment is integrated with composite Simpson on `quadrature_points`
/// subintervals, rounded up to the next even count.
pub fn h_distance(rho0: &DensityOperator, path: &HamiltonianPath, quadrature_points: usize) -> Result<f64> {
    if quadrature_points < 8 {
        return Err(Error::InvalidInput(format!(
            "quadrature_points must be at least 8, got {quadrature_points}"
        )));
    }
    if rho0.dim() != path.dim() {
        return Err(Error::InvalidInput(format!(
            "state has dimension {}, path has {}",
            rho0.dim(),
            path.dim()
        )));
    }
    let intervals = quadrature_points + quadrature_points % 2;
    let mut total = 0.0;
    let mut start = rho0.clone();
    for seg in &path.segments {
        let prop = Propagator::new(&seg.generator);
        let step = seg.duration / intervals as f64;
        let mut acc = 0.0;
        for j in 0..=intervals {
            let rho = if j == 0 {
                start.clone()
            } else {
                start.conjugate(&prop.at(step * j as f64))?
            };
            let weight = if j == 0 || j == intervals {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += weight * energy_uncertainty(&seg.generator, &rho)?;
        }
        total += acc * step / 3.0;
        start = start.conjugate(&prop.at(seg.duration))?;
    }
    Ok(total)
}

/// `U rho(t) U^dagger` along the trajectory together with the conjugated path.
pub fn conjugate_trajectory(traj: &StateTrajectory, u: &UnitaryOperator) -> Result<StateTrajectory> {
    let path = traj.path.conjugate(u)?;
    let states = traj.states.iter().map(|s| s.conjugate(u)).collect::<Result<Vec<_>>>()?;
    Ok(StateTrajectory {
        times: traj.times.clone(),
        states,
        interval_segments: traj.interval_segments.clone(),
        path,
    })
}
