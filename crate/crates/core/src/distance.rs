//! Dynamic distance between isospectral states: the smallest uncertainty
//! path integral over Hamiltonian paths that carry `rho0` to `rho1`.
//!
//! Paths are piecewise constant with a fixed number of equal-length
//! segments. Each segment generator is expanded in an orthonormal traceless
//! Hermitian basis and the coefficients are optimized with a quadratic
//! endpoint penalty whose weight follows an increasing schedule. A final
//! Levenberg-Marquardt restoration pass drives the endpoint defect below the
//! requested tolerance. The reported distance is the uncertainty integral
//! of the returned path, so it is an upper bound on the infimum.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evolution::{
    energy_uncertainty, evolve_final, h_distance, HamiltonianPath, Segment, DEFAULT_QUADRATURE_POINTS,
};
use crate::linalg::{
    c, hs_inner_unchecked, hs_norm, ComplexMatrix, DensityOperator, HermitianOperator, Propagator, UnitaryOperator,
};

/// Isospectrality tolerance for a distance problem.
pub const ISOSPECTRAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct DistanceProblem {
    rho0: DensityOperator,
    rho1: DensityOperator,
    duration: f64,
    segments: usize,
}

impl DistanceProblem {
    pub fn new(rho0: DensityOperator, rho1: DensityOperator, duration: f64, segments: usize) -> Result<Self> {
        if rho0.dim() != rho1.dim() {
            return Err(Error::InvalidInput(format!(
                "endpoint dimensions differ: {} vs {}",
                rho0.dim(),
                rho1.dim()
            )));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "duration must be positive and finite, got {duration}"
            )));
        }
        if segments == 0 {
            return Err(Error::InvalidInput("segments must be positive".into()));
        }
        let gap = rho0.spectrum().max_deviation(rho1.spectrum()).unwrap_or(f64::INFINITY);
        if gap > ISOSPECTRAL_TOL {
            return Err(Error::InvalidInput(format!(
                "endpoints are not isospectral (eigenvalue gap {gap:e})"
            )));
        }
        Ok(Self {
            rho0,
            rho1,
            duration,
            segments,
        })
    }

    pub fn rho0(&self) -> &DensityOperator {
        &self.rho0
    }

    pub fn rho1(&self) -> &DensityOperator {
        &self.rho1
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn dim(&self) -> usize {
        self.rho0.dim()
    }

    /// Both endpoints conjugated by `u`.
    pub fn conjugate(&self, u: &UnitaryOperator) -> Result<Self> {
        if u.dim() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "unitary has dimension {}, problem has {}",
                u.dim(),
                self.dim()
            )));
        }
        Self::new(
            self.rho0.conjugate(u)?,
            self.rho1.conjugate(u)?,
            self.duration,
            self.segments,
        )
    }

    fn segment_duration(&self) -> f64 {
        self.duration / self.segments as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub penalty_schedule: Vec<f64>,
    pub convergence_tol: f64,
    pub endpoint_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            seed: 0,
            max_iterations: 200,
            penalty_schedule: vec![1.0, 10.0, 100.0, 1000.0],
            convergence_tol: 1e-8,
            endpoint_tol: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "restarts and max_iterations must be positive".into(),
            ));
        }
        if self.penalty_schedule.is_empty()
            || self.penalty_schedule.iter().any(|m| !(*m > 0.0 && m.is_finite()))
            || self.penalty_schedule.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidInput(
                "penalty_schedule must be a non-empty, strictly increasing list of positive values".into(),
            ));
        }
        if [self.convergence_tol, self.endpoint_tol]
            .iter()
            .any(|t| t.is_nan() || *t <= 0.0)
        {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DistanceResult {
    pub distance: f64,
    pub best_path: HamiltonianPath,
    pub endpoint_defect: f64,
    pub converged: bool,
    pub restart_index: usize,
}

/// Hilbert-Schmidt distance between the path endpoint and the target.
pub fn endpoint_defect(problem: &DistanceProblem, path: &HamiltonianPath) -> Result<f64> {
    let end = evolve_final(&problem.rho0, path)?;
    end.hs_distance(&problem.rho1)
}

/// Orthonormal (under the real Hilbert-Schmidt pairing) basis of traceless
/// Hermitian `dim x dim` matrices: symmetric and antisymmetric off-diagonal
/// units followed by normalized generalized Gell-Mann diagonals.
pub fn traceless_hermitian_basis(dim: usize) -> Vec<ComplexMatrix> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut basis = Vec::with_capacity(dim * dim - 1);
    for j in 0..dim {
        for k in j + 1..dim {
            let mut sym = ComplexMatrix::zeros(dim, dim);
            sym[(j, k)] = c(s, 0.0);
            sym[(k, j)] = c(s, 0.0);
            basis.push(sym);
            let mut anti = ComplexMatrix::zeros(dim, dim);
            anti[(j, k)] = c(0.0, -s);
            anti[(k, j)] = c(0.0, s);
            basis.push(anti);
        }
    }
    for l in 1..dim {
        let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
        let mut d = ComplexMatrix::zeros(dim, dim);
        for i in 0..l {
            d[(i, i)] = c(norm, 0.0);
        }
        d[(l, l)] = c(-(l as f64) * norm, 0.0);
        basis.push(d);
    }
    basis
}

/// Shared state for evaluating one problem.
struct Objective<'a> {
    problem: &'a DistanceProblem,
    basis: Vec<ComplexMatrix>,
    tau: f64,
}

struct Evaluation {
    distance: f64,
    /// `sum(tau * uncertainty^2)`.
    energy: f64,
    end: ComplexMatrix,
}

impl<'a> Objective<'a> {
    fn new(problem: &'a DistanceProblem) -> Self {
        Self {
            problem,
            basis: traceless_hermitian_basis(problem.dim()),
            tau: problem.segment_duration(),
        }
    }

    /// Same coordinates, basis conjugated by `u`: coefficient vectors map to
    /// conjugated paths without a round trip through matrices.
    fn conjugated(problem: &'a DistanceProblem, u: &UnitaryOperator) -> Self {
        let um = u.matrix();
        let basis = traceless_hermitian_basis(problem.dim())
            .iter()
            .map(|b| um * b * um.adjoint())
            .collect();
        Self {
            problem,
            basis,
            tau: problem.segment_duration(),
        }
    }

    fn n_params(&self) -> usize {
        self.basis.len() * self.problem.segments
    }

    fn generator(&self, coeffs: &[f64]) -> HermitianOperator {
        let dim = self.problem.dim();
        let m = coeffs
            .iter()
            .zip(&self.basis)
            .fold(ComplexMatrix::zeros(dim, dim), |acc, (x, b)| acc + b.scale(*x));
        HermitianOperator::from_hermitian_unchecked(m)
    }

    fn path(&self, x: &[f64]) -> HamiltonianPath {
        let segments = x
            .chunks(self.basis.len())
            .map(|coeffs| Segment {
                generator: self.generator(coeffs),
                duration: self.tau,
            })
            .collect();
        HamiltonianPath::new(segments, 0.0).expect("optimizer paths are well formed")
    }

    fn coefficients(&self, path: &HamiltonianPath) -> Vec<f64> {
        path.segments()
            .iter()
            .flat_map(|s| {
                self.basis
                    .iter()
                    .map(move |b| hs_inner_unchecked(b, s.generator.matrix()))
            })
            .collect()
    }

    /// The uncertainty is conserved along a constant-generator segment, so
    /// each segment contributes `tau * uncertainty(start state)`.
    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let mut rho = self.problem.rho0.matrix().clone();
        let mut distance = 0.0;
        let mut energy = 0.0;
        for coeffs in x.chunks(self.basis.len()) {
            let h = self.generator(coeffs);
            let hr = h.matrix() * &rho;
            let mean = hr.trace().re;
            let var = (h.matrix() * &hr).trace().re - mean * mean;
            distance += self.tau * var.max(0.0).sqrt();
            energy += self.tau * var.max(0.0);
            let u = Propagator::new(&h).at(self.tau);
            rho = u.matrix() * rho * u.matrix().adjoint();
        }
        Evaluation {
            distance,
            energy,
            end: rho,
        }
    }

    fn residual(&self, end: &ComplexMatrix) -> ComplexMatrix {
        end - self.problem.rho1.matrix()
    }

    fn penalized(&self, x: &[f64], mu: f64) -> f64 {
        let e = self.evaluate(x);
        let r = self.residual(&e.end);
        e.distance + mu * hs_inner_unchecked(&r, &r)
    }

    fn penalized_energy(&self, x: &[f64], mu: f64) -> f64 {
        let e = self.evaluate(x);
        let r = self.residual(&e.end);
        self.problem.duration * e.energy + mu * hs_inner_unchecked(&r, &r)
    }

    fn defect(&self, x: &[f64]) -> f64 {
        hs_norm(&self.residual(&self.evaluate(x).end))
    }

    fn residual_vector(&self, x: &[f64]) -> DVector<f64> {
        let r = self.residual(&self.evaluate(x).end);
        DVector::from_iterator(2 * r.len(), r.iter().flat_map(|z| [z.re, z.im]))
    }
}

const FD_STEP: f64 = 1e-6;
const STEP_TOL: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;

fn fd_gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> DVector<f64> {
    let mut xp = x.to_vec();
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            let xi = xp[i];
            xp[i] = xi + FD_STEP;
            let fp = f(&xp);
            xp[i] = xi - FD_STEP;
            let fm = f(&xp);
            xp[i] = xi;
            (fp - fm) / (2.0 * FD_STEP)
        }),
    )
    .map(|g| g)
}

/// BFGS with finite-difference gradients and a backtracking line search.
fn minimize(f: impl Fn(&[f64]) -> f64, x0: Vec<f64>, max_iterations: usize, convergence_tol: f64) -> Vec<f64> {
    let n = x0.len();
    let mut x = DVector::from_vec(x0);
    let mut fx = f(x.as_slice());
    let mut g = fd_gradient(&f, x.as_slice());
    let mut hinv = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iterations {
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = -g.norm_squared();
        }
        if slope == 0.0 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        while step * dir.norm() > STEP_TOL {
            let trial = &x + &dir * step;
            let ft = f(trial.as_slice());
            if ft <= fx + ARMIJO * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else { break };
        let g_new = fd_gradient(&f, x_new.as_slice());
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let df = fx - f_new;
        let small_step = s.norm() <= STEP_TOL;
        x = x_new;
        g = g_new;
        fx = f_new;
        if small_step || df.abs() <= convergence_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    x.as_slice().to_vec()
}

/// Levenberg-Marquardt iterations on the endpoint residual alone.
fn restore_feasibility(obj: &Objective, mut x: Vec<f64>, target: f64, max_iterations: usize) -> Vec<f64> {
    let mut r = obj.residual_vector(&x);
    let mut damping = 1e-3;
    for _ in 0..max_iterations {
        if r.norm() <= target {
            break;
        }
        let n = x.len();
        let mut jac = DMatrix::<f64>::zeros(r.len(), n);
        let mut xp = x.clone();
        for i in 0..n {
            let xi = xp[i];
            xp[i] = xi + FD_STEP;
            let rp = obj.residual_vector(&xp);
            xp[i] = xi - FD_STEP;
            let rm = obj.residual_vector(&xp);
            xp[i] = xi;
            jac.set_column(i, &((rp - rm) / (2.0 * FD_STEP)));
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        while damping < 1e12 {
            let lhs = &jtj + DMatrix::<f64>::identity(n, n) * damping;
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&jtr);
            let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a - d).collect();
            let rt = obj.residual_vector(&trial);
            if rt.norm() < r.norm() {
                x = trial;
                r = rt;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    x
}

struct Attempt {
    x: Vec<f64>,
    distance: f64,
    defect: f64,
}

/// One restart: penalty continuation on the energy functional
/// `T * sum(tau * uncertainty^2)` (smooth at the zero path, bounded below by
/// the squared distance), then on the uncertainty integral itself, then
/// feasibility restoration.
fn run_restart(obj: &Objective, config: &OptimizerConfig, x0: Vec<f64>) -> Attempt {
    let mu_max = config.penalty_schedule.iter().cloned().fold(0.0f64, f64::max);
    let mut x = minimize(
        |p| obj.penalized_energy(p, mu_max),
        x0,
        config.max_iterations,
        config.convergence_tol,
    );
    // Weights too weak to hold the endpoint let the cone at the zero path
    // swallow the iterate, so a stage that loosens the endpoint is dropped.
    for &mu in config.penalty_schedule.iter().chain(std::iter::once(&mu_max)) {
        let before = obj.defect(&x);
        let trial = minimize(
            |p| obj.penalized(p, mu),
            x.clone(),
            config.max_iterations,
            config.convergence_tol,
        );
        if obj.defect(&trial) <= before.max(config.endpoint_tol) {
            x = trial;
        }
    }
    x = restore_feasibility(obj, x, 0.1 * config.endpoint_tol, 50);
    let e = obj.evaluate(&x);
    Attempt {
        distance: e.distance,
        defect: hs_norm(&obj.residual(&e.end)),
        x,
    }
}

/// Seeded stream for restart `index`; independent of scheduling.
fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = crate::linalg::seeded_rng(seed);
    rng.set_stream(index as u64);
    rng
}

/// Seeded initial coefficients for every restart.
fn initial_points(obj: &Objective, config: &OptimizerConfig) -> Vec<Vec<f64>> {
    let scale = 1.0 / obj.problem.duration;
    (0..config.restarts)
        .map(|r| {
            let mut rng = restart_rng(config.seed, r);
            (0..obj.n_params())
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Initial paths used by [`dynamic_distance`] for this problem and config.
pub fn initial_paths(problem: &DistanceProblem, config: &OptimizerConfig) -> Vec<HamiltonianPath> {
    let obj = Objective::new(problem);
    initial_points(&obj, config).iter().map(|x| obj.path(x)).collect()
}

/// Upper bound on the dynamic distance from `restarts` seeded multi-start
/// runs. If the zero path already meets the endpoint tolerance it is
/// returned directly, since no path can do better than zero.
pub fn dynamic_distance(problem: &DistanceProblem, config: &OptimizerConfig) -> Result<DistanceResult> {
    config.validate()?;
    let obj = Objective::new(problem);
    let starts = initial_points(&obj, config);
    optimize_from(problem, config, &obj, starts)
}

/// Like [`dynamic_distance`] but starting every restart from the given paths.
pub fn dynamic_distance_from(
    problem: &DistanceProblem,
    config: &OptimizerConfig,
    starts: &[HamiltonianPath],
) -> Result<DistanceResult> {
    config.validate()?;
    let obj = Objective::new(problem);
    let mut points = Vec::with_capacity(starts.len());
    for p in starts {
        if p.dim() != problem.dim() || p.segments().len() != problem.segments {
            return Err(Error::InvalidInput(
                "initial path does not match the problem's dimension and segment count".into(),
            ));
        }
        points.push(obj.coefficients(p));
    }
    optimize_from(problem, config, &obj, points)
}

fn optimize_from(
    problem: &DistanceProblem,
    config: &OptimizerConfig,
    obj: &Objective,
    starts: Vec<Vec<f64>>,
) -> Result<DistanceResult> {
    let zero = vec![0.0; obj.n_params()];
    if obj.defect(&zero) <= config.endpoint_tol {
        return finish(problem, config, obj.path(&zero), 0);
    }
    let attempts: Vec<Attempt> = starts.into_par_iter().map(|x0| run_restart(obj, config, x0)).collect();
    let feasible = attempts
        .iter()
        .enumerate()
        .filter(|(_, a)| a.defect <= config.endpoint_tol)
        .min_by(|(_, a), (_, b)| a.distance.total_cmp(&b.distance));
    let (index, best) = match feasible {
        Some(found) => found,
        None => attempts
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.defect.total_cmp(&b.defect))
            .ok_or_else(|| Error::InvalidInput("no restarts requested".into()))?,
    };
    finish(problem, config, obj.path(&best.x), index)
}

fn finish(
    problem: &DistanceProblem,
    config: &OptimizerConfig,
    path: HamiltonianPath,
    restart_index: usize,
) -> Result<DistanceResult> {
    let distance = h_distance(&problem.rho0, &path, DEFAULT_QUADRATURE_POINTS)?;
    let defect = endpoint_defect(problem, &path)?;
    Ok(DistanceResult {
        distance,
        endpoint_defect: defect,
        converged: defect <= config.endpoint_tol,
        best_path: path,
        restart_index,
    })
}

#[derive(Debug, Clone)]
pub struct InvarianceCheck {
    pub d: f64,
    pub d_conjugated: f64,
    pub gap: f64,
    pub original: DistanceResult,
    pub conjugated: DistanceResult,
}

/// Runs the optimizer on the problem and on its `u`-conjugate, the latter
/// started from the conjugated initial paths of the former.
pub fn check_unitary_invariance(
    problem: &DistanceProblem,
    u: &UnitaryOperator,
    config: &OptimizerConfig,
) -> Result<InvarianceCheck> {
    config.validate()?;
    let conj_problem = problem.conjugate(u)?;
    let original = dynamic_distance(problem, config)?;
    let obj = Objective::conjugated(&conj_problem, u);
    let starts = initial_points(&Objective::new(problem), config);
    let conjugated = optimize_from(&conj_problem, config, &obj, starts)?;
    Ok(InvarianceCheck {
        d: original.distance,
        d_conjugated: conjugated.distance,
        gap: (original.distance - conjugated.distance).abs(),
        original,
        conjugated,
    })
}

/// Energy uncertainty of each segment generator at the segment start.
pub fn segment_uncertainties(rho0: &DensityOperator, path: &HamiltonianPath) -> Result<Vec<f64>> {
    let mut rho = rho0.clone();
    let mut out = Vec::with_capacity(path.segments().len());
    for s in path.segments() {
        out.push(energy_uncertainty(&s.generator, &rho)?);
        rho = rho.conjugate(&Propagator::new(&s.generator).at(s.duration))?;
    }
    Ok(out)
}
