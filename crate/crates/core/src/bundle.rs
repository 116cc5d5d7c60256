//! The purification bundle over an isospectral orbit.
//!
//! A purification of `rho` with spectrum `sigma` is a `dim x k` matrix `Psi`
//! with `Psi Psi^dagger = rho` and `Psi^dagger Psi = P(sigma) = Diag(sigma)`.
//! The projection is `pi(Psi) = Psi Psi^dagger`. Right multiplication by
//! unitaries commuting with `P(sigma)` moves along a fibre; left
//! multiplication by unitaries commuting with `rho` gives the left gauge
//! action. Tangent vectors are split into vertical (`Ker d pi`) and
//! horizontal (its orthogonal complement under the real Hilbert-Schmidt
//! pairing) parts, which defines the connection used for horizontal lifts.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::evolution::StateTrajectory;
use crate::linalg::{
    c, eigh_raw, haar_unitary, hermitian_function, hs_inner_unchecked, hs_norm, max_abs, seeded_rng, ComplexMatrix,
    DensityOperator, HermitianOperator, Spectrum, UnitaryOperator, I,
};

/// Eigenvalues below this are dropped from a purification.
pub const RANK_CUTOFF: f64 = 1e-14;
/// `|Psi^dagger Psi - P(sigma)|_max` accepted by [`Purification::new`].
pub const PURIFICATION_TOL: f64 = 1e-10;
/// Constraint drift tolerated by [`project_pi`].
pub const PROJECTION_DRIFT_TOL: f64 = 1e-8;
/// Tangency defect `|X^dagger Psi + Psi^dagger X|_max` accepted for tangents.
pub const TANGENCY_TOL: f64 = 1e-9;
/// Commutation defect accepted for gauge elements.
pub const GAUGE_TOL: f64 = 1e-10;
/// Projection error above which a lift is declared diverged.
pub const LIFT_DIVERGENCE_TOL: f64 = 1e-4;

/// A point of the total space.
#[derive(Debug, Clone, PartialEq)]
pub struct Purification {
    psi: ComplexMatrix,
    sigma: Spectrum,
}

impl Purification {
    pub fn new(psi: ComplexMatrix, sigma: Spectrum) -> Result<Self> {
        if psi.ncols() != sigma.len() || psi.nrows() < psi.ncols() {
            return Err(Error::InvalidPurification(format!(
                "psi is {}x{} but the spectrum has {} values",
                psi.nrows(),
                psi.ncols(),
                sigma.len()
            )));
        }
        if !crate::linalg::is_finite(&psi) {
            return Err(Error::InvalidPurification("non-finite entries".into()));
        }
        let drift = constraint_drift(&psi, &sigma);
        if drift > PURIFICATION_TOL {
            return Err(Error::InvalidPurification(format!(
                "Psi^dagger Psi deviates from P(sigma) by {drift:e}"
            )));
        }
        Ok(Self { psi, sigma })
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn k(&self) -> usize {
        self.psi.ncols()
    }

    pub fn psi(&self) -> &ComplexMatrix {
        &self.psi
    }

    pub fn sigma(&self) -> &Spectrum {
        &self.sigma
    }

    /// `|Psi^dagger Psi - P(sigma)|_max`.
    pub fn constraint_drift(&self) -> f64 {
        constraint_drift(&self.psi, &self.sigma)
    }
}

fn constraint_drift(psi: &ComplexMatrix, sigma: &Spectrum) -> f64 {
    max_abs(&(psi.adjoint() * psi - sigma.diag_matrix()))
}

/// `Psi0 = U0 sqrt(P(sigma))`, keeping eigenvalues `>= RANK_CUTOFF`.
pub fn standard_purification(rho: &DensityOperator, grouping_tol: f64) -> Result<Purification> {
    let (values, vectors) = eigh_raw(rho.matrix());
    let k = values.iter().take_while(|&&p| p >= RANK_CUTOFF).count();
    let kept: Vec<f64> = values[..k].to_vec();
    let sigma = Spectrum::new(kept, grouping_tol)?;
    let mut psi = vectors.columns(0, k).into_owned();
    for (j, p) in sigma.values().iter().enumerate() {
        let s = p.sqrt();
        psi.column_mut(j).iter_mut().for_each(|x| *x *= s);
    }
    Purification::new(psi, sigma)
}

/// `pi(Psi) = Psi Psi^dagger`.
pub fn project_pi(psi: &Purification) -> Result<DensityOperator> {
    let drift = psi.constraint_drift();
    if drift > PROJECTION_DRIFT_TOL {
        return Err(Error::InvalidPurification(format!(
            "constraint drift {drift:e} exceeds {PROJECTION_DRIFT_TOL:e}"
        )));
    }
    let rho = DensityOperator::with_grouping(&psi.psi * psi.psi.adjoint(), psi.sigma.grouping_tol())?;
    let values = rho.spectrum().values();
    let mismatch = values
        .iter()
        .enumerate()
        .map(|(i, p)| (p - psi.sigma.values().get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);
    if mismatch > 1e-9 {
        return Err(Error::InvalidPurification(format!(
            "projected spectrum deviates from sigma by {mismatch:e}"
        )));
    }
    Ok(rho)
}

/// Tangent vector to the total space at a purification.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleTangent {
    at: Purification,
    direction: ComplexMatrix,
}

impl BundleTangent {
    pub fn new(at: Purification, direction: ComplexMatrix) -> Result<Self> {
        if direction.shape() != at.psi.shape() {
            return Err(Error::InvalidInput(format!(
                "tangent shape {:?} does not match purification shape {:?}",
                direction.shape(),
                at.psi.shape()
            )));
        }
        let defect = tangency_defect(&at.psi, &direction);
        if defect > TANGENCY_TOL {
            return Err(Error::InvalidInput(format!(
                "direction is not tangent to the constraint surface (defect {defect:e})"
            )));
        }
        Ok(Self { at, direction })
    }

    /// Velocity `-i H Psi` of the unitary flow generated by `h`.
    pub fn from_hamiltonian(at: Purification, h: &HermitianOperator) -> Result<Self> {
        if h.dim() != at.dim() {
            return Err(Error::InvalidInput(format!(
                "operator has dimension {}, purification has {}",
                h.dim(),
                at.dim()
            )));
        }
        let direction = (h.matrix() * &at.psi) * c(0.0, -1.0);
        Self::new(at, direction)
    }

    pub fn at(&self) -> &Purification {
        &self.at
    }

    pub fn direction(&self) -> &ComplexMatrix {
        &self.direction
    }

    pub fn norm(&self) -> f64 {
        hs_norm(&self.direction)
    }
}

fn tangency_defect(psi: &ComplexMatrix, x: &ComplexMatrix) -> f64 {
    max_abs(&(x.adjoint() * psi + psi.adjoint() * x))
}

/// Orthonormal basis of anti-Hermitian `k x k` matrices that are block
/// diagonal with respect to the multiplicity groups of `sigma`. Its size is
/// the sum of squared multiplicities.
pub fn commutant_algebra_basis(sigma: &Spectrum) -> Vec<ComplexMatrix> {
    let k = sigma.len();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut basis = Vec::new();
    for group in sigma.groups() {
        for a in group.clone() {
            let mut m = ComplexMatrix::zeros(k, k);
            m[(a, a)] = I;
            basis.push(m);
            for b in a + 1..group.end {
                let mut real = ComplexMatrix::zeros(k, k);
                real[(a, b)] = c(s, 0.0);
                real[(b, a)] = c(-s, 0.0);
                basis.push(real);
                let mut imag = ComplexMatrix::zeros(k, k);
                imag[(a, b)] = c(0.0, s);
                imag[(b, a)] = c(0.0, s);
                basis.push(imag);
            }
        }
    }
    basis
}

/// Modified Gram-Schmidt under the real Hilbert-Schmidt pairing.
fn orthonormalize(mut vectors: Vec<ComplexMatrix>) -> Vec<ComplexMatrix> {
    let mut out: Vec<ComplexMatrix> = Vec::with_capacity(vectors.len());
    for v in vectors.iter_mut() {
        for u in &out {
            let proj = hs_inner_unchecked(u, v);
            *v -= u.scale(proj);
        }
        let n = hs_norm(v);
        if n > 1e-300 {
            out.push(v.unscale(n));
        }
    }
    out
}

fn vertical_directions(psi: &ComplexMatrix, sigma: &Spectrum) -> Vec<ComplexMatrix> {
    orthonormalize(commutant_algebra_basis(sigma).iter().map(|a| psi * a).collect())
}

/// Orthonormal basis `{Psi A_j}` of the vertical space.
pub fn vertical_basis(psi: &Purification) -> Vec<BundleTangent> {
    vertical_directions(&psi.psi, &psi.sigma)
        .into_iter()
        .map(|direction| BundleTangent {
            at: psi.clone(),
            direction,
        })
        .collect()
}

fn split_direction(psi: &ComplexMatrix, sigma: &Spectrum, x: &ComplexMatrix) -> (ComplexMatrix, ComplexMatrix) {
    let mut vertical = ComplexMatrix::zeros(x.nrows(), x.ncols());
    for v in vertical_directions(psi, sigma) {
        vertical += v.scale(hs_inner_unchecked(&v, x));
    }
    (x - &vertical, vertical)
}

/// Splits a tangent into its horizontal and vertical parts.
pub fn horizontal_project(tangent: &BundleTangent) -> (BundleTangent, BundleTangent) {
    let (h, v) = split_direction(&tangent.at.psi, &tangent.at.sigma, &tangent.direction);
    (
        BundleTangent {
            at: tangent.at.clone(),
            direction: h,
        },
        BundleTangent {
            at: tangent.at.clone(),
            direction: v,
        },
    )
}

fn horizontal_velocity(psi: &ComplexMatrix, sigma: &Spectrum, h: &ComplexMatrix) -> ComplexMatrix {
    let x = (h * psi) * c(0.0, -1.0);
    split_direction(psi, sigma, &x).0
}

/// `Psi (Psi^dagger Psi)^(-1/2) P(sigma)^(1/2)`.
fn renormalize(psi: &ComplexMatrix, sigma: &Spectrum) -> ComplexMatrix {
    let gram = psi.adjoint() * psi;
    let inv_sqrt = hermitian_function(&gram, |x| 1.0 / x.sqrt());
    let sqrt_p: Vec<f64> = sigma.values().iter().map(|p| p.sqrt()).collect();
    psi * inv_sqrt * crate::linalg::diag_real(&sqrt_p)
}

/// Horizontal lift of a trajectory starting at `psi0`.
///
/// Integrates `Psi' = hor(-i H Psi)` with classical RK4 using
/// `steps_per_sample` steps between consecutive samples and restores
/// `Psi^dagger Psi = P(sigma)` after every step.
pub fn horizontal_lift(
    traj: &StateTrajectory,
    psi0: &Purification,
    steps_per_sample: usize,
) -> Result<Vec<Purification>> {
    if steps_per_sample == 0 {
        return Err(Error::InvalidInput("steps_per_sample must be positive".into()));
    }
    if traj.is_empty() {
        return Ok(Vec::new());
    }
    if psi0.dim() != traj.states()[0].dim() {
        return Err(Error::InvalidInput(format!(
            "purification has dimension {}, trajectory has {}",
            psi0.dim(),
            traj.states()[0].dim()
        )));
    }
    let start_error = project_pi(psi0)?.hs_distance(&traj.states()[0])?;
    if start_error > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "initial purification projects {start_error:e} away from the first state"
        )));
    }
    let sigma = psi0.sigma.clone();
    let mut out = Vec::with_capacity(traj.len());
    out.push(psi0.clone());
    let mut psi = psi0.psi.clone();
    for i in 0..traj.len() - 1 {
        let h = traj.generator_after(i).matrix();
        let dt = (traj.times()[i + 1] - traj.times()[i]) / steps_per_sample as f64;
        for _ in 0..steps_per_sample {
            let k1 = horizontal_velocity(&psi, &sigma, h);
            let k2 = horizontal_velocity(&(&psi + k1.scale(dt / 2.0)), &sigma, h);
            let k3 = horizontal_velocity(&(&psi + k2.scale(dt / 2.0)), &sigma, h);
            let k4 = horizontal_velocity(&(&psi + k3.scale(dt)), &sigma, h);
            psi += (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(dt / 6.0);
            psi = renormalize(&psi, &sigma);
        }
        let t = traj.times()[i + 1];
        let error = crate::linalg::hs_norm(&(&psi * psi.adjoint() - traj.states()[i + 1].matrix()));
        if error.is_nan() || error > LIFT_DIVERGENCE_TOL {
            return Err(Error::LiftDiverged { time: t, error });
        }
        out.push(Purification::new(psi.clone(), sigma.clone())?);
    }
    Ok(out)
}

/// Largest `|pi(Psi(t)) - rho(t)|_HS` over a lift.
pub fn lift_projection_error(traj: &StateTrajectory, lift: &[Purification]) -> f64 {
    lift.iter()
        .zip(traj.states())
        .map(|(p, rho)| hs_norm(&(&p.psi * p.psi.adjoint() - rho.matrix())))
        .fold(0.0, f64::max)
}

/// Trapezoid length of a lift, using the horizontal velocity of the
/// generator active on each interval.
pub fn lift_length(traj: &StateTrajectory, lift: &[Purification]) -> f64 {
    let mut total = 0.0;
    for i in 0..lift.len().saturating_sub(1) {
        let h = traj.generator_after(i).matrix();
        let dt = traj.times()[i + 1] - traj.times()[i];
        let a = hs_norm(&horizontal_velocity(&lift[i].psi, &lift[i].sigma, h));
        let b = hs_norm(&horizontal_velocity(&lift[i + 1].psi, &lift[i + 1].sigma, h));
        total += 0.5 * dt * (a + b);
    }
    total
}

/// Length of the base curve under the induced metric (trapezoid rule).
pub fn induced_length(traj: &StateTrajectory, grouping_tol: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..traj.len().saturating_sub(1) {
        let h = traj.generator_after(i);
        let dt = traj.times()[i + 1] - traj.times()[i];
        let a = induced_speed(&traj.states()[i], h, grouping_tol)?;
        let b = induced_speed(&traj.states()[i + 1], h, grouping_tol)?;
        total += 0.5 * dt * (a + b);
    }
    Ok(total)
}

/// Length of the base curve measured by the energy uncertainty.
pub fn uncertainty_length(traj: &StateTrajectory) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..traj.len().saturating_sub(1) {
        let h = traj.generator_after(i);
        let dt = traj.times()[i + 1] - traj.times()[i];
        let a = crate::evolution::energy_uncertainty(h, &traj.states()[i])?;
        let b = crate::evolution::energy_uncertainty(h, &traj.states()[i + 1])?;
        total += 0.5 * dt * (a + b);
    }
    Ok(total)
}

/// Speed of `rho' = -i[H, rho]` in the base metric pushed forward from the
/// horizontal Hilbert-Schmidt metric: `|hor(-i H Psi)|` at the standard
/// purification.
pub fn induced_speed(rho: &DensityOperator, h: &HermitianOperator, grouping_tol: f64) -> Result<f64> {
    if h.dim() != rho.dim() {
        return Err(Error::InvalidInput(format!(
            "operator has dimension {}, state has {}",
            h.dim(),
            rho.dim()
        )));
    }
    let psi = standard_purification(rho, grouping_tol)?;
    Ok(hs_norm(&horizontal_velocity(&psi.psi, &psi.sigma, h.matrix())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeSide {
    /// `Psi -> Psi u`, `u` commuting with `P(sigma)`.
    Right,
    /// `Psi -> v Psi`, `v` commuting with the anchor state.
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeElement {
    side: GaugeSide,
    matrix: UnitaryOperator,
    anchor: Option<DensityOperator>,
}

impl GaugeElement {
    pub fn right(u: UnitaryOperator, sigma: &Spectrum) -> Result<Self> {
        if u.dim() != sigma.len() {
            return Err(Error::InvalidGauge(format!(
                "right gauge element is {0}x{0}, expected {1}x{1}",
                u.dim(),
                sigma.len()
            )));
        }
        let p = sigma.diag_matrix();
        let defect = max_abs(&(u.matrix() * &p - &p * u.matrix()));
        if defect > GAUGE_TOL {
            return Err(Error::InvalidGauge(format!(
                "u does not commute with P(sigma) (defect {defect:e})"
            )));
        }
        Ok(Self {
            side: GaugeSide::Right,
            matrix: u,
            anchor: None,
        })
    }

    pub fn left(v: UnitaryOperator, anchor: DensityOperator) -> Result<Self> {
        if v.dim() != anchor.dim() {
            return Err(Error::InvalidGauge(format!(
                "left gauge element is {0}x{0}, anchor is {1}x{1}",
                v.dim(),
                anchor.dim()
            )));
        }
        let defect = max_abs(&crate::linalg::commutator(v.matrix(), anchor.matrix()));
        if defect > GAUGE_TOL {
            return Err(Error::InvalidGauge(format!(
                "v does not commute with the anchor state (defect {defect:e})"
            )));
        }
        Ok(Self {
            side: GaugeSide::Left,
            matrix: v,
            anchor: Some(anchor),
        })
    }

    pub fn side(&self) -> GaugeSide {
        self.side
    }

    pub fn matrix(&self) -> &UnitaryOperator {
        &self.matrix
    }

    pub fn anchor(&self) -> Option<&DensityOperator> {
        self.anchor.as_ref()
    }
}

/// Right action `Psi u` or left action `v Psi`.
pub fn apply_gauge(psi: &Purification, g: &GaugeElement) -> Result<Purification> {
    match g.side {
        GaugeSide::Right => {
            // Revalidate against this purification's own spectrum.
            let g = GaugeElement::right(g.matrix.clone(), &psi.sigma)?;
            Purification::new(&psi.psi * g.matrix.matrix(), psi.sigma.clone())
        }
        GaugeSide::Left => {
            if g.matrix.dim() != psi.dim() {
                return Err(Error::InvalidGauge(format!(
                    "left gauge element is {0}x{0}, purification has dimension {1}",
                    g.matrix.dim(),
                    psi.dim()
                )));
            }
            let rho = &psi.psi * psi.psi.adjoint();
            let defect = max_abs(&crate::linalg::commutator(g.matrix.matrix(), &rho));
            if defect > GAUGE_TOL {
                return Err(Error::InvalidGauge(format!(
                    "v does not commute with pi(Psi) (defect {defect:e})"
                )));
            }
            Purification::new(g.matrix.matrix() * &psi.psi, psi.sigma.clone())
        }
    }
}

/// Haar-random element of the right gauge group: independent Haar unitaries
/// on each multiplicity block of `sigma`.
pub fn random_right_gauge(sigma: &Spectrum, seed: u64) -> GaugeElement {
    let u = block_haar(sigma, &mut seeded_rng(seed));
    GaugeElement {
        side: GaugeSide::Right,
        matrix: u,
        anchor: None,
    }
}

fn block_haar(sigma: &Spectrum, rng: &mut impl rand::Rng) -> UnitaryOperator {
    let n = sigma.len();
    let mut m = ComplexMatrix::zeros(n, n);
    for g in sigma.groups() {
        let block = haar_unitary(rng, g.len());
        m.view_mut((g.start, g.start), (g.len(), g.len()))
            .copy_from(block.matrix());
    }
    UnitaryOperator::from_unitary_unchecked(m)
}

/// Factor structure of the left gauge group of `rho0`.
#[derive(Debug, Clone)]
pub struct GaugeGroupStructure {
    anchor: DensityOperator,
    anchor_unitary: UnitaryOperator,
    spectrum: Spectrum,
}

impl GaugeGroupStructure {
    /// `U0` with `rho0 = U0 Diag(sigma) U0^dagger`.
    pub fn anchor_unitary(&self) -> &UnitaryOperator {
        &self.anchor_unitary
    }

    /// Full eigenvalue list of the anchor (zeros included), grouped.
    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn factor_dims(&self) -> &[usize] {
        self.spectrum.multiplicities()
    }

    /// Real dimension of the gauge Lie algebra, `sum m_i^2`.
    pub fn algebra_dim(&self) -> usize {
        self.factor_dims().iter().map(|m| m * m).sum()
    }

    /// `v = U0 (direct sum of Haar u_i) U0^dagger`.
    pub fn sample(&self, seed: u64) -> GaugeElement {
        let blocks = block_haar(&self.spectrum, &mut seeded_rng(seed));
        let u0 = self.anchor_unitary.matrix();
        let v = u0 * blocks.matrix() * u0.adjoint();
        GaugeElement {
            side: GaugeSide::Left,
            matrix: UnitaryOperator::from_unitary_unchecked(v),
            anchor: Some(self.anchor.clone()),
        }
    }
}

pub fn gauge_group_factors(rho0: &DensityOperator, grouping_tol: f64) -> Result<GaugeGroupStructure> {
    let (values, vectors) = eigh_raw(rho0.matrix());
    let clamped: Vec<f64> = values.iter().map(|p| p.max(0.0)).collect();
    let spectrum = Spectrum::new(clamped, grouping_tol)?;
    Ok(GaugeGroupStructure {
        anchor: rho0.clone(),
        anchor_unitary: UnitaryOperator::from_unitary_unchecked(vectors),
        spectrum,
    })
}

/// Real dimension of the anti-Hermitian commutant of `rho`, computed as the
/// numerical kernel dimension of `A -> [rho, A]`. Singular values at or
/// below `cutoff` count as zero.
pub fn commutant_dimension(rho: &DensityOperator, cutoff: f64) -> usize {
    let d = rho.dim();
    let mut columns = Vec::with_capacity(d * d);
    for j in 0..d {
        for k in j..d {
            if j == k {
                let mut a = ComplexMatrix::zeros(d, d);
                a[(j, j)] = I;
                columns.push(a);
            } else {
                let mut re = ComplexMatrix::zeros(d, d);
                re[(j, k)] = c(1.0, 0.0);
                re[(k, j)] = c(-1.0, 0.0);
                columns.push(re);
                let mut im = ComplexMatrix::zeros(d, d);
                im[(j, k)] = I;
                im[(k, j)] = I;
                columns.push(im);
            }
        }
    }
    let mut map = DMatrix::<f64>::zeros(2 * d * d, columns.len());
    for (col, a) in columns.iter().enumerate() {
        let image = crate::linalg::commutator(rho.matrix(), a);
        for (row, z) in image.iter().enumerate() {
            map[(2 * row, col)] = z.re;
            map[(2 * row + 1, col)] = z.im;
        }
    }
    let rank = map.singular_values().iter().filter(|s| **s > cutoff).count();
    columns.len() - rank
}

/// Right gauge element `u` with `psi1 u ~ psi2`, obtained by projecting
/// `P^-1 psi1^dagger psi2` onto the commutant blocks and taking its unitary
/// polar factor. Returns the element and `|psi1 u - psi2|_max`.
pub fn relative_gauge(psi1: &Purification, psi2: &Purification) -> Result<(GaugeElement, f64)> {
    if psi1.psi.shape() != psi2.psi.shape() {
        return Err(Error::InvalidInput("purifications have different shapes".into()));
    }
    let k = psi1.k();
    let inv_p: Vec<f64> = psi1.sigma.values().iter().map(|p| 1.0 / p).collect();
    let raw = crate::linalg::diag_real(&inv_p) * psi1.psi.adjoint() * &psi2.psi;
    let mut projected = ComplexMatrix::zeros(k, k);
    for g in psi1.sigma.groups() {
        projected
            .view_mut((g.start, g.start), (g.len(), g.len()))
            .copy_from(&raw.view((g.start, g.start), (g.len(), g.len())));
    }
    let svd = projected.svd(true, true);
    let u = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    let residual = max_abs(&(&psi1.psi * &u - &psi2.psi));
    let g = GaugeElement::right(UnitaryOperator::new(u)?, &psi1.sigma)?;
    Ok((g, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{energy_uncertainty, evolve_von_neumann, HamiltonianPath, Segment};
    use crate::linalg::identity;
    use crate::linalg::{
        diag_real, pauli_x, pauli_y, pauli_z, random_density, random_hermitian, random_pure_density, random_unitary,
        real_matrix, DEFAULT_GROUPING_TOL,
    };
    use std::f64::consts::PI;

    const TOL: f64 = DEFAULT_GROUPING_TOL;

    fn herm(m: ComplexMatrix) -> HermitianOperator {
        HermitianOperator::new(m).unwrap()
    }

    #[test]
    fn standard_purification_examples() {
        let pure = DensityOperator::diagonal(&[1.0, 0.0]).unwrap();
        let p = standard_purification(&pure, TOL).unwrap();
        assert_eq!(p.k(), 1);
        assert!(max_abs(&(p.psi() - real_matrix(2, 1, &[1.0, 0.0]))) < 1e-15);

        let mixed = DensityOperator::maximally_mixed(2);
        let p = standard_purification(&mixed, TOL).unwrap();
        assert!(max_abs(&(p.psi() - identity(2).scale(0.5f64.sqrt()))) < 1e-15);
        assert!(max_abs(&(p.psi().adjoint() * p.psi() - diag_real(&[0.5, 0.5]))) < 1e-15);

        let rho = DensityOperator::diagonal(&[0.5, 0.3, 0.2]).unwrap();
        let p = standard_purification(&rho, TOL).unwrap();
        let expected = diag_real(&[0.5f64.sqrt(), 0.3f64.sqrt(), 0.2f64.sqrt()]);
        assert!(max_abs(&(p.psi() - expected)) < 1e-15);
    }

    #[test]
    fn project_pi_round_trips() {
        let rho = random_density(3, 2);
        let p = standard_purification(&rho, TOL).unwrap();
        let back = project_pi(&p).unwrap();
        assert!(max_abs(&(back.matrix() - rho.matrix())) < 1e-10);

        let sigma = Spectrum::new(vec![0.5, 0.5], TOL).unwrap();
        let p = Purification::new(identity(2).scale(0.5f64.sqrt()), sigma).unwrap();
        assert!(max_abs(&(project_pi(&p).unwrap().matrix() - identity(2).scale(0.5))) < 1e-15);
    }

    #[test]
    fn project_pi_rejects_drift() {
        let sigma = Spectrum::new(vec![0.5, 0.5], TOL).unwrap();
        let mut psi = identity(2).scale(0.5f64.sqrt());
        psi[(0, 0)] += c(1e-6, 0.0);
        assert!(Purification::new(psi.clone(), sigma.clone()).is_err());
        let p = Purification { psi, sigma };
        assert!(matches!(project_pi(&p), Err(Error::InvalidPurification(_))));
    }

    #[test]
    fn vertical_basis_sizes_and_kernel() {
        let pure = standard_purification(&random_pure_density(3, 1), TOL).unwrap();
        let basis = vertical_basis(&pure);
        assert_eq!(basis.len(), 1);
        let i_psi = pure.psi() * I;
        assert!((hs_inner_unchecked(basis[0].direction(), &i_psi).abs() - 1.0).abs() < 1e-12);

        let rho = DensityOperator::diagonal(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(vertical_basis(&standard_purification(&rho, TOL).unwrap()).len(), 5);
        let rho = DensityOperator::maximally_mixed(3);
        let p = standard_purification(&rho, TOL).unwrap();
        let basis = vertical_basis(&p);
        assert_eq!(basis.len(), 9);
        for (i, v) in basis.iter().enumerate() {
            let x = v.direction();
            let dpi = x * p.psi().adjoint() + p.psi() * x.adjoint();
            assert!(max_abs(&dpi) <= 1e-10);
            for (j, w) in basis.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((hs_inner_unchecked(x, w.direction()) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn horizontal_projection_examples() {
        let rho = random_density(3, 4);
        let p = standard_purification(&rho, TOL).unwrap();
        let v = vertical_basis(&p).remove(1);
        let (h, _) = horizontal_project(&v);
        assert!(h.norm() < 1e-12);

        let plus = DensityOperator::new(real_matrix(2, 2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let p = standard_purification(&plus, TOL).unwrap();
        let t = BundleTangent::from_hamiltonian(p, &herm(pauli_z())).unwrap();
        let (h, v) = horizontal_project(&t);
        assert!(v.norm() < 1e-15);
        assert!((h.norm() - 1.0).abs() < 1e-12);

        let p = standard_purification(&random_density(3, 9), TOL).unwrap();
        let t = BundleTangent::from_hamiltonian(p, &random_hermitian(3, 9)).unwrap();
        let (h, v) = horizontal_project(&t);
        assert!((h.norm().powi(2) + v.norm().powi(2) - t.norm().powi(2)).abs() < 1e-10);
        let sum = h.direction() + v.direction();
        assert!(max_abs(&(sum - t.direction())) < 1e-14);
        for b in vertical_basis(t.at()) {
            assert!(hs_inner_unchecked(h.direction(), b.direction()).abs() <= 1e-10);
        }
        // idempotent
        let (hh, hv) = horizontal_project(&h);
        assert!(max_abs(&(hh.direction() - h.direction())) < 1e-14);
        assert!(hv.norm() < 1e-12);
    }

    #[test]
    fn tangent_must_be_tangent() {
        let p = standard_purification(&random_density(2, 1), TOL).unwrap();
        let x = p.psi().clone();
        assert!(BundleTangent::new(p, x).is_err());
    }

    #[test]
    fn commuting_trajectory_lifts_to_constant() {
        let rho0 = DensityOperator::diagonal(&[1.0, 0.0]).unwrap();
        let path = HamiltonianPath::constant(herm(pauli_z()), 1.0).unwrap();
        let traj = evolve_von_neumann(&rho0, &path, 5).unwrap();
        let p0 = standard_purification(&rho0, TOL).unwrap();
        let lift = horizontal_lift(&traj, &p0, 10).unwrap();
        for p in &lift {
            assert!(max_abs(&(p.psi() - p0.psi())) < 1e-14);
        }
    }

    #[test]
    fn great_circle_lift_length() {
        let rho0 = DensityOperator::diagonal(&[1.0, 0.0]).unwrap();
        let path = HamiltonianPath::constant(herm(pauli_x().scale(PI / 2.0)), 1.0).unwrap();
        let traj = evolve_von_neumann(&rho0, &path, 21).unwrap();
        let p0 = standard_purification(&rho0, TOL).unwrap();
        let lift = horizontal_lift(&traj, &p0, 20).unwrap();
        assert!(lift_projection_error(&traj, &lift) <= 1e-6);
        assert!((lift_length(&traj, &lift) - PI / 2.0).abs() <= 1e-4);
    }

    #[test]
    fn closed_loop_has_holonomy() {
        let rho0 = DensityOperator::diagonal(&[1.0, 0.0]).unwrap();
        // x-rotation to the equator, y-rotation, then back: a closed loop
        // enclosing solid angle.
        let q = PI / 4.0;
        let segs = vec![
            Segment {
                generator: herm(pauli_x().scale(q)),
                duration: 1.0,
            },
            Segment {
                generator: herm(pauli_z().scale(q)),
                duration: 1.0,
            },
            Segment {
                generator: herm(pauli_y().scale(-q)),
                duration: 1.0,
            },
        ];
        let path = HamiltonianPath::new(segs, 0.0).unwrap();
        let traj = evolve_von_neumann(&rho0, &path, 41).unwrap();
        assert!(max_abs(&(traj.final_state().matrix() - rho0.matrix())) < 1e-12);
        let p0 = standard_purification(&rho0, TOL).unwrap();
        let lift = horizontal_lift(&traj, &p0, 20).unwrap();
        let end = lift.last().unwrap();
        assert!(project_pi(end).unwrap().hs_distance(&rho0).unwrap() <= 1e-6);
        let phase = (p0.psi().adjoint() * end.psi())[(0, 0)];
        assert!((phase.norm() - 1.0).abs() < 1e-6);
        assert!((phase - c(1.0, 0.0)).norm() > 1e-2, "phase {phase}");
    }

    #[test]
    fn gauge_actions() {
        let rho = random_density(3, 3);
        let p = standard_purification(&rho, TOL).unwrap();
        let id = GaugeElement::right(UnitaryOperator::identity(3), p.sigma()).unwrap();
        assert_eq!(apply_gauge(&p, &id).unwrap().psi(), p.psi());

        let pure = standard_purification(&random_pure_density(2, 5), TOL).unwrap();
        let phase = UnitaryOperator::new(ComplexMatrix::from_element(1, 1, c(0.3f64.cos(), 0.3f64.sin()))).unwrap();
        let g = GaugeElement::right(phase, pure.sigma()).unwrap();
        let moved = apply_gauge(&pure, &g).unwrap();
        assert!(max_abs(&(project_pi(&moved).unwrap().matrix() - project_pi(&pure).unwrap().matrix())) < 1e-15);

        let rho = DensityOperator::diagonal(&[0.5, 0.25, 0.25])
            .unwrap()
            .conjugate(&random_unitary(3, 1))
            .unwrap();
        let p = standard_purification(&rho, TOL).unwrap();
        let alpha: f64 = 0.7;
        let mut u = ComplexMatrix::zeros(3, 3);
        u[(0, 0)] = c(alpha.cos(), alpha.sin());
        u.view_mut((1, 1), (2, 2)).copy_from(random_unitary(2, 4).matrix());
        let g = GaugeElement::right(UnitaryOperator::new(u).unwrap(), p.sigma()).unwrap();
        let q = apply_gauge(&p, &g).unwrap();
        assert!(q.constraint_drift() <= 1e-10);
        assert!(max_abs(&(project_pi(&q).unwrap().matrix() - rho.matrix())) <= 1e-10);
    }

    #[test]
    fn gauge_rejects_non_commuting() {
        let rho = DensityOperator::diagonal(&[0.5, 0.3, 0.2]).unwrap();
        let p = standard_purification(&rho, TOL).unwrap();
        assert!(GaugeElement::right(random_unitary(3, 2), p.sigma()).is_err());
        assert!(GaugeElement::left(random_unitary(3, 2), rho.clone()).is_err());
        let smuggled = GaugeElement {
            side: GaugeSide::Right,
            matrix: random_unitary(3, 2),
            anchor: None,
        };
        assert!(matches!(apply_gauge(&p, &smuggled), Err(Error::InvalidGauge(_))));
    }

    #[test]
    fn left_gauge_preserves_projection() {
        let rho = DensityOperator::diagonal(&[0.5, 0.25, 0.25])
            .unwrap()
            .conjugate(&random_unitary(3, 7))
            .unwrap();
        let structure = gauge_group_factors(&rho, TOL).unwrap();
        let p = standard_purification(&rho, TOL).unwrap();
        let g = structure.sample(3);
        let q = apply_gauge(&p, &g).unwrap();
        assert!(max_abs(&(project_pi(&q).unwrap().matrix() - rho.matrix())) <= 1e-10);
        assert!(q.constraint_drift() <= 1e-10);
    }

    #[test]
    fn gauge_factor_examples() {
        let cases: [(&[f64], &[usize], usize); 3] = [
            (&[0.5, 0.3, 0.2], &[1, 1, 1], 3),
            (&[0.5, 0.25, 0.25], &[1, 2], 5),
            (&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], &[3], 9),
        ];
        for (probs, dims, alg) in cases {
            let rho = DensityOperator::diagonal(probs).unwrap();
            let s = gauge_group_factors(&rho, TOL).unwrap();
            assert_eq!(s.factor_dims(), dims);
            assert_eq!(s.algebra_dim(), alg);
            assert_eq!(commutant_dimension(&rho, TOL), alg);
            for seed in 0..5 {
                let v = s.sample(seed);
                assert!(max_abs(&crate::linalg::commutator(v.matrix().matrix(), rho.matrix())) <= 1e-10);
            }
        }
    }

    #[test]
    fn induced_speed_examples() {
        for seed in 0..5 {
            let rho = random_pure_density(3, seed);
            let h = random_hermitian(3, seed + 100);
            let a = induced_speed(&rho, &h, TOL).unwrap();
            let b = energy_uncertainty(&h, &rho).unwrap();
            assert!((a - b).abs() <= 1e-10);
        }
        let rho = DensityOperator::diagonal(&[0.6, 0.4]).unwrap();
        assert!(induced_speed(&rho, &herm(diag_real(&[0.3, -1.0])), TOL).unwrap() < 1e-15);

        let rho = DensityOperator::diagonal(&[0.75, 0.25]).unwrap();
        let sz = herm(pauli_z());
        assert!(induced_speed(&rho, &sz, TOL).unwrap() < 1e-15);
        let du = energy_uncertainty(&sz, &rho).unwrap();
        assert!((du - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn relative_gauge_recovers_fibre_element() {
        let rho = DensityOperator::diagonal(&[0.5, 0.25, 0.25])
            .unwrap()
            .conjugate(&random_unitary(3, 12))
            .unwrap();
        let p1 = standard_purification(&rho, TOL).unwrap();
        let w = random_unitary(3, 13);
        let p2 = standard_purification(&rho.conjugate(&w).unwrap(), TOL).unwrap();
        let p2 = Purification::new(w.matrix().adjoint() * p2.psi(), p2.sigma().clone()).unwrap();
        let (_, residual) = relative_gauge(&p1, &p2).unwrap();
        assert!(residual <= 1e-8);
    }
}
