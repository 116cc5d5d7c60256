//! Dense complex linear algebra on small matrices.
//!
//! Everything downstream is built on four validated wrappers around
//! [`ComplexMatrix`]: [`HermitianOperator`], [`UnitaryOperator`],
//! [`DensityOperator`] and the eigenvalue bookkeeping type [`Spectrum`].
//! Exponentials are always taken through the Hermitian eigendecomposition,
//! so conjugation by an exponential preserves spectra to rounding error.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row/column dense complex matrix. Entries must be finite.
pub type ComplexMatrix = DMatrix<Complex64>;

/// Maximum Hermitian defect accepted on input before hermitization.
pub const HERMITIAN_INPUT_TOL: f64 = 1e-9;
/// Hermitian defect accepted for density operators.
pub const DENSITY_HERMITIAN_TOL: f64 = 1e-12;
/// Most negative eigenvalue tolerated in a density operator.
pub const DENSITY_NEGATIVE_TOL: f64 = 1e-12;
/// Allowed deviation of the trace of a density operator from one.
pub const DENSITY_TRACE_TOL: f64 = 1e-12;
/// Unitarity defect accepted by [`UnitaryOperator::new`].
pub const UNITARY_TOL: f64 = 1e-10;
/// Default absolute tolerance for grouping degenerate eigenvalues.
pub const DEFAULT_GROUPING_TOL: f64 = 1e-8;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Builds a complex matrix from real row-major entries.
pub fn real_matrix(rows: usize, cols: usize, data: &[f64]) -> ComplexMatrix {
    ComplexMatrix::from_row_iterator(rows, cols, data.iter().map(|&x| c(x, 0.0)))
}

pub fn diag_real(values: &[f64]) -> ComplexMatrix {
    let n = values.len();
    ComplexMatrix::from_fn(n, n, |i, j| if i == j { c(values[i], 0.0) } else { c(0.0, 0.0) })
}

pub fn identity(n: usize) -> ComplexMatrix {
    ComplexMatrix::identity(n, n)
}

pub fn pauli_x() -> ComplexMatrix {
    real_matrix(2, 2, &[0.0, 1.0, 1.0, 0.0])
}

pub fn pauli_y() -> ComplexMatrix {
    ComplexMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)])
}

pub fn pauli_z() -> ComplexMatrix {
    real_matrix(2, 2, &[1.0, 0.0, 0.0, -1.0])
}

/// Largest absolute entry.
pub fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn is_finite(m: &ComplexMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn trace(m: &ComplexMatrix) -> Complex64 {
    m.diagonal().iter().sum()
}

pub fn commutator(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a * b - b * a
}

pub fn hermitian_defect(m: &ComplexMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

fn hermitize(m: &ComplexMatrix) -> ComplexMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Real Hilbert-Schmidt pairing `Re Tr(A^dagger B)`.
pub fn hs_inner(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch in hs_inner: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(hs_inner_unchecked(a, b))
}

pub(crate) fn hs_inner_unchecked(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Hilbert-Schmidt (Frobenius) norm.
pub fn hs_norm(a: &ComplexMatrix) -> f64 {
    hs_inner_unchecked(a, a).sqrt()
}

fn ensure_square_finite(m: &ComplexMatrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !is_finite(m) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// A Hermitian matrix. Construction hermitizes the input exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    matrix: ComplexMatrix,
}

impl HermitianOperator {
    /// Accepts matrices whose Hermitian defect is at most
    /// `HERMITIAN_INPUT_TOL * max(1, |m|_max)` and stores `(m + m^dagger)/2`.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        ensure_square_finite(&m, "Hermitian operator")?;
        let defect = hermitian_defect(&m);
        if defect > HERMITIAN_INPUT_TOL * max_abs(&m).max(1.0) {
            return Err(Error::InvalidInput(format!(
                "matrix is not Hermitian (defect {defect:e})"
            )));
        }
        Ok(Self { matrix: hermitize(&m) })
    }

    pub(crate) fn from_hermitian_unchecked(m: ComplexMatrix) -> Self {
        Self { matrix: hermitize(&m) }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            matrix: ComplexMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            matrix: self.matrix.scale(s),
        }
    }

    /// `U H U^dagger`.
    pub fn conjugate(&self, u: &UnitaryOperator) -> Self {
        Self::from_hermitian_unchecked(u.matrix() * &self.matrix * u.matrix().adjoint())
    }
}

/// A unitary matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryOperator {
    matrix: ComplexMatrix,
}

impl UnitaryOperator {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        ensure_square_finite(&m, "unitary operator")?;
        let defect = unitarity_defect(&m);
        if defect > UNITARY_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not unitary (defect {defect:e})"
            )));
        }
        Ok(Self { matrix: m })
    }

    pub(crate) fn from_unitary_unchecked(m: ComplexMatrix) -> Self {
        Self { matrix: m }
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Self {
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn compose(&self, other: &UnitaryOperator) -> Self {
        Self {
            matrix: &self.matrix * &other.matrix,
        }
    }

    pub fn defect(&self) -> f64 {
        unitarity_defect(&self.matrix)
    }
}

/// `|U^dagger U - I|_max`.
pub fn unitarity_defect(m: &ComplexMatrix) -> f64 {
    let n = m.ncols();
    max_abs(&(m.adjoint() * m - identity(n)))
}

/// Eigenvalues of a density operator in non-increasing order with their
/// degeneracy structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
    multiplicities: Vec<usize>,
    grouping_tol: f64,
}

impl Spectrum {
    /// Validates a probability vector sorted in non-increasing order and
    /// groups it. Groups are the transitive closure of `|p_i - p_j| <= tol`.
    pub fn new(values: Vec<f64>, grouping_tol: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("spectrum must be non-empty".into()));
        }
        if !(grouping_tol >= 0.0 && grouping_tol.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grouping tolerance must be finite and non-negative, got {grouping_tol}"
            )));
        }
        if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "spectrum values must be finite and non-negative".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("spectrum values must be non-increasing".into()));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > DENSITY_TRACE_TOL {
            return Err(Error::InvalidInput(format!("spectrum sums to {total}, expected 1")));
        }
        let multiplicities = group_sorted(&values, grouping_tol);
        Ok(Self {
            values,
            multiplicities,
            grouping_tol,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    pub fn grouping_tol(&self) -> f64 {
        self.grouping_tol
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index ranges of the multiplicity groups.
    pub fn groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.multiplicities
            .iter()
            .map(|&m| {
                let r = start..start + m;
                start += m;
                r
            })
            .collect()
    }

    /// `P(sigma) = Diag(sigma)`.
    pub fn diag_matrix(&self) -> ComplexMatrix {
        diag_real(&self.values)
    }

    /// Elementwise distance to another spectrum; `None` when lengths differ.
    pub fn max_deviation(&self, other: &Spectrum) -> Option<f64> {
        (self.len() == other.len()).then(|| {
            self.values
                .iter()
                .zip(&other.values)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
        })
    }
}

fn group_sorted(values: &[f64], tol: f64) -> Vec<usize> {
    let mut groups = vec![1usize];
    for w in values.windows(2) {
        if (w[0] - w[1]).abs() <= tol {
            *groups.last_mut().unwrap() += 1;
        } else {
            groups.push(1);
        }
    }
    groups
}

/// Hermitian, positive semidefinite, unit-trace matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: ComplexMatrix,
    spectrum: Spectrum,
}

impl DensityOperator {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        Self::with_grouping(m, DEFAULT_GROUPING_TOL)
    }

    pub fn with_grouping(m: ComplexMatrix, grouping_tol: f64) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(Error::InvalidDensity(format!(
                "must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !is_finite(&m) {
            return Err(Error::InvalidDensity("non-finite entries".into()));
        }
        let defect = hermitian_defect(&m);
        if defect > DENSITY_HERMITIAN_TOL {
            return Err(Error::InvalidDensity(format!("not Hermitian (defect {defect:e})")));
        }
        let tr = trace(&m);
        if (tr.re - 1.0).abs() > DENSITY_TRACE_TOL || tr.im.abs() > DENSITY_TRACE_TOL {
            return Err(Error::InvalidDensity(format!("trace is {}, expected 1", tr.re)));
        }
        let matrix = hermitize(&m);
        let (values, _) = eigh_raw(&matrix);
        let spectrum = spectrum_from_eigenvalues(&values, grouping_tol)?;
        Ok(Self { matrix, spectrum })
    }

    /// `|psi><psi|` for a (not necessarily normalized) non-zero vector.
    pub fn pure(psi: &[Complex64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if psi.is_empty() || norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidDensity("state vector must be finite and non-zero".into()));
        }
        let v = nalgebra::DVector::from_iterator(psi.len(), psi.iter().map(|z| z / norm));
        Self::new(&v * v.adjoint())
    }

    pub fn diagonal(probs: &[f64]) -> Result<Self> {
        Self::new(diag_real(probs))
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self::diagonal(&vec![1.0 / dim as f64; dim]).expect("maximally mixed state is valid")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    /// Spectrum grouped with the tolerance given at construction.
    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    /// `U rho U^dagger`.
    pub fn conjugate(&self, u: &UnitaryOperator) -> Result<Self> {
        let m = u.matrix() * &self.matrix * u.matrix().adjoint();
        Self::with_grouping(hermitize(&m), self.spectrum.grouping_tol)
    }

    /// Hilbert-Schmidt distance `|rho - other|_HS`.
    pub fn hs_distance(&self, other: &DensityOperator) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(hs_norm(&(&self.matrix - &other.matrix)))
    }

    pub fn is_pure(&self, tol: f64) -> bool {
        (self.spectrum.values()[0] - 1.0).abs() <= tol
    }
}

fn spectrum_from_eigenvalues(values: &[f64], grouping_tol: f64) -> Result<Spectrum> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -DENSITY_NEGATIVE_TOL {
        return Err(Error::InvalidDensity(format!("negative eigenvalue {min:e}")));
    }
    let clamped: Vec<f64> = values.iter().map(|p| p.max(0.0)).collect();
    Spectrum::new(clamped, grouping_tol).map_err(|e| Error::InvalidDensity(e.to_string()))
}

/// Spectrum of `rho` regrouped with `grouping_tol`.
pub fn spectrum_of(rho: &DensityOperator, grouping_tol: f64) -> Result<Spectrum> {
    let (values, _) = eigh_raw(rho.matrix());
    spectrum_from_eigenvalues(&values, grouping_tol)
}

/// Hermitian eigendecomposition `h = V diag(lambda) V^dagger` with
/// eigenvalues in non-increasing order.
///
/// Eigenvectors follow a fixed phase convention: the largest-magnitude
/// component of each column is real and positive (first such index on ties).
/// Exactly equal eigenvalues are ordered by the index of that component.
pub fn eigh(h: &HermitianOperator) -> (Vec<f64>, UnitaryOperator) {
    let (values, vectors) = eigh_raw(h.matrix());
    (values, UnitaryOperator::from_unitary_unchecked(vectors))
}

pub(crate) fn eigh_raw(m: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut vectors = eig.eigenvectors;
    let mut pivots = Vec::with_capacity(n);
    for j in 0..n {
        let mut col = vectors.column_mut(j);
        let max = col.iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
        let pivot = col.iter().position(|z| z.norm() >= max * (1.0 - 1e-12)).unwrap_or(0);
        let z = col[pivot];
        if z.norm() > 0.0 {
            let phase = z.conj() / z.norm();
            col.iter_mut().for_each(|x| *x *= phase);
            col[pivot] = c(col[pivot].re, 0.0);
        }
        pivots.push(pivot);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(pivots[a].cmp(&pivots[b]))
    });
    let values = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let sorted = ComplexMatrix::from_fn(n, n, |i, j| vectors[(i, order[j])]);
    (values, sorted)
}

/// `exp(-i t h)` through the eigendecomposition of `h`.
pub fn expm_skew(h: &HermitianOperator, t: f64) -> Result<UnitaryOperator> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("time must be finite, got {t}")));
    }
    Ok(Propagator::new(h).at(t))
}

/// Cached eigendecomposition of a generator for repeated exponentials.
#[derive(Debug, Clone)]
pub struct Propagator {
    values: Vec<f64>,
    vectors: ComplexMatrix,
}

impl Propagator {
    pub fn new(h: &HermitianOperator) -> Self {
        let (values, vectors) = eigh_raw(h.matrix());
        Self { values, vectors }
    }

    /// `exp(-i t h)`.
    pub fn at(&self, t: f64) -> UnitaryOperator {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lambda) in self.values.iter().enumerate() {
            let phase = Complex64::from_polar(1.0, -t * lambda);
            scaled.column_mut(j).iter_mut().for_each(|x| *x *= phase);
        }
        let m = scaled * self.vectors.adjoint();
        debug_assert_eq!(m.nrows(), n);
        UnitaryOperator::from_unitary_unchecked(m)
    }
}

/// Applies `f` to the eigenvalues of a Hermitian matrix.
pub(crate) fn hermitian_function(m: &ComplexMatrix, f: impl Fn(f64) -> f64) -> ComplexMatrix {
    let (values, vectors) = eigh_raw(&hermitize(m));
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let s = f(lambda);
        scaled.column_mut(j).iter_mut().for_each(|x| *x *= s);
    }
    scaled * vectors.adjoint()
}

/// Deterministic generator used for every seeded construction.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im)
    })
}

/// Gaussian real and imaginary parts, hermitized as `(M + M^dagger)/2`.
pub fn random_hermitian(dim: usize, seed: u64) -> HermitianOperator {
    let mut rng = seeded_rng(seed);
    HermitianOperator::from_hermitian_unchecked(gaussian_matrix(&mut rng, dim, dim))
}

/// Haar-distributed unitary (QR of a complex Ginibre matrix with the phases
/// of `R`'s diagonal divided out).
pub fn random_unitary(dim: usize, seed: u64) -> UnitaryOperator {
    haar_unitary(&mut seeded_rng(seed), dim)
}

pub(crate) fn haar_unitary(rng: &mut impl Rng, dim: usize) -> UnitaryOperator {
    let qr = gaussian_matrix(rng, dim, dim).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        let d = r[(j, j)];
        if d.norm() > 0.0 {
            let phase = d / d.norm();
            q.column_mut(j).iter_mut().for_each(|x| *x *= phase);
        }
    }
    UnitaryOperator::from_unitary_unchecked(q)
}

/// Random full-rank density operator: flat Dirichlet eigenvalues in a Haar
/// eigenbasis.
pub fn random_density(dim: usize, seed: u64) -> DensityOperator {
    let mut rng = seeded_rng(seed);
    let weights: Vec<f64> = (0..dim).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let u = haar_unitary(&mut rng, dim);
    density_with_spectrum(&probs, &u).expect("random density is valid")
}

/// Random pure state `|psi><psi|` with a Haar-random vector.
pub fn random_pure_density(dim: usize, seed: u64) -> DensityOperator {
    let mut rng = seeded_rng(seed);
    let v = gaussian_matrix(&mut rng, dim, 1);
    DensityOperator::pure(v.as_slice()).expect("random pure state is valid")
}

/// `U diag(p) U^dagger`, renormalized to unit trace.
pub fn density_with_spectrum(probs: &[f64], u: &UnitaryOperator) -> Result<DensityOperator> {
    let m = u.matrix() * diag_real(probs) * u.matrix().adjoint();
    let tr = trace(&m).re;
    DensityOperator::new(hermitize(&m.unscale(tr)))
}
