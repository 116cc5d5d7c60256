//! Linear-Gaussian latent models and the complexity of encoder/decoder pairs.
//!
//! Latents are `z ~ N(0, I_d)`. An [`Entangler`] is an orthogonal `Q`, so
//! `z' = Q z` has exactly the same law as `z`, and a decoder `G` applied to
//! either produces the same data distribution. The two representations differ
//! only in the maps needed to get there and back, which [`map_complexity`]
//! measures as a geodesic length from the identity.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{c, eigh_raw, seeded_rng, ComplexMatrix};

pub type RealMatrix = DMatrix<f64>;

/// Tolerance on `Q^T Q - I` for an entangler.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
/// Smallest singular value accepted for a generator or a complexity argument.
pub const MIN_SINGULAR_VALUE: f64 = 1e-10;
/// Round trips must reproduce the identity to this accuracy.
pub const ROUND_TRIP_TOL: f64 = 1e-10;
/// Complexity gaps below this are reported as indistinguishable.
pub const VERDICT_TOL: f64 = 1e-12;
/// Rotation angles within this of `pi` have no well-defined principal log.
pub const BRANCH_TOL: f64 = 1e-9;
/// Minimum sample count for the empirical invariance check.
pub const MIN_SAMPLES: usize = 1000;

const SAMPLE_CHUNK: usize = 1024;

fn max_abs(m: &RealMatrix) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn check_square(m: &RealMatrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Factorized standard Gaussian latent space of dimension `d > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    d: usize,
}

impl LatentSpec {
    pub fn new(d: usize) -> Result<Self> {
        if d <= 1 {
            return Err(Error::HypothesisViolation(format!(
                "latent dimension must exceed 1, got {d}"
            )));
        }
        Ok(Self { d })
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

/// Orthogonal map on the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Entangler {
    q: RealMatrix,
    seed: u64,
}

impl Entangler {
    pub fn new(q: RealMatrix, seed: u64) -> Result<Self> {
        check_square(&q, "entangler")?;
        let defect = max_abs(&(q.transpose() * &q - RealMatrix::identity(q.nrows(), q.nrows())));
        if defect > ORTHOGONALITY_TOL {
            return Err(Error::InvalidInput(format!(
                "entangler is not orthogonal: max |Q^T Q - I| = {defect:e}"
            )));
        }
        Ok(Self { q, seed })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            q: RealMatrix::identity(d, d),
            seed: 0,
        }
    }

    pub fn q(&self) -> &RealMatrix {
        &self.q
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
}

/// Invertible linear decoder `x = G z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGenerator {
    g: RealMatrix,
}

impl LinearGenerator {
    pub fn new(g: RealMatrix) -> Result<Self> {
        check_square(&g, "generator")?;
        let smallest = g.singular_values().min();
        if smallest < MIN_SINGULAR_VALUE {
            return Err(Error::InvalidInput(format!(
                "generator is numerically singular: smallest singular value {smallest:e}"
            )));
        }
        Ok(Self { g })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            g: RealMatrix::identity(d, d),
        }
    }

    pub fn g(&self) -> &RealMatrix {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }
}

/// Encoder/decoder pair for one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    pub encoder: RealMatrix,
    pub decoder: RealMatrix,
    pub complexity: f64,
}

/// `Q = exp(A)` for a seeded Gaussian antisymmetric `A`, scaled so that its
/// largest rotation angle is `angle_scale`.
pub fn make_entangler(d: usize, seed: u64, angle_scale: f64) -> Result<Entangler> {
    let spec = LatentSpec::new(d)?;
    if !(0.0..=std::f64::consts::PI).contains(&angle_scale) {
        return Err(Error::InvalidInput(format!(
            "angle_scale must lie in [0, pi], got {angle_scale}"
        )));
    }
    if angle_scale == 0.0 {
        return Ok(Entangler {
            q: RealMatrix::identity(d, d),
            seed,
        });
    }
    let mut rng = seeded_rng(seed);
    let g = RealMatrix::from_fn(spec.d(), spec.d(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = (&g - g.transpose()) * 0.5;

    // iA is Hermitian with eigenvalues +-theta_k.
    let ia = ComplexMatrix::from_fn(d, d, |i, j| c(0.0, a[(i, j)]));
    let (thetas, _) = eigh_raw(&ia);
    let largest = thetas.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
    if largest == 0.0 {
        return Err(Error::NumericalConsistency(
            "random generator of rotations vanished".into(),
        ));
    }
    let ia = ia * c(angle_scale / largest, 0.0);
    let (values, vectors) = eigh_raw(&ia);
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let phase = c(0.0, -lambda).exp();
        scaled.column_mut(j).iter_mut().for_each(|x| *x *= phase);
    }
    let q = (scaled * vectors.adjoint()).map(|z| z.re);
    Entangler::new(nearest_orthogonal(&q), seed)
}

fn nearest_orthogonal(m: &RealMatrix) -> RealMatrix {
    let svd = m.clone().svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v_t requested")
}

/// Polar factors `M = Q S` with `Q` orthogonal and `S` symmetric positive
/// definite, plus the singular values of `M`.
fn polar(m: &RealMatrix) -> Result<(RealMatrix, Vec<f64>)> {
    check_square(m, "map")?;
    let svd = m.clone().svd(true, true);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smallest = sigma.iter().fold(f64::INFINITY, |acc, s| acc.min(*s));
    if smallest < MIN_SINGULAR_VALUE {
        return Err(Error::InvalidInput(format!(
            "map is not invertible: smallest singular value {smallest:e}"
        )));
    }
    let q = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    Ok((q, sigma))
}

/// Geodesic length from the identity through the polar factors:
/// `sqrt(|log Q|_F^2 + |log S|_F^2)`.
///
/// `|log S|_F^2` is the sum of squared log singular values. `Q` is normal, so
/// `|log Q|_F^2` is the sum of squared arguments of its eigenvalues.
pub fn map_complexity(m: &RealMatrix) -> Result<f64> {
    let (q, sigma) = polar(m)?;
    let stretch: f64 = sigma.iter().map(|s| s.ln().powi(2)).sum();
    let mut rotation = 0.0;
    for lambda in q.complex_eigenvalues().iter() {
        let angle = lambda.arg();
        if angle.abs() > std::f64::consts::PI - BRANCH_TOL {
            return Err(Error::BranchAmbiguity { angle: angle.abs() });
        }
        rotation += angle * angle;
    }
    Ok((rotation + stretch).sqrt())
}

/// Exact and sampled checks that `Q z` has the law of `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistributionCheck {
    /// `max |Q Q^T - I|`.
    pub analytic_gap: f64,
    /// Max-norm difference of sample mean and covariance between `z` and `Q z`.
    pub empirical_gap: f64,
}

struct Moments {
    sum: Vec<f64>,
    outer: RealMatrix,
}

impl Moments {
    fn zero(d: usize) -> Self {
        Self {
            sum: vec![0.0; d],
            outer: RealMatrix::zeros(d, d),
        }
    }

    fn add(&mut self, v: &[f64]) {
        for i in 0..v.len() {
            self.sum[i] += v[i];
            for j in 0..v.len() {
                self.outer[(i, j)] += v[i] * v[j];
            }
        }
    }

    fn merge(mut self, other: &Moments) -> Self {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.outer += &other.outer;
        self
    }

    fn mean_cov(&self, n: usize) -> (Vec<f64>, RealMatrix) {
        let nf = n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let d = mean.len();
        let cov = RealMatrix::from_fn(d, d, |i, j| (self.outer[(i, j)] - nf * mean[i] * mean[j]) / (nf - 1.0));
        (mean, cov)
    }
}

/// Samples come in fixed chunks, each from its own ChaCha stream of `seed`,
/// so the result does not depend on thread scheduling.
pub fn check_distribution_invariance(e: &Entangler, n_samples: usize, seed: u64) -> Result<DistributionCheck> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    let d = e.dim();
    let q = e.q();
    let analytic_gap = max_abs(&(q * q.transpose() - RealMatrix::identity(d, d)));

    let chunks = n_samples.div_ceil(SAMPLE_CHUNK);
    let partial: Vec<(Moments, Moments)> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng: ChaCha8Rng = seeded_rng(seed);
            rng.set_stream(k as u64);
            let count = SAMPLE_CHUNK.min(n_samples - k * SAMPLE_CHUNK);
            let mut plain = Moments::zero(d);
            let mut mixed = Moments::zero(d);
            let mut z = nalgebra::DVector::<f64>::zeros(d);
            for _ in 0..count {
                z.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                let qz = q * &z;
                plain.add(z.as_slice());
                mixed.add(qz.as_slice());
            }
            (plain, mixed)
        })
        .collect();
    let (plain, mixed) = partial
        .iter()
        .fold((Moments::zero(d), Moments::zero(d)), |(a, b), (pa, pb)| {
            (a.merge(pa), b.merge(pb))
        });

    let (m1, c1) = plain.mean_cov(n_samples);
    let (m2, c2) = mixed.mean_cov(n_samples);
    let mean_gap = m1.iter().zip(&m2).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    let cov_gap = max_abs(&(c1 - c2));
    Ok(DistributionCheck {
        analytic_gap,
        empirical_gap: mean_gap.max(cov_gap),
    })
}

/// Round trip through the representation `z' = Q z` (`z` itself when `ent`
/// is `None`): encoder `Q G^-1`, decoder `G Q^T`.
pub fn round_trip_complexity(gen: &LinearGenerator, ent: Option<&Entangler>) -> Result<RoundTrip> {
    let d = gen.dim();
    let q = match ent {
        Some(e) if e.dim() != d => {
            return Err(Error::InvalidInput(format!(
                "entangler dimension {} does not match generator dimension {d}",
                e.dim()
            )))
        }
        Some(e) => e.q().clone(),
        None => RealMatrix::identity(d, d),
    };
    let g_inv = gen
        .g()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("generator is not invertible".into()))?;
    let encoder = &q * g_inv;
    let decoder = gen.g() * q.transpose();
    let defect = max_abs(&(&decoder * &encoder - RealMatrix::identity(d, d)));
    if defect > ROUND_TRIP_TOL {
        return Err(Error::NumericalConsistency(format!(
            "decoder after encoder misses the identity by {defect:e}"
        )));
    }
    let complexity = map_complexity(&encoder)? + map_complexity(&decoder)?;
    Ok(RoundTrip {
        encoder,
        decoder,
        complexity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Z,
    ZPrime,
    Indistinguishable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwinReport {
    pub complexity_z: f64,
    pub complexity_zprime: f64,
    /// `complexity_zprime - complexity_z`.
    pub gap: f64,
    /// `max |(G Q^T)(G Q^T)^T - G G^T|`: the decoders alone generate the same data.
    pub decoder_gap: f64,
    pub verdict: Verdict,
    #[serde(skip)]
    pub z: RoundTrip,
    #[serde(skip)]
    pub zprime: RoundTrip,
}

/// Compares the plain and the entangled representation of the same data.
pub fn discriminate_representations(gen: &LinearGenerator, ent: &Entangler) -> Result<TwinReport> {
    let z = round_trip_complexity(gen, None)?;
    let zprime = round_trip_complexity(gen, Some(ent))?;
    let gap = zprime.complexity - z.complexity;
    let verdict = if gap.abs() < VERDICT_TOL {
        Verdict::Indistinguishable
    } else if gap > 0.0 {
        Verdict::Z
    } else {
        Verdict::ZPrime
    };
    let cov_z = &z.decoder * z.decoder.transpose();
    let cov_zprime = &zprime.decoder * zprime.decoder.transpose();
    Ok(TwinReport {
        complexity_z: z.complexity,
        complexity_zprime: zprime.complexity,
        gap,
        decoder_gap: max_abs(&(cov_zprime - cov_z)),
        verdict,
        z,
        zprime,
    })
}

/// Planar rotation by `theta`.
pub fn rotation(theta: f64) -> RealMatrix {
    let (s, co) = theta.sin_cos();
    RealMatrix::from_row_slice(2, 2, &[co, -s, s, co])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn diag(values: &[f64]) -> RealMatrix {
        RealMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(values))
    }

    #[test]
    fn latent_dimension_one_is_rejected() {
        assert!(matches!(LatentSpec::new(1), Err(Error::HypothesisViolation(_))));
        assert!(matches!(make_entangler(1, 0, 0.5), Err(Error::HypothesisViolation(_))));
        assert!(matches!(make_entangler(0, 0, 0.5), Err(Error::HypothesisViolation(_))));
    }

    #[test]
    fn zero_angle_gives_identity() {
        let e = make_entangler(4, 3, 0.0).unwrap();
        assert_eq!(e.q(), &RealMatrix::identity(4, 4));
    }

    #[test]
    fn out_of_range_angle_is_rejected() {
        assert!(make_entangler(2, 0, -0.1).is_err());
        assert!(make_entangler(2, 0, 3.2).is_err());
        assert!(make_entangler(2, 0, f64::NAN).is_err());
    }

    #[test]
    fn planar_entangler_is_a_rotation_by_the_scale() {
        for seed in 0..5 {
            let e = make_entangler(2, seed, FRAC_PI_4).unwrap();
            let q = e.q();
            let theta = q[(1, 0)].atan2(q[(0, 0)]);
            assert!((theta.abs() - FRAC_PI_4).abs() < 1e-12, "seed {seed}: {theta}");
            assert!((q - rotation(theta)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn entanglers_are_orthogonal_and_not_identity() {
        for d in 2..6 {
            for seed in 0..4 {
                let e = make_entangler(d, seed, 1.3).unwrap();
                let q = e.q();
                assert!(max_abs(&(q.transpose() * q - RealMatrix::identity(d, d))) <= 1e-12);
                assert!((q.determinant() - 1.0).abs() <= 1e-10);
                assert!(max_abs(&(q - RealMatrix::identity(d, d))) > 0.1);
            }
        }
    }

    #[test]
    fn largest_rotation_angle_matches_scale() {
        let e = make_entangler(5, 9, 2.0).unwrap();
        let largest = e
            .q()
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |acc, l| acc.max(l.arg().abs()));
        assert!((largest - 2.0).abs() < 1e-10);
    }

    #[test]
    fn identity_entangler_has_no_gaps() {
        let check = check_distribution_invariance(&Entangler::identity(3), 5000, 1).unwrap();
        assert_eq!(check.analytic_gap, 0.0);
        assert_eq!(check.empirical_gap, 0.0);
    }

    #[test]
    fn sampled_moments_agree_within_monte_carlo_scale() {
        let e = make_entangler(3, 5, 1.0).unwrap();
        let check = check_distribution_invariance(&e, 10_000, 5).unwrap();
        assert!(check.analytic_gap <= 1e-12);
        assert!(check.empirical_gap <= 0.15, "{}", check.empirical_gap);
    }

    #[test]
    fn too_few_samples_are_rejected() {
        assert!(check_distribution_invariance(&Entangler::identity(2), 999, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let e = make_entangler(4, 2, 0.9).unwrap();
        let a = check_distribution_invariance(&e, 3000, 8).unwrap();
        let b = check_distribution_invariance(&e, 3000, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(map_complexity(&RealMatrix::identity(3, 3)).unwrap(), 0.0);
        let r = map_complexity(&rotation(FRAC_PI_4)).unwrap();
        assert!((r - FRAC_PI_4 * 2f64.sqrt()).abs() < 1e-12);
        let s = map_complexity(&diag(&[2.0, 0.5])).unwrap();
        assert!((s - 2f64.sqrt() * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn half_turn_is_a_branch_ambiguity() {
        assert!(matches!(
            map_complexity(&rotation(PI)),
            Err(Error::BranchAmbiguity { .. })
        ));
        // A reflection has an eigenvalue -1.
        assert!(matches!(
            map_complexity(&diag(&[1.0, -1.0])),
            Err(Error::BranchAmbiguity { .. })
        ));
    }

    #[test]
    fn singular_map_is_invalid() {
        assert!(matches!(
            map_complexity(&diag(&[1.0, 0.0])),
            Err(Error::InvalidInput(_))
        ));
        assert!(LinearGenerator::new(diag(&[1.0, 1e-12])).is_err());
    }

    #[test]
    fn complexity_is_inversion_symmetric() {
        let m = RealMatrix::from_row_slice(3, 3, &[1.2, 0.3, -0.4, 0.1, 0.9, 0.2, -0.3, 0.5, 1.1]);
        let a = map_complexity(&m).unwrap();
        let b = map_complexity(&m.clone().try_inverse().unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn identity_round_trip_costs_nothing() {
        let rt = round_trip_complexity(&LinearGenerator::identity(2), None).unwrap();
        assert_eq!(rt.complexity, 0.0);
    }

    #[test]
    fn rotated_round_trip_pays_twice() {
        let e = Entangler::new(rotation(FRAC_PI_4), 0).unwrap();
        let rt = round_trip_complexity(&LinearGenerator::identity(2), Some(&e)).unwrap();
        assert!((rt.complexity - 2.0 * FRAC_PI_4 * 2f64.sqrt()).abs() < 1e-12);
        let sum = map_complexity(&rt.encoder).unwrap() + map_complexity(&rt.decoder).unwrap();
        assert!((rt.complexity - sum).abs() <= 1e-12);
    }

    #[test]
    fn twin_report_for_plain_generator() {
        let e = Entangler::new(rotation(FRAC_PI_4), 0).unwrap();
        let report = discriminate_representations(&LinearGenerator::identity(2), &e).unwrap();
        assert_eq!(report.verdict, Verdict::Z);
        assert!((report.gap - 2.0 * FRAC_PI_4 * 2f64.sqrt()).abs() < 1e-12);
        assert!(report.decoder_gap <= 1e-12);
    }

    #[test]
    fn twin_report_for_anisotropic_generator() {
        let gen = LinearGenerator::new(diag(&[2.0, 0.5])).unwrap();
        let e = Entangler::new(rotation(PI / 3.0), 0).unwrap();
        let report = discriminate_representations(&gen, &e).unwrap();
        assert_eq!(report.verdict, Verdict::Z);
        assert!((report.complexity_z - 1.9605162869370942).abs() < 1e-12);
        assert!((report.complexity_zprime - 3.55198617694422).abs() < 1e-10);
        assert!(report.decoder_gap <= 1e-12);
    }

    #[test]
    fn identity_entangler_is_indistinguishable() {
        let gen = LinearGenerator::new(diag(&[2.0, 0.5])).unwrap();
        let report = discriminate_representations(&gen, &Entangler::identity(2)).unwrap();
        assert_eq!(report.verdict, Verdict::Indistinguishable);
        assert_eq!(report.gap, 0.0);
    }

    #[test]
    fn report_serializes_only_the_numbers() {
        let e = Entangler::new(rotation(FRAC_PI_4), 0).unwrap();
        let report = discriminate_representations(&LinearGenerator::identity(2), &e).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
        assert_eq!(v["verdict"], "z");
    }
}
