//! Dense-matrix utilities with explicit tolerance policies.
//!
//! Everything here operates on `f64` matrices small enough for direct
//! factorizations (S <= 64). Rank thresholds are relative to the largest
//! singular value so the same profile works across scenario magnitudes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::error::{Error, Result};

/// Tolerances shared by rank tests, PSD checks and solver stopping rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceProfile {
    pub rank_rel_tol: f64,
    pub psd_eig_tol: f64,
    pub residual_tol: f64,
}

impl Default for ToleranceProfile {
    fn default() -> Self {
        Self {
            rank_rel_tol: 1e-10,
            psd_eig_tol: 1e-9,
            residual_tol: 1e-8,
        }
    }
}

impl ToleranceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.rank_rel_tol <= 0.0 || self.psd_eig_tol <= 0.0 || self.residual_tol <= 0.0 {
            return Err(Error::Invalid(
                "all tolerances must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// SVD `m = U * diag(sigma) * V^T` with the singular values sorted descending.
///
/// One refinement pass re-factors `U^T m V` (nearly diagonal), which knocks
/// the occasional ~1e-12 reconstruction outlier of the plain factorization
/// down to rounding level.
pub fn svd_descending(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if !all_finite(m) {
        return Err(Error::NonFinite("svd input"));
    }
    let (u0, _, v0) = raw_svd_descending(m);
    let g = u0.transpose() * m * &v0;
    let (ug, sigma, vg) = raw_svd_descending(&g);
    Ok((u0 * ug, sigma, v0 * vg))
}

fn raw_svd_descending(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma = svd.singular_values;

    // nalgebra does not promise an ordering; sort with a permutation applied
    // to the factors.
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());

    let mut sigma_sorted = DVector::zeros(sigma.len());
    let mut u_sorted = DMatrix::zeros(u.nrows(), u.ncols());
    let mut v = DMatrix::zeros(v_t.ncols(), v_t.nrows());
    for (new_idx, &old_idx) in order.iter().enumerate() {
        sigma_sorted[new_idx] = sigma[old_idx];
        u_sorted.set_column(new_idx, &u.column(old_idx));
        v.set_column(new_idx, &v_t.row(old_idx).transpose());
    }
    (u_sorted, sigma_sorted, v)
}

/// Count of singular values above `rank_rel_tol * sigma_max`.
pub fn numeric_rank(m: &DMatrix<f64>, tol: &ToleranceProfile) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sigma = m.clone().singular_values();
    let max = sigma.max();
    if max <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > tol.rank_rel_tol * max).count()
}

/// Complex-valued rank test used by the eigenvalue-wise PBH checks.
///
/// Works on the Hermitian Gram matrix instead of a complex SVD: the SVD
/// iteration has no iteration cap and can stall on structured pencils, while
/// the symmetric eigensolver is unconditionally convergent. Squaring costs
/// half the digits, so the cut sits at 1e-8 relative — PBH rank drops are
/// structural (exact zeros against order-one entries), not marginal.
///
/// `scale` anchors the threshold: a pencil like `A - lambda I` evaluated at
/// an eigenvalue of `A` is numerically all-noise, and a purely relative cut
/// would count every rounding-level singular value as signal. Passing the
/// magnitude of the source data makes near-zero pencils rank 0.
pub fn numeric_rank_complex_scaled(
    m: &DMatrix<Complex<f64>>,
    tol: &ToleranceProfile,
    scale: f64,
) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let gram = m.adjoint() * m;
    let eigs = gram.symmetric_eigen().eigenvalues;
    let sigma_max = eigs.iter().cloned().fold(0.0f64, f64::max).max(0.0).sqrt();
    let reference = sigma_max.max(scale);
    if reference <= 0.0 {
        return 0;
    }
    let cut = tol.rank_rel_tol.max(1e-8) * reference;
    eigs.iter().filter(|&&e| e > cut * cut).count()
}

fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() / scale
}

/// `(M + M^T) / 2`; SA iterates drift asymmetric at rounding level, so PSD
/// tests and solver updates symmetrize first.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// Returns (eigenvectors as columns, eigenvalues).
pub fn sym_eigen_descending(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (new_idx, &old_idx) in order.iter().enumerate() {
        vals[new_idx] = eig.eigenvalues[old_idx];
        vecs.set_column(new_idx, &eig.eigenvectors.column(old_idx));
    }
    (vecs, vals)
}

/// True iff the minimum eigenvalue is >= `-psd_eig_tol * max(1, |m|)`.
pub fn is_psd(m: &DMatrix<f64>, tol: &ToleranceProfile) -> Result<bool> {
    if !all_finite(m) {
        return Err(Error::NonFinite("psd test input"));
    }
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            field: "is_psd".into(),
            detail: format!("matrix is {}x{}, expected square", m.nrows(), m.ncols()),
        });
    }
    if relative_asymmetry(m) > 1e-12 {
        return Err(Error::Asymmetric("psd test input"));
    }
    let (_, vals) = sym_eigen_descending(m);
    let scale = spectral_norm(m).max(1.0);
    Ok(vals[vals.len() - 1] >= -tol.psd_eig_tol * scale)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (_, vals) = sym_eigen_descending(m);
    vals[vals.len() - 1]
}

/// All eigenvalues of a square matrix, with bounded work.
///
/// The stock QR iteration has no iteration cap and spins forever on inputs
/// like `c*I + rounding noise` (every shift is equally good, nothing
/// deflates). Ladder: symmetric matrices go through the unconditionally
/// convergent symmetric solver; everything else gets a capped Schur
/// iteration, retried under a tiny seeded perturbation if it stalls. The
/// perturbation moves eigenvalues by about its own size, far below the
/// tolerances of any downstream rank test.
pub fn eigenvalues(a: &DMatrix<f64>) -> DVector<Complex<f64>> {
    use nalgebra::Schur;
    let n = a.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    if relative_asymmetry(a) <= 1e-12 {
        let (_, vals) = sym_eigen_descending(a);
        return vals.map(|v| Complex::new(v, 0.0));
    }
    if let Some(schur) = Schur::try_new(a.clone(), f64::EPSILON, 20_000) {
        return schur.complex_eigenvalues();
    }
    let scale = a.amax().max(1e-300);
    let mut rng_state = 0x9e3779b97f4a7c15u64;
    let mut noise = || {
        // splitmix64, mapped to [-1, 1); keeps the fallback deterministic.
        rng_state = rng_state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = rng_state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z as f64 / u64::MAX as f64) * 2.0 - 1.0
    };
    for magnitude in [1e-12, 1e-10, 1e-8] {
        let perturbed = a + DMatrix::from_fn(n, n, |_, _| noise() * magnitude * scale);
        if let Some(schur) = Schur::try_new(perturbed, f64::EPSILON, 20_000) {
            return schur.complex_eigenvalues();
        }
    }
    // Should be unreachable for the matrix sizes this crate handles.
    a.diagonal().map(|v| Complex::new(v, 0.0))
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}

/// Symmetric PSD square root via eigendecomposition; negative rounding-level
/// eigenvalues are clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vecs, vals) = sym_eigen_descending(m);
    let d = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    &vecs * d * vecs.transpose()
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inv_sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vecs, vals) = sym_eigen_descending(m);
    if vals[vals.len() - 1] <= 0.0 {
        return Err(Error::NotPd {
            field: "inverse square root input".into(),
        });
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Ok(&vecs * d * vecs.transpose())
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix, with the rank cut
/// taken from the tolerance profile. Also returns the condition number of the
/// retained spectrum.
pub fn pinv_psd(m: &DMatrix<f64>, tol: &ToleranceProfile) -> (DMatrix<f64>, f64) {
    let (vecs, vals) = sym_eigen_descending(m);
    let max = vals.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return (DMatrix::zeros(m.nrows(), m.ncols()), 1.0);
    }
    let cut = tol.rank_rel_tol * max;
    let mut min_kept = max;
    let inv = vals.map(|v| {
        if v > cut {
            min_kept = min_kept.min(v);
            1.0 / v
        } else {
            0.0
        }
    });
    let cond = max / min_kept;
    (&vecs * DMatrix::from_diagonal(&inv) * vecs.transpose(), cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn svd_identity_has_unit_spectrum() {
        let (_, sigma, _) = svd_descending(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(sigma.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn svd_reorders_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 1.0]));
        let (_, sigma, _) = svd_descending(&m).unwrap();
        assert_relative_eq!(sigma[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(sigma[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(sigma[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn svd_reconstructs_random_rect() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 4, 3);
        let (u, sigma, v) = svd_descending(&m).unwrap();
        let rebuilt = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
        assert!(spectral_norm(&(&rebuilt - &m)) < 1e-12 * spectral_norm(&m).max(1.0));
    }

    #[test]
    fn svd_reconstructs_1000_random_matrices() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let r = rng.gen_range(1..=8);
            let c = rng.gen_range(1..=8);
            let m = random_matrix(&mut rng, r, c);
            let (u, sigma, v) = svd_descending(&m).unwrap();
            let rebuilt = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
            let gap = spectral_norm(&(&rebuilt - &m));
            assert!(gap <= 1e-12 * spectral_norm(&m).max(1.0), "gap {gap}");
            for i in 1..sigma.len() {
                assert!(sigma[i - 1] >= sigma[i]);
            }
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = DMatrix::from_element(2, 2, f64::NAN);
        assert!(svd_descending(&m).is_err());
    }

    #[test]
    fn rank_of_zero_matrix_is_zero() {
        let tol = ToleranceProfile::default();
        assert_eq!(numeric_rank(&DMatrix::zeros(2, 2), &tol), 0);
    }

    #[test]
    fn rank_of_identity_is_full() {
        let tol = ToleranceProfile::default();
        assert_eq!(numeric_rank(&DMatrix::identity(5, 5), &tol), 5);
    }

    #[test]
    fn rank_of_tall_input_matrix() {
        // 3x2 input matrix used throughout the bundled scenarios.
        let b = DMatrix::from_row_slice(3, 2, &[1.1, 0.2, -0.2, 0.6, -0.3, 0.2]);
        assert_eq!(numeric_rank(&b, &ToleranceProfile::default()), 2);
    }

    #[test]
    fn psd_accepts_identity_rejects_indefinite() {
        let tol = ToleranceProfile::default();
        assert!(is_psd(&DMatrix::identity(3, 3), &tol).unwrap());
        let ind = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(!is_psd(&ind, &tol).unwrap());
    }

    #[test]
    fn psd_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            is_psd(&m, &ToleranceProfile::default()),
            Err(Error::Asymmetric(_))
        ));
    }

    #[test]
    fn radius_and_norm_basics() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -1.2]));
        assert_relative_eq!(spectral_radius(&d), 1.2, epsilon = 1e-12);
        // 90 degree rotation: radius 1 (complex pair), norm 1.
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_relative_eq!(spectral_radius(&rot), 1.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_norm(&rot), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bundled_plant_matrix_is_unstable() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.01, -1.02, 0.3, -0.1, 1.01, 0.2, -0.5, 0.1, 0.2],
        );
        assert!(spectral_radius(&a) > 1.0);
    }

    #[test]
    fn inv_sqrt_inverts_sqrt() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = random_matrix(&mut rng, 3, 3);
        let pd = &g * g.transpose() + DMatrix::identity(3, 3);
        let s = inv_sqrt_pd(&pd).unwrap();
        let should_be_eye = &s * &pd * &s;
        assert!(spectral_norm(&(&should_be_eye - DMatrix::identity(3, 3))) < 1e-10);
    }

    proptest! {
        #[test]
        fn rank_never_drops_when_appending_column(seed in 0u64..500, r in 1usize..6, c in 1usize..5) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, r, c);
            let extra = random_matrix(&mut rng, r, 1);
            let mut wide = DMatrix::zeros(r, c + 1);
            wide.view_mut((0, 0), (r, c)).copy_from(&m);
            wide.set_column(c, &extra.column(0));
            let tol = ToleranceProfile::default();
            prop_assert!(numeric_rank(&wide, &tol) >= numeric_rank(&m, &tol));
        }

        #[test]
        fn norm_dominates_radius(seed in 0u64..500, n in 1usize..6) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, n);
            prop_assert!(spectral_norm(&a) + 1e-12 >= spectral_radius(&a));
        }
    }
}
