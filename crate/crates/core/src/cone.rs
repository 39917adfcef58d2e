//! Controllable/uncontrollable splitting of a PSD value-function kernel.
//!
//! For one channel realization the effective input is
//! `Psi = delta * B * H * (delta * H'MH + R)^(-1/2)`. A kernel P splits as
//! `P = P_c + P_uc` where `Psi Psi' * P_uc = 0` (the part the input can never
//! touch) and `P_c` has the same kernel as `Psi Psi' * P_c` (the part fully
//! exposed to the input).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ChannelDraw, CostWeights, PlantModel};
use crate::numerics::{self, ToleranceProfile};

/// The effective input matrix of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveInput {
    pub psi: DMatrix<f64>,
}

/// Rotation basis of one slot: `Psi Psi' = V' diag(lambda) V` with the
/// spectrum descending; `gamma` counts its nonzero part.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompBasis {
    /// Rows are the eigendirections of `Psi Psi'`.
    pub v: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub gamma: usize,
}

impl DecompBasis {
    /// Diagonal projector with `gamma` leading ones.
    pub fn pi(&self) -> DMatrix<f64> {
        let s = self.v.nrows();
        DMatrix::from_fn(s, s, |i, j| if i == j && i < self.gamma { 1.0 } else { 0.0 })
    }
}

/// The two PSD parts and the coupling block that ties them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeSplit {
    pub p_c: DMatrix<f64>,
    pub p_uc: DMatrix<f64>,
    pub sigma_coupling: DMatrix<f64>,
}

/// `Psi = delta * B * H * (delta * H'MH + R)^(-1/2)` with the symmetric
/// positive-definite inverse root. R being PD keeps the root well-defined
/// even at delta = 0, where Psi collapses to zero.
pub fn effective_input(
    model: &PlantModel,
    draw: &ChannelDraw,
    weights: &CostWeights,
) -> EffectiveInput {
    let s = model.state_dim();
    let n_t = draw.h.ncols();
    if !draw.delta {
        return EffectiveInput { psi: DMatrix::zeros(s, n_t) };
    }
    let inner = draw.h.transpose() * &weights.m * &draw.h + &weights.r;
    let root = numerics::inv_sqrt_pd(&inner).expect("delta H'MH + R is PD because R is PD");
    EffectiveInput { psi: &model.b * &draw.h * root }
}

/// Eigendecomposition of `Psi Psi'`, spectrum descending.
pub fn decomp_basis(psi: &EffectiveInput, tol: &ToleranceProfile) -> DecompBasis {
    let gram = &psi.psi * psi.psi.transpose();
    let (vecs, vals) = numerics::sym_eigen_descending(&gram);
    let lambda = vals.map(|v| v.max(0.0));
    let max = lambda.iter().cloned().fold(0.0, f64::max);
    let gamma = if max <= 0.0 {
        0
    } else {
        lambda.iter().filter(|&&l| l > tol.rank_rel_tol * max).count()
    };
    DecompBasis { v: vecs.transpose(), lambda, gamma }
}

/// Split a PSD kernel into its controllable and uncontrollable parts for the
/// slot described by `basis`.
///
/// The coupling block is `Sigma = pinv(P_tilde_gamma) * P_tilde_offdiag` with
/// `P_tilde = V P V'`. A plain inverse of the leading block would break down
/// for PSD-but-singular kernels; the pseudo-inverse coincides with it in the
/// nonsingular case and extends the split continuously otherwise.
pub fn cone_decompose(
    p: &DMatrix<f64>,
    basis: &DecompBasis,
    tol: &ToleranceProfile,
) -> Result<ConeSplit> {
    let s = p.nrows();
    if !numerics::is_psd(p, tol)? {
        return Err(Error::NotPsd("cone decomposition input"));
    }
    let gamma = basis.gamma;
    if gamma == 0 {
        return Ok(ConeSplit {
            p_c: DMatrix::zeros(s, s),
            p_uc: p.clone(),
            sigma_coupling: DMatrix::zeros(0, s),
        });
    }
    if gamma == s {
        return Ok(ConeSplit {
            p_c: p.clone(),
            p_uc: DMatrix::zeros(s, s),
            sigma_coupling: DMatrix::zeros(s, 0),
        });
    }
    let p_tilde = &basis.v * p * basis.v.transpose();
    let head = p_tilde.view((0, 0), (gamma, gamma)).into_owned();
    let offdiag = p_tilde.view((0, gamma), (gamma, s - gamma)).into_owned();
    let tail = p_tilde.view((gamma, gamma), (s - gamma, s - gamma)).into_owned();

    let (head_pinv, cond) = numerics::pinv_psd(&head, tol);
    if cond > 1e12 {
        eprintln!(
            "warning: leading {gamma}x{gamma} block of the rotated kernel is ill-conditioned \
             (cond {cond:.3e}); coupling block computed through its pseudo-inverse"
        );
    }
    let sigma = head_pinv * &offdiag;

    let head_sigma = &head * &sigma;
    let mut p_c_rot = DMatrix::zeros(s, s);
    p_c_rot.view_mut((0, 0), (gamma, gamma)).copy_from(&head);
    p_c_rot.view_mut((0, gamma), (gamma, s - gamma)).copy_from(&head_sigma);
    p_c_rot
        .view_mut((gamma, 0), (s - gamma, gamma))
        .copy_from(&head_sigma.transpose());
    p_c_rot
        .view_mut((gamma, gamma), (s - gamma, s - gamma))
        .copy_from(&(sigma.transpose() * &head_sigma));

    // In rotated coordinates the uncontrollable part is the Schur complement
    // of the leading block, padded with zeros.
    let mut p_uc_rot = DMatrix::zeros(s, s);
    p_uc_rot
        .view_mut((gamma, gamma), (s - gamma, s - gamma))
        .copy_from(&(tail - sigma.transpose() * &head_sigma));

    let p_c = numerics::symmetrize(&(basis.v.transpose() * p_c_rot * &basis.v));
    let p_uc = numerics::symmetrize(&(basis.v.transpose() * p_uc_rot * &basis.v));
    Ok(ConeSplit { p_c, p_uc, sigma_coupling: sigma })
}

/// Sample-average residual of the split form of the kernel equation: each
/// draw contributes `A' P_uc A` plus the Riccati-type term driven by `P_c`
/// alone; adding Q and subtracting P gives the residual. Used as a
/// cross-check against the direct residual, with which it agrees exactly.
pub fn decomposed_nme_residual(
    p: &DMatrix<f64>,
    sample_set: &[ChannelDraw],
    model: &PlantModel,
    weights: &CostWeights,
    tol: &ToleranceProfile,
) -> Result<DMatrix<f64>> {
    let s = model.state_dim();
    let mut acc = DMatrix::zeros(s, s);
    for draw in sample_set {
        let basis = decomp_basis(&effective_input(model, draw, weights), tol);
        let split = cone_decompose(p, &basis, tol)?;
        acc += model.a.transpose() * &split.p_uc * &model.a;
        acc += model.a.transpose() * &split.p_c * &model.a;
        if draw.delta {
            let bh = &model.b * &draw.h;
            let inner = bh.transpose() * &split.p_c * &bh
                + draw.h.transpose() * &weights.m * &draw.h
                + &weights.r;
            let gain = inner
                .cholesky()
                .ok_or(Error::Singular("closed-loop inner matrix"))?
                .solve(&(bh.transpose() * &split.p_c * &model.a));
            acc -= model.a.transpose() * &split.p_c * &bh * gain;
        }
    }
    let mean = acc / sample_set.len() as f64;
    Ok(numerics::symmetrize(&(mean + &weights.q - p)))
}
