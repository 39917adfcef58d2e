//! Closed-loop controllability classification under fading and random access.
//!
//! The classifier decides, from (A, B), the antenna counts and the access
//! probability, whether the randomly-accessed fading loop is controllable at
//! every slot, only at slots with delta = 1, or never.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::model::{ChannelConfig, PlantModel};
use crate::numerics::{self, ToleranceProfile};

/// Block structure of A in the singular basis of B B^T.
#[derive(Debug, Clone)]
pub struct StructureData {
    /// Orthogonal basis: columns are singular vectors of B B^T, so
    /// B B^T = U diag(xi) U^T and A_tilde = U^T A U.
    pub u: DMatrix<f64>,
    /// Singular values of B B^T, descending.
    pub xi: DVector<f64>,
    /// Rank of B.
    pub eta_b: usize,
    pub a_tilde: DMatrix<f64>,
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    AlmostSureControllable,
    IntermittentlyControllable,
    AlmostSureUncontrollable,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::AlmostSureControllable => "almost-sure controllable",
            Regime::IntermittentlyControllable => "intermittently controllable",
            Regime::AlmostSureUncontrollable => "almost-sure uncontrollable",
        };
        f.write_str(s)
    }
}

/// Classification outcome with the matched condition label.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub regime: Regime,
    pub matched_condition: &'static str,
    pub details: String,
}

/// PBH test: the pair (a, b) is controllable iff `[a - lambda I | b]` has
/// full row rank at every eigenvalue lambda of a.
pub fn pbh_controllable(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol: &ToleranceProfile,
) -> bool {
    let s = a.nrows();
    if s == 0 {
        return true; // empty pair, vacuously controllable
    }
    if b.ncols() == 0 {
        return false;
    }
    for lambda in numerics::eigenvalues(a).iter() {
        if pbh_rank_at(a, b, *lambda, tol) < s {
            return false;
        }
    }
    true
}

/// Rank of the PBH pencil `[a - lambda I | b]` at one (complex) lambda.
pub fn pbh_rank_at(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lambda: Complex<f64>,
    tol: &ToleranceProfile,
) -> usize {
    let s = a.nrows();
    let m = b.ncols();
    let mut pencil = DMatrix::<Complex<f64>>::zeros(s, s + m);
    for i in 0..s {
        for j in 0..s {
            pencil[(i, j)] = Complex::new(a[(i, j)], 0.0);
        }
        pencil[(i, i)] -= lambda;
        for j in 0..m {
            pencil[(i, s + j)] = Complex::new(b[(i, j)], 0.0);
        }
    }
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(lambda.norm(), |acc, x| acc.max(x.abs()));
    numerics::numeric_rank_complex_scaled(&pencil, tol, scale)
}

/// Rotate A into the singular basis of B B^T and split at the rank of B.
pub fn structure_transform(model: &PlantModel, tol: &ToleranceProfile) -> Result<StructureData> {
    let s = model.state_dim();
    let bbt = &model.b * model.b.transpose();
    let eta_b = numerics::numeric_rank(&model.b, tol);
    if eta_b == 0 {
        return Err(Error::ZeroInputMatrix);
    }
    let (u, _, _) = numerics::svd_descending(&bbt)?;
    let xi = {
        let (_, vals) = numerics::sym_eigen_descending(&bbt);
        vals.map(|v| v.max(0.0))
    };
    let a_tilde = u.transpose() * &model.a * &u;
    let a11 = a_tilde.view((0, 0), (eta_b, eta_b)).into_owned();
    let a12 = a_tilde.view((0, eta_b), (eta_b, s - eta_b)).into_owned();
    let a21 = a_tilde.view((eta_b, 0), (s - eta_b, eta_b)).into_owned();
    let a22 = a_tilde.view((eta_b, eta_b), (s - eta_b, s - eta_b)).into_owned();
    Ok(StructureData { u, xi, eta_b, a_tilde, a11, a12, a21, a22 })
}

/// True iff some eigenvalue lambda of a_tilde has
/// `rank(a_tilde - lambda I) <= s - eta_b + n_t`.
///
/// The condition is quantified over all complex lambda, but only eigenvalues
/// can matter: at any non-eigenvalue, a_tilde - lambda I is nonsingular, so
/// its rank is S, which exceeds S - eta_b + n_t whenever n_t < eta_b.
fn rank_drop_witness(
    sd: &StructureData,
    n_t: usize,
    tol: &ToleranceProfile,
) -> Option<Complex<f64>> {
    let s = sd.a_tilde.nrows();
    let threshold = s - sd.eta_b + n_t;
    for lambda in numerics::eigenvalues(&sd.a_tilde).iter() {
        let empty = DMatrix::<f64>::zeros(s, 0);
        let rank = pbh_rank_at(&sd.a_tilde, &empty, *lambda, tol);
        if rank <= threshold {
            return Some(*lambda);
        }
    }
    None
}

/// Is the lower-right subsystem (A22, A12^T) controllable? Empty A22
/// (eta_b = S) counts as controllable vacuously.
fn tail_pair_controllable(sd: &StructureData, tol: &ToleranceProfile) -> bool {
    if sd.a22.nrows() == 0 {
        return true;
    }
    pbh_controllable(&sd.a22, &sd.a12.transpose(), tol)
}

/// Decide the closed-loop controllability regime.
pub fn classify(
    model: &PlantModel,
    cfg: &ChannelConfig,
    tol: &ToleranceProfile,
) -> Result<Verdict> {
    if !pbh_controllable(&model.a, &model.b, tol) {
        return Err(Error::PbhPreconditionFailed);
    }
    if cfg.p_access <= 0.0 {
        return Err(Error::ZeroAccessProbability);
    }
    let s = model.state_dim();
    let n_t = cfg.n_t;
    let sd = structure_transform(model, tol)?;
    let eta_b = sd.eta_b;
    let sure = cfg.p_access >= 1.0;

    // Uncontrollable conditions take precedence: they hold regardless of the
    // access probability.
    if eta_b <= n_t && n_t < s && !tail_pair_controllable(&sd, tol) {
        return Ok(Verdict {
            regime: Regime::AlmostSureUncontrollable,
            matched_condition: "c.1",
            details: format!(
                "eta_B = {eta_b} <= N_t = {n_t} < S = {s} and the pair (A22, A12^T) is uncontrollable"
            ),
        });
    }
    if n_t < eta_b {
        if let Some(lambda) = rank_drop_witness(&sd, n_t, tol) {
            return Ok(Verdict {
                regime: Regime::AlmostSureUncontrollable,
                matched_condition: "c.2",
                details: format!(
                    "N_t = {n_t} < eta_B = {eta_b} and rank(A_tilde - lambda I) <= S - eta_B + N_t at lambda = {:.6} + {:.6}i",
                    lambda.re, lambda.im
                ),
            });
        }
    }

    let regime = if sure {
        Regime::AlmostSureControllable
    } else {
        Regime::IntermittentlyControllable
    };
    let p = cfg.p_access;
    if n_t >= s {
        return Ok(Verdict {
            regime,
            matched_condition: if sure { "a.1" } else { "b.1" },
            details: format!("N_t = {n_t} >= S = {s} with access probability {p}"),
        });
    }
    if eta_b <= n_t {
        // c.1 already excluded, so (A22, A12^T) is controllable here.
        return Ok(Verdict {
            regime,
            matched_condition: if sure { "a.2" } else { "b.2" },
            details: format!(
                "eta_B = {eta_b} <= N_t = {n_t} < S = {s}, (A22, A12^T) controllable, access probability {p}"
            ),
        });
    }
    // n_t < eta_b and no rank-drop witness survived above.
    Ok(Verdict {
        regime,
        matched_condition: if sure { "a.3" } else { "b.3" },
        details: format!(
            "N_t = {n_t} < eta_B = {eta_b}, rank(A_tilde - lambda I) > S - eta_B + N_t at every eigenvalue, access probability {p}"
        ),
    })
}

/// Kalman rank of the pair (a, b): rank of [b, ab, ..., a^(S-1) b].
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: &ToleranceProfile) -> usize {
    let s = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(s, s * m);
    let mut block = b.clone();
    for k in 0..s {
        ctrb.view_mut((0, k * m), (s, m)).copy_from(&block);
        block = a * block;
    }
    numerics::numeric_rank(&ctrb, tol)
}
