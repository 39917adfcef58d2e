//! Plant dynamics, channel sampling, and the per-stage cost.
//!
//! The plant is `x' = A x + delta * B * H * u + B v + w` with `v ~ N(0, I)`
//! and `w ~ N(0, W)`. The channel draw `(H, delta)` has i.i.d. standard
//! normal fading entries and a Bernoulli access bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{self, ToleranceProfile};

/// The stochastic linear plant: transition, input and noise structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub x0: DVector<f64>,
    /// Cholesky-like square root of W, cached for sampling.
    w_sqrt: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let s = a.nrows();
        if a.ncols() != s {
            return Err(Error::Dimension {
                field: "plant.a".into(),
                detail: format!("expected square, got {}x{}", a.nrows(), a.ncols()),
            });
        }
        if b.nrows() != s {
            return Err(Error::Dimension {
                field: "plant.b".into(),
                detail: format!("expected {} rows, got {}", s, b.nrows()),
            });
        }
        if w.nrows() != s || w.ncols() != s {
            return Err(Error::Dimension {
                field: "plant.w".into(),
                detail: format!("expected {s}x{s}, got {}x{}", w.nrows(), w.ncols()),
            });
        }
        if x0.len() != s {
            return Err(Error::Dimension {
                field: "plant.x0".into(),
                detail: format!("expected length {s}, got {}", x0.len()),
            });
        }
        for (name, m) in [("plant.a", &a), ("plant.b", &b), ("plant.w", &w)] {
            if !numerics::all_finite(m) {
                let _ = name;
                return Err(Error::NonFinite("plant matrix"));
            }
        }
        if !numerics::is_psd(&w, &ToleranceProfile::default())? {
            return Err(Error::NotPsd("plant.w"));
        }
        let w_sqrt = numerics::sqrt_psd(&w);
        Ok(Self { a, b, w, x0, w_sqrt })
    }

    /// State dimension S.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Number of receive antennas N_r (columns of B).
    pub fn n_r(&self) -> usize {
        self.b.ncols()
    }
}

/// Positive-definite weights (Q, R, M) of the per-stage cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        for (name, mat) in [("weights.q", &q), ("weights.r", &r), ("weights.m", &m)] {
            if mat.nrows() != mat.ncols() {
                return Err(Error::Dimension {
                    field: name.into(),
                    detail: format!("expected square, got {}x{}", mat.nrows(), mat.ncols()),
                });
            }
            if !numerics::all_finite(mat) {
                return Err(Error::NonFinite("weight matrix"));
            }
            let sym = numerics::symmetrize(mat);
            if numerics::spectral_norm(&(mat - &sym)) > 1e-12 * numerics::spectral_norm(mat).max(1.0)
            {
                return Err(Error::Asymmetric("weight matrix"));
            }
            if numerics::min_eigenvalue(mat) <= 0.0 {
                return Err(Error::NotPd { field: name.into() });
            }
        }
        Ok(Self { q, r, m })
    }

    /// Number of transmit antennas N_t (dimension of R and of u).
    pub fn n_t(&self) -> usize {
        self.r.nrows()
    }
}

/// One channel realization: fading matrix and random-access bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub h: DMatrix<f64>,
    pub delta: bool,
}

impl ChannelDraw {
    pub fn delta_f(&self) -> f64 {
        if self.delta {
            1.0
        } else {
            0.0
        }
    }
}

/// Channel dimensions and access probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub n_r: usize,
    pub n_t: usize,
    pub p_access: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_r == 0 || self.n_t == 0 {
            return Err(Error::Invalid("antenna counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_access) {
            return Err(Error::Invalid(format!(
                "p_access must lie in [0,1], got {}",
                self.p_access
            )));
        }
        Ok(())
    }
}

/// Plant state together with the channel realization visible in the slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: DVector<f64>,
    pub draw: ChannelDraw,
}

/// Draw one `(H, delta)` realization from the stream.
pub fn sample_channel(rng: &mut impl Rng, cfg: &ChannelConfig) -> ChannelDraw {
    let h = DMatrix::from_fn(cfg.n_r, cfg.n_t, |_, _| StandardNormal.sample(rng));
    let delta = rng.gen_bool(cfg.p_access);
    ChannelDraw { h, delta }
}

fn standard_normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// One plant transition. With `noise_free` both the channel noise v and the
/// plant noise w are suppressed, which makes the step exactly linear in
/// (x, u) — used by the oracle tests.
pub fn plant_step(
    model: &PlantModel,
    state: &ExtendedState,
    u: &DVector<f64>,
    rng: &mut impl Rng,
    noise_free: bool,
) -> Result<DVector<f64>> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("control input"));
    }
    if u.len() != state.draw.h.ncols() {
        return Err(Error::Dimension {
            field: "plant_step.u".into(),
            detail: format!("expected length {}, got {}", state.draw.h.ncols(), u.len()),
        });
    }
    let mut x_next = &model.a * &state.x;
    if state.draw.delta {
        x_next += &model.b * (&state.draw.h * u);
    }
    if !noise_free {
        let v = standard_normal_vector(rng, model.n_r());
        let z = standard_normal_vector(rng, model.state_dim());
        x_next += &model.b * v + &model.w_sqrt * z;
    }
    Ok(x_next)
}

/// Per-stage cost with the channel noise already averaged out:
/// `x'Qx + u'Ru + delta * u'H'MHu + Tr(M)`.
pub fn stage_cost(state: &ExtendedState, u: &DVector<f64>, weights: &CostWeights) -> f64 {
    let x = &state.x;
    let mut cost = (x.transpose() * &weights.q * x)[(0, 0)]
        + (u.transpose() * &weights.r * u)[(0, 0)]
        + weights.m.trace();
    if state.draw.delta {
        let hu = &state.draw.h * u;
        cost += (hu.transpose() * &weights.m * &hu)[(0, 0)];
    }
    cost
}
