//! Comparison schemes: two quadratic Q-learning controllers and a genie.
//!
//! Baseline 1 learns a quadratic Q-function over (x, u), pretending the
//! channel is static. Baseline 2 learns over the full extended state
//! (delta, x, vec(H), u) by brute force. Baseline 3 plugs the solved kernel
//! into the same feedback law the learner uses.
//!
//! Both Q-learners run average-cost recursive-least-squares temporal
//! differences: regress Q(z) onto cost - avg_cost + min_u' Q(next, u'),
//! with exponential forgetting and decaying Gaussian exploration.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::learner;
use crate::model::{ChannelDraw, CostWeights, ExtendedState, PlantModel};
use crate::nme::ValueKernel;

pub const FORGETTING: f64 = 0.995;
pub const EXPLORATION_VAR0: f64 = 0.1;
pub const INIT_SCALE: f64 = 0.01;
const COVARIANCE_CEILING: f64 = 1e3;

/// Quadratic Q-model `Q(z) = z' Psi z + intercept` with its RLS estimator
/// state. The action occupies the trailing `n_act` coordinates of z.
///
/// The intercept is estimation plumbing, not part of the quadratic model: a
/// purely quadratic feature set cannot represent the constant part of the
/// differential Q-value, and without an intercept that constant leaks into
/// the diagonal coefficients and corrupts the learned gain.
#[derive(Debug, Clone)]
pub struct QKernel {
    pub psi_mat: DMatrix<f64>,
    /// Parameter vector: upper triangle of Psi, row-major, then the intercept.
    theta: DVector<f64>,
    /// Inverse correlation matrix of the RLS estimator.
    rls_p: DMatrix<f64>,
    avg_cost: f64,
    step_count: usize,
    n_act: usize,
    /// Slots where the action block was not PD and the argmin fell back to 0.
    pub fallback_count: usize,
}

fn n_params(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Feature map matching `theta`: Q(z) = sum_i Psi_ii z_i^2
/// + 2 sum_{i<j} Psi_ij z_i z_j + intercept.
fn features(z: &DVector<f64>) -> DVector<f64> {
    let d = z.len();
    let mut phi = DVector::zeros(n_params(d) + 1);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            phi[idx] = if i == j { z[i] * z[i] } else { 2.0 * z[i] * z[j] };
            idx += 1;
        }
    }
    phi[idx] = 1.0;
    phi
}

fn unvech(theta: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = theta[idx];
            m[(j, i)] = theta[idx];
            idx += 1;
        }
    }
    m
}

fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut theta = DVector::zeros(n_params(d));
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            theta[idx] = m[(i, j)];
            idx += 1;
        }
    }
    theta
}

impl QKernel {
    /// `dim` total feature length including the trailing `n_act` action
    /// coordinates.
    pub fn new(dim: usize, n_act: usize) -> Result<Self> {
        if n_act == 0 || n_act >= dim {
            return Err(Error::Invalid(format!(
                "action block ({n_act}) must be a proper trailing part of the features ({dim})"
            )));
        }
        let psi = DMatrix::identity(dim, dim) * INIT_SCALE;
        let mut theta = DVector::zeros(n_params(dim) + 1);
        theta.rows_mut(0, n_params(dim)).copy_from(&vech(&psi));
        Ok(Self {
            theta,
            psi_mat: psi,
            rls_p: DMatrix::identity(n_params(dim) + 1, n_params(dim) + 1) * 1e3,
            avg_cost: 0.0,
            step_count: 0,
            n_act,
            fallback_count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.psi_mat.nrows()
    }

    fn split(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim();
        let nv = d - self.n_act;
        let vv = self.psi_mat.view((0, 0), (nv, nv)).into_owned();
        let uv = self.psi_mat.view((nv, 0), (self.n_act, nv)).into_owned();
        let uu = self.psi_mat.view((nv, nv), (self.n_act, self.n_act)).into_owned();
        (vv, uv, uu)
    }

    /// Greedy action for the non-action feature block `v`; the flag reports
    /// whether the action block failed to be PD and the argmin fell back to
    /// zero.
    ///
    /// The action is clamped to a trust region proportional to the state
    /// features: while the action block is barely PD, the unconstrained
    /// argmin divides by its tiny eigenvalues and both the action and the
    /// bootstrapped targets explode.
    pub fn greedy_action(&self, v: &DVector<f64>) -> (DVector<f64>, bool) {
        let (_, uv, uu) = self.split();
        match uu.cholesky() {
            Some(chol) => {
                let mut action = -chol.solve(&(uv * v));
                let cap = 10.0 * (1.0 + v.norm());
                let norm = action.norm();
                if norm > cap {
                    action *= cap / norm;
                }
                (action, false)
            }
            None => (DVector::zeros(self.n_act), true),
        }
    }

    fn intercept(&self) -> f64 {
        self.theta[self.theta.len() - 1]
    }

    /// `Q(v, u)` under the current model.
    fn q_value(&self, v: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, v.len()).copy_from(v);
        z.rows_mut(v.len(), u.len()).copy_from(u);
        (z.transpose() * &self.psi_mat * &z)[(0, 0)] + self.intercept()
    }

    /// Bootstrap value: Q at the (clamped) greedy action, falling back to
    /// `Q(v, 0)` when the action block is not PD.
    fn min_value(&self, v: &DVector<f64>) -> f64 {
        let (action, _) = self.greedy_action(v);
        self.q_value(v, &action)
    }

    /// One RLS-TD update from a transition: features of the visited (v, u)
    /// pair regress onto the differential target.
    fn td_update(&mut self, z: &DVector<f64>, cost: f64, v_next: &DVector<f64>) {
        self.step_count += 1;
        // Track the average cost on the same effective window as the RLS
        // forgetting, so the differential targets stay centered while the
        // policy is still moving.
        let rate = (1.0 - FORGETTING).max(1.0 / self.step_count as f64);
        self.avg_cost += rate * (cost - self.avg_cost);
        let target = cost - self.avg_cost + self.min_value(v_next);
        let phi = features(z);
        let predicted = phi.dot(&self.theta);
        let p_phi = &self.rls_p * &phi;
        let denom = FORGETTING + phi.dot(&p_phi);
        let gain = &p_phi / denom;
        self.theta += &gain * (target - predicted);
        self.rls_p = (&self.rls_p - gain * p_phi.transpose()) / FORGETTING;
        self.rls_p = crate::numerics::symmetrize(&self.rls_p);
        // Forgetting inflates the covariance along directions the closed
        // loop stops exciting (estimator windup); clamp its spectrum before
        // the estimate can run away there. The diagonal check keeps the
        // eigendecomposition off the hot path.
        let max_diag = self.rls_p.diagonal().max();
        if max_diag > COVARIANCE_CEILING {
            let (vecs, vals) = crate::numerics::sym_eigen_descending(&self.rls_p);
            let clamped = vals.map(|v| v.clamp(1e-9, COVARIANCE_CEILING));
            self.rls_p = &vecs * DMatrix::from_diagonal(&clamped) * vecs.transpose();
        }
        self.psi_mat = unvech(&self.theta.rows(0, n_params(self.dim())).into_owned(), self.dim());
    }
}

fn exploration_noise(n: usize, slot: usize, rng: &mut impl Rng) -> DVector<f64> {
    let std = (EXPLORATION_VAR0 * (1.0 + slot as f64).powf(-0.5)).sqrt();
    DVector::from_fn(n, |_, _| {
        let g: f64 = StandardNormal.sample(rng);
        g * std
    })
}

/// Observed transition for Baseline 1: the channel is invisible to it.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub cost: f64,
    pub x_next: DVector<f64>,
}

/// Observed transition for Baseline 2, carrying the channel on both ends.
#[derive(Debug, Clone)]
pub struct ExtTransition {
    pub x: DVector<f64>,
    pub draw: ChannelDraw,
    pub u: DVector<f64>,
    pub cost: f64,
    pub x_next: DVector<f64>,
    pub draw_next: ChannelDraw,
}

/// Extended feature block for Baseline 2: (delta, x, vec(H)).
fn b2_state_features(x: &DVector<f64>, draw: &ChannelDraw) -> DVector<f64> {
    let mut v = DVector::zeros(1 + x.len() + draw.h.len());
    v[0] = draw.delta_f();
    v.rows_mut(1, x.len()).copy_from(x);
    v.rows_mut(1 + x.len(), draw.h.len())
        .copy_from(&DVector::from_column_slice(draw.h.as_slice()));
    v
}

/// Update the static-channel Q-learner with one transition and return the
/// explored greedy action for the successor state.
pub fn baseline1_step(
    qk: &mut QKernel,
    obs: &Transition,
    slot: usize,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let mut z = DVector::zeros(qk.dim());
    z.rows_mut(0, obs.x.len()).copy_from(&obs.x);
    z.rows_mut(obs.x.len(), obs.u.len()).copy_from(&obs.u);
    qk.td_update(&z, obs.cost, &obs.x_next);
    let (mut action, fell_back) = qk.greedy_action(&obs.x_next);
    if fell_back {
        qk.fallback_count += 1;
    }
    action += exploration_noise(qk.n_act, slot, rng);
    action
}

/// Update the brute-force Q-learner with one extended transition and return
/// the explored greedy action for the successor extended state.
pub fn baseline2_step(
    qk: &mut QKernel,
    obs: &ExtTransition,
    slot: usize,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let v = b2_state_features(&obs.x, &obs.draw);
    let mut z = DVector::zeros(qk.dim());
    z.rows_mut(0, v.len()).copy_from(&v);
    z.rows_mut(v.len(), obs.u.len()).copy_from(&obs.u);
    let v_next = b2_state_features(&obs.x_next, &obs.draw_next);
    qk.td_update(&z, obs.cost, &v_next);
    let (mut action, fell_back) = qk.greedy_action(&v_next);
    if fell_back {
        qk.fallback_count += 1;
    }
    action += exploration_noise(qk.n_act, slot, rng);
    action
}

/// Genie controller: the solved kernel through the learner's feedback law.
pub fn baseline3_action(
    p_star: &ValueKernel,
    state: &ExtendedState,
    model: &PlantModel,
    weights: &CostWeights,
) -> DVector<f64> {
    learner::control_action(p_star, state, model, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    use crate::model::{plant_step, sample_channel, stage_cost, ChannelConfig};
    use crate::nme::solve_dare;

    fn scalar_plant(a: f64, b: f64) -> (PlantModel, CostWeights) {
        let model = PlantModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, 0.01),
            DVector::zeros(1),
        )
        .unwrap();
        let weights = CostWeights::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        (model, weights)
    }

    #[test]
    fn kernel_rejects_degenerate_shapes() {
        assert!(QKernel::new(4, 0).is_err());
        assert!(QKernel::new(4, 4).is_err());
        assert!(QKernel::new(4, 1).is_ok());
    }

    #[test]
    fn feature_map_reproduces_the_quadratic() {
        let mut rng = ChaCha12Rng::seed_from_u64(80);
        for _ in 0..20 {
            let d = rng.gen_range(2..=6);
            let g = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let psi = &g + g.transpose();
            let z = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let direct = (z.transpose() * &psi * &z)[(0, 0)];
            let phi = features(&z);
            assert_eq!(phi[phi.len() - 1], 1.0);
            let via_features = phi.rows(0, n_params(d)).dot(&vech(&psi));
            assert!((direct - via_features).abs() < 1e-10);
            assert_eq!(unvech(&vech(&psi), d), psi);
        }
    }

    #[test]
    fn zero_model_zero_state_gives_zero_action() {
        let mut qk = QKernel::new(3, 1).unwrap();
        qk.theta = DVector::zeros(n_params(3) + 1);
        qk.psi_mat = DMatrix::zeros(3, 3);
        // Action block not PD: fall back to zero regardless of the state.
        let (action, fell_back) = qk.greedy_action(&DVector::from_vec(vec![1.0, -2.0]));
        assert!(fell_back);
        assert_eq!(action, DVector::zeros(1));
        // PD init, zero state: greedy action is exactly zero.
        let qk = QKernel::new(3, 1).unwrap();
        let (action, fell_back) = qk.greedy_action(&DVector::zeros(2));
        assert!(!fell_back);
        assert_eq!(action, DVector::zeros(1));
    }

    #[test]
    fn baseline1_learns_the_static_scalar_gain() {
        let (model, weights) = scalar_plant(0.9, 1.0);
        let dare = solve_dare(&model, &weights).unwrap();
        let p = dare.p_star.p[(0, 0)];
        let (a, b) = (model.a[(0, 0)], model.b[(0, 0)]);
        let g_star = b * p * a / (b * b * p + weights.m[(0, 0)] + weights.r[(0, 0)]);

        let mut qk = QKernel::new(2, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(81);
        let mut x = DVector::from_element(1, 0.5);
        let mut u = DVector::zeros(1);
        let static_draw = ChannelDraw { h: DMatrix::identity(1, 1), delta: true };
        // Noise-free transitions: the deterministic static-channel plant is
        // the regime this learner was designed for, and the anchor the
        // fading-channel divergence is measured against.
        for k in 0..5000 {
            let ext = ExtendedState { x: x.clone(), draw: static_draw.clone() };
            let cost = stage_cost(&ext, &u, &weights);
            let x_next = plant_step(&model, &ext, &u, &mut rng, true).unwrap();
            let obs = Transition { x: x.clone(), u: u.clone(), cost, x_next: x_next.clone() };
            u = baseline1_step(&mut qk, &obs, k, &mut rng);
            x = x_next;
        }
        let (_, uv, uu) = qk.split();
        let g_learned = (uu[(0, 0)].recip() * uv[(0, 0)]).abs();
        let rel = (g_learned - g_star).abs() / g_star;
        assert!(rel < 0.05, "learned {g_learned:.4} vs optimal {g_star:.4} ({rel:.3} rel)");
        // A handful of fallbacks while the action block is still indefinite
        // are expected; persistent fallback would mean learning never starts.
        assert!(qk.fallback_count < 50, "fallbacks: {}", qk.fallback_count);
    }

    #[test]
    fn baseline2_has_the_advertised_dimension() {
        // S=3, N_r=2, N_t=3: features are 1 + 3 + 6 + 3 = 13 long.
        let qk = QKernel::new(13, 3).unwrap();
        assert_eq!(qk.psi_mat.nrows(), 13);
        assert_eq!(qk.theta.len(), 13 * 14 / 2 + 1);
    }

    #[test]
    fn baseline2_matches_baseline1_on_a_static_scalar_channel() {
        let (model, weights) = scalar_plant(0.9, 1.0);
        let dare = solve_dare(&model, &weights).unwrap();
        let p = dare.p_star.p[(0, 0)];
        let (a, b) = (model.a[(0, 0)], model.b[(0, 0)]);
        let g_star = b * p * a / (b * b * p + weights.m[(0, 0)] + weights.r[(0, 0)]);

        // d = 1 + S + Nr*Nt + Nt = 1 + 1 + 1 + 1 = 4.
        // On a static channel the access flag and gain coordinates are
        // constant, so the feature map is collinear and the recursive fit is
        // fragile: an early greedy transient can poison the action block for
        // good. Saturating the applied action (a bounded actuator) keeps the
        // closed loop in the identifiable regime this sanity check targets.
        let mut qk = QKernel::new(4, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut x = DVector::from_element(1, 0.5);
        let mut u = DVector::zeros(1);
        let static_draw = ChannelDraw { h: DMatrix::identity(1, 1), delta: true };
        for k in 0..8000 {
            let u_app = u.map(|c: f64| c.clamp(-2.0, 2.0));
            let ext = ExtendedState { x: x.clone(), draw: static_draw.clone() };
            let cost = stage_cost(&ext, &u_app, &weights);
            let x_next = plant_step(&model, &ext, &u_app, &mut rng, true).unwrap();
            let obs = ExtTransition {
                x: x.clone(),
                draw: static_draw.clone(),
                u: u_app.clone(),
                cost,
                x_next: x_next.clone(),
                draw_next: static_draw.clone(),
            };
            u = baseline2_step(&mut qk, &obs, k, &mut rng);
            x = x_next;
        }
        assert_eq!(qk.fallback_count, 0);
        // The learned feedback coefficient on the state coordinate should
        // match the optimal static gain; constant feature coordinates may
        // contribute a small residual offset, hence the looser tolerance.
        let (_, uv, uu) = qk.split();
        let g_learned = uv[(0, 1)] / uu[(0, 0)];
        let rel = (g_learned - g_star).abs() / g_star;
        assert!(rel < 0.1, "learned {g_learned:.4} vs optimal {g_star:.4} ({rel:.3} rel)");
    }

    #[test]
    fn genie_delegates_to_the_feedback_law() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.01, -1.02, 0.3, -0.1, 1.01, 0.2, -0.5, 0.1, 0.2],
        );
        let b = DMatrix::from_row_slice(3, 2, &[1.1, 0.2, -0.2, 0.6, -0.3, 0.2]);
        let model =
            PlantModel::new(a, b, DMatrix::identity(3, 3) * 0.05, DVector::zeros(3)).unwrap();
        let weights = CostWeights::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let p_star = ValueKernel::from_symmetric(&(DMatrix::identity(3, 3) * 2.0));
        let mut rng = ChaCha12Rng::seed_from_u64(83);
        for _ in 0..20 {
            let draw = sample_channel(&mut rng, &ChannelConfig { n_r: 2, n_t: 3, p_access: 0.5 });
            let state = ExtendedState {
                x: DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0)),
                draw,
            };
            let genie = baseline3_action(&p_star, &state, &model, &weights);
            let direct = learner::control_action(&p_star, &state, &model, &weights);
            assert_eq!(genie, direct);
        }
    }
}
