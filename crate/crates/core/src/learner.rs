//! Online stochastic-approximation learner for the value kernel.
//!
//! Each slot observes one channel draw, acts with the current kernel, and
//! nudges the kernel along a single-draw unbiased estimate of the fixed-point
//! residual. No model of the channel distribution is needed — the draw itself
//! is the sample.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::{
    plant_step, sample_channel, stage_cost, ChannelConfig, ChannelDraw, CostWeights,
    ExtendedState, PlantModel,
};
use crate::nme::ValueKernel;
use crate::numerics::{self};

/// Robbins-Monro step sizes `alpha_k = a0 / (1 + k/tau)^gamma_exp`.
/// Any exponent in (0.5, 1] gives a divergent sum with summable squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub a0: f64,
    pub tau: f64,
    pub gamma_exp: f64,
}

impl StepSchedule {
    pub fn new(a0: f64, tau: f64, gamma_exp: f64) -> Result<Self> {
        if !(a0 > 0.0 && a0.is_finite()) {
            return Err(Error::Invalid(format!("step scale must be positive, got {a0}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Invalid(format!("step timescale must be positive, got {tau}")));
        }
        if !(0.5 < gamma_exp && gamma_exp <= 1.0) {
            return Err(Error::Invalid(format!(
                "step exponent must lie in (0.5, 1], got {gamma_exp}"
            )));
        }
        Ok(Self { a0, tau, gamma_exp })
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.a0 / (1.0 + k as f64 / self.tau).powf(self.gamma_exp)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { a0: 0.5, tau: 100.0, gamma_exp: 0.7 }
    }
}

/// One recorded noise sample: the gap between the single-draw estimate and
/// the frozen-reference mean, plus the kernel norm at that slot.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    pub n: DMatrix<f64>,
    pub p_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NoiseLog {
    pub samples: Vec<NoiseSample>,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub p_k: ValueKernel,
    pub k: usize,
    pub schedule: StepSchedule,
    /// When present, each step also evaluates the residual on this frozen
    /// reference set and records the estimation noise.
    pub noise_ref: Option<Vec<ChannelDraw>>,
    pub noise_log: NoiseLog,
    warned_indefinite: bool,
}

impl LearnerState {
    pub fn new(state_dim: usize, schedule: StepSchedule) -> Self {
        Self {
            p_k: ValueKernel::from_symmetric(&DMatrix::identity(state_dim, state_dim)),
            k: 0,
            schedule,
            noise_ref: None,
            noise_log: NoiseLog::default(),
            warned_indefinite: false,
        }
    }

    pub fn with_noise_log(mut self, reference_set: Vec<ChannelDraw>) -> Self {
        self.noise_ref = Some(reference_set);
        self
    }
}

/// Single-draw estimate of the fixed-point residual at `p`.
fn single_draw_residual(
    p: &DMatrix<f64>,
    draw: &ChannelDraw,
    model: &PlantModel,
    weights: &CostWeights,
) -> Result<DMatrix<f64>> {
    let pa = p * &model.a;
    let mut est = model.a.transpose() * &pa;
    if draw.delta {
        let bh = &model.b * &draw.h;
        let bh_t_pa = bh.transpose() * &pa;
        let inner = bh.transpose() * p * &bh
            + draw.h.transpose() * &weights.m * &draw.h
            + &weights.r;
        let solved = inner
            .cholesky()
            .ok_or(Error::Singular("closed-loop inner matrix"))?
            .solve(&bh_t_pa);
        est -= bh_t_pa.transpose() * solved;
    }
    Ok(numerics::symmetrize(&(est + &weights.q - p)))
}

/// One SA update: `P <- P + alpha_k * f_hat(P)` with the given draw.
pub fn sa_step(
    state: &LearnerState,
    draw: &ChannelDraw,
    model: &PlantModel,
    weights: &CostWeights,
) -> Result<LearnerState> {
    let f_hat = single_draw_residual(&state.p_k.p, draw, model, weights)?;
    let alpha = state.schedule.alpha(state.k);
    let p_next = numerics::symmetrize(&(&state.p_k.p + &f_hat * alpha));
    let norm = numerics::spectral_norm(&p_next);
    if !norm.is_finite() || norm > 1e12 {
        return Err(Error::LearnerDiverged { slot: state.k, norm });
    }

    let mut next = state.clone();
    if let Some(reference) = &state.noise_ref {
        let mut mean = DMatrix::zeros(model.state_dim(), model.state_dim());
        for d in reference {
            mean += single_draw_residual(&state.p_k.p, d, model, weights)?;
        }
        mean /= reference.len() as f64;
        next.noise_log.samples.push(NoiseSample {
            n: &f_hat - mean,
            p_norm: numerics::spectral_norm(&state.p_k.p),
        });
    }

    if !next.warned_indefinite && numerics::min_eigenvalue(&p_next) < -1e-6 {
        eprintln!(
            "warning: learner kernel left the PSD cone at slot {} (min eigenvalue below -1e-6)",
            state.k
        );
        next.warned_indefinite = true;
    }
    next.p_k = ValueKernel::from_symmetric(&p_next);
    next.k = state.k + 1;
    Ok(next)
}

/// Feedback gain `(H'B'PBH + H'MH + R)^(-1) H'B'PA` for an active slot.
pub fn feedback_gain(
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    model: &PlantModel,
    weights: &CostWeights,
) -> DMatrix<f64> {
    let bh = &model.b * h;
    let inner =
        bh.transpose() * p * &bh + h.transpose() * &weights.m * h + &weights.r;
    inner
        .cholesky()
        .expect("H'MH + R is PD because R is PD")
        .solve(&(bh.transpose() * p * &model.a))
}

/// Optimal action for the slot: state feedback through the current kernel
/// when the channel is granted, zero otherwise. A blocked slot's input never
/// reaches the plant, so any nonzero action only pays control cost.
pub fn control_action(
    p: &ValueKernel,
    state: &ExtendedState,
    model: &PlantModel,
    weights: &CostWeights,
) -> DVector<f64> {
    if !state.draw.delta {
        return DVector::zeros(weights.n_t());
    }
    -(feedback_gain(&p.p, &state.draw.h, model, weights) * &state.x)
}

/// Variant that applies the feedback formula even on blocked slots,
/// for comparison against [`control_action`].
pub fn control_action_literal(
    p: &ValueKernel,
    state: &ExtendedState,
    model: &PlantModel,
    weights: &CostWeights,
) -> DVector<f64> {
    -(feedback_gain(&p.p, &state.draw.h, model, weights) * &state.x)
}

/// Quadratic value estimate `x'Px`.
pub fn value_estimate(p: &ValueKernel, x: &DVector<f64>) -> f64 {
    (x.transpose() * &p.p * x)[(0, 0)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    pub x_norm_sq: f64,
    pub u_err_sq: f64,
    pub p_err: f64,
    pub stage_cost: f64,
}

/// Closed-loop online run. Per slot: observe the draw, act through the
/// current kernel, step the plant (optionally), then update the kernel with
/// the same draw.
///
/// `u_err_sq` compares against the reference kernel with the grant forced on
/// in both gains: on a blocked slot both actual actions are zero, which would
/// make the error trivially vanish on half the slots and say nothing about
/// learning progress.
pub fn run_online(
    model: &PlantModel,
    weights: &CostWeights,
    cfg: &ChannelConfig,
    schedule: StepSchedule,
    horizon: usize,
    seed: u64,
    apply_to_plant: bool,
    reference: Option<&ValueKernel>,
) -> Result<Vec<TrajectoryRow>> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = LearnerState::new(model.state_dim(), schedule);
    let mut x = model.x0.clone();
    let mut rows = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let draw = sample_channel(&mut rng, cfg);
        let ext = ExtendedState { x: x.clone(), draw };
        let u = control_action(&state.p_k, &ext, model, weights);
        let (u_err_sq, p_err) = match reference {
            Some(p_star) => {
                let g_learned = feedback_gain(&state.p_k.p, &ext.draw.h, model, weights);
                let g_star = feedback_gain(&p_star.p, &ext.draw.h, model, weights);
                (
                    ((&g_star - &g_learned) * &x).norm_squared(),
                    numerics::spectral_norm(&(&state.p_k.p - &p_star.p)),
                )
            }
            None => (f64::NAN, f64::NAN),
        };
        rows.push(TrajectoryRow {
            k,
            x_norm_sq: x.norm_squared(),
            u_err_sq,
            p_err,
            stage_cost: stage_cost(&ext, &u, weights),
        });
        if apply_to_plant {
            x = plant_step(model, &ext, &u, &mut rng, false)?;
        }
        state = sa_step(&state, &ext.draw, model, weights)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct MartingaleReport {
    pub n_samples: usize,
    /// Largest per-coordinate |mean| / SE ratio across the kernel entries.
    pub worst_t_stat: f64,
    pub mean_covers_zero: bool,
    pub noise_second_moment: f64,
    pub second_moment_bound: f64,
    pub bound_ok: bool,
}

/// Two empirical checks on the recorded estimation noise: the per-coordinate
/// mean should be statistically indistinguishable from zero (the estimator is
/// unbiased), and the mean squared norm should sit under the quadratic
/// envelope `2 |A|^2 (1 + |P|^2)` with 10% slack.
pub fn martingale_diagnostics(log: &NoiseLog, model: &PlantModel) -> Result<MartingaleReport> {
    let n = log.samples.len();
    if n == 0 {
        return Err(Error::Invalid("noise log is empty".into()));
    }
    let s = model.state_dim();
    let mut mean = DMatrix::zeros(s, s);
    for sample in &log.samples {
        mean += &sample.n;
    }
    mean /= n as f64;
    let mut var = DMatrix::zeros(s, s);
    for sample in &log.samples {
        let d = &sample.n - &mean;
        var += d.component_mul(&d);
    }
    var /= (n.max(2) - 1) as f64;

    let mut worst_t = 0.0f64;
    for i in 0..s {
        for j in 0..s {
            let se = (var[(i, j)] / n as f64).sqrt();
            let t = if se > 0.0 { mean[(i, j)].abs() / se } else { 0.0 };
            worst_t = worst_t.max(t);
        }
    }

    let a_norm_sq = numerics::spectral_norm(&model.a).powi(2);
    let mut second_moment = 0.0;
    let mut bound = 0.0;
    for sample in &log.samples {
        second_moment += sample.n.norm_squared();
        bound += 2.0 * a_norm_sq * (1.0 + sample.p_norm.powi(2));
    }
    second_moment /= n as f64;
    bound = bound / n as f64 * 1.1;

    Ok(MartingaleReport {
        n_samples: n,
        worst_t_stat: worst_t,
        mean_covers_zero: worst_t <= 3.0,
        noise_second_moment: second_moment,
        second_moment_bound: bound,
        bound_ok: second_moment <= bound,
    })
}

const TRAJECTORY_SAMPLE_COUNT: usize = 1000;

/// Deterministic Euler scheme for the mean flow on a frozen sample set.
fn virtual_process(
    p0: &DMatrix<f64>,
    xi: f64,
    n_steps: usize,
    set: &[ChannelDraw],
    model: &PlantModel,
    weights: &CostWeights,
) -> Result<Vec<DMatrix<f64>>> {
    let mut p = p0.clone();
    let mut path = Vec::with_capacity(n_steps + 1);
    path.push(p.clone());
    let kernel = ValueKernel::from_symmetric(p0);
    let mut current = kernel;
    for _ in 0..n_steps {
        let f = crate::nme::f_residual(&current, set, model, weights)?;
        p = numerics::symmetrize(&(&p + f * xi));
        current = ValueKernel::from_symmetric(&p);
        path.push(p.clone());
    }
    Ok(path)
}

/// Sup-norm gap between the piecewise-linear interpolants of the virtual
/// fixed-point process run at steps `xi` and `xi/2` over the same time span.
/// First-order Euler error makes the gap scale linearly in `xi`, so halving
/// the step should roughly halve the gap.
pub fn trajectory_gap(
    xi: f64,
    horizon: usize,
    model: &PlantModel,
    weights: &CostWeights,
    cfg: &ChannelConfig,
    seed: u64,
) -> Result<f64> {
    if !(0.0 < xi && xi < 1.0) {
        return Err(Error::Invalid(format!("step size must lie in (0,1), got {xi}")));
    }
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let set: Vec<ChannelDraw> =
        (0..TRAJECTORY_SAMPLE_COUNT).map(|_| sample_channel(&mut rng, cfg)).collect();
    let s = model.state_dim();
    let p0 = DMatrix::identity(s, s);
    let coarse = virtual_process(&p0, xi, horizon, &set, model, weights)?;
    let fine = virtual_process(&p0, xi / 2.0, 2 * horizon, &set, model, weights)?;
    // Compare on the fine grid; the coarse interpolant at half-steps is the
    // average of its neighbors.
    let mut gap = 0.0f64;
    for j in 0..fine.len() {
        let coarse_at = if j % 2 == 0 {
            coarse[j / 2].clone()
        } else {
            (&coarse[j / 2] + &coarse[j / 2 + 1]) * 0.5
        };
        gap = gap.max(numerics::spectral_norm(&(coarse_at - &fine[j])));
    }
    Ok(gap)
}
