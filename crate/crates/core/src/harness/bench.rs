//! Wall-clock benchmarks across a family of scenarios. Absolute times are
//! hardware-bound; only the ordinal relationships between schemes are
//! meaningful and asserted downstream.
//!
//! The sweep families include plants that are not mean-square stabilizable
//! through the channel, so a closed loop would diverge and freeze, skipping
//! the very computations being measured. The benchmark therefore drives each
//! scheme with an exogenous bounded state sequence: every scheme performs its
//! full per-slot work (action synthesis plus learning update) at every slot,
//! and the measured cost is the algorithm's, not the trajectory's.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baselines::{baseline1_step, baseline2_step, ExtTransition, QKernel, Transition};
use crate::error::{Error, Result};
use crate::learner::{control_action, sa_step, LearnerState};
use crate::model::{sample_channel, stage_cost, ExtendedState};
use crate::nme::ValueKernel;

use super::config::ScenarioConfig;
use super::experiment::{run_seed, Scheme, TOOL_VERSION};

#[derive(Debug, Clone)]
pub struct TimingRow {
    pub config: String,
    pub state_dim: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub scheme: String,
    /// Median over the repetitions of the wall-clock seconds for `runs`
    /// passes of `horizon` slots each.
    pub median_seconds: f64,
}

const REPETITIONS: usize = 5;

fn normal_vector(rng: &mut ChaCha12Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// One pass of `horizon` slots of the scheme's per-slot work on exogenous
/// states. The genie acts through a fixed kernel: its per-slot cost depends
/// only on the dimensions, not on the kernel values.
fn timed_pass(cfg: &ScenarioConfig, scheme: Scheme, seed: u64) -> Result<()> {
    let model = &cfg.plant;
    let weights = &cfg.weights;
    let s = model.state_dim();
    let n_t = cfg.channel.n_t;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let genie_kernel = ValueKernel::from_symmetric(&DMatrix::identity(s, s));
    let mut learner = LearnerState::new(s, cfg.schedule);
    let mut qk = match scheme {
        Scheme::Baseline1 => Some(QKernel::new(s + n_t, n_t)?),
        Scheme::Baseline2 => Some(QKernel::new(1 + s + cfg.channel.n_r * n_t + n_t, n_t)?),
        _ => None,
    };
    let mut pending = DVector::zeros(n_t);
    let mut pending_draw = sample_channel(&mut rng, &cfg.channel);

    for k in 1..=cfg.horizon {
        let draw =
            std::mem::replace(&mut pending_draw, sample_channel(&mut rng, &cfg.channel));
        let x = normal_vector(&mut rng, s);
        let x_next = normal_vector(&mut rng, s);
        let ext = ExtendedState { x, draw };

        match scheme {
            Scheme::Proposed => {
                let _u = control_action(&learner.p_k, &ext, model, weights);
                match sa_step(&learner, &ext.draw, model, weights) {
                    Ok(next) => learner = next,
                    // On an unstabilizable plant the kernel estimate grows
                    // without bound; re-center it so every slot keeps paying
                    // the same per-slot compute.
                    Err(Error::LearnerDiverged { .. }) => {
                        learner = LearnerState::new(s, cfg.schedule);
                    }
                    Err(e) => return Err(e),
                }
            }
            Scheme::Genie => {
                let _u = control_action(&genie_kernel, &ext, model, weights);
            }
            Scheme::Baseline1 => {
                let u = pending.clone();
                let cost = stage_cost(&ext, &u, weights);
                let obs = Transition { x: ext.x.clone(), u, cost, x_next };
                pending = baseline1_step(qk.as_mut().expect("b1 kernel"), &obs, k, &mut rng);
            }
            Scheme::Baseline2 => {
                let u = pending.clone();
                let cost = stage_cost(&ext, &u, weights);
                let obs = ExtTransition {
                    x: ext.x.clone(),
                    draw: ext.draw.clone(),
                    u,
                    cost,
                    x_next,
                    draw_next: pending_draw.clone(),
                };
                pending = baseline2_step(qk.as_mut().expect("b2 kernel"), &obs, k, &mut rng);
            }
        }
        if pending.iter().any(|v| !v.is_finite()) {
            pending = DVector::zeros(n_t);
        }
    }
    Ok(())
}

fn timed_workload(cfg: &ScenarioConfig, scheme: Scheme) -> Result<()> {
    for run in 0..cfg.runs {
        timed_pass(cfg, scheme, run_seed(cfg.master_seed, run as u64, 0xBE))?;
    }
    Ok(())
}

/// Time each scheme on each scenario of the family: one untimed warm-up,
/// then the median of five timed repetitions.
pub fn bench_cpu(family: &[ScenarioConfig], schemes: &[Scheme]) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for cfg in family {
        for &scheme in schemes {
            timed_workload(cfg, scheme)?;
            let mut times = Vec::with_capacity(REPETITIONS);
            for _ in 0..REPETITIONS {
                let start = Instant::now();
                timed_workload(cfg, scheme)?;
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite timing"));
            rows.push(TimingRow {
                config: cfg.name.clone(),
                state_dim: cfg.plant.state_dim(),
                n_t: cfg.channel.n_t,
                n_r: cfg.channel.n_r,
                scheme: scheme.label().into(),
                median_seconds: times[REPETITIONS / 2],
            });
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = format!("# csv_schema=v1 tool=mimo-lqr/{TOOL_VERSION} kind=timing\n");
    out.push_str("config,state_dim,n_t,n_r,scheme,median_seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.config, r.state_dim, r.n_t, r.n_r, r.scheme, r.median_seconds
        );
    }
    out
}
