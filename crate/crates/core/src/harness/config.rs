//! Scenario configuration: a TOML-flavoured text format with row-major
//! matrix literals, validated into ready-to-run model objects.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::StepSchedule;
use crate::model::{ChannelConfig, CostWeights, PlantModel};
use crate::numerics::ToleranceProfile;

/// A fully validated scenario, ready to drive experiments.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub plant: PlantModel,
    pub weights: CostWeights,
    pub channel: ChannelConfig,
    pub schedule: StepSchedule,
    pub horizon: usize,
    pub runs: usize,
    pub master_seed: u64,
    pub noise_free: bool,
    pub literal_eq9: bool,
    pub xi: f64,
    pub sample_count: usize,
    pub tol: ToleranceProfile,
    /// SHA-256 of the raw config text, carried into output headers.
    pub sha256: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    plant: RawPlant,
    weights: RawWeights,
    channel: RawChannel,
    #[serde(default)]
    schedule: RawSchedule,
    run: RawRun,
    #[serde(default)]
    solver: RawSolver,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    x0: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    n_t: usize,
    n_r: usize,
    p_access: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    a0: f64,
    tau: f64,
    gamma_exp: f64,
}

impl Default for RawSchedule {
    fn default() -> Self {
        let d = StepSchedule::default();
        Self { a0: d.a0, tau: d.tau, gamma_exp: d.gamma_exp }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    horizon: usize,
    runs: usize,
    master_seed: u64,
    #[serde(default)]
    noise_free: bool,
    #[serde(default)]
    literal_eq9: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    xi: f64,
    sample_count: usize,
    rank_rel_tol: Option<f64>,
    psd_eig_tol: Option<f64>,
    residual_tol: Option<f64>,
}

impl Default for RawSolver {
    fn default() -> Self {
        Self {
            xi: 0.5,
            sample_count: 20_000,
            rank_rel_tol: None,
            psd_eig_tol: None,
            residual_tol: None,
        }
    }
}

fn to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Dimension {
            field: field.into(),
            detail: "matrix literal has no rows".into(),
        });
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Dimension {
            field: field.into(),
            detail: "matrix literal has an empty first row".into(),
        });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Dimension {
                field: field.into(),
                detail: format!("row {i} has {} entries, expected {ncols}", row.len()),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Parse and validate scenario text. `name` labels error messages and the
/// resulting scenario.
pub fn parse_scenario(text: &str, name: &str) -> Result<ScenarioConfig> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Parse {
        source_name: name.into(),
        detail: e.to_string(),
    })?;

    let a = to_matrix(&raw.plant.a, "plant.a")?;
    let b = to_matrix(&raw.plant.b, "plant.b")?;
    let w = to_matrix(&raw.plant.w, "plant.w")?;
    let s = a.nrows();
    let x0 = match &raw.plant.x0 {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(s),
    };
    let plant = PlantModel::new(a, b, w, x0)?;

    let q = to_matrix(&raw.weights.q, "weights.q")?;
    let r = to_matrix(&raw.weights.r, "weights.r")?;
    let m = to_matrix(&raw.weights.m, "weights.m")?;
    let weights = CostWeights::new(q, r, m)?;

    if weights.q.nrows() != s {
        return Err(Error::Dimension {
            field: "weights.q".into(),
            detail: format!("expected {s}x{s} to match plant.a, got {}x{0}", weights.q.nrows()),
        });
    }
    let channel = ChannelConfig {
        n_r: raw.channel.n_r,
        n_t: raw.channel.n_t,
        p_access: raw.channel.p_access,
    };
    channel.validate()?;
    if channel.n_r != plant.n_r() {
        return Err(Error::Dimension {
            field: "channel.n_r".into(),
            detail: format!("expected {} to match the columns of plant.b, got {}", plant.n_r(), channel.n_r),
        });
    }
    if weights.n_t() != channel.n_t {
        return Err(Error::Dimension {
            field: "weights.r".into(),
            detail: format!(
                "expected {0}x{0} to match channel.n_t, got {1}x{1}",
                channel.n_t,
                weights.n_t()
            ),
        });
    }
    if weights.m.nrows() != channel.n_r {
        return Err(Error::Dimension {
            field: "weights.m".into(),
            detail: format!(
                "expected {0}x{0} to match channel.n_r, got {1}x{1}",
                channel.n_r,
                weights.m.nrows()
            ),
        });
    }

    let schedule = StepSchedule::new(raw.schedule.a0, raw.schedule.tau, raw.schedule.gamma_exp)?;
    if raw.run.horizon == 0 {
        return Err(Error::Invalid("run.horizon must be at least 1".into()));
    }
    if raw.run.runs == 0 {
        return Err(Error::Invalid("run.runs must be at least 1".into()));
    }
    if !(0.0 < raw.solver.xi && raw.solver.xi < 1.0) {
        return Err(Error::Invalid(format!(
            "solver.xi must lie in (0,1), got {}",
            raw.solver.xi
        )));
    }
    if raw.solver.sample_count == 0 {
        return Err(Error::Invalid("solver.sample_count must be at least 1".into()));
    }
    let default_tol = ToleranceProfile::default();
    let tol = ToleranceProfile {
        rank_rel_tol: raw.solver.rank_rel_tol.unwrap_or(default_tol.rank_rel_tol),
        psd_eig_tol: raw.solver.psd_eig_tol.unwrap_or(default_tol.psd_eig_tol),
        residual_tol: raw.solver.residual_tol.unwrap_or(default_tol.residual_tol),
    };
    tol.validate()?;

    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let sha256 = format!("{:x}", hasher.finalize());

    Ok(ScenarioConfig {
        name: name.into(),
        plant,
        weights,
        channel,
        schedule,
        horizon: raw.run.horizon,
        runs: raw.run.runs,
        master_seed: raw.run.master_seed,
        noise_free: raw.run.noise_free,
        literal_eq9: raw.run.literal_eq9,
        xi: raw.solver.xi,
        sample_count: raw.solver.sample_count,
        tol,
        sha256,
    })
}

macro_rules! bundled_list {
    ($($name:literal),+ $(,)?) => {
        &[$(($name, include_str!(concat!("../../configs/", $name)))),+]
    };
}

/// Scenario files compiled into the binary, addressable by file name.
pub const BUNDLED: &[(&str, &str)] = bundled_list![
    "fig3.cfg",
    "fig4.cfg",
    "fig5_S4.cfg",
    "fig5_S5.cfg",
    "fig5_S6.cfg",
    "fig5_S7.cfg",
    "fig5_S8.cfg",
    "fig5_S9.cfg",
    "fig5_S10.cfg",
    "fig5_S11.cfg",
    "fig5_S12.cfg",
    "fig6_Nt2.cfg",
    "fig6_Nt3.cfg",
    "fig6_Nt4.cfg",
    "fig6_Nt5.cfg",
    "fig6_Nt6.cfg",
    "fig7_Nr2.cfg",
    "fig7_Nr3.cfg",
    "fig7_Nr4.cfg",
    "fig7_Nr5.cfg",
    "fig7_Nr6.cfg",
];

/// Look up a bundled scenario by file name (with or without `.cfg`).
pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    let with_ext;
    let key = if name.ends_with(".cfg") {
        name
    } else {
        with_ext = format!("{name}.cfg");
        &with_ext
    };
    BUNDLED.iter().find(|(n, _)| *n == key).map(|(_, text)| *text)
}

/// Load a scenario from disk; when the path does not exist, fall back to the
/// bundled scenario of the same file name.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let display = path.display().to_string();
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return parse_scenario(&text, &display);
    }
    if let Some(text) = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(bundled_scenario)
    {
        return parse_scenario(text, &display);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("config file not found (and not a bundled scenario): {display}"),
    )))
}
