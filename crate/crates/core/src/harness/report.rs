//! Plain-text summaries of experiment CSV files, with pass/fail checks
//! against configurable thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::experiment::MetricsRow;

/// Thresholds for the summary's pass/fail column.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// A scheme "converged" when its final median action error is below this
    /// fraction of the value at the early reference checkpoint.
    pub u_err_ratio: f64,
    /// Early checkpoint used as the convergence reference.
    pub early_k: usize,
    /// "Stable" requires zero divergence fraction and no growth of the mean
    /// squared state beyond this factor between the mid checkpoint and the
    /// final one.
    pub growth_factor: f64,
    /// Mid checkpoint for the growth comparison.
    pub mid_k: usize,
    /// Mean squared state above this value marks a scheme as blown up even
    /// if no individual run crossed the freeze threshold.
    pub divergence_mean: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            u_err_ratio: 0.01,
            early_k: 100,
            growth_factor: 2.0,
            mid_k: 1000,
            divergence_mean: 1e6,
        }
    }
}

pub fn load_thresholds(path: &Path) -> Result<Thresholds> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn parse_f64(field: &str, value: &str, line: usize) -> Result<f64> {
    if value == "nan" {
        return Ok(f64::NAN);
    }
    value.parse().map_err(|_| Error::Csv {
        line,
        detail: format!("{field}: not a number: {value:?}"),
    })
}

/// Parse a metrics CSV produced by the `run` command. Comment lines (`#`)
/// are skipped; the column header is validated.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    const HEADER: &str = "k,scheme,median_u_err_sq,mean_x_norm_sq,mean_stage_cost,diverged_fraction";
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != HEADER {
                return Err(Error::Csv {
                    line: line_no,
                    detail: format!("unexpected header: {line:?}"),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Csv {
                line: line_no,
                detail: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let k: usize = fields[0].parse().map_err(|_| Error::Csv {
            line: line_no,
            detail: format!("k: not an integer: {:?}", fields[0]),
        })?;
        let diverged_fraction = parse_f64("diverged_fraction", fields[5], line_no)?;
        if !(0.0..=1.0).contains(&diverged_fraction) {
            return Err(Error::Csv {
                line: line_no,
                detail: format!("diverged_fraction out of [0,1]: {diverged_fraction}"),
            });
        }
        rows.push(MetricsRow {
            k,
            scheme: fields[1].to_string(),
            median_u_err_sq: parse_f64("median_u_err_sq", fields[2], line_no)?,
            mean_x_norm_sq: parse_f64("mean_x_norm_sq", fields[3], line_no)?,
            mean_stage_cost: parse_f64("mean_stage_cost", fields[4], line_no)?,
            diverged_fraction,
        });
    }
    if rows.is_empty() {
        return Err(Error::Csv { line: 0, detail: "no rows".into() });
    }
    Ok(rows)
}

fn at_or_before(rows: &[&MetricsRow], k: usize) -> Option<usize> {
    rows.iter().rposition(|r| r.k <= k)
}

/// Render the plain-text summary: per-scheme final metrics and pass/fail
/// against the thresholds.
pub fn summarize(rows: &[MetricsRow], th: &Thresholds) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Csv { line: 0, detail: "no rows".into() });
    }
    let mut by_scheme: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        by_scheme.entry(&row.scheme).or_default().push(row);
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>14} {:>14} {:>14} {:>10}  {}",
        "scheme", "final_k", "median_u_err2", "mean_x2", "mean_cost", "div_frac", "verdict"
    );
    for (scheme, mut srows) in by_scheme {
        srows.sort_by_key(|r| r.k);
        let last = srows.last().expect("nonempty scheme group");

        let converged = at_or_before(&srows, th.early_k).map(|i| {
            let early = srows[i].median_u_err_sq;
            last.median_u_err_sq.is_finite()
                && early.is_finite()
                && (last.median_u_err_sq < th.u_err_ratio * early
                    || last.median_u_err_sq == 0.0)
        });
        let stable = {
            let no_divergence = last.diverged_fraction == 0.0
                && last.mean_x_norm_sq.is_finite()
                && last.mean_x_norm_sq < th.divergence_mean;
            let bounded_growth = at_or_before(&srows, th.mid_k)
                .map(|i| last.mean_x_norm_sq <= th.growth_factor * srows[i].mean_x_norm_sq)
                .unwrap_or(true);
            no_divergence && bounded_growth
        };

        let verdict = format!(
            "converged={} stable={}",
            match converged {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "n/a",
            },
            if stable { "pass" } else { "fail" },
        );
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>14.6e} {:>14.6e} {:>14.6e} {:>10.3} {}",
            scheme,
            last.k,
            last.median_u_err_sq,
            last.mean_x_norm_sq,
            last.mean_stage_cost,
            last.diverged_fraction,
            verdict,
        );
    }
    Ok(out)
}

/// Load one or more metrics CSV files and produce the combined summary.
pub fn report(paths: &[std::path::PathBuf], th: &Thresholds) -> Result<String> {
    let mut rows = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        rows.extend(parse_metrics_csv(&text)?);
    }
    summarize(&rows, th)
}
