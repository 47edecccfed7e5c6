//! Trajectory tables and summary documents.
//!
//! Trajectory rows are comma-delimited decimal text with 17 significant
//! digits, which round-trips doubles and keeps identical runs
//! byte-identical.

use std::io::Write;
use std::path::Path;

use liaison_core::affine::{AffineBodyModel, AffineRecord};
use liaison_core::reactions::ReactionModel;
use liaison_core::solver::{Scenario, Summary, TrajectoryRecord};

use crate::scenario::CliError;
use crate::schema::{SummaryDoc, SummaryIntegrator, SummaryMetrics};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(e: std::io::Error, path: &Path) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Multiplier column names of a generic scenario, in block order.
pub fn multiplier_columns(scenario: &Scenario<f64>) -> Vec<String> {
    let mut names = Vec::new();
    let mut lam = 0usize;
    let mut mu = 0usize;
    for block in &scenario.blocks {
        match block.model {
            ReactionModel::Vakonomic => {
                for _ in 0..block.set.count() {
                    mu += 1;
                    names.push(format!("mu{mu}"));
                }
                for j in (mu - block.set.count() + 1)..=mu {
                    names.push(format!("mudot{j}"));
                }
            }
            _ => {
                for _ in 0..block.set.count() {
                    lam += 1;
                    names.push(format!("lam{lam}"));
                }
            }
        }
    }
    names
}

/// Write the trajectory table of a generic run.
pub fn write_generic_trajectory(
    path: &Path,
    scenario: &Scenario<f64>,
    record: &TrajectoryRecord<f64>,
) -> Result<(), CliError> {
    let k = scenario.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=k).map(|i| format!("q{i}")));
    header.extend((1..=k).map(|i| format!("v{i}")));
    header.extend(multiplier_columns(scenario));
    header.extend(["E".into(), "c_res".into(), "r_power".into()]);

    let mut out = std::fs::File::create(path).map_err(|e| io_err(e, path))?;
    writeln!(out, "{}", header.join(",")).map_err(|e| io_err(e, path))?;
    for i in 0..record.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(fmt_f64(record.times[i]));
        row.extend(record.qs[i].iter().map(|x| fmt_f64(*x)));
        row.extend(record.vs[i].iter().map(|x| fmt_f64(*x)));
        for m in &record.multipliers[i] {
            row.extend(m.values.iter().map(|x| fmt_f64(*x)));
            if let Some(rates) = &m.rates {
                row.extend(rates.iter().map(|x| fmt_f64(*x)));
            }
        }
        row.push(fmt_f64(record.energies[i]));
        row.push(fmt_f64(record.residual_norm(i)));
        row.push(fmt_f64(record.reaction_powers[i]));
        writeln!(out, "{}", row.join(",")).map_err(|e| io_err(e, path))?;
    }
    Ok(())
}

/// Write the trajectory table of a structured affine run; coordinates are
/// the flattened `(r, phi)` block and the multiplier columns are the
/// reaction coordinates in the variant basis.
pub fn write_affine_trajectory(
    path: &Path,
    model: &AffineBodyModel<f64>,
    record: &AffineRecord<f64>,
) -> Result<(), CliError> {
    let n = model.spatial_dim;
    let k = n + n * n;
    let d_r = record.multipliers.first().map(|m| m.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=k).map(|i| format!("q{i}")));
    header.extend((1..=k).map(|i| format!("v{i}")));
    header.extend((1..=d_r).map(|i| format!("lam{i}")));
    header.extend(["E".into(), "c_res".into(), "r_power".into()]);

    let mut out = std::fs::File::create(path).map_err(|e| io_err(e, path))?;
    writeln!(out, "{}", header.join(",")).map_err(|e| io_err(e, path))?;
    for i in 0..record.len() {
        let state = &record.states[i];
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(fmt_f64(record.times[i]));
        row.extend(state.r.iter().map(|x| fmt_f64(*x)));
        for r in 0..n {
            for c in 0..n {
                row.push(fmt_f64(state.phi[(r, c)]));
            }
        }
        row.extend(state.rdot.iter().map(|x| fmt_f64(*x)));
        for r in 0..n {
            for c in 0..n {
                row.push(fmt_f64(state.phidot[(r, c)]));
            }
        }
        row.extend(record.multipliers[i].iter().map(|x| fmt_f64(*x)));
        row.push(fmt_f64(record.energies[i]));
        row.push(fmt_f64(record.residuals[i]));
        row.push(fmt_f64(record.reaction_powers[i]));
        writeln!(out, "{}", row.join(",")).map_err(|e| io_err(e, path))?;
    }
    Ok(())
}

pub struct SummaryInputs<'a> {
    pub scenario_name: &'a str,
    pub model_name: &'a str,
    pub dimension: usize,
    pub constraint_counts: Vec<usize>,
    pub h: f64,
    pub t_end: f64,
    pub method: &'a str,
    pub projection: bool,
    pub baumgarte: Option<(f64, f64)>,
    pub stride: usize,
    pub final_time: f64,
    pub wall_time_s: f64,
}

pub fn build_summary(inputs: &SummaryInputs<'_>, summary: &Summary<f64>) -> SummaryDoc {
    SummaryDoc {
        scenario: inputs.scenario_name.to_string(),
        model: inputs.model_name.to_string(),
        dimension: inputs.dimension,
        constraint_counts: inputs.constraint_counts.clone(),
        integrator: SummaryIntegrator {
            h: inputs.h,
            t_end: inputs.t_end,
            method: inputs.method.to_string(),
            projection: inputs.projection,
            baumgarte: inputs.baumgarte.map(|(a, b)| vec![a, b]),
            stride: inputs.stride,
        },
        metrics: SummaryMetrics {
            samples: summary.samples,
            max_constraint_residual: summary.max_residual,
            relative_energy_drift: summary.energy_drift,
            max_reaction_power: summary.max_reaction_power,
            max_normalized_reaction_power: summary.max_normalized_power,
            final_time: inputs.final_time,
            wall_time_s: inputs.wall_time_s,
        },
    }
}

pub fn write_summary(path: &Path, doc: &SummaryDoc) -> Result<(), CliError> {
    let text = toml::to_string_pretty(doc)
        .map_err(|e| CliError::Io(format!("summary serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| io_err(e, path))
}
