//! Emulator validation on held-out simulator runs, and per-wave regression
//! summaries.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emulator::Emulator;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::runs::RunTable;
use crate::wave::WaveChain;

/// Standardized errors beyond this magnitude count as exceedances.
pub const DEFAULT_THRESHOLD: f64 = 3.0;
/// An output fails when more than this fraction of points exceed the threshold.
pub const DEFAULT_MAX_EXCEEDANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub threshold: f64,
    pub max_exceedance: f64,
    pub outputs: Vec<usize>,
    pub run_ids: Vec<u64>,
    /// `errors[k][r]`: standardized error of output `outputs[k]` at run `r`.
    pub errors: Vec<Vec<f64>>,
    pub exceedance: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub output_pass: Vec<bool>,
    pub pass: bool,
}

impl DiagnosticReport {
    pub fn failing_outputs(&self) -> Vec<usize> {
        self.outputs
            .iter()
            .zip(&self.output_pass)
            .filter_map(|(o, p)| (!p).then_some(*o))
            .collect()
    }

    /// One row per held-out run: run id then one standardized error per output.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::parse("diagnostics", e);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["run_id".to_string()];
        header.extend(self.outputs.iter().map(|o| format!("std_err_f{o}")));
        w.write_record(&header).map_err(err)?;
        for (r, id) in self.run_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.errors.iter().map(|e| fmt_f64(e[r])));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("diagnostics", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }
}

/// `(f − mean) / sqrt(max(var, floor))` with the floor set by the nugget.
fn standardized_error(em: &Emulator, x: &[f64], value: f64) -> f64 {
    let p = em.emulate(x);
    let prior = em.residual_variance() + em.nugget_variance();
    let floor = em.nugget_variance().max(1e-10 * prior);
    let denom = p.variance.max(floor).sqrt();
    let diff = value - p.mean;
    if denom > 0.0 {
        diff / denom
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

fn active_key(em: &Emulator, x: &[f64]) -> Vec<u64> {
    em.active_set().iter().map(|&k| x[k].to_bits()).collect()
}

/// Validates emulators against held-out runs. Diagnostic runs must not share
/// run ids or (active-coordinate) points with any emulator's training set.
pub fn held_out_diagnostics(emulators: &[Emulator], diag_runs: &RunTable, threshold: f64) -> Result<DiagnosticReport> {
    let mut shared = 0usize;
    for em in emulators {
        let ids: HashSet<u64> = em.params().training_ids.iter().copied().collect();
        let pts: HashSet<Vec<u64>> = em
            .params()
            .training_points
            .iter()
            .map(|p| p.iter().map(|v| v.to_bits()).collect())
            .collect();
        shared += diag_runs
            .ok_rows()
            .filter(|r| ids.contains(&r.run_id) || (!em.active_set().is_empty() && pts.contains(&active_key(em, &r.unit))))
            .count();
    }
    if shared > 0 {
        return Err(Error::DiagnosticOverlap { count: shared });
    }
    diagnose_unchecked(emulators, diag_runs, threshold)
}

/// Same as [`held_out_diagnostics`] without the disjointness check. Only
/// meaningful for testing emulators on their own training runs.
#[doc(hidden)]
pub fn diagnose_unchecked(emulators: &[Emulator], diag_runs: &RunTable, threshold: f64) -> Result<DiagnosticReport> {
    use rayon::prelude::*;

    if !(threshold > 0.0) {
        return Err(Error::config("diagnostics.threshold", "must be positive"));
    }
    let rows: Vec<_> = diag_runs.ok_rows().collect();
    if rows.is_empty() {
        return Err(Error::config("diagnostics", "no successful diagnostic runs"));
    }
    let errors: Vec<Vec<f64>> = emulators
        .par_iter()
        .map(|em| {
            rows.iter()
                .map(|r| standardized_error(em, &r.unit, r.outputs[em.output_index()]))
                .collect()
        })
        .collect();
    let n = rows.len() as f64;
    let exceedance: Vec<f64> = errors
        .iter()
        .map(|e| e.iter().filter(|v| !(v.abs() <= threshold)).count() as f64 / n)
        .collect();
    let mean_error = errors.iter().map(|e| e.iter().sum::<f64>() / n).collect();
    let output_pass: Vec<bool> = exceedance.iter().map(|f| *f <= DEFAULT_MAX_EXCEEDANCE).collect();
    Ok(DiagnosticReport {
        threshold,
        max_exceedance: DEFAULT_MAX_EXCEEDANCE,
        outputs: emulators.iter().map(Emulator::output_index).collect(),
        run_ids: rows.iter().map(|r| r.run_id).collect(),
        errors,
        exceedance,
        mean_error,
        pass: output_pass.iter().all(|p| *p),
        output_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionRow {
    pub wave: usize,
    pub output: usize,
    pub residual_sd: f64,
    pub adjusted_r2: f64,
    pub basis_size: usize,
    pub degree: usize,
    pub active_inputs: usize,
    pub n_runs: usize,
}

/// Residual standard deviation and adjusted R² of every emulator trend, wave
/// by wave.
pub fn regression_progression(chain: &WaveChain) -> Vec<ProgressionRow> {
    chain
        .waves()
        .iter()
        .flat_map(|w| {
            w.emulators().iter().map(move |em| {
                let s = em.summary();
                ProgressionRow {
                    wave: w.index(),
                    output: em.output_index(),
                    residual_sd: s.residual_sd,
                    adjusted_r2: s.adjusted_r2,
                    basis_size: s.basis_size,
                    degree: s.degree,
                    active_inputs: s.active_set.len(),
                    n_runs: s.n_runs,
                }
            })
        })
        .collect()
}

pub fn write_progression_csv<W: Write>(rows: &[ProgressionRow], out: W) -> Result<()> {
    let err = |e: csv::Error| Error::parse("regression progression", e);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["wave", "output", "residual_sd", "adjusted_r2", "basis_size", "degree", "active_inputs", "n_runs"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.wave.to_string(),
            r.output.to_string(),
            fmt_f64(r.residual_sd),
            fmt_f64(r.adjusted_r2),
            r.basis_size.to_string(),
            r.degree.to_string(),
            r.active_inputs.to_string(),
            r.n_runs.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("regression progression", e))
}
