//! Simulator interface, the synthetic luminosity-function stand-in, and an
//! adapter for external executables.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::VarianceBudget;
use crate::error::{Error, Result};
use crate::space::ParameterSpace;

/// Ways a single simulator run can fail. Failed runs are recorded, not dropped.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimFailure {
    #[error("could not start `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error("simulator exited with status {code:?}")]
    Exit { code: Option<i32>, stderr: String },
    #[error("simulator timed out after {secs} s")]
    Timeout { secs: f64 },
    #[error("output file {0} missing")]
    MissingOutput(PathBuf),
    #[error("output column {column} missing or malformed: {reason}")]
    Parse { column: usize, reason: String },
    #[error("expected {expected} outputs, got {found}")]
    WrongLength { expected: usize, found: usize },
    #[error("input error: {0}")]
    Input(String),
}

impl SimFailure {
    pub fn kind(&self) -> &'static str {
        match self {
            SimFailure::Spawn { .. } => "spawn",
            SimFailure::Exit { .. } => "exit",
            SimFailure::Timeout { .. } => "timeout",
            SimFailure::MissingOutput(_) => "missing-output",
            SimFailure::Parse { .. } => "parse",
            SimFailure::WrongLength { .. } => "wrong-length",
            SimFailure::Input(_) => "input",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulatorKind {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    pub output_count: usize,
    pub output_labels: Vec<String>,
    pub kind: SimulatorKind,
}

impl SimulatorSpec {
    pub fn new(output_labels: Vec<String>, kind: SimulatorKind) -> Result<Self> {
        if output_labels.is_empty() {
            return Err(Error::config("simulator.labels", "at least one output is required"));
        }
        Ok(SimulatorSpec {
            output_count: output_labels.len(),
            output_labels,
            kind,
        })
    }
}

/// A simulator mapping a unit-cube point to an output vector.
///
/// Implementations must be safe to call from many threads at once.
pub trait Simulator: Sync {
    fn spec(&self) -> &SimulatorSpec;

    fn run(&self, x: &[f64]) -> Result<Vec<f64>, SimFailure>;
}

/// Coefficients of the synthetic Schechter-form luminosity function.
///
/// Amplitude, faint-end slope and break magnitude are affine in the inputs:
/// `A(x) = a0 + a·x`, `α(x) = α0 + b·x`, `M*(x) = M0 + c·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCoefficients {
    pub a0: f64,
    pub a: Vec<f64>,
    pub alpha0: f64,
    pub b: Vec<f64>,
    pub m0: f64,
    pub c: Vec<f64>,
    pub bins: Vec<f64>,
}

impl ToyCoefficients {
    /// Eleven bins from -22.5 to -17.5 in steps of 0.5, break at the median bin.
    pub fn default_bins() -> Vec<f64> {
        (0..11).map(|j| -22.5 + 0.5 * j as f64).collect()
    }

    /// Default stand-in: weights decaying geometrically with input index so
    /// that the first few inputs dominate.
    pub fn geometric(dimension: usize) -> Self {
        let decay = |scale: f64| -> Vec<f64> {
            (0..dimension).map(|k| scale * 0.6f64.powi(k as i32)).collect()
        };
        // Alternate signs on the slope weights so inputs do not all act alike.
        let mut b = decay(0.25);
        for (k, v) in b.iter_mut().enumerate() {
            if k % 2 == 1 {
                *v = -*v;
            }
        }
        let bins = Self::default_bins();
        ToyCoefficients {
            a0: -2.0,
            a: decay(0.5),
            alpha0: -1.0,
            b,
            m0: bins[bins.len() / 2],
            c: decay(0.4),
            bins,
        }
    }

    /// Weights nonzero only on `active` inputs (equal magnitudes).
    pub fn with_active(dimension: usize, active: &[usize]) -> Self {
        let mut co = Self::geometric(dimension);
        for k in 0..dimension {
            let on = active.contains(&k);
            co.a[k] = if on { 0.4 } else { 0.0 };
            co.b[k] = if on { if k % 2 == 0 { 0.15 } else { -0.15 } } else { 0.0 };
            co.c[k] = if on { 0.3 } else { 0.0 };
        }
        co
    }

    pub fn dimension(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.len();
        if d == 0 {
            return Err(Error::config("simulator.toy.a", "weights must not be empty"));
        }
        if self.b.len() != d {
            return Err(Error::config("simulator.toy.b", format!("length {} != {d}", self.b.len())));
        }
        if self.c.len() != d {
            return Err(Error::config("simulator.toy.c", format!("length {} != {d}", self.c.len())));
        }
        if self.bins.is_empty() || self.bins.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("simulator.toy.bins", "bin centers must be strictly increasing"));
        }
        Ok(())
    }

    /// Closed-form log number density in every bin.
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let dot = |w: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let amp = self.a0 + dot(&self.a);
        let alpha = self.alpha0 + dot(&self.b);
        let m_star = self.m0 + dot(&self.c);
        self.bins
            .iter()
            .map(|&m| {
                let log_t = 0.4 * (m_star - m);
                let t = 10f64.powf(log_t);
                amp + (alpha + 1.0) * log_t - t / std::f64::consts::LN_10
            })
            .collect()
    }
}

pub struct ToySimulator {
    coeffs: ToyCoefficients,
    spec: SimulatorSpec,
}

impl ToySimulator {
    pub fn new(coeffs: ToyCoefficients) -> Result<Self> {
        coeffs.validate()?;
        let labels = coeffs.bins.iter().map(|m| format!("M={m}")).collect();
        let spec = SimulatorSpec::new(labels, SimulatorKind::Toy)?;
        Ok(ToySimulator { coeffs, spec })
    }

    pub fn coefficients(&self) -> &ToyCoefficients {
        &self.coeffs
    }
}

impl Simulator for ToySimulator {
    fn spec(&self) -> &SimulatorSpec {
        &self.spec
    }

    fn run(&self, x: &[f64]) -> Result<Vec<f64>, SimFailure> {
        if x.len() != self.coeffs.dimension() {
            return Err(SimFailure::Input(format!(
                "point has {} coordinates, simulator expects {}",
                x.len(),
                self.coeffs.dimension()
            )));
        }
        Ok(self.coeffs.evaluate(x))
    }
}

/// How to drive an external executable.
///
/// The executable receives raw-unit inputs as a file of `name = value` lines
/// and must leave a whitespace- or comma-separated numeric output file behind.
/// In `args`, `{input}`, `{output}` and `{dir}` are replaced by the input file,
/// output file and per-run working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub command: String,
    #[serde(default = "default_args")]
    pub args: Vec<String>,
    #[serde(default = "default_input_name")]
    pub input_file: String,
    #[serde(default = "default_output_name")]
    pub output_file: String,
    /// Zero-based column of each simulator output in the output file.
    pub columns: Vec<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

fn default_args() -> Vec<String> {
    vec!["{input}".into(), "{output}".into()]
}
fn default_input_name() -> String {
    "input.txt".into()
}
fn default_output_name() -> String {
    "output.txt".into()
}
fn default_timeout() -> f64 {
    3600.0
}

pub struct ExternalSimulator {
    config: ExternalConfig,
    space: ParameterSpace,
    spec: SimulatorSpec,
}

impl ExternalSimulator {
    pub fn new(config: ExternalConfig, space: ParameterSpace) -> Result<Self> {
        if config.command.trim().is_empty() {
            return Err(Error::config("simulator.external.command", "must not be empty"));
        }
        if config.columns.is_empty() {
            return Err(Error::config("simulator.external.columns", "at least one column is required"));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(Error::config("simulator.external.timeout_secs", "must be positive"));
        }
        let labels = if config.labels.is_empty() {
            config.columns.iter().map(|c| format!("col{c}")).collect()
        } else if config.labels.len() == config.columns.len() {
            config.labels.clone()
        } else {
            return Err(Error::config(
                "simulator.external.labels",
                "must have one label per column",
            ));
        };
        let spec = SimulatorSpec::new(labels, SimulatorKind::External)?;
        Ok(ExternalSimulator { config, space, spec })
    }

    fn input_text(&self, raw: &[f64]) -> String {
        let mut s = String::new();
        for (name, v) in self.space.names().zip(raw) {
            let _ = writeln!(s, "{name} = {}", crate::io::fmt_f64(*v));
        }
        s
    }
}

/// Reads the requested columns from the first data line of an output file.
pub fn parse_output_columns(text: &str, columns: &[usize]) -> Result<Vec<f64>, SimFailure> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    let tokens: Vec<&str> = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .collect();
    columns
        .iter()
        .map(|&c| {
            let tok = tokens.get(c).ok_or_else(|| SimFailure::Parse {
                column: c,
                reason: format!("line has only {} columns", tokens.len()),
            })?;
            tok.parse::<f64>().map_err(|_| SimFailure::Parse {
                column: c,
                reason: format!("`{tok}` is not a number"),
            })
        })
        .collect()
}

impl Simulator for ExternalSimulator {
    fn spec(&self) -> &SimulatorSpec {
        &self.spec
    }

    fn run(&self, x: &[f64]) -> Result<Vec<f64>, SimFailure> {
        let raw = self
            .space
            .from_unit(x)
            .map_err(|e| SimFailure::Input(e.to_string()))?;
        let dir = tempfile::Builder::new()
            .prefix("histmatch-run-")
            .tempdir()
            .map_err(|e| SimFailure::Spawn {
                command: self.config.command.clone(),
                reason: format!("temp dir: {e}"),
            })?;
        let input = dir.path().join(&self.config.input_file);
        let output = dir.path().join(&self.config.output_file);
        std::fs::write(&input, self.input_text(&raw)).map_err(|e| SimFailure::Spawn {
            command: self.config.command.clone(),
            reason: format!("writing input: {e}"),
        })?;
        let args: Vec<String> = self
            .config
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
                    .replace("{dir}", &dir.path().to_string_lossy())
            })
            .collect();
        let mut child = Command::new(&self.config.command)
            .args(&args)
            .current_dir(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SimFailure::Spawn {
                command: self.config.command.clone(),
                reason: e.to_string(),
            })?;
        let limit = Duration::from_secs_f64(self.config.timeout_secs);
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= limit => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(SimFailure::Timeout {
                        secs: self.config.timeout_secs,
                    });
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    return Err(SimFailure::Spawn {
                        command: self.config.command.clone(),
                        reason: e.to_string(),
                    })
                }
            }
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut s) = child.stderr.take() {
                use std::io::Read;
                let _ = s.read_to_string(&mut stderr);
            }
            return Err(SimFailure::Exit {
                code: status.code(),
                stderr,
            });
        }
        let text = std::fs::read_to_string(&output).map_err(|_| SimFailure::MissingOutput(output.clone()))?;
        let values = parse_output_columns(&text, &self.config.columns)?;
        if values.len() != self.spec.output_count {
            return Err(SimFailure::WrongLength {
                expected: self.spec.output_count,
                found: values.len(),
            });
        }
        Ok(values)
    }
}

/// Draws from a zero-mean Gaussian with covariance `cov` (which may be
/// singular) via its eigendecomposition.
fn gaussian_draw<R: rand::Rng>(cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = cov.nrows();
    let normals: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    if cov.iter().all(|v| *v == 0.0) {
        return DVector::zeros(n);
    }
    let eig = cov.clone().symmetric_eigen();
    let scaled = DVector::from_fn(n, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * normals[i]);
    &eig.eigenvectors * scaled
}

/// Synthetic observations `z = f(x*) + ε + e` with Gaussian draws for the
/// discrepancy and observation error.
pub fn synthesize_observations(
    simulator: &dyn Simulator,
    x_star: &[f64],
    budget: &VarianceBudget,
    seed: u64,
) -> Result<Vec<f64>> {
    let f = simulator.run(x_star)?;
    if f.len() != budget.outputs() {
        return Err(Error::Dimension {
            context: "observation budget".into(),
            expected: f.len(),
            found: budget.outputs(),
        });
    }
    for (name, m) in [
        ("discrepancy", budget.total_discrepancy()),
        ("observation", budget.total_observation()),
    ] {
        let scale = (0..m.nrows()).map(|i| m[(i, i)]).fold(0.0f64, f64::max).max(1.0);
        if crate::linalg::min_eigenvalue(m) < -crate::budget::PSD_TOLERANCE * scale {
            return Err(Error::config(format!("budget.{name}"), "total covariance is not positive semidefinite"));
        }
    }
    let mut rng = crate::seed::rng(seed);
    let eps = gaussian_draw(budget.total_discrepancy(), &mut rng);
    let err = gaussian_draw(budget.total_observation(), &mut rng);
    Ok(f.iter()
        .enumerate()
        .map(|(i, v)| v + eps[i] + err[i])
        .collect())
}
