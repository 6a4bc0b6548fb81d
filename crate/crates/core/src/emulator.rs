//! Per-output Bayes linear emulator.
//!
//! Each emulator is a polynomial trend over a small set of active inputs plus
//! a stationary residual process with squared-exponential correlation and an
//! uncorrelated nugget:
//!
//! `f(x) = Σ_j β_j g_j(x_A) + u(x_A) + w(x)`,
//! `Corr(u(x), u(x')) = exp(-‖x_A − x'_A‖² / θ²)`.
//!
//! Fitting is two-stage: least squares for `β` (treated as known afterwards),
//! then the residuals adjust `u` through the Bayes linear update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::runs::RunTable;

pub const FORMAT_VERSION: u32 = 1;

/// Squared-exponential correlation between two active-coordinate vectors.
pub fn correlation(a: &[f64], b: &[f64], theta: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (theta * theta)).exp()
}

/// Bayes linear adjustment of `y` by observing `z`:
///
/// `E_z[y] = E(y) + Cov(y,z) Var(z)⁻¹ (z − E(z))`,
/// `Var_z[y] = Var(y) − Cov(y,z) Var(z)⁻¹ Cov(z,y)`.
///
/// `cross_cov` is `Cov(y, z)` with shape `dim(y) × dim(z)`. `Var(z)` is
/// factorized, never inverted.
pub fn bl_adjust(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cross_cov: &DMatrix<f64>,
    data_cov: &DMatrix<f64>,
    data_mean: &DVector<f64>,
    data: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (ny, nz) = (prior_mean.len(), data.len());
    let check = |ok: bool, what: &str, expected: usize, found: usize| {
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                context: format!("bl_adjust {what}"),
                expected,
                found,
            })
        }
    };
    check(prior_cov.nrows() == ny && prior_cov.ncols() == ny, "prior_cov", ny, prior_cov.nrows())?;
    check(cross_cov.nrows() == ny, "cross_cov rows", ny, cross_cov.nrows())?;
    check(cross_cov.ncols() == nz, "cross_cov cols", nz, cross_cov.ncols())?;
    check(data_cov.nrows() == nz && data_cov.ncols() == nz, "data_cov", nz, data_cov.nrows())?;
    check(data_mean.len() == nz, "data_mean", nz, data_mean.len())?;

    let chol = Cholesky::new(data_cov)?;
    let weights = chol.solve(&(data - data_mean));
    let mean = prior_mean + cross_cov * weights;
    // W = L⁻¹ Cov(z, y); Var_z[y] = Var(y) − Wᵀ W
    let mut w = cross_cov.transpose();
    for mut col in w.column_iter_mut() {
        chol.solve_lower_in_place(col.as_mut_slice());
    }
    let cov = prior_cov - w.transpose() * &w;
    Ok((mean, cov))
}

/// Monomials of total degree `<= degree` over `n` variables, constant first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basis {
    exponents: Vec<Vec<u8>>,
}

pub fn basis_size(n: usize, degree: usize) -> usize {
    // C(n + degree, degree)
    (1..=degree).fold(1usize, |acc, k| acc * (n + k) / k)
}

impl Basis {
    pub fn new(n: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut cur = vec![0u8; n];
            compositions(total, 0, &mut cur, &mut exponents);
        }
        Basis { exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exponents
    }

    pub fn degree(&self) -> usize {
        self.exponents
            .iter()
            .map(|e| e.iter().map(|&v| v as usize).sum::<usize>())
            .max()
            .unwrap_or(0)
    }

    /// Evaluates every monomial at `xa` into `out`.
    pub fn eval_into(&self, xa: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(xa).map(|(&p, &x)| x.powi(p as i32)).product();
        }
    }

    pub fn eval(&self, xa: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(xa, &mut out);
        out
    }
}

fn compositions(left: usize, pos: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos + 1 >= cur.len() {
        if cur.is_empty() {
            if left == 0 {
                out.push(Vec::new());
            }
            return;
        }
        cur[pos] = left as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k as u8;
        compositions(left - k, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Quality of the polynomial trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    /// Residual standard deviation with denominator `n − p`.
    pub residual_sd: f64,
    pub r2: f64,
    pub adjusted_r2: f64,
    /// Number of basis columns actually used (after dropping collinear ones).
    pub basis_size: usize,
    pub degree: usize,
    pub active_set: Vec<usize>,
    pub n_runs: usize,
}

/// Least-squares fit of a polynomial trend.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub basis: Basis,
    /// One coefficient per basis term; dropped (collinear) terms are zero.
    pub coefficients: Vec<f64>,
    pub dropped: Vec<usize>,
    pub summary: RegressionSummary,
}

fn project(x: &[Vec<f64>], active: &[usize]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|p| active.iter().map(|&k| p[k]).collect())
        .collect()
}

/// Least squares by modified Gram-Schmidt with one reorthogonalization pass.
/// Columns whose residual norm falls below `1e-10` of their original norm are
/// treated as collinear and dropped.
fn least_squares(g: &DMatrix<f64>, y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (n, p) = g.shape();
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut r = DMatrix::<f64>::zeros(p, p);
    let mut kept = Vec::with_capacity(p);
    let mut dropped = Vec::new();
    for j in 0..p {
        let col = g.column(j);
        let orig = col.norm();
        let mut v = DVector::from_iterator(n, col.iter().cloned());
        let mut coeffs = vec![0.0; kept.len()];
        for _ in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let c = qk.dot(&v);
                coeffs[k] += c;
                v.axpy(-c, qk, 1.0);
            }
        }
        let norm = v.norm();
        if orig == 0.0 || norm <= 1e-10 * orig {
            dropped.push(j);
            continue;
        }
        let slot = kept.len();
        for (k, c) in coeffs.iter().enumerate() {
            r[(k, slot)] = *c;
        }
        r[(slot, slot)] = norm;
        q.push(v / norm);
        kept.push(j);
    }
    let m = kept.len();
    let yv = DVector::from_column_slice(y);
    let qty: Vec<f64> = q.iter().map(|qk| qk.dot(&yv)).collect();
    let mut beta = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = qty[i];
        for k in (i + 1)..m {
            s -= r[(i, k)] * beta[k];
        }
        beta[i] = s / r[(i, i)];
    }
    let mut coef = vec![0.0; p];
    for (slot, &j) in kept.iter().enumerate() {
        coef[j] = beta[slot];
    }
    (coef, dropped)
}

/// Fits all monomials over `active` up to total degree `degree`.
pub fn fit_regression_data(x: &[Vec<f64>], y: &[f64], active: &[usize], degree: usize) -> Result<RegressionFit> {
    let n = y.len();
    let basis = Basis::new(active.len(), degree);
    if n <= basis.len() {
        return Err(Error::config(
            "emulator.degree",
            format!("{n} runs cannot support {} basis terms", basis.len()),
        ));
    }
    let xa = project(x, active);
    let g = DMatrix::from_fn(n, basis.len(), |i, j| {
        basis.exponents[j]
            .iter()
            .zip(&xa[i])
            .map(|(&p, &v)| v.powi(p as i32))
            .product()
    });
    let (coefficients, dropped) = least_squares(&g, y);
    if !dropped.is_empty() {
        log::warn!("dropped {} collinear basis columns", dropped.len());
    }
    let p = basis.len() - dropped.len();
    let fitted = &g * DVector::from_column_slice(&coefficients);
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let dof = (n - p) as f64;
    let (r2, adjusted_r2) = if ss_tot > 0.0 {
        let r2 = 1.0 - ss_res / ss_tot;
        (r2, 1.0 - (ss_res / dof) / (ss_tot / (n as f64 - 1.0)))
    } else {
        (0.0, 0.0)
    };
    let summary = RegressionSummary {
        residual_sd: (ss_res / dof).sqrt(),
        r2,
        adjusted_r2,
        basis_size: p,
        degree,
        active_set: active.to_vec(),
        n_runs: n,
    };
    Ok(RegressionFit {
        basis,
        coefficients,
        dropped,
        summary,
    })
}

/// Least-squares trend for `output` over the successful runs in `runs`.
pub fn fit_regression(runs: &RunTable, output: usize, active: &[usize], degree: usize) -> Result<RegressionFit> {
    let (x, y) = runs.training_data(output);
    fit_regression_data(&x, &y, active, degree)
}

/// Highest degree `<= max_degree` whose basis over `n_active` inputs has at
/// most a third as many terms as there are runs; never below 1.
pub fn effective_degree(n_runs: usize, n_active: usize, max_degree: usize) -> usize {
    (1..=max_degree.max(1))
        .rev()
        .find(|&d| n_runs >= 3 * basis_size(n_active, d))
        .unwrap_or(1)
}

/// Forward stepwise selection of active inputs by adjusted R².
///
/// Returns inputs in the order they were added.
pub fn select_active_data(
    x: &[Vec<f64>],
    y: &[f64],
    max_active: usize,
    degree: usize,
    min_gain: f64,
) -> Result<Vec<usize>> {
    let n = y.len();
    if n == 0 {
        return Err(Error::config("runs", "no successful runs to select inputs from"));
    }
    let d = x[0].len();
    if max_active > d {
        return Err(Error::config(
            "max_active",
            format!("{max_active} exceeds input dimension {d}"),
        ));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let scale = y.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-300);
    if y.iter().all(|v| (v - mean).abs() <= 1e-12 * scale) {
        return Ok(Vec::new());
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = 0.0;
    while chosen.len() < max_active {
        let mut best: Option<(f64, usize)> = None;
        for cand in (0..d).filter(|c| !chosen.contains(c)) {
            let mut trial = chosen.clone();
            trial.push(cand);
            if basis_size(trial.len(), degree) >= n {
                log::warn!("skipping input {cand}: basis larger than run count {n}");
                continue;
            }
            let fit = fit_regression_data(x, y, &trial, degree)?;
            let score = fit.summary.adjusted_r2;
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, cand));
            }
        }
        match best {
            Some((score, cand)) if score - current >= min_gain => {
                chosen.push(cand);
                current = score;
            }
            _ => break,
        }
    }
    Ok(chosen)
}

/// Stepwise active-input selection with the default 0.01 gain threshold.
pub fn select_active(runs: &RunTable, output: usize, max_active: usize, degree: usize) -> Result<Vec<usize>> {
    let (x, y) = runs.training_data(output);
    select_active_data(&x, &y, max_active, degree, DEFAULT_MIN_GAIN)
}

pub const DEFAULT_MIN_GAIN: f64 = 0.01;

/// How the residual variance is split between the correlated process and the
/// nugget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuggetRule {
    /// Use `nugget_share` as given.
    #[default]
    Fixed,
    /// Pick the share from [`NUGGET_GRID`] maximizing the leave-one-out
    /// predictive log density of the training residuals.
    Loo,
}

pub const NUGGET_GRID: [f64; 10] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.85, 1.0];

/// Fitting controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorConfig {
    /// Maximum polynomial degree of the trend.
    pub degree: usize,
    /// Lower the degree when runs < 3 × basis size.
    pub auto_degree: bool,
    pub max_active: usize,
    /// Share of the residual variance given to the nugget.
    pub nugget_share: f64,
    pub nugget_rule: NuggetRule,
    /// Multiplier on the design-density correlation length rule.
    pub theta_multiplier: f64,
    /// Fixed correlation length overriding the rule.
    pub theta: Option<f64>,
    /// Minimum adjusted-R² gain for stepwise selection.
    pub min_gain: f64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        EmulatorConfig {
            degree: 3,
            auto_degree: true,
            max_active: 5,
            nugget_share: 0.05,
            nugget_rule: NuggetRule::Fixed,
            theta_multiplier: 1.0,
            theta: None,
            min_gain: DEFAULT_MIN_GAIN,
        }
    }
}

impl EmulatorConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::config(format!("{key}.degree"), "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.nugget_share) {
            return Err(Error::config(format!("{key}.nugget_share"), "must lie in [0, 1]"));
        }
        if !(self.theta_multiplier > 0.0) {
            return Err(Error::config(format!("{key}.theta_multiplier"), "must be positive"));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0) {
                return Err(Error::config(format!("{key}.theta"), "must be positive"));
            }
        }
        if !self.min_gain.is_finite() {
            return Err(Error::config(format!("{key}.min_gain"), "must be finite"));
        }
        Ok(())
    }
}

/// Correlation length rule: `2 · side / n^(1/|A|)`, where `side` is the mean
/// extent of the training design over the active inputs.
pub fn theta_rule(active_points: &[Vec<f64>], n_active: usize) -> f64 {
    if n_active == 0 || active_points.is_empty() {
        return 1.0;
    }
    let side = (0..n_active)
        .map(|k| {
            let (lo, hi) = active_points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
            hi - lo
        })
        .sum::<f64>()
        / n_active as f64;
    let side = if side > 0.0 { side } else { 2.0 };
    2.0 * side / (active_points.len() as f64).powf(1.0 / n_active as f64)
}

/// Mean and variance of a simulator output at an untried input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// Everything needed to rebuild an emulator; this is what gets persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorParams {
    pub format_version: u32,
    pub output_index: usize,
    pub active_set: Vec<usize>,
    pub basis: Basis,
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
    pub nugget_variance: f64,
    pub theta: f64,
    pub training_ids: Vec<u64>,
    /// Training points restricted to the active inputs.
    pub training_points: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub summary: RegressionSummary,
}

#[derive(Debug, Clone)]
struct Cache {
    chol: Option<Cholesky>,
    /// `K⁻¹ r`
    weights: Vec<f64>,
}

/// A fitted emulator. Immutable and safe to share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EmulatorParams", into = "EmulatorParams")]
pub struct Emulator {
    params: EmulatorParams,
    cache: Cache,
}

impl PartialEq for Emulator {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl From<Emulator> for EmulatorParams {
    fn from(e: Emulator) -> Self {
        e.params
    }
}

impl TryFrom<EmulatorParams> for Emulator {
    type Error = Error;

    fn try_from(p: EmulatorParams) -> Result<Self> {
        Emulator::from_params(p)
    }
}

impl Emulator {
    /// Validates the parameters and builds the adjustment cache.
    pub fn from_params(params: EmulatorParams) -> Result<Self> {
        let p = &params;
        if p.format_version != FORMAT_VERSION {
            return Err(Error::config("emulator.format_version", format!("unsupported version {}", p.format_version)));
        }
        if !(p.residual_variance >= 0.0 && p.nugget_variance >= 0.0 && p.theta > 0.0) {
            return Err(Error::config("emulator", "variances must be >= 0 and theta > 0"));
        }
        if p.basis.exponents.first().is_none_or(|e| e.iter().any(|&v| v != 0)) {
            return Err(Error::config("emulator.basis", "first basis term must be the constant"));
        }
        if p.coefficients.len() != p.basis.len() || p.residuals.len() != p.training_points.len() {
            return Err(Error::config("emulator", "inconsistent coefficient or training lengths"));
        }
        let n = p.training_points.len();
        let cache = if p.residual_variance > 0.0 && n > 0 {
            let k = DMatrix::from_fn(n, n, |i, j| {
                let c = p.residual_variance * correlation(&p.training_points[i], &p.training_points[j], p.theta);
                if i == j {
                    c + p.nugget_variance
                } else {
                    c
                }
            });
            let chol = Cholesky::with_escalation(&k)?;
            let mut w = p.residuals.clone();
            chol.solve_lower_in_place(&mut w);
            chol.solve_upper_in_place(&mut w);
            Cache {
                chol: Some(chol),
                weights: w,
            }
        } else {
            Cache {
                chol: None,
                weights: vec![0.0; n],
            }
        };
        Ok(Emulator { params, cache })
    }

    pub fn params(&self) -> &EmulatorParams {
        &self.params
    }

    pub fn output_index(&self) -> usize {
        self.params.output_index
    }

    pub fn active_set(&self) -> &[usize] {
        &self.params.active_set
    }

    pub fn theta(&self) -> f64 {
        self.params.theta
    }

    pub fn residual_variance(&self) -> f64 {
        self.params.residual_variance
    }

    pub fn nugget_variance(&self) -> f64 {
        self.params.nugget_variance
    }

    pub fn summary(&self) -> &RegressionSummary {
        &self.params.summary
    }

    /// Diagonal jitter the training covariance needed, if any.
    pub fn jitter(&self) -> f64 {
        self.cache.chol.as_ref().map_or(0.0, Cholesky::jitter)
    }

    /// The same emulator with a different correlation length.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        let mut p = self.params.clone();
        p.theta = theta;
        Self::from_params(p)
    }

    fn active_coords(&self, x: &[f64]) -> Vec<f64> {
        self.params.active_set.iter().map(|&k| x[k]).collect()
    }

    /// Polynomial trend `B·g(x)` alone.
    pub fn trend(&self, x: &[f64]) -> f64 {
        let xa = self.active_coords(x);
        self.params
            .basis
            .eval(&xa)
            .iter()
            .zip(&self.params.coefficients)
            .map(|(g, b)| g * b)
            .sum()
    }

    /// Prior variance `σ_u² + σ_w²`, an upper bound on any adjusted variance.
    pub fn prior_variance(&self) -> f64 {
        self.params.residual_variance + self.params.nugget_variance
    }

    /// Adjusted mean and, when the residual process is present, the training
    /// covariance vector `Cov(u(x), D)`.
    fn mean_parts(&self, x: &[f64]) -> (f64, Option<Vec<f64>>) {
        let p = &self.params;
        let xa = self.active_coords(x);
        let trend: f64 = p
            .basis
            .eval(&xa)
            .iter()
            .zip(&p.coefficients)
            .map(|(g, b)| g * b)
            .sum();
        if self.cache.chol.is_none() {
            return (trend, None);
        }
        let k: Vec<f64> = p
            .training_points
            .iter()
            .map(|t| p.residual_variance * correlation(&xa, t, p.theta))
            .collect();
        let adj_mean: f64 = k.iter().zip(&self.cache.weights).map(|(a, b)| a * b).sum();
        (trend + adj_mean, Some(k))
    }

    /// Adjusted mean only; identical to `emulate(x).mean`.
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.mean_parts(x).0
    }

    /// Adjusted mean and variance at `x` (a full unit-cube point).
    pub fn emulate(&self, x: &[f64]) -> Prediction {
        let prior_var = self.prior_variance();
        let (mean, k) = self.mean_parts(x);
        let (Some(chol), Some(mut k)) = (&self.cache.chol, k) else {
            return Prediction {
                mean,
                variance: prior_var,
            };
        };
        chol.solve_lower_in_place(&mut k);
        let explained: f64 = k.iter().map(|v| v * v).sum();
        Prediction {
            mean,
            variance: (prior_var - explained).max(0.0),
        }
    }
}

/// Leave-one-out log predictive density of `residuals` under the residual
/// process with the given variances. Uses the closed forms
/// `e_i = [K⁻¹r]_i / [K⁻¹]_ii` and `v_i = 1 / [K⁻¹]_ii`.
fn loo_log_density(points: &[Vec<f64>], residuals: &[f64], sigma_u2: f64, sigma_w2: f64, theta: f64) -> Result<f64> {
    let n = points.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        sigma_u2 * correlation(&points[i], &points[j], theta) + if i == j { sigma_w2 } else { 0.0 }
    });
    let chol = Cholesky::with_escalation(&k)?;
    let mut alpha = residuals.to_vec();
    chol.solve_lower_in_place(&mut alpha);
    chol.solve_upper_in_place(&mut alpha);
    let mut diag = vec![0.0; n];
    let mut col = vec![0.0; n];
    for i in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[i] = 1.0;
        chol.solve_lower_in_place(&mut col);
        for (d, v) in diag.iter_mut().zip(&col) {
            *d += v * v;
        }
    }
    Ok(alpha
        .iter()
        .zip(&diag)
        .map(|(a, d)| {
            let var = 1.0 / d;
            let e = a / d;
            -0.5 * (var.ln() + e * e / var)
        })
        .sum())
}

/// Nugget share from [`NUGGET_GRID`] with the best leave-one-out density.
fn loo_nugget_share(points: &[Vec<f64>], residuals: &[f64], sigma2: f64, theta: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || points.is_empty() {
        return Ok(1.0);
    }
    let mut best = (f64::NEG_INFINITY, 1.0);
    for share in NUGGET_GRID {
        let score = loo_log_density(points, residuals, (1.0 - share) * sigma2, share * sigma2, theta)?;
        if score > best.0 {
            best = (score, share);
        }
    }
    Ok(best.1)
}

/// Fits the emulator for one output: stepwise active-input selection, cubic
/// (or lower) trend, then the residual process conditioned on the residuals.
pub fn fit_emulator(runs: &RunTable, output: usize, config: &EmulatorConfig) -> Result<Emulator> {
    config.validate("emulator")?;
    if output >= runs.output_count() {
        return Err(Error::Dimension {
            context: "emulated output index".into(),
            expected: runs.output_count(),
            found: output,
        });
    }
    let ids: Vec<u64> = runs.ok_rows().map(|r| r.run_id).collect();
    let (x, y) = runs.training_data(output);
    let n = y.len();
    if n == 0 {
        return Err(Error::config("runs", "no successful runs to fit"));
    }
    let max_active = config.max_active.min(runs.dimension());
    let select_degree = if config.auto_degree {
        effective_degree(n, max_active, config.degree)
    } else {
        config.degree
    };
    let mut active = select_active_data(&x, &y, max_active, select_degree, config.min_gain)?;
    active.sort_unstable();
    let degree = if config.auto_degree {
        effective_degree(n, active.len(), config.degree)
    } else {
        config.degree
    };
    let fit = fit_regression_data(&x, &y, &active, degree)?;
    let xa = project(&x, &active);
    let residuals: Vec<f64> = xa
        .iter()
        .zip(&y)
        .map(|(p, v)| {
            v - fit
                .basis
                .eval(p)
                .iter()
                .zip(&fit.coefficients)
                .map(|(g, b)| g * b)
                .sum::<f64>()
        })
        .collect();
    let sigma2 = fit.summary.residual_sd.powi(2);
    let theta = match config.theta {
        Some(t) => t,
        None => theta_rule(&xa, active.len()) * config.theta_multiplier,
    };
    let share = match config.nugget_rule {
        NuggetRule::Fixed => config.nugget_share,
        NuggetRule::Loo => loo_nugget_share(&xa, &residuals, sigma2, theta)?,
    };
    Emulator::from_params(EmulatorParams {
        format_version: FORMAT_VERSION,
        output_index: output,
        active_set: active,
        basis: fit.basis,
        coefficients: fit.coefficients,
        residual_variance: (1.0 - share) * sigma2,
        nugget_variance: share * sigma2,
        theta,
        training_ids: ids,
        training_points: xa,
        residuals,
        summary: fit.summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::latin_hypercube;
    use crate::simulators::{Simulator, ToyCoefficients, ToySimulator};
    use proptest::prelude::*;

    fn dense_adjust(
        m: &DVector<f64>,
        v: &DMatrix<f64>,
        c: &DMatrix<f64>,
        vz: &DMatrix<f64>,
        mz: &DVector<f64>,
        z: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let inv = vz.clone().try_inverse().unwrap();
        (m + c * &inv * (z - mz), v - c * &inv * c.transpose())
    }

    #[test]
    fn zero_cross_covariance_leaves_prior() {
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = DMatrix::zeros(2, 3);
        let vz = DMatrix::identity(3, 3) * 2.0;
        let (am, av) = bl_adjust(&m, &v, &c, &vz, &DVector::zeros(3), &DVector::from_vec(vec![5.0, -1.0, 2.0])).unwrap();
        assert_eq!(am, m);
        assert_eq!(av, v);
    }

    #[test]
    fn scalar_update() {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let (m, v) = bl_adjust(
            &DVector::from_element(1, 0.0),
            &one(1.0),
            &one(1.0),
            &one(2.0),
            &DVector::from_element(1, 0.0),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn five_point_training_set_matches_dense_inverse() {
        let pts = latin_hypercube(5, 2, 3).points;
        let prior_pts = [vec![0.1, 0.2], vec![-0.5, 0.7]];
        let theta = 0.8;
        let vz = DMatrix::from_fn(5, 5, |i, j| correlation(&pts[i], &pts[j], theta) + if i == j { 0.01 } else { 0.0 });
        let c = DMatrix::from_fn(2, 5, |i, j| correlation(&prior_pts[i], &pts[j], theta));
        let v = DMatrix::from_fn(2, 2, |i, j| correlation(&prior_pts[i], &prior_pts[j], theta));
        let z = DVector::from_fn(5, |i, _| pts[i][0].sin() + pts[i][1]);
        let (m0, mz) = (DVector::zeros(2), DVector::zeros(5));
        let (am, av) = bl_adjust(&m0, &v, &c, &vz, &mz, &z).unwrap();
        let (om, ov) = dense_adjust(&m0, &v, &c, &vz, &mz, &z);
        assert!((am - om).abs().max() < 1e-10);
        assert!((av - ov).abs().max() < 1e-10);
    }

    #[test]
    fn non_pd_data_covariance_reports_pivot() {
        let vz = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = bl_adjust(
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            &DMatrix::zeros(1, 2),
            &vz,
            &DVector::zeros(2),
            &DVector::zeros(2),
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite { row: 1, .. })));
    }

    #[test]
    fn basis_counts_and_constant_first() {
        for (n, d) in [(0, 3), (1, 3), (3, 2), (5, 3), (8, 3)] {
            let b = Basis::new(n, d);
            assert_eq!(b.len(), basis_size(n, d), "n={n} d={d}");
            assert!(b.exponents()[0].iter().all(|&e| e == 0));
        }
        assert_eq!(basis_size(5, 3), 56);
        assert_eq!(basis_size(8, 3), 165);
    }

    #[test]
    fn linear_output_cubic_fit_is_exact() {
        let x = latin_hypercube(60, 3, 1).points;
        let y: Vec<f64> = x.iter().map(|p| 1.0 + 2.0 * p[0] - 0.5 * p[1] + 0.25 * p[2]).collect();
        let fit = fit_regression_data(&x, &y, &[0, 1, 2], 3).unwrap();
        assert!(fit.summary.residual_sd < 1e-8);
        for (e, c) in fit.basis.exponents().iter().zip(&fit.coefficients) {
            if e.iter().map(|&v| v as usize).sum::<usize>() > 1 {
                assert!(c.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn saturated_fit_has_unit_adjusted_r2() {
        // Degree 2 in one input: p = 3, n = 4, exact quadratic data.
        let x = vec![vec![-1.0], vec![-0.3], vec![0.4], vec![1.0]];
        let y: Vec<f64> = x.iter().map(|p| 1.0 - p[0] + 3.0 * p[0] * p[0]).collect();
        let fit = fit_regression_data(&x, &y, &[0], 2).unwrap();
        assert!((fit.summary.adjusted_r2 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadratic_truth_linear_fit_on_symmetric_design() {
        // Hand least squares on x = -1, -0.5, 0, 0.5, 1 with y = x²:
        // slope = Σxy / Σx² = 0, intercept = mean(y) = 0.5,
        // SSres = Σ(x² - 0.5)² = 0.875, σ = sqrt(0.875 / 3).
        let x: Vec<Vec<f64>> = [-1.0, -0.5, 0.0, 0.5, 1.0].iter().map(|v| vec![*v]).collect();
        let y: Vec<f64> = x.iter().map(|p| p[0] * p[0]).collect();
        let fit = fit_regression_data(&x, &y, &[0], 1).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-14);
        assert!((fit.coefficients[0] - 0.5).abs() < 1e-14);
        assert!((fit.summary.residual_sd - (0.875f64 / 3.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn collinear_columns_are_dropped() {
        // Second input duplicates the first; its columns are linearly dependent.
        let x: Vec<Vec<f64>> = latin_hypercube(30, 1, 2).points.iter().map(|p| vec![p[0], p[0]]).collect();
        let y: Vec<f64> = x.iter().map(|p| 3.0 * p[0]).collect();
        let fit = fit_regression_data(&x, &y, &[0, 1], 1).unwrap();
        assert_eq!(fit.dropped, vec![2]);
        assert!(fit.summary.residual_sd < 1e-12);
    }

    fn toy_runs(active: &[usize], n: usize, seed: u64) -> RunTable {
        let sim = ToySimulator::new(ToyCoefficients::with_active(8, active)).unwrap();
        let x = latin_hypercube(n, 8, seed).points;
        let f: Vec<Vec<f64>> = x.iter().map(|p| sim.run(p).unwrap()).collect();
        RunTable::from_points(&x, &f).unwrap()
    }

    #[test]
    fn stepwise_recovers_three_inputs() {
        let runs = toy_runs(&[1, 4, 6], 200, 5);
        let mut sel = select_active(&runs, 5, 8, 3).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, vec![1, 4, 6]);
    }

    #[test]
    fn constant_output_selects_nothing() {
        let runs = toy_runs(&[], 50, 5);
        assert!(select_active(&runs, 3, 8, 3).unwrap().is_empty());
    }

    #[test]
    fn single_input_is_best_univariate() {
        let runs = toy_runs(&[0, 2, 5], 120, 9);
        let (x, y) = runs.training_data(4);
        let brute = (0..8)
            .map(|k| (fit_regression_data(&x, &y, &[k], 3).unwrap().summary.adjusted_r2, k))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
        assert_eq!(select_active(&runs, 4, 1, 3).unwrap(), vec![brute.1]);
    }

    #[test]
    fn max_active_above_dimension_is_rejected() {
        let runs = toy_runs(&[0], 20, 1);
        assert!(select_active(&runs, 0, 9, 1).is_err());
    }

    fn toy_emulator(nugget: f64, n: usize) -> (Emulator, RunTable) {
        let runs = toy_runs(&[0, 1, 2], n, 17);
        let cfg = EmulatorConfig {
            max_active: 3,
            nugget_share: nugget,
            ..Default::default()
        };
        (fit_emulator(&runs, 6, &cfg).unwrap(), runs)
    }

    #[test]
    fn zero_nugget_interpolates_training_runs() {
        let (em, runs) = toy_emulator(0.0, 80);
        for r in runs.ok_rows() {
            let p = em.emulate(&r.unit);
            assert!((p.mean - r.outputs[6]).abs() < 1e-8);
            assert!(p.variance <= 1e-10);
        }
    }

    #[test]
    fn correlation_at_theta_is_exp_minus_one() {
        assert_eq!(correlation(&[0.3, 0.1], &[0.3, 0.1], 0.7), 1.0);
        let r = correlation(&[0.0, 0.0], &[0.6, 0.8], 1.0);
        assert!((r - (-1.0f64).exp()).abs() < 1e-12);
        assert!((r - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn far_from_data_recovers_prior() {
        let pts = vec![vec![-1.0], vec![-0.95], vec![-0.9], vec![-0.85]];
        let y = vec![0.1, 0.3, 0.2, 0.4];
        let runs = RunTable::from_points(&pts, &y.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap();
        let cfg = EmulatorConfig {
            max_active: 1,
            degree: 1,
            theta: Some(0.05),
            min_gain: -1.0,
            ..Default::default()
        };
        let em = fit_emulator(&runs, 0, &cfg).unwrap();
        assert_eq!(em.active_set(), &[0]);
        let p = em.emulate(&[1.0]);
        assert!((p.variance - (em.residual_variance() + em.nugget_variance())).abs() < 1e-12);
        assert!((p.mean - em.trend(&[1.0])).abs() < 1e-12);
    }

    #[test]
    fn pure_nugget_has_flat_variance() {
        let (em, _) = toy_emulator(1.0, 60);
        assert_eq!(em.residual_variance(), 0.0);
        let s2 = em.summary().residual_sd.powi(2);
        for x in [[0.0; 8], [0.5; 8], [-0.9; 8]] {
            let p = em.emulate(&x);
            assert!((p.variance - s2).abs() < 1e-15);
            assert_eq!(p.mean, em.trend(&x));
        }
    }

    #[test]
    fn refit_is_deterministic_and_serialization_exact() {
        let (a, runs) = toy_emulator(0.05, 70);
        let b = fit_emulator(
            &runs,
            6,
            &EmulatorConfig {
                max_active: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let text = serde_json::to_string(&a).unwrap();
        let back: Emulator = serde_json::from_str(&text).unwrap();
        assert_eq!(back, a);
        let x = [0.11, -0.3, 0.7, 0.0, 0.2, -0.5, 0.9, 0.1];
        let (p, q) = (a.emulate(&x), back.emulate(&x));
        assert_eq!(p.mean.to_bits(), q.mean.to_bits());
        assert_eq!(p.variance.to_bits(), q.variance.to_bits());
    }

    #[test]
    fn doubling_runs_improves_adjusted_r2() {
        // Geometric toy: with more runs the trend captures more of the
        // inactive-input variation, so adjusted R² rises.
        let sim = ToySimulator::new(ToyCoefficients::geometric(8)).unwrap();
        let cfg = EmulatorConfig {
            max_active: 5,
            ..Default::default()
        };
        let fit_for = |n: usize| {
            let x = latin_hypercube(n, 8, 21).points;
            let f: Vec<Vec<f64>> = x.iter().map(|p| sim.run(p).unwrap()).collect();
            let runs = RunTable::from_points(&x, &f).unwrap();
            fit_emulator(&runs, 3, &cfg).unwrap().summary().adjusted_r2
        };
        let (small, large) = (fit_for(100), fit_for(200));
        assert!(large > small, "{small} -> {large}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn variance_never_negative_and_inactive_inputs_ignored(
            x in prop::collection::vec(-1.0f64..=1.0, 8),
            other in -1.0f64..=1.0,
        ) {
            let (em, _) = toy_emulator(0.05, 60);
            let p = em.emulate(&x);
            prop_assert!(p.variance >= 0.0);
            let inactive = (0..8).find(|k| !em.active_set().contains(k)).unwrap();
            let mut y = x.clone();
            y[inactive] = other;
            let q = em.emulate(&y);
            prop_assert_eq!(p.mean.to_bits(), q.mean.to_bits());
            prop_assert_eq!(p.variance.to_bits(), q.variance.to_bits());
        }

        #[test]
        fn correlation_is_symmetric_and_bounded(
            a in prop::collection::vec(-1.0f64..=1.0, 3),
            b in prop::collection::vec(-1.0f64..=1.0, 3),
            theta in 0.05f64..5.0,
        ) {
            let r = correlation(&a, &b, theta);
            prop_assert_eq!(r, correlation(&b, &a, theta));
            prop_assert!(r <= 1.0 && r >= 0.0);
            prop_assert_eq!(correlation(&a, &a, theta), 1.0);
        }
    }
}
