//! Non-emulator uncertainty: model discrepancy and observation error.
//!
//! Each source of uncertainty is a named covariance matrix over the simulator
//! outputs. Totals are kept per class; the implausibility measures use the sum
//! of both classes.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the smallest eigenvalue, relative to the largest diagonal
/// entry, when checking positive semidefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentClass {
    Discrepancy,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComponent {
    pub name: String,
    pub class: ComponentClass,
    pub cov: DMatrix<f64>,
}

/// Config-level description of one component: either a full matrix, or
/// per-output standard deviations (or variances) with an optional uniform
/// correlation inside declared output groups.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub name: String,
    pub class: Option<ComponentClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub correlation: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Vec<usize>>,
}

impl ComponentSpec {
    pub fn diagonal(name: &str, class: ComponentClass, sd: Vec<f64>) -> Self {
        ComponentSpec {
            name: name.to_string(),
            class: Some(class),
            sd: Some(sd),
            ..Default::default()
        }
    }

    pub fn correlated(
        name: &str,
        class: ComponentClass,
        sd: Vec<f64>,
        correlation: f64,
        groups: Vec<Vec<usize>>,
    ) -> Self {
        ComponentSpec {
            name: name.to_string(),
            class: Some(class),
            sd: Some(sd),
            correlation,
            groups,
            ..Default::default()
        }
    }

    fn key(&self) -> String {
        format!("budget.components.{}", self.name)
    }

    /// Builds the covariance matrix described by this spec.
    pub fn to_component(&self) -> Result<BudgetComponent> {
        let key = self.key();
        let class = self
            .class
            .ok_or_else(|| Error::config(format!("{key}.class"), "missing (discrepancy|observation)"))?;
        let given = [self.sd.is_some(), self.variance.is_some(), self.matrix.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if given != 1 {
            return Err(Error::config(
                &key,
                "exactly one of `sd`, `variance` or `matrix` must be given",
            ));
        }
        let cov = if let Some(rows) = &self.matrix {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::config(format!("{key}.matrix"), "must be square"));
            }
            DMatrix::from_fn(n, n, |i, j| rows[i][j])
        } else {
            let var: Vec<f64> = match (&self.sd, &self.variance) {
                (Some(sd), _) => {
                    if sd.iter().any(|s| !(*s >= 0.0)) {
                        return Err(Error::config(format!("{key}.sd"), "must be non-negative"));
                    }
                    sd.iter().map(|s| s * s).collect()
                }
                (None, Some(v)) => {
                    if v.iter().any(|s| !(*s >= 0.0)) {
                        return Err(Error::config(format!("{key}.variance"), "must be non-negative"));
                    }
                    v.clone()
                }
                _ => unreachable!(),
            };
            if !(-1.0..=1.0).contains(&self.correlation) {
                return Err(Error::config(format!("{key}.correlation"), "must lie in [-1, 1]"));
            }
            let n = var.len();
            let mut group_of = vec![None; n];
            for (g, members) in self.groups.iter().enumerate() {
                for &m in members {
                    if m >= n {
                        return Err(Error::config(
                            format!("{key}.groups"),
                            format!("output index {m} out of range (outputs: {n})"),
                        ));
                    }
                    if group_of[m].replace(g).is_some() {
                        return Err(Error::config(
                            format!("{key}.groups"),
                            format!("output {m} listed in more than one group"),
                        ));
                    }
                }
            }
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    var[i]
                } else if group_of[i].is_some() && group_of[i] == group_of[j] {
                    self.correlation * (var[i] * var[j]).sqrt()
                } else {
                    0.0
                }
            })
        };
        Ok(BudgetComponent {
            name: self.name.clone(),
            class,
            cov,
        })
    }
}

/// Validated set of uncertainty components with per-class totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBudget {
    components: Vec<BudgetComponent>,
    outputs: usize,
    total_discrepancy: DMatrix<f64>,
    total_observation: DMatrix<f64>,
}

fn check_psd(cov: &DMatrix<f64>, key: &str) -> Result<()> {
    if !linalg::is_symmetric(cov, 1e-12) {
        return Err(Error::config(key, "covariance matrix is not symmetric"));
    }
    let scale = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0f64, f64::max).max(1.0);
    let min_eig = linalg::min_eigenvalue(cov);
    if min_eig < -PSD_TOLERANCE * scale {
        return Err(Error::config(
            key,
            format!("covariance is not positive semidefinite (smallest eigenvalue {min_eig:e})"),
        ));
    }
    Ok(())
}

impl VarianceBudget {
    /// Builds a budget from config specs.
    pub fn build(specs: &[ComponentSpec], outputs: usize) -> Result<Self> {
        let comps = specs
            .iter()
            .map(ComponentSpec::to_component)
            .collect::<Result<Vec<_>>>()?;
        Self::from_components(comps, outputs)
    }

    pub fn from_components(components: Vec<BudgetComponent>, outputs: usize) -> Result<Self> {
        for (k, c) in components.iter().enumerate() {
            let key = format!("budget.components.{}", c.name);
            if c.cov.nrows() != outputs || c.cov.ncols() != outputs {
                return Err(Error::config(
                    key,
                    format!("matrix is {}x{}, expected {outputs}x{outputs}", c.cov.nrows(), c.cov.ncols()),
                ));
            }
            if components[..k].iter().any(|o| o.name == c.name) {
                return Err(Error::config(key, "duplicate component name"));
            }
            check_psd(&c.cov, &key)?;
        }
        let mut budget = VarianceBudget {
            components,
            outputs,
            total_discrepancy: DMatrix::zeros(outputs, outputs),
            total_observation: DMatrix::zeros(outputs, outputs),
        };
        budget.recompute_totals();
        Ok(budget)
    }

    /// A budget with no uncertainty at all.
    pub fn zero(outputs: usize) -> Self {
        Self::from_components(Vec::new(), outputs).expect("empty budget is valid")
    }

    fn recompute_totals(&mut self) {
        let n = self.outputs;
        self.total_discrepancy = DMatrix::zeros(n, n);
        self.total_observation = DMatrix::zeros(n, n);
        for c in &self.components {
            match c.class {
                ComponentClass::Discrepancy => self.total_discrepancy += &c.cov,
                ComponentClass::Observation => self.total_observation += &c.cov,
            }
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn components(&self) -> &[BudgetComponent] {
        &self.components
    }

    pub fn total_discrepancy(&self) -> &DMatrix<f64> {
        &self.total_discrepancy
    }

    pub fn total_observation(&self) -> &DMatrix<f64> {
        &self.total_observation
    }

    /// Discrepancy plus observation covariance.
    pub fn total(&self) -> DMatrix<f64> {
        &self.total_discrepancy + &self.total_observation
    }

    /// `Var(ε_i) + Var(e_i)`.
    pub fn total_variance(&self, output: usize) -> f64 {
        self.total_discrepancy[(output, output)] + self.total_observation[(output, output)]
    }

    /// Total covariance restricted to `outputs` (in the given order).
    pub fn sub_total(&self, outputs: &[usize]) -> DMatrix<f64> {
        let n = outputs.len();
        DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (outputs[i], outputs[j]);
            self.total_discrepancy[(a, b)] + self.total_observation[(a, b)]
        })
    }

    /// Returns a copy with component `name` multiplied by `factor`.
    pub fn scale_component(&self, name: &str, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::config(
                format!("budget.components.{name}"),
                "scale factor must be finite and non-negative",
            ));
        }
        let mut out = self.clone();
        let c = out
            .components
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::config(format!("budget.components.{name}"), "unknown component"))?;
        c.cov *= factor;
        out.recompute_totals();
        Ok(out)
    }

    /// Adds a component (e.g. an estimated inactive-input term).
    pub fn with_component(&self, component: BudgetComponent) -> Result<Self> {
        let mut comps = self.components.clone();
        comps.push(component);
        Self::from_components(comps, self.outputs)
    }

    /// Per-output standard deviation of every component and of the total.
    pub fn report(&self) -> BudgetReport {
        let rows = (0..self.outputs)
            .map(|i| {
                let sds: Vec<f64> = self
                    .components
                    .iter()
                    .map(|c| c.cov[(i, i)].max(0.0).sqrt())
                    .collect();
                let total = self
                    .components
                    .iter()
                    .map(|c| c.cov[(i, i)].max(0.0))
                    .sum::<f64>()
                    .sqrt();
                BudgetReportRow { output: i, sds, total }
            })
            .collect();
        BudgetReport {
            names: self.components.iter().map(|c| c.name.clone()).collect(),
            rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReportRow {
    pub output: usize,
    pub sds: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub names: Vec<String>,
    pub rows: Vec<BudgetReportRow>,
}

impl BudgetReport {
    pub fn write_csv<W: Write>(&self, out: W, labels: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["output".to_string(), "label".to_string()];
        header.extend(self.names.iter().map(|n| format!("sd_{n}")));
        header.push("sd_total".to_string());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let label = labels.and_then(|l| l.get(r.output)).cloned().unwrap_or_default();
            let mut rec = vec![r.output.to_string(), label];
            rec.extend(r.sds.iter().map(|v| crate::io::fmt_f64(*v)));
            rec.push(crate::io::fmt_f64(r.total));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("budget report", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path, labels: Option<&[String]>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f, labels)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse("budget report", e)
}

/// Estimates the inactive-input discrepancy: the covariance of simulator
/// outputs as the `inactive` coordinates vary over a Latin hypercube while the
/// remaining coordinates stay fixed, averaged over `n_fixed` fixed settings.
pub fn estimate_inactive_covariance<F>(
    simulate: F,
    dimension: usize,
    inactive: &[usize],
    n_fixed: usize,
    n_inner: usize,
    seed: u64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    use crate::design::latin_hypercube;
    if n_inner < 2 || n_fixed < 1 {
        return Err(Error::config("inactive_estimator", "needs n_fixed >= 1 and n_inner >= 2"));
    }
    if let Some(&bad) = inactive.iter().find(|&&k| k >= dimension) {
        return Err(Error::config("inactive_estimator.inputs", format!("input {bad} out of range")));
    }
    let outer = latin_hypercube(n_fixed, dimension, crate::seed::derive(seed, &[0]));
    let mut acc: Option<DMatrix<f64>> = None;
    for (o, base) in outer.points.iter().enumerate() {
        let inner = latin_hypercube(n_inner, inactive.len(), crate::seed::derive(seed, &[1, o as u64]));
        let mut outs = Vec::with_capacity(n_inner);
        for p in &inner.points {
            let mut x = base.clone();
            for (slot, &k) in inactive.iter().enumerate() {
                x[k] = p[slot];
            }
            outs.push(simulate(&x)?);
        }
        let m = outs[0].len();
        let mean: Vec<f64> = (0..m)
            .map(|i| outs.iter().map(|v| v[i]).sum::<f64>() / n_inner as f64)
            .collect();
        let cov = DMatrix::from_fn(m, m, |i, j| {
            outs.iter()
                .map(|v| (v[i] - mean[i]) * (v[j] - mean[j]))
                .sum::<f64>()
                / (n_inner - 1) as f64
        });
        acc = Some(match acc {
            Some(a) => a + cov,
            None => cov,
        });
    }
    Ok(acc.expect("n_fixed >= 1") / n_fixed as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn diag(name: &str, class: ComponentClass, sd: &[f64]) -> ComponentSpec {
        ComponentSpec::diagonal(name, class, sd.to_vec())
    }

    #[test]
    fn single_diagonal_component_is_total() {
        let b = VarianceBudget::build(&[diag("a", ComponentClass::Discrepancy, &[1.0, 2.0])], 2).unwrap();
        assert_eq!(b.total_discrepancy(), &DMatrix::from_diagonal(&vec![1.0, 4.0].into()));
        assert_eq!(b.total_observation(), &DMatrix::zeros(2, 2));
    }

    #[test]
    fn variances_add() {
        let b = VarianceBudget::build(
            &[
                diag("a", ComponentClass::Discrepancy, &[1.0]),
                diag("b", ComponentClass::Observation, &[3f64.sqrt()]),
            ],
            1,
        )
        .unwrap();
        assert!((b.total_variance(0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn correlated_group_off_diagonals() {
        let sd = vec![0.1, 0.2, 0.3, 0.4];
        let spec = ComponentSpec::correlated("expert", ComponentClass::Discrepancy, sd.clone(), 0.4, vec![vec![0, 1, 2]]);
        let b = VarianceBudget::build(&[spec], 4).unwrap();
        let t = b.total_discrepancy();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j {
                    sd[i] * sd[i]
                } else if i < 3 && j < 3 {
                    0.4 * sd[i] * sd[j]
                } else {
                    0.0
                };
                assert!((t[(i, j)] - expect).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn non_psd_component_is_named() {
        let spec = ComponentSpec {
            name: "bad".into(),
            class: Some(ComponentClass::Observation),
            matrix: Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]),
            ..Default::default()
        };
        match VarianceBudget::build(&[spec], 2) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "budget.components.bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scaling() {
        let b = VarianceBudget::build(
            &[
                diag("a", ComponentClass::Discrepancy, &[1.0, 1.0]),
                diag("b", ComponentClass::Observation, &[2.0, 0.5]),
            ],
            2,
        )
        .unwrap();
        assert_eq!(b.scale_component("a", 1.0).unwrap(), b);
        let zero = b.scale_component("b", 0.0).unwrap();
        assert_eq!(zero.total(), b.total() - b.components()[1].cov.clone());
        let four = b.scale_component("b", 4.0).unwrap();
        let r = four.report();
        assert!((r.rows[0].sds[1] - 4.0).abs() < 1e-12);
        assert!(matches!(b.scale_component("nope", 2.0), Err(Error::Config { .. })));
        assert!(b.scale_component("a", -1.0).is_err());
    }

    #[test]
    fn report_pythagorean() {
        let b = VarianceBudget::build(
            &[
                diag("a", ComponentClass::Discrepancy, &[3.0]),
                diag("b", ComponentClass::Observation, &[4.0]),
            ],
            1,
        )
        .unwrap();
        let r = b.report();
        assert_eq!(r.rows[0].sds, vec![3.0, 4.0]);
        assert!((r.rows[0].total - 5.0).abs() < 1e-12);
        let z = VarianceBudget::zero(3).report();
        assert!(z.rows.iter().all(|r| r.total == 0.0 && r.sds.is_empty()));
    }

    #[test]
    fn report_columns_sum_in_quadrature_for_random_budget() {
        let mut rng = crate::seed::rng(3);
        let n = 6;
        let comps: Vec<BudgetComponent> = (0..4)
            .map(|k| {
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                BudgetComponent {
                    name: format!("c{k}"),
                    class: if k % 2 == 0 { ComponentClass::Discrepancy } else { ComponentClass::Observation },
                    cov: &a * a.transpose(),
                }
            })
            .collect();
        let b = VarianceBudget::from_components(comps.clone(), n).unwrap();
        let r = b.report();
        for (i, row) in r.rows.iter().enumerate() {
            let raw: f64 = comps.iter().map(|c| c.cov[(i, i)]).sum();
            let quad: f64 = row.sds.iter().map(|s| s * s).sum();
            assert!((quad - raw).abs() < 1e-12 * raw.max(1.0));
            assert!((row.total * row.total - raw).abs() < 1e-12 * raw.max(1.0));
        }
        let csv = {
            let mut buf = Vec::new();
            r.write_csv(&mut buf, None).unwrap();
            String::from_utf8(buf).unwrap()
        };
        assert!(csv.starts_with("output,label,sd_c0,sd_c1,sd_c2,sd_c3,sd_total"));
    }

    #[test]
    fn total_sd_monotone_in_scale() {
        let b = VarianceBudget::build(
            &[
                ComponentSpec::correlated("e", ComponentClass::Discrepancy, vec![0.3, 0.2, 0.1], 0.5, vec![vec![0, 1, 2]]),
                diag("o", ComponentClass::Observation, &[0.1, 0.1, 0.1]),
            ],
            3,
        )
        .unwrap();
        let mut prev = vec![0.0; 3];
        for f in [0.0, 0.5, 1.0, 2.0, 10.0] {
            let s = b.scale_component("e", f).unwrap();
            assert!(linalg::min_eigenvalue(&s.total()) > -1e-12);
            for i in 0..3 {
                let t = s.total_variance(i).sqrt();
                assert!(t >= prev[i]);
                prev[i] = t;
            }
        }
    }

    #[test]
    fn inactive_estimator_sees_only_inactive_variation() {
        // Output 0 depends on x0 only, output 1 on x2 only.
        let sim = |x: &[f64]| Ok(vec![x[0], 2.0 * x[2]]);
        let cov = estimate_inactive_covariance(sim, 3, &[2], 4, 200, 1).unwrap();
        assert!(cov[(0, 0)].abs() < 1e-12);
        // Var(2U) for U uniform on [-1,1] is 4/3.
        assert!((cov[(1, 1)] - 4.0 / 3.0).abs() < 0.05);
    }
}
