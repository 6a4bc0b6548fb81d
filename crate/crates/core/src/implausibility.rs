//! Implausibility measures and cutoff decisions.
//!
//! For output `i` the univariate implausibility is
//! `I_(i)(x) = |z_i − E f_i(x)| / sqrt(Var f_i(x) + Var ε_i + Var e_i)`.
//! The per-output values are combined into the largest, second largest and
//! third largest (`I_M`, `I_2M`, `I_3M`), and optionally a multivariate
//! Mahalanobis form `I_MV`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::budget::VarianceBudget;
use crate::emulator::{Emulator, Prediction};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImplausibilityResult {
    pub per_output: Vec<f64>,
    pub i_m: Option<f64>,
    pub i_2m: Option<f64>,
    pub i_3m: Option<f64>,
    pub i_mv: Option<f64>,
}

/// Optional upper bounds on each combined statistic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_2m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_3m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_mv: Option<f64>,
}

impl CutoffSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        for (name, v) in self.entries() {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::config(format!("{key}.{name}"), "threshold must be positive"));
                }
            }
        }
        Ok(())
    }

    fn entries(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("i_m", self.i_m),
            ("i_2m", self.i_2m),
            ("i_3m", self.i_3m),
            ("i_mv", self.i_mv),
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.entries().iter().all(|(_, v)| v.is_none())
    }

    /// Threshold for the named statistic (`i_m`, `i_2m`, `i_3m`, `i_mv`).
    pub fn get(&self, stat: Statistic) -> Option<f64> {
        match stat {
            Statistic::IM => self.i_m,
            Statistic::I2M => self.i_2m,
            Statistic::I3M => self.i_3m,
            Statistic::IMV => self.i_mv,
        }
    }
}

/// One of the combined implausibility statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    #[serde(rename = "i_m")]
    IM,
    #[serde(rename = "i_2m")]
    I2M,
    #[serde(rename = "i_3m")]
    I3M,
    #[serde(rename = "i_mv")]
    IMV,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::IM => "i_m",
            Statistic::I2M => "i_2m",
            Statistic::I3M => "i_3m",
            Statistic::IMV => "i_mv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i_m" | "im" => Some(Statistic::IM),
            "i_2m" | "i2m" => Some(Statistic::I2M),
            "i_3m" | "i3m" => Some(Statistic::I3M),
            "i_mv" | "imv" => Some(Statistic::IMV),
            _ => None,
        }
    }
}

impl ImplausibilityResult {
    pub fn get(&self, stat: Statistic) -> Option<f64> {
        match stat {
            Statistic::IM => self.i_m,
            Statistic::I2M => self.i_2m,
            Statistic::I3M => self.i_3m,
            Statistic::IMV => self.i_mv,
        }
    }
}

/// Univariate implausibility for one output.
pub fn univariate(z: f64, mean: f64, emulator_variance: f64, other_variance: f64) -> Result<f64> {
    let total = emulator_variance + other_variance;
    if !(total > 0.0) {
        return Err(Error::config(
            "budget",
            "total variance must be positive for every emulated output",
        ));
    }
    Ok((z - mean).abs() / total.sqrt())
}

/// Largest, second and third largest entries. Entries that do not exist
/// (vectors shorter than three) are `None`.
pub fn combine(per_output: &[f64]) -> [Option<f64>; 3] {
    let mut top = [None; 3];
    for &v in per_output {
        let mut v = v;
        for slot in top.iter_mut() {
            match slot {
                None => {
                    *slot = Some(v);
                    break;
                }
                Some(cur) if v > *cur => {
                    let old = *cur;
                    *cur = v;
                    v = old;
                }
                _ => {}
            }
        }
    }
    top
}

/// `rᵀ V⁻¹ r` through a Cholesky factorization (with jitter escalation).
pub fn mahalanobis_sq(residual: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::with_escalation(cov)?;
    Ok(chol.quadratic_form(residual))
}

/// Whether every threshold in `cutoffs` is met.
pub fn passes(result: &ImplausibilityResult, cutoffs: &CutoffSet) -> Result<bool> {
    for stat in [Statistic::IM, Statistic::I2M, Statistic::I3M, Statistic::IMV] {
        if let Some(limit) = cutoffs.get(stat) {
            let value = result.get(stat).ok_or_else(|| {
                Error::config(
                    format!("cutoffs.{}", stat.name()),
                    "cutoff set on a statistic that is not computed",
                )
            })?;
            if !(value <= limit) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Multivariate scoring: off, the full emulated vector, or the maximum over
/// groups of outputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multivariate {
    Off,
    #[default]
    Full,
    /// Groups of global output indices; `I_MV` is the largest group value.
    Groups(Vec<Vec<usize>>),
}

/// Chi-square quantile used as guidance for `I_MV` thresholds; the
/// 0.995 quantile with 11 degrees of freedom is about 26.76.
pub fn chi_square_cutoff(dof: usize, probability: f64) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("dof >= 1")
        .inverse_cdf(probability)
}

/// Scores points for a fixed set of emulated outputs against observations.
#[derive(Debug, Clone)]
pub struct Scorer {
    outputs: Vec<usize>,
    z: Vec<f64>,
    cov: DMatrix<f64>,
    groups: Option<Vec<Vec<usize>>>,
}

impl Scorer {
    /// `outputs` are global output indices; `groups`, when given, use global
    /// indices too and must be subsets of `outputs`.
    pub fn new(outputs: Vec<usize>, budget: &VarianceBudget, z: &[f64], multivariate: &Multivariate) -> Result<Self> {
        if z.len() != budget.outputs() {
            return Err(Error::Dimension {
                context: "observations vs budget".into(),
                expected: budget.outputs(),
                found: z.len(),
            });
        }
        if let Some(&bad) = outputs.iter().find(|&&i| i >= z.len()) {
            return Err(Error::config("outputs", format!("output index {bad} out of range")));
        }
        for &i in &outputs {
            if !(budget.total_variance(i) >= 0.0) {
                return Err(Error::config("budget", format!("negative variance on output {i}")));
            }
        }
        let groups = match multivariate {
            Multivariate::Off => None,
            Multivariate::Full => Some(vec![(0..outputs.len()).collect()]),
            Multivariate::Groups(gs) => Some(
                gs.iter()
                    .map(|g| {
                        g.iter()
                            .map(|o| {
                                outputs.iter().position(|x| x == o).ok_or_else(|| {
                                    Error::config(
                                        "implausibility.groups",
                                        format!("output {o} is not emulated"),
                                    )
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Scorer {
            z: outputs.iter().map(|&i| z[i]).collect(),
            cov: budget.sub_total(&outputs),
            outputs,
            groups,
        })
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn multivariate_enabled(&self) -> bool {
        self.groups.is_some()
    }

    /// Scores from means and emulator variances given per emulated output.
    pub fn score_moments(&self, mean: &[f64], emulator_variance: &[f64]) -> Result<ImplausibilityResult> {
        let m = self.outputs.len();
        debug_assert_eq!(mean.len(), m);
        let per_output = (0..m)
            .map(|k| univariate(self.z[k], mean[k], emulator_variance[k], self.cov[(k, k)]))
            .collect::<Result<Vec<_>>>()?;
        let [i_m, i_2m, i_3m] = combine(&per_output);
        let i_mv = match &self.groups {
            None => None,
            Some(groups) => {
                let mut best = f64::NEG_INFINITY;
                for g in groups {
                    let r: Vec<f64> = g.iter().map(|&k| self.z[k] - mean[k]).collect();
                    let v = DMatrix::from_fn(g.len(), g.len(), |a, b| {
                        let (ka, kb) = (g[a], g[b]);
                        self.cov[(ka, kb)] + if a == b { emulator_variance[ka] } else { 0.0 }
                    });
                    best = best.max(mahalanobis_sq(&r, &v)?);
                }
                Some(best)
            }
        };
        Ok(ImplausibilityResult {
            per_output,
            i_m,
            i_2m,
            i_3m,
            i_mv,
        })
    }

    pub fn score_predictions(&self, preds: &[Prediction]) -> Result<ImplausibilityResult> {
        let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        let var: Vec<f64> = preds.iter().map(|p| p.variance).collect();
        self.score_moments(&mean, &var)
    }

    /// Scores `x` using one emulator per emulated output (same order).
    pub fn score(&self, x: &[f64], emulators: &[Emulator]) -> Result<ImplausibilityResult> {
        let preds: Vec<Prediction> = emulators.iter().map(|e| e.emulate(x)).collect();
        self.score_predictions(&preds)
    }

    /// Scores actual simulator outputs (full output vector) with no emulator
    /// uncertainty.
    pub fn score_exact(&self, outputs: &[f64]) -> Result<ImplausibilityResult> {
        let mean: Vec<f64> = self.outputs.iter().map(|&i| outputs[i]).collect();
        self.score_moments(&mean, &vec![0.0; mean.len()])
    }
}

/// Per-output implausibilities of `x`; emulators are matched to observations
/// and budget entries through their output index.
pub fn implausibility_vector(x: &[f64], emulators: &[Emulator], budget: &VarianceBudget, z: &[f64]) -> Result<Vec<f64>> {
    let outputs: Vec<usize> = emulators.iter().map(Emulator::output_index).collect();
    let scorer = Scorer::new(outputs, budget, z, &Multivariate::Off)?;
    Ok(scorer.score(x, emulators)?.per_output)
}

/// Full multivariate implausibility `(z − E f)ᵀ V⁻¹ (z − E f)`.
pub fn multivariate_implausibility(x: &[f64], emulators: &[Emulator], budget: &VarianceBudget, z: &[f64]) -> Result<f64> {
    let outputs: Vec<usize> = emulators.iter().map(Emulator::output_index).collect();
    let scorer = Scorer::new(outputs, budget, z, &Multivariate::Full)?;
    Ok(scorer.score(x, emulators)?.i_mv.expect("full multivariate enabled"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{ComponentClass, ComponentSpec};
    use proptest::prelude::*;

    #[test]
    fn univariate_cases() {
        assert_eq!(univariate(2.0, 2.0, 0.3, 0.1).unwrap(), 0.0);
        assert_eq!(univariate(4.0, 1.0, 0.25, 0.75).unwrap(), 3.0);
        assert!(univariate(1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn combine_orders_and_flags_missing() {
        assert_eq!(combine(&[3.1, 2.8, 2.0]), [Some(3.1), Some(2.8), Some(2.0)]);
        assert_eq!(combine(&[2.0, 3.1, 2.8]), [Some(3.1), Some(2.8), Some(2.0)]);
        assert_eq!(combine(&[1.5, 1.5, 1.5, 1.5]), [Some(1.5); 3]);
        assert_eq!(combine(&[0.4, 1.2]), [Some(1.2), Some(0.4), None]);
    }

    fn result(i_m: f64, i_2m: f64, i_3m: f64, i_mv: Option<f64>) -> ImplausibilityResult {
        ImplausibilityResult {
            per_output: vec![],
            i_m: Some(i_m),
            i_2m: Some(i_2m),
            i_3m: Some(i_3m),
            i_mv,
        }
    }

    #[test]
    fn wave_one_cutoffs_ignore_i_m() {
        let c = CutoffSet {
            i_2m: Some(2.7),
            i_3m: Some(2.3),
            ..Default::default()
        };
        assert!(passes(&result(5.0, 2.6, 2.0, None), &c).unwrap());
    }

    #[test]
    fn wave_four_cutoffs_fail_on_any_excess() {
        let c = CutoffSet {
            i_m: Some(3.2),
            i_2m: Some(2.7),
            i_3m: Some(2.3),
            i_mv: Some(26.75),
        };
        assert!(passes(&result(3.0, 2.5, 2.0, Some(20.0)), &c).unwrap());
        assert!(!passes(&result(3.3, 2.5, 2.0, Some(20.0)), &c).unwrap());
        assert!(!passes(&result(3.0, 2.8, 2.0, Some(20.0)), &c).unwrap());
        assert!(!passes(&result(3.0, 2.5, 2.4, Some(20.0)), &c).unwrap());
        assert!(!passes(&result(3.0, 2.5, 2.0, Some(27.0)), &c).unwrap());
    }

    #[test]
    fn empty_cutoffs_always_pass() {
        assert!(passes(&result(100.0, 90.0, 80.0, None), &CutoffSet::none()).unwrap());
    }

    #[test]
    fn cutoff_on_missing_statistic_is_config_error() {
        let c = CutoffSet {
            i_mv: Some(26.75),
            ..Default::default()
        };
        assert!(matches!(passes(&result(1.0, 1.0, 1.0, None), &c), Err(Error::Config { .. })));
    }

    #[test]
    fn chi_square_guidance_near_tabulated_threshold() {
        assert!((chi_square_cutoff(11, 0.995) - 26.75).abs() < 0.02);
    }

    fn diag_budget(m: usize, var: f64) -> VarianceBudget {
        VarianceBudget::build(&[variance_spec(vec![var; m])], m).unwrap()
    }

    fn variance_spec(variance: Vec<f64>) -> ComponentSpec {
        ComponentSpec {
            name: "d".into(),
            class: Some(ComponentClass::Discrepancy),
            variance: Some(variance),
            ..Default::default()
        }
    }

    #[test]
    fn unit_diagonal_multivariate_is_sum_of_squares() {
        let m = 11;
        let b = diag_budget(m, 1.0);
        let z = vec![1.0; m];
        let s = Scorer::new((0..m).collect(), &b, &z, &Multivariate::Full).unwrap();
        let r = s.score_moments(&vec![0.0; m], &vec![0.0; m]).unwrap();
        assert!((r.i_mv.unwrap() - 11.0).abs() < 1e-12);
        let zero = s.score_moments(&z, &vec![0.3; m]).unwrap();
        assert_eq!(zero.i_mv, Some(0.0));
        assert!(zero.per_output.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn correlated_budget_matches_dense_inverse() {
        let m = 6;
        let b = VarianceBudget::build(
            &[
                ComponentSpec::correlated("e", ComponentClass::Discrepancy, vec![0.3, 0.2, 0.25, 0.1, 0.15, 0.2], 0.6, vec![vec![0, 1, 2], vec![3, 4, 5]]),
                ComponentSpec::diagonal("o", ComponentClass::Observation, vec![0.05; m]),
            ],
            m,
        )
        .unwrap();
        let z = vec![0.3, -0.1, 0.2, 0.5, -0.4, 0.0];
        let mean = vec![0.0, 0.1, -0.1, 0.2, 0.1, 0.3];
        let ev = vec![0.01, 0.02, 0.0, 0.05, 0.01, 0.02];
        let s = Scorer::new((0..m).collect(), &b, &z, &Multivariate::Full).unwrap();
        let r = s.score_moments(&mean, &ev).unwrap();
        let v = b.total() + DMatrix::from_diagonal(&ev.clone().into());
        let d = nalgebra::DVector::from_fn(m, |i, _| z[i] - mean[i]);
        let oracle = (d.transpose() * v.try_inverse().unwrap() * &d)[(0, 0)];
        assert!((r.i_mv.unwrap() - oracle).abs() < 1e-10);
        let sum_sq: f64 = r.per_output.iter().map(|v| v * v).sum();
        assert!((r.i_mv.unwrap() - sum_sq).abs() > 1e-3);
    }

    #[test]
    fn groups_take_the_largest_group_value() {
        let b = diag_budget(4, 1.0);
        let z = vec![1.0, 2.0, 0.0, 0.0];
        let s = Scorer::new(vec![0, 1, 2, 3], &b, &z, &Multivariate::Groups(vec![vec![0, 2], vec![1, 3]])).unwrap();
        let r = s.score_moments(&[0.0; 4], &[0.0; 4]).unwrap();
        assert!((r.i_mv.unwrap() - 4.0).abs() < 1e-12);
        assert!(Scorer::new(vec![0, 1], &b, &z, &Multivariate::Groups(vec![vec![2]])).is_err());
    }

    proptest! {
        #[test]
        fn unit_rescaling_leaves_implausibility_unchanged(
            z in -5.0f64..5.0, mean in -5.0f64..5.0, ev in 0.0f64..2.0, ov in 0.01f64..2.0, s in 0.01f64..100.0,
        ) {
            let a = univariate(z, mean, ev, ov).unwrap();
            let b = univariate(s * z, s * mean, s * s * ev, s * s * ov).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn more_variance_means_less_implausible(
            z in -5.0f64..5.0, mean in -5.0f64..5.0, ev in 0.0f64..2.0, ov in 0.01f64..2.0, extra in 0.001f64..2.0,
        ) {
            prop_assume!((z - mean).abs() > 1e-6);
            prop_assert!(univariate(z, mean, ev + extra, ov).unwrap() < univariate(z, mean, ev, ov).unwrap());
        }

        #[test]
        fn loosening_never_flips_pass_to_fail(
            v in prop::collection::vec(0.0f64..5.0, 4),
            t in prop::collection::vec(0.1f64..5.0, 4),
            bump in prop::collection::vec(0.0f64..2.0, 4),
        ) {
            let r = result(v[0], v[1], v[2], Some(v[3]));
            let c = CutoffSet { i_m: Some(t[0]), i_2m: Some(t[1]), i_3m: Some(t[2]), i_mv: Some(t[3]) };
            let loose = CutoffSet { i_m: Some(t[0] + bump[0]), i_2m: Some(t[1] + bump[1]), i_3m: Some(t[2] + bump[2]), i_mv: Some(t[3] + bump[3]) };
            if passes(&r, &c).unwrap() {
                prop_assert!(passes(&r, &loose).unwrap());
            }
        }

        #[test]
        fn diagonal_multivariate_equals_univariate_sum(
            resid in prop::collection::vec(-3.0f64..3.0, 5),
            var in prop::collection::vec(0.01f64..2.0, 5),
            ev in prop::collection::vec(0.0f64..1.0, 5),
        ) {
            let b = VarianceBudget::build(&[variance_spec(var.clone())], 5).unwrap();
            let s = Scorer::new((0..5).collect(), &b, &resid, &Multivariate::Full).unwrap();
            let r = s.score_moments(&[0.0; 5], &ev).unwrap();
            let sum_sq: f64 = r.per_output.iter().map(|v| v * v).sum();
            prop_assert!((r.i_mv.unwrap() - sum_sq).abs() <= 1e-10 * sum_sq.max(1.0));
        }
    }
}
