//! Univariate, order-statistic and multivariate implausibility for a set of
//! emulator predictions.

use histmatch::budget::{ComponentClass, ComponentSpec, VarianceBudget};
use histmatch::implausibility::{chi_square_cutoff, passes, univariate, CutoffSet, Multivariate, Scorer};

fn main() -> histmatch::error::Result<()> {
    println!("single output: I = {:.3}", univariate(1.0, 0.7, 0.01, 0.02)?);

    let m = 5;
    let budget = VarianceBudget::build(
        &[
            ComponentSpec::correlated("discrepancy", ComponentClass::Discrepancy, vec![0.1; m], 0.6, vec![(0..m).collect()]),
            ComponentSpec::diagonal("observation", ComponentClass::Observation, vec![0.05; m]),
        ],
        m,
    )?;
    let z = [1.0, 0.9, 0.8, 0.7, 0.6];
    let scorer = Scorer::new((0..m).collect(), &budget, &z, &Multivariate::Full)?;
    let mean = [1.05, 0.7, 0.85, 0.35, 0.62];
    let var = [0.001, 0.002, 0.001, 0.004, 0.001];
    let r = scorer.score_moments(&mean, &var)?;
    println!("per output: {:?}", r.per_output.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!(
        "I_M {:.2}, I_2M {:.2}, I_3M {:.2}, I_MV {:.2}",
        r.i_m.unwrap_or(f64::NAN),
        r.i_2m.unwrap_or(f64::NAN),
        r.i_3m.unwrap_or(f64::NAN),
        r.i_mv.unwrap_or(f64::NAN)
    );

    let cutoffs = CutoffSet {
        i_2m: Some(2.7),
        i_3m: Some(2.3),
        i_mv: Some(chi_square_cutoff(m, 0.995)),
        ..Default::default()
    };
    println!("chi-square guidance for I_MV with {m} outputs: {:.2}", cutoffs.i_mv.unwrap_or_default());
    println!("passes: {}", passes(&r, &cutoffs)?);
    Ok(())
}
