//! Assemble a variance budget from correlated and diagonal components and
//! print the per-output report.

use histmatch::budget::{ComponentClass, ComponentSpec, VarianceBudget};

fn main() -> histmatch::error::Result<()> {
    let m = 6;
    let budget = VarianceBudget::build(
        &[
            ComponentSpec::correlated(
                "model",
                ComponentClass::Discrepancy,
                vec![0.08; m],
                0.5,
                vec![vec![0, 1, 2], vec![3, 4, 5]],
            ),
            ComponentSpec::diagonal("inactive", ComponentClass::Discrepancy, vec![0.03; m]),
            ComponentSpec::diagonal("observation", ComponentClass::Observation, vec![0.02, 0.02, 0.03, 0.05, 0.05, 0.08]),
        ],
        m,
    )?;
    let labels: Vec<String> = (0..m).map(|k| format!("bin_{k}")).collect();
    budget.report().write_csv(std::io::stdout(), Some(&labels))?;

    let doubled = budget.scale_component("observation", 4.0)?;
    println!("\ntotal sd with observation variance x4:");
    for k in 0..m {
        println!("  bin_{k}: {:.4} -> {:.4}", budget.total_variance(k).sqrt(), doubled.total_variance(k).sqrt());
    }
    Ok(())
}
