//! Minimized implausibility and optical depth over one input pair of a
//! two-wave toy chain, printed as character maps.

use histmatch::budget::{ComponentClass, ComponentSpec, VarianceBudget};
use histmatch::implausibility::CutoffSet;
use histmatch::projection::{project_pair, ProjectionSettings};
use histmatch::simulators::{synthesize_observations, Simulator, ToyCoefficients, ToySimulator};
use histmatch::space::ParameterSpace;
use histmatch::wave::{run_wave, WaveChain, WavePlan};

fn main() -> histmatch::error::Result<()> {
    let d = 4;
    let sim = ToySimulator::new(ToyCoefficients::geometric(d))?;
    let m = sim.spec().output_count;
    let budget = VarianceBudget::build(
        &[
            ComponentSpec::diagonal("discrepancy", ComponentClass::Discrepancy, vec![0.04; m]),
            ComponentSpec::diagonal("observation", ComponentClass::Observation, vec![0.02; m]),
        ],
        m,
    )?;
    let z = synthesize_observations(&sim, &[0.3, -0.4, 0.2, 0.5], &budget, 1)?;
    let mut chain = WaveChain::new(d, budget, z)?;
    for w in 0..2 {
        let mut plan = WavePlan::new(
            80,
            (0..m).collect(),
            CutoffSet {
                i_2m: Some(2.7),
                i_3m: Some(2.3),
                ..Default::default()
            },
            10 + w,
        );
        plan.diagnostic_runs = 40;
        plan.space_candidates = 5000;
        plan.override_diagnostics = true;
        run_wave(&mut chain, &plan, &sim, &ParameterSpace::unit(d), None)?;
    }

    let settings = ProjectionSettings {
        resolution: 24,
        n_hidden: 100,
        ..Default::default()
    };
    let (min, depth) = project_pair(&chain.view(), (0, 1), &settings, 3)?;
    println!("min I_2M over x2, x3 (x0 across, x1 up; '#' < 2.7, '+' < 4, '.' otherwise):");
    for row in min.values.iter().rev() {
        let line: String = row.iter().map(|v| if *v < 2.7 { '#' } else if *v < 4.0 { '+' } else { '.' }).collect();
        println!("  {line}");
    }
    println!("optical depth (digit = tenths of hidden volume inside):");
    for row in depth.values.iter().rev() {
        let line: String = row
            .iter()
            .map(|v| if *v == 0.0 { '.' } else { char::from_digit(((v * 10.0).floor() as u32).min(9), 10).unwrap_or('9') })
            .collect();
        println!("  {line}");
    }
    println!("mean depth {:.4}, space fraction {:.4}", depth.mean(), chain.space_fraction(50_000, 2)?.fraction);
    Ok(())
}
