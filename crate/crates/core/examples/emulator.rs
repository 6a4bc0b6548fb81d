//! Fit a Bayes linear emulator to the toy simulator and compare it with the
//! truth at fresh points.

use histmatch::design::latin_hypercube;
use histmatch::emulator::{fit_emulator, EmulatorConfig, NuggetRule};
use histmatch::runs::RunTable;
use histmatch::simulators::{Simulator, ToyCoefficients, ToySimulator};

fn main() -> histmatch::error::Result<()> {
    let d = 6;
    let sim = ToySimulator::new(ToyCoefficients::geometric(d))?;
    let x = latin_hypercube(150, d, 1).points;
    let f: Vec<Vec<f64>> = x.iter().map(|p| sim.run(p).expect("toy never fails")).collect();
    let runs = RunTable::from_points(&x, &f)?;

    let config = EmulatorConfig {
        max_active: 4,
        nugget_rule: NuggetRule::Loo,
        ..Default::default()
    };
    let output = 5;
    let em = fit_emulator(&runs, output, &config)?;
    let s = em.summary();
    println!(
        "output {output}: active {:?}, degree {}, adjusted R2 {:.5}, theta {:.3}",
        em.active_set(),
        s.degree,
        s.adjusted_r2,
        em.theta()
    );

    println!("{:>10} {:>10} {:>10} {:>8}", "truth", "mean", "sd", "z");
    for p in latin_hypercube(8, d, 99).points {
        let truth = sim.run(&p).expect("toy never fails")[output];
        let pred = em.emulate(&p);
        let sd = pred.variance.sqrt();
        println!("{truth:>10.5} {:>10.5} {sd:>10.2e} {:>8.2}", pred.mean, (truth - pred.mean) / sd);
    }
    Ok(())
}
