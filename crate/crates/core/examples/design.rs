//! Latin hypercube designs, maximin improvement and rejection sampling inside
//! a region.

use histmatch::design::{constrained_design, is_latin, latin_hypercube, maximin_improve};

fn main() -> histmatch::error::Result<()> {
    let lhs = latin_hypercube(40, 3, 7);
    println!(
        "LHS: {} points, latin = {}, min distance {:.4}",
        lhs.len(),
        is_latin(&lhs.points),
        lhs.min_pairwise_distance()
    );

    let better = maximin_improve(&lhs, 2000, 7);
    println!(
        "after maximin: latin = {}, min distance {:.4}",
        is_latin(&better.points),
        better.min_pairwise_distance()
    );

    // A ball of radius 0.5 fills about 6.5% of the cube.
    let ball = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() < 0.25;
    let c = constrained_design(25, 3, ball, 2.0, 11)?;
    println!(
        "ball: {} points from {} candidates (acceptance {:.3}, short = {})",
        c.design.len(),
        c.candidates,
        c.acceptance_rate(),
        c.short
    );
    Ok(())
}
