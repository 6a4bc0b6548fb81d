//! A complete toy campaign through the library API: three waves, the space
//! fraction after each, and the regression progression.

use histmatch::campaign::{Campaign, TOY_TEMPLATE};
use histmatch::diagnostics::{regression_progression, write_progression_csv};

fn main() -> histmatch::error::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().join("toy");
    let mut campaign = Campaign::init(&root, TOY_TEMPLATE, tmp.path())?;
    for out in campaign.resume(false)? {
        let r = &out.record;
        println!(
            "wave {}: {} runs, worst exceedance {:.1}%, space fraction {:.4} +- {:.4}",
            r.wave,
            r.runs,
            100.0 * r.exceedance.iter().cloned().fold(0.0, f64::max),
            r.space.fraction,
            r.space.se
        );
    }
    let chain = campaign.chain()?;
    write_progression_csv(&regression_progression(&chain), std::io::stdout())?;
    Ok(())
}
