//! Run the toy campaign, then sample its final region and keep the runs whose
//! exact implausibility meets the final cutoff.

use histmatch::campaign::{Campaign, TOY_TEMPLATE};

fn main() -> histmatch::error::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut campaign = Campaign::init(&tmp.path().join("toy"), TOY_TEMPLATE, tmp.path())?;
    campaign.resume(false)?;
    let (h, s) = campaign.harvest(Some(100), Some(2.5))?;
    println!(
        "{} of {} sampled runs have I_M < {} ({} failed)",
        s.accepted,
        s.sampled,
        s.cutoff,
        s.failed,
    );
    let mut best: Vec<(f64, &[f64])> = h
        .sampled
        .rows()
        .iter()
        .zip(&h.i_m)
        .filter(|(_, v)| v.is_finite())
        .map(|(r, v)| (*v, r.raw.as_slice()))
        .collect();
    best.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (v, raw) in best.iter().take(3) {
        let x: Vec<String> = raw.iter().map(|v| format!("{v:.3}")).collect();
        println!("  I_M {v:.3} at [{}]", x.join(", "));
    }
    Ok(())
}
