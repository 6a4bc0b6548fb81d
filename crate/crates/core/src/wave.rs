//! Waves of design, simulation, emulation and cutting, and the chain of frozen
//! waves that defines the current non-implausible region.
//!
//! A point belongs to the region after wave `k` only if it passes the cutoffs
//! of every wave `1..=k`, each scored with that wave's own emulators.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::VarianceBudget;
use crate::design::{constrained_design, latin_hypercube, maximin_improve, DesignMatrix};
use crate::diagnostics::{held_out_diagnostics, DiagnosticReport, DEFAULT_THRESHOLD};
use crate::emulator::{fit_emulator, Emulator, EmulatorConfig};
use crate::error::{Error, Result};
use crate::implausibility::{passes, CutoffSet, ImplausibilityResult, Multivariate, Scorer, Statistic};
use crate::runs::{RunRecord, RunStatus, RunTable};
use crate::seed::{self, tag};
use crate::simulators::{SimFailure, Simulator};
use crate::space::ParameterSpace;

/// A subset of the unit cube, queried by membership.
pub trait Region: Sync {
    fn dimension(&self) -> usize;

    fn contains(&self, x: &[f64]) -> bool;
}

/// A region given by a closure; handy for analytic test regions.
pub struct FnRegion<F> {
    dimension: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> bool + Sync> FnRegion<F> {
    pub fn new(dimension: usize, f: F) -> Self {
        FnRegion { dimension, f }
    }
}

impl<F: Fn(&[f64]) -> bool + Sync> Region for FnRegion<F> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn contains(&self, x: &[f64]) -> bool {
        (self.f)(x)
    }
}

/// Monte Carlo estimate of a region's share of the cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceEstimate {
    pub fraction: f64,
    pub se: f64,
    pub samples: usize,
}

impl SpaceEstimate {
    /// Whether `later` is no larger than `self` within `k` combined standard errors.
    pub fn not_larger(&self, later: &SpaceEstimate, k: f64) -> bool {
        later.fraction <= self.fraction + k * (self.se.powi(2) + later.se.powi(2)).sqrt()
    }
}

const SPACE_CHUNK: usize = 1024;

/// Uniform Monte Carlo estimate of the volume fraction of `region`;
/// `se = sqrt(p(1 − p)/n)`. Needs at least 1000 samples.
pub fn space_fraction<R: Region + ?Sized>(region: &R, samples: usize, seed: u64) -> Result<SpaceEstimate> {
    if samples < 1000 {
        return Err(Error::config("space_candidates", "at least 1000 samples are required"));
    }
    let d = region.dimension();
    let chunks = samples.div_ceil(SPACE_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed::derive(seed, &[c as u64]));
            let size = SPACE_CHUNK.min(samples - c * SPACE_CHUNK);
            let mut x = vec![0.0; d];
            (0..size)
                .filter(|_| {
                    for v in x.iter_mut() {
                        *v = rng.random_range(-1.0..=1.0);
                    }
                    region.contains(&x)
                })
                .count()
        })
        .sum();
    let p = hits as f64 / samples as f64;
    Ok(SpaceEstimate {
        fraction: p,
        se: (p * (1.0 - p) / samples as f64).sqrt(),
        samples,
    })
}

/// Outcome of the stopping rule: mean emulator variance over the current
/// region, as a fraction of discrepancy plus observation variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub ratios: Vec<f64>,
    pub threshold: f64,
    pub samples: usize,
    pub satisfied: bool,
}

/// Everything persisted about a completed wave apart from its emulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveRecord {
    pub wave: usize,
    pub outputs: Vec<usize>,
    pub cutoffs: CutoffSet,
    pub multivariate: Multivariate,
    pub runs: usize,
    pub failed_runs: usize,
    pub diagnostic_runs: usize,
    pub first_run_id: u64,
    pub next_run_id: u64,
    pub design_candidates: usize,
    pub design_acceptance: f64,
    pub design_short: bool,
    pub diagnostics_pass: bool,
    pub diagnostics_overridden: bool,
    pub exceedance: Vec<f64>,
    pub space: SpaceEstimate,
    pub termination: Option<Termination>,
    pub run_table: String,
    pub emulator_files: Vec<String>,
}

/// A frozen wave: its record, fitted emulators and scorer.
#[derive(Debug, Clone)]
pub struct Wave {
    record: WaveRecord,
    emulators: Vec<Emulator>,
    scorer: Scorer,
    prior_variance: Vec<f64>,
}

impl Wave {
    pub fn new(record: WaveRecord, emulators: Vec<Emulator>, budget: &VarianceBudget, z: &[f64]) -> Result<Self> {
        let outputs: Vec<usize> = emulators.iter().map(Emulator::output_index).collect();
        if outputs != record.outputs {
            return Err(Error::State(format!(
                "wave {} emulators cover outputs {outputs:?}, record lists {:?}",
                record.wave, record.outputs
            )));
        }
        record.cutoffs.validate("cutoffs")?;
        let scorer = Scorer::new(outputs, budget, z, &record.multivariate)?;
        if record.cutoffs.i_mv.is_some() && !scorer.multivariate_enabled() {
            return Err(Error::config("cutoffs.i_mv", "requires multivariate scoring"));
        }
        let prior_variance = emulators.iter().map(Emulator::prior_variance).collect();
        Ok(Wave {
            record,
            emulators,
            scorer,
            prior_variance,
        })
    }

    pub fn index(&self) -> usize {
        self.record.wave
    }

    pub fn record(&self) -> &WaveRecord {
        &self.record
    }

    pub fn emulators(&self) -> &[Emulator] {
        &self.emulators
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn score(&self, x: &[f64]) -> Result<ImplausibilityResult> {
        self.scorer.score(x, &self.emulators)
    }

    /// Value of `stat` at `x`; infinite when it is not computed or scoring fails.
    pub fn statistic(&self, x: &[f64], stat: Statistic) -> f64 {
        self.score(x)
            .ok()
            .and_then(|r| r.get(stat))
            .unwrap_or(f64::INFINITY)
    }

    /// Lower bound on [`Wave::statistic`] from the emulator means alone.
    pub fn statistic_lower_bound(&self, x: &[f64], stat: Statistic) -> f64 {
        let means: Vec<f64> = self.emulators.iter().map(|e| e.mean(x)).collect();
        self.scorer
            .score_moments(&means, &self.prior_variance)
            .ok()
            .and_then(|r| r.get(stat))
            .unwrap_or(0.0)
    }

    /// Whether `x` passes this wave's cutoffs. A scoring error counts as a
    /// failure.
    ///
    /// Emulator variances never exceed the prior variance, so scoring with the
    /// prior variance gives lower bounds on every statistic; a point that fails
    /// on those bounds is rejected without the full variance computation.
    pub fn passes(&self, x: &[f64]) -> bool {
        if self.record.cutoffs.is_empty() {
            return true;
        }
        let means: Vec<f64> = self.emulators.iter().map(|e| e.mean(x)).collect();
        match self
            .scorer
            .score_moments(&means, &self.prior_variance)
            .and_then(|r| passes(&r, &self.record.cutoffs))
        {
            Ok(true) => {}
            _ => return false,
        }
        self.score(x)
            .and_then(|r| passes(&r, &self.record.cutoffs))
            .unwrap_or(false)
    }
}

/// The ordered waves run so far, with the observations and budget they share.
#[derive(Debug, Clone)]
pub struct WaveChain {
    dimension: usize,
    budget: VarianceBudget,
    z: Vec<f64>,
    waves: Vec<Wave>,
}

impl WaveChain {
    pub fn new(dimension: usize, budget: VarianceBudget, z: Vec<f64>) -> Result<Self> {
        if z.len() != budget.outputs() {
            return Err(Error::Dimension {
                context: "observations vs budget".into(),
                expected: budget.outputs(),
                found: z.len(),
            });
        }
        Ok(WaveChain {
            dimension,
            budget,
            z,
            waves: Vec::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn budget(&self) -> &VarianceBudget {
        &self.budget
    }

    pub fn observations(&self) -> &[f64] {
        &self.z
    }

    pub fn waves(&self) -> &[Wave] {
        &self.waves
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn last(&self) -> Option<&Wave> {
        self.waves.last()
    }

    /// Appends a wave; its index must follow the last one.
    pub fn push(&mut self, wave: Wave) -> Result<()> {
        if wave.index() != self.len() + 1 {
            return Err(Error::State(format!(
                "expected wave {}, got wave {}",
                self.len() + 1,
                wave.index()
            )));
        }
        if let Some(bad) = wave
            .emulators
            .iter()
            .flat_map(|e| e.active_set())
            .find(|&&k| k >= self.dimension)
        {
            return Err(Error::Dimension {
                context: format!("wave {} active input", wave.index()),
                expected: self.dimension,
                found: *bad,
            });
        }
        self.waves.push(wave);
        Ok(())
    }

    /// Drops every wave after the first `k`.
    pub fn truncate(&mut self, k: usize) {
        self.waves.truncate(k);
    }

    /// The region defined by the first `k` waves.
    pub fn prefix(&self, k: usize) -> ChainView<'_> {
        ChainView {
            dimension: self.dimension,
            waves: &self.waves[..k.min(self.len())],
        }
    }

    pub fn view(&self) -> ChainView<'_> {
        self.prefix(self.len())
    }

    pub fn membership(&self, x: &[f64]) -> bool {
        self.view().contains(x)
    }

    pub fn space_fraction(&self, samples: usize, seed: u64) -> Result<SpaceEstimate> {
        space_fraction(&self.view(), samples, seed)
    }

    /// First run id not used by any completed wave.
    pub fn next_run_id(&self) -> u64 {
        self.last().map_or(0, |w| w.record.next_run_id)
    }

    fn last_mut(&mut self) -> Option<&mut Wave> {
        self.waves.last_mut()
    }
}

impl Region for WaveChain {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.membership(x)
    }
}

/// Borrowed view of a chain prefix.
#[derive(Debug, Clone, Copy)]
pub struct ChainView<'a> {
    dimension: usize,
    waves: &'a [Wave],
}

impl<'a> ChainView<'a> {
    pub fn waves(&self) -> &'a [Wave] {
        self.waves
    }

    pub fn last(&self) -> Option<&'a Wave> {
        self.waves.last()
    }
}

impl Region for ChainView<'_> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.waves.iter().all(|w| w.passes(x))
    }
}

/// Settings for one wave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavePlan {
    pub runs: usize,
    pub outputs: Vec<usize>,
    pub emulator: EmulatorConfig,
    pub cutoffs: CutoffSet,
    pub multivariate: Multivariate,
    pub diagnostic_runs: usize,
    pub diagnostic_threshold: f64,
    pub override_diagnostics: bool,
    pub space_candidates: usize,
    pub oversample: f64,
    pub maximin_iterations: usize,
    pub max_failure_fraction: f64,
    pub termination_fraction: f64,
    pub termination_samples: usize,
    pub seed: u64,
    /// Record wall-clock timestamps in run tables (breaks byte-identical reruns).
    pub wallclock: bool,
}

impl WavePlan {
    pub fn new(runs: usize, outputs: Vec<usize>, cutoffs: CutoffSet, seed: u64) -> Self {
        WavePlan {
            runs,
            outputs,
            emulator: EmulatorConfig::default(),
            cutoffs,
            multivariate: Multivariate::Off,
            diagnostic_runs: 200,
            diagnostic_threshold: DEFAULT_THRESHOLD,
            override_diagnostics: false,
            space_candidates: 100_000,
            oversample: 2.0,
            maximin_iterations: 2000,
            max_failure_fraction: 0.1,
            termination_fraction: 0.25,
            termination_samples: 500,
            seed,
            wallclock: false,
        }
    }

    pub fn validate(&self, key: &str, outputs: usize) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config(format!("{key}.runs"), "must be >= 1"));
        }
        if self.outputs.is_empty() {
            return Err(Error::config(format!("{key}.outputs"), "at least one output must be emulated"));
        }
        if let Some(bad) = self.outputs.iter().find(|&&o| o >= outputs) {
            return Err(Error::config(
                format!("{key}.outputs"),
                format!("output {bad} out of range (simulator has {outputs})"),
            ));
        }
        let mut sorted = self.outputs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.outputs.len() {
            return Err(Error::config(format!("{key}.outputs"), "duplicate output index"));
        }
        self.emulator.validate(&format!("{key}.emulator"))?;
        self.cutoffs.validate(&format!("{key}.cutoffs"))?;
        if self.cutoffs.i_mv.is_some() && self.multivariate == Multivariate::Off {
            return Err(Error::config(
                format!("{key}.cutoffs.i_mv"),
                "an I_MV cutoff needs multivariate scoring enabled",
            ));
        }
        if self.diagnostic_runs == 0 {
            return Err(Error::config(format!("{key}.diagnostic_runs"), "must be >= 1"));
        }
        if !(self.diagnostic_threshold > 0.0) {
            return Err(Error::config(format!("{key}.diagnostic_threshold"), "must be positive"));
        }
        if self.space_candidates < 1000 {
            return Err(Error::config(format!("{key}.space_candidates"), "must be >= 1000"));
        }
        if !(self.oversample >= 1.0) {
            return Err(Error::config(format!("{key}.oversample"), "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::config(format!("{key}.max_failure_fraction"), "must lie in [0, 1]"));
        }
        if !(self.termination_fraction >= 0.0) {
            return Err(Error::config(format!("{key}.termination_fraction"), "must be non-negative"));
        }
        Ok(())
    }
}

/// File layout of one wave directory.
#[derive(Debug, Clone)]
pub struct WaveDir {
    root: PathBuf,
}

impl WaveDir {
    pub fn new(campaign: &Path, wave: usize) -> Self {
        WaveDir {
            root: campaign.join(format!("wave_{wave}")),
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn design(&self) -> PathBuf {
        self.root.join("design.csv")
    }

    pub fn diagnostic_design(&self) -> PathBuf {
        self.root.join("diagnostic_design.csv")
    }

    pub fn design_summary(&self) -> PathBuf {
        self.root.join("design.json")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs.csv")
    }

    pub fn diagnostic_runs(&self) -> PathBuf {
        self.root.join("diagnostic_runs.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }

    pub fn record(&self) -> PathBuf {
        self.root.join("record.json")
    }

    pub fn emulator_file(output: usize) -> String {
        format!("emulators/output_{output}.emu")
    }

    pub fn has_design(&self) -> bool {
        self.design().exists() && self.diagnostic_design().exists() && self.design_summary().exists()
    }

    pub fn save_design(&self, designs: &WaveDesigns) -> Result<()> {
        designs.training.save(&self.design())?;
        designs.diagnostic.save(&self.diagnostic_design())?;
        crate::io::write_json(&self.design_summary(), &designs.summary)
    }

    pub fn load_design(&self) -> Result<WaveDesigns> {
        Ok(WaveDesigns {
            training: RunTable::load(&self.design())?,
            diagnostic: RunTable::load(&self.diagnostic_design())?,
            summary: crate::io::read_json(&self.design_summary())?,
        })
    }

    /// Loads the emulator files for `outputs` without a wave record.
    pub fn load_output_emulators(&self, outputs: &[usize]) -> Result<Vec<Emulator>> {
        outputs
            .iter()
            .map(|&o| crate::io::read_json(&self.root.join(Self::emulator_file(o))))
            .collect()
    }

    /// Writes each emulator as JSON; returns paths relative to the wave dir.
    pub fn save_emulators(&self, emulators: &[Emulator]) -> Result<Vec<String>> {
        emulators
            .iter()
            .map(|e| {
                let rel = Self::emulator_file(e.output_index());
                crate::io::write_json(&self.root.join(&rel), e)?;
                Ok(rel)
            })
            .collect()
    }

    pub fn load_emulators(&self, record: &WaveRecord) -> Result<Vec<Emulator>> {
        record
            .emulator_files
            .iter()
            .map(|rel| crate::io::read_json(&self.root.join(rel)))
            .collect()
    }

    pub fn load_wave(&self, budget: &VarianceBudget, z: &[f64]) -> Result<Wave> {
        let record: WaveRecord = crate::io::read_json(&self.record())?;
        let emulators = self.load_emulators(&record)?;
        Wave::new(record, emulators, budget, z)
    }
}

/// Planned training and diagnostic designs for a wave.
#[derive(Debug, Clone)]
pub struct WaveDesigns {
    pub training: RunTable,
    pub diagnostic: RunTable,
    pub summary: DesignSummary,
}

/// How the training design was drawn; persisted as `design.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub candidates: usize,
    pub acceptance: f64,
    pub short: bool,
}

fn planned_table(
    design: &DesignMatrix,
    space: &ParameterSpace,
    outputs: usize,
    wave: usize,
    first_id: u64,
    seed: u64,
) -> Result<RunTable> {
    let mut t = RunTable::for_space(space, outputs);
    for (i, p) in design.points.iter().enumerate() {
        t.push(RunRecord {
            run_id: first_id + i as u64,
            wave,
            status: RunStatus::Planned,
            seed: seed::derive(seed, &[i as u64]),
            timestamp: 0,
            unit: p.clone(),
            raw: space.from_unit(p)?,
            outputs: Vec::new(),
            failure: None,
        })?;
    }
    Ok(t)
}

fn region_design(chain: &WaveChain, n: usize, plan: &WavePlan, seed: u64) -> Result<(DesignMatrix, usize, usize, bool)> {
    let d = chain.dimension();
    if chain.is_empty() {
        let lhs = latin_hypercube(n, d, seed);
        let design = maximin_improve(&lhs, plan.maximin_iterations, seed::derive(seed, &[0]));
        return Ok((design, n, n, false));
    }
    let c = constrained_design(n, d, |x| chain.membership(x), plan.oversample, seed)?;
    Ok((c.design, c.candidates, c.accepted, c.short))
}

/// Training design (inside the current region) and a disjoint diagnostic
/// design. Run ids continue from the chain; diagnostic ids follow training.
pub fn design_wave(chain: &WaveChain, plan: &WavePlan, space: &ParameterSpace, outputs: usize) -> Result<WaveDesigns> {
    if space.dimension() != chain.dimension() {
        return Err(Error::Dimension {
            context: "parameter space vs chain".into(),
            expected: chain.dimension(),
            found: space.dimension(),
        });
    }
    let wave = chain.len() + 1;
    let train_seed = seed::derive(plan.seed, &[tag::DESIGN, wave as u64]);
    let diag_seed = seed::derive(plan.seed, &[tag::DIAGNOSTIC, wave as u64]);
    let (train, candidates, accepted, short) = region_design(chain, plan.runs, plan, train_seed)?;
    let (diag, _, _, _) = region_design(chain, plan.diagnostic_runs, plan, diag_seed)?;
    let first = chain.next_run_id();
    let training = planned_table(&train, space, outputs, wave, first, train_seed)?;
    let diagnostic = planned_table(&diag, space, outputs, wave, first + train.len() as u64, diag_seed)?;
    Ok(WaveDesigns {
        training,
        diagnostic,
        summary: DesignSummary {
            candidates,
            acceptance: accepted as f64 / candidates.max(1) as f64,
            short,
        },
    })
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs every planned row not already completed in `existing`, in parallel,
/// calling `checkpoint` after each batch. Rows keep their design order.
pub fn simulate_table(
    sim: &dyn Simulator,
    planned: &RunTable,
    existing: Option<RunTable>,
    wallclock: bool,
    mut checkpoint: impl FnMut(&RunTable) -> Result<()>,
) -> Result<RunTable> {
    let mut table = existing.unwrap_or_else(|| RunTable::new(planned.input_names().to_vec(), planned.output_count()));
    let done = |t: &RunTable, id: u64| {
        t.rows()
            .iter()
            .any(|r| r.run_id == id && r.status != RunStatus::Planned)
    };
    let pending: Vec<&RunRecord> = planned.rows().iter().filter(|r| !done(&table, r.run_id)).collect();
    let m = planned.output_count();
    let batch = (rayon::current_num_threads() * 4).max(16);
    for chunk in pending.chunks(batch) {
        let results: Vec<RunRecord> = chunk
            .par_iter()
            .map(|row| {
                let outcome = sim.run(&row.unit).and_then(|f| {
                    if f.len() == m {
                        Ok(f)
                    } else {
                        Err(SimFailure::WrongLength {
                            expected: m,
                            found: f.len(),
                        })
                    }
                });
                let mut rec = (*row).clone();
                rec.timestamp = if wallclock { now_secs() } else { 0 };
                match outcome {
                    Ok(f) => {
                        rec.status = RunStatus::Ok;
                        rec.outputs = f;
                    }
                    Err(e) => {
                        log::warn!("run {} failed: {e}", row.run_id);
                        rec.status = RunStatus::Failed;
                        rec.failure = Some(format!("{}: {e}", e.kind()));
                    }
                }
                rec
            })
            .collect();
        for r in results {
            table.upsert(r)?;
        }
        table.sort_by_id();
        checkpoint(&table)?;
    }
    table.sort_by_id();
    Ok(table)
}

/// Errors when failed runs exceed `max_fraction` of the table.
pub fn check_failures(wave: usize, table: &RunTable, max_fraction: f64) -> Result<()> {
    let failed = table.failed_count();
    if failed as f64 > max_fraction * table.len() as f64 || table.ok_count() == 0 {
        return Err(Error::TooManyFailures {
            wave,
            failed,
            total: table.len(),
        });
    }
    Ok(())
}

/// Fits one emulator per planned output, in parallel.
pub fn fit_wave(runs: &RunTable, plan: &WavePlan) -> Result<Vec<Emulator>> {
    plan.outputs
        .par_iter()
        .map(|&o| fit_emulator(runs, o, &plan.emulator))
        .collect()
}

/// Mean emulator variance over samples of the current region relative to
/// `Var ε_i + Var e_i`, for the chain's latest emulators.
pub fn termination_check(chain: &WaveChain, samples: usize, threshold: f64, seed: u64) -> Result<Termination> {
    let Some(last) = chain.last() else {
        return Err(Error::State("termination check on an empty chain".into()));
    };
    if samples == 0 {
        return Ok(Termination {
            ratios: Vec::new(),
            threshold,
            samples: 0,
            satisfied: false,
        });
    }
    let points = match constrained_design(samples, chain.dimension(), |x| chain.membership(x), 1.0, seed) {
        Ok(c) => c.design.points,
        Err(Error::EmptyRegion { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    if points.is_empty() {
        return Ok(Termination {
            ratios: Vec::new(),
            threshold,
            samples: 0,
            satisfied: false,
        });
    }
    let ratios: Vec<f64> = last
        .emulators()
        .iter()
        .map(|e| {
            let mean_var = points.par_iter().map(|x| e.emulate(x).variance).sum::<f64>() / points.len() as f64;
            let other = chain.budget().total_variance(e.output_index());
            if other > 0.0 {
                mean_var / other
            } else if mean_var == 0.0 {
                0.0
            } else {
                // Finite so the record survives a JSON round trip.
                f64::MAX
            }
        })
        .collect();
    Ok(Termination {
        satisfied: ratios.iter().all(|r| *r < threshold),
        ratios,
        threshold,
        samples: points.len(),
    })
}

/// Everything a completed wave produced.
#[derive(Debug, Clone)]
pub struct WaveOutcome {
    pub record: WaveRecord,
    pub runs: RunTable,
    pub diagnostic_runs: RunTable,
    pub diagnostics: DiagnosticReport,
}

/// Runs one full wave and appends it to `chain`.
///
/// With `dir`, every artifact is persisted and existing designs and run
/// tables are reused, so an interrupted wave resumes without repeating runs.
/// Diagnostics that fail the gate stop the wave (after writing the report)
/// unless the plan overrides them.
pub fn run_wave(
    chain: &mut WaveChain,
    plan: &WavePlan,
    sim: &dyn Simulator,
    space: &ParameterSpace,
    dir: Option<&WaveDir>,
) -> Result<WaveOutcome> {
    let m = sim.spec().output_count;
    if m != chain.budget().outputs() {
        return Err(Error::Dimension {
            context: "simulator outputs vs budget".into(),
            expected: chain.budget().outputs(),
            found: m,
        });
    }
    plan.validate("wave", m)?;
    let wave = chain.len() + 1;
    log::info!("wave {wave}: designing {} + {} runs", plan.runs, plan.diagnostic_runs);

    let designs = match dir {
        Some(d) if d.has_design() => d.load_design()?,
        _ => {
            let ds = design_wave(chain, plan, space, m)?;
            if let Some(d) = dir {
                d.save_design(&ds)?;
            }
            ds
        }
    };

    let load_existing = |p: PathBuf| -> Result<Option<RunTable>> {
        if dir.is_some() && p.exists() {
            RunTable::load(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let save_to = |p: Option<PathBuf>| {
        move |t: &RunTable| match &p {
            Some(p) => t.save(p),
            None => Ok(()),
        }
    };
    log::info!("wave {wave}: simulating");
    let runs = simulate_table(
        sim,
        &designs.training,
        dir.map(|d| d.runs()).map(load_existing).transpose()?.flatten(),
        plan.wallclock,
        save_to(dir.map(WaveDir::runs)),
    )?;
    let diagnostic_runs = simulate_table(
        sim,
        &designs.diagnostic,
        dir.map(|d| d.diagnostic_runs()).map(load_existing).transpose()?.flatten(),
        plan.wallclock,
        save_to(dir.map(WaveDir::diagnostic_runs)),
    )?;
    check_failures(wave, &runs, plan.max_failure_fraction)?;
    check_failures(wave, &diagnostic_runs, plan.max_failure_fraction)?;

    log::info!("wave {wave}: fitting {} emulators on {} runs", plan.outputs.len(), runs.ok_count());
    let emulators = fit_wave(&runs, plan)?;
    let diagnostics = held_out_diagnostics(&emulators, &diagnostic_runs, plan.diagnostic_threshold)?;
    let emulator_files = match dir {
        Some(d) => {
            diagnostics.save(&d.diagnostics())?;
            d.save_emulators(&emulators)?
        }
        None => emulators
            .iter()
            .map(|e| WaveDir::emulator_file(e.output_index()))
            .collect(),
    };
    if !diagnostics.pass {
        if plan.override_diagnostics {
            log::warn!("wave {wave}: diagnostics failed for {:?}; overridden", diagnostics.failing_outputs());
        } else {
            return Err(Error::DiagnosticsFailed {
                outputs: diagnostics.failing_outputs(),
            });
        }
    }

    let first_run_id = chain.next_run_id();
    let next_run_id = first_run_id + (designs.training.len() + designs.diagnostic.len()) as u64;
    let record = WaveRecord {
        wave,
        outputs: plan.outputs.clone(),
        cutoffs: plan.cutoffs,
        multivariate: plan.multivariate.clone(),
        runs: runs.ok_count(),
        failed_runs: runs.failed_count() + diagnostic_runs.failed_count(),
        diagnostic_runs: diagnostic_runs.ok_count(),
        first_run_id,
        next_run_id,
        design_candidates: designs.summary.candidates,
        design_acceptance: designs.summary.acceptance,
        design_short: designs.summary.short,
        diagnostics_pass: diagnostics.pass,
        diagnostics_overridden: !diagnostics.pass,
        exceedance: diagnostics.exceedance.clone(),
        space: SpaceEstimate {
            fraction: f64::NAN,
            se: f64::NAN,
            samples: 0,
        },
        termination: None,
        run_table: "runs.csv".into(),
        emulator_files,
    };
    let new_wave = Wave::new(record, emulators, chain.budget(), chain.observations())?;
    chain.push(new_wave)?;

    log::info!("wave {wave}: estimating remaining space");
    let space_estimate = match chain.space_fraction(plan.space_candidates, seed::derive(plan.seed, &[tag::SPACE, wave as u64])) {
        Ok(s) => s,
        Err(e) => {
            chain.truncate(wave - 1);
            return Err(e);
        }
    };
    let termination = match termination_check(
        chain,
        plan.termination_samples,
        plan.termination_fraction,
        seed::derive(plan.seed, &[tag::TERMINATION, wave as u64]),
    ) {
        Ok(t) => t,
        Err(e) => {
            chain.truncate(wave - 1);
            return Err(e);
        }
    };
    log::info!(
        "wave {wave}: space fraction {:.4} (se {:.4}), termination {}",
        space_estimate.fraction,
        space_estimate.se,
        termination.satisfied
    );
    let last = chain.last_mut().expect("wave just pushed");
    last.record.space = space_estimate;
    last.record.termination = Some(termination);
    let record = last.record.clone();
    if let Some(d) = dir {
        crate::io::write_json(&d.record(), &record)?;
    }
    Ok(WaveOutcome {
        record,
        runs,
        diagnostic_runs,
        diagnostics,
    })
}

/// Runs simulated at points from the final region, scored exactly.
#[derive(Debug, Clone)]
pub struct Harvest {
    pub sampled: RunTable,
    /// Exact `I_M` of each sampled run (NaN for failed runs).
    pub i_m: Vec<f64>,
    pub accepted: RunTable,
    pub cutoff: f64,
    pub short: bool,
}

/// Samples `n_target` points from the chain's region, runs the simulator and
/// keeps runs whose exact `I_M` (no emulator variance, all outputs) is below
/// `final_cutoff`. Finding none is reported in the result, not as an error.
pub fn harvest_acceptable(
    chain: &WaveChain,
    sim: &dyn Simulator,
    space: &ParameterSpace,
    n_target: usize,
    final_cutoff: f64,
    seed: u64,
) -> Result<Harvest> {
    if chain.is_empty() {
        return Err(Error::State("harvest needs at least one completed wave".into()));
    }
    if !(final_cutoff > 0.0) {
        return Err(Error::config("harvest.cutoff", "must be positive"));
    }
    let m = sim.spec().output_count;
    let wave = chain.len() + 1;
    let seed = seed::derive(seed, &[tag::HARVEST]);
    let c = constrained_design(n_target, chain.dimension(), |x| chain.membership(x), 2.0, seed)?;
    let planned = planned_table(&c.design, space, m, wave, chain.next_run_id(), seed)?;
    let sampled = simulate_table(sim, &planned, None, false, |_| Ok(()))?;
    let scorer = Scorer::new((0..m).collect(), chain.budget(), chain.observations(), &Multivariate::Off)?;
    let mut accepted = RunTable::new(sampled.input_names().to_vec(), m);
    let mut i_m = Vec::with_capacity(sampled.len());
    for r in sampled.rows() {
        let v = if r.status == RunStatus::Ok {
            scorer.score_exact(&r.outputs)?.i_m.unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        i_m.push(v);
        if r.status == RunStatus::Ok && (final_cutoff == f64::INFINITY || v < final_cutoff) {
            accepted.push(r.clone())?;
        }
    }
    if accepted.is_empty() {
        log::warn!("harvest: none of {} sampled runs met I_M < {final_cutoff}", sampled.len());
    }
    Ok(Harvest {
        sampled,
        i_m,
        accepted,
        cutoff: final_cutoff,
        short: c.short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{ComponentClass, ComponentSpec};
    use crate::simulators::{synthesize_observations, ToyCoefficients, ToySimulator};

    fn toy_setup(d: usize, sd: f64) -> (ToySimulator, VarianceBudget, Vec<f64>, Vec<f64>) {
        let sim = ToySimulator::new(ToyCoefficients::geometric(d)).unwrap();
        let m = sim.spec().output_count;
        let budget = VarianceBudget::build(
            &[ComponentSpec::diagonal("discrepancy", ComponentClass::Discrepancy, vec![sd; m])],
            m,
        )
        .unwrap();
        let truth: Vec<f64> = (0..d).map(|k| 0.3 - 0.1 * k as f64).collect();
        let z = synthesize_observations(&sim, &truth, &VarianceBudget::zero(m), 1).unwrap();
        (sim, budget, z, truth)
    }

    fn plan(runs: usize, outputs: Vec<usize>, cutoffs: CutoffSet) -> WavePlan {
        WavePlan {
            diagnostic_runs: 60,
            space_candidates: 5000,
            maximin_iterations: 200,
            termination_samples: 50,
            emulator: EmulatorConfig {
                max_active: 2,
                nugget_rule: crate::emulator::NuggetRule::Loo,
                ..Default::default()
            },
            ..WavePlan::new(runs, outputs, cutoffs, 11)
        }
    }

    #[test]
    fn empty_chain_is_the_whole_cube() {
        let (_, budget, z, _) = toy_setup(3, 0.1);
        let chain = WaveChain::new(3, budget, z).unwrap();
        assert!(chain.membership(&[0.9, -0.9, 0.0]));
        let s = chain.space_fraction(1000, 3).unwrap();
        assert_eq!((s.fraction, s.se), (1.0, 0.0));
    }

    #[test]
    fn quadrant_region_volume() {
        let r = FnRegion::new(3, |x: &[f64]| x[0] > 0.0 && x[1] > 0.0);
        let s = space_fraction(&r, 40_000, 8).unwrap();
        assert!((s.fraction - 0.25).abs() < 3.0 * s.se, "{s:?}");
        assert!(space_fraction(&r, 999, 8).is_err());
    }

    #[test]
    fn vacuous_cutoffs_keep_everything_and_rerun_is_identical() {
        let (sim, budget, z, _) = toy_setup(3, 0.1);
        let space = ParameterSpace::unit(3);
        let p = plan(40, vec![2, 5], CutoffSet::none());
        let mut a = WaveChain::new(3, budget.clone(), z.clone()).unwrap();
        let out = run_wave(&mut a, &p, &sim, &space, None).unwrap();
        assert_eq!(out.record.space.fraction, 1.0);
        let mut b = WaveChain::new(3, budget, z).unwrap();
        let again = run_wave(&mut b, &p, &sim, &space, None).unwrap();
        assert_eq!(out.runs, again.runs);
        assert_eq!(
            serde_json::to_string(&out.record).unwrap(),
            serde_json::to_string(&again.record).unwrap()
        );
        for (x, y) in a.last().unwrap().emulators().iter().zip(b.last().unwrap().emulators()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn failing_wave_one_rejects_regardless_of_later_waves() {
        let (sim, budget, z, truth) = toy_setup(3, 0.05);
        let space = ParameterSpace::unit(3);
        let cut = CutoffSet {
            i_2m: Some(2.7),
            i_3m: Some(2.3),
            ..Default::default()
        };
        let mut chain = WaveChain::new(3, budget, z).unwrap();
        run_wave(&mut chain, &plan(60, (0..11).collect(), cut), &sim, &space, None).unwrap();
        assert!(chain.membership(&truth));
        let w1 = chain.prefix(1);
        let outside: Vec<f64> = vec![-1.0, 1.0, -1.0];
        assert!(!w1.contains(&outside));
        run_wave(&mut chain, &plan(60, (0..11).collect(), cut), &sim, &space, None).unwrap();
        assert!(!chain.membership(&outside));
        // Nestedness on random points.
        let pts = latin_hypercube(300, 3, 5).points;
        for x in &pts {
            if chain.prefix(2).contains(x) {
                assert!(chain.prefix(1).contains(x));
            }
        }
        let s1 = chain.waves()[0].record().space;
        let s2 = chain.waves()[1].record().space;
        assert!(s1.not_larger(&s2, 2.0), "{s1:?} {s2:?}");
    }

    #[test]
    fn screening_matches_full_scoring() {
        let (sim, budget, z, _) = toy_setup(3, 0.05);
        let space = ParameterSpace::unit(3);
        let cut = CutoffSet {
            i_m: Some(3.0),
            ..Default::default()
        };
        let mut chain = WaveChain::new(3, budget, z).unwrap();
        run_wave(&mut chain, &plan(60, vec![1, 4, 7], cut), &sim, &space, None).unwrap();
        let w = &chain.waves()[0];
        for x in latin_hypercube(500, 3, 9).points {
            let full = passes(&w.score(&x).unwrap(), &cut).unwrap();
            assert_eq!(w.passes(&x), full);
        }
    }

    #[test]
    fn broken_diagnostics_stop_the_wave_without_override() {
        let (sim, budget, z, _) = toy_setup(3, 0.05);
        let space = ParameterSpace::unit(3);
        let mut p = plan(60, vec![3], CutoffSet::none());
        p.emulator.theta_multiplier = 100.0;
        p.emulator.nugget_rule = crate::emulator::NuggetRule::Fixed;
        let mut chain = WaveChain::new(3, budget, z).unwrap();
        let err = run_wave(&mut chain, &p, &sim, &space, None).unwrap_err();
        assert!(matches!(err, Error::DiagnosticsFailed { .. }), "{err}");
        assert!(chain.is_empty());
        p.override_diagnostics = true;
        let out = run_wave(&mut chain, &p, &sim, &space, None).unwrap();
        assert!(out.record.diagnostics_overridden);
    }

    #[test]
    fn harvest_with_infinite_cutoff_keeps_every_run() {
        let (sim, budget, z, _) = toy_setup(3, 0.05);
        let space = ParameterSpace::unit(3);
        let cut = CutoffSet {
            i_2m: Some(2.7),
            ..Default::default()
        };
        let mut chain = WaveChain::new(3, budget, z).unwrap();
        run_wave(&mut chain, &plan(60, (0..11).collect(), cut), &sim, &space, None).unwrap();
        let h = harvest_acceptable(&chain, &sim, &space, 30, f64::INFINITY, 4).unwrap();
        assert_eq!(h.accepted.len(), h.sampled.len());
        for r in h.accepted.rows() {
            assert!(chain.membership(&r.unit));
        }
        let strict = harvest_acceptable(&chain, &sim, &space, 30, 2.5, 4).unwrap();
        for (r, v) in strict.sampled.rows().iter().zip(&strict.i_m) {
            assert_eq!(strict.accepted.contains_id(r.run_id), *v < 2.5);
        }
    }

    #[test]
    fn resume_reuses_checkpointed_runs() {
        let (sim, budget, z, _) = toy_setup(3, 0.05);
        let space = ParameterSpace::unit(3);
        let tmp = tempfile::tempdir().unwrap();
        let dir = WaveDir::new(tmp.path(), 1);
        let p = plan(40, vec![2], CutoffSet::none());
        let mut a = WaveChain::new(3, budget.clone(), z.clone()).unwrap();
        let first = run_wave(&mut a, &p, &sim, &space, Some(&dir)).unwrap();

        struct Panicky;
        impl Simulator for Panicky {
            fn spec(&self) -> &crate::simulators::SimulatorSpec {
                unreachable!()
            }
            fn run(&self, _: &[f64]) -> std::result::Result<Vec<f64>, SimFailure> {
                panic!("completed runs must not be repeated")
            }
        }
        let again = simulate_table(&Panicky, &RunTable::load(&dir.design()).unwrap(), Some(first.runs.clone()), false, |_| Ok(())).unwrap();
        assert_eq!(again, first.runs);
        let loaded = dir.load_wave(&budget, &z).unwrap();
        assert_eq!(loaded.record(), &first.record);
        assert_eq!(loaded.emulators(), a.last().unwrap().emulators());
    }
}
