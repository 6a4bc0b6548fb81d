//! Campaign configuration, on-disk state and the operations behind the
//! `histmatch` command line.
//!
//! A campaign directory holds:
//!
//! ```text
//! config.toml                 copy of the configuration given to `init`
//! state.json                  config hash, completed waves, observations
//! observations.csv
//! wave_k/                     see [`WaveDir`]
//! regression_progression.csv
//! budget_report.csv
//! projections/wave_k/         grid files and manifest.csv
//! harvest/                    sampled.csv, accepted.csv, implausibility.csv, summary.json
//! ```
//!
//! Only one process may hold a campaign at a time; [`Campaign`] keeps a lock
//! file for as long as it lives.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{ComponentSpec, VarianceBudget};
use crate::diagnostics::{held_out_diagnostics, regression_progression, write_progression_csv, DiagnosticReport};
use crate::emulator::{Emulator, EmulatorConfig};
use crate::error::{Error, Result};
use crate::implausibility::{CutoffSet, Multivariate, Statistic};
use crate::io::{fmt_f64, parse_f64, read_json, write_atomic, write_json};
use crate::projection::{projection_pairs_report, ManifestEntry, ProjectionSettings};
use crate::runs::{RunStatus, RunTable};
use crate::seed;
use crate::simulators::{
    synthesize_observations, ExternalConfig, ExternalSimulator, Simulator, SimulatorKind, ToyCoefficients,
    ToySimulator,
};
use crate::space::{ParameterDef, ParameterSpace};
use crate::wave::{
    check_failures, design_wave, fit_wave, harvest_acceptable, run_wave, simulate_table, Harvest, SpaceEstimate,
    WaveChain, WaveDesigns, WaveDir, WaveOutcome, WavePlan, WaveRecord,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const STATE_FILE: &str = "state.json";
pub const LOCK_FILE: &str = ".lock";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const PROGRESSION_FILE: &str = "regression_progression.csv";
pub const BUDGET_REPORT_FILE: &str = "budget_report.csv";

/// Commented configuration for the synthetic toy campaign.
pub const TOY_TEMPLATE: &str = include_str!("../configs/toy.toml");
/// The published 17-input, four-wave schedule with an external simulator.
pub const GALFORM_TEMPLATE: &str = include_str!("../configs/galform.toml");

const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    campaign: CampaignSection,
    parameters: Vec<ParameterDef>,
    simulator: SimulatorSection,
    budget: BudgetSection,
    observations: ObservationSource,
    #[serde(default)]
    wave_defaults: toml::Table,
    waves: Vec<toml::Table>,
    #[serde(default)]
    projection: ProjectionSection,
    #[serde(default)]
    harvest: HarvestSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
}

fn default_name() -> String {
    "campaign".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSection {
    pub kind: SimulatorKind,
    #[serde(default)]
    pub toy: Option<ToySettings>,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
}

/// Toy simulator choice: explicit coefficients, equal weights on `active`
/// inputs, or (neither given) geometrically decaying weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySettings {
    #[serde(default)]
    pub active: Option<Vec<usize>>,
    #[serde(default)]
    pub coefficients: Option<ToyCoefficients>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetSection {
    components: Vec<ComponentSpec>,
}

/// Where the observation vector comes from. `truth` is in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum ObservationSource {
    Synthetic { truth: Vec<f64>, seed: u64 },
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProjectionSection {
    resolution: usize,
    n_hidden: usize,
    statistic: Statistic,
    axes: Vec<String>,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        let s = ProjectionSettings::default();
        ProjectionSection {
            resolution: s.resolution,
            n_hidden: s.n_hidden,
            statistic: s.statistic,
            axes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestSettings {
    pub runs: usize,
    pub cutoff: f64,
}

impl Default for HarvestSettings {
    fn default() -> Self {
        HarvestSettings {
            runs: 2000,
            cutoff: 2.5,
        }
    }
}

/// One `[[waves]]` entry after merging with `[wave_defaults]`. Unset fields
/// take the [`WavePlan::new`] defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaveSettings {
    runs: usize,
    outputs: Option<Vec<usize>>,
    #[serde(default)]
    emulator: EmulatorConfig,
    #[serde(default)]
    cutoffs: CutoffSet,
    multivariate: Option<Multivariate>,
    diagnostic_runs: Option<usize>,
    diagnostic_threshold: Option<f64>,
    override_diagnostics: Option<bool>,
    space_candidates: Option<usize>,
    oversample: Option<f64>,
    maximin_iterations: Option<usize>,
    max_failure_fraction: Option<f64>,
    termination_fraction: Option<f64>,
    termination_samples: Option<usize>,
    wallclock: Option<bool>,
}

impl WaveSettings {
    fn into_plan(self, outputs: usize, seed: u64) -> WavePlan {
        let mut p = WavePlan::new(
            self.runs,
            self.outputs.unwrap_or_else(|| (0..outputs).collect()),
            self.cutoffs,
            seed,
        );
        p.emulator = self.emulator;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        set!(
            multivariate,
            diagnostic_runs,
            diagnostic_threshold,
            override_diagnostics,
            space_candidates,
            oversample,
            maximin_iterations,
            max_failure_fraction,
            termination_fraction,
            termination_samples,
            wallclock
        );
        p
    }
}

/// Overlays `over` on `base`; the `emulator` sub-table merges key by key.
fn merge_tables(base: &toml::Table, over: &toml::Table) -> toml::Table {
    let mut out = base.clone();
    for (k, v) in over {
        match (out.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k == "emulator" => {
                *b = merge_tables(b, o);
            }
            _ => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    out
}

/// A fully validated campaign configuration.
#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub campaign: CampaignSection,
    pub space: ParameterSpace,
    pub simulator: SimulatorSection,
    pub output_labels: Vec<String>,
    pub budget: VarianceBudget,
    pub observations: ObservationSource,
    pub waves: Vec<WavePlan>,
    pub projection: ProjectionSettings,
    /// Projection axes as parameter indices.
    pub projection_axes: Vec<usize>,
    pub harvest: HarvestSettings,
}

impl CampaignConfig {
    /// Parses and cross-validates a configuration. Every failure names the
    /// offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map_or_else(|| "config".to_string(), |s| locate_key(text, s.start));
            Error::config(key, e.message().trim().to_string())
        })?;
        let space = ParameterSpace::new(raw.parameters)?;
        let d = space.dimension();
        let output_labels = simulator_labels(&raw.simulator, d)?;
        let m = output_labels.len();
        let budget = VarianceBudget::build(&raw.budget.components, m)?;

        match &raw.observations {
            ObservationSource::Synthetic { truth, .. } => {
                if truth.len() != d {
                    return Err(Error::config(
                        "observations.truth",
                        format!("has {} values, the space has {d} parameters", truth.len()),
                    ));
                }
                space.to_unit(truth).map_err(|e| match e {
                    Error::OutOfBounds { name, .. } => {
                        Error::config("observations.truth", format!("value for `{name}` lies outside its range"))
                    }
                    other => other,
                })?;
            }
            ObservationSource::File { path } => {
                if path.trim().is_empty() {
                    return Err(Error::config("observations.path", "must not be empty"));
                }
            }
        }

        if raw.waves.is_empty() {
            return Err(Error::config("waves", "at least one wave is required"));
        }
        let mut waves = Vec::with_capacity(raw.waves.len());
        for (k, w) in raw.waves.iter().enumerate() {
            let key = format!("waves[{k}]");
            let merged = merge_tables(&raw.wave_defaults, w);
            let settings: WaveSettings = toml::Value::Table(merged)
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(&key, e.message().trim().to_string()))?;
            let plan = settings.into_plan(m, raw.campaign.seed);
            plan.validate(&key, m)?;
            waves.push(plan);
        }

        let projection = ProjectionSettings {
            resolution: raw.projection.resolution,
            n_hidden: raw.projection.n_hidden,
            statistic: raw.projection.statistic,
        };
        projection.validate("projection")?;
        let projection_axes = if raw.projection.axes.is_empty() {
            (0..d.min(7)).collect()
        } else {
            raw.projection
                .axes
                .iter()
                .map(|a| {
                    space
                        .index_of(a)
                        .ok_or_else(|| Error::config("projection.axes", format!("unknown parameter `{a}`")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        if projection_axes.len() < 2 && d >= 2 {
            return Err(Error::config("projection.axes", "need at least two axes"));
        }
        if raw.harvest.runs == 0 {
            return Err(Error::config("harvest.runs", "must be >= 1"));
        }
        if !(raw.harvest.cutoff > 0.0) {
            return Err(Error::config("harvest.cutoff", "must be positive"));
        }
        Ok(CampaignConfig {
            campaign: raw.campaign,
            space,
            simulator: raw.simulator,
            output_labels,
            budget,
            observations: raw.observations,
            waves,
            projection,
            projection_axes,
            harvest: raw.harvest,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn seed(&self) -> u64 {
        self.campaign.seed
    }

    pub fn outputs(&self) -> usize {
        self.output_labels.len()
    }

    pub fn build_simulator(&self) -> Result<Box<dyn Simulator>> {
        match self.simulator.kind {
            SimulatorKind::Toy => Ok(Box::new(ToySimulator::new(toy_coefficients(
                &self.simulator,
                self.space.dimension(),
            )?)?)),
            SimulatorKind::External => {
                let ext = self
                    .simulator
                    .external
                    .clone()
                    .ok_or_else(|| Error::config("simulator.external", "missing for kind = \"external\""))?;
                Ok(Box::new(ExternalSimulator::new(ext, self.space.clone())?))
            }
        }
    }
}

/// Best-effort dotted key for the TOML error at byte `offset`: the nearest
/// `key =` on that line, qualified by the enclosing table header.
fn locate_key(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |p| p + 1);
    let line_end = text[line_start..].find('\n').map_or(text.len(), |p| line_start + p);
    let line = &text[line_start..line_end];
    if line.trim_start().starts_with('[') {
        return line.trim().trim_matches(|c| c == '[' || c == ']').to_string();
    }
    let key = line.split('=').next().map(str::trim).filter(|k| !k.is_empty() && !k.starts_with('['));
    let table = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
    match (table, key) {
        (Some(t), Some(k)) => format!("{t}.{k}"),
        (None, Some(k)) => k.to_string(),
        (Some(t), None) => t,
        (None, None) => "config".into(),
    }
}

fn toy_coefficients(sim: &SimulatorSection, d: usize) -> Result<ToyCoefficients> {
    let toy = sim.toy.clone().unwrap_or_default();
    let co = match (toy.coefficients, toy.active) {
        (Some(_), Some(_)) => {
            return Err(Error::config("simulator.toy", "give either `coefficients` or `active`, not both"));
        }
        (Some(c), None) => c,
        (None, Some(active)) => {
            if let Some(bad) = active.iter().find(|&&k| k >= d) {
                return Err(Error::config(
                    "simulator.toy.active",
                    format!("input {bad} out of range for {d} parameters"),
                ));
            }
            ToyCoefficients::with_active(d, &active)
        }
        (None, None) => ToyCoefficients::geometric(d),
    };
    co.validate()?;
    if co.dimension() != d {
        return Err(Error::config(
            "simulator.toy.coefficients",
            format!("weights have length {}, the space has {d} parameters", co.dimension()),
        ));
    }
    Ok(co)
}

fn simulator_labels(sim: &SimulatorSection, d: usize) -> Result<Vec<String>> {
    match sim.kind {
        SimulatorKind::Toy => {
            if sim.external.is_some() {
                return Err(Error::config("simulator.external", "given but kind = \"toy\""));
            }
            Ok(ToySimulator::new(toy_coefficients(sim, d)?)?.spec().output_labels.clone())
        }
        SimulatorKind::External => {
            if sim.toy.is_some() {
                return Err(Error::config("simulator.toy", "given but kind = \"external\""));
            }
            let ext = sim
                .external
                .clone()
                .ok_or_else(|| Error::config("simulator.external", "missing for kind = \"external\""))?;
            Ok(ExternalSimulator::new(ext, ParameterSpace::unit(d))?.spec().output_labels.clone())
        }
    }
}

/// Persistent campaign bookkeeping, stored as `state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub version: u32,
    /// SHA-256 of `config.toml`, hex encoded.
    pub config_hash: String,
    pub completed_waves: usize,
    pub observations: Vec<f64>,
    pub observation_source: ObservationSource,
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads one number per output from a file: comma- or whitespace-separated,
/// `#` comments and a non-numeric header line allowed.
pub fn read_observations(path: &Path, outputs: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).collect();
        if n == 0 && tokens.iter().any(|t| t.parse::<f64>().is_err()) {
            continue;
        }
        match tokens.as_slice() {
            [_, _, z] if tokens[1].parse::<f64>().is_err() => values.push(parse_f64(z, path)?),
            _ => {
                for t in tokens {
                    values.push(parse_f64(t, path)?);
                }
            }
        }
    }
    if values.len() != outputs {
        return Err(Error::parse(
            path,
            format!("expected {outputs} observations, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn write_observations(path: &Path, labels: &[String], z: &[f64]) -> Result<()> {
    let mut text = String::from("output,label,z\n");
    for (k, (l, v)) in labels.iter().zip(z).enumerate() {
        text.push_str(&format!("{k},{l},{}\n", fmt_f64(*v)));
    }
    write_atomic(path, text.as_bytes())
}

/// Holds `.lock` in a campaign directory; released on drop. A lock left by a
/// process that no longer exists is taken over.
#[derive(Debug)]
pub struct CampaignLock {
    path: PathBuf,
}

impl CampaignLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    use std::io::Write as _;
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(CampaignLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    if holder.is_some_and(process_alive) {
                        return Err(Error::Locked(root.to_path_buf()));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Locked(root.to_path_buf()))
    }
}

impl Drop for CampaignLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Without `/proc`, every recorded holder counts as alive.
fn process_alive(pid: u32) -> bool {
    let proc_root = Path::new("/proc");
    !proc_root.join("self").exists() || proc_root.join(pid.to_string()).exists()
}

/// Summary written by [`Campaign::harvest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub sampled: usize,
    pub failed: usize,
    pub accepted: usize,
    pub cutoff: f64,
    pub short: bool,
}

/// An open campaign directory.
#[derive(Debug)]
pub struct Campaign {
    root: PathBuf,
    config: CampaignConfig,
    state: CampaignState,
    _lock: CampaignLock,
}

impl Campaign {
    /// Creates a campaign in `root` from configuration text. A relative
    /// observation file is resolved against `base_dir`.
    pub fn init(root: &Path, config_text: &str, base_dir: &Path) -> Result<Self> {
        let config = CampaignConfig::parse(config_text)?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = CampaignLock::acquire(root)?;
        if root.join(STATE_FILE).exists() {
            return Err(Error::State(format!("{} is already an initialized campaign", root.display())));
        }
        let observations = match &config.observations {
            ObservationSource::Synthetic { truth, seed } => {
                let sim = config.build_simulator()?;
                let unit = config.space.to_unit(truth)?;
                synthesize_observations(sim.as_ref(), &unit, &config.budget, seed::derive(*seed, &[seed::tag::OBSERVATION]))?
            }
            ObservationSource::File { path } => {
                let p = Path::new(path);
                let p = if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
                read_observations(&p, config.outputs())?
            }
        };
        write_atomic(&root.join(CONFIG_FILE), config_text.as_bytes())?;
        write_observations(&root.join(OBSERVATIONS_FILE), &config.output_labels, &observations)?;
        let state = CampaignState {
            version: STATE_VERSION,
            config_hash: config_hash(config_text),
            completed_waves: 0,
            observations,
            observation_source: config.observations.clone(),
        };
        write_json(&root.join(STATE_FILE), &state)?;
        Ok(Campaign {
            root: root.to_path_buf(),
            config,
            state,
            _lock: lock,
        })
    }

    /// Opens an initialized campaign, refusing if `config.toml` was edited.
    pub fn open(root: &Path) -> Result<Self> {
        let state_path = root.join(STATE_FILE);
        if !state_path.exists() {
            return Err(Error::State(format!(
                "{} is not a campaign directory (run `init` first)",
                root.display()
            )));
        }
        let lock = CampaignLock::acquire(root)?;
        let state: CampaignState = read_json(&state_path)?;
        if state.version != STATE_VERSION {
            return Err(Error::State(format!("unsupported state version {}", state.version)));
        }
        let config_path = root.join(CONFIG_FILE);
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if config_hash(&text) != state.config_hash {
            return Err(Error::State(format!(
                "{} changed since the campaign was initialized",
                config_path.display()
            )));
        }
        let config = CampaignConfig::parse(&text)?;
        if state.observations.len() != config.outputs() {
            return Err(Error::State("stored observations do not match the simulator outputs".into()));
        }
        Ok(Campaign {
            root: root.to_path_buf(),
            config,
            state,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn completed_waves(&self) -> usize {
        self.state.completed_waves
    }

    pub fn wave_dir(&self, k: usize) -> WaveDir {
        WaveDir::new(&self.root, k)
    }

    /// The configured plan for wave `k` (1-based).
    pub fn plan(&self, k: usize) -> Result<WavePlan> {
        if k == 0 || k > self.config.waves.len() {
            return Err(Error::config(
                "waves",
                format!("wave {k} is not configured ({} waves)", self.config.waves.len()),
            ));
        }
        Ok(self.config.waves[k - 1].clone())
    }

    /// Rebuilds the chain of completed waves from disk.
    pub fn chain(&self) -> Result<WaveChain> {
        let mut chain = WaveChain::new(
            self.config.space.dimension(),
            self.config.budget.clone(),
            self.state.observations.clone(),
        )?;
        for k in 1..=self.state.completed_waves {
            chain.push(self.wave_dir(k).load_wave(&self.config.budget, &self.state.observations)?)?;
        }
        Ok(chain)
    }

    fn save_state(&self) -> Result<()> {
        write_json(&self.root.join(STATE_FILE), &self.state)
    }

    /// Resolves the wave a step applies to: the next wave by default. A
    /// completed wave is redone only with `force`, which discards it and
    /// every later wave.
    fn target_wave(&mut self, requested: Option<usize>, force: bool) -> Result<usize> {
        let next = self.state.completed_waves + 1;
        let k = requested.unwrap_or(next);
        if k == 0 {
            return Err(Error::config("--wave", "waves are numbered from 1"));
        }
        if k > next {
            return Err(Error::State(format!("wave {k} needs wave {} to be completed first", k - 1)));
        }
        self.plan(k)?;
        if k < next {
            if !force {
                return Err(Error::WaveComplete(k));
            }
            self.discard_from(k)?;
        } else if force {
            self.remove_wave_dir(k)?;
        }
        Ok(k)
    }

    fn remove_wave_dir(&self, k: usize) -> Result<()> {
        let dir = self.wave_dir(k);
        if dir.path().exists() {
            fs::remove_dir_all(dir.path()).map_err(|e| Error::io(dir.path(), e))?;
        }
        Ok(())
    }

    fn discard_from(&mut self, k: usize) -> Result<()> {
        for j in k..=self.config.waves.len().max(self.state.completed_waves) {
            self.remove_wave_dir(j)?;
        }
        self.state.completed_waves = k - 1;
        self.save_state()?;
        self.write_progression()
    }

    fn write_progression(&self) -> Result<()> {
        let rows = regression_progression(&self.chain()?);
        let mut buf = Vec::new();
        write_progression_csv(&rows, &mut buf)?;
        write_atomic(&self.root.join(PROGRESSION_FILE), &buf)
    }

    /// Runs wave `k` (default: the next one) end to end, reusing any design
    /// or simulator runs already on disk.
    pub fn run_wave(&mut self, wave: Option<usize>, force: bool, override_diagnostics: bool) -> Result<WaveOutcome> {
        let k = self.target_wave(wave, force)?;
        let mut plan = self.plan(k)?;
        plan.override_diagnostics |= override_diagnostics;
        let sim = self.config.build_simulator()?;
        let mut chain = self.chain()?;
        let outcome = run_wave(&mut chain, &plan, sim.as_ref(), &self.config.space, Some(&self.wave_dir(k)))?;
        self.state.completed_waves = k;
        self.save_state()?;
        self.write_progression()?;
        Ok(outcome)
    }

    /// Runs every remaining configured wave.
    pub fn resume(&mut self, override_diagnostics: bool) -> Result<Vec<WaveOutcome>> {
        let mut out = Vec::new();
        while self.state.completed_waves < self.config.waves.len() {
            out.push(self.run_wave(None, false, override_diagnostics)?);
        }
        Ok(out)
    }

    /// Writes the training and diagnostic designs of the next wave; an
    /// existing design is kept unless `force` is given.
    pub fn design(&mut self, wave: Option<usize>, force: bool) -> Result<WaveDesigns> {
        let k = self.target_wave(wave, force)?;
        let dir = self.wave_dir(k);
        if dir.has_design() {
            return dir.load_design();
        }
        let chain = self.chain()?;
        let designs = design_wave(&chain, &self.plan(k)?, &self.config.space, self.config.outputs())?;
        dir.save_design(&designs)?;
        Ok(designs)
    }

    /// Simulates every pending design row of the next wave.
    pub fn simulate(&mut self, wave: Option<usize>) -> Result<(RunTable, RunTable)> {
        let k = self.target_wave(wave, false)?;
        let dir = self.wave_dir(k);
        if !dir.has_design() {
            return Err(Error::State(format!("wave {k} has no design yet (run `design` first)")));
        }
        let designs = dir.load_design()?;
        let plan = self.plan(k)?;
        let sim = self.config.build_simulator()?;
        let run = |planned: &RunTable, path: PathBuf| -> Result<RunTable> {
            let existing = if path.exists() { Some(RunTable::load(&path)?) } else { None };
            simulate_table(sim.as_ref(), planned, existing, plan.wallclock, |t| t.save(&path))
        };
        let runs = run(&designs.training, dir.runs())?;
        let diag = run(&designs.diagnostic, dir.diagnostic_runs())?;
        Ok((runs, diag))
    }

    /// Fits and saves the next wave's emulators from its completed runs.
    pub fn fit(&mut self, wave: Option<usize>) -> Result<Vec<Emulator>> {
        let k = self.target_wave(wave, false)?;
        let dir = self.wave_dir(k);
        let runs = load_simulated(&dir.runs(), k)?;
        let plan = self.plan(k)?;
        check_failures(k, &runs, plan.max_failure_fraction)?;
        let emulators = fit_wave(&runs, &plan)?;
        dir.save_emulators(&emulators)?;
        Ok(emulators)
    }

    /// Held-out diagnostics for wave `k`; by default the next wave if its
    /// emulators have been fitted, otherwise the last completed wave.
    pub fn diagnose(&self, wave: Option<usize>) -> Result<(usize, DiagnosticReport)> {
        let next = self.state.completed_waves + 1;
        let fitted = |k: usize| {
            self.plan(k).is_ok_and(|p| {
                p.outputs
                    .iter()
                    .all(|&o| self.wave_dir(k).path().join(WaveDir::emulator_file(o)).exists())
            })
        };
        let k = match wave {
            Some(k) => k,
            None if fitted(next) => next,
            None if self.state.completed_waves > 0 => self.state.completed_waves,
            None => return Err(Error::State("no fitted emulators yet (run `fit` first)".into())),
        };
        let plan = self.plan(k)?;
        let dir = self.wave_dir(k);
        let emulators = dir.load_output_emulators(&plan.outputs)?;
        let diag = load_simulated(&dir.diagnostic_runs(), k)?;
        let report = held_out_diagnostics(&emulators, &diag, plan.diagnostic_threshold)?;
        report.save(&dir.diagnostics())?;
        Ok((k, report))
    }

    /// Persisted space-fraction estimates of every completed wave.
    pub fn space_report(&self) -> Result<Vec<(usize, SpaceEstimate)>> {
        (1..=self.state.completed_waves)
            .map(|k| {
                let rec: WaveRecord = read_json(&self.wave_dir(k).record())?;
                Ok((k, rec.space))
            })
            .collect()
    }

    /// Pairs report for the chain up to wave `k` (default: all completed).
    pub fn project(
        &self,
        wave: Option<usize>,
        axes: Option<&[usize]>,
        settings: Option<ProjectionSettings>,
    ) -> Result<(PathBuf, Vec<ManifestEntry>)> {
        let chain = self.chain()?;
        let k = wave.unwrap_or(chain.len());
        if k == 0 || k > chain.len() {
            return Err(Error::State(format!("wave {k} is not completed (have {})", chain.len())));
        }
        let axes = axes.unwrap_or(&self.config.projection_axes);
        if let Some(bad) = axes.iter().find(|&&a| a >= self.config.space.dimension()) {
            return Err(Error::config("projection.axes", format!("axis {bad} out of range")));
        }
        let settings = settings.unwrap_or(self.config.projection);
        let names: Vec<String> = self.config.space.names().map(str::to_string).collect();
        let dir = self.root.join("projections").join(format!("wave_{k}"));
        let entries = projection_pairs_report(
            &chain.prefix(k),
            axes,
            &settings,
            seed::derive(self.config.seed(), &[k as u64]),
            &names,
            &dir,
        )?;
        Ok((dir, entries))
    }

    /// Runs the simulator on points from the final region and keeps those
    /// meeting the strict `I_M` cutoff.
    pub fn harvest(&self, runs: Option<usize>, cutoff: Option<f64>) -> Result<(Harvest, HarvestSummary)> {
        let chain = self.chain()?;
        let sim = self.config.build_simulator()?;
        let n = runs.unwrap_or(self.config.harvest.runs);
        let cutoff = cutoff.unwrap_or(self.config.harvest.cutoff);
        let h = harvest_acceptable(&chain, sim.as_ref(), &self.config.space, n, cutoff, self.config.seed())?;
        let dir = self.root.join("harvest");
        h.sampled.save(&dir.join("sampled.csv"))?;
        h.accepted.save(&dir.join("accepted.csv"))?;
        let mut text = String::from("run_id,i_m,accepted\n");
        for (r, v) in h.sampled.rows().iter().zip(&h.i_m) {
            let acc = h.accepted.contains_id(r.run_id);
            text.push_str(&format!("{},{},{}\n", r.run_id, fmt_f64(*v), u8::from(acc)));
        }
        write_atomic(&dir.join("implausibility.csv"), text.as_bytes())?;
        let summary = HarvestSummary {
            sampled: h.sampled.len(),
            failed: h.sampled.failed_count(),
            accepted: h.accepted.len(),
            cutoff,
            short: h.short,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok((h, summary))
    }

    /// Writes `budget_report.csv` and returns its path.
    pub fn budget_report(&self) -> Result<PathBuf> {
        let path = self.root.join(BUDGET_REPORT_FILE);
        self.config.budget.report().save(&path, Some(self.config.output_labels.as_slice()))?;
        Ok(path)
    }

    /// Batch scoring of candidate points against wave `k` (default: last).
    /// See [`score_points_csv`] for the file formats.
    pub fn score_file(&self, input: &Path, output: &Path, wave: Option<usize>) -> Result<usize> {
        let chain = self.chain()?;
        let k = wave.unwrap_or(chain.len());
        if k == 0 || k > chain.len() {
            return Err(Error::State(format!("wave {k} is not completed (have {})", chain.len())));
        }
        let points = read_points_csv(input, &self.config.space)?;
        let bytes = score_points_csv(&chain, k, &points)?;
        write_atomic(output, &bytes)?;
        Ok(points.len())
    }
}

fn load_simulated(path: &Path, wave: usize) -> Result<RunTable> {
    if !path.exists() {
        return Err(Error::State(format!("wave {wave} has not been simulated yet (run `simulate` first)")));
    }
    let t = RunTable::load(path)?;
    if t.rows().iter().any(|r| r.status == RunStatus::Planned) {
        return Err(Error::State(format!("wave {wave} still has unsimulated runs")));
    }
    Ok(t)
}

/// Reads candidate points from a CSV whose header names the parameters:
/// either raw values under the plain names or unit values under `u_<name>`.
pub fn read_points_csv(path: &Path, space: &ParameterSpace) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let unit_cols: Option<Vec<usize>> = space.names().map(|n| find(&format!("u_{n}"))).collect();
    let (cols, unit) = match unit_cols {
        Some(c) => (c, true),
        None => {
            let raw: Vec<Option<usize>> = space.names().map(find).collect();
            if let Some(k) = raw.iter().position(Option::is_none) {
                let name = &space.params()[k].name;
                return Err(Error::parse(path, format!("missing column `{name}` (or `u_{name}`)")));
            }
            (raw.into_iter().flatten().collect(), false)
        }
    };
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let v = cols
            .iter()
            .map(|&c| parse_f64(rec.get(c).unwrap_or(""), path))
            .collect::<Result<Vec<f64>>>()?;
        points.push(if unit { v } else { space.to_unit(&v)? });
    }
    Ok(points)
}

/// CSV of per-output implausibilities for wave `k`'s emulated outputs
/// (`i_f<o>`), the combined statistics (empty when not computed) and `pass`,
/// the membership of the chain up to wave `k`.
pub fn score_points_csv(chain: &WaveChain, k: usize, points: &[Vec<f64>]) -> Result<Vec<u8>> {
    use rayon::prelude::*;
    let view = chain.prefix(k);
    let wave = &chain.waves()[k - 1];
    let outputs = &wave.record().outputs;
    let mut header = vec!["point".to_string()];
    header.extend(outputs.iter().map(|o| format!("i_f{o}")));
    header.extend(["i_m", "i_2m", "i_3m", "i_mv", "pass"].map(String::from));
    let rows: Vec<Result<Vec<String>>> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let r = wave.score(x)?;
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            let mut row = vec![i.to_string()];
            row.extend(r.per_output.iter().map(|v| fmt_f64(*v)));
            row.extend([opt(r.i_m), opt(r.i_2m), opt(r.i_3m), opt(r.i_mv)]);
            row.push(u8::from(crate::wave::Region::contains(&view, x)).to_string());
            Ok(row)
        })
        .collect();
    let err = |e: csv::Error| Error::parse("scores", e);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(err)?;
    for row in rows {
        w.write_record(&row?).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::parse("scores", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_toy() -> String {
        TOY_TEMPLATE
            .replace("runs = 200   ", "runs = 60    ")
            .replace("runs = 200\n", "runs = 60\n")
            .replace("diagnostic_runs = 200", "diagnostic_runs = 60")
            .replace("space_candidates = 20000", "space_candidates = 2000")
            .replace("termination_samples = 500", "termination_samples = 50")
    }

    #[test]
    fn templates_parse() {
        let toy = CampaignConfig::parse(TOY_TEMPLATE).unwrap();
        assert_eq!(toy.space.dimension(), 8);
        assert_eq!(toy.outputs(), 11);
        assert_eq!(toy.waves.len(), 3);
        assert_eq!(toy.waves[0].emulator.max_active, 5);
        assert_eq!(toy.waves[1].emulator.max_active, 8);
        assert_eq!(toy.waves[1].emulator.nugget_rule, crate::emulator::NuggetRule::Loo);
        assert_eq!(toy.waves[2].cutoffs.i_2m, Some(2.7));
        assert_eq!(toy.projection_axes, vec![0, 1]);

        let g = CampaignConfig::parse(GALFORM_TEMPLATE).unwrap();
        assert_eq!(g.space.dimension(), 17);
        let runs: Vec<usize> = g.waves.iter().map(|w| w.runs).collect();
        assert_eq!(runs, vec![993, 1414, 1620, 2011]);
        let outs: Vec<usize> = g.waves.iter().map(|w| w.outputs.len()).collect();
        assert_eq!(outs, vec![7, 11, 11, 11]);
        let active: Vec<usize> = g.waves.iter().map(|w| w.emulator.max_active).collect();
        assert_eq!(active, vec![5, 8, 8, 10]);
        assert!(g.waves.iter().all(|w| w.cutoffs.i_2m == Some(2.7) && w.cutoffs.i_3m == Some(2.3)));
        assert_eq!(g.waves[2].cutoffs.i_mv, Some(26.75));
        assert_eq!(g.waves[3].cutoffs.i_m, Some(3.2));
        assert_eq!(g.waves[1].cutoffs.i_mv, None);
        assert_eq!(g.harvest.cutoff, 2.5);
        assert_eq!(g.projection_axes.len(), 7);
    }

    #[test]
    fn defaults_merge_into_waves() {
        let text = TOY_TEMPLATE.replace("oversample = 2.0", "oversample = 3.0");
        let c = CampaignConfig::parse(&text).unwrap();
        assert!(c.waves.iter().all(|w| w.oversample == 3.0 && w.diagnostic_runs == 200));
        assert!(c.waves.iter().all(|w| w.emulator.degree == 3));
        assert_eq!(c.waves[0].emulator.min_gain, 0.01);
    }

    #[test]
    fn validation_names_the_key() {
        let bad = TOY_TEMPLATE.replacen("name = \"x2\"\nmin = -1.0\nmax = 1.0", "name = \"x2\"\nmin = 1.0\nmax = 1.0", 1);
        let e = CampaignConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("parameters.x2"), "{e}");

        let bad = TOY_TEMPLATE.replacen("cutoffs = { i_2m = 2.7, i_3m = 2.3 }", "cutoffs = { i_mv = 20.0 }", 1);
        let e = CampaignConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("waves[0].cutoffs.i_mv"), "{e}");

        let bad = TOY_TEMPLATE.replace("axes = [\"x0\", \"x1\"]", "axes = [\"x0\", \"nope\"]");
        let e = CampaignConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("projection.axes") && e.contains("nope"), "{e}");

        let bad = TOY_TEMPLATE.replace("oversample = 2.0", "oversampel = 2.0");
        let e = CampaignConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("oversampel"), "{e}");

        let bad = TOY_TEMPLATE.replace("seed = 77", "seed = \"x\"");
        let e = CampaignConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("observations"), "{e}");
    }

    #[test]
    fn observation_file_formats() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("z.csv");
        fs::write(&p, "z\n1.5\n2.5 # second\n\n3.5\n").unwrap();
        assert_eq!(read_observations(&p, 3).unwrap(), vec![1.5, 2.5, 3.5]);
        fs::write(&p, "1, 2, 3\n").unwrap();
        assert_eq!(read_observations(&p, 3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(read_observations(&p, 4).is_err());
        write_observations(&p, &["a".into(), "b".into(), "c".into()], &[0.25, -1.0, 3.0]).unwrap();
        assert_eq!(read_observations(&p, 3).unwrap(), vec![0.25, -1.0, 3.0]);
    }

    #[test]
    fn lock_and_tamper_checks() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("c");
        let c = Campaign::init(&root, &small_toy(), tmp.path()).unwrap();
        assert!(matches!(Campaign::open(&root), Err(Error::Locked(_))));
        drop(c);
        assert!(Campaign::init(&root, &small_toy(), tmp.path()).is_err());
        let c = Campaign::open(&root).unwrap();
        assert_eq!(c.completed_waves(), 0);
        drop(c);

        fs::write(root.join(LOCK_FILE), "4000000000").unwrap();
        drop(Campaign::open(&root).unwrap());

        let mut text = fs::read_to_string(root.join(CONFIG_FILE)).unwrap();
        text.push_str("\n# edited\n");
        fs::write(root.join(CONFIG_FILE), text).unwrap();
        assert!(matches!(Campaign::open(&root), Err(Error::State(_))));
    }

    #[test]
    fn step_commands_match_a_full_wave() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let mut ca = Campaign::init(&a, &small_toy(), tmp.path()).unwrap();
        let mut cb = Campaign::init(&b, &small_toy(), tmp.path()).unwrap();

        assert!(matches!(ca.simulate(None), Err(Error::State(_))));
        ca.design(None, false).unwrap();
        ca.simulate(None).unwrap();
        let fitted = ca.fit(None).unwrap();
        let (k, _) = ca.diagnose(None).unwrap();
        assert_eq!(k, 1);
        ca.run_wave(None, false, true).unwrap();
        cb.run_wave(None, false, true).unwrap();
        for f in ["design.csv", "runs.csv", "diagnostic_runs.csv", "record.json", "emulators/output_0.emu"] {
            let x = fs::read(a.join("wave_1").join(f)).unwrap();
            let y = fs::read(b.join("wave_1").join(f)).unwrap();
            assert!(x == y, "{f} differs");
        }
        let chain = ca.chain().unwrap();
        assert_eq!(chain.len(), 1);
        assert_eq!(serde_json::to_string(&fitted[0]).unwrap(), serde_json::to_string(&chain.waves()[0].emulators()[0]).unwrap());

        assert!(matches!(ca.run_wave(Some(1), false, true), Err(Error::WaveComplete(1))));
        assert!(matches!(ca.run_wave(Some(3), false, true), Err(Error::State(_))));
        ca.run_wave(Some(1), true, true).unwrap();
        assert_eq!(fs::read(a.join("wave_1/runs.csv")).unwrap(), fs::read(b.join("wave_1/runs.csv")).unwrap());
        assert!(a.join(PROGRESSION_FILE).exists());
        assert_eq!(ca.space_report().unwrap().len(), 1);
    }

    #[test]
    fn batch_scoring() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("c");
        let mut c = Campaign::init(&root, &small_toy(), tmp.path()).unwrap();
        c.run_wave(None, false, true).unwrap();
        let input = tmp.path().join("points.csv");
        let names: Vec<String> = (0..8).map(|k| format!("x{k}")).collect();
        fs::write(&input, format!("{}\n0,0,0,0,0,0,0,0\n0.9,-0.9,0.9,-0.9,0.9,-0.9,0.9,-0.9\n", names.join(","))).unwrap();
        let out = tmp.path().join("scores.csv");
        assert_eq!(c.score_file(&input, &out, None).unwrap(), 2);
        let text = fs::read_to_string(&out).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), 1 + 11 + 5);
        assert_eq!(*header.last().unwrap(), "pass");
        let chain = c.chain().unwrap();
        for (line, x) in lines.zip([[0.0; 8], [0.9, -0.9, 0.9, -0.9, 0.9, -0.9, 0.9, -0.9]]) {
            let pass = line.rsplit(',').next().unwrap();
            assert_eq!(pass == "1", chain.membership(&x));
        }
        fs::write(&input, "x0,x1\n0,0\n").unwrap();
        let e = c.score_file(&input, &out, None).unwrap_err().to_string();
        assert!(e.contains("x2"), "{e}");
    }
}
