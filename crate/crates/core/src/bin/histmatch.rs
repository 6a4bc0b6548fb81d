//! Command-line front end for history-matching campaigns.
//!
//! Exit status: 0 on success, 1 on validation or diagnostic failure, 2 on
//! I/O errors and usage errors. `HISTMATCH_WORKERS` caps the worker threads.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use histmatch::campaign::{Campaign, GALFORM_TEMPLATE, TOY_TEMPLATE};
use histmatch::error::{Error, Result};
use histmatch::implausibility::Statistic;
use histmatch::io::fmt_f64;
use histmatch::projection::ProjectionSettings;
use histmatch::simulators::ToyCoefficients;

const WORKERS_ENV: &str = "HISTMATCH_WORKERS";

#[derive(Parser)]
#[command(name = "histmatch", version, about = "Iterative history matching with Bayes linear emulators")]
struct Cli {
    /// Campaign directory.
    #[arg(short = 'C', long, global = true, default_value = ".")]
    campaign: PathBuf,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Template {
    Toy,
    Galform,
}

#[derive(Subcommand)]
enum Command {
    /// Create a campaign from a config file or a bundled template.
    Init {
        #[arg(long, conflicts_with = "template")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        template: Option<Template>,
        /// Print the template instead of creating a campaign.
        #[arg(long)]
        print: bool,
    },
    /// Draw the training and diagnostic designs of the next wave.
    Design {
        #[arg(long)]
        wave: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Run the simulator on every pending design point of the next wave.
    Simulate {
        #[arg(long)]
        wave: Option<usize>,
    },
    /// Fit the next wave's emulators from its simulator runs.
    Fit {
        #[arg(long)]
        wave: Option<usize>,
    },
    /// Check emulators against the held-out diagnostic runs.
    Diagnose {
        #[arg(long)]
        wave: Option<usize>,
    },
    /// Run a whole wave: design, simulate, fit, diagnose, cut.
    Wave {
        #[arg(long)]
        wave: Option<usize>,
        /// Redo a completed wave, discarding it and every later wave.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        override_diagnostics: bool,
    },
    /// Print the remaining space fraction after each completed wave.
    Space,
    /// Write minimized-implausibility and optical-depth grids.
    Project {
        #[arg(long)]
        wave: Option<usize>,
        /// Comma-separated parameter names or indices.
        #[arg(long, value_delimiter = ',')]
        axes: Option<Vec<String>>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        n_hidden: Option<usize>,
        #[arg(long)]
        statistic: Option<String>,
    },
    /// Simulate points from the final region and keep the acceptable runs.
    Harvest {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Write the per-output variance budget table.
    BudgetReport,
    /// Run every remaining wave, continuing any interrupted one.
    Resume {
        #[arg(long)]
        override_diagnostics: bool,
    },
    /// Score candidate points from a CSV against a completed wave.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        wave: Option<usize>,
    },
    /// Toy simulator as an external program (reads `name = value` lines).
    #[command(hide = true)]
    ToyEval {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_delimiter = ',')]
        active: Option<Vec<usize>>,
        /// Exit with status 1 and no output when the first input exceeds this.
        #[arg(long)]
        fail_above: Option<f64>,
        /// Leave out the last output column.
        #[arg(long)]
        drop_last: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match configure_workers().and_then(|()| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config {
            key: WORKERS_ENV.into(),
            reason: format!("expected a positive integer, got `{v}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(e.to_string()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let root = cli.campaign.as_path();
    match cli.command {
        Command::Init { config, template, print } => init(root, config, template, print),
        Command::Design { wave, force } => {
            let mut c = Campaign::open(root)?;
            let d = c.design(wave, force)?;
            println!(
                "designed {} training and {} diagnostic runs (acceptance {})",
                d.training.len(),
                d.diagnostic.len(),
                d.summary.acceptance
            );
            if d.summary.short {
                println!("warning: region too small to fill the requested design");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { wave } => {
            let mut c = Campaign::open(root)?;
            let (runs, diag) = c.simulate(wave)?;
            println!(
                "training runs: {} ok, {} failed; diagnostic runs: {} ok, {} failed",
                runs.ok_count(),
                runs.failed_count(),
                diag.ok_count(),
                diag.failed_count()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit { wave } => {
            let mut c = Campaign::open(root)?;
            for e in c.fit(wave)? {
                let s = e.summary();
                println!(
                    "output {}: active {:?}, degree {}, adjusted R2 {:.4}, residual sd {:.4e}, theta {:.4}",
                    e.output_index(),
                    e.active_set(),
                    s.degree,
                    s.adjusted_r2,
                    s.residual_sd,
                    e.theta()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { wave } => {
            let c = Campaign::open(root)?;
            let (k, report) = c.diagnose(wave)?;
            for (o, (exc, ok)) in report.outputs.iter().zip(report.exceedance.iter().zip(&report.output_pass)) {
                println!(
                    "wave {k} output {o}: {:.1}% beyond {} ({})",
                    100.0 * exc,
                    report.threshold,
                    if *ok { "pass" } else { "FAIL" }
                );
            }
            if report.pass {
                println!("diagnostics pass");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("diagnostics FAIL for outputs {:?}", report.failing_outputs());
                Ok(ExitCode::from(1))
            }
        }
        Command::Wave {
            wave,
            force,
            override_diagnostics,
        } => {
            let mut c = Campaign::open(root)?;
            let out = c.run_wave(wave, force, override_diagnostics)?;
            print_wave(&out.record);
            Ok(ExitCode::SUCCESS)
        }
        Command::Space => {
            let c = Campaign::open(root)?;
            let report = c.space_report()?;
            if report.is_empty() {
                println!("no completed waves; the whole space remains");
            }
            for (k, s) in report {
                println!("wave {k}: fraction {} se {} samples {}", s.fraction, s.se, s.samples);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Project {
            wave,
            axes,
            resolution,
            n_hidden,
            statistic,
        } => {
            let c = Campaign::open(root)?;
            let axes = axes.map(|a| parse_axes(&c, &a)).transpose()?;
            let mut settings: ProjectionSettings = c.config().projection;
            if let Some(r) = resolution {
                settings.resolution = r;
            }
            if let Some(n) = n_hidden {
                settings.n_hidden = n;
            }
            if let Some(s) = statistic {
                settings.statistic = Statistic::parse(&s)
                    .ok_or_else(|| Error::config("--statistic", format!("unknown statistic `{s}`")))?;
            }
            let (dir, entries) = c.project(wave, axes.as_deref(), Some(settings))?;
            println!("wrote {} grids and manifest.csv to {}", entries.len(), dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Harvest { runs, cutoff } => {
            let c = Campaign::open(root)?;
            let (_, s) = c.harvest(runs, cutoff)?;
            println!(
                "harvest: {} of {} runs satisfy I_M < {} ({} failed)",
                s.accepted, s.sampled, s.cutoff, s.failed
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::BudgetReport => {
            let c = Campaign::open(root)?;
            let path = c.budget_report()?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Resume { override_diagnostics } => {
            let mut c = Campaign::open(root)?;
            let outcomes = c.resume(override_diagnostics)?;
            if outcomes.is_empty() {
                println!("all {} configured waves are complete", c.completed_waves());
            }
            for o in &outcomes {
                print_wave(&o.record);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Score { input, output, wave } => {
            let c = Campaign::open(root)?;
            let n = c.score_file(&input, &output, wave)?;
            println!("scored {n} points into {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ToyEval {
            input,
            output,
            active,
            fail_above,
            drop_last,
        } => toy_eval(&input, &output, active, fail_above, drop_last),
    }
}

fn init(root: &Path, config: Option<PathBuf>, template: Option<Template>, print: bool) -> Result<ExitCode> {
    let template_text = match template {
        Some(Template::Galform) => GALFORM_TEMPLATE,
        _ => TOY_TEMPLATE,
    };
    if print {
        print!("{template_text}");
        return Ok(ExitCode::SUCCESS);
    }
    let (text, base) = match &config {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?,
            p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        ),
        None => (template_text.to_string(), PathBuf::from(".")),
    };
    let c = Campaign::init(root, &text, &base)?;
    println!(
        "initialized campaign `{}` in {} ({} parameters, {} outputs, {} waves)",
        c.config().campaign.name,
        root.display(),
        c.config().space.dimension(),
        c.config().outputs(),
        c.config().waves.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn print_wave(r: &histmatch::wave::WaveRecord) {
    println!(
        "wave {}: {} runs ({} failed), diagnostics {}, space fraction {} (se {})",
        r.wave,
        r.runs,
        r.failed_runs,
        match (r.diagnostics_pass, r.diagnostics_overridden) {
            (true, _) => "pass",
            (false, true) => "overridden",
            (false, false) => "FAIL",
        },
        r.space.fraction,
        r.space.se
    );
}

fn parse_axes(c: &Campaign, axes: &[String]) -> Result<Vec<usize>> {
    let space = &c.config().space;
    axes.iter()
        .map(|a| {
            let a = a.trim();
            space
                .index_of(a)
                .or_else(|| a.parse::<usize>().ok().filter(|k| *k < space.dimension()))
                .ok_or_else(|| Error::config("--axes", format!("unknown parameter `{a}`")))
        })
        .collect()
}

fn toy_eval(
    input: &Path,
    output: &Path,
    active: Option<Vec<usize>>,
    fail_above: Option<f64>,
    drop_last: bool,
) -> Result<ExitCode> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let x = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = l.split_once('=').map_or(l, |(_, v)| v);
            histmatch::io::parse_f64(v, input)
        })
        .collect::<Result<Vec<f64>>>()?;
    if x.is_empty() {
        return Err(Error::Parse {
            path: input.to_path_buf(),
            reason: "no inputs".into(),
        });
    }
    if fail_above.is_some_and(|t| x[0] > t) {
        eprintln!("toy-eval: refusing input {} above {}", x[0], fail_above.unwrap_or_default());
        return Ok(ExitCode::from(1));
    }
    let co = match active {
        Some(a) => ToyCoefficients::with_active(x.len(), &a),
        None => ToyCoefficients::geometric(x.len()),
    };
    let mut f = co.evaluate(&x);
    if drop_last {
        f.pop();
    }
    let line: Vec<String> = f.iter().map(|v| fmt_f64(*v)).collect();
    histmatch::io::write_atomic(output, format!("{}\n", line.join(" ")).as_bytes())?;
    Ok(ExitCode::SUCCESS)
}
