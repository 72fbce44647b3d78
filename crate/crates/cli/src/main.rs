use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use domvote::config::{ConfigError, RunConfig, Settings, LOCK_FILE};
use domvote::dataio;
use domvote::experiments::{self, ExperimentError};
use domvote::report::{self, Experiment, ExperimentKind, HardCaseReport};
use domvote::synthgen;

#[derive(Parser)]
#[command(name = "domvote", version, about = "Coronary dominance experiments on cine sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with hidden truth.
    Synth(Common),
    /// Train the scorer and dominance model on the whole dataset.
    Train(Common),
    /// k-fold cross-validation.
    Crossval(Common),
    /// Macro recall against training-set fraction.
    Saturation(Common),
    /// CE, SCE and NSCE at several data fractions.
    AblateLoss(Common),
    /// quality, ssim, discard20 and all-frames selection.
    AblateFrames(Common),
    /// Flag studies every ensemble member mispredicts.
    MineHard(Common),
    /// Cross-validation with and without hard cases.
    ExcludeRerun {
        #[command(flatten)]
        common: Common,
        /// hardcases.json from a mine-hard run; mined afresh when omitted.
        #[arg(long)]
        hard: Option<PathBuf>,
    },
    /// Regenerate reports of an experiment directory from its records.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Write the reports here instead of in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file, or a run.lock.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long = "frame-method")]
    frame_method: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Data(e.to_string())
    }
}

macro_rules! data_err {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.to_string())
            }
        }
    )*};
}
data_err!(
    domvote::report::ReportError,
    domvote::dataio::DataError,
    domvote::synthgen::SynthError,
    domvote::config::DataLoadError,
    std::io::Error,
    serde_json::Error
);

struct Style {
    color: bool,
}

impl Style {
    fn detect() -> Self {
        Style {
            color: std::env::var_os("DOMVOTE_NO_COLOR").is_none() && std::io::stdout().is_terminal(),
        }
    }

    fn bold(&self, s: &str) -> String {
        if self.color {
            format!("\x1b[1m{s}\x1b[0m")
        } else {
            s.to_string()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `domvote help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

struct Resolved {
    config: RunConfig,
    settings: Settings,
    out: PathBuf,
}

fn resolve(c: &Common) -> Result<Resolved, Failure> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required".into()))?;
    let out = c
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("--out is required".into()))?;
    let mut config = RunConfig::load(path)?;
    let flags = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("experiment.jobs", c.jobs.map(|v| v.to_string())),
        ("experiment.fraction", c.fraction.map(|v| v.to_string())),
        ("loss.kind", c.loss.clone()),
        ("frames.method", c.frame_method.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            config.set(k, &v)?;
        }
    }
    if c.seed.is_some() {
        // an explicit seed replaces any seed list from the file
        config.set("experiment.seeds", "")?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    let settings = config.settings()?;
    Ok(Resolved { config, settings, out })
}

fn prepare_out(r: &Resolved, command: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(&r.out)?;
    std::fs::write(r.out.join(LOCK_FILE), r.config.lock_json(command))?;
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    let style = Style::detect();
    match command {
        Command::Synth(c) => {
            let r = resolve(&c)?;
            prepare_out(&r, "synth")?;
            let (ds, truth, manifest) = synthgen::generate_dataset(&r.settings.synth, &r.out)?;
            println!(
                "{} {} studies ({} left, {} occluded) -> {}",
                style.bold("synth:"),
                ds.len(),
                ds.count(dataio::Dominance::Left),
                truth.occluded_ids().len(),
                manifest.display()
            );
        }
        Command::Train(c) => {
            let r = resolve(&c)?;
            prepare_out(&r, "train")?;
            let (ds, _) = r.settings.load_data()?;
            let models = experiments::train_full(&ds, &r.settings.plan)?;
            dataio::save_checkpoint(&models.dominance.to_checkpoint(), r.out.join("dominance.ckpt"))?;
            if let Some(q) = &models.quality {
                dataio::save_checkpoint(&q.params.to_checkpoint(), r.out.join("quality.ckpt"))?;
            }
            let summary = serde_json::json!({
                "class_weights": models.class_weights.weights(),
                "epoch_loss": models.epoch_loss,
            });
            std::fs::write(r.out.join("train.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!("{} final epoch loss {:.4}", style.bold("train:"), models.epoch_loss.last().copied().unwrap_or(f64::NAN));
        }
        Command::Crossval(c) => experiment(&c, ExperimentKind::Crossval, None, &style)?,
        Command::Saturation(c) => experiment(&c, ExperimentKind::Saturation, None, &style)?,
        Command::AblateLoss(c) => experiment(&c, ExperimentKind::AblateLoss, None, &style)?,
        Command::AblateFrames(c) => experiment(&c, ExperimentKind::AblateFrames, None, &style)?,
        Command::MineHard(c) => experiment(&c, ExperimentKind::MineHard, None, &style)?,
        Command::ExcludeRerun { common, hard } => {
            let ids = match &hard {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    Some(serde_json::from_str::<HardCaseReport>(&text)?.hard_study_ids)
                }
                None => None,
            };
            experiment(&common, ExperimentKind::ExcludeRerun, ids.as_deref(), &style)?;
        }
        Command::Report { input, out } => {
            let exp = report::read_experiment(&input)?;
            let dir = out.unwrap_or_else(|| input.clone());
            std::fs::create_dir_all(&dir)?;
            report::write_reports(&exp, &dir)?;
            print_summary(&exp, &style, &dir)?;
        }
    }
    Ok(())
}

fn experiment(c: &Common, kind: ExperimentKind, hard_ids: Option<&[String]>, style: &Style) -> Result<(), Failure> {
    let r = resolve(c)?;
    prepare_out(&r, kind.as_str())?;
    let (ds, truth) = r.settings.load_data()?;
    let exp = experiments::run_kind(kind, &ds, truth.as_ref(), &r.settings.plan, hard_ids)?;
    report::write_experiment(&exp, &r.out)?;
    print_summary(&exp, style, &r.out)
}

fn print_summary(exp: &Experiment, style: &Style, dir: &Path) -> Result<(), Failure> {
    let folds = report::fold_metrics(exp)?;
    println!("{}", style.bold(&format!("{:<32} {:>6} {:>16} {:>16}", "run", "models", "macro recall", "accuracy")));
    for s in report::run_summaries(exp, &folds)? {
        let cell = |m: &str| {
            s.view
                .get(m)
                .map(|e| format!("{:.3} ± {:.3}", e.mean, e.mean_margin))
                .unwrap_or_else(|| "n/a".into())
        };
        println!("{:<32} {:>6} {:>16} {:>16}", s.run, s.units, cell("recall_macro"), cell("accuracy"));
    }
    if exp.kind == ExperimentKind::MineHard {
        let hc = report::hard_cases(exp)?;
        println!("hard cases: {}", hc.hard_study_ids.len());
    }
    println!("reports in {}", dir.display());
    Ok(())
}
