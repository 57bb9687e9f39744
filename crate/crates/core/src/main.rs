//! Command-line front end for dataset generation, training, direction and
//! probe estimation, corrected inference, and the bundled experiments.
//!
//! Exit codes: 0 on success, 1 for configuration problems (bad flags or
//! config files), 2 for runtime failures. All output files are functions of
//! config and seed alone; rerunning a command reproduces them byte for byte.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rclarc::clarc::{corrected_forward, save_bank, save_probe};
use rclarc::harness::{
    self, backdoor_experiment, config_hash, evaluate_all, eval_reports_csv, export_class_cosines,
    export_histograms, load_config, prepare, run_sweep, run_toy3d, shortcut_experiment, sweep_csv,
    toy3d_experiment, ExperimentConfig, HarnessError, ModeSpec, PreparedExperiment,
};
use rclarc::nn::TrainSummary;
use rclarc::synthdata::{gen_backdoor, gen_shortcut, gen_toy3d, LabeledDataset, Split, SynthConfig};

#[derive(Parser)]
#[command(name = "rclarc", version, about = "Reactive latent-space model correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let config = load_config(&self.config)
            .map_err(|e| CliError::Config(format!("{}: {e}", self.config.display())))?;
        Ok(config.resolve(self.seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (JSONL + manifest + CSV) into a directory.
    GenData {
        /// One of: toy3d, backdoor, shortcut.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generation parameters (JSON); defaults to the built-in experiment
        /// parameters for the kind.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model and save it.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output model file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate one direction per dataset artifact and save the bank.
    FitCav {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output bank file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train artifact probes and save them.
    FitProbe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Save only this artifact's probe (single-probe file format).
        #[arg(long)]
        concept: Option<String>,
        /// Output probe file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run corrected inference over the test splits and write one JSON line
    /// per sample.
    Correct {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of: vanilla, pclarc, rclarc-class, rclarc-artifact, rclarc-both.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every configured mode and write reports.json / reports.csv.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the direction-bank size from 0 to the full artifact count.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 3-d cluster experiment with per-mode point clouds.
    Toy3d {
        /// Experiment config (JSON); defaults to the built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-direction activation samples for histogram plots.
    ExportHistograms {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match &e {
            HarnessError::ConfigError(_) => CliError::Config(e.to_string()),
            HarnessError::Synth(rclarc::synthdata::SynthError::ConfigError(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() {
    let code = match Cli::try_parse() {
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
        Ok(cli) => match run(cli.command) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {}", e.message());
                e.exit_code()
            }
        },
    };
    std::process::exit(code);
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_file(path, &format!("{json}\n"))
}

/// Run manifest: the resolved config a set of output files came from.
#[derive(serde::Serialize)]
struct RunManifest<'a> {
    format: &'static str,
    command: &'a str,
    config_hash: String,
    config: &'a ExperimentConfig,
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
) -> Result<(), CliError> {
    write_json(
        &dir.join("run.json"),
        &RunManifest {
            format: "rclarc-run-v1",
            command,
            config_hash: config_hash(config),
            config,
        },
    )
}

fn load_synth(path: &Path) -> Result<SynthConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn builtin_synth(kind: &str, seed: u64) -> Result<SynthConfig, CliError> {
    let experiment = match kind {
        "backdoor" => backdoor_experiment(seed),
        "shortcut" => shortcut_experiment(seed),
        _ => return Err(CliError::Config(format!("no built-in parameters for kind {kind:?}"))),
    };
    match experiment.dataset {
        harness::DatasetSpec::Backdoor { synth } | harness::DatasetSpec::Shortcut { synth } => {
            Ok(synth)
        }
        _ => unreachable!("built-in experiments carry synthetic datasets"),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { kind, seed, synth, out } => {
            ensure_dir(&out)?;
            let (dataset, config) = match kind.as_str() {
                "toy3d" => (gen_toy3d(seed), None),
                "backdoor" | "shortcut" => {
                    let mut config = match synth {
                        Some(path) => load_synth(&path)?,
                        None => builtin_synth(&kind, seed)?,
                    };
                    config.seed = seed;
                    let dataset = if kind == "backdoor" {
                        gen_backdoor(&config)
                    } else {
                        gen_shortcut(&config)
                    }
                    .map_err(HarnessError::from)?;
                    (dataset, Some(config))
                }
                other => return Err(CliError::Config(format!("unknown dataset kind {other:?}"))),
            };
            dataset.save_jsonl(&out.join("data.jsonl")).map_err(HarnessError::from)?;
            println!("wrote {}", out.join("data.jsonl").display());
            dataset
                .save_manifest(&out.join("manifest.json"), &kind, seed, config.as_ref())
                .map_err(HarnessError::from)?;
            println!("wrote {}", out.join("manifest.json").display());
            dataset.export_csv(&out.join("samples.csv")).map_err(HarnessError::from)?;
            println!("wrote {}", out.join("samples.csv").display());
            Ok(())
        }
        Command::Train { config, out } => {
            let resolved = config.resolve()?;
            let prepared = prepare(&resolved)?;
            let summary = prepared.train_report.as_ref().map(|report| TrainSummary {
                config: resolved.training.clone(),
                final_loss: report.loss_history.last().copied().unwrap_or(f64::NAN),
                final_accuracy: report.final_accuracy,
            });
            prepared.model.save(&out, summary.as_ref()).map_err(HarnessError::from)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::FitCav { config, out } => {
            let prepared = prepare(&config.resolve()?)?;
            if prepared.records.is_empty() {
                return Err(CliError::Config("the dataset declares no artifacts".into()));
            }
            save_bank(&out, &prepared.records).map_err(HarnessError::from)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::FitProbe { config, concept, out } => {
            let prepared = prepare(&config.resolve()?)?;
            if prepared.probes.is_empty() {
                return Err(CliError::Config("the dataset declares no artifacts".into()));
            }
            match concept {
                Some(id) => {
                    let probe = prepared.probes.get(&id).ok_or_else(|| {
                        CliError::Config(format!(
                            "unknown artifact {id:?}; have: {}",
                            prepared.probes.keys().cloned().collect::<Vec<_>>().join(", ")
                        ))
                    })?;
                    save_probe(&out, probe).map_err(HarnessError::from)?;
                    println!("wrote {}", out.display());
                }
                None => write_json(&out, &prepared.probes)?,
            }
            Ok(())
        }
        Command::Correct { config, mode, out } => {
            let resolved = config.resolve()?;
            let mode = ModeSpec::parse(&mode)?;
            let prepared = prepare(&resolved)?;
            write_corrections(&prepared, mode, &out)
        }
        Command::Evaluate { config, out } => {
            let resolved = config.resolve()?;
            ensure_dir(&out)?;
            let prepared = prepare(&resolved)?;
            let reports = evaluate_all(&prepared)?;
            write_json(&out.join("reports.json"), &reports)?;
            write_file(&out.join("reports.csv"), &eval_reports_csv(&reports))?;
            write_run_manifest(&out, "evaluate", &resolved)
        }
        Command::Sweep { config, out } => {
            let resolved = config.resolve()?;
            ensure_dir(&out)?;
            let prepared = prepare(&resolved)?;
            let report = run_sweep(&prepared)?;
            write_json(&out.join("sweep.json"), &report)?;
            write_file(&out.join("sweep.csv"), &sweep_csv(&report))?;
            write_run_manifest(&out, "sweep", &resolved)
        }
        Command::Toy3d { config, seed, out } => {
            let resolved = match config {
                Some(path) => load_config(&path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                    .resolve(seed),
                None => toy3d_experiment(seed.unwrap_or(0)),
            };
            ensure_dir(&out)?;
            let prepared = prepare(&resolved)?;
            let report = run_toy3d(&prepared, Some(&out))?;
            write_json(&out.join("toy3d.json"), &report)?;
            export_histograms(&prepared, &out.join("histograms.csv"))?;
            println!("wrote {}", out.join("histograms.csv").display());
            export_class_cosines(&prepared, &out.join("class_cosines.csv"))?;
            println!("wrote {}", out.join("class_cosines.csv").display());
            write_run_manifest(&out, "toy3d", &resolved)
        }
        Command::ExportHistograms { config, out } => {
            let prepared = prepare(&config.resolve()?)?;
            export_histograms(&prepared, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

#[derive(serde::Serialize)]
struct CorrectionRow<'a> {
    id: usize,
    label: usize,
    predicted: usize,
    applied: &'a [String],
    regularized: bool,
    logits: Vec<f64>,
}

/// One JSON line per test-split sample under the given mode.
fn write_corrections(
    prepared: &PreparedExperiment,
    mode: ModeSpec,
    out: &Path,
) -> Result<(), CliError> {
    let correction = prepared.correction_mode(mode);
    let dataset: &LabeledDataset = &prepared.dataset;
    let mut rows: Vec<usize> = dataset.split_indices(Split::Test);
    rows.extend(dataset.split_indices(Split::TestArtifact));
    let mut text = String::new();
    for row in rows {
        let result = corrected_forward(
            &prepared.model,
            &dataset.sample(row),
            &correction,
            prepared.bank.as_ref(),
        )
        .map_err(HarnessError::from)?;
        let line = CorrectionRow {
            id: row,
            label: dataset.labels[row],
            predicted: rclarc::nn::argmax(&result.logits),
            applied: &result.applied,
            regularized: result.regularized,
            logits: result.logits.as_slice().to_vec(),
        };
        text.push_str(&serde_json::to_string(&line).map_err(runtime)?);
        text.push('\n');
    }
    write_file(out, &text)
}
