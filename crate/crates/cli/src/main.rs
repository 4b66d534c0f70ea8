use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scenekit::diagnostics::{TraceDirection, DEFAULT_SAVGOL_ORDER, DEFAULT_SAVGOL_WINDOW};
use scenekit_cli::commands::{self, Analysis};
use scenekit_cli::synth::write_corpus;
use scenekit_cli::{CliError, RunConfig};

/// Acoustic scene classification toolkit.
///
/// Exit status: 0 success, 2 configuration error, 3 data error,
/// 4 partial failure (some clips failed).
#[derive(Parser)]
#[command(name = "scenekit", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.components=16` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one feature file per manifest clip.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feature kind (overrides `features.kind`).
        #[arg(long)]
        kind: Option<String>,
        /// Root for relative audio paths (else $SCENEKIT_DATA_ROOT, else the manifest directory).
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Cross-validate a model, then train it on all clips.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output model file; sidecars (.cv.json, .oof.csv, .report.txt) go next to it.
        #[arg(long)]
        out: PathBuf,
        /// Model kind (overrides `model.kind`): gmm, ivector, dnn, rnn, cnn.
        #[arg(long)]
        model: Option<String>,
        /// Fold file (`path<TAB>fold`) overriding generated folds.
        #[arg(long)]
        folds: Option<PathBuf>,
    },
    /// Write class probabilities for every manifest clip.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accuracy recorded in the output header (default: from training).
        #[arg(long)]
        cv_accuracy: Option<f64>,
    },
    /// Fuse prediction files.
    Fuse {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy tables for prediction files.
    Report {
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Class-wise accuracy CSV (rows = classes, columns = models).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export model analyses as CSV grids.
    Inspect(InspectArgs),
    /// Generate a synthetic labelled corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Write a stratified fold file.
    Folds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    WeightFft,
    Activation,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    analysis: AnalysisKind,
    #[arg(long)]
    out: PathBuf,
    /// Smooth spectra with Savitzky-Golay (weight-fft).
    #[arg(long)]
    smooth: bool,
    #[arg(long, default_value_t = DEFAULT_SAVGOL_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_SAVGOL_ORDER)]
    order: usize,
    /// Feature file to trace (activation).
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Layer index (activation; default: first recurrent layer).
    #[arg(long)]
    layer: Option<usize>,
    /// Trace the reverse direction of a bidirectional layer.
    #[arg(long)]
    backward: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    match &cli.command {
        Command::Extract { kind: Some(k), .. } => overrides.push(format!("features.kind=\"{k}\"")),
        Command::Train { model, folds, .. } => {
            if let Some(m) = model {
                overrides.push(format!("model.kind=\"{m}\""));
            }
            if let Some(f) = folds {
                overrides.push(format!("folds.file={:?}", f.display().to_string()));
            }
        }
        Command::Synth {
            classes,
            clips_per_class,
            seconds,
            ..
        } => {
            if let Some(v) = classes {
                overrides.push(format!("synth.classes={v}"));
            }
            if let Some(v) = clips_per_class {
                overrides.push(format!("synth.clips_per_class={v}"));
            }
            if let Some(v) = seconds {
                overrides.push(format!("synth.seconds={v:?}"));
            }
            if let Some(s) = cli.seed {
                overrides.push(format!("synth.seed={s}"));
            }
        }
        Command::Folds { k: Some(k), .. } => overrides.push(format!("folds.k={k}")),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }

    match cli.command {
        Command::Extract {
            manifest, out, data_root, ..
        } => {
            let s = commands::cmd_extract(&cfg, &manifest, &out, data_root.as_deref())?;
            println!("extracted {} clip(s), {} up to date", s.computed, s.skipped);
        }
        Command::Train {
            manifest, features, out, ..
        } => {
            let r = commands::cmd_train(&cfg, &manifest, &features, &out)?;
            println!(
                "{}: mean CV accuracy {:.4} (min {:.4}, max {:.4}); model written to {}",
                r.model_id,
                r.mean,
                r.min,
                r.max,
                out.display()
            );
        }
        Command::Predict {
            model,
            manifest,
            features,
            out,
            cv_accuracy,
        } => {
            let o = commands::cmd_predict(&model, &manifest, &features, &out, cv_accuracy)?;
            println!("wrote {} prediction row(s) to {}", o.probs.len(), out.display());
        }
        Command::Fuse { inputs, out } => {
            let f = commands::cmd_fuse(&inputs, &cfg.fusion, &out)?;
            println!("{} -> {}", f.model_id, out.display());
        }
        Command::Report {
            predictions,
            manifest,
            csv,
        } => print!("{}", commands::cmd_report(&predictions, &manifest, csv.as_deref())?),
        Command::Inspect(a) => {
            let analysis = match a.analysis {
                AnalysisKind::WeightFft => Analysis::WeightFft {
                    smooth: a.smooth.then_some((a.window, a.order)),
                },
                AnalysisKind::Activation => Analysis::Activation {
                    features: a
                        .clip
                        .ok_or_else(|| CliError::Config("activation analysis needs --clip".into()))?,
                    layer: a.layer,
                    direction: if a.backward {
                        TraceDirection::Backward
                    } else {
                        TraceDirection::Forward
                    },
                },
            };
            let (r, c) = commands::cmd_inspect(&a.model, &analysis, &a.out)?;
            println!("wrote {r}x{c} grid to {}", a.out.display());
        }
        Command::Synth { out, .. } => {
            let m = write_corpus(&cfg.synth, &out)?;
            println!("wrote {} clip(s) and manifest.tsv to {}", m.lines().count(), out.display());
        }
        Command::Folds { manifest, out, .. } => {
            let p = commands::cmd_folds(&cfg, &manifest, &out)?;
            println!("wrote {}-fold plan to {}", p.k(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scenekit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
