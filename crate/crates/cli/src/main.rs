//! `advmos`: synthesize a corpus, train a quality predictor, attack it,
//! harden it by adversarial retraining, and evaluate the result.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use advmos_core::{Error, ErrorKind, Result};
use clap::{Parser, Subcommand};

use commands::{AdvTrainArgs, AttackArgs, Context, EvalArgs, Layout, SplitArg};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "advmos",
    version,
    about = "Adversarial attacks and defenses for speech-quality predictors"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory that receives all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads for attacks and metrics (default: all processors).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic SNR-controlled corpus and its manifest.
    Synth,
    /// Train the predictor on the labeled training split.
    TrainPredictor {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Where to write the weights.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Attack clips and write adversarial audio plus per-clip results.
    Attack {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Attack every WAV in this directory instead of a manifest.
        #[arg(long, conflicts_with = "manifest")]
        input_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Retrain a copy of the predictor on clean plus adversarial clips.
    Advtrain {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory with the training split's attack results.
        #[arg(long)]
        adv_dir: Option<PathBuf>,
        /// Where to write the retrained weights.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Compare teacher and student on held-out adversarial clips.
    Eval {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory with the test split's attack results.
        #[arg(long)]
        adv_dir: Option<PathBuf>,
    },
    /// Listening-test statistics; uses the bundled example table by default.
    Stats {
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Write the STFT magnitude of a clip, optionally with a perturbation applied.
    SpectrogramDump {
        #[arg(long)]
        input: PathBuf,
        /// `.adv.json` result whose perturbation is added first.
        #[arg(long)]
        adversarial: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    }
    let config = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let echo = cli.out.join("config.effective.toml");
    std::fs::write(&echo, config.to_toml()?).map_err(|e| Error::io(&echo, e))?;
    let ctx = Context {
        layout: Layout {
            out: cli.out,
            corpus_id: config.synth.corpus_id.clone(),
        },
        config,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::TrainPredictor { manifest, model } => commands::train(&ctx, manifest, model),
        Command::Attack {
            model,
            manifest,
            input_dir,
            split,
            dest,
        } => commands::attack(
            &ctx,
            AttackArgs {
                model,
                manifest,
                input_dir,
                split,
                dest,
            },
        ),
        Command::Advtrain {
            model,
            manifest,
            adv_dir,
            student,
        } => commands::advtrain(
            &ctx,
            AdvTrainArgs {
                model,
                manifest,
                adv_dir,
                student,
            },
        ),
        Command::Eval {
            teacher,
            student,
            manifest,
            adv_dir,
        } => commands::eval(
            &ctx,
            EvalArgs {
                teacher,
                student,
                manifest,
                adv_dir,
            },
        ),
        Command::Stats { table } => commands::stats(&ctx, table),
        Command::SpectrogramDump {
            input,
            adversarial,
            output,
        } => commands::spectrogram(&ctx, input, adversarial, output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit_code(ErrorKind::Usage))
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
