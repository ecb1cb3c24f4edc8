//! Command-line front end.
//!
//! Every command takes `--config <FILE>` (a TOML experiment description) and
//! works inside that experiment's output directory. Exit codes: 0 success,
//! 2 configuration error, 3 missing artifact, 4 runtime failure.

use clap::{Parser, Subcommand};
use speechcycle::config::ExperimentConfig;
use speechcycle::error::Error;
use speechcycle::experiment::{
    evaluate, format_report, gen_corpus, joint_train, plot_perplexity, pretrain, PretrainTarget,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "speechcycle",
    about = "Semi-supervised joint synthesizer/recognizer training on a synthetic phoneme corpus",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the effective configuration (defaults applied) and its hash,
    /// then exit without running the command.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus for this experiment.
    GenCorpus {
        /// Regenerate even if the corpus directory already exists.
        #[arg(long)]
        force: bool,
    },
    /// Supervised pretraining of one model on the paired split.
    Pretrain {
        /// Which model to pretrain: speaker, tts, or asr.
        #[arg(value_name = "MODEL")]
        target: String,
    },
    /// Joint training of synthesizer and recognizer on paired + unpaired data.
    JointTrain {
        /// Drop the speaker-consistency term from the unpaired objective.
        #[arg(long)]
        no_speaker_consistency: bool,
        /// Skip the recognizer-only first phase and train everything at once.
        #[arg(long)]
        no_stepwise: bool,
    },
    /// Score a checkpoint on a held-out split.
    Eval {
        /// Checkpoint file to evaluate.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Split to score: validation or test.
        #[arg(long, value_name = "NAME")]
        split: String,
    },
    /// Render the synthesized-speech perplexity figure from existing runs.
    PlotPerplexity,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config <FILE> is required"))?;
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.effective_toml());
        println!("\n# config hash: {}", cfg.hash());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| Error::config("a command is required (see --help)"))?;
    match command {
        Command::GenCorpus { force } => {
            let dir = gen_corpus(&cfg, force)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Pretrain { target } => {
            let target = PretrainTarget::parse(&target)?;
            let path = pretrain(&cfg, target)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::JointTrain {
            no_speaker_consistency,
            no_stepwise,
        } => {
            let arts = joint_train(&cfg, !no_speaker_consistency, !no_stepwise)?;
            println!("variant: {}", arts.variant);
            println!(
                "epochs: phase A {}, phase B {}",
                arts.phase_a_epochs, arts.phase_b_epochs
            );
            if no_stepwise {
                assert_eq!(arts.phase_a_epochs, 0, "--no-stepwise must skip phase A");
            }
            println!("validation PER: {:.2}%", arts.final_val_per);
            println!("checkpoint written to {}", arts.checkpoint.display());
            println!("training log: {}", arts.log_csv.display());
            println!("perplexity series: {}", arts.perplexity_csv.display());
        }
        Command::Eval { checkpoint, split } => {
            let eval = evaluate(&cfg, &checkpoint, &split)?;
            print!("{}", format_report(&eval));
        }
        Command::PlotPerplexity => {
            let outcome = plot_perplexity(&cfg)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("figure written to {}", outcome.svg.display());
            println!("series written to {}", outcome.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(4))
        }
    }
}
