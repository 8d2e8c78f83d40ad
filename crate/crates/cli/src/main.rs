//! `spanedit`: synthetic corpus generation, model training, speech editing,
//! continuation TTS, watermark detection and evaluation.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "spanedit", version, about = "Span-based speech editing with watermarked generated regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON file layered over the built-in defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key after the file is applied, e.g. `--set train.steps=200`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed; takes precedence over any seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for the WAVs, alignments, lexicon and manifest
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory holding `manifest.jsonl` and `lexicon.tsv`
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint root; each stage writes its own subdirectory
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input WAV
    #[arg(long)]
    pub audio: PathBuf,
    /// Transcript of the input
    #[arg(long)]
    pub orig: String,
    /// Desired transcript
    #[arg(long)]
    pub target: String,
    /// Word alignment of the input (JSON or CSV)
    #[arg(long)]
    pub align: PathBuf,
    /// Checkpoint root with `wm/` and `ar/`
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for `out.wav`, `out.json` and `out.wm`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TtsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prompt WAV to continue from
    #[arg(long)]
    pub prompt: PathBuf,
    /// Transcript of the prompt
    #[arg(long)]
    pub prompt_text: String,
    /// Text to synthesize after the prompt
    #[arg(long)]
    pub target: String,
    /// Checkpoint root with `wm/` and `ar/`
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for `out.wav`, `out.json` and `out.wm`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    /// WAV to scan for the watermark
    #[arg(long)]
    pub audio: PathBuf,
    /// Checkpoint root with `wm/`
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Where to write `detect-wm.json`; defaults to the audio's directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory to evaluate on
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint root with `wm/` and `ar/`
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for `report.json`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic corpus: WAVs, alignments, lexicon and manifest
    MakeSynthetic(SynthArgs),
    /// Train the RVQ codec into `<ckpt>/codec`
    TrainCodec(TrainArgs),
    /// Train the watermarking decoder on top of `<ckpt>/codec` into `<ckpt>/wm`
    TrainWm(TrainArgs),
    /// Train the token model on codes from `<ckpt>/codec` into `<ckpt>/ar`
    TrainAr(TrainArgs),
    /// Replace the words that differ between two transcripts
    Edit(EditArgs),
    /// Continue a prompt with speech for new text
    Tts(TtsArgs),
    /// Print per-frame watermark probabilities and detected spans
    DetectWm(DetectArgs),
    /// Score reconstruction, watermarking, context use and generation stability
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<config::UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
