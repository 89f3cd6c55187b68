mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "svimo", version, about = "Joint video and hand-object motion diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration field, e.g. `--set train.batch_size=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist a synthetic dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the motion head alone.
    Warmup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop joint training starting from a warm-up checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "vid-ckpt")]
        vid_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate video and motion from a reference image and prompt, or for
    /// every sample of a dataset split.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, requires = "prompt", conflicts_with = "data")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        prompt: Option<String>,
        #[arg(long, required_unless_present = "image")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: commands::SplitChoice,
        /// Reverse steps; defaults to `schedule.sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Sampling seed; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated samples against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the token accounting of the configured shapes.
    TokenBudget {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen { common, out } => commands::datagen(&common, &out),
        Command::Warmup { common, data, out } => commands::warmup(&common, &data, &out),
        Command::Train { common, data, vid_ckpt, out } => commands::train(&common, &data, &vid_ckpt, &out),
        Command::Sample { common, ckpt, image, prompt, data, split, steps, seed, out } => {
            let source = match (image, prompt, data) {
                (Some(image), Some(prompt), _) => commands::SampleSource::Single { image, prompt },
                (_, _, Some(data)) => commands::SampleSource::Dataset { data, split },
                _ => unreachable!("clap enforces one source"),
            };
            commands::sample(&common, &ckpt, source, steps, seed, &out)
        }
        Command::Eval { common, real, gen, out } => commands::eval(&common, &real, &gen, &out),
        Command::TokenBudget { common } => commands::token_budget(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            run::emit(&serde_json::json!({ "event": "error", "kind": e.kind(), "message": e.to_string() }), true);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
