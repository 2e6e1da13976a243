use std::path::PathBuf;
use std::process::ExitCode;

use choreo::{commands, CliError, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "choreo", version, about = "Music-to-dance generation with a curriculum-trained seq2seq model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; defaults are used for anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set curriculum.kind=constant`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic music/dance corpus.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint, the train log and the config used.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a dance for one music feature file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        music: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated dances; writes the report JSON plus CSVs beside it.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to generate with; required unless --real is given.
        #[arg(long, required_unless_present = "real")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the dataset's real poses instead of generated ones.
        #[arg(long, conflicts_with = "checkpoint")]
        real: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kinematic and musical beats of one music/pose pair.
    Beats {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        music: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        /// Dataset directory whose manifest supplies the feature layout.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData { config, out } => {
            let ds = commands::synth_data(&config.load()?, &out)?;
            println!("{}", commands::corpus_summary(&ds));
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = config.load()?;
            let t = commands::train(&cfg, &data, &out, resume)?;
            if let Some(r) = t.log.last() {
                println!("epoch {} p {} loss {} loss/elem {}", r.epoch, r.p, r.loss, r.loss_per_elem);
            }
        }
        Command::Generate {
            checkpoint,
            music,
            seed,
            out,
        } => {
            let y = commands::generate(&checkpoint, &music, seed, &out)?;
            println!("wrote {} poses to {}", y.rows(), out.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            real: _,
            seed,
            out,
        } => {
            let cfg = if config.given() { Some(config.load()?) } else { None };
            let report = commands::evaluate(checkpoint.as_deref(), &data, cfg.as_ref(), seed, &out)?;
            print!("{}", commands::report_csv(&report));
        }
        Command::Beats {
            config,
            music,
            pose,
            dataset,
        } => {
            let r = commands::beats(&config.load()?, &music, &pose, dataset.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).expect("beat report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
