//! `bst`: generate synthetic logs, train, evaluate, score and run the model
//! comparison.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bst::model::{ModelKind, Readout};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or inputs; nothing was run.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] bst::Error),
    /// The comparison finished but the expected ordering did not hold.
    #[error("{0}")]
    Assertion(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use bst::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Core(
                E::Config(_)
                | E::Parse { .. }
                | E::Chronology { .. }
                | E::CheckpointVersion { .. }
                | E::CheckpointInconsistent(_)
                | E::ShapeMismatch { .. },
            ) => 1,
            CliError::Core(_) | CliError::Assertion(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "bst", version, about = "Behavior-sequence transformer CTR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and split it by day.
    GenData(Overrides),
    /// Train one model on the training split.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the test split.
    Eval(Overrides),
    /// Score examples (labels optional), one probability per line.
    Predict {
        #[command(flatten)]
        overrides: Overrides,
        /// Line-delimited examples to score.
        #[arg(long)]
        input: PathBuf,
        /// Output file; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and compare WDL, WDL(+Seq) and BST on the same data.
    Experiment {
        #[command(flatten)]
        overrides: Overrides,
        /// Also train BST with 2 and 3 blocks.
        #[arg(long)]
        ablate_blocks: bool,
    },
}

/// Command-line overrides; each wins over the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML config file with [model], [train], [synth], [features], [eval]
    /// and [paths] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Number of transformer blocks.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Sequence length including the target slot.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    readout: Option<Readout>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    num_examples: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// 1-based day whose start begins the test split.
    #[arg(long)]
    split_day: Option<usize>,
    /// Timed single-example forwards during evaluation (0 disables).
    #[arg(long)]
    latency_samples: Option<usize>,
    /// Run directory for all outputs.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Directory with train.jsonl and test.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

impl Overrides {
    /// Defaults, then the config file, then these flags; validated.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut c.train.seed, &self.seed);
        set(&mut c.train.model, &self.model);
        set(&mut c.model.num_blocks, &self.blocks);
        set(&mut c.model.num_heads, &self.heads);
        set(&mut c.model.sequence_length, &self.seq_len);
        set(&mut c.model.dropout_rate, &self.dropout);
        set(&mut c.model.readout, &self.readout);
        set(&mut c.train.learning_rate, &self.learning_rate);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.epochs, &self.epochs);
        if self.clip_norm.is_some() {
            c.train.clip_norm = self.clip_norm;
        }
        set(&mut c.synth.num_examples, &self.num_examples);
        set(&mut c.synth.days, &self.days);
        if self.split_day.is_some() {
            c.split_day = self.split_day;
        }
        set(&mut c.eval.latency_samples, &self.latency_samples);
        for (dst, v) in [
            (&mut c.paths.run_dir, &self.run_dir),
            (&mut c.paths.data, &self.data),
            (&mut c.paths.spec, &self.spec),
            (&mut c.paths.checkpoint, &self.checkpoint),
            (&mut c.paths.report, &self.report),
        ] {
            if v.is_some() {
                *dst = v.clone();
            }
        }
        c.validate()?;
        // pin the run directory so every artifact of this invocation lands
        // in one place and the echo names it
        c.paths.run_dir = Some(c.run_dir());
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(o) => commands::gen_data(&o.resolve()?, o.force),
        Command::Train { overrides: o } => commands::train(&o.resolve()?, o.force),
        Command::Eval(o) => commands::eval(&o.resolve()?, o.force),
        Command::Predict {
            overrides: o,
            input,
            output,
        } => commands::predict(&o.resolve()?, &input, output.as_deref(), o.force),
        Command::Experiment {
            overrides: o,
            ablate_blocks,
        } => commands::experiment(&o.resolve()?, ablate_blocks, o.force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
