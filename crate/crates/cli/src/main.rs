use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use defunet::data::{CrossMode, Split};
use defunet_cli::commands::{cmd_eval, cmd_gradcheck, cmd_predict, cmd_report, cmd_train};
use defunet_cli::gradcheck::SuiteOptions;
use defunet_cli::report::Format;
use defunet_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "defunet", version, about = "Dual-encoder lung field segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train(DataArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Score all pixels of the split as one image.
        #[arg(long)]
        pooled: bool,
    },
    /// Segment one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask; enables the overlay and the dice score.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "predictions")]
        out: PathBuf,
        /// Resample to this square size before segmenting.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_conv: bool,
    },
    /// Compare the test summaries of several runs.
    Report {
        /// Directory holding one subdirectory per run.
        runs: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: FormatArg,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    cross: Option<CrossArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum CrossArg {
    M2s,
    S2m,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

impl DataArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data_dir {
            cfg.data.data_dir = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.synthetic {
            cfg.data.synthetic = true;
        }
        if let Some(s) = self.size {
            cfg.data.size = s;
        }
        if let Some(c) = self.cross {
            cfg.data.cross = Some(match c {
                CrossArg::M2s => CrossMode::M2s,
                CrossArg::S2m => CrossMode::S2m,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let a = cmd_train(&cfg)?;
            println!("run written to {}", a.out_dir.display());
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            pooled,
        } => {
            let cfg = data.resolve()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let out = cmd_eval(&cfg, &checkpoint, split, pooled)?;
            println!("per-image metrics in {}", out.images_csv.display());
        }
        Command::Predict {
            checkpoint,
            image,
            gt,
            out,
            size,
            threshold,
        } => {
            let p = cmd_predict(&checkpoint, &image, gt.as_deref(), &out, size, threshold)?;
            println!("mask written to {}", p.mask_png.display());
            if let Some(o) = p.overlay_png {
                println!("overlay written to {}", o.display());
            }
        }
        Command::Gradcheck { corrupt_conv } => {
            cmd_gradcheck(SuiteOptions { corrupt_conv }, &mut std::io::stdout().lock())?;
        }
        Command::Report { runs, format } => {
            let format = match format {
                FormatArg::Csv => Format::Csv,
                FormatArg::Md => Format::Markdown,
            };
            print!("{}", cmd_report(&runs, format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
