use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cucl::evalkit::{compute_metrics, AccuracyMatrix};
use cucl::harness::{emit_learning_curve, run_experiment, write_curve_csv, RunConfig};
use cucl::losses::Backbone;
use cucl::rehearsal::RehearsalMode;

#[derive(Parser)]
#[command(name = "cucl", version, about = "Codebook-quantized unsupervised continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a task stream and write matrix.csv, curve.csv, summary.json and checkpoints.
    Run(RunArgs),
    /// Recompute ACC, BWT and MAA from an accuracy-matrix CSV.
    Metrics {
        matrix: PathBuf,
    },
    /// Emit running MAA / AA per training point from an accuracy-matrix CSV.
    Curve {
        matrix: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RehearsalArg {
    Furthest,
    Nearest,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Ntxent,
    Siamese,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    codebooks: Option<usize>,
    #[arg(long)]
    codewords: Option<usize>,
    #[arg(long)]
    subdim: Option<usize>,
    #[arg(long)]
    tau_q: Option<f64>,
    #[arg(long)]
    tau_l: Option<f64>,
    #[arg(long)]
    buffer_size: Option<usize>,
    #[arg(long, value_enum)]
    rehearsal: Option<RehearsalArg>,
    #[arg(long, value_enum)]
    backbone: Option<BackboneArg>,
    /// Train with the backbone loss only.
    #[arg(long)]
    no_cucl: bool,
    /// Exclude the positive from the cross-loss denominator.
    #[arg(long)]
    literal_indicator: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seeds both the generated stream and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Load the task stream from a CSV file instead of generating one.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn into_config(self) -> RunConfig {
        let mut c = RunConfig::default();
        if let Some(v) = self.tasks {
            c.stream.tasks = v;
        }
        if let Some(v) = self.classes_per_task {
            c.stream.classes_per_task = v;
        }
        if let Some(v) = self.codebooks {
            c.quantizer.codebooks = v;
        }
        if let Some(v) = self.codewords {
            c.quantizer.codewords = v;
        }
        if let Some(v) = self.subdim {
            c.quantizer.sub_dim = v;
        }
        c.encoder.output_dim = c.quantizer.dim();
        if let Some(v) = self.tau_q {
            c.quantizer.tau_q = v;
        }
        if let Some(v) = self.tau_l {
            c.loss.tau_l = v;
        }
        if let Some(v) = self.buffer_size {
            c.buffer_size = v;
        }
        if let Some(r) = self.rehearsal {
            c.rehearsal = match r {
                RehearsalArg::Furthest => RehearsalMode::Furthest,
                RehearsalArg::Nearest => RehearsalMode::Nearest,
                RehearsalArg::Off => RehearsalMode::Off,
            };
        }
        if let Some(b) = self.backbone {
            c.loss.backbone = match b {
                BackboneArg::Ntxent => Backbone::Ntxent,
                BackboneArg::Siamese => Backbone::SiameseStopgrad,
            };
        }
        c.cucl_enabled = !self.no_cucl;
        c.loss.literal_indicator = self.literal_indicator;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
            c.stream.seed = v;
        }
        c.stream_path = self.stream;
        c.output_dir = Some(self.out);
        c
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut config = args.into_config();
            if let Some(path) = &config.stream_path {
                let stream = cucl::datastream::load_external(path)
                    .with_context(|| format!("loading stream {}", path.display()))?;
                config.encoder.input_dim = stream.input_dim();
            }
            let summary = run_experiment(&config).context("experiment failed")?;
            println!("{}", serde_json::to_string_pretty(&summary.metrics)?);
        }
        Command::Metrics { matrix } => {
            let m = AccuracyMatrix::load_csv(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            println!("{}", serde_json::to_string_pretty(&compute_metrics(&m)?)?);
        }
        Command::Curve { matrix, out } => {
            let m = AccuracyMatrix::load_csv(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            let curve = emit_learning_curve(&m)?;
            match out {
                Some(path) => write_curve_csv(std::fs::File::create(&path)?, &curve)?,
                None => write_curve_csv(std::io::stdout().lock(), &curve)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
