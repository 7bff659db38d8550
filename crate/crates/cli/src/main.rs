use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edsc_cli::commands;
use edsc_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "edsc", version, about = "Deformable separable convolution frame interpolation")]
struct Cli {
    /// Worker threads for pixel-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic sequences with ground-truth frames and flow.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model; writes the checkpoint, log and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Synthesise intermediate frames from two inputs.
    Interp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long)]
        frame2: PathBuf,
        #[arg(long, conflicts_with = "times")]
        t: Option<f64>,
        /// Comma-separated time steps.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Rescale midpoint offsets to each time instead of conditioning on it.
        #[arg(long)]
        naive_rescale: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted frames with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Frame-1 to frame-2 flow for the occluded-region error.
        #[arg(long, requires_all = ["frame1", "frame2"])]
        flow: Option<PathBuf>,
        #[arg(long)]
        frame1: Option<PathBuf>,
        #[arg(long)]
        frame2: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Parameter and FLOP counts of a configuration.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resolution as HxW.
        #[arg(long, default_value = "64x64")]
        res: String,
        /// Use the full-scale widths instead of the configured ones.
        #[arg(long)]
        full_scale: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render where one output pixel samples each input frame.
    VizKernels {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long)]
        frame2: PathBuf,
        /// Output pixel as x,y.
        #[arg(long)]
        pixel: String,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot set thread count: {}", e)))?;
    }
    match cli.command {
        Command::GenData { spec, out, force, overrides } => {
            commands::gen_data(spec.as_deref(), &out, force, &overrides.set)
        }
        Command::Train { config, out, overrides } => {
            commands::train(config.as_deref(), out.as_deref(), &overrides.set)
        }
        Command::Interp { ckpt, frame1, frame2, t, times, naive_rescale, out } => {
            let times = match (t, times) {
                (Some(t), _) => vec![t],
                (None, Some(ts)) => ts,
                (None, None) => vec![0.5],
            };
            commands::interp(&ckpt, &frame1, &frame2, &times, naive_rescale, &out)
        }
        Command::Eval { pred, gt, flow, frame1, frame2 } => {
            let occ = match (flow, frame1, frame2) {
                (Some(f), Some(a), Some(b)) => Some((f, a, b)),
                _ => None,
            };
            commands::eval(&pred, &gt, occ)
        }
        Command::Gradcheck { seeds } => commands::gradcheck(seeds),
        Command::Count { config, res, full_scale, overrides } => {
            commands::count(config.as_deref(), &res, full_scale, &overrides.set)
        }
        Command::VizKernels { ckpt, frame1, frame2, pixel, t, out } => {
            commands::viz_kernels(&ckpt, &frame1, &frame2, &pixel, t, &out)
        }
    }
}

fn main() -> ExitCode {
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
            eprintln!("error: {}", e);
            ExitCode::from(e.code)
        }
    }
}
