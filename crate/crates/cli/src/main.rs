mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

/// Retouch a region of an image named in plain text.
#[derive(Debug, Parser)]
#[command(name = "retouch", version, about)]
struct Cli {
    /// Backend descriptor: mock[:seed=N,dim=N,stride=N], fixture:FILE, tcp://HOST:PORT, stdio:CMD.
    #[arg(long, global = true, env = "RETOUCH_BACKEND")]
    backend: Option<String>,

    /// Worker threads for proposals and manifest entries (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Produce the region mask for a query.
    Mask(MaskArgs),
    /// Mask, retouch, and assess in one go.
    Run(RunArgs),
    /// Rank an existing directory of proposals.
    Assess(AssessArgs),
    /// Evaluate a manifest under the assessment variants.
    Eval(EvalArgs),
    /// Serve the selected backend over the wire protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Clone)]
pub struct MaskOpts {
    /// Absolute score floor applied after the adaptive cut.
    #[arg(long, allow_negative_numbers = true)]
    floor: Option<f64>,
    /// Use a fixed score threshold instead of the adaptive cut.
    #[arg(long, allow_negative_numbers = true)]
    fixed_tau: Option<f64>,
    /// Crop each entity to its bounding box before embedding.
    #[arg(long)]
    crop_to_bbox: bool,
}

#[derive(Debug, Args, Clone)]
pub struct GenOpts {
    /// JSON file with {m, T, eta, beta_start, beta_end, seeds}; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of proposals.
    #[arg(long = "m")]
    proposals: Option<usize>,
    /// Diffusion steps.
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Base seed; proposal k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    assess: AssessOpts,
}

#[derive(Debug, Args, Clone)]
pub struct AssessOpts {
    /// Weight of the fidelity penalty.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    no_cma: bool,
    #[arg(long)]
    no_iqa: bool,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    query: String,
    /// Mask file (.png or .pgm); the report goes next to it as .json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mask: MaskOpts,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    /// Which part of the image to change.
    #[arg(long)]
    query: String,
    /// What it should become.
    #[arg(long)]
    text: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Image format for written images.
    #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
    format: String,
    /// Record wall-clock timings in the report (makes reports differ between runs).
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    mask: MaskOpts,
    #[command(flatten)]
    gen: GenOpts,
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    #[arg(long)]
    original: PathBuf,
    /// Directory of proposal images, ranked in file-name order.
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    text: String,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    assess: AssessOpts,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// "all" or a comma list of none, cma, iqa, cma+iqa.
    #[arg(long, default_value = "all")]
    variants: String,
    /// Output directory for one report per variant.
    #[arg(long)]
    out: PathBuf,
    /// Also write a CSV per variant.
    #[arg(long)]
    csv: bool,
    #[command(flatten)]
    mask: MaskOpts,
    #[command(flatten)]
    gen: GenOpts,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen on this TCP address; the bound address is printed on stdout.
    #[arg(long, conflicts_with = "stdio")]
    listen: Option<String>,
    /// Speak the protocol on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Diffusion steps the served denoiser is scheduled for.
    #[arg(long = "T", default_value_t = retouch_core::diffusion::DEFAULT_STEPS)]
    steps: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match cli.jobs {
        Some(0) => return fail(Failure::usage(anyhow::anyhow!("--jobs must be at least 1"))),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => return fail(Failure::usage(e.into())),
    };
    let backend = cli.backend.as_deref();
    let result = pool.install(|| match &cli.command {
        Command::Mask(a) => commands::mask(a, backend),
        Command::Run(a) => commands::run(a, backend),
        Command::Assess(a) => commands::assess(a, backend),
        Command::Eval(a) => commands::eval(a, backend),
        Command::Serve(a) => commands::serve(a, backend),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("error: {:#}", f.error);
    ExitCode::from(f.code)
}
