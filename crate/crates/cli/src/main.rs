//! `litextract`: headless driver for the literature extraction pipeline.

mod commands;
mod config;
mod extract;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use litextract_core::export::{ExportFormat, ExportMode};
use litextract_core::provider::ProviderId;
use litextract_core::schema::Preset;
use litextract_mock::{Latency, NoiseMode};

/// Exit status for a run where every record succeeded.
pub const EXIT_OK: u8 = 0;
/// Exit status when the run finished but some records failed.
pub const EXIT_SOME_FAILED: u8 = 1;
/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit status when the run was cancelled.
pub const EXIT_CANCELLED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "litextract", version, about = "Schema-guided batch extraction for literature exports")]
struct Cli {
    /// Data directory for credentials, settings and checkpoints
    /// (default: $LITEXTRACT_HOME, then the platform config directory).
    #[arg(long, global = true, value_name = "DIR")]
    home: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full pipeline: ingest, map, extract and export.
    Extract(ExtractArgs),
    /// Print the detected column mapping for a file.
    Map(MapArgs),
    /// Print the generated system prompt for a schema.
    Prompt(PromptArgs),
    /// Start the local control service.
    Serve(ServeArgs),
    /// Start the mock chat-completions provider.
    Mock(MockArgs),
    /// Delete stored credentials, settings and checkpoints.
    Clear,
    /// Store an API key for a provider.
    SetKey(SetKeyArgs),
    /// Estimate the cost of a batch.
    Cost(CostArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SchemaArgs {
    /// Schema JSON file.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    pub schema: Option<PathBuf>,
    /// Built-in preset (paper_info or lit_review).
    #[arg(long)]
    pub preset: Option<Preset>,
    /// User prompt template with {{column}} placeholders.
    #[arg(long)]
    pub template: Option<String>,
    /// Annotate fields with their data types in the system prompt.
    #[arg(long)]
    pub typed: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long)]
    pub provider: Option<ProviderId>,
    /// Override the provider's base URL (for `custom` or a proxy).
    #[arg(long, value_name = "URL")]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Parallel requests (1-10).
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Minimum spacing between request launches.
    #[arg(long, value_name = "MS")]
    pub interval_ms: Option<u64>,
    /// Extra attempts after a failed one.
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long, value_name = "MS")]
    pub retry_delay_ms: Option<u64>,
    #[arg(long, value_name = "SECS")]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// CSV or .xlsx export to process.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Output file (default: <input>_extracted.<format>).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// csv, json or xlsx (default: from --out, else csv).
    #[arg(long)]
    pub format: Option<ExportFormat>,
    /// all (original columns plus fields) or extracted.
    #[arg(long, default_value = "all")]
    pub mode: ExportMode,
    /// Add status and error columns to the export.
    #[arg(long)]
    pub include_status: bool,
    /// Continue from the checkpoint of an interrupted run.
    #[arg(long)]
    pub resume: bool,
    /// Suppress the progress line.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Custom mapping rules (JSON list of {patterns, target}).
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Also render the user prompt for a row of this file.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub row: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
    /// Per-attempt failure probability.
    #[arg(long, default_value_t = 0.0)]
    pub failure_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Milliseconds, fixed ("30") or a range ("10-50").
    #[arg(long, default_value = "0")]
    pub latency: Latency,
    /// clean, prefix_suffix, code_fence or double_object.
    #[arg(long, default_value = "clean")]
    pub noise: NoiseMode,
}

#[derive(Debug, Args)]
pub struct SetKeyArgs {
    #[arg(long)]
    pub provider: ProviderId,
    /// The key; read from stdin when omitted.
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 1000)]
    pub records: u64,
    /// Average input tokens per record.
    #[arg(long, default_value_t = 2000.0)]
    pub input_tokens: f64,
    /// Average output tokens per record.
    #[arg(long, default_value_t = 500.0)]
    pub output_tokens: f64,
    /// Price table JSON replacing the built-in one.
    #[arg(long, value_name = "FILE")]
    pub prices: Option<PathBuf>,
}

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("LITEXTRACT_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_tracing();
    let store = match config::open_store(cli.home.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Extract(args) => extract::run(&store, args).await,
        Command::Map(args) => commands::map(args),
        Command::Prompt(args) => commands::prompt(args),
        Command::Serve(args) => commands::serve(store, args).await,
        Command::Mock(args) => commands::mock(args).await,
        Command::Clear => commands::clear(&store),
        Command::SetKey(args) => commands::set_key(&store, args),
        Command::Cost(args) => commands::cost(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
