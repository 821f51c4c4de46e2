//! `stopline` batch front end. Every subcommand is a thin composition of
//! `stopline_core` operations, sharing the service's config file and error
//! codes.
//!
//! Failures print one JSON object on stderr,
//! `{"error":{"code":..,"message":..,"details":..},"exit_code":N}`, and exit
//! with a code from [`EXIT_CODES`]. [`run`] is the whole program minus
//! logging setup, so it can be driven in-process.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use stopline_service::ApiError;

/// Exit codes, keyed by the HTTP status the same failure gets from the
/// service.
pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal or I/O failure
  2  command-line usage error
  3  configuration error
  4  invalid input (malformed file, bad parameters, too few pairs)
  5  not found (site, product, table)
  6  cannot proceed (estimation failed, no homography, site incomplete)
  7  imagery service unreachable or failed
  8  store locked by another writer";

#[derive(Debug, Parser)]
#[command(name = "stopline", version, about = "Camera-to-ortho rectification and braking-event analytics", after_help = EXIT_CODES)]
pub struct Cli {
    /// Config file shared with the service (TOML, or JSON by extension).
    #[arg(long, global = true, env = "STOPLINE_CONFIG")]
    config: Option<PathBuf>,
    /// Store directory; overrides the config file and STOPLINE_STORE_DIR.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch or load a georeferenced orthoimage for a site, creating the site if needed.
    FetchOrtho(FetchOrthoArgs),
    /// Save stop bar and median annotations for a site.
    Annotate(AnnotateArgs),
    /// Estimate a homography from saved or supplied correspondences and register it.
    Estimate(EstimateArgs),
    /// Ingest detection files into trajectories and braking events.
    Ingest(IngestArgs),
    /// Re-run braking detection on stored trajectories.
    Detect(DetectArgs),
    /// Build analytics products from stored events.
    Report(ReportArgs),
    /// Export a stored table as NDJSON.
    Export(ExportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct FetchOrthoArgs {
    #[arg(long)]
    pub site: String,
    /// minLon,minLat,maxLon,maxLat in the imagery CRS.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 4]>,
    /// Export size as WIDTHxHEIGHT; defaults to the configured size.
    #[arg(long)]
    pub size: Option<String>,
    /// Use a local PNG/TIFF with a world-file sidecar instead of the imagery service.
    #[arg(long, conflicts_with_all = ["bbox", "size"])]
    pub image: Option<PathBuf>,
    /// Also write the raster and its world file here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub site: String,
    /// JSON file with stop_bar, median and analysis_side.
    #[arg(long)]
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Site to register against; defaults to the site named in the pairs file.
    #[arg(long)]
    pub site: Option<String>,
    /// Correspondence set to save before estimating; otherwise the stored set is used.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// RANSAC seed; defaults to the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict the homography to videos whose filename matches this glob.
    #[arg(long)]
    pub filename_pattern: Option<String>,
    /// Restrict the homography to a local time-of-day window `HH:MM-HH:MM`,
    /// or an absolute range `FROM/TO` of RFC 3339 instants.
    #[arg(long)]
    pub window: Option<String>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub site: String,
    /// Detection NDJSON file; repeat with --meta for multi-video batches.
    #[arg(long, required = true)]
    pub detections: Vec<PathBuf>,
    /// Video metadata sidecar, paired with --detections by position.
    #[arg(long, required = true)]
    pub meta: Vec<PathBuf>,
    /// Worker threads. Output order does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub site: String,
    /// Limit to one stored video.
    #[arg(long)]
    pub video: Option<String>,
    /// Override the trigger deceleration, m/s^2.
    #[arg(long)]
    pub a_trigger: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub site: String,
    /// Product name; repeat for several. Defaults to all products.
    #[arg(long)]
    pub product: Vec<String>,
    /// json or csv.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Write `<product>.<ext>` files into this directory instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// trajectories or events.
    #[arg(long)]
    pub table: String,
    /// Limit to one site.
    #[arg(long)]
    pub site: Option<String>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; overrides the config.
    #[arg(long)]
    pub listen: Option<String>,
    /// Directory of web UI assets.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_bbox(s: &str) -> Result<[f64; 4], String> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated numbers, got {}", v.len()))
}

/// Maps the service's error statuses onto process exit codes.
fn exit_code(e: &ApiError) -> u8 {
    if e.code == "invalid_config" {
        return 3;
    }
    match e.status.as_u16() {
        400 => 4,
        404 => 5,
        409 | 422 => 6,
        502 => 7,
        503 => 8,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Command output goes to `out`, errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{}", e.render());
            return e.exit_code() as u8;
        }
        Err(e) => {
            let message = e.render().to_string();
            let message = message
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect::<Vec<_>>()
                .join(" ");
            let message = message.trim_start_matches("error: ");
            let _ = writeln!(
                err,
                "{}",
                json!({ "error": { "code": "usage", "message": message, "details": null }, "exit_code": 2 })
            );
            return 2;
        }
    };
    let result = commands::load_config(cli.config.as_deref(), cli.store).and_then(|config| match cli.command {
        Command::FetchOrtho(a) => commands::fetch_ortho(&config, a, out),
        Command::Annotate(a) => commands::annotate(&config, a, out),
        Command::Estimate(a) => commands::estimate(&config, a, out),
        Command::Ingest(a) => commands::ingest(&config, a, out),
        Command::Detect(a) => commands::detect(&config, a, out),
        Command::Report(a) => commands::report(&config, a, out),
        Command::Export(a) => commands::export(&config, a, out),
        Command::Serve(a) => commands::serve(config, a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "{}", json!({ "error": e, "exit_code": code }));
            code
        }
    }
}
