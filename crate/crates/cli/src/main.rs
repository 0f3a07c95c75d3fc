//! `placemap`: build, grow and query a place map from descriptor files.

mod commands;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use placemap::bundle::BundleError;
use placemap::descfile::FormatError;
use placemap::mapgraph::GraphError;
use placemap::EngineParams;

/// Exit codes other than 0 (success) and 1 (anything unclassified).
const EXIT_USAGE: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "placemap",
    version,
    about = "Sequential place recognition over a self-compressing map"
)]
struct Cli {
    /// Where the default bundle (`map.slmb`) and simulator output live.
    #[arg(long, env = "PLACEMAP_DATA_DIR", default_value = ".", global = true)]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct BundleArg {
    /// Map bundle; defaults to `<data-dir>/map.slmb`.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a map from the first traversal.
    Init {
        #[command(flatten)]
        bundle: BundleArg,
        /// Descriptor container (global or local features).
        #[arg(long)]
        frames: PathBuf,
        /// Ground-truth sidecar (`frame,place`) whose places label the images.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Replace an existing bundle.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Localize a traversal, then fold it into the map.
    Ingest {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Skip cull and combine; every frame becomes a new place.
        #[arg(long)]
        append_only: bool,
        /// Also write the per-frame match records here.
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Localize a traversal without touching the map.
    Query {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        frames: PathBuf,
        /// Match records destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Structural counts of a bundle.
    Stats {
        #[command(flatten)]
        bundle: BundleArg,
    },
    /// Generate traversals and ground truth from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory; defaults to the data directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score match records against ground truth.
    ///
    /// Nodes are resolved through the bundle the matches were computed
    /// against; ingesting renumbers nodes.
    Evaluate {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Scenario the truth came from; supplies hop distances.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        tolerance: usize,
        /// Per-frame scores destination.
        #[arg(long)]
        per_frame: Option<PathBuf>,
    },
    /// Write the place graph in Graphviz DOT.
    ExportGraph {
        #[command(flatten)]
        bundle: BundleArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ParamArgs {
    /// Temporal window W of the initial chain.
    #[arg(long)]
    window: Option<usize>,
    /// Gaussian width of chain weights.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Acceptance threshold on the belief.
    #[arg(long)]
    gamma: Option<f64>,
    /// Power-law exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Output dimension of the PCA rotation.
    #[arg(long)]
    target_dim: Option<usize>,
    /// Neighbours retrieved per frame.
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    /// Leaves scanned per retrieval.
    #[arg(long)]
    checks: Option<usize>,
    #[arg(long)]
    leaf_capacity: Option<usize>,
    /// Visual words in the VLAD codebook.
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ParamArgs {
    fn resolve(&self) -> EngineParams {
        let mut p = EngineParams::default();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { p.$f = v; })* };
        }
        set!(
            window,
            delta,
            beta,
            sigma,
            gamma,
            alpha,
            target_dim,
            neighbors,
            branching,
            checks,
            leaf_capacity,
            codebook_size,
            seed
        );
        p
    }
}

/// Bad invocation that clap could not catch (empty input, mismatched
/// sidecar, refusing to overwrite).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<FormatError>() || cause.is::<csv::Error>() || cause.is::<toml::de::Error>() {
            return EXIT_FORMAT;
        }
        if cause.is::<GraphError>() {
            return EXIT_AUDIT;
        }
        if let Some(b) = cause.downcast_ref::<BundleError>() {
            return match b {
                BundleError::Audit(_) => EXIT_AUDIT,
                BundleError::Io(_) | BundleError::Locked(_) => 1,
                _ => EXIT_FORMAT,
            };
        }
        if let Some(e) = cause.downcast_ref::<placemap::Error>() {
            match e {
                placemap::Error::Format(_) => return EXIT_FORMAT,
                placemap::Error::Graph(_) | placemap::Error::Bundle(BundleError::Audit(_)) => return EXIT_AUDIT,
                placemap::Error::Bundle(BundleError::Io(_) | BundleError::Locked(_)) => return 1,
                placemap::Error::Bundle(_) => return EXIT_FORMAT,
                _ => {}
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
