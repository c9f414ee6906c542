//! `urbansig` — geotagged-event pipeline CLI.
//!
//! Subcommands mirror the pipeline stages and exchange data through files
//! in the configured output directory, so any stage can be re-run in
//! isolation. Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{ClusterOverrides, Ctx, FilterOverrides, SignatureOverrides};
use config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "urbansig", version, about = "Geotagged event pipeline: landuse join, key locations, and cross-city activity signatures")]
struct Cli {
    /// Pipeline config file (TOML with [city.TAG] sections)
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,

    /// Worker threads (0 = available parallelism). Results never depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Base seed override (synth only); city i in tag order uses seed + i
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Remove duplicates and low-quality users from the event stream
    Filter {
        /// Process one city instead of all configured cities
        #[arg(long)]
        city: Option<String>,
        #[arg(long)]
        min_events_per_year: Option<u32>,
        #[arg(long)]
        min_active_days: Option<u32>,
        #[arg(long)]
        speed_percentile: Option<f64>,
    },
    /// Assign each filtered event to its nearest landuse parcel
    Join {
        #[arg(long)]
        city: Option<String>,
    },
    /// Extract per-user key locations with DBSCAN
    Cluster {
        #[arg(long)]
        city: Option<String>,
        /// Search window in degrees
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
    },
    /// Regress key-location class weights against map area weights
    Bias {
        #[arg(long)]
        city: Option<String>,
    },
    /// Hourly weekday signatures per activity class
    Signatures {
        #[arg(long)]
        city: Option<String>,
        /// Comma-separated activity classes (default: config or 1..12)
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<u8>>,
        /// Normalization: sum or max
        #[arg(long)]
        norm: Option<String>,
        #[arg(long)]
        tz_offset_hours: Option<i32>,
        /// Keep weekend events instead of weekdays only
        #[arg(long)]
        include_weekends: bool,
    },
    /// DTW distance matrix and UPGMA dendrogram across cities
    Similarity {
        /// Signature CSV files (default: every configured city's signatures)
        files: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<u8>>,
        /// Sakoe-Chiba band width in hours (default: unconstrained)
        #[arg(long)]
        band: Option<usize>,
    },
    /// Per-rank class composition of key locations
    Rankplot {
        #[arg(long)]
        city: Option<String>,
    },
    /// Generate synthetic corpora from the [synth.TAG] sections
    Synth {
        #[arg(long)]
        city: Option<String>,
    },
    /// Run the full pipeline for every configured city
    Run,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    /// Bad invocation or configuration.
    Usage(anyhow::Error),
    /// Inputs exist but cannot be processed.
    Data(anyhow::Error),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_bytes = std::fs::read(&cli.config).map_err(|e| {
        CliError::Usage(anyhow::anyhow!(
            "cannot read config `{}`: {e}",
            cli.config.display()
        ))
    })?;
    let config = PipelineConfig::load(&cli.config).map_err(CliError::Usage)?;

    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        config.threads.unwrap_or(0)
    };
    init_thread_pool(threads);

    let ctx = Ctx {
        provenance: provenance::provenance_line(&provenance::config_hash(&config_bytes)),
        config,
    };

    let select = |city: &Option<String>| -> Result<Vec<&config::CityConfig>, CliError> {
        ctx.config
            .select_cities(city.as_deref())
            .map_err(CliError::Usage)
    };

    match &cli.command {
        Command::Filter {
            city,
            min_events_per_year,
            min_active_days,
            speed_percentile,
        } => {
            let cities = select(city)?;
            let ov = FilterOverrides {
                min_events_per_year: *min_events_per_year,
                min_active_days: *min_active_days,
                speed_percentile: *speed_percentile,
            };
            commands::cmd_filter(&ctx, &cities, &ov).map_err(CliError::Data)
        }
        Command::Join { city } => {
            let cities = select(city)?;
            commands::cmd_join(&ctx, &cities).map_err(CliError::Data)
        }
        Command::Cluster { city, eps, min_pts } => {
            let cities = select(city)?;
            let ov = ClusterOverrides {
                eps: *eps,
                min_pts: *min_pts,
            };
            commands::cmd_cluster(&ctx, &cities, &ov).map_err(CliError::Data)
        }
        Command::Bias { city } => {
            let cities = select(city)?;
            commands::cmd_bias(&ctx, &cities).map_err(CliError::Data)
        }
        Command::Signatures {
            city,
            classes,
            norm,
            tz_offset_hours,
            include_weekends,
        } => {
            let cities = select(city)?;
            let norm = norm
                .as_deref()
                .map(|n| config::parse_norm(Some(n)))
                .transpose()
                .map_err(CliError::Usage)?;
            if let Some(classes) = classes {
                if classes.iter().any(|c| !(1..=12).contains(c)) {
                    return Err(CliError::Usage(anyhow::anyhow!(
                        "--classes entries must be in 1..=12"
                    )));
                }
            }
            let ov = SignatureOverrides {
                classes: classes.clone(),
                norm,
                tz_offset_hours: *tz_offset_hours,
                include_weekends: *include_weekends,
            };
            commands::cmd_signatures(&ctx, &cities, &ov).map_err(CliError::Data)
        }
        Command::Similarity {
            files,
            classes,
            band,
        } => commands::cmd_similarity(&ctx, files, classes.as_deref(), *band)
            .map_err(CliError::Data),
        Command::Rankplot { city } => {
            let cities = select(city)?;
            commands::cmd_rankplot(&ctx, &cities).map_err(CliError::Data)
        }
        Command::Synth { city } => {
            commands::cmd_synth(&ctx, city.as_deref(), cli.seed).map_err(CliError::Data)
        }
        Command::Run => commands::cmd_run(&ctx).map_err(CliError::Data),
    }
}

#[cfg(feature = "parallel")]
fn init_thread_pool(threads: usize) {
    if threads > 0 {
        // ignore the error if a pool already exists (tests call run twice)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_thread_pool(threads: usize) {
    if threads > 1 {
        eprintln!("note: built without the `parallel` feature; --threads is ignored");
    }
}
