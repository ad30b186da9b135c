use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wsimil::synth::SynthSpec;
use wsimil::training::FusionKind;
use wsimil::{Error, Result, TrainConfig};
use wsimil_cli::{cmd_cv, cmd_embed, cmd_report, cmd_synth, cmd_tile, error_kind, exit_code, EmbedConfig, TileParams};

#[derive(Parser)]
#[command(name = "wsimil", version, about = "Attention MIL pipeline for whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted signal instances.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Fraction of signal instances in positive bags.
        #[arg(long)]
        signal_rate: Option<f64>,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Segment tissue and cut non-overlapping patches.
    Tile {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = wsimil::tiling::DEFAULT_PATCH_SIZE)]
        patch_size: usize,
        #[arg(long, default_value_t = wsimil::tiling::DEFAULT_MIN_COVERAGE)]
        min_coverage: f64,
        #[arg(long, default_value = wsimil::tiling::DEFAULT_MAGNIFICATION)]
        magnification: String,
        /// Also write every retained patch as a PNG.
        #[arg(long)]
        write_patches: bool,
    },
    /// Embed tiled patches with the configured extractors.
    Embed {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of extractors, in order.
        #[arg(long, value_delimiter = ',')]
        extractors: Vec<String>,
        /// CSV with `slide_id,patient_id,label`; writes `dataset.json`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// k-fold cross-validation on a dataset manifest.
    Cv {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Patches sampled per bag.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        fusion: Option<FusionKind>,
        /// Comma-separated extractors to concatenate, in order.
        #[arg(long, value_delimiter = ',')]
        extractors: Vec<String>,
    },
    /// Compare cross-validation reports in one CSV table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, signal_rate, patients } => {
            let mut spec = match &common.config {
                Some(p) => SynthSpec::load(p)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            if let Some(s) = signal_rate {
                spec.signal_rate = s;
            }
            if let Some(n) = patients {
                spec.n_patients = n;
            }
            spec.validate()?;
            let path = cmd_synth(&spec, &common.out)?;
            println!("{}", path.display());
        }
        Command::Tile { images, out, patch_size, min_coverage, magnification, write_patches } => {
            let params = TileParams { patch_size, min_coverage, magnification, write_patches };
            for path in cmd_tile(&images, &params, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Embed { manifests, common, extractors, labels } => {
            let config = common
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("embed needs --config with an extractor list".into()))?;
            let mut config = EmbedConfig::load(config)?.select(&extractors)?;
            if let Some(seed) = common.seed {
                config.reseed(seed);
            }
            for path in cmd_embed(&manifests, &config, labels.as_deref(), &common.out)? {
                println!("{}", path.display());
            }
        }
        Command::Cv { manifest, common, cap, k, fusion, extractors } => {
            let mut config = match &common.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            if let Some(cap) = cap {
                config.patches_per_bag = cap;
            }
            if let Some(k) = k {
                config.k = k;
            }
            if let Some(f) = fusion {
                config.fusion = f;
            }
            if !extractors.is_empty() {
                config.extractors = extractors;
            }
            let out = cmd_cv(&manifest, &config, &common.out)?;
            for (name, a) in &out.report.aggregate {
                println!("{name}\t{:.4}\t({:.4})", a.mean, a.std);
            }
        }
        Command::Report { reports, out } => {
            let table = cmd_report(&reports)?;
            match out {
                Some(path) => write_file(&path, &table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("wsimil: error[{}]: {err}", error_kind(&err));
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
