use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use surf_core::app::{
    augment, load_dataset, run_pipeline, write_report, write_report_to, LoadOptions, Mode, Normalize,
    PipelineConfig, ReportFormat,
};
use surf_core::sim::write_metrics_csv;
use surf_core::{Family, SurfError};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Binomial,
    Poisson,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Select,
    Rank,
    Stability,
    Simulate,
    Aggregate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormalizeArg {
    None,
    Proportions,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Text,
}

/// Variable selection for GLMs by subsampled-lasso ranking and
/// permutation-calibrated forward selection.
#[derive(Debug, Parser)]
#[command(name = "surf", version)]
struct Args {
    /// Abundance table (CSV or TSV; header row, sample ids in the first column).
    table: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "select")]
    mode: ModeArg,

    /// Name of the response column.
    #[arg(long, short = 'y')]
    response: Option<String>,

    #[arg(long, value_enum, default_value = "binomial")]
    family: FamilyArg,

    /// Taxonomy TSV with `otu_id` and `lineage` columns.
    #[arg(long)]
    taxonomy: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "none")]
    normalize: NormalizeArg,

    /// Comma-separated covariates excluded from normalisation and aggregation.
    #[arg(long, value_delimiter = ',')]
    passthrough: Vec<String>,

    /// Keep columns uncentred.
    #[arg(long)]
    no_center: bool,

    /// TOML file with [ranking], [forward], [stability] and [scenario] sections.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Forward-selection significance level (default 0.05).
    #[arg(long)]
    alpha: Option<f64>,

    /// Number of ranking subsamples (default 250).
    #[arg(long = "B")]
    b: Option<usize>,

    /// Subsample fraction for ranking (default 0.9).
    #[arg(long)]
    fraction: Option<f64>,

    /// Permutations per forward step (default 200).
    #[arg(long)]
    perms: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    /// Report path; stdout when absent.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,

    /// Where `aggregate` writes the augmented design CSV (stdout when absent).
    #[arg(long)]
    design_out: Option<PathBuf>,

    /// Where `simulate` writes its per-method metrics CSV.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn config_from(args: &Args) -> Result<PipelineConfig, SurfError> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_path(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.alpha {
        cfg.forward.alpha = v;
    }
    if let Some(v) = args.perms {
        cfg.forward.n_perm = v;
    }
    if let Some(v) = args.b {
        cfg.ranking.b = v;
    }
    if let Some(v) = args.fraction {
        cfg.ranking.fraction = v;
    }
    cfg.ranking.validate()?;
    cfg.forward.validate()?;
    cfg.stability.validate()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<(), SurfError> {
    if let Some(t) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| SurfError::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let cfg = config_from(&args)?;
    let mode = match args.mode {
        ModeArg::Select => Mode::Select,
        ModeArg::Rank => Mode::Rank,
        ModeArg::Stability => Mode::Stability,
        ModeArg::Simulate => Mode::Simulate,
        ModeArg::Aggregate => Mode::Aggregate,
    };
    let family = match args.family {
        FamilyArg::Gaussian => Family::Gaussian,
        FamilyArg::Binomial => Family::Binomial,
        FamilyArg::Poisson => Family::Poisson,
    };
    let format = match args.format {
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Text => ReportFormat::Text,
    };

    let dataset = if mode == Mode::Simulate {
        None
    } else {
        let table = args
            .table
            .as_deref()
            .ok_or_else(|| SurfError::InvalidConfig(format!("{} mode needs a table", mode.name())))?;
        let response = args
            .response
            .as_deref()
            .ok_or_else(|| SurfError::InvalidConfig("--response is required".into()))?;
        let opts = LoadOptions {
            normalize: match args.normalize {
                NormalizeArg::None => Normalize::None,
                NormalizeArg::Proportions => Normalize::Proportions,
            },
            passthrough: args.passthrough.clone(),
            center: !args.no_center,
        };
        Some(load_dataset(table, args.taxonomy.as_deref(), response, family, &opts).map_err(|e| e.at_stage("load"))?)
    };

    let report = run_pipeline(dataset.as_ref(), mode, &cfg)?;

    if mode == Mode::Aggregate {
        let design = augment(dataset.as_ref().expect("loaded above"))?.expect("checked by the pipeline");
        match &args.design_out {
            Some(p) => design.write_csv(BufWriter::new(File::create(p)?))?,
            None => design.write_csv(io::stdout().lock())?,
        }
    }
    if let (Some(p), Some(m)) = (&args.metrics_out, &report.body.simulation) {
        write_metrics_csv(m, BufWriter::new(File::create(p)?))?;
    }
    match &args.out {
        Some(p) => write_report(&report, p, format)?,
        // aggregate prints the design on stdout, so the report goes only to files
        None if mode == Mode::Aggregate && args.design_out.is_none() => {}
        None => write_report_to(&report, io::stdout().lock(), format)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
