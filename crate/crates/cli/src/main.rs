//! Command-line driver: train the local distance indicator, fit a field to
//! a sparse cloud, upsample through a fitted field, and evaluate results.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training
//! divergence.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use densify_core::config::RunConfig;
use densify_core::error::Error;
use densify_core::field::{fit_to_cloud, FitStatus, FittedField};
use densify_core::geom::Vec3;
use densify_core::io::{
    read_point_cloud, read_triangle_mesh_ply, write_point_cloud, PointFormat,
};
use densify_core::ldi::synthetic::{
    generate_samples, load_patch_pairs, samples_from_pairs, SyntheticSpec,
};
use densify_core::ldi::{train_ldi, LdiModel};
use densify_core::metrics::{MetricsReport, OracleSurface};
use densify_core::upsample::{upsample, Target, UpsampleRequest};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "densify", version, about = "Point cloud densification via a neural unsigned distance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the local distance indicator on patch pairs.
    TrainLdi(TrainLdiArgs),
    /// Fit an unsigned distance field to a sparse cloud.
    FitField(FitFieldArgs),
    /// Upsample a sparse cloud through a fitted field.
    Upsample(UpsampleArgs),
    /// Compare a prediction against a reference (and optionally a surface).
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TrainLdiArgs {
    /// Patch pair source: a directory of `<name>_sparse.*` /
    /// `<name>_dense.*` files, or `synthetic:<spec>` (e.g.
    /// `synthetic:plane+sphere,patches=48,sparse=64,dense=1024,seed=7`).
    #[arg(long)]
    patches: String,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Config file (key=value).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitFieldArgs {
    /// Sparse input cloud (.xyz or .ply).
    #[arg(long)]
    input: PathBuf,
    /// Trained indicator checkpoint.
    #[arg(long)]
    ldi: PathBuf,
    /// Output field checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Config file (key=value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training report path (defaults to `<out>.log`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct UpsampleArgs {
    /// Sparse input cloud (.xyz or .ply).
    #[arg(long)]
    input: PathBuf,
    /// Fitted field checkpoint.
    #[arg(long)]
    field: PathBuf,
    /// Scale factor r (output count = r × input count).
    #[arg(long, conflicts_with = "count")]
    scale: Option<f64>,
    /// Absolute output point count.
    #[arg(long)]
    count: Option<usize>,
    /// Output cloud path (.xyz or .ply).
    #[arg(long)]
    out: PathBuf,
    /// Override the configured oversample ratio.
    #[arg(long)]
    oversample: Option<f64>,
    /// Config file (key=value).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted cloud.
    #[arg(long)]
    pred: PathBuf,
    /// Reference cloud.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// True surface for P2F: `sphere:RADIUS`, `torus:R,r`, or `mesh:PATH`
    /// (PLY with faces).
    #[arg(long)]
    surface: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_surface(text: &str) -> Result<OracleSurface, Error> {
    let (kind, rest) = text
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("surface spec `{text}` needs kind:params")))?;
    match kind {
        "sphere" => {
            let radius: f64 = rest
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("sphere radius: {e}")))?;
            OracleSurface::sphere(Vec3::zeros(), radius)
        }
        "torus" => {
            let (big_r, r) = rest
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument("torus needs R,r".to_string()))?;
            let big_r: f64 = big_r
                .trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("torus R: {e}")))?;
            let r: f64 = r
                .trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("torus r: {e}")))?;
            OracleSurface::torus(big_r, r)
        }
        "mesh" => {
            let triangles = read_triangle_mesh_ply(Path::new(rest))?;
            OracleSurface::mesh(triangles)
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown surface kind `{other}` (expected sphere, torus, or mesh)"
        ))),
    }
}

fn run_train_ldi(args: TrainLdiArgs) -> Result<ExitCode, Error> {
    let config = load_config(&args.config)?;
    let samples = if let Some(spec_text) = args.patches.strip_prefix("synthetic:") {
        let spec = SyntheticSpec::parse(spec_text)?;
        generate_samples(&spec, &config)?
    } else if args.patches == "synthetic" {
        generate_samples(&SyntheticSpec::default(), &config)?
    } else {
        let pairs = load_patch_pairs(Path::new(&args.patches))?;
        samples_from_pairs(&pairs, &config)?
    };
    eprintln!(
        "training indicator on {} samples (seed {})",
        samples.len(),
        config.seed
    );
    let outcome = train_ldi(&samples, &config)?;
    outcome.model.save(&args.out)?;
    println!("final_holdout_mae={}", outcome.holdout_mae);
    eprintln!("checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_fit_field(args: FitFieldArgs) -> Result<ExitCode, Error> {
    let config = load_config(&args.config)?;
    let cloud = read_point_cloud(&args.input, PointFormat::from_path(&args.input))?;
    let ldi = LdiModel::load(&args.ldi)?;
    let (fitted, report, status) = fit_to_cloud(&cloud, &ldi, &config)?;
    fitted.save(&args.out)?;
    let report_path = args
        .report
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", args.out.display())));
    std::fs::write(&report_path, report.to_lines())?;
    eprintln!(
        "checkpoint written to {}, report to {}",
        args.out.display(),
        report_path.display()
    );
    match status {
        FitStatus::Diverged { step } => {
            eprintln!("error: training diverged at step {step}; checkpoint holds the last stable state");
            Ok(ExitCode::from(3))
        }
        FitStatus::EarlyStopped { step } => {
            eprintln!("early stop at step {step}");
            Ok(ExitCode::SUCCESS)
        }
        FitStatus::Completed => Ok(ExitCode::SUCCESS),
    }
}

fn run_upsample(args: UpsampleArgs) -> Result<ExitCode, Error> {
    let mut config = load_config(&args.config)?;
    if let Some(ratio) = args.oversample {
        config.oversample_ratio = ratio;
        config.validate()?;
    }
    let target = match (args.scale, args.count) {
        (Some(r), None) => Target::Scale(r),
        (None, Some(m)) => Target::Count(m),
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --scale or --count is required".to_string(),
            ))
        }
    };
    let cloud = read_point_cloud(&args.input, PointFormat::from_path(&args.input))?;
    let fitted = FittedField::load(&args.field)?;
    let request = UpsampleRequest::from_config(target, &config);
    let m = request.output_count(cloud.len())?;
    if m < cloud.len() {
        eprintln!(
            "warning: target count {m} is below the input count {}; downsampling regime",
            cloud.len()
        );
    }
    let dense = upsample(&cloud, &fitted, &request)?;
    write_point_cloud(&dense, &args.out, PointFormat::from_path(&args.out))?;
    println!("points={}", dense.len());
    eprintln!("output written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_evaluate(args: EvaluateArgs) -> Result<ExitCode, Error> {
    let pred = read_point_cloud(&args.pred, PointFormat::from_path(&args.pred))?;
    let reference = read_point_cloud(&args.reference, PointFormat::from_path(&args.reference))?;
    let surface = match &args.surface {
        Some(text) => Some(parse_surface(text)?),
        None => None,
    };
    let report = MetricsReport::compute(&pred, &reference, surface.as_ref())?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.to_csv_row());
    std::fs::write(&args.out, csv)?;
    print!("{}", report.to_key_values());
    eprintln!("csv written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::TrainLdi(args) => run_train_ldi(args),
        Command::FitField(args) => run_fit_field(args),
        Command::Upsample(args) => run_upsample(args),
        Command::Evaluate(args) => run_evaluate(args),
    };
    match result {
        Ok(code) => code,
        Err(Error::Divergence { step }) => {
            eprintln!("error: training diverged at step {step}");
            ExitCode::from(3)
        }
        Err(Error::InvalidArgument(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
