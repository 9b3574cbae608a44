//! Command-line experiments over the `mixup_geometry` library.
//!
//! Every command is deterministic given its flags and seeds, and every output
//! file is written atomically (temporary file in the target directory, then rename).

pub mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixup_geometry::calibration::{ece, model_confidences, DEFAULT_BINS};
use mixup_geometry::etf::{build_simplex_etf, etf_deviation_metrics};
use mixup_geometry::io;
use mixup_geometry::mixup::{sample_lambda, BetaSpec, MixKind};
use mixup_geometry::projection::{build_projection, feature_mean, project, ProjectionOperator};
use mixup_geometry::theory::{
    assemble_different_class, assemble_same_class, generate_configuration, solve_different_class, solve_same_class,
    FeatureRecord, TheoryParams,
};
use mixup_geometry::trainer::{
    extract_activations, layer_trajectory, make_synthetic, mixup_grid, train, Dataset, TrainedModel,
};
use mixup_geometry::ufm::{minimize_per_sample, per_sample_grad, total_objective, MinimizeOptions, UfmConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "mixgeo", version, about = "Feature geometry of mixup: closed forms, oracles and a small trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal features for a class subset over sampled mixup coefficients.
    TheorySolve(TheorySolveArgs),
    /// Check the closed form against the gradient and a numerical minimizer over a grid.
    OracleCheck(OracleCheckArgs),
    /// Train on synthetic blobs and write the full experiment to a directory.
    Train(TrainArgs),
    /// Penultimate activations of mixed samples from a trained model.
    Extract(ExtractArgs),
    /// Project features onto the 2-D simplex view of three classes.
    Project(ProjectArgs),
    /// Expected calibration error of a predictions file.
    Ece(EceArgs),
    /// Equinorm and equiangularity deviation of a classifier.
    EtfMetrics(EtfMetricsArgs),
    /// Layer-by-layer projected path of one mixed sample.
    Trajectory(TrajectoryArgs),
}

#[derive(Debug, Args)]
pub struct TheorySolveArgs {
    /// Number of classes.
    #[arg(long = "C", default_value_t = 10)]
    pub num_classes: usize,
    /// ETF multiplier (row norm).
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub m: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub lambda_h: f64,
    /// Use the first this many classes.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub classes: u64,
    /// Number of mixup coefficients drawn from Beta(alpha, alpha).
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the random orthonormal basis behind the ETF.
    #[arg(long, default_value_t = 0)]
    pub etf_seed: u64,
    /// Apply the amplification perturbation to different-class features.
    #[arg(long)]
    pub amplify: bool,
    /// Directory for features.csv, closed_form.json, classifier.csv and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleCheckArgs {
    #[arg(long = "C", value_delimiter = ',', num_args = 0.., default_values_t = [3usize, 5, 10])]
    pub num_classes: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [1.0, 3.0])]
    pub m: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [1e-6, 1e-2])]
    pub lambda_h: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 0..,
        default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    )]
    pub lambdas: Vec<f64>,
    /// Feature dimension is C plus this.
    #[arg(long, default_value_t = 2)]
    pub extra_dim: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub grad_tol: f64,
    /// Relative distance allowed between closed form and minimizer.
    #[arg(long, default_value_t = 1e-4)]
    pub rel_tol: f64,
    /// Seed of the random initial point given to the minimizer.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true, allow_negative_numbers = true)]
    pub perturb: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset CSV written by `train`.
    #[arg(long)]
    pub data: PathBuf,
    /// Random source pairs per mixup kind.
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
    pub lambdas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = KindFilter::All)]
    pub kind: KindFilter,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindFilter {
    All,
    Same,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Center {
    /// Subtract the mean of the projected records.
    Mean,
    /// No centering, for theory configurations.
    Zero,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// FeatureRecord CSV.
    #[arg(long)]
    pub features: PathBuf,
    /// Classifier CSV, one row per class.
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
    pub classes: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Center::Mean)]
    pub center: Center,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EceArgs {
    /// CSV with header confidence,predicted,label.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EtfMetricsArgs {
    #[arg(long)]
    pub classifier: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset indices of the two sources.
    #[arg(long, value_delimiter = ',', required = true)]
    pub pair: Vec<usize>,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
    pub classes: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Bad flag combinations the argument parser cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// A check that ran to completion but did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Parses `args`, runs the command and maps errors to exit codes:
/// 2 for usage errors, 1 for everything else.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::TheorySolve(args) => theory_solve(&args, out).map(|_| ()),
        Command::OracleCheck(args) => oracle_check(&args, out).map(|_| ()),
        Command::Train(args) => train_experiment(&args, out).map(|_| ()),
        Command::Extract(args) => extract(&args, out),
        Command::Project(args) => project_features(&args, out),
        Command::Ece(args) => ece_report(&args, out).map(|_| ()),
        Command::EtfMetrics(args) => etf_metrics(&args, out),
        Command::Trajectory(args) => trajectory(&args, out),
    }
}

/// Writes through `fill` into a temporary file next to `path`, then renames it into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temporary file in {}", dir.display()))?;
    {
        let mut buf = BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_with<T>(path: &Path, parse: impl FnOnce(BufReader<File>) -> mixup_geometry::Result<T>) -> Result<T> {
    parse(open(path)?).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheorySummary {
    pub num_classes: usize,
    pub multiplier: f64,
    pub feature_dim: usize,
    pub lambda_h: f64,
    pub classes: Vec<usize>,
    pub samples: usize,
    pub alpha: f64,
    pub seed: u64,
    pub etf_seed: u64,
    pub amplified: bool,
    pub records: usize,
    /// Mean per-sample objective of the written configuration.
    pub mean_loss: f64,
    /// The same coefficient samples without amplification, when amplified.
    pub mean_loss_unamplified: Option<f64>,
}

/// `samples` seeded draws from `Beta(alpha, alpha)`.
pub fn lambda_samples(alpha: f64, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = BetaSpec::new(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples).map(|_| sample_lambda(&spec, &mut rng)).collect())
}

pub fn theory_solve(args: &TheorySolveArgs, out: &mut dyn Write) -> Result<TheorySummary> {
    let classes = args.classes as usize;
    if classes > args.num_classes {
        return Err(usage(format!("--classes {classes} exceeds --C {}", args.num_classes)));
    }
    let params =
        TheoryParams::new(args.num_classes, args.m, args.lambda_h, args.d).map_err(|e| usage(e.to_string()))?;
    let etf = build_simplex_etf(args.num_classes, args.d, args.m, args.etf_seed)?;
    let lambdas = lambda_samples(args.alpha, args.samples as usize, args.seed).map_err(|e| usage(e.to_string()))?;
    let subset: Vec<usize> = (0..classes).collect();
    let cfg = UfmConfig::new(args.lambda_h, 0.0)?;

    let records = generate_configuration(&params, &etf, &subset, &lambdas, args.amplify)?;
    let mean_loss = total_objective(etf.rows(), &records, &cfg)?.mean_per_sample;
    let mean_loss_unamplified = if args.amplify {
        let plain = generate_configuration(&params, &etf, &subset, &lambdas, false)?;
        Some(total_objective(etf.rows(), &plain, &cfg)?.mean_per_sample)
    } else {
        None
    };
    let summary = TheorySummary {
        num_classes: args.num_classes,
        multiplier: args.m,
        feature_dim: args.d,
        lambda_h: args.lambda_h,
        classes: subset,
        samples: lambdas.len(),
        alpha: args.alpha,
        seed: args.seed,
        etf_seed: args.etf_seed,
        amplified: args.amplify,
        records: records.len(),
        mean_loss,
        mean_loss_unamplified,
    };
    if let Some(dir) = &args.out {
        write_atomic(&dir.join("features.csv"), |w| Ok(io::write_features_csv(w, &records)?))?;
        write_atomic(&dir.join("closed_form.json"), |w| Ok(io::write_closed_form_json(w, &records)?))?;
        write_atomic(&dir.join("classifier.csv"), |w| Ok(io::write_classifier_csv(w, etf.rows())?))?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    writeln!(out, "{mean_loss:.6}")?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleCase {
    pub num_classes: usize,
    pub multiplier: f64,
    pub lambda_h: f64,
    pub lambda: f64,
    pub kind: MixKind,
    pub grad_norm: f64,
    /// Largest relative distance between the closed form and a minimizer run.
    pub rel_error: f64,
    /// Relative distance between minimizer runs from the two initial points.
    pub init_spread: f64,
    pub passed: bool,
}

pub fn oracle_check(args: &OracleCheckArgs, out: &mut dyn Write) -> Result<Vec<OracleCase>> {
    if args.num_classes.is_empty() || args.m.is_empty() || args.lambda_h.is_empty() || args.lambdas.is_empty() {
        return Err(usage("oracle grid is empty"));
    }
    let opts = MinimizeOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut cases = Vec::new();
    writeln!(
        out,
        "{:>3} {:>5} {:>8} {:>5} {:>15} {:>10} {:>10} {:>10}  status",
        "C", "m", "lambda_h", "lam", "kind", "grad", "rel_err", "spread"
    )?;
    for &c in &args.num_classes {
        for &m in &args.m {
            for &lambda_h in &args.lambda_h {
                let d = c + args.extra_dim;
                let params = TheoryParams::new(c, m, lambda_h, d).map_err(|e| usage(e.to_string()))?;
                let etf = build_simplex_etf(c, d, m, args.seed)?;
                let cfg = UfmConfig::new(lambda_h, 0.0)?;
                let same = solve_same_class(&params)?;
                for &lambda in &args.lambdas {
                    if !(0.0..=1.0).contains(&lambda) {
                        return Err(usage(format!("lambda {lambda} outside [0, 1]")));
                    }
                    let records = [
                        assemble_same_class(&same, &etf, 0, lambda)?,
                        assemble_different_class(&solve_different_class(&params, lambda)?, &etf, 0, 1)?,
                    ];
                    for mut rec in records {
                        if let (Some(eps), true) = (args.perturb, cases.is_empty()) {
                            rec.h[0] += eps;
                        }
                        let (i, ip) = (rec.class_i, rec.class_ip);
                        let grad_norm = per_sample_grad(etf.rows(), &rec.h, i, ip, lambda, &cfg).norm();
                        let random_init = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0) * m.abs());
                        let from_zero =
                            minimize_per_sample(etf.rows(), i, ip, lambda, &cfg, &DVector::zeros(d), &opts)?;
                        let from_random = minimize_per_sample(etf.rows(), i, ip, lambda, &cfg, &random_init, &opts)?;
                        let scale = rec.h.norm().max(f64::MIN_POSITIVE);
                        let rel_error = (&from_zero - &rec.h).norm().max((&from_random - &rec.h).norm()) / scale;
                        let init_spread = (&from_zero - &from_random).norm() / from_zero.norm().max(f64::MIN_POSITIVE);
                        let passed =
                            grad_norm <= args.grad_tol && rel_error <= args.rel_tol && init_spread <= args.rel_tol;
                        writeln!(
                            out,
                            "{c:>3} {m:>5} {lambda_h:>8.0e} {lambda:>5.2} {:>15} {grad_norm:>10.2e} {rel_error:>10.2e} {init_spread:>10.2e}  {}",
                            rec.kind.as_str(),
                            if passed { "ok" } else { "FAIL" }
                        )?;
                        cases.push(OracleCase {
                            num_classes: c,
                            multiplier: m,
                            lambda_h,
                            lambda,
                            kind: rec.kind,
                            grad_norm,
                            rel_error,
                            init_spread,
                            passed,
                        });
                    }
                }
            }
        }
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        let worst = cases
            .iter()
            .max_by(|a, b| (a.grad_norm / args.grad_tol).total_cmp(&(b.grad_norm / args.grad_tol)))
            .expect("nonempty grid");
        return Err(CheckFailed(format!(
            "{failed} of {} cases failed; worst gradient norm {:.3e} at C={} m={} lambda_h={} lambda={} ({})",
            cases.len(),
            worst.grad_norm,
            worst.num_classes,
            worst.multiplier,
            worst.lambda_h,
            worst.lambda,
            worst.kind.as_str()
        ))
        .into());
    }
    writeln!(out, "all {} cases within tolerance", cases.len())?;
    Ok(cases)
}

/// `pairs` random source pairs of each requested kind, same-class first.
pub fn draw_pairs(data: &Dataset, pairs: usize, kind: KindFilter, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n = data.len();
    if n < 2 {
        bail!("need at least two samples to form pairs");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds: &[MixKind] = match kind {
        KindFilter::All => &[MixKind::SameClass, MixKind::DifferentClass],
        KindFilter::Same => &[MixKind::SameClass],
        KindFilter::Different => &[MixKind::DifferentClass],
    };
    let mut out = Vec::with_capacity(pairs * kinds.len());
    for &want in kinds {
        let possible = match want {
            MixKind::SameClass => (0..data.num_classes).any(|c| data.labels.iter().filter(|&&l| l == c).count() >= 2),
            MixKind::DifferentClass => data.labels.iter().any(|&l| l != data.labels[0]),
        };
        if !possible && pairs > 0 {
            bail!("dataset has no {} pairs", want.as_str());
        }
        let mut found = 0;
        while found < pairs {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b && MixKind::from_labels(data.labels[a], data.labels[b]) == want {
                out.push((a, b));
                found += 1;
            }
        }
    }
    Ok(out)
}

pub fn extract_features(
    model: &TrainedModel,
    data: &Dataset,
    pairs: &[(usize, usize)],
    lambdas: &[f64],
) -> Result<Vec<FeatureRecord>> {
    let samples = mixup_grid(data, pairs, lambdas)?;
    Ok(extract_activations(model, &samples)?)
}

fn read_model(path: &Path) -> Result<TrainedModel> {
    read_with(path, io::read_model_json)
}

fn read_dataset(path: &Path, model: &TrainedModel) -> Result<Dataset> {
    let data = read_with(path, |r| io::read_dataset_csv(r, model.num_classes()))?;
    if data.input_dim() != model.input_dim() {
        bail!("dataset has {} inputs, model expects {}", data.input_dim(), model.input_dim());
    }
    Ok(data)
}

pub fn extract(args: &ExtractArgs, out: &mut dyn Write) -> Result<()> {
    if args.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(usage("--lambdas must lie in [0, 1]"));
    }
    let model = read_model(&args.model)?;
    let data = read_dataset(&args.data, &model)?;
    let pairs = draw_pairs(&data, args.pairs, args.kind, args.seed)?;
    let records = extract_features(&model, &data, &pairs, &args.lambdas)?;
    write_atomic(&args.out, |w| Ok(io::write_features_csv(w, &records)?))?;
    writeln!(out, "{} records", records.len())?;
    Ok(())
}

fn three_classes(classes: &[usize]) -> Result<[usize; 3]> {
    match classes {
        &[a, b, c] if a != b && b != c && a != c => Ok([a, b, c]),
        _ => Err(usage(format!("need three distinct classes, got {classes:?}"))),
    }
}

fn classifier_rows(w: &DMatrix<f64>, classes: [usize; 3]) -> Result<DMatrix<f64>> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= w.nrows()) {
        bail!("class {bad} out of range for a classifier with {} rows", w.nrows());
    }
    Ok(DMatrix::from_fn(3, w.ncols(), |r, k| w[(classes[r], k)]))
}

/// Projection for `classes`, centered on the records restricted to those classes.
pub fn projection_for(
    w: &DMatrix<f64>,
    classes: [usize; 3],
    records: &[FeatureRecord],
    center: Center,
) -> Result<(ProjectionOperator, Vec<FeatureRecord>)> {
    let subset: Vec<FeatureRecord> =
        records.iter().filter(|r| classes.contains(&r.class_i) && classes.contains(&r.class_ip)).cloned().collect();
    if subset.is_empty() {
        bail!("no records involve only classes {classes:?}");
    }
    let center = match center {
        Center::Mean => feature_mean(&subset)?,
        Center::Zero => DVector::zeros(w.ncols()),
    };
    Ok((build_projection(classes, &classifier_rows(w, classes)?, &center)?, subset))
}

pub fn project_features(args: &ProjectArgs, out: &mut dyn Write) -> Result<()> {
    let classes = three_classes(&args.classes)?;
    let records = read_with(&args.features, io::read_features_csv)?;
    let w = read_with(&args.classifier, io::read_classifier_csv)?;
    let (op, subset) = projection_for(&w, classes, &records, args.center)?;
    let points = project(&op, &subset)?;
    write_atomic(&args.out, |wtr| Ok(io::write_points_csv(wtr, &points)?))?;
    writeln!(out, "{} points", points.len())?;
    Ok(())
}

pub fn ece_report(args: &EceArgs, out: &mut dyn Write) -> Result<f64> {
    let preds = read_with(&args.predictions, io::read_predictions_csv)?;
    let report = ece(&preds.confidences, &preds.predicted, &preds.labels, args.bins as usize)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    writeln!(out, "ece {:.6}", report.ece)?;
    Ok(report.ece)
}

pub fn etf_metrics(args: &EtfMetricsArgs, out: &mut dyn Write) -> Result<()> {
    let w = read_with(&args.classifier, io::read_classifier_csv)?;
    let metrics = etf_deviation_metrics(&w)?;
    writeln!(out, "norm_cv {:.6}", metrics.norm_cv)?;
    writeln!(out, "cosine_std {:.6}", metrics.cosine_std)?;
    Ok(())
}

/// Clean penultimate activations of every training point, tagged as `λ = 1` mixes with themselves.
pub fn clean_features(model: &TrainedModel, data: &Dataset) -> Result<Vec<FeatureRecord>> {
    let pairs: Vec<(usize, usize)> = (0..data.len()).map(|k| (k, k)).collect();
    extract_features(model, data, &pairs, &[1.0])
}

pub fn trajectory(args: &TrajectoryArgs, out: &mut dyn Write) -> Result<()> {
    let classes = three_classes(&args.classes)?;
    if !(0.0..=1.0).contains(&args.lambda) {
        return Err(usage("--lambda must lie in [0, 1]"));
    }
    let &[a, b] = args.pair.as_slice() else {
        return Err(usage(format!("--pair takes two indices, got {:?}", args.pair)));
    };
    let model = read_model(&args.model)?;
    let data = read_dataset(&args.data, &model)?;
    let samples = mixup_grid(&data, &[(a, b)], &[args.lambda])?;
    let (op, _) = projection_for(&model.classifier.weight, classes, &clean_features(&model, &data)?, Center::Mean)?;
    let path = layer_trajectory(&model, &samples[0])?;
    let points = path.iter().map(|h| op.project_vector(h)).collect::<mixup_geometry::Result<Vec<_>>>()?;
    write_atomic(&args.out, |w| {
        writeln!(w, "layer,px,py")?;
        for (layer, p) in points.iter().enumerate() {
            writeln!(w, "{},{},{}", layer + 1, p.x, p.y)?;
        }
        Ok(())
    })?;
    writeln!(out, "{} layers", points.len())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: f64,
    pub ece: f64,
    pub norm_cv: f64,
    pub cosine_std: f64,
    pub feature_records: usize,
}

pub fn train_experiment(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| usage(format!("{}: {e:#}", args.config.display())))?;
    let data = make_synthetic(&cfg.data.spec()?)?;
    let model = train(&data, &cfg.train)?;
    let dir = &args.out;

    write_atomic(&dir.join("model.json"), |w| Ok(io::write_model_json(w, &model)?))?;
    write_atomic(&dir.join("dataset.csv"), |w| Ok(io::write_dataset_csv(w, &data)?))?;
    write_atomic(&dir.join("classifier.csv"), |w| Ok(io::write_classifier_csv(w, &model.classifier.weight)?))?;
    write_atomic(&dir.join("history.csv"), |w| {
        writeln!(w, "epoch,loss,accuracy,norm_cv,cosine_std")?;
        for h in &model.history {
            writeln!(w, "{},{},{},{},{}", h.epoch, h.loss, h.accuracy, h.classifier.norm_cv, h.classifier.cosine_std)?;
        }
        Ok(())
    })?;

    let (confidences, predicted, labels) = model_confidences(&model, &data.inputs, &data.labels)?;
    let report = ece(&confidences, &predicted, &labels, DEFAULT_BINS)?;
    let preds = io::Predictions { confidences, predicted, labels };
    write_atomic(&dir.join("predictions.csv"), |w| Ok(io::write_predictions_csv(w, &preds)?))?;
    write_json(&dir.join("calibration.json"), &report)?;

    let pairs = draw_pairs(&data, cfg.extract.pairs, KindFilter::All, cfg.extract.seed)?;
    let records = extract_features(&model, &data, &pairs, &cfg.extract.lambdas)?;
    write_atomic(&dir.join("features.csv"), |w| Ok(io::write_features_csv(w, &records)?))?;
    if !records.is_empty() {
        let (op, subset) = projection_for(&model.classifier.weight, cfg.projection.classes, &records, Center::Mean)?;
        let points = project(&op, &subset)?;
        write_atomic(&dir.join("points.csv"), |w| Ok(io::write_points_csv(w, &points)?))?;
    }

    let metrics = etf_deviation_metrics(&model.classifier.weight)?;
    let summary = TrainSummary {
        epochs: model.history.len(),
        final_loss: model.history.last().map(|h| h.loss),
        train_accuracy: model.accuracy(&data)?,
        ece: report.ece,
        norm_cv: metrics.norm_cv,
        cosine_std: metrics.cosine_std,
        feature_records: records.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    writeln!(out, "train accuracy {:.4}", summary.train_accuracy)?;
    writeln!(out, "ece {:.6}", summary.ece)?;
    writeln!(out, "norm_cv {:.6} cosine_std {:.6}", summary.norm_cv, summary.cosine_std)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_with_defaults() {
        let cli =
            Cli::try_parse_from(["mixgeo", "theory-solve", "--C", "5", "--lambda-h", "1e-3", "--amplify"]).unwrap();
        let Command::TheorySolve(args) = cli.command else { panic!("wrong command") };
        assert_eq!(args.num_classes, 5);
        assert_eq!(args.samples, 5000);
        assert!(args.amplify);
    }

    #[test]
    fn zero_samples_is_a_usage_error() {
        let err = Cli::try_parse_from(["mixgeo", "theory-solve", "--samples", "0"]).unwrap_err();
        assert!(err.use_stderr());
    }

    #[test]
    fn too_many_classes_is_a_usage_error() {
        let cli =
            Cli::try_parse_from(["mixgeo", "theory-solve", "--C", "3", "--classes", "4", "--samples", "2"]).unwrap();
        let Command::TheorySolve(args) = cli.command else { panic!("wrong command") };
        let err = theory_solve(&args, &mut Vec::new()).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn empty_oracle_grid_is_a_usage_error() {
        let cli = Cli::try_parse_from(["mixgeo", "oracle-check", "--lambdas"]).unwrap();
        let Command::OracleCheck(args) = cli.command else { panic!("wrong command") };
        assert!(args.lambdas.is_empty());
        let err = oracle_check(&args, &mut Vec::new()).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn small_oracle_grid_passes_and_perturbation_fails() {
        let parse = |extra: &[&str]| {
            let mut argv =
                vec!["mixgeo", "oracle-check", "--C", "3", "--m", "1", "--lambda-h", "1e-2", "--lambdas", "0.3,0.5"];
            argv.extend_from_slice(extra);
            let Command::OracleCheck(args) = Cli::try_parse_from(argv).unwrap().command else {
                panic!("wrong command")
            };
            args
        };
        let cases = oracle_check(&parse(&[]), &mut Vec::new()).unwrap();
        assert_eq!(cases.len(), 4);
        let err = oracle_check(&parse(&["--perturb", "1e-3"]), &mut Vec::new()).unwrap_err();
        assert!(err.downcast_ref::<CheckFailed>().is_some());
    }

    #[test]
    fn pairs_have_requested_kind() {
        let data = Dataset {
            inputs: (0..6).map(|k| vec![k as f64]).collect(),
            labels: vec![0, 0, 1, 1, 2, 2],
            num_classes: 3,
        };
        let same = draw_pairs(&data, 5, KindFilter::Same, 1).unwrap();
        assert!(same.iter().all(|&(a, b)| a != b && data.labels[a] == data.labels[b]));
        let diff = draw_pairs(&data, 5, KindFilter::Different, 1).unwrap();
        assert!(diff.iter().all(|&(a, b)| data.labels[a] != data.labels[b]));
        assert_eq!(draw_pairs(&data, 5, KindFilter::All, 1).unwrap().len(), 10);
    }
}
