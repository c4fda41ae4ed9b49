mod record;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ellipse_ml::baseline::{algebraic_error, def_gradient, def_points, extract_edges, DEFAULT_THRESHOLD};
use ellipse_ml::config::{ExperimentKind, ExperimentSpec, SimulateConfig};
use ellipse_ml::experiment::{run_experiment, write_csv};
use ellipse_ml::forward::{expected_image, snr, synthesize, PhotonImage};
use ellipse_ml::io::{
    mask_to_pgm, pgm_to_photon_image, photon_image_to_pgm, read_pgm, read_sidecar, synthetic_metadata,
    write_edges_csv, write_pgm, write_real_image_csv, write_sidecar, write_zbar_csv, ImageMetadata, PgmFormat,
};
use ellipse_ml::optimize::{fit, FitOptions, SeedSource};
use ellipse_ml::uncertainty::{chi2_quantile, confidence_region, max_zbar_on_locus, CovarianceReport, DEFAULT_RESOLUTION};
use ellipse_ml::{par, AlgebraicEllipse, Error, EtaVector, GeometricEllipse};

use record::{BaselineSection, CovarianceSection, FitSection, Record, RegionSection, TruthSection};

#[derive(Parser)]
#[command(name = "ellipse-ml", version, about = "Maximum-likelihood ellipse fitting for photon-limited images")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic image from a scene config.
    Simulate(SimulateArgs),
    /// Maximum-likelihood fit with covariance.
    Fit(FitArgs),
    /// Rasterise the confidence region of a fit record.
    Region(RegionArgs),
    /// Direct least-squares fit on edge data.
    Baseline(BaselineArgs),
    /// Run a seeded multi-trial experiment and write a CSV.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Binary,
}

impl From<Format> for PgmFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Ascii => PgmFormat::Ascii,
            Format::Binary => PgmFormat::Binary,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output PGM; the sidecar goes next to it.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    format: Format,
    /// Also write the noiseless expected image as CSV.
    #[arg(long)]
    expected_csv: Option<PathBuf>,
}

/// Values that override the image metadata.
#[derive(Args, Clone)]
struct ImageArgs {
    /// Image file (PGM).
    image: PathBuf,
    /// Conversion factor C.
    #[arg(long)]
    conversion: Option<u32>,
    /// Quantisation half-width b.
    #[arg(long)]
    half_width: Option<u32>,
    /// Background intensity c.
    #[arg(long)]
    c_background: Option<f64>,
    /// Multiplier from stored grey values to photon counts.
    #[arg(long, default_value_t = 1)]
    photon_gain: u32,
    /// Edge threshold as a fraction of the largest gradient magnitude.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    edge_threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedFrom {
    DefPoints,
    Truth,
    User,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    DefPoints,
    DefGradient,
}

impl BaselineMethod {
    fn name(self) -> &'static str {
        match self {
            BaselineMethod::DefPoints => "def-points",
            BaselineMethod::DefGradient => "def-gradient",
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: ImageArgs,
    #[arg(long, value_enum, default_value = "def-points")]
    seed_from: SeedFrom,
    /// Initial ellipse A,B,H,K,tau for --seed-from user.
    #[arg(long, value_delimiter = ',')]
    init: Option<Vec<f64>>,
    /// Initial blur width; defaults to one pixel pitch.
    #[arg(long)]
    sigma_init: Option<f64>,
    #[arg(long, default_value_t = 1)]
    starts: usize,
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    /// Exit 0 even when the optimiser did not converge.
    #[arg(long)]
    allow_nonconverged: bool,
    /// Also run a direct fit and report it.
    #[arg(long, value_enum)]
    baseline: Option<BaselineMethod>,
    /// Write the confidence-region mask to this PGM.
    #[arg(long)]
    region: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    /// Record destination; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RegionArgs {
    /// Record written by `fit`.
    #[arg(long)]
    record: PathBuf,
    /// Mask PGM.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    /// Also write the z-bar field as CSV.
    #[arg(long)]
    zbar_csv: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    input: ImageArgs,
    #[arg(long, value_enum, default_value = "def-points")]
    method: BaselineMethod,
    /// Write the extracted edge points as CSV.
    #[arg(long)]
    edges_csv: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum Preset {
    SnrSweep,
    QuantisationSweep,
    EccentricitySweep,
    GridSweep,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in sweep.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Output CSV; a `.meta.toml` with the resolved conditions is written next to it.
    #[arg(long, short)]
    output: PathBuf,
}

enum Failure {
    Core(Error),
    Estimation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::Io(_)) => 4,
            Failure::Core(Error::Parse(_) | Error::MissingKey(_) | Error::InvalidInput(_)) => 2,
            Failure::Core(_) | Failure::Estimation(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Estimation(m) => f.write_str(m),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Prefixes I/O errors with the file they concern.
fn at(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| at(path)(Error::Io(e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli.jobs;
    let result = par::with_workers(jobs, move || match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Region(a) => region(a),
        Command::Baseline(a) => baseline(a),
        Command::Experiment(a) => experiment(a, jobs),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let config = SimulateConfig::load(&a.config).map_err(at(&a.config))?;
    let forward = config.to_forward_config()?;
    let out = synthesize(&forward)?;
    let meta = ImageMetadata {
        sigma_psf: Some(forward.sigma_psf),
        c_background: Some(forward.c_background),
        truth: Some(forward.xi),
        ..synthetic_metadata(&out.image, forward.seed, out.snr)
    };
    let pgm = photon_image_to_pgm(&out.image, &meta)?;
    write_pgm(&a.output, &pgm, a.format.into()).map_err(at(&a.output))?;
    write_sidecar(&a.output, &meta)?;
    if let Some(path) = &a.expected_csv {
        write_real_image_csv(path, &out.expected)?;
    }
    println!("wrote {} (SNR={:.4})", a.output.display(), out.snr);
    Ok(())
}

/// Loads an image and merges its metadata: command-line values first, then
/// the sidecar, then the PGM header.
fn load_image(args: &ImageArgs, require_conversion: bool) -> Result<(PhotonImage, ImageMetadata), Failure> {
    let pgm = read_pgm(&args.image).map_err(at(&args.image))?;
    let overrides = ImageMetadata {
        conversion: args.conversion,
        half_width: args.half_width,
        c_background: args.c_background,
        ..ImageMetadata::default()
    };
    let sidecar = read_sidecar(&args.image)?.unwrap_or_default();
    let header = ImageMetadata::from_comments(&pgm.comment_fields())?;
    let meta = overrides.or(sidecar).or(header);
    let conversion = match meta.conversion {
        Some(c) => c,
        None if !require_conversion => 1,
        None => return Err(Error::MissingKey("C".into()).into()),
    };
    let image = pgm_to_photon_image(&pgm, conversion, meta.half_width.unwrap_or(0), args.photon_gain)?;
    Ok((image, meta))
}

fn emit(record: &Record, output: Option<&Path>) -> CmdResult {
    let text = toml::to_string(record).map_err(|e| Error::Parse(e.to_string()))?;
    match output {
        Some(p) => fs::write(p, text).map_err(io_at(p))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn direct_fit(image: &PhotonImage, method: BaselineMethod, threshold: f64) -> ellipse_ml::Result<(AlgebraicEllipse, usize)> {
    let edges = extract_edges(image, threshold)?;
    let theta = match method {
        BaselineMethod::DefPoints => def_points(&edges)?,
        BaselineMethod::DefGradient => def_gradient(image, threshold)?,
    };
    Ok((theta, edges.len()))
}

fn baseline_section(
    image: &PhotonImage,
    method: BaselineMethod,
    threshold: f64,
    truth: Option<&GeometricEllipse>,
) -> ellipse_ml::Result<BaselineSection> {
    let (theta, edge_points) = direct_fit(image, method, threshold)?;
    let ellipse = theta.to_geometric()?;
    let algebraic_error = truth.and_then(|t| algebraic_error(&theta.as_vector(), &t.to_algebraic().as_vector()).ok());
    Ok(BaselineSection {
        method: method.name().into(),
        ellipse,
        theta: theta.normalized().coeffs().to_vec(),
        edge_points,
        algebraic_error,
    })
}

fn fit_cmd(a: FitArgs) -> CmdResult {
    let (image, meta) = load_image(&a.input, true)?;
    let c_background = meta.c_background.unwrap_or(0.0);
    let options = FitOptions {
        max_iterations: a.max_iterations,
        starts: a.starts,
        seed_source: match a.seed_from {
            SeedFrom::DefPoints => SeedSource::DefPoints,
            SeedFrom::Truth => SeedSource::Truth,
            SeedFrom::User => SeedSource::User,
        },
        ..FitOptions::default()
    };
    options.validate()?;

    let (seed_name, initial) = match a.seed_from {
        SeedFrom::DefPoints => {
            let (theta, _) = direct_fit(&image, BaselineMethod::DefPoints, a.input.edge_threshold)
                .map_err(|e| Failure::Estimation(format!("def-points seed failed: {e}")))?;
            ("def-points", theta.to_geometric().map_err(|e| Failure::Estimation(format!("def-points seed failed: {e}")))?)
        }
        SeedFrom::Truth => ("truth", meta.truth.ok_or_else(|| Error::MissingKey("truth".into()))?),
        SeedFrom::User => {
            let v = a.init.as_ref().ok_or_else(|| Error::MissingKey("--init".into()))?;
            if v.len() != 5 {
                return Err(Error::InvalidInput("--init takes five values A,B,H,K,tau".into()).into());
            }
            ("user", GeometricEllipse::from_array([v[0], v[1], v[2], v[3], v[4]])?)
        }
    };
    let sigma0 = match (a.sigma_init, a.seed_from) {
        (Some(s), _) => s,
        (None, SeedFrom::Truth) => meta.sigma_psf.unwrap_or(image.grid.pixel_width()),
        (None, _) => image.grid.pixel_width(),
    };
    if !(sigma0.is_finite() && sigma0 >= 0.0) {
        return Err(Error::InvalidInput("initial sigma must be non-negative".into()).into());
    }
    let init = EtaVector::from_geometric(&initial, sigma0, options.epsilon_sigma);
    let result = fit(&image, c_background, &init, &options)?;

    let mut record = Record {
        image: a.input.image.display().to_string(),
        fit: Some(FitSection {
            seed_from: seed_name.into(),
            converged: result.converged,
            iterations: result.iterations,
            nll: result.nll,
            initial_nll: result.initial_nll,
            sigma_psf: result.sigma_psf_hat,
            ellipse: result.xi_hat,
            initial,
        }),
        ..Record::default()
    };

    let covariance = CovarianceReport::from_fit(&result);
    let threshold = chi2_quantile(5, a.alpha)?;
    if let Ok(cov) = &covariance {
        record.covariance = Some(CovarianceSection::from_report(cov));
        if let Some(path) = &a.region {
            let raster = confidence_region(&cov.theta_hat, &cov.cov_theta, a.alpha, a.resolution)?;
            write_pgm(path, &mask_to_pgm(&raster.mask, raster.resolution, raster.resolution), PgmFormat::Binary)?;
            record.region = Some(RegionSection {
                path: path.display().to_string(),
                alpha: a.alpha,
                threshold,
                resolution: a.resolution,
                covered_fraction: raster.covered_fraction(),
            });
        }
    }
    if let Some(truth) = meta.truth {
        let zmax = covariance
            .as_ref()
            .ok()
            .map(|c| max_zbar_on_locus(&truth, &c.theta_hat.as_vector(), &c.cov_theta, 720));
        record.truth = Some(TruthSection {
            ellipse: truth,
            algebraic_error: algebraic_error(&result.xi_hat.to_algebraic().as_vector(), &truth.to_algebraic().as_vector()).ok(),
            center_error: Some((result.xi_hat.center_x - truth.center_x).hypot(result.xi_hat.center_y - truth.center_y)),
            max_zbar_on_locus: zmax,
            locus_covered: zmax.map(|z| z <= threshold),
        });
    }
    let mut baseline_failure = None;
    if let Some(method) = a.baseline {
        match baseline_section(&image, method, a.input.edge_threshold, meta.truth.as_ref()) {
            Ok(b) => record.baseline = Some(b),
            Err(e) => baseline_failure = Some(e),
        }
    }
    emit(&record, a.output.as_deref())?;

    if let Err(e) = covariance {
        return Err(Failure::Estimation(format!("covariance unavailable: {e}")));
    }
    if let Some(e) = baseline_failure {
        return Err(Failure::Estimation(format!("baseline failed: {e}")));
    }
    if !result.converged && !a.allow_nonconverged {
        return Err(Failure::Estimation(format!(
            "optimiser did not converge after {} iterations",
            result.iterations
        )));
    }
    Ok(())
}

fn region(a: RegionArgs) -> CmdResult {
    let text = fs::read_to_string(&a.record).map_err(io_at(&a.record))?;
    let record: Record = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let cov = record.covariance.ok_or_else(|| Error::MissingKey("covariance".into()))?;
    if cov.theta.len() != 6 || cov.cov_theta.len() != 6 || cov.cov_theta.iter().any(|r| r.len() != 6) {
        return Err(Error::Parse("covariance must hold 6 coefficients and a 6x6 matrix".into()).into());
    }
    let theta = AlgebraicEllipse::new(std::array::from_fn(|i| cov.theta[i]))?;
    let cov_theta = ellipse_ml::geometry::Matrix6::from_fn(|i, j| cov.cov_theta[i][j]);
    let raster = confidence_region(&theta, &cov_theta, a.alpha, a.resolution)?;
    write_pgm(&a.output, &mask_to_pgm(&raster.mask, raster.resolution, raster.resolution), PgmFormat::Binary)?;
    if let Some(path) = &a.zbar_csv {
        write_zbar_csv(path, &raster)?;
    }
    println!(
        "wrote {} (threshold={:.4}, covered_fraction={:.6})",
        a.output.display(),
        raster.threshold,
        raster.covered_fraction()
    );
    Ok(())
}

fn baseline(a: BaselineArgs) -> CmdResult {
    let (image, meta) = load_image(&a.input, false)?;
    if let Some(path) = &a.edges_csv {
        let edges = extract_edges(&image, a.input.edge_threshold)?;
        let mut out = BufWriter::new(fs::File::create(path)?);
        write_edges_csv(&mut out, &edges)?;
        out.flush()?;
    }
    let section = baseline_section(&image, a.method, a.input.edge_threshold, meta.truth.as_ref())
        .map_err(|e| Failure::Estimation(format!("{} failed: {e}", a.method.name())))?;
    let record = Record {
        image: a.input.image.display().to_string(),
        baseline: Some(section),
        truth: meta.truth.map(|t| TruthSection {
            ellipse: t,
            algebraic_error: None,
            center_error: None,
            max_zbar_on_locus: None,
            locus_covered: None,
        }),
        ..Record::default()
    };
    emit(&record, a.output.as_deref())
}

#[derive(serde::Serialize)]
struct ConditionMeta {
    label: String,
    truth: GeometricEllipse,
    rows: usize,
    cols: usize,
    sigma_psf: f64,
    c_background: f64,
    #[serde(rename = "C")]
    conversion: u32,
    #[serde(rename = "b")]
    half_width: u32,
    snr: f64,
}

#[derive(serde::Serialize)]
struct ExperimentMeta {
    spec: ExperimentSpec,
    condition: Vec<ConditionMeta>,
}

fn experiment(a: ExperimentArgs, jobs: Option<usize>) -> CmdResult {
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => ExperimentSpec::load(path).map_err(at(path))?,
        (None, Some(p)) => ExperimentSpec::preset(match p {
            Preset::SnrSweep => ExperimentKind::SnrSweep,
            Preset::QuantisationSweep => ExperimentKind::QuantisationSweep,
            Preset::EccentricitySweep => ExperimentKind::EccentricitySweep,
            Preset::GridSweep => ExperimentKind::GridSweep,
        }),
        (None, None) => unreachable!("clap requires --spec or --preset"),
    };
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(s) = a.master_seed {
        spec.master_seed = s;
    }

    let conditions = spec.conditions()?;
    let meta = ExperimentMeta {
        spec: spec.clone(),
        condition: conditions
            .iter()
            .map(|c| ConditionMeta {
                label: c.label.clone(),
                truth: c.xi,
                rows: c.grid.rows(),
                cols: c.grid.cols(),
                sigma_psf: c.sigma_psf,
                c_background: c.c_background,
                conversion: c.conversion,
                half_width: c.half_width,
                snr: snr(c.conversion, &expected_image(&c.xi, c.sigma_psf, c.c_background, c.grid)),
            })
            .collect(),
    };
    let meta_text = toml::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(a.output.with_extension("meta.toml"), meta_text)?;

    let mut out = BufWriter::new(fs::File::create(&a.output).map_err(io_at(&a.output))?);
    write_csv(&mut out, &[], true)?;
    out.flush()?;
    let rows = run_experiment(&spec, jobs, |batch| {
        write_csv(&mut out, batch, false)?;
        out.flush()?;
        Ok(())
    })?;
    let failed = rows.iter().filter(|r| r.status.starts_with("error")).count();
    eprintln!("wrote {} rows to {} ({failed} failed)", rows.len(), a.output.display());
    Ok(())
}
