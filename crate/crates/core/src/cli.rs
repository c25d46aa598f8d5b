//! Command-line driver: `fit`, `segment`, `compare`, `synth`, and `replay`.
//!
//! Every command resolves its flags into a [`Job`] with all defaults filled in
//! and writes a `manifest.json` next to its outputs. `replay` re-executes the
//! job stored in a manifest and so reproduces the outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::abc::{run_abc, AbcConfig, AbcError, Bounds, RunTrace};
use crate::em::{em_fit, log_likelihood, EmConfig, EmError};
use crate::histogram::{build_histogram, load_grayscale_image, GrayImage, Histogram, HistogramError};
use crate::mixture::{decode_candidate, MixtureError, MixtureModel, ModelReport, ObjectiveSpec};
use crate::pgm::{self, PgmFormat};
use crate::synth::{synth_histogram, Noise, SynthError, SynthSpec};
use crate::thresholds::{compute_thresholds, segment, ThresholdError, ThresholdSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Optimizer(#[from] AbcError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Model(#[from] MixtureError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl CliError {
    /// 0 success, 1 usage, 2 input, 3 infeasible threshold.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Threshold(_) => 3,
            CliError::Optimizer(AbcError::Config(_)) => 1,
            CliError::Synth(_) => 2,
            _ => 2,
        }
    }
}

fn input_err(path: &Path, reason: impl ToString) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read(path)?).map_err(|e| input_err(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Box for each slot of a class, applied to every class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotBounds {
    #[serde(default = "SlotBounds::default_weight")]
    pub weight: (f64, f64),
    #[serde(default = "SlotBounds::default_stddev")]
    pub stddev: (f64, f64),
    #[serde(default = "SlotBounds::default_mean")]
    pub mean: (f64, f64),
}

impl SlotBounds {
    fn default_weight() -> (f64, f64) {
        (0.0, 1.0)
    }
    fn default_stddev() -> (f64, f64) {
        (0.5, 80.0)
    }
    fn default_mean() -> (f64, f64) {
        (0.0, 255.0)
    }

    /// Bounds in candidate order `[P, sigma, mu]` repeated `k` times.
    pub fn for_classes(&self, k: usize) -> Result<Bounds, AbcError> {
        if self.stddev.0 <= 0.0 {
            return Err(AbcError::Config("stddev lower bound must be positive".into()));
        }
        let pairs: Vec<(f64, f64)> = (0..k)
            .flat_map(|_| [self.weight, self.stddev, self.mean])
            .collect();
        Bounds::new(&pairs)
    }
}

impl Default for SlotBounds {
    fn default() -> Self {
        Self {
            weight: Self::default_weight(),
            stddev: Self::default_stddev(),
            mean: Self::default_mean(),
        }
    }
}

/// Optimizer settings with every default materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub k: usize,
    pub omega: f64,
    pub abc: AbcConfig,
    pub bounds: SlotBounds,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            k: 3,
            omega: 1.0,
            abc: AbcConfig::default(),
            bounds: SlotBounds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "path")]
pub enum HistogramSource {
    Image(PathBuf),
    Histogram(PathBuf),
}

impl HistogramSource {
    pub fn path(&self) -> &Path {
        match self {
            HistogramSource::Image(p) | HistogramSource::Histogram(p) => p,
        }
    }

    fn load(&self) -> Result<Histogram, CliError> {
        match self {
            HistogramSource::Image(p) => {
                let image = load_image(p)?;
                build_histogram(&image).map_err(|e| input_err(p, e))
            }
            HistogramSource::Histogram(p) => {
                let text = String::from_utf8(read(p)?).map_err(|e| input_err(p, e))?;
                Histogram::from_csv(&text).map_err(|e| input_err(p, e))
            }
        }
    }
}

fn load_image(path: &Path) -> Result<GrayImage, CliError> {
    load_grayscale_image(&read(path)?).map_err(|e| input_err(path, e))
}

/// A fully resolved command, as stored in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "command")]
pub enum Job {
    Fit {
        input: HistogramSource,
        settings: FitSettings,
    },
    Segment {
        image: PathBuf,
        /// Model JSON; when absent the model is fitted with `settings`.
        model: Option<PathBuf>,
        settings: FitSettings,
    },
    Compare {
        input: HistogramSource,
        init: PathBuf,
        settings: FitSettings,
        em: EmConfig,
    },
    Synth {
        truth: PathBuf,
        pixels: u64,
        noise: Noise,
    },
}

impl Job {
    fn input_paths(&self) -> Vec<&Path> {
        match self {
            Job::Fit { input, .. } => vec![input.path()],
            Job::Segment { image, model, .. } => {
                let mut v = vec![image.as_path()];
                v.extend(model.as_deref());
                v
            }
            Job::Compare { input, init, .. } => vec![input.path(), init.as_path()],
            Job::Synth { truth, .. } => vec![truth.as_path()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    pub inputs: Vec<FileDigest>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

/// Collects output files in write order.
struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<FileDigest>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
        self.written.push(FileDigest {
            path: PathBuf::from(name),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable output");
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Result of an ABC fit, sorted by mean.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: MixtureModel,
    pub objective: f64,
    pub trace: RunTrace,
}

impl FitOutcome {
    pub fn report(&self) -> ModelReport {
        ModelReport::new(&self.model, self.objective)
    }
}

/// Fits a `settings.k` class mixture to `histogram` with ABC over the flat encoding.
pub fn fit_histogram(histogram: &Histogram, settings: &FitSettings) -> Result<FitOutcome, CliError> {
    let spec = ObjectiveSpec::new(histogram.clone(), settings.k, settings.omega)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let bounds = settings.bounds.for_classes(settings.k)?;
    let (best, trace) = run_abc(|x: &[f64]| spec.evaluate_vector(x), &bounds, &settings.abc)?;
    let model = decode_candidate(&best.position, settings.k)?.sorted();
    Ok(FitOutcome {
        model,
        objective: best.objective,
        trace,
    })
}

fn check_k(k: usize) -> Result<(), CliError> {
    if (MIN_CLASSES..=MAX_CLASSES).contains(&k) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--k must be between {MIN_CLASSES} and {MAX_CLASSES} (got {k})"
        )))
    }
}

fn validate_settings(settings: &FitSettings) -> Result<(), CliError> {
    check_k(settings.k)?;
    settings
        .abc
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !(settings.omega >= 0.0 && settings.omega.is_finite()) {
        return Err(CliError::Usage("--omega must be finite and >= 0".into()));
    }
    settings
        .bounds
        .for_classes(settings.k)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(())
}

/// One row of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub init_id: usize,
    pub final_j: f64,
    /// `None` when the model assigns zero density to an occupied bin.
    pub log_likelihood: Option<f64>,
    pub iterations: usize,
    pub model: ModelReport,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("method,init_id,final_J,log_likelihood,iterations\n");
    for r in rows {
        let ll = r
            .log_likelihood
            .map_or_else(|| "-inf".to_string(), |v| format!("{v:e}"));
        out.push_str(&format!(
            "{},{},{:e},{},{}\n",
            r.method, r.init_id, r.final_j, ll, r.iterations
        ));
    }
    out
}

/// Runs EM from each initial condition and ABC once per condition. ABC draws
/// its own population from the seed, so the supplied condition only labels the row.
pub fn compare(
    histogram: &Histogram,
    inits: &[MixtureModel],
    settings: &FitSettings,
    em: &EmConfig,
) -> Result<Vec<ComparisonRow>, CliError> {
    let spec = ObjectiveSpec::new(histogram.clone(), settings.k, settings.omega)?;
    let finite = |v: f64| v.is_finite().then_some(v);
    let mut rows = Vec::new();
    for (id, init) in inits.iter().enumerate() {
        let fit = em_fit(histogram, settings.k, init, em)?;
        let j = spec.evaluate(&fit.model)?;
        rows.push(ComparisonRow {
            method: "em".into(),
            init_id: id,
            final_j: j,
            log_likelihood: finite(fit.log_likelihood),
            iterations: fit.iterations,
            model: ModelReport::new(&fit.model, j),
        });

        log::info!("abc ignores initial condition {id}: {:?}", init.classes);
        let abc = fit_histogram(histogram, settings)?;
        rows.push(ComparisonRow {
            method: "abc".into(),
            init_id: id,
            final_j: abc.objective,
            log_likelihood: finite(log_likelihood(histogram, &abc.model)),
            iterations: settings.abc.iterations,
            model: abc.report(),
        });
    }
    Ok(rows)
}

fn load_model(path: &Path) -> Result<MixtureModel, CliError> {
    let report: ModelReport = read_json(path)?;
    let model = report.model();
    model.validate().map_err(|e| input_err(path, e))?;
    Ok(model)
}

fn load_inits(path: &Path, k: usize) -> Result<Vec<MixtureModel>, CliError> {
    let reports: Vec<ModelReport> = read_json(path)?;
    if reports.is_empty() {
        return Err(input_err(path, "init file holds no initial conditions"));
    }
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let m = r.model();
            m.validate()
                .map_err(|e| input_err(path, format!("condition {i}: {e}")))?;
            if m.k() != k {
                return Err(input_err(
                    path,
                    format!("condition {i} has {} classes, expected {k}", m.k()),
                ));
            }
            Ok(m)
        })
        .collect()
}

/// Executes `job`, writing its outputs and manifest into `out_dir`.
pub fn run_job(job: &Job, out_dir: &Path) -> Result<RunManifest, CliError> {
    let inputs = job
        .input_paths()
        .into_iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.to_path_buf(),
                sha256: sha256_hex(&read(p)?),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut out = Outputs::new(out_dir)?;
    match job {
        Job::Fit { input, settings } => {
            validate_settings(settings)?;
            let histogram = input.load()?;
            let fit = fit_histogram(&histogram, settings)?;
            out.write_json("model.json", &fit.report())?;
            out.write("trace.csv", fit.trace.to_csv().as_bytes())?;
        }
        Job::Segment {
            image,
            model,
            settings,
        } => {
            let img = load_image(image)?;
            let model = match model {
                Some(path) => load_model(path)?.sorted(),
                None => {
                    validate_settings(settings)?;
                    let histogram = build_histogram(&img).map_err(|e| input_err(image, e))?;
                    let fit = fit_histogram(&histogram, settings)?;
                    out.write_json("model.json", &fit.report())?;
                    out.write("trace.csv", fit.trace.to_csv().as_bytes())?;
                    fit.model
                }
            };
            if model.k() < MIN_CLASSES {
                return Err(CliError::Usage(format!(
                    "segmentation needs at least {MIN_CLASSES} classes, model has {}",
                    model.k()
                )));
            }
            let set: ThresholdSet = compute_thresholds(&model)?;
            let labels = segment(&img, &set)?;
            out.write_json("thresholds.json", &set)?;
            let to_pgm = |r: Result<GrayImage, HistogramError>| {
                pgm::encode(&r.expect("label image matches input size"), PgmFormat::Binary)
            };
            out.write("labels.pgm", &to_pgm(labels.raw()))?;
            out.write("segmented.pgm", &to_pgm(labels.render(&model)))?;
        }
        Job::Compare {
            input,
            init,
            settings,
            em,
        } => {
            validate_settings(settings)?;
            let histogram = input.load()?;
            let inits = load_inits(init, settings.k)?;
            let rows = compare(&histogram, &inits, settings, em)?;
            out.write("comparison.csv", comparison_csv(&rows).as_bytes())?;
            out.write_json("comparison_models.json", &rows)?;
        }
        Job::Synth {
            truth,
            pixels,
            noise,
        } => {
            let spec = SynthSpec {
                truth: load_model(truth)?,
                pixel_count: *pixels,
                noise: *noise,
            };
            let histogram = synth_histogram(&spec)?;
            out.write("histogram.csv", histogram.to_csv().as_bytes())?;
        }
    }

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        job: job.clone(),
        inputs,
        outputs: out.written,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    text.push('\n');
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    Ok(manifest)
}

/// Re-runs the job recorded in a manifest into `out_dir`. Inputs must still
/// match their recorded digests.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<RunManifest, CliError> {
    let manifest: RunManifest = read_json(manifest_path)?;
    for input in &manifest.inputs {
        let digest = sha256_hex(&read(&input.path)?);
        if digest != input.sha256 {
            return Err(input_err(&input.path, "input changed since the manifest was written"));
        }
    }
    let rerun = run_job(&manifest.job, out_dir)?;
    for (a, b) in manifest.outputs.iter().zip(&rerun.outputs) {
        if a != b {
            log::warn!("replayed output {} differs from the manifest", b.path.display());
        }
    }
    Ok(rerun)
}

// ---- argument parsing ----

#[derive(Debug, Parser)]
#[command(name = "abcseg", version, about = "Histogram thresholding with a bee-colony Gaussian-mixture fit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of classes (2..=8).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Colony size (employed + onlooker bees).
    #[arg(long, global = true)]
    pub pop: Option<usize>,
    /// ABC cycles.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Failed trials before a food source is abandoned.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    /// Weight of the |sum P - 1| penalty.
    #[arg(long, global = true)]
    pub omega: Option<f64>,
    /// JSON {"weight":[lo,hi],"stddev":[lo,hi],"mean":[lo,hi]}.
    #[arg(long, global = true)]
    pub bounds_file: Option<PathBuf>,
    /// JSON with any of population, iterations, limit, seed. Flags take precedence.
    #[arg(long, global = true)]
    pub abc_config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a mixture to an image or histogram CSV.
    Fit(InputArgs),
    /// Threshold and label an image using a model JSON (or a fresh fit).
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// EM vs ABC from one or more initial conditions.
    Compare {
        #[command(flatten)]
        input: InputArgs,
        /// JSON list of models.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 1000)]
        em_max_iterations: usize,
        #[arg(long, default_value_t = 1e-8)]
        em_tolerance: f64,
        #[arg(long, default_value_t = 0.5)]
        variance_floor: f64,
    },
    /// Histogram CSV from a ground-truth mixture.
    Synth {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        pixels: u64,
        #[arg(long, value_enum, default_value_t = NoiseArg::Exact)]
        noise: NoiseArg,
    },
    /// Re-run the job recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InputArgs {
    /// PGM image (P2 or P5).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Histogram CSV (gray_level,frequency).
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

impl InputArgs {
    fn source(&self) -> HistogramSource {
        match (&self.image, &self.histogram) {
            (Some(p), _) => HistogramSource::Image(p.clone()),
            (None, Some(p)) => HistogramSource::Histogram(p.clone()),
            (None, None) => unreachable!("clap requires one input"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Exact,
    Multinomial,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialAbcConfig {
    population: Option<usize>,
    iterations: Option<usize>,
    limit: Option<usize>,
    seed: Option<u64>,
}

impl GlobalArgs {
    pub fn settings(&self) -> Result<FitSettings, CliError> {
        let mut settings = FitSettings::default();
        if let Some(path) = &self.abc_config {
            let file: PartialAbcConfig = read_json(path)?;
            let abc = &mut settings.abc;
            abc.population = file.population.unwrap_or(abc.population);
            abc.iterations = file.iterations.unwrap_or(abc.iterations);
            abc.limit = file.limit.unwrap_or(abc.limit);
            abc.seed = file.seed.unwrap_or(abc.seed);
        }
        if let Some(path) = &self.bounds_file {
            settings.bounds = read_json(path)?;
        }
        let abc = &mut settings.abc;
        abc.seed = self.seed.unwrap_or(abc.seed);
        abc.population = self.pop.unwrap_or(abc.population);
        abc.iterations = self.iters.unwrap_or(abc.iterations);
        abc.limit = self.limit.unwrap_or(abc.limit);
        settings.k = self.k.unwrap_or(settings.k);
        settings.omega = self.omega.unwrap_or(settings.omega);
        Ok(settings)
    }
}

impl Cli {
    /// Resolves flags into a job; `None` for `replay`.
    pub fn job(&self) -> Result<Option<Job>, CliError> {
        let settings = self.global.settings()?;
        Ok(Some(match &self.command {
            Command::Fit(input) => {
                check_k(settings.k)?;
                Job::Fit {
                    input: input.source(),
                    settings,
                }
            }
            Command::Segment { image, model } => {
                if model.is_none() {
                    check_k(settings.k)?;
                }
                Job::Segment {
                    image: image.clone(),
                    model: model.clone(),
                    settings,
                }
            }
            Command::Compare {
                input,
                init,
                em_max_iterations,
                em_tolerance,
                variance_floor,
            } => {
                // K comes from the init file when --k is absent
                let mut settings = settings;
                if self.global.k.is_none() {
                    let reports: Vec<ModelReport> = read_json(init)?;
                    if let Some(first) = reports.first() {
                        settings.k = first.classes.len();
                    }
                }
                check_k(settings.k)?;
                Job::Compare {
                    input: input.source(),
                    init: init.clone(),
                    settings,
                    em: EmConfig {
                        max_iterations: *em_max_iterations,
                        tolerance: *em_tolerance,
                        variance_floor: *variance_floor,
                    },
                }
            }
            Command::Synth {
                truth,
                pixels,
                noise,
            } => Job::Synth {
                truth: truth.clone(),
                pixels: *pixels,
                noise: match noise {
                    NoiseArg::Exact => Noise::Exact,
                    NoiseArg::Multinomial => Noise::Multinomial {
                        seed: settings.abc.seed,
                    },
                },
            },
            Command::Replay { .. } => return Ok(None),
        }))
    }

    pub fn execute(&self) -> Result<RunManifest, CliError> {
        match (&self.command, self.job()?) {
            (Command::Replay { manifest }, _) => replay(manifest, &self.global.out_dir),
            (_, Some(job)) => run_job(&job, &self.global.out_dir),
            (_, None) => unreachable!("only replay has no job"),
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match cli.execute() {
        Ok(manifest) => {
            for f in &manifest.outputs {
                println!("{}", cli.global.out_dir.join(&f.path).display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
