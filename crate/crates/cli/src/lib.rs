//! Command-line front end: dataset synthesis, fitting, evaluation, noise
//! sweeps and annotation import.
//!
//! Exit codes: 0 success, 1 estimator failure, 2 bad arguments or settings,
//! 3 I/O or file-format failure, 4 non-convergence under `--strict`,
//! 5 evaluation without ground truth.

pub mod files;
pub mod import;
pub mod numfmt;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use symnrsfm::dataset::Dataset;
use symnrsfm::eval::{evaluate, run_noise_sweep, ErrorReport, SweepConfig, SweepTable};
use symnrsfm::model::full_symmetric_shape;
use symnrsfm::pipeline::{reconstruct, Method, MethodConfig};
use symnrsfm::synth::{synthesize, SynthConfig};

use crate::files::{write_atomic, FitFile};
use crate::numfmt::g6;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_NO_TRUTH: i32 = 5;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SYMNRSFM_THREADS";

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<symnrsfm::Error> for CliError {
    fn from(e: symnrsfm::Error) -> Self {
        use symnrsfm::Error as E;
        let code = match e {
            E::InvalidConfig(_) => EXIT_USAGE,
            E::Format(_) => EXIT_IO,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "symnrsfm", version, about = "Symmetric non-rigid structure from motion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with embedded ground truth.
    Synth(SynthArgs),
    /// Reconstruct poses and shapes from a dataset.
    Fit(FitArgs),
    /// Score a fitted model against the dataset's ground truth.
    Eval(EvalArgs),
    /// Repeat synthesize, fit and score over a grid of noise levels.
    Sweep(SweepArgs),
    /// Convert a keypoint CSV export into a dataset file.
    #[command(name = "import-p3d")]
    ImportP3d(ImportArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Number of images.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Keypoint pairs per image.
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    /// Shape modes of the generated scene, counting the mean.
    #[arg(long = "scene-k", default_value_t = 2)]
    pub scene_k: usize,
    /// Fraction of keypoints hidden at random.
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    /// Lower and upper camera scale, e.g. `0.8,1.2`.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0])]
    pub scale: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    /// Shape modes, counting the mean.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Noise standard deviation as a fraction of the largest keypoint distance.
    #[arg(long = "noise-s", default_value_t = 0.0)]
    pub noise_s: f64,
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0])]
    pub scale: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub deform: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Deformation bases (EM) or shape bases (prior-free).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Weight tying each deformation basis to its mirror (EM only).
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

impl MethodArgs {
    pub fn config(&self) -> CliResult<MethodConfig> {
        if self.k == 0 {
            return Err(CliError::new(EXIT_USAGE, "--k must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CliError::new(EXIT_USAGE, "--lambda must be a non-negative number"));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::new(EXIT_USAGE, "--tol must be positive"));
            }
        }
        Ok(MethodConfig { k: self.k, lambda: self.lambda, max_iters: self.max_iters, tol: self.tol, ..MethodConfig::default() })
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "sym-priorfree")]
    pub method: String,
    #[command(flatten)]
    pub settings: MethodArgs,
    /// Exit with code 4 when the iterations stop before converging.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration energy log; defaults to the output path with `.log` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "s-values", value_delimiter = ',', default_values_t = [0.03, 0.05, 0.07])]
    pub s_values: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Comma-separated methods; all four by default.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub settings: MethodArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// CSV with columns image_id, group, point_id, side, u, v, visible.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "k-hint")]
    pub k_hint: Option<usize>,
}

/// Caps rayon's global pool from the environment; ignored if already initialized.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::new(EXIT_USAGE, format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::ImportP3d(a) => cmd_import(&a),
    }
}

fn scale_range(v: &[f64]) -> CliResult<[f64; 2]> {
    match v {
        [lo, hi] => Ok([*lo, *hi]),
        _ => Err(CliError::new(EXIT_USAGE, "--scale takes two values")),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n: a.n,
        p: a.p,
        k: a.k,
        scale_range: scale_range(&a.scale)?,
        deform_scale: a.deform,
        noise_s: a.noise_s,
        occlusion_rate: a.occlusion,
        seed: a.seed,
    };
    cfg.validate()?;
    let (scene, obs) = synthesize(&cfg)?;
    let ds = Dataset::from_scene(&scene, &obs, Some(a.k))?;
    write_atomic(&a.out, ds.to_jsonl()?.as_bytes())?;
    println!("wrote {} images x {} keypoint pairs to {}", a.n, a.p, a.out.display());
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let method: Method = a.method.parse()?;
    let cfg = a.settings.config()?;
    let ds = files::read_dataset(&a.data)?;
    let obs = ds.observations()?;
    let rec = reconstruct(&obs, method, &cfg)?;
    let data_norm = (obs.y.norm_squared() + obs.y_dag.norm_squared()).sqrt();
    let fit = FitFile::from_reconstruction(&rec, &cfg);
    write_atomic(&a.out, fit.to_json()?.as_bytes())?;

    let mut log = String::from("iteration\tenergy\n");
    for (i, e) in rec.energy_trace.iter().enumerate() {
        log.push_str(&format!("{i}\t{}\n", g6(*e)));
    }
    log.push_str(&format!("# converged {}\n# iterations {}\n", rec.converged, rec.iterations));
    for w in &rec.warnings {
        log.push_str(&format!("# warning {w}\n"));
    }
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));
    write_atomic(&log_path, log.as_bytes())?;

    let last = rec.energy_trace.last().copied().unwrap_or(f64::NAN);
    println!("method {method}");
    println!("iterations {}", rec.iterations);
    println!("converged {}", rec.converged);
    println!("final energy {}", g6(last));
    // Prior-free energies are squared residuals, comparable to the data; EM reports a likelihood.
    if matches!(method, Method::SymPriorFree | Method::PriorFree) && data_norm > 0.0 {
        println!("relative energy {}", g6(last / (data_norm * data_norm)));
    }
    for w in &rec.warnings {
        eprintln!("warning: {w}");
    }
    if a.strict && !rec.converged {
        return Err(CliError::new(EXIT_NOT_CONVERGED, format!("{method} did not converge in {} iterations", rec.iterations)));
    }
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn print_report(r: &ErrorReport) {
    println!("e_S mean {} median {}", g6(r.e_s_mean), g6(r.e_s_median));
    println!("e_R mean {} median {}", g6(r.e_r_mean), g6(r.e_r_median));
    if r.groups.len() > 1 {
        for g in &r.groups {
            println!(
                "group {} n {} e_S {} {} e_R {} {}",
                g.group,
                g.count,
                g6(g.e_s_mean),
                g6(g.e_s_median),
                g6(g.e_r_mean),
                g6(g.e_r_median)
            );
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<ErrorReport> {
    let ds = files::read_dataset(&a.data)?;
    let fit = FitFile::read(&a.model)?;
    let truth = ds.ground_truth().ok_or_else(|| CliError::new(EXIT_NO_TRUTH, "dataset has no ground truth for every image"))?;
    if fit.poses.len() != ds.records.len() {
        return Err(CliError::new(EXIT_USAGE, format!("model has {} images, dataset {}", fit.poses.len(), ds.records.len())));
    }
    let gt_shapes: Vec<_> = truth.shapes.iter().map(full_symmetric_shape).collect();
    let report = evaluate(&fit.shapes()?, &gt_shapes, &fit.camera_poses(), &truth.poses, &ds.groups())?;
    print_report(&report);
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
        write_atomic(out, json.as_bytes())?;
    }
    Ok(report)
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<SweepTable> {
    let methods = if a.methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        a.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?
    };
    if a.reps == 0 || a.s_values.is_empty() || a.s_values.iter().any(|s| !(*s >= 0.0)) {
        return Err(CliError::new(EXIT_USAGE, "need at least one repetition and non-negative noise levels"));
    }
    let scene = SynthConfig {
        n: a.scene.n,
        p: a.scene.p,
        k: a.scene.scene_k,
        scale_range: scale_range(&a.scene.scale)?,
        occlusion_rate: a.scene.occlusion,
        seed: a.scene.seed,
        ..SynthConfig::default()
    };
    scene.validate()?;
    let cfg = SweepConfig { scene, s_values: a.s_values.clone(), methods, repetitions: a.reps, method: a.settings.config()? };
    let table = run_noise_sweep(&cfg);
    println!("method\ts\te_S\te_R\truns\tfailures");
    for c in &table.cells {
        let show = |v: Option<f64>| v.map(g6).unwrap_or_else(|| "nan".into());
        println!("{}\t{}\t{}\t{}\t{}\t{}", c.method, g6(c.s), show(c.e_s_mean()), show(c.e_r_mean()), c.e_s.len(), c.failures);
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
        write_atomic(out, json.as_bytes())?;
    }
    Ok(table)
}

pub fn cmd_import(a: &ImportArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot read {}: {e}", a.input.display())))?;
    let ds = import::dataset_from_csv(&text, a.k_hint)?;
    write_atomic(&a.out, ds.to_jsonl()?.as_bytes())?;
    println!("imported {} images x {} keypoint pairs", ds.header.n, ds.header.p);
    Ok(())
}
