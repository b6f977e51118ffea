//! The `bdps` command-line driver.
//!
//! Every command writes a manifest next to its outputs. Failures print one
//! JSON line `{"error": {"class", "exit_code", "message"}}` on stderr and
//! exit with 2 (config or usage), 3 (io), 4 (divergence) or 5 (capability).

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{jensen_gap_bound, jensen_gap_empirical, require_gaussian, GapRow, ToyProblem, GAP_CSV_HEADER};
use crate::datasets::{gmm_draws, toy_images, toy_kernels, toy_tilts, ImageKind, KernelKind};
use crate::error::{Error, Result};
use crate::forward::pfm::{load_pfm, load_tilt, save_pfm, save_tilt};
use crate::forward::{degrade, gen_gaussian_kernel, gen_motion_kernel, gen_tilt_field, Measurement};
use crate::grid::SignalGrid;
use crate::metrics::{MetricReport, DEFAULT_PEAK};
use crate::rng::{normal_grid, Branch, Streams};
use crate::sampler::{
    blind_dps_deblur, blind_dps_turbulence, dps_nonblind, sample_prior, uniform_prior_baseline, GroundTruth,
    SamplerConfig, SolveResult, TiltChain,
};
use crate::schedule::diffuse;
use crate::score::{dsm_train_monitored, ScoreModel};

use config::{config_hash, load_config, AnalyzeGapConfig, SamplePriorConfig, SolveConfig, TrainScoreConfig};
use manifest::{sidecar, ManifestBuilder, MANIFEST_FILE};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BDPS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "bdps", version, about = "Blind diffusion posterior sampling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate one blur kernel.
    GenKernel(GenKernelArgs),
    /// Generate one smooth tilt field.
    GenTilt(GenTiltArgs),
    /// Generate a directory of toy images, kernels or tilt fields.
    GenDataset(GenDatasetArgs),
    /// Train an MLP score network by denoising score matching.
    TrainScore(TrainScoreArgs),
    /// Apply the forward model to an image.
    Degrade(DegradeArgs),
    /// Run a posterior sampler on a measurement.
    Solve(SolveArgs),
    /// Compare estimates with ground truth.
    Evaluate(EvaluateArgs),
    /// Tabulate the Jensen gap and its bound on a Gaussian toy problem.
    AnalyzeGap(AnalyzeGapArgs),
    /// Draw unconditional samples from a score model.
    SamplePrior(SamplePriorArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set guidance.step_size=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelGen {
    Motion,
    Gaussian,
}

#[derive(Args, Debug)]
pub struct GenKernelArgs {
    #[arg(long, value_enum)]
    pub kind: KernelGen,
    #[arg(long, default_value_t = 5)]
    pub size: usize,
    /// Gaussian kernel std in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub std: f64,
    /// Motion intensity in `[0, 1]`.
    #[arg(long, default_value_t = 0.5)]
    pub intensity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenTiltArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    /// Side of the random control grid.
    #[arg(long, default_value_t = 8)]
    pub grid_n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub smooth_std: f64,
    /// Largest displacement in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix; writes `<out>_dx.pfm` and `<out>_dy.pfm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Bars,
    Blobs,
    Mixed,
    Gmm,
    MotionKernel,
    GaussianKernel,
    Tilt,
}

#[derive(Args, Debug)]
pub struct GenDatasetArgs {
    #[arg(long, value_enum)]
    pub kind: DatasetKind,
    /// Image or kernel side length.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mixture prior (JSON) for `--kind gmm`.
    #[arg(long)]
    pub gmm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub intensity_min: f64,
    #[arg(long, default_value_t = 0.8)]
    pub intensity_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub std_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub std_max: f64,
    #[arg(long, default_value_t = 4)]
    pub tilt_grid_n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tilt_smooth_std: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tilt_amplitude: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainScoreArgs {
    /// Directory of `.pfm` items (tilt items as `_dx`/`_dy` pairs).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub kernel: PathBuf,
    /// Tilt prefix (`<prefix>_dx.pfm`, `<prefix>_dy.pfm`).
    #[arg(long)]
    pub tilt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    Dps,
    BlindDeblur,
    BlindTurbulence,
    UniformBaseline,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub method: SolveMethod,
    #[arg(long)]
    pub measurement: PathBuf,
    #[arg(long)]
    pub image_model: PathBuf,
    #[arg(long)]
    pub kernel_model: Option<PathBuf>,
    /// Known kernel for `dps`.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub tilt_model: Option<PathBuf>,
    /// Fixed tilt prefix for `blind-turbulence` without a tilt model.
    #[arg(long)]
    pub tilt: Option<PathBuf>,
    #[arg(long)]
    pub truth_image: Option<PathBuf>,
    #[arg(long)]
    pub truth_kernel: Option<PathBuf>,
    #[arg(long)]
    pub truth_tilt: Option<PathBuf>,
    /// `a`, `a..b` (exclusive) or `a..=b`; defaults to `sampler.seed`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// A `solve` seed directory; supplies estimates and the trajectory.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub truth_image: Option<PathBuf>,
    #[arg(long)]
    pub truth_kernel: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PEAK)]
    pub peak: f64,
    /// Defaults to `<run>/metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeGapArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2")]
    pub sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10,100,500")]
    pub steps: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub image_size: usize,
    #[arg(long, default_value_t = 2)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 4000)]
    pub n_mc: usize,
    /// Diagonal Gaussian image prior (JSON model); random when omitted.
    #[arg(long, requires = "kernel_prior")]
    pub image_prior: Option<PathBuf>,
    /// Diagonal Gaussian kernel prior (JSON model); random when omitted.
    #[arg(long, requires = "image_prior")]
    pub kernel_prior: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SamplePriorArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Error class name and exit code.
pub fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Parameter(_) => ("parameter", 2),
        Error::Shape(_) => ("shape", 2),
        Error::Format(_) => ("format", 2),
        Error::DegenerateStep { .. } => ("degenerate_step", 2),
        Error::Singular(_) => ("singular", 2),
        Error::Io(_) => ("io", 3),
        Error::Divergence { .. } => ("divergence", 4),
        Error::TrainingDiverged { .. } => ("training_diverged", 4),
        Error::NonFinite(_) => ("non_finite", 4),
        Error::Capability(_) => ("capability", 5),
    }
}

fn error_record(class: &str, code: i32, message: &str) -> String {
    json!({ "error": { "class": class, "exit_code": code, "message": message } }).to_string()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            eprintln!("{}", error_record("usage", 2, msg.trim()));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let (class, code) = classify(&e);
            eprintln!("{}", error_record(class, code, &e.to_string()));
            code
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenKernel(a) => gen_kernel(a),
        Command::GenTilt(a) => gen_tilt(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::TrainScore(a) => train_score(a),
        Command::Degrade(a) => degrade_cmd(a),
        Command::Solve(a) => solve(a),
        Command::Evaluate(a) => evaluate(a),
        Command::AnalyzeGap(a) => analyze_gap(a),
        Command::SamplePrior(a) => sample_prior_cmd(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// `<prefix>` → (directory, file stem) for tilt pairs.
fn split_prefix(prefix: &Path) -> Result<(PathBuf, String)> {
    let stem = prefix
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad tilt prefix {}", prefix.display())))?
        .to_string();
    let dir = prefix.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    Ok((dir, stem))
}

fn tilt_paths(prefix: &Path) -> Result<[PathBuf; 2]> {
    let (dir, stem) = split_prefix(prefix)?;
    Ok([dir.join(format!("{stem}_dx.pfm")), dir.join(format!("{stem}_dy.pfm"))])
}

fn load_tilt_prefix(prefix: &Path, m: &mut ManifestBuilder) -> Result<SignalGrid> {
    let (dir, stem) = split_prefix(prefix)?;
    let field = load_tilt(&dir, &stem).map_err(at(prefix))?;
    for p in tilt_paths(prefix)? {
        m.input(&p);
    }
    Ok(field)
}

fn save_tilt_prefix(field: &SignalGrid, prefix: &Path, m: &mut ManifestBuilder) -> Result<()> {
    ensure_parent(prefix)?;
    let (dir, stem) = split_prefix(prefix)?;
    for p in save_tilt(field, &dir, &stem)? {
        m.output(&p);
    }
    Ok(())
}

/// Prefixes io errors with the offending path.
fn at(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    }
}

fn load_input(path: &Path, m: &mut ManifestBuilder) -> Result<SignalGrid> {
    let g = load_pfm(path).map_err(at(path))?;
    m.input(path);
    Ok(g)
}

fn load_model(path: &Path, m: &mut ManifestBuilder) -> Result<ScoreModel> {
    let model = ScoreModel::load(path).map_err(at(path))?;
    m.input(path);
    Ok(model)
}

fn gen_kernel(a: GenKernelArgs) -> Result<()> {
    let k = match a.kind {
        KernelGen::Gaussian => gen_gaussian_kernel(a.std, a.size)?,
        KernelGen::Motion => {
            let mut rng = Streams::new(a.seed).stream(Branch::GENERATOR, 0);
            gen_motion_kernel(a.intensity, a.size, &mut rng)?
        }
    };
    ensure_parent(&a.out)?;
    save_pfm(&k, &a.out)?;
    let cfg = json!({ "kind": format!("{:?}", a.kind).to_lowercase(), "size": a.size, "std": a.std, "intensity": a.intensity });
    let mut m = ManifestBuilder::new("gen-kernel", cfg).seed(a.seed);
    m.output(&a.out);
    m.write(&sidecar(&a.out))?;
    Ok(())
}

fn gen_tilt(a: GenTiltArgs) -> Result<()> {
    let mut rng = Streams::new(a.seed).stream(Branch::GENERATOR, 0);
    let phi = gen_tilt_field(a.grid_n, a.smooth_std, a.amplitude, (a.height, a.width), &mut rng)?;
    let cfg = json!({ "height": a.height, "width": a.width, "grid_n": a.grid_n, "smooth_std": a.smooth_std, "amplitude": a.amplitude });
    let mut m = ManifestBuilder::new("gen-tilt", cfg).seed(a.seed);
    save_tilt_prefix(&phi, &a.out, &mut m)?;
    m.write(&sidecar(&a.out))?;
    Ok(())
}

fn gen_dataset(a: GenDatasetArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut m = ManifestBuilder::new(
        "gen-dataset",
        json!({
            "kind": format!("{:?}", a.kind),
            "size": a.size,
            "count": a.count,
            "intensity": [a.intensity_min, a.intensity_max],
            "std": [a.std_min, a.std_max],
            "tilt": { "grid_n": a.tilt_grid_n, "smooth_std": a.tilt_smooth_std, "amplitude": a.tilt_amplitude },
        }),
    )
    .seed(a.seed);
    let image = |k| toy_images(k, a.size, a.count, a.seed);
    let items = match a.kind {
        DatasetKind::Bars => image(ImageKind::Bars),
        DatasetKind::Blobs => image(ImageKind::Blobs),
        DatasetKind::Mixed => image(ImageKind::Mixed),
        DatasetKind::Gmm => {
            let path = a.gmm.as_deref().ok_or_else(|| Error::Config("--kind gmm needs --gmm".into()))?;
            let ScoreModel::Gmm(prior) = load_model(path, &mut m)? else {
                return Err(Error::Config(format!("{} is not a mixture prior", path.display())));
            };
            gmm_draws(&prior, a.count, a.seed)
        }
        DatasetKind::MotionKernel => {
            toy_kernels(KernelKind::Motion { intensity: (a.intensity_min, a.intensity_max) }, a.size, a.count, a.seed)?
        }
        DatasetKind::GaussianKernel => {
            toy_kernels(KernelKind::Gaussian { std: (a.std_min, a.std_max) }, a.size, a.count, a.seed)?
        }
        DatasetKind::Tilt => {
            toy_tilts(a.tilt_grid_n, a.tilt_smooth_std, a.tilt_amplitude, (a.size, a.size), a.count, a.seed)?
        }
    };
    for (j, item) in items.iter().enumerate() {
        if a.kind == DatasetKind::Tilt {
            save_tilt_prefix(item, &a.out.join(format!("item_{j:05}")), &mut m)?;
        } else {
            let p = a.out.join(format!("item_{j:05}.pfm"));
            save_pfm(item, &p)?;
            m.output(&p);
        }
    }
    m.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

/// Loads every `.pfm` in `dir` in name order; `_dx`/`_dy` pairs become
/// two-channel fields.
pub fn load_dataset_dir(dir: &Path) -> Result<(Vec<SignalGrid>, Vec<PathBuf>)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| at(dir)(e.into()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().is_some_and(|e| e == "pfm"));
    names.sort();
    let mut items = Vec::new();
    let mut used = Vec::new();
    for p in &names {
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if name.ends_with("_dy.pfm") {
            continue;
        }
        if let Some(stem) = name.strip_suffix("_dx.pfm") {
            items.push(load_tilt(dir, stem)?);
            used.push(p.clone());
            used.push(dir.join(format!("{stem}_dy.pfm")));
        } else {
            items.push(load_pfm(p)?);
            used.push(p.clone());
        }
    }
    if items.is_empty() {
        return Err(Error::Config(format!("no .pfm items in {}", dir.display())));
    }
    Ok((items, used))
}

fn train_score(a: TrainScoreArgs) -> Result<()> {
    let cfg: TrainScoreConfig = load_config(a.cfg.config.as_deref(), &a.cfg.sets)?;
    let sched = cfg.schedule.build()?;
    let mut m = ManifestBuilder::new("train-score", to_value(&cfg)?).seed(cfg.train.seed);
    let (data, used) = load_dataset_dir(&a.dataset)?;
    used.iter().for_each(|p| m.input(p));
    let data: Vec<_> = data.iter().map(|x| cfg.data_repr.to_chain(x)).collect();
    let held = match &a.heldout {
        Some(dir) => {
            let (h, used) = load_dataset_dir(dir)?;
            used.iter().for_each(|p| m.input(p));
            h.iter().map(|x| cfg.data_repr.to_chain(x)).collect()
        }
        None => Vec::new(),
    };
    let report = dsm_train_monitored(&data, &held, &sched, &cfg.train)?;
    ensure_parent(&a.out)?;
    ScoreModel::Mlp(report.model).save(&a.out)?;
    m.output(&a.out);
    m.extra(json!({
        "steps": report.steps,
        "loss_history": report.loss_history,
        "heldout_history": report.heldout_history,
    }));
    m.write(&sidecar(&a.out))?;
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("degrade", json!({ "sigma": a.sigma })).seed(a.seed);
    let x = load_input(&a.image, &mut m)?;
    let k = load_input(&a.kernel, &mut m)?;
    let phi = a.tilt.as_deref().map(|p| load_tilt_prefix(p, &mut m)).transpose()?;
    let mut rng = Streams::new(a.seed).stream(Branch::MEASUREMENT, 0);
    let y = degrade(&x, &k, phi.as_ref(), a.sigma, &mut rng)?;
    ensure_parent(&a.out)?;
    save_pfm(&y.grid, &a.out)?;
    m.output(&a.out);
    m.write(&sidecar(&a.out))?;
    Ok(())
}

/// `a`, `a..b` or `a..=b`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed range `{spec}`"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = spec.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        vec![num(spec)?]
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct SolveInputs {
    y: Measurement,
    image: ScoreModel,
    kernel_model: Option<ScoreModel>,
    kernel: Option<SignalGrid>,
    tilt_model: Option<ScoreModel>,
    tilt: Option<SignalGrid>,
    truth: GroundTruth,
}

fn solve_one(method: SolveMethod, inp: &SolveInputs, cfg: &SolveConfig, seed: u64) -> Result<SolveResult> {
    let sched = cfg.schedule.build()?;
    let scfg = SamplerConfig { seed, snapshot_stride: cfg.sampler.snapshot_stride, guidance: cfg.guidance.clone() };
    let truth = Some(&inp.truth);
    let need = |what: &str| Error::Config(format!("{method:?} needs --{what}"));
    match method {
        SolveMethod::Dps => {
            let k = inp.kernel.as_ref().ok_or_else(|| need("kernel"))?;
            dps_nonblind(&inp.y, k, &inp.image, &sched, &scfg, truth)
        }
        SolveMethod::BlindDeblur => {
            let km = inp.kernel_model.as_ref().ok_or_else(|| need("kernel-model"))?;
            blind_dps_deblur(&inp.y, &inp.image, km, &sched, &scfg, truth)
        }
        SolveMethod::BlindTurbulence => {
            let km = inp.kernel_model.as_ref().ok_or_else(|| need("kernel-model"))?;
            let tilt = match (&inp.tilt_model, &inp.tilt) {
                (Some(t), _) => TiltChain::Diffusion(t),
                (None, Some(p)) => TiltChain::Fixed(p),
                (None, None) => return Err(need("tilt-model or --tilt")),
            };
            blind_dps_turbulence(&inp.y, &inp.image, km, tilt, &sched, &scfg, truth)
        }
        SolveMethod::UniformBaseline => uniform_prior_baseline(&inp.y, &inp.image, &sched, &cfg.uniform, &scfg, truth),
    }
}

pub const RESULT_FILE: &str = "result.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";

fn write_solve_outputs(res: &SolveResult, dir: &Path, m: &mut ManifestBuilder, hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut put = |g: &SignalGrid, name: &str| -> Result<()> {
        let p = dir.join(name);
        save_pfm(g, &p)?;
        m.output(&p);
        Ok(())
    };
    put(&res.x0, "x0.pfm")?;
    put(&res.x0_hat, "x0_hat.pfm")?;
    put(&res.k0, "k0.pfm")?;
    if let Some(phi) = &res.phi0 {
        save_tilt_prefix(phi, &dir.join("phi0"), m)?;
    }
    let traj = dir.join(TRAJECTORY_FILE);
    std::fs::write(&traj, serde_json::to_vec(&res.trajectory)?)?;
    m.output(&traj);
    let summary = dir.join(RESULT_FILE);
    let body = json!({
        "method": res.method,
        "seed": res.seed,
        "final_residual": res.trajectory.final_residual(),
        "argmin_kernel_mse_step": res.trajectory.argmin_kernel_mse(),
        "config_hash": hash,
    });
    std::fs::write(&summary, serde_json::to_vec_pretty(&body)?)?;
    m.output(&summary);
    Ok(())
}

fn solve(a: SolveArgs) -> Result<()> {
    let cfg: SolveConfig = load_config(a.cfg.config.as_deref(), &a.cfg.sets)?;
    cfg.schedule.build()?;
    cfg.guidance.validate().map_err(|e| Error::Config(format!("guidance: {e}")))?;
    let hash = config_hash(&cfg)?;
    let seeds = match &a.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.sampler.seed],
    };
    let mut common = ManifestBuilder::new("solve", to_value(&cfg)?);
    // The noise level is not known to the solver.
    let y = Measurement { grid: load_input(&a.measurement, &mut common)?, noise_std: f64::NAN };
    let opt_model = |p: &Option<PathBuf>, m: &mut ManifestBuilder| p.as_deref().map(|p| load_model(p, m)).transpose();
    let opt_grid = |p: &Option<PathBuf>, m: &mut ManifestBuilder| p.as_deref().map(|p| load_input(p, m)).transpose();
    let inputs = SolveInputs {
        image: load_model(&a.image_model, &mut common)?,
        kernel_model: opt_model(&a.kernel_model, &mut common)?,
        kernel: opt_grid(&a.kernel, &mut common)?,
        tilt_model: opt_model(&a.tilt_model, &mut common)?,
        tilt: a.tilt.as_deref().map(|p| load_tilt_prefix(p, &mut common)).transpose()?,
        truth: GroundTruth {
            x: opt_grid(&a.truth_image, &mut common)?,
            k: opt_grid(&a.truth_kernel, &mut common)?,
            phi: a.truth_tilt.as_deref().map(|p| load_tilt_prefix(p, &mut common)).transpose()?,
        },
        y,
    };
    let input_paths = common.inputs_snapshot();
    let pool = thread_pool()?;
    let results: Vec<Result<PathBuf>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let res = solve_one(a.method, &inputs, &cfg, seed)?;
                let dir = a.out.join(format!("seed_{seed}"));
                let mut m = ManifestBuilder::new("solve", to_value(&cfg)?).seed(seed);
                input_paths.iter().for_each(|p| m.input(p));
                write_solve_outputs(&res, &dir, &mut m, &hash)?;
                m.write(&dir.join(MANIFEST_FILE))?;
                Ok(dir)
            })
            .collect()
    });
    let mut dirs = Vec::with_capacity(results.len());
    for r in results {
        dirs.push(r?);
    }
    for d in &dirs {
        common.output(&d.join(MANIFEST_FILE));
    }
    common.extra(json!({ "seeds": seeds, "method": format!("{:?}", a.method), "config_hash": hash }));
    common.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let from_run = |name: &str| a.run.as_ref().map(|d| d.join(name));
    let image = a.image.clone().or_else(|| from_run("x0.pfm"));
    let kernel = a.kernel.clone().or_else(|| from_run("k0.pfm"));
    let out = a
        .out
        .clone()
        .or_else(|| from_run("metrics.json"))
        .ok_or_else(|| Error::Config("evaluate needs --out or --run".into()))?;
    let mut report = MetricReport::empty(a.peak);
    if let (Some(est), Some(truth)) = (&image, &a.truth_image) {
        report = report.with_image(&load_pfm(est)?, &load_pfm(truth)?)?;
    }
    if let (Some(est), Some(truth)) = (&kernel, &a.truth_kernel) {
        report = report.with_kernel(&load_pfm(est)?, &load_pfm(truth)?)?;
    }
    if let Some(run) = &a.run {
        let traj: crate::sampler::Trajectory = serde_json::from_slice(&std::fs::read(run.join(TRAJECTORY_FILE))?)
            .map_err(|e| Error::Format(format!("trajectory: {e}")))?;
        report.argmin_kernel_mse_step = traj.argmin_kernel_mse();
        report.final_residual = traj.final_residual();
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join(RESULT_FILE))?)
            .map_err(|e| Error::Format(format!("result: {e}")))?;
        report.config_hash = summary["config_hash"].as_str().map(str::to_string);
    }
    if report.psnr.is_none() && report.mnc.is_none() && a.run.is_none() {
        return Err(Error::Config("nothing to evaluate: give estimates with matching truths".into()));
    }
    ensure_parent(&out)?;
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn analyze_gap(a: AnalyzeGapArgs) -> Result<()> {
    let cfg: AnalyzeGapConfig = load_config(a.cfg.config.as_deref(), &a.cfg.sets)?;
    let sched = cfg.schedule.build()?;
    if a.sigmas.is_empty() || a.steps.is_empty() {
        return Err(Error::Config("need at least one sigma and one step".into()));
    }
    if let Some(bad) = a.steps.iter().find(|&&i| i > sched.n_steps()) {
        return Err(Error::Config(format!("step {bad} beyond schedule length {}", sched.n_steps())));
    }
    let streams = Streams::new(a.seed);
    let mut m = ManifestBuilder::new(
        "analyze-gap",
        json!({
            "config": to_value(&cfg)?,
            "sigmas": a.sigmas,
            "steps": a.steps,
            "image_size": a.image_size,
            "kernel_size": a.kernel_size,
            "n_mc": a.n_mc,
        }),
    )
    .seed(a.seed);
    let mut gen = streams.stream(Branch::GENERATOR, 0);
    let (base, x, k) = match (&a.image_prior, &a.kernel_prior) {
        (Some(ip), Some(kp)) => {
            let (im, km) = (load_model(ip, &mut m)?, load_model(kp, &mut m)?);
            let (x, k) = (require_gaussian(&im)?.sample(&mut gen), require_gaussian(&km)?.sample(&mut gen));
            let y = degrade(&x, &k, None, a.sigmas[0], &mut gen)?.grid.into_data();
            (ToyProblem::from_models(&im, &km, a.sigmas[0], y)?, x, k)
        }
        _ => ToyProblem::random((a.image_size, a.image_size), (a.kernel_size, a.kernel_size), a.sigmas[0], &mut gen)?,
    };
    let mut csv = String::from(GAP_CSV_HEADER);
    csv.push('\n');
    for &i in &a.steps {
        let xi = diffuse(&x, i, &normal_grid(&mut streams.stream(Branch::PROBE, 2 * i as u64), x.shape()), &sched)?;
        let ki = diffuse(&k, i, &normal_grid(&mut streams.stream(Branch::PROBE, 2 * i as u64 + 1), k.shape()), &sched)?;
        for &sigma in &a.sigmas {
            let prob = base.with_sigma(sigma)?;
            let mc = |j: u64| streams.stream(Branch::MONTE_CARLO, 2 * i as u64 + j);
            let est = jensen_gap_empirical(&prob, &xi, &ki, i, &sched, a.n_mc, &mut mc(0))?;
            let bound = jensen_gap_bound(&prob, &xi, &ki, i, &sched, a.n_mc, &mut mc(1))?;
            csv.push_str(&GapRow::new(sigma, i, &est, &bound).csv());
            csv.push('\n');
        }
    }
    ensure_parent(&a.out)?;
    std::fs::write(&a.out, csv)?;
    m.output(&a.out);
    m.write(&sidecar(&a.out))?;
    Ok(())
}

fn sample_prior_cmd(a: SamplePriorArgs) -> Result<()> {
    let cfg: SamplePriorConfig = load_config(a.cfg.config.as_deref(), &a.cfg.sets)?;
    let sched = cfg.schedule.build()?;
    let mut m = ManifestBuilder::new("sample-prior", to_value(&cfg)?).seed(a.seed);
    let model = load_model(&a.model, &mut m)?;
    std::fs::create_dir_all(&a.out)?;
    let streams = Streams::new(a.seed);
    for j in 0..a.count {
        let s = sample_prior(&model, &sched, &streams.child(j as u64), Branch::IMAGE)?;
        let s = cfg.repr.to_physical(&s);
        if s.shape().len() == 3 && s.shape()[2] == 2 {
            save_tilt_prefix(&s, &a.out.join(format!("sample_{j:05}")), &mut m)?;
        } else {
            let p = a.out.join(format!("sample_{j:05}.pfm"));
            save_pfm(&s, &p)?;
            m.output(&p);
        }
    }
    m.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}
