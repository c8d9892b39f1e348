use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffcf::denoiser::{read_model, train_conv_denoiser, write_model};
use diffcf::experiment::{
    generate_dataset, load_clean_images, run_experiment, run_sweep, ExperimentConfig, SweepAxis, SweepParam,
    Variant,
};
use diffcf::forgerylab::DatasetRecipe;
use diffcf::io::{read_image, write_heatmap_pfm, write_heatmap_png16, write_image};
use diffcf::{median_purify, purify_tiled, Denoiser, Detector, GuidanceMetric, Image, NoiseSchedule, Real, TrainConfig};

#[derive(Parser)]
#[command(name = "diffcf", version, about = "Diffusion purification against forgery-trace detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forged dataset.
    Gen(GenArgs),
    /// Train the noise-prediction network on a dataset's clean images.
    Train(TrainArgs),
    /// Purify one image.
    Purify(PurifyArgs),
    /// Run one detector on an image and store the heatmap.
    Detect(DetectArgs),
    /// Score all variants and detectors over a dataset.
    Eval(EvalArgs),
    /// Repeat the evaluation over values of t* or of the guidance scale.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON recipe; the flags below override it.
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    region: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
}

#[derive(Args)]
struct PurifyFlags {
    #[arg(long)]
    t_star: Option<usize>,
    #[arg(long)]
    guided: bool,
    #[arg(long)]
    scale: Option<f64>,
    /// Guidance metric: ssim or mse.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct PurifyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, required_unless_present = "median")]
    model: Option<PathBuf>,
    /// Apply a median filter of this size instead of diffusion.
    #[arg(long)]
    median: Option<usize>,
    /// Index used to derive per-patch seeds, as in a dataset run.
    #[arg(long, default_value_t = 0)]
    image_index: u64,
    #[command(flatten)]
    flags: PurifyFlags,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "grid")]
    detector: String,
    /// Heatmap file; `.pfm` stores floats, anything else a 16-bit PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated detector names.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<String>>,
    /// Comma-separated variants (orig, diff-cf, diff-cfg, median).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Store every variant's output image.
    #[arg(long)]
    save_images: bool,
    #[command(flatten)]
    flags: PurifyFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// t_star or scale.
    #[arg(long)]
    param: Option<String>,
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

fn parse_metric(s: &str) -> Result<GuidanceMetric> {
    Ok(s.parse()?)
}

fn experiment_config(a: &EvalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &a.dataset {
        cfg.dataset = v.clone();
    }
    if a.model.is_some() {
        cfg.model = a.model.clone();
    }
    if let Some(v) = &a.out {
        cfg.out = v.clone();
    }
    if let Some(list) = &a.detectors {
        cfg.detectors = list.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(list) = &a.variants {
        cfg.variants = list.iter().map(|s| s.parse()).collect::<Result<Vec<Variant>, _>>()?;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    cfg.save_images |= a.save_images;
    let f = &a.flags;
    if let Some(t) = f.t_star {
        cfg.t_star = t;
    }
    cfg.guided |= f.guided;
    if let Some(s) = f.scale {
        cfg.scale = s;
    }
    if let Some(m) = &f.metric {
        cfg.metric = parse_metric(m)?;
    }
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(p) = f.patch {
        cfg.patch = p;
    }
    Ok(cfg)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut recipe = match &a.recipe {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => DatasetRecipe::default(),
    };
    recipe.count = a.count.unwrap_or(recipe.count);
    recipe.size = a.size.unwrap_or(recipe.size);
    recipe.region = a.region.unwrap_or(recipe.region);
    let m = generate_dataset(&a.out, a.seed, &recipe, a.jobs)?;
    log::info!("wrote {} samples to {}", m.images.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => TrainConfig::default(),
    };
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.hidden_channels = a.hidden.unwrap_or(cfg.hidden_channels);
    cfg.patch_size = a.crop.unwrap_or(cfg.patch_size);
    if a.t_max.is_some() {
        cfg.t_max = a.t_max;
    }
    let schedule = NoiseSchedule::linear(a.steps, a.beta_start, a.beta_end)?;
    let images = load_clean_images(&a.dataset)?;
    let (net, report) = train_conv_denoiser(&images, &schedule, &cfg)?;
    if let Some((it, loss)) = report.losses.last() {
        log::info!("final loss {loss:.5} after {it} iterations");
    }
    write_model(&a.out, &net, &schedule)?;
    Ok(())
}

fn purify(a: PurifyArgs) -> Result<()> {
    let input: Image = read_image(&a.input)?;
    let out = if let Some(k) = a.median {
        median_purify(&input, k)?
    } else {
        let model = a.model.as_ref().expect("required by clap");
        let (net, header) = read_model::<Real>(model)?;
        let schedule = header.schedule()?;
        let f = &a.flags;
        let mut cfg = ExperimentConfig::default();
        cfg.t_star = f.t_star.unwrap_or(cfg.t_star);
        cfg.scale = f.scale.unwrap_or(cfg.scale);
        cfg.seed = f.seed.unwrap_or(cfg.seed);
        if let Some(m) = &f.metric {
            cfg.metric = parse_metric(m)?;
        }
        let patch = f.patch.unwrap_or(cfg.patch);
        let pc = cfg.purify_config(f.guided);
        purify_tiled(&input, a.image_index, patch, &Denoiser::ConvNet(net), &schedule, &pc)?
    };
    write_image(&a.out, &out)?;
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let detector: Detector = a.detector.parse()?;
    let input: Image = read_image(&a.input)?;
    let heat = detector.run(&input)?;
    if a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        write_heatmap_pfm(&a.out, &heat)?;
    } else {
        write_heatmap_png16(&a.out, &heat)?;
    }
    log::info!("{detector}: mean heat {:.4}", heat.mean());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = experiment_config(&a)?;
    let report = run_experiment(&cfg)?;
    for (variant, s) in &report.summary.variants {
        log::info!(
            "{variant}: psnr {:.2} ssim {:.4} avg_w mcc {:+.4}",
            s.psnr,
            s.ssim,
            s.mcc.avg_w
        );
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.eval)?;
    match (&a.param, &a.values) {
        (Some(p), Some(v)) => {
            cfg.sweep = Some(SweepAxis {
                param: p.parse::<SweepParam>()?,
                values: v.clone(),
            })
        }
        (None, None) => {}
        _ => bail!("--param and --values must be given together"),
    }
    let rows = run_sweep(&cfg)?;
    log::info!("wrote {} sweep rows", rows.len());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => {
            ensure_parent(&a.out)?;
            train(a)
        }
        Command::Purify(a) => {
            ensure_parent(&a.out)?;
            purify(a)
        }
        Command::Detect(a) => {
            ensure_parent(&a.out)?;
            detect(a)
        }
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
