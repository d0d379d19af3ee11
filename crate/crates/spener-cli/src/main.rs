//! Command-line driver: phantom generation, measurement simulation,
//! reconstruction (analytic and iterative, with ablation arms), and
//! evaluation, all wired through one JSON experiment config.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use spener::config::{preset, ExperimentConfig, MethodChoice, Precision};
use spener::io;
use spener::metrics;
use spener::scalar::Scalar;
use spener::simulate::{poisson_noise, shepp_logan, NoiseConfig};
use spener::spener::{reconstruct_observed, Ablation, IterationArtifacts};
use spener::tomo::{fbp_with, forward_project, Image};

#[derive(Parser)]
#[command(name = "spener", version, about = "Sparse-view CT reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ground-truth phantom.
    Phantom(PhantomArgs),
    /// Project the phantom and apply the dose-dependent noise model.
    Simulate(SimulateArgs),
    /// Reconstruct a sinogram (analytic or iterative).
    Reconstruct(ReconstructArgs),
    /// Compare a reconstruction against a reference image.
    Evaluate(EvaluateArgs),
    /// Print a built-in experiment preset.
    Preset(PresetArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Grid side length in pixels.
    #[arg(long)]
    size: usize,
    /// Physical pixel size; defaults to 1/size.
    #[arg(long)]
    pixel_size: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the noise seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (SPENER_THREADS env as fallback, default all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides paths.out_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    config: PathBuf,
    /// fbp | spener
    #[arg(long)]
    method: Option<String>,
    /// none | no-iteration | no-encoder | no-denoiser
    #[arg(long)]
    ablate: Option<String>,
    /// Overrides the regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstruction stem (without extension).
    #[arg(long)]
    recon: PathBuf,
    /// Reference stem (without extension).
    #[arg(long)]
    reference: PathBuf,
    /// Fixed data range; defaults to the reference max - min.
    #[arg(long)]
    data_range: Option<f64>,
    /// Report destination; defaults to `<recon>.report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PresetArgs {
    /// desk-60 | desk-90 | paper-60 | paper-90
    name: String,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors split by exit code.
enum CliError {
    /// Usage or configuration problems (exit 1).
    Config(anyhow::Error),
    /// Failures during computation or output (exit 2).
    Runtime(anyhow::Error),
}

type CliResult<T> = Result<T, CliError>;

trait IntoConfigErr<T> {
    fn or_config(self) -> CliResult<T>;
}
trait IntoRuntimeErr<T> {
    fn or_runtime(self) -> CliResult<T>;
}
impl<T, E: Into<anyhow::Error>> IntoConfigErr<T> for Result<T, E> {
    fn or_config(self) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into()))
    }
}
impl<T, E: Into<anyhow::Error>> IntoRuntimeErr<T> for Result<T, E> {
    fn or_runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Preset(args) => cmd_preset(args),
    }
}

fn init_threads(requested: Option<usize>) {
    let n = requested.or_else(|| {
        std::env::var("SPENER_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn cmd_phantom(args: PhantomArgs) -> CliResult<()> {
    let pixel_size = args.pixel_size.unwrap_or(1.0 / args.size as f64);
    let img = shepp_logan::<f32>(args.size, pixel_size as f32).or_config()?;
    std::fs::create_dir_all(&args.out).or_runtime()?;
    let stem = args.out.join("phantom");
    io::save_image(&img, &stem).or_runtime()?;
    io::save_pgm(&img, &stem, None).or_runtime()?;
    println!("wrote {}.{{f32,json,pgm}}", stem.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    init_threads(args.threads);
    let mut cfg = ExperimentConfig::from_file(&args.config).or_config()?;
    if let Some(seed) = args.seed {
        cfg.seeds.noise = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.out_dir = Some(out.display().to_string());
    }
    let out_dir = PathBuf::from(cfg.paths.out_dir.clone().unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&out_dir).or_runtime()?;

    let geom = cfg.geometry.build::<f64>().or_config()?;
    let phantom_stem = cfg
        .paths
        .phantom
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("phantom"));
    let phantom: Image<f64> = io::load_image(&phantom_stem)
        .with_context(|| format!("phantom not found at {}", phantom_stem.display()))
        .or_config()?;

    let clean = forward_project(&phantom, &geom).or_runtime()?;
    io::save_sinogram(&clean, &out_dir.join("sino_clean")).or_runtime()?;
    for &dose in &cfg.noise.doses {
        let noise = NoiseConfig::new(dose, cfg.noise.background, cfg.seeds.noise).or_config()?;
        let noisy = poisson_noise(&clean, &noise).or_runtime()?;
        let name = format!("sino_i0_{}", format_dose(dose));
        io::save_sinogram(&noisy, &out_dir.join(name)).or_runtime()?;
    }
    std::fs::write(
        out_dir.join("config.json"),
        cfg.to_json_pretty().or_runtime()?,
    )
    .or_runtime()?;
    println!(
        "wrote sino_clean and {} noisy variant(s) under {}",
        cfg.noise.doses.len(),
        out_dir.display()
    );
    Ok(())
}

fn format_dose(dose: f64) -> String {
    if dose.fract() == 0.0 && dose.abs() < 1e15 {
        format!("{}", dose as u64)
    } else {
        format!("{dose}")
    }
}

fn parse_ablation(s: &str) -> CliResult<Ablation> {
    match s {
        "none" => Ok(Ablation::None),
        "no-iteration" => Ok(Ablation::NoIteration),
        "no-encoder" => Ok(Ablation::NoEncoder),
        "no-denoiser" => Ok(Ablation::NoDenoiser),
        other => Err(CliError::Config(anyhow!(
            "unknown ablation '{other}' (expected none|no-iteration|no-encoder|no-denoiser)"
        ))),
    }
}

fn cmd_reconstruct(args: ReconstructArgs) -> CliResult<()> {
    init_threads(args.threads);
    let mut cfg = ExperimentConfig::from_file(&args.config).or_config()?;
    if let Some(out) = &args.out {
        cfg.paths.out_dir = Some(out.display().to_string());
    }
    if let Some(seed) = args.seed {
        cfg.seeds.train = seed;
    }
    if let Some(lambda) = args.lambda {
        cfg.hqs.lambda = lambda;
    }
    if let Some(method) = &args.method {
        cfg.run.method = match method.as_str() {
            "fbp" => MethodChoice::Fbp,
            "spener" => MethodChoice::Spener,
            other => {
                return Err(CliError::Config(anyhow!(
                    "unknown method '{other}' (expected fbp|spener)"
                )))
            }
        };
    }
    if let Some(ablate) = &args.ablate {
        cfg.run.ablate = parse_ablation(ablate)?;
    }

    let out_dir = PathBuf::from(cfg.paths.out_dir.clone().unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(out_dir.join("images")).or_runtime()?;
    std::fs::write(
        out_dir.join("config.json"),
        cfg.to_json_pretty().or_runtime()?,
    )
    .or_runtime()?;

    match cfg.precision {
        Precision::F32 => run_reconstruct::<f32>(&cfg, &out_dir),
        Precision::F64 => run_reconstruct::<f64>(&cfg, &out_dir),
    }
}

fn run_reconstruct<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<()> {
    let geom = cfg.geometry.build::<S>().or_config()?;
    let sino_stem = cfg
        .paths
        .sinogram
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("sino_clean"));
    let measured = io::load_sinogram::<S>(&sino_stem, &geom)
        .with_context(|| format!("sinogram not found at {}", sino_stem.display()))
        .or_config()?;

    let reference: Option<Image<S>> = match &cfg.paths.reference {
        Some(stem) => Some(
            io::load_image(Path::new(stem))
                .with_context(|| format!("reference not found at {stem}"))
                .or_config()?,
        ),
        None => None,
    };

    if cfg.run.method == MethodChoice::Fbp {
        let image = fbp_with(&measured, cfg.fbp_filter.into()).or_runtime()?;
        let stem = out_dir.join("images").join("fbp");
        io::save_image(&image, &stem).or_runtime()?;
        io::save_pgm(&image, &stem, None).or_runtime()?;
        if let Some(gt) = &reference {
            let report = metrics::evaluate(&image, gt, None).or_runtime()?;
            io::save_report(&report, &out_dir.join("report.json")).or_runtime()?;
            println!("{}", serde_json::to_string(&report).or_runtime()?);
        }
        println!("wrote {}", stem.display());
        return Ok(());
    }

    std::fs::create_dir_all(out_dir.join("checkpoints")).or_runtime()?;
    let sp = cfg.spener_config(cfg.run.ablate, None, None);
    let images = out_dir.join("images");
    let checkpoints = out_dir.join("checkpoints");
    let state = reconstruct_observed(&measured, &sp, reference.as_ref(), |it: IterationArtifacts<'_, S>| {
        if it.iteration == 1 {
            io::save_image(it.initial_prior, &images.join("z0"))?;
            io::save_pgm(it.initial_prior, &images.join("z0"), None)?;
        }
        let stem = images.join(format!("x_{:03}", it.iteration));
        io::save_image(it.extracted, &stem)?;
        io::save_pgm(it.extracted, &stem, None)?;
        it.params.save(&checkpoints.join(format!("iter_{:03}.ckpt", it.iteration)))?;
        Ok(())
    })
    .or_runtime()?;

    let final_stem = images.join("final");
    io::save_image(&state.extracted, &final_stem).or_runtime()?;
    io::save_pgm(&state.extracted, &final_stem, None).or_runtime()?;
    io::save_trace(&state.trace, &out_dir.join("trace.csv")).or_runtime()?;
    if let Some(gt) = &reference {
        let report = metrics::evaluate(&state.extracted, gt, None).or_runtime()?;
        io::save_report(&report, &out_dir.join("report.json")).or_runtime()?;
        println!("{}", serde_json::to_string(&report).or_runtime()?);
    }
    println!(
        "finished {} outer iterations; wrote {}",
        state.iteration,
        out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let recon: Image<f64> = io::load_image(&args.recon)
        .with_context(|| format!("reconstruction not found at {}", args.recon.display()))
        .or_config()?;
    let reference: Image<f64> = io::load_image(&args.reference)
        .with_context(|| format!("reference not found at {}", args.reference.display()))
        .or_config()?;
    let report = metrics::evaluate(&recon, &reference, args.data_range).or_config()?;
    let out = args
        .out
        .unwrap_or_else(|| args.recon.with_extension("report.json"));
    io::save_report(&report, &out).or_runtime()?;
    println!("{}", serde_json::to_string(&report).or_runtime()?);
    Ok(())
}

fn cmd_preset(args: PresetArgs) -> CliResult<()> {
    let cfg = preset(&args.name).or_config()?;
    let text = cfg.to_json_pretty().or_runtime()?;
    match args.out {
        Some(path) => std::fs::write(path, text).or_runtime()?,
        None => println!("{text}"),
    }
    Ok(())
}
