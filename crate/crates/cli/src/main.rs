use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hbe::hdr::{
    exposure_mask, generate_sve_pattern, log_tone_map, reconstruct_hdr_with, simulate_sve_capture, IrradianceNoise,
    SvePattern,
};
use hbe::io::{read_image, to_f32_precision, write_image, write_mask};
use hbe::metrics::compute_psnr;
use hbe::solver::RestorationProblem;
use hbe::synthetic::hdr_scene;
use hbe::{HbeError, ImageGrid, Result};
use hbe_cli::commands::{
    bench_tsv, degrade, metrics_against, read_problem, read_problem_files, restore_rounded, run_bench, write_problem, zoom_problem,
    Preset,
};
use hbe_cli::config::RunConfig;
use hbe_cli::report::{canonical_solver, diagnostics_json, emit, metrics_json, number, sha256_hex};
use serde_json::json;

/// Patch-based image restoration with a Normal-Wishart hyperprior.
#[derive(Parser, Debug)]
#[command(name = "hbe", version)]
struct Cli {
    /// `key = value` configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = one per core). HBE_DETERMINISTIC=1 forces serial execution.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Append the JSON-lines run report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean image -> problem directory (observed.pfm, observed.pgm, mask.pgm, var.pfm).
    Degrade(DegradeArgs),
    /// Restore a problem directory or explicit problem files.
    Restore(RestoreArgs),
    /// Denoise an image with known constant noise variance.
    Denoise(DenoiseArgs),
    /// Fill missing pixels given a mask.
    Interpolate(InterpolateArgs),
    /// Upsample by 2, 3 or 4 as an interpolation problem.
    Zoom(ZoomArgs),
    /// Simulate a single-shot SVE raw capture of an HDR scene.
    HdrSim(HdrSimArgs),
    /// Reconstruct linear irradiance from an SVE raw capture.
    HdrRestore(HdrRestoreArgs),
    /// Run the benchmark corpus and print a TSV table.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// none | random:F | zoom:Z
    #[arg(long)]
    mask: Option<String>,
    /// none | const:V | affine:A,B
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clip observed values to [0, 255].
    #[arg(long)]
    clip: bool,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Restored image (.pfm keeps full precision; .pgm is rounded).
    #[arg(long)]
    output: PathBuf,
    /// Ground truth for metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    /// Directory written by `degrade`.
    #[arg(long, conflicts_with_all = ["observed", "mask", "var"])]
    problem: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    observed: Option<PathBuf>,
    #[arg(long, requires = "observed")]
    mask: Option<PathBuf>,
    #[arg(long)]
    var: Option<PathBuf>,
    /// denoise | interpolate
    #[arg(long, default_value = "interpolate")]
    preset: String,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Noise variance.
    #[arg(long)]
    sigma2: f64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Noise variance of the known pixels (default: noiseless).
    #[arg(long)]
    sigma2: Option<f64>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct ZoomArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct HdrSimArgs {
    /// Linear irradiance scene (.pfm); omit to generate a synthetic scene.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Side of the generated scene when no input is given.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct HdrRestoreArgs {
    #[arg(long)]
    raw: PathBuf,
    /// Optical gain image written by `hdr-sim`.
    #[arg(long)]
    pattern: PathBuf,
    /// 8-bit PNG preview through a log tone map.
    #[arg(long)]
    preview: Option<PathBuf>,
    /// Use this constant irradiance-domain variance instead of the sensor model.
    #[arg(long)]
    constant_var: Option<f64>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// TSV output path (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn deterministic() -> bool {
    std::env::var("HBE_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn run(cli: Cli) -> Result<()> {
    let threads = if deterministic() { 1 } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| HbeError::Argument(format!("cannot start thread pool: {e}")))?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let report = cli.report.as_deref();
    match cli.command {
        Command::Degrade(a) => cmd_degrade(a, &mut cfg, report),
        Command::Restore(a) => {
            let problem = match (&a.problem, &a.observed, &a.mask) {
                (Some(dir), _, _) => read_problem(dir)?,
                (None, Some(obs), Some(mask)) => read_problem_files(obs, mask, a.var.as_deref(), None)?,
                _ => return Err(HbeError::Argument("restore needs --problem DIR or --observed and --mask".into())),
            };
            let preset: Preset = a.preset.parse()?;
            let inputs = json!({
                "problem": a.problem, "observed": a.observed, "mask": a.mask, "var": a.var, "preset": a.preset,
            });
            restore_and_report("restore", &problem, preset, &cfg, &a.out, inputs, report)
        }
        Command::Denoise(a) => {
            let noisy = read_image(&a.input)?;
            let problem = RestorationProblem::fully_observed(noisy, a.sigma2.max(hbe::degradation::MIN_VARIANCE))?;
            let inputs = json!({ "input": a.input, "sigma2": a.sigma2 });
            restore_and_report("denoise", &problem, Preset::Denoise, &cfg, &a.out, inputs, report)
        }
        Command::Interpolate(a) => {
            let problem = read_problem_files(&a.input, &a.mask, None, a.sigma2)?;
            let inputs = json!({ "input": a.input, "mask": a.mask, "sigma2": a.sigma2 });
            restore_and_report("interpolate", &problem, Preset::Interpolate, &cfg, &a.out, inputs, report)
        }
        Command::Zoom(a) => {
            let low = read_image(&a.input)?;
            let problem = zoom_problem(&low, a.factor, 0.0)?;
            let inputs = json!({ "input": a.input, "factor": a.factor });
            restore_and_report("zoom", &problem, Preset::Interpolate, &cfg, &a.out, inputs, report)
        }
        Command::HdrSim(a) => cmd_hdr_sim(a, &mut cfg, report),
        Command::HdrRestore(a) => cmd_hdr_restore(a, &cfg, report),
        Command::Bench(a) => {
            if let Some(seed) = a.seed {
                cfg.set("seed", &seed.to_string())?;
            }
            let start = Instant::now();
            let rows = run_bench(&cfg)?;
            let table = bench_tsv(&rows);
            match &a.output {
                Some(path) => std::fs::write(path, &table)?,
                None => print!("{table}"),
            }
            if report.is_some() {
                let line = json!({
                    "command": "bench",
                    "rows": rows.iter().map(|r| json!({
                        "image": r.image, "task": r.task, "params": r.params,
                        "psnr": number(r.psnr), "runtime": r.runtime, "seed": r.seed,
                    })).collect::<Vec<_>>(),
                    "timings": { "total_s": start.elapsed().as_secs_f64() },
                });
                emit(&line, report)?;
            }
            Ok(())
        }
    }
}

fn cmd_degrade(a: DegradeArgs, cfg: &mut RunConfig, report: Option<&Path>) -> Result<()> {
    if let Some(m) = &a.mask {
        cfg.set("mask", m)?;
    }
    if let Some(n) = &a.noise {
        cfg.set("noise", n)?;
    }
    if let Some(s) = a.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let clean = read_image(&a.input)?;
    let (problem, _) = degrade(&clean, &cfg.mask(), &cfg.noise(), cfg.seed(), a.clip || cfg.clip())?;
    write_problem(&a.out_dir, &problem)?;
    if report.is_some() {
        emit(
            &json!({
                "command": "degrade",
                "inputs": { "input": a.input, "mask": cfg.get("mask"), "noise": cfg.get("noise"), "seed": cfg.seed() },
                "outputs": a.out_dir,
            }),
            report,
        )?;
    }
    Ok(())
}

fn restore_and_report(
    command: &str,
    problem: &RestorationProblem,
    preset: Preset,
    cfg: &RunConfig,
    out: &OutputArgs,
    inputs: serde_json::Value,
    report: Option<&Path>,
) -> Result<()> {
    let mut solver = cfg.solver(preset.solver())?;
    solver.parallel = !deterministic();
    let start = Instant::now();
    let (image, diagnostics) = restore_rounded(problem, &solver)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_image(&out.output, &image)?;
    let truth = out.truth.as_ref().map(read_image).transpose()?;
    let metrics = metrics_against(&image, truth.as_ref())?;
    let line = json!({
        "command": command,
        "inputs": inputs,
        "truth": out.truth,
        "output": out.output,
        "config_hash": sha256_hex(&canonical_solver(&solver)),
        "metrics": metrics.as_ref().map(metrics_json),
        "diagnostics": diagnostics_json(&diagnostics),
        "timings": { "restore_s": elapsed },
    });
    emit(&line, report)
}

fn cmd_hdr_sim(a: HdrSimArgs, cfg: &mut RunConfig, report: Option<&Path>) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let cam = cfg.camera()?;
    let scene = match &a.input {
        Some(p) => read_image(p)?,
        None => to_f32_precision(&hdr_scene(a.size, a.size, 20.0, 2.0e6)),
    };
    let pattern = generate_sve_pattern(&cfg.sve_levels(), cfg.sve_layout(), scene.width(), scene.height(), cfg.seed())?;
    let raw = simulate_sve_capture(&scene, &pattern, &cam, cfg.seed())?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_image(a.out_dir.join("raw.pfm"), &raw)?;
    write_image(a.out_dir.join("pattern.pfm"), &pattern.gains)?;
    write_mask(a.out_dir.join("exposure_mask.pgm"), &exposure_mask(&raw, &cam))?;
    if a.input.is_none() {
        write_image(a.out_dir.join("scene.pfm"), &scene)?;
    }
    if report.is_some() {
        emit(
            &json!({ "command": "hdr-sim", "inputs": { "input": a.input, "seed": cfg.seed() }, "outputs": a.out_dir }),
            report,
        )?;
    }
    Ok(())
}

fn cmd_hdr_restore(a: HdrRestoreArgs, cfg: &RunConfig, report: Option<&Path>) -> Result<()> {
    let cam = cfg.camera()?;
    let raw = read_image(&a.raw)?;
    let gains = read_image(&a.pattern)?;
    let mut levels: Vec<f64> = gains.data().to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let pattern = SvePattern {
        gains,
        levels,
        layout: cfg.sve_layout(),
        seed: cfg.seed(),
    };
    let mut solver = cfg.solver(Preset::Interpolate.solver())?;
    solver.parallel = !deterministic();
    let noise = match a.constant_var {
        Some(v) => IrradianceNoise::Constant(v),
        None => IrradianceNoise::SensorModel,
    };
    let start = Instant::now();
    let rec = reconstruct_hdr_with(&raw, &pattern, &cam, &solver, noise)?;
    let elapsed = start.elapsed().as_secs_f64();
    let image = to_f32_precision(&rec.image);
    write_image(&a.out.output, &image)?;
    if let Some(preview) = &a.preview {
        write_png(preview, &log_tone_map(&image))?;
    }
    let metrics = match &a.out.truth {
        Some(p) => {
            let truth = read_image(p)?;
            let (_, peak) = truth.min_max();
            let scale = 255.0 / peak;
            Some(compute_psnr(&image.map(|v| v * scale), &truth.map(|v| v * scale), 255.0)?)
        }
        None => None,
    };
    let line = json!({
        "command": "hdr-restore",
        "inputs": { "raw": a.raw, "pattern": a.pattern, "constant_var": a.constant_var },
        "truth": a.out.truth,
        "output": a.out.output,
        "config_hash": sha256_hex(&canonical_solver(&solver)),
        "metrics": metrics.as_ref().map(metrics_json),
        "diagnostics": diagnostics_json(&rec.diagnostics),
        "timings": { "restore_s": elapsed },
    });
    emit(&line, report)
}

fn write_png(path: &Path, img: &ImageGrid) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer matches dimensions");
    buf.save(path)
        .map_err(|e| HbeError::Io(std::io::Error::other(format!("cannot write '{}': {e}", path.display()))))
}
