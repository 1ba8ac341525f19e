//! Operations shared by the subcommands and the benchmark runner.
//!
//! Problems on disk hold `f32` observations and variances (PFM), so every
//! in-memory path rounds to the same precision. A benchmark row therefore
//! reproduces the PSNR of the equivalent `degrade` + `restore` commands.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use hbe::degradation::{build_problem, clip_observed, MaskKind, MaskSpec, NoiseModel};
use hbe::io::{read_image, read_mask, to_f32_precision, write_image, write_mask};
use hbe::metrics::{compute_psnr, Metrics};
use hbe::solver::{restore_with, Diagnostics, RestorationProblem, RestoreHooks, SolverConfig};
use hbe::synthetic::{checkerboard, filtered_noise, plaid, straight_edges, stripes};
use hbe::{HbeError, ImageGrid, Result};

use crate::config::RunConfig;

pub const OBSERVED_FILE: &str = "observed.pfm";
pub const OBSERVED_PREVIEW_FILE: &str = "observed.pgm";
pub const MASK_FILE: &str = "mask.pgm";
pub const VAR_FILE: &str = "var.pfm";

/// Parameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Denoise,
    Interpolate,
}

impl FromStr for Preset {
    type Err = HbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Preset::Denoise),
            "interpolate" | "zoom" => Ok(Preset::Interpolate),
            other => Err(HbeError::Config(format!("unknown preset '{other}' (denoise | interpolate)"))),
        }
    }
}

impl Preset {
    pub fn solver(self) -> SolverConfig {
        match self {
            Preset::Denoise => SolverConfig::denoising(),
            Preset::Interpolate => SolverConfig::interpolation(),
        }
    }
}

/// Degrades a clean image with values rounded to file precision.
pub fn degrade(clean: &ImageGrid, mask: &MaskKind, noise: &NoiseModel, seed: u64, clip: bool) -> Result<(RestorationProblem, ImageGrid)> {
    let spec = MaskSpec {
        kind: mask.clone(),
        seed,
    };
    let (mut problem, truth) = build_problem(clean, &spec, noise, seed)?;
    if clip {
        clip_observed(&mut problem, 0.0, 255.0);
    }
    let problem = RestorationProblem::new(
        to_f32_precision(problem.observed()),
        problem.mask().clone(),
        to_f32_precision(problem.noise_var()),
    )?;
    Ok((problem, truth))
}

pub fn write_problem(dir: &Path, problem: &RestorationProblem) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_image(dir.join(OBSERVED_FILE), problem.observed())?;
    write_image(dir.join(OBSERVED_PREVIEW_FILE), problem.observed())?;
    write_mask(dir.join(MASK_FILE), problem.mask())?;
    write_image(dir.join(VAR_FILE), problem.noise_var())?;
    Ok(())
}

/// Reads a problem directory written by [`write_problem`].
pub fn read_problem(dir: &Path) -> Result<RestorationProblem> {
    read_problem_files(&dir.join(OBSERVED_FILE), &dir.join(MASK_FILE), Some(&dir.join(VAR_FILE)), None)
}

/// Assembles a problem from individual files. Without a variance file the
/// constant `default_var` is used (falling back to the noiseless floor).
pub fn read_problem_files(observed: &Path, mask: &Path, var: Option<&Path>, default_var: Option<f64>) -> Result<RestorationProblem> {
    let observed = read_image(observed)?;
    let mask = read_mask(mask)?;
    let var = match var {
        Some(p) => read_image(p)?,
        None => {
            let v = default_var.unwrap_or(hbe::degradation::MIN_VARIANCE).max(hbe::degradation::MIN_VARIANCE);
            observed.map(|_| v)
        }
    };
    let var = var.zip_map(&mask, |v, m| if m == 0.0 { hbe::model::MASKED_NOISE_PLACEHOLDER } else { v })?;
    RestorationProblem::new(observed.zip_map(&mask, |z, m| if m == 0.0 { 0.0 } else { z })?, mask, var)
}

/// Restores and rounds the result to file precision.
pub fn restore_rounded(problem: &RestorationProblem, cfg: &SolverConfig) -> Result<(ImageGrid, Diagnostics)> {
    let out = restore_with(problem, cfg, RestoreHooks::default())?;
    Ok((to_f32_precision(&out.image), out.diagnostics))
}

pub fn metrics_against(image: &ImageGrid, truth: Option<&ImageGrid>) -> Result<Option<Metrics>> {
    truth.map(|t| compute_psnr(image, t, 255.0)).transpose()
}

/// A benchmark task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Task {
    /// Additive noise of the given variance, no missing pixels.
    Denoise(f64),
    /// Random missing fraction, noiseless.
    Interpolate(f64),
    /// Known samples on a lattice of the given factor, noiseless.
    Zoom(usize),
}

impl FromStr for Task {
    type Err = HbeError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HbeError::Config(format!("invalid task '{s}' (denoise:V | interpolate:F | zoom:Z)"));
        let (kind, arg) = s.trim().split_once(':').ok_or_else(bad)?;
        match kind {
            "denoise" => Ok(Task::Denoise(arg.parse().map_err(|_| bad())?)),
            "interpolate" => Ok(Task::Interpolate(arg.parse().map_err(|_| bad())?)),
            "zoom" => Ok(Task::Zoom(arg.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Denoise(_) => write!(f, "denoise"),
            Task::Interpolate(_) => write!(f, "interpolate"),
            Task::Zoom(_) => write!(f, "zoom"),
        }
    }
}

impl Task {
    pub fn params(&self) -> String {
        match self {
            Task::Denoise(v) => format!("sigma2={v}"),
            Task::Interpolate(r) => format!("missing={r}"),
            Task::Zoom(z) => format!("factor={z}"),
        }
    }

    pub fn preset(&self) -> Preset {
        match self {
            Task::Denoise(_) => Preset::Denoise,
            _ => Preset::Interpolate,
        }
    }

    pub fn mask(&self) -> MaskKind {
        match self {
            Task::Denoise(_) => MaskKind::RandomUniform(0.0),
            Task::Interpolate(r) => MaskKind::RandomUniform(*r),
            Task::Zoom(z) => MaskKind::Zoom(*z),
        }
    }

    pub fn noise(&self) -> NoiseModel {
        match self {
            Task::Denoise(v) => NoiseModel::Constant(*v),
            _ => NoiseModel::none(),
        }
    }
}

/// Built-in synthetic images, by name.
pub fn synthetic_image(name: &str, size: usize) -> Option<ImageGrid> {
    Some(match name {
        "stripes" => stripes(size, size, 8.0, 30.0, 20.0, 235.0),
        "checkerboard" => checkerboard(size, size, 8, 40.0, 215.0),
        "noise" => filtered_noise(size, size, 2.0, 0),
        "edges" => straight_edges(size, size, 3, 0),
        "plaid" => plaid(size, size, 7.0, 20.0, 9.0, 110.0),
        _ => return None,
    })
}

/// A corpus entry: a synthetic name or an image path.
pub fn load_corpus_image(entry: &str, size: usize) -> Result<(String, ImageGrid)> {
    if let Some(img) = synthetic_image(entry, size) {
        return Ok((entry.to_string(), img));
    }
    let path = PathBuf::from(entry);
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(entry).to_string();
    Ok((name, read_image(&path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub task: String,
    pub params: String,
    /// Mean PSNR over the realizations.
    pub psnr: f64,
    /// Mean seconds per realization.
    pub runtime: f64,
    pub seed: u64,
}

/// Runs every task on every corpus image; realization `r` uses seed `seed + r`.
pub fn run_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let size = cfg.count("synthetic_size", 64);
    let realizations = cfg.count("realizations", 10);
    if realizations == 0 {
        return Err(HbeError::Config("realizations must be at least 1".into()));
    }
    let seed = cfg.seed();
    let tasks = cfg
        .list("tasks", "denoise:30,interpolate:0.7,zoom:2")
        .iter()
        .map(|t| t.parse::<Task>())
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for entry in cfg.list("corpus", "stripes,checkerboard,noise") {
        let (name, clean) = load_corpus_image(&entry, size)?;
        for task in &tasks {
            let solver = cfg.solver(task.preset().solver())?;
            let mut total_psnr = 0.0;
            let start = Instant::now();
            for r in 0..realizations as u64 {
                let (problem, truth) = degrade(&clean, &task.mask(), &task.noise(), seed.wrapping_add(r), cfg.clip())?;
                let (out, _) = restore_rounded(&problem, &solver)?;
                total_psnr += compute_psnr(&out, &truth, 255.0)?.psnr;
            }
            rows.push(BenchRow {
                image: name.clone(),
                task: task.to_string(),
                params: task.params(),
                psnr: total_psnr / realizations as f64,
                runtime: start.elapsed().as_secs_f64() / realizations as f64,
                seed,
            });
        }
    }
    Ok(rows)
}

pub fn bench_tsv(rows: &[BenchRow]) -> String {
    let mut out = String::from("image\ttask\tparams\tpsnr\truntime\tseed\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.3}\t{}\n",
            r.image, r.task, r.params, r.psnr, r.runtime, r.seed
        ));
    }
    out
}

/// Places a low-resolution image on the lattice `(i·z, j·z)` of a grid `z` times larger.
pub fn zoom_problem(low: &ImageGrid, factor: usize, noise_var: f64) -> Result<RestorationProblem> {
    if !(2..=4).contains(&factor) {
        return Err(HbeError::Argument(format!("zoom factor must be 2, 3 or 4, got {factor}")));
    }
    let (w, h) = (low.width() * factor, low.height() * factor);
    let on_lattice = |r: usize, c: usize| r % factor == 0 && c % factor == 0;
    let observed = ImageGrid::from_fn(w, h, |r, c| if on_lattice(r, c) { low.get(r / factor, c / factor) } else { 0.0 });
    let mask = ImageGrid::from_fn(w, h, |r, c| if on_lattice(r, c) { 1.0 } else { 0.0 });
    let var = mask.map(|m| {
        if m == 0.0 {
            hbe::model::MASKED_NOISE_PLACEHOLDER
        } else {
            noise_var.max(hbe::degradation::MIN_VARIANCE)
        }
    });
    RestorationProblem::new(observed, mask, var)
}
