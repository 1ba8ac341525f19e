//! Single-shot HDR from a spatially varying exposure (SVE) sensor.
//!
//! Each pixel `p` has an optical gain `o_p` and a PRNU factor `a_p`. Its raw value
//! follows `Z ~ N(g_p·C + μ_R, α·g_p·C + σ²_R)` with `g_p = α·o_p·a_p·τ`, clipped to
//! `[0, z_sat]`. Raw values strictly inside `(μ_R, z_sat)` are mapped to the
//! irradiance domain and the rest are treated as missing.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{HbeError, Result};
use crate::image::{ImageGrid, MaskImage, VarianceImage};
use crate::rng::{global_rng, mix_seed, row_rng, TAG_CAPTURE, TAG_PATTERN};
use crate::solver::{restore_with, Restoration, RestorationProblem, RestoreHooks, SolverConfig};

/// Reconstruction refuses inputs with a larger masked fraction.
pub const MAX_MASKED_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    /// Camera gain `α`.
    pub gain: f64,
    /// Per-pixel PRNU factors `a_p`; `None` means `a_p = 1`.
    pub prnu: Option<ImageGrid>,
    /// Exposure time `τ` in seconds.
    pub tau: f64,
    pub mu_r: f64,
    pub var_r: f64,
    pub z_sat: f64,
}

impl Default for CameraParams {
    /// `α = 0.87`, `σ²_R = 30`, `μ_R = 2048`, `z_sat = 15000`, `τ = 1/200`.
    fn default() -> Self {
        Self {
            gain: 0.87,
            prnu: None,
            tau: 1.0 / 200.0,
            mu_r: 2048.0,
            var_r: 30.0,
            z_sat: 15000.0,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HbeError::Argument(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.gain, "camera gain")?;
        positive(self.tau, "exposure time")?;
        positive(self.var_r, "readout variance")?;
        if !(self.mu_r.is_finite() && self.z_sat.is_finite() && self.z_sat > self.mu_r) {
            return Err(HbeError::Argument(format!(
                "saturation {} must exceed readout mean {}",
                self.z_sat, self.mu_r
            )));
        }
        if let Some(prnu) = &self.prnu {
            if prnu.data().iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(HbeError::Argument("PRNU factors must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SveLayout {
    /// Levels tiled over a `k×k` super-pixel, `k = ⌈√L⌉`.
    Regular,
    /// Independent, equiprobable levels per pixel.
    Nonregular,
}

impl FromStr for SveLayout {
    type Err = HbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "regular" => Ok(SveLayout::Regular),
            "nonregular" => Ok(SveLayout::Nonregular),
            other => Err(HbeError::Config(format!("unknown SVE layout '{other}' (regular | nonregular)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvePattern {
    /// Optical gain `o_p` per pixel.
    pub gains: ImageGrid,
    pub levels: Vec<f64>,
    pub layout: SveLayout,
    pub seed: u64,
}

/// The default level set `{1, 8, 64, 512}`.
pub fn default_levels() -> Vec<f64> {
    vec![1.0, 8.0, 64.0, 512.0]
}

pub fn generate_sve_pattern(levels: &[f64], layout: SveLayout, width: usize, height: usize, seed: u64) -> Result<SvePattern> {
    if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(HbeError::Argument("SVE levels must be a non-empty list of positive values".into()));
    }
    if width == 0 || height == 0 {
        return Err(HbeError::Argument("pattern dimensions must be positive".into()));
    }
    let count = levels.len();
    let gains = match layout {
        SveLayout::Regular => {
            let k = (count as f64).sqrt().ceil() as usize;
            ImageGrid::from_fn(width, height, |r, c| levels[((r % k) * k + c % k) % count])
        }
        SveLayout::Nonregular => {
            let mut rng = global_rng(mix_seed(seed, TAG_PATTERN));
            ImageGrid::from_fn(width, height, |_, _| levels[rng.random_range(0..count)])
        }
    };
    Ok(SvePattern {
        gains,
        levels: levels.to_vec(),
        layout,
        seed,
    })
}

/// `g_p = α·(o_p·a_p)·τ`. The product `o_p·a_p` is formed first so that moving
/// PRNU into the optical gains leaves every result bit-identical.
fn effective_gains(pattern: &SvePattern, cam: &CameraParams, like: &ImageGrid) -> Result<ImageGrid> {
    cam.validate()?;
    like.ensure_same_shape(&pattern.gains, "SVE pattern")?;
    let oa = match &cam.prnu {
        Some(prnu) => pattern.gains.zip_map(prnu, |o, a| o * a)?,
        None => pattern.gains.clone(),
    };
    Ok(oa.map(|oa| cam.gain * oa * cam.tau))
}

/// Noiseless, unclipped raw values `g_p·C + μ_R`.
pub fn expected_raw(irradiance: &ImageGrid, pattern: &SvePattern, cam: &CameraParams) -> Result<ImageGrid> {
    let g = effective_gains(pattern, cam, irradiance)?;
    irradiance.zip_map(&g, |c, g| g * c + cam.mu_r)
}

pub fn simulate_sve_capture(irradiance: &ImageGrid, pattern: &SvePattern, cam: &CameraParams, seed: u64) -> Result<ImageGrid> {
    if irradiance.data().iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(HbeError::Argument("irradiance must be finite and non-negative".into()));
    }
    let g = effective_gains(pattern, cam, irradiance)?;
    let seed = mix_seed(seed, TAG_CAPTURE);
    let w = irradiance.width();
    let mut raw = irradiance.clone();
    raw.data_mut().par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let mut rng = row_rng(seed, row);
        for (z, &gp) in out.iter_mut().zip(g.row(row)) {
            let c = *z;
            let mean = gp * c + cam.mu_r;
            let var = cam.gain * gp * c + cam.var_r;
            let n: f64 = StandardNormal.sample(&mut rng);
            *z = (mean + var.sqrt() * n).clamp(0.0, cam.z_sat);
        }
    });
    Ok(raw)
}

/// `1` where `μ_R < Z < z_sat`, else `0`.
pub fn exposure_mask(raw: &ImageGrid, cam: &CameraParams) -> MaskImage {
    raw.map(|z| if z > cam.mu_r && z < cam.z_sat { 1.0 } else { 0.0 })
}

/// `Y = (Z − μ_R)/g_p`.
pub fn raw_to_irradiance(raw: &ImageGrid, pattern: &SvePattern, cam: &CameraParams) -> Result<ImageGrid> {
    let g = effective_gains(pattern, cam, raw)?;
    raw.zip_map(&g, |z, g| (z - cam.mu_r) / g)
}

/// `(α·g_p·D_p·max(Ĉ, 0) + σ²_R)/g_p²`.
pub fn irradiance_noise_var(oracle: &ImageGrid, mask: &MaskImage, pattern: &SvePattern, cam: &CameraParams) -> Result<VarianceImage> {
    oracle.ensure_same_shape(mask, "exposure mask")?;
    let g = effective_gains(pattern, cam, oracle)?;
    let shot = oracle.zip_map(mask, |c, d| d * c.max(0.0))?;
    shot.zip_map(&g, |cd, g| (cam.gain * g * cd + cam.var_r) / (g * g))
}

/// Noise variances used for the irradiance-domain restoration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IrradianceNoise {
    /// Sensor model evaluated at the current oracle, refreshed each outer iteration.
    SensorModel,
    /// A fixed variance everywhere, for noiseless simulations.
    Constant(f64),
}

pub fn reconstruct_hdr(raw: &ImageGrid, pattern: &SvePattern, cam: &CameraParams, cfg: &SolverConfig) -> Result<ImageGrid> {
    Ok(reconstruct_hdr_with(raw, pattern, cam, cfg, IrradianceNoise::SensorModel)?.image)
}

pub fn reconstruct_hdr_with(raw: &ImageGrid, pattern: &SvePattern, cam: &CameraParams, cfg: &SolverConfig, noise: IrradianceNoise) -> Result<Restoration> {
    let mask = exposure_mask(raw, cam);
    let masked = mask.data().iter().filter(|&&d| d == 0.0).count() as f64 / mask.len() as f64;
    if masked > MAX_MASKED_FRACTION {
        return Err(HbeError::Domain(format!(
            "{:.1}% of raw pixels are saturated or under-exposed (limit {:.0}%); the scene dynamic range exceeds the exposure pattern coverage",
            100.0 * masked,
            100.0 * MAX_MASKED_FRACTION
        )));
    }
    let y = raw_to_irradiance(raw, pattern, cam)?;
    let observed = y.zip_map(&mask, |v, d| if d == 0.0 { 0.0 } else { v })?;
    match noise {
        IrradianceNoise::Constant(v) => {
            let problem = RestorationProblem::new(observed, mask, y.map(|_| v))?;
            restore_with(&problem, cfg, RestoreHooks::default())
        }
        IrradianceNoise::SensorModel => {
            let initial = irradiance_noise_var(&observed, &mask, pattern, cam)?;
            let problem = RestorationProblem::new(observed, mask.clone(), initial)?;
            let refresh = |oracle: &ImageGrid| irradiance_noise_var(oracle, &mask, pattern, cam);
            restore_with(
                &problem,
                cfg,
                RestoreHooks {
                    refresh_noise: Some(&refresh),
                    observer: None,
                },
            )
        }
    }
}

/// Display mapping `255·log(1 + C/C_med)/log(1 + C_max/C_med)`, negatives clamped to 0.
pub fn log_tone_map(irradiance: &ImageGrid) -> ImageGrid {
    let mut sorted: Vec<f64> = irradiance.data().iter().map(|v| v.max(0.0)).collect();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2].max(f64::MIN_POSITIVE);
    let max = *sorted.last().expect("non-empty image");
    let denom = (1.0 + max / med).ln();
    if denom <= 0.0 {
        return irradiance.map(|_| 0.0);
    }
    irradiance.map(|c| 255.0 * (1.0 + c.max(0.0) / med).ln() / denom)
}
