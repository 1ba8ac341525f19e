//! Synthetic degradations: random and zoom masks, Gaussian noise with
//! constant, per-pixel or signal-dependent variance, and problem assembly.

use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{HbeError, Result};
use crate::image::{ImageGrid, MaskImage, VarianceImage};
use crate::model::MASKED_NOISE_PLACEHOLDER;
use crate::rng::{global_rng, mix_seed, row_rng, TAG_MASK, TAG_NOISE};
use crate::solver::RestorationProblem;

/// Smallest variance any noise model produces.
pub const MIN_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Constant(f64),
    PerPixel(VarianceImage),
    /// `var(p) = gain · C(p) + offset`.
    AffineSignal { gain: f64, offset: f64 },
}

impl NoiseModel {
    /// Noise-free model (variances clamp to [`MIN_VARIANCE`]).
    pub fn none() -> Self {
        NoiseModel::Constant(0.0)
    }

    /// Per-pixel variances for a given clean image, clamped at [`MIN_VARIANCE`].
    pub fn variance_map(&self, clean: &ImageGrid) -> Result<VarianceImage> {
        let map = match self {
            NoiseModel::Constant(v) => {
                check_finite(*v, "constant variance")?;
                clean.map(|_| *v)
            }
            NoiseModel::PerPixel(var) => {
                clean.ensure_same_shape(var, "per-pixel variance")?;
                var.clone()
            }
            NoiseModel::AffineSignal { gain, offset } => {
                check_finite(*gain, "affine gain")?;
                check_finite(*offset, "affine offset")?;
                clean.map(|c| gain * c + offset)
            }
        };
        if !map.is_finite() {
            return Err(HbeError::Argument("noise variance map is not finite".into()));
        }
        Ok(map.map(|v| v.max(MIN_VARIANCE)))
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(HbeError::Argument(format!("{what} must be finite, got {v}")))
    }
}

impl FromStr for NoiseModel {
    type Err = HbeError;

    /// `none`, `const:<var>`, `affine:<gain>,<offset>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || HbeError::Config(format!("invalid noise spec '{s}' (none | const:V | affine:A,B)"));
        let s = s.trim();
        if s == "none" {
            return Ok(NoiseModel::none());
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "const" => {
                let v: f64 = arg.trim().parse().map_err(|_| bad())?;
                if !(v >= 0.0) {
                    return Err(bad());
                }
                Ok(NoiseModel::Constant(v))
            }
            "affine" => {
                let (a, b) = arg.split_once(',').ok_or_else(bad)?;
                Ok(NoiseModel::AffineSignal {
                    gain: a.trim().parse().map_err(|_| bad())?,
                    offset: b.trim().parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    /// Fraction of pixels removed, in `[0, 1)`.
    RandomUniform(f64),
    /// Known samples on the lattice `(i·z, j·z)`, `z ∈ {2, 3, 4}`.
    Zoom(usize),
    Explicit(MaskImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub seed: u64,
}

impl MaskSpec {
    pub fn full() -> Self {
        Self {
            kind: MaskKind::RandomUniform(0.0),
            seed: 0,
        }
    }

    pub fn random(fraction: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::RandomUniform(fraction),
            seed,
        }
    }

    pub fn zoom(factor: usize) -> Self {
        Self {
            kind: MaskKind::Zoom(factor),
            seed: 0,
        }
    }
}

impl FromStr for MaskKind {
    type Err = HbeError;

    /// `none`, `random:<fraction>`, `zoom:<factor>`. Explicit masks come from files.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || HbeError::Config(format!("invalid mask spec '{s}' (none | random:F | zoom:Z)"));
        let s = s.trim();
        if s == "none" {
            return Ok(MaskKind::RandomUniform(0.0));
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "random" => Ok(MaskKind::RandomUniform(arg.trim().parse().map_err(|_| bad())?)),
            "zoom" => Ok(MaskKind::Zoom(arg.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Builds the degradation mask (`1` = observed, `0` = missing).
pub fn make_mask(spec: &MaskSpec, width: usize, height: usize) -> Result<MaskImage> {
    if width == 0 || height == 0 {
        return Err(HbeError::Argument("mask dimensions must be positive".into()));
    }
    match &spec.kind {
        MaskKind::RandomUniform(rho) => {
            if !(0.0..1.0).contains(rho) {
                return Err(HbeError::Argument(format!(
                    "missing fraction must lie in [0, 1), got {rho}"
                )));
            }
            let total = width * height;
            let missing = (rho * total as f64).round() as usize;
            let mut data = vec![1.0; total];
            let mut rng = global_rng(mix_seed(spec.seed, TAG_MASK));
            for i in index::sample(&mut rng, total, missing) {
                data[i] = 0.0;
            }
            ImageGrid::new(width, height, data)
        }
        MaskKind::Zoom(z) => {
            if !(2..=4).contains(z) {
                return Err(HbeError::Argument(format!("zoom factor must be 2, 3 or 4, got {z}")));
            }
            Ok(ImageGrid::from_fn(width, height, |r, c| {
                if r % z == 0 && c % z == 0 {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        MaskKind::Explicit(mask) => {
            if mask.width() != width || mask.height() != height {
                return Err(HbeError::Argument(format!(
                    "explicit mask is {}x{}, expected {width}x{height}",
                    mask.width(),
                    mask.height()
                )));
            }
            if mask.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(HbeError::Argument("explicit mask entries must lie in [0, 1]".into()));
            }
            Ok(mask.clone())
        }
    }
}

/// Adds zero-mean Gaussian noise; returns the noisy image and the variance map used.
///
/// No clipping or quantization is applied.
pub fn apply_noise(clean: &ImageGrid, model: &NoiseModel, seed: u64) -> Result<(ImageGrid, VarianceImage)> {
    if !clean.is_finite() {
        return Err(HbeError::Argument("clean image has non-finite values".into()));
    }
    let var = model.variance_map(clean)?;
    let seed = mix_seed(seed, TAG_NOISE);
    let w = clean.width();
    let mut noisy = clean.clone();
    noisy
        .data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, out)| {
            let mut rng = row_rng(seed, row);
            let vrow = var.row(row);
            for (x, v) in out.iter_mut().zip(vrow) {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x += v.sqrt() * g;
            }
        });
    Ok((noisy, var))
}

/// `observed = mask ⊙ (clean + noise)`, with zeros at missing pixels and a
/// placeholder variance there. Returns the problem and the ground truth.
pub fn build_problem(clean: &ImageGrid, mask_spec: &MaskSpec, noise: &NoiseModel, seed: u64) -> Result<(RestorationProblem, ImageGrid)> {
    let mask = make_mask(mask_spec, clean.width(), clean.height())?;
    let (noisy, var) = apply_noise(clean, noise, seed)?;
    let observed = noisy.zip_map(&mask, |z, m| if m == 0.0 { 0.0 } else { m * z })?;
    let noise_var = var.zip_map(&mask, |v, m| if m == 0.0 { MASKED_NOISE_PLACEHOLDER } else { v })?;
    let problem = RestorationProblem::new(observed, mask, noise_var)?;
    Ok((problem, clean.clone()))
}

/// Clamps observed values to `[lo, hi]` (optional post-processing for
/// experiments that want saturated 8-bit style data).
pub fn clip_observed(problem: &mut RestorationProblem, lo: f64, hi: f64) {
    for v in problem.observed_mut().data_mut() {
        *v = v.clamp(lo, hi);
    }
}
