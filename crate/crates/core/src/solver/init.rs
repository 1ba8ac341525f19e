//! First oracle: each patch is restored with the best of a fixed set of
//! Gaussian models (18 edge orientations and one smooth DCT model), or by a
//! harmonic fill.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::baseline::smooth_fill;
use crate::error::Result;
use crate::image::ImageGrid;
use crate::linalg::{symmetrize, Cholesky};
use crate::patch::{anchor_grid, extract_values, Accumulator};

use super::{InitMode, RestorationProblem, SolverConfig};

/// 18 orientations plus the DCT model.
pub const DIRECTIONAL_CLASSES: usize = 19;
const ORIENTATIONS: usize = 18;
/// Weight of the identity blended into every class covariance.
const CLASS_RIDGE: f64 = 0.05;
/// Sub-pixel spacing of edge offsets used to build the edge covariances.
const EDGE_OFFSET_STEP: f64 = 0.25;

/// One fixed class, with its eigendecomposition for fully observed patches.
#[derive(Debug, Clone)]
pub struct DirectionalModel {
    pub covariance: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

impl DirectionalModel {
    fn new(covariance: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(covariance.clone());
        Self {
            covariance,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
        }
    }
}

fn normalize(cov: DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let scale = n as f64 / cov.trace();
    let cov = symmetrize(&(cov * scale));
    cov * (1.0 - CLASS_RIDGE) + DMatrix::identity(n, n) * CLASS_RIDGE
}

/// Class covariances for `side × side` patches, each with trace `n`. Class `k < 18`
/// models a straight edge whose line makes angle `kπ/18` with the column axis
/// (class 9 is a vertical edge); class 18 is the DCT model.
pub fn directional_covariances(side: usize) -> Vec<DMatrix<f64>> {
    let n = side * side;
    let center = (side as f64 - 1.0) / 2.0;
    let reach = side as f64 / 2.0 + 1.0;
    let steps = (2.0 * reach / EDGE_OFFSET_STEP).round() as usize;
    let mut out = Vec::with_capacity(DIRECTIONAL_CLASSES);
    for k in 0..ORIENTATIONS {
        let theta = k as f64 * PI / ORIENTATIONS as f64;
        let (sin, cos) = theta.sin_cos();
        let mut cov = DMatrix::zeros(n, n);
        let mut v = DVector::zeros(n);
        for s in 0..=steps {
            let offset = -reach + s as f64 * EDGE_OFFSET_STEP;
            for r in 0..side {
                for c in 0..side {
                    let (x, y) = (c as f64 - center, r as f64 - center);
                    // signed distance along the normal (−sinθ, cosθ)
                    let d = -sin * x + cos * y - offset;
                    v[r * side + c] = (d + 0.5).clamp(0.0, 1.0);
                }
            }
            let dc = v.mean();
            v.add_scalar_mut(-dc);
            cov.ger(1.0, &v, &v, 1.0);
        }
        out.push(normalize(cov, n));
    }
    let alpha = |u: usize| {
        if u == 0 {
            (1.0 / side as f64).sqrt()
        } else {
            (2.0 / side as f64).sqrt()
        }
    };
    let mut cov = DMatrix::zeros(n, n);
    for u in 0..side {
        for v in 0..side {
            let basis = DVector::from_fn(n, |j, _| {
                let (r, c) = ((j / side) as f64, (j % side) as f64);
                alpha(u) * alpha(v) * (PI * (2.0 * r + 1.0) * u as f64 / (2.0 * side as f64)).cos()
                    * (PI * (2.0 * c + 1.0) * v as f64 / (2.0 * side as f64)).cos()
            });
            cov.ger(1.0 / (1.0 + (u + v) as f64), &basis, &basis, 1.0);
        }
    }
    out.push(normalize(cov, n));
    out
}

fn directional_models(side: usize) -> Vec<DirectionalModel> {
    directional_covariances(side).into_iter().map(DirectionalModel::new).collect()
}

struct PatchStats {
    observed: Vec<usize>,
    dc: f64,
    scale: f64,
}

fn patch_stats(z: &DVector<f64>, mask: &DVector<f64>, var: &DVector<f64>) -> Option<PatchStats> {
    let observed: Vec<usize> = (0..z.len()).filter(|&j| mask[j] != 0.0).collect();
    if observed.is_empty() {
        return None;
    }
    let p = observed.len() as f64;
    let vals: Vec<f64> = observed.iter().map(|&j| z[j] / mask[j]).collect();
    let dc = vals.iter().sum::<f64>() / p;
    let spread = vals.iter().map(|v| (v - dc).powi(2)).sum::<f64>() / p;
    let noise = observed.iter().map(|&j| var[j] / (mask[j] * mask[j])).sum::<f64>() / p;
    let scale = (spread - noise).max(1e-3 * noise + 1e-12);
    Some(PatchStats { observed, dc, scale })
}

/// Log-likelihood of the observed coordinates under class `cov` scaled by
/// `scale`, with the weights `(DΣD + Σ_N)⁻¹(z − D·dc)` that restore the patch.
fn evaluate_class(z: &DVector<f64>, mask: &DVector<f64>, var: &DVector<f64>, st: &PatchStats, cov: &DMatrix<f64>) -> Option<(f64, Vec<f64>)> {
    let obs = &st.observed;
    let p = obs.len();
    let inner = DMatrix::from_fn(p, p, |a, b| {
        let (ja, jb) = (obs[a], obs[b]);
        let v = st.scale * mask[ja] * cov[(ja, jb)] * mask[jb];
        if a == b {
            v + var[ja]
        } else {
            v
        }
    });
    let chol = Cholesky::factor(&inner, "init class covariance").ok()?;
    let mut x: Vec<f64> = obs.iter().map(|&j| z[j] - mask[j] * st.dc).collect();
    chol.forward_in_place(&mut x);
    let quad: f64 = x.iter().map(|v| v * v).sum();
    let loglik = -0.5 * (chol.log_det() + quad);
    chol.backward_in_place(&mut x);
    Some((loglik, x))
}

fn restore_class(mask: &DVector<f64>, st: &PatchStats, cov: &DMatrix<f64>, weights: &[f64]) -> DVector<f64> {
    let mut out = DVector::from_element(cov.nrows(), st.dc);
    for (&j, w) in st.observed.iter().zip(weights) {
        out.axpy(st.scale * mask[j] * w, &cov.column(j), 1.0);
    }
    out
}

/// Same as [`evaluate_class`] for a fully observed patch with constant noise;
/// the second value is the patch in the class eigenbasis.
fn evaluate_class_eigen(centered: &DVector<f64>, var: f64, st: &PatchStats, model: &DirectionalModel) -> (f64, DVector<f64>) {
    let proj = model.eigvecs.tr_mul(centered);
    let mut loglik = 0.0;
    for (k, c) in proj.iter().enumerate() {
        let total = st.scale * model.eigvals[k].max(0.0) + var;
        loglik -= 0.5 * (total.ln() + c * c / total);
    }
    (loglik, proj)
}

fn restore_class_eigen(var: f64, st: &PatchStats, model: &DirectionalModel, mut proj: DVector<f64>) -> DVector<f64> {
    for (k, c) in proj.iter_mut().enumerate() {
        let s = st.scale * model.eigvals[k].max(0.0);
        *c *= s / (s + var);
    }
    (&model.eigvecs * proj).add_scalar(st.dc)
}

fn best_class(z: &DVector<f64>, mask: &DVector<f64>, var: &DVector<f64>, st: &PatchStats, models: &[DirectionalModel]) -> Option<(usize, DVector<f64>)> {
    let full = st.observed.len() == z.len() && mask.iter().all(|&m| m == 1.0) && var.iter().all(|&v| v == var[0]);
    if full {
        let centered = z.add_scalar(-st.dc);
        let mut best: Option<(usize, f64, DVector<f64>)> = None;
        for (k, model) in models.iter().enumerate() {
            let (ll, proj) = evaluate_class_eigen(&centered, var[0], st, model);
            if best.as_ref().is_none_or(|(_, b, _)| ll > *b) {
                best = Some((k, ll, proj));
            }
        }
        return best.map(|(k, _, proj)| (k, restore_class_eigen(var[0], st, &models[k], proj)));
    }
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    for (k, model) in models.iter().enumerate() {
        if let Some((ll, weights)) = evaluate_class(z, mask, var, st, &model.covariance) {
            if best.as_ref().is_none_or(|(_, b, _)| ll > *b) {
                best = Some((k, ll, weights));
            }
        }
    }
    best.map(|(k, _, w)| (k, restore_class(mask, st, &models[k].covariance, &w)))
}

/// Index of the class with the highest likelihood for one degraded patch, or
/// `None` if the patch has no observed coordinate.
pub fn select_directional_class(observed: &DVector<f64>, mask: &DVector<f64>, noise_var: &DVector<f64>, side: usize) -> Option<usize> {
    let models = directional_models(side);
    let st = patch_stats(observed, mask, noise_var)?;
    best_class(observed, mask, noise_var, &st, &models).map(|(k, _)| k)
}

/// Builds the first oracle. The output has no missing values.
pub fn init_oracle(problem: &RestorationProblem, cfg: &SolverConfig) -> Result<ImageGrid> {
    match cfg.init_mode {
        InitMode::SmoothFill => smooth_fill(problem.observed(), problem.mask()),
        InitMode::DirectionalGmm => directional_oracle(problem, cfg),
    }
}

fn directional_oracle(problem: &RestorationProblem, cfg: &SolverConfig) -> Result<ImageGrid> {
    use rayon::prelude::*;

    let side = cfg.search.patch_side;
    let (w, h) = (problem.width(), problem.height());
    let models = directional_models(side);
    let anchors = anchor_grid(w, h, side, cfg.search.step)?;

    let (mut sum, mut count) = (0.0, 0.0);
    for (&z, &m) in problem.observed().data().iter().zip(problem.mask().data()) {
        if m != 0.0 {
            sum += z / m;
            count += 1.0;
        }
    }
    let global_mean = if count > 0.0 { sum / count } else { 0.0 };

    let restore_one = |idx: &crate::patch::PatchIndex| -> Result<DVector<f64>> {
        let z = extract_values(problem.observed(), *idx, side)?;
        let mask = extract_values(problem.mask(), *idx, side)?;
        let var = extract_values(problem.noise_var(), *idx, side)?;
        let fallback = || DVector::from_element(side * side, global_mean);
        Ok(match patch_stats(&z, &mask, &var) {
            None => fallback(),
            Some(st) => match best_class(&z, &mask, &var, &st, &models) {
                Some((_, restored)) => restored,
                None => DVector::from_element(side * side, st.dc),
            },
        })
    };
    let restored: Vec<DVector<f64>> = if cfg.parallel {
        anchors.par_iter().map(restore_one).collect::<Result<_>>()?
    } else {
        anchors.iter().map(restore_one).collect::<Result<_>>()?
    };
    let mut acc = Accumulator::new(w, h, side)?;
    for (idx, values) in anchors.iter().zip(&restored) {
        acc.add(*idx, values.as_slice())?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn covariances_are_normalized_spd() {
        let covs = directional_covariances(8);
        assert_eq!(covs.len(), DIRECTIONAL_CLASSES);
        for c in &covs {
            assert!((c.trace() - 64.0).abs() < 1e-9);
            assert!(Cholesky::factor(c, "test").is_ok());
        }
    }

    #[test]
    fn vertical_edge_class_varies_along_columns_only() {
        let side = 6;
        let cov = &directional_covariances(side)[9];
        // a vertical edge makes pixels in the same column perfectly correlated
        let (a, b) = (side + 1, 4 * side + 1);
        assert!((cov[(a, a)] - CLASS_RIDGE - cov[(a, b)]).abs() < 1e-9);
    }

    #[test]
    fn full_observation_tiny_noise_is_near_identity() {
        let clean = ImageGrid::from_fn(32, 32, |r, c| 80.0 + 60.0 * ((r as f64 * 0.5).sin() * (c as f64 * 0.3).cos()) + if c > 16 { 50.0 } else { 0.0 });
        let problem = RestorationProblem::fully_observed(clean.clone(), 1e-6).unwrap();
        let oracle = init_oracle(&problem, &SolverConfig::interpolation()).unwrap();
        assert!(psnr(&oracle, &clean, 255.0).unwrap() >= 40.0);
    }

    #[test]
    fn eigen_path_matches_general_path() {
        let side = 4;
        let models = directional_models(side);
        let z = DVector::from_fn(16, |j, _| ((j * 7) % 5) as f64 * 3.0 + j as f64);
        let mask = DVector::from_element(16, 1.0);
        let var = DVector::from_element(16, 2.0);
        let st = patch_stats(&z, &mask, &var).unwrap();
        for m in &models {
            let (l1, proj) = evaluate_class_eigen(&z.add_scalar(-st.dc), 2.0, &st, m);
            let r1 = restore_class_eigen(2.0, &st, m, proj);
            let (l2, w) = evaluate_class(&z, &mask, &var, &st, &m.covariance).unwrap();
            let r2 = restore_class(&mask, &st, &m.covariance, &w);
            assert!((l1 - l2).abs() < 1e-8 * (1.0 + l1.abs()));
            assert!((r1 - r2).amax() < 1e-8);
        }
    }

    #[test]
    fn smooth_fill_mode_leaves_no_gaps() {
        let clean = ImageGrid::from_fn(16, 16, |r, c| (r * c) as f64);
        let mask = ImageGrid::from_fn(16, 16, |r, c| if (r / 4 + c / 4) % 2 == 0 { 1.0 } else { 0.0 });
        let observed = clean.zip_map(&mask, |v, m| v * m).unwrap();
        let problem = RestorationProblem::new(observed, mask, ImageGrid::filled(16, 16, 1.0)).unwrap();
        let mut cfg = SolverConfig::interpolation();
        cfg.init_mode = InitMode::SmoothFill;
        let oracle = init_oracle(&problem, &cfg).unwrap();
        assert!(oracle.is_finite());
    }
}
