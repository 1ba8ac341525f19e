//! The full restoration pipeline: oracle initialization, per-group
//! hyperparameter estimation, joint MAP estimation and aggregation, repeated
//! for a fixed number of outer iterations.

mod init;

pub use init::{directional_covariances, init_oracle, select_directional_class, DirectionalModel, DIRECTIONAL_CLASSES};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{HbeError, Result};
use crate::image::{ImageGrid, MaskImage, VarianceImage};
use crate::model::{minimize_f, DegradedPatch, HyperpriorParams, InnerConfig, Patch};
use crate::patch::{anchor_grid, extract_values, find_similar, Accumulator, PatchGroup, PatchIndex, SearchConfig};

/// Ridge added to every estimated `Σ₀` is `max(SIGMA0_RIDGE_REL · tr(Σ₀)/n, SIGMA0_RIDGE_FLOOR)`.
pub const SIGMA0_RIDGE_REL: f64 = 1e-6;
pub const SIGMA0_RIDGE_FLOOR: f64 = 1e-3;

/// How the first oracle is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    DirectionalGmm,
    SmoothFill,
}

impl std::str::FromStr for InitMode {
    type Err = HbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "directional-gmm" => Ok(InitMode::DirectionalGmm),
            "smooth-fill" => Ok(InitMode::SmoothFill),
            other => Err(HbeError::Config(format!(
                "unknown init mode '{other}' (directional-gmm | smooth-fill)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Fraction applied to both `P/n` and `M/m_nominal` in the κ/ν rule.
    pub pm_threshold: f64,
    pub m_nominal: f64,
    pub outer_iters: usize,
    pub inner: InnerConfig,
    pub search: SearchConfig,
    pub init_mode: InitMode,
    /// Restore groups on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::interpolation()
    }
}

impl SolverConfig {
    pub const DEFAULT_PM_THRESHOLD: f64 = 0.5;
    pub const DEFAULT_M_NOMINAL: f64 = 30.0;
    pub const DEFAULT_OUTER_ITERS: usize = 3;
    pub const DENOISING_OUTER_ITERS: usize = 1;

    /// `α_H = 1`, `α_L = 0.5`.
    pub fn interpolation() -> Self {
        Self {
            alpha_low: 0.5,
            alpha_high: 1.0,
            pm_threshold: Self::DEFAULT_PM_THRESHOLD,
            m_nominal: Self::DEFAULT_M_NOMINAL,
            outer_iters: Self::DEFAULT_OUTER_ITERS,
            inner: InnerConfig::default(),
            search: SearchConfig::default(),
            init_mode: InitMode::DirectionalGmm,
            parallel: true,
        }
    }

    /// `α_H = α_L = 100` and a single outer pass.
    ///
    /// With this much prior weight `μ̂ ≈ μ₀` and `Λ̂⁻¹ ≈ Σ₀`, so a pass is a
    /// Wiener filter around the oracle's group statistics. Repeating it only
    /// re-averages the previous oracle.
    pub fn denoising() -> Self {
        Self {
            alpha_low: 100.0,
            alpha_high: 100.0,
            outer_iters: Self::DENOISING_OUTER_ITERS,
            ..Self::interpolation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HbeError::Config(msg));
        if !(self.alpha_low > 0.0 && self.alpha_low.is_finite()) || !(self.alpha_high > 0.0 && self.alpha_high.is_finite()) {
            return bad(format!(
                "alpha_low and alpha_high must be positive, got {} and {}",
                self.alpha_low, self.alpha_high
            ));
        }
        if self.alpha_low > self.alpha_high {
            return bad(format!(
                "alpha_low ({}) must not exceed alpha_high ({})",
                self.alpha_low, self.alpha_high
            ));
        }
        if !(self.pm_threshold > 0.0 && self.pm_threshold <= 1.0) {
            return bad(format!("pm_threshold must lie in (0, 1], got {}", self.pm_threshold));
        }
        if !(self.m_nominal > 0.0 && self.m_nominal.is_finite()) {
            return bad(format!("m_nominal must be positive, got {}", self.m_nominal));
        }
        if self.outer_iters == 0 {
            return bad("outer_iters must be at least 1".into());
        }
        if self.inner.max_iters == 0 {
            return bad("inner max_iters must be at least 1".into());
        }
        if !(self.inner.rel_tol >= 0.0) {
            return bad(format!("inner rel_tol must be non-negative, got {}", self.inner.rel_tol));
        }
        self.search.validate()
    }
}

/// Observed image, degradation mask and noise variance map, pixel-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorationProblem {
    observed: ImageGrid,
    mask: MaskImage,
    noise_var: VarianceImage,
}

impl RestorationProblem {
    pub fn new(observed: ImageGrid, mask: MaskImage, noise_var: VarianceImage) -> Result<Self> {
        observed.ensure_same_shape(&mask, "mask")?;
        observed.ensure_same_shape(&noise_var, "noise variance")?;
        for (i, ((&z, &m), &v)) in observed.data().iter().zip(mask.data()).zip(noise_var.data()).enumerate() {
            let (r, c) = (i / observed.width(), i % observed.width());
            if !(0.0..=1.0).contains(&m) {
                return Err(HbeError::Argument(format!("mask at row {r}, col {c} is {m}, outside [0, 1]")));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(HbeError::Argument(format!(
                    "noise variance at row {r}, col {c} is {v}, must be positive"
                )));
            }
            if m != 0.0 && !z.is_finite() {
                return Err(HbeError::Argument(format!("observed value at row {r}, col {c} is not finite")));
            }
        }
        Ok(Self {
            observed,
            mask,
            noise_var,
        })
    }

    /// No missing pixels, constant noise variance.
    pub fn fully_observed(observed: ImageGrid, noise_var: f64) -> Result<Self> {
        let mask = observed.map(|_| 1.0);
        let var = observed.map(|_| noise_var);
        Self::new(observed, mask, var)
    }

    pub fn observed(&self) -> &ImageGrid {
        &self.observed
    }

    pub fn mask(&self) -> &MaskImage {
        &self.mask
    }

    pub fn noise_var(&self) -> &VarianceImage {
        &self.noise_var
    }

    pub fn width(&self) -> usize {
        self.observed.width()
    }

    pub fn height(&self) -> usize {
        self.observed.height()
    }

    pub(crate) fn observed_mut(&mut self) -> &mut ImageGrid {
        &mut self.observed
    }

    /// Replaces the variance map (same shape, positive entries).
    pub fn with_noise_var(&self, noise_var: VarianceImage) -> Result<Self> {
        Self::new(self.observed.clone(), self.mask.clone(), noise_var)
    }

    /// Overwrites every unobserved value with NaN. Restoration of a poisoned
    /// problem must produce exactly the same output.
    pub fn poison_unobserved(&mut self) {
        for (z, &m) in self.observed.data_mut().iter_mut().zip(self.mask.data()) {
            if m == 0.0 {
                *z = f64::NAN;
            }
        }
    }

    fn degraded_patch(&self, noise_var: &VarianceImage, idx: PatchIndex, side: usize) -> Result<DegradedPatch> {
        DegradedPatch::new(
            extract_values(&self.observed, idx, side)?,
            extract_values(&self.mask, idx, side)?,
            extract_values(noise_var, idx, side)?,
        )
    }
}

/// Estimated hyperprior and whether the single-patch fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperEstimate {
    pub params: HyperpriorParams,
    pub fallback: bool,
}

/// Ridge added to a sample covariance with trace `trace` in dimension `n`.
pub fn sigma0_ridge(trace: f64, n: usize) -> f64 {
    (SIGMA0_RIDGE_REL * trace / n as f64).max(SIGMA0_RIDGE_FLOOR)
}

/// Sample mean and unbiased sample covariance of the oracle patches, plus a
/// ridge. With fewer than two patches, `μ₀` is the patch itself and `Σ₀` the
/// ridge alone.
pub fn estimate_hyperparams(oracle_patches: &[Patch], kappa: f64, nu: f64) -> Result<HyperEstimate> {
    let first = oracle_patches
        .first()
        .ok_or_else(|| HbeError::Argument("hyperparameter estimation needs at least one patch".into()))?;
    let n = first.len();
    if let Some((i, p)) = oracle_patches.iter().enumerate().find(|(_, p)| p.len() != n) {
        return Err(HbeError::Argument(format!("patch {i} has length {}, expected {n}", p.len())));
    }
    let m = oracle_patches.len();
    if m < 2 {
        let ridge = sigma0_ridge(0.0, n);
        let params = HyperpriorParams::new(first.values.clone(), DMatrix::identity(n, n) * ridge, kappa, nu)?;
        return Ok(HyperEstimate { params, fallback: true });
    }
    let mut mu0 = DVector::zeros(n);
    for p in oracle_patches {
        mu0 += &p.values;
    }
    mu0 /= m as f64;
    let centered = DMatrix::from_fn(n, m, |j, i| oracle_patches[i].values[j] - mu0[j]);
    let mut sigma0 = &centered * centered.transpose() / (m - 1) as f64;
    let ridge = sigma0_ridge(sigma0.trace(), n);
    for j in 0..n {
        sigma0[(j, j)] += ridge;
    }
    let sigma0 = crate::linalg::symmetrize(&sigma0);
    let params = HyperpriorParams::new(mu0, sigma0, kappa, nu)?;
    Ok(HyperEstimate { params, fallback: false })
}

/// `κ = Mα`, `ν = Mα + n`, with `α = α_L` only when both the known-pixel count
/// and the group size are above threshold.
pub fn kappa_nu_rule(m: usize, known: f64, n: usize, cfg: &SolverConfig) -> (f64, f64) {
    let many_known = known > cfg.pm_threshold * n as f64;
    let many_similar = m as f64 > cfg.pm_threshold * cfg.m_nominal;
    let alpha = if many_known && many_similar {
        cfg.alpha_low
    } else {
        cfg.alpha_high
    };
    let kappa = m as f64 * alpha;
    (kappa, kappa + n as f64)
}

/// Counters collected during [`restore_with`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub outer_iterations: usize,
    /// Number of groups restored in each outer iteration.
    pub groups_per_iteration: Vec<usize>,
    /// Groups below `min_group`, restored from their anchor alone.
    pub singleton_groups: usize,
    /// Groups whose estimation failed; their oracle patches were used instead.
    pub failed_groups: usize,
    /// Messages of the first few failures.
    pub failures: Vec<String>,
    pub inner_iterations: usize,
}

const MAX_RECORDED_FAILURES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    pub image: ImageGrid,
    pub diagnostics: Diagnostics,
}

/// Optional callbacks for [`restore_with`].
#[derive(Default)]
pub struct RestoreHooks<'a> {
    /// Recomputes the noise variance map from the current oracle at the start
    /// of every outer iteration.
    pub refresh_noise: Option<&'a dyn Fn(&ImageGrid) -> Result<VarianceImage>>,
    /// Called with `(iteration, image)` after each outer iteration, 1-based.
    pub observer: Option<&'a mut dyn FnMut(usize, &ImageGrid)>,
}

pub fn restore(problem: &RestorationProblem, cfg: &SolverConfig) -> Result<ImageGrid> {
    Ok(restore_with(problem, cfg, RestoreHooks::default())?.image)
}

struct GroupOutcome {
    members: Vec<PatchIndex>,
    values: Vec<DVector<f64>>,
    singleton: bool,
    failure: Option<String>,
    inner_iterations: usize,
}

pub fn restore_with(problem: &RestorationProblem, cfg: &SolverConfig, mut hooks: RestoreHooks<'_>) -> Result<Restoration> {
    cfg.validate()?;
    let side = cfg.search.patch_side;
    let (w, h) = (problem.width(), problem.height());
    if w < side || h < side {
        return Err(HbeError::Argument(format!(
            "image {w}x{h} is smaller than the {side}x{side} patch"
        )));
    }
    let anchors = anchor_grid(w, h, side, cfg.search.step)?;
    let mut oracle = init_oracle(problem, cfg)?;
    let mut diagnostics = Diagnostics::default();

    for iteration in 1..=cfg.outer_iters {
        let noise_var = match hooks.refresh_noise {
            Some(refresh) => {
                let v = refresh(&oracle)?;
                problem.with_noise_var(v)?.noise_var
            }
            None => problem.noise_var.clone(),
        };
        let groups = collaborative_groups(&oracle, problem.mask(), &anchors, &cfg.search)?;
        let run = |group: &PatchGroup| restore_group(problem, &noise_var, &oracle, group, cfg);
        let outcomes: Vec<GroupOutcome> = if cfg.parallel {
            groups.par_iter().map(run).collect()
        } else {
            groups.iter().map(run).collect()
        };

        let mut acc = Accumulator::new(w, h, side)?;
        for outcome in &outcomes {
            for (idx, values) in outcome.members.iter().zip(&outcome.values) {
                acc.add(*idx, values.as_slice())?;
            }
            diagnostics.inner_iterations += outcome.inner_iterations;
            if outcome.singleton {
                diagnostics.singleton_groups += 1;
            }
            if let Some(msg) = &outcome.failure {
                diagnostics.failed_groups += 1;
                if diagnostics.failures.len() < MAX_RECORDED_FAILURES {
                    diagnostics.failures.push(msg.clone());
                }
            }
        }
        oracle = acc.finish()?;
        diagnostics.outer_iterations = iteration;
        diagnostics.groups_per_iteration.push(groups.len());
        if let Some(observer) = hooks.observer.as_mut() {
            observer(iteration, &oracle);
        }
    }
    Ok(Restoration {
        image: oracle,
        diagnostics,
    })
}

/// Raster sweep over the anchors; an anchor already listed as a member of an
/// earlier group is skipped. Same result as running [`find_similar`] on every
/// anchor followed by [`crate::patch::group_collaborative`], without holding
/// every group in memory.
fn collaborative_groups(oracle: &ImageGrid, mask: &MaskImage, anchors: &[PatchIndex], search: &SearchConfig) -> Result<Vec<PatchGroup>> {
    let (w, h) = (oracle.width(), oracle.height());
    let mut covered = vec![false; w * h];
    let mut groups = Vec::new();
    for &anchor in anchors {
        if covered[anchor.top * w + anchor.left] {
            continue;
        }
        let group = find_similar(oracle, mask, anchor, search)?;
        for m in &group.members {
            covered[m.top * w + m.left] = true;
        }
        groups.push(group);
    }
    Ok(groups)
}

fn restore_group(problem: &RestorationProblem, noise_var: &VarianceImage, oracle: &ImageGrid, group: &PatchGroup, cfg: &SolverConfig) -> GroupOutcome {
    let side = cfg.search.patch_side;
    let singleton = group.members.len() < cfg.search.min_group;
    let members: Vec<PatchIndex> = if singleton {
        vec![group.anchor]
    } else {
        group.members.clone()
    };
    let oracle_values: Vec<DVector<f64>> = members
        .iter()
        .map(|&idx| extract_values(oracle, idx, side).expect("anchors fit the image"))
        .collect();
    match solve_group(problem, noise_var, &oracle_values, &members, group.anchor, cfg) {
        Ok((values, inner_iterations)) => GroupOutcome {
            members,
            values,
            singleton,
            failure: None,
            inner_iterations,
        },
        Err(e) => GroupOutcome {
            failure: Some(format!("group at row {}, col {}: {e}", group.anchor.top, group.anchor.left)),
            members,
            values: oracle_values,
            singleton,
            inner_iterations: 0,
        },
    }
}

fn solve_group(
    problem: &RestorationProblem,
    noise_var: &VarianceImage,
    oracle_values: &[DVector<f64>],
    members: &[PatchIndex],
    anchor: PatchIndex,
    cfg: &SolverConfig,
) -> Result<(Vec<DVector<f64>>, usize)> {
    let side = cfg.search.patch_side;
    let n = side * side;
    let oracle_patches = oracle_values
        .iter()
        .map(|v| Patch::new(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let known: f64 = extract_values(problem.mask(), anchor, side)?.sum();
    let (kappa, nu) = kappa_nu_rule(members.len(), known, n, cfg);
    let hyper = estimate_hyperparams(&oracle_patches, kappa, nu)?.params;
    let degraded = members
        .iter()
        .map(|&idx| problem.degraded_patch(noise_var, idx, side))
        .collect::<Result<Vec<_>>>()?;
    let solution = minimize_f(&degraded, &hyper, &cfg.inner)?;
    Ok((solution.patches.into_iter().map(|p| p.values).collect(), solution.iterations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_nu_examples() {
        let den = SolverConfig::denoising();
        assert_eq!(kappa_nu_rule(20, 64.0, 64, &den), (2000.0, 2064.0));
        let interp = SolverConfig::interpolation();
        assert_eq!(kappa_nu_rule(100, 64.0, 64, &interp), (50.0, 114.0));
        // few known pixels or small groups use α_H
        assert_eq!(kappa_nu_rule(100, 10.0, 64, &interp), (100.0, 164.0));
        assert_eq!(kappa_nu_rule(10, 64.0, 64, &interp), (10.0, 74.0));
        let (k, nu) = kappa_nu_rule(1, 0.0, 64, &interp);
        assert_eq!(k, 1.0);
        assert!(nu > 63.0);
    }

    #[test]
    fn hyperparams_identical_patches() {
        let v = Patch::from_slice(&[1.0, -2.0, 3.0]).unwrap();
        let est = estimate_hyperparams(&vec![v.clone(); 5], 1.0, 5.0).unwrap();
        assert!(!est.fallback);
        assert_eq!(est.params.mu0, v.values);
        assert_eq!(est.params.sigma0, DMatrix::identity(3, 3) * SIGMA0_RIDGE_FLOOR);
    }

    #[test]
    fn hyperparams_scalar_pair() {
        let ps = [Patch::from_slice(&[1.0]).unwrap(), Patch::from_slice(&[3.0]).unwrap()];
        let est = estimate_hyperparams(&ps, 1.0, 2.0).unwrap();
        assert_eq!(est.params.mu0[0], 2.0);
        assert!((est.params.sigma0[(0, 0)] - (2.0 + SIGMA0_RIDGE_FLOOR)).abs() < 1e-15);
    }

    #[test]
    fn hyperparams_single_patch_fallback() {
        let p = Patch::from_slice(&[4.0, 5.0]).unwrap();
        let est = estimate_hyperparams(&[p.clone()], 1.0, 3.0).unwrap();
        assert!(est.fallback);
        assert_eq!(est.params.mu0, p.values);
        assert!(estimate_hyperparams(&[], 1.0, 3.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let mut c = SolverConfig::interpolation();
        c.alpha_low = 2.0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::interpolation();
        c.outer_iters = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn problem_validation() {
        let img = ImageGrid::filled(4, 4, 1.0);
        assert!(RestorationProblem::fully_observed(img.clone(), 0.0).is_err());
        let mut obs = img.clone();
        obs.set(1, 1, f64::NAN);
        assert!(RestorationProblem::fully_observed(obs.clone(), 1.0).is_err());
        let mut mask = img.clone();
        mask.set(1, 1, 0.0);
        assert!(RestorationProblem::new(obs, mask, img.clone()).is_ok());
    }

    #[test]
    fn identity_problem_is_preserved() {
        let clean = ImageGrid::from_fn(24, 24, |r, c| (((r * 3 + c * 5) % 17) as f64) * 10.0 + if c > 12 { 40.0 } else { 0.0 });
        let problem = RestorationProblem::fully_observed(clean.clone(), 1e-8).unwrap();
        let mut cfg = SolverConfig::interpolation();
        cfg.outer_iters = 1;
        let out = restore(&problem, &cfg).unwrap();
        for (a, b) in out.data().iter().zip(clean.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn parallel_matches_serial_and_poison_is_ignored() {
        let clean = ImageGrid::from_fn(20, 20, |r, c| 100.0 + 50.0 * ((r as f64) * 0.7).sin() + c as f64);
        let (problem, _) = crate::degradation::build_problem(
            &clean,
            &crate::degradation::MaskSpec::random(0.5, 11),
            &crate::degradation::NoiseModel::Constant(4.0),
            12,
        )
        .unwrap();
        let mut cfg = SolverConfig::interpolation();
        cfg.outer_iters = 2;
        let a = restore(&problem, &cfg).unwrap();
        cfg.parallel = false;
        let b = restore(&problem, &cfg).unwrap();
        assert_eq!(a, b);
        let mut poisoned = problem.clone();
        poisoned.poison_unobserved();
        let c = restore(&poisoned, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn observer_sees_every_iteration() {
        let clean = ImageGrid::from_fn(16, 16, |r, c| (r + c) as f64);
        let problem = RestorationProblem::fully_observed(clean, 1.0).unwrap();
        let mut cfg = SolverConfig::denoising();
        cfg.outer_iters = 2;
        let mut seen = Vec::new();
        let mut obs = |it: usize, img: &ImageGrid| seen.push((it, img.len()));
        let res = restore_with(
            &problem,
            &cfg,
            RestoreHooks {
                refresh_noise: None,
                observer: Some(&mut obs),
            },
        )
        .unwrap();
        assert_eq!(seen, vec![(1, 256), (2, 256)]);
        assert_eq!(res.diagnostics.outer_iterations, 2);
        assert_eq!(res.diagnostics.failed_groups, 0);
    }
}
