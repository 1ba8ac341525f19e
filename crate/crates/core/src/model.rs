//! Joint MAP estimation of a group of patches and their shared Gaussian model
//! under a Normal-Wishart hyperprior.
//!
//! The objective is
//!
//! ```text
//! f(C, μ, Λ) = ½ Σᵢ (Zᵢ − DᵢCᵢ)ᵀ Σ_Nᵢ⁻¹ (Zᵢ − DᵢCᵢ)
//!            − ((ν − n + M)/2) log|Λ|
//!            + ½ Σᵢ (Cᵢ − μ)ᵀ Λ (Cᵢ − μ)
//!            + (κ/2) (μ − μ₀)ᵀ Λ (μ − μ₀)
//!            + ½ tr(ν Σ₀ Λ)
//! ```
//!
//! It is biconvex in `(C, μ)` and `Λ`; [`minimize_f`] alternates the two
//! closed-form partial minimizers, which makes the objective non-increasing.
//!
//! Degradation operators and noise covariances are diagonal. Coordinates with a
//! zero mask entry carry no information: their observations are never read,
//! and the corresponding columns of the gain matrix are exactly zero.

use std::borrow::Borrow;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{HbeError, Result};
use crate::linalg::{quad_form, relative_asymmetry, symmetrize, Cholesky};

/// Default cap on alternating iterations.
pub const DEFAULT_MAX_ITERS: usize = 30;

/// Default relative-decrease stopping tolerance.
pub const DEFAULT_REL_TOL: f64 = 1e-6;

/// Noise variance stored at unobserved coordinates. Any positive value works,
/// since those coordinates get zero gain.
pub const MASKED_NOISE_PLACEHOLDER: f64 = 1.0;

/// A vectorized image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: DVector<f64>,
}

impl Patch {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(HbeError::Argument("patch must have at least one entry".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HbeError::Argument("patch has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// An observed patch `Zᵢ = DᵢCᵢ + Nᵢ` with diagonal `Dᵢ` and `Σ_Nᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPatch {
    pub observed: DVector<f64>,
    /// Diagonal of `Dᵢ`, entries in `[0, 1]`.
    pub mask: DVector<f64>,
    /// Diagonal of `Σ_Nᵢ`, strictly positive.
    pub noise_var: DVector<f64>,
}

impl DegradedPatch {
    /// Observations at zero-mask coordinates may be anything, including NaN.
    pub fn new(observed: DVector<f64>, mask: DVector<f64>, noise_var: DVector<f64>) -> Result<Self> {
        let n = observed.len();
        if n == 0 {
            return Err(HbeError::Argument("degraded patch must be non-empty".into()));
        }
        if mask.len() != n || noise_var.len() != n {
            return Err(HbeError::Argument(format!(
                "degraded patch lengths differ: observed {n}, mask {}, noise_var {}",
                mask.len(),
                noise_var.len()
            )));
        }
        for j in 0..n {
            let m = mask[j];
            if !(0.0..=1.0).contains(&m) {
                return Err(HbeError::Argument(format!("mask entry {j} = {m} outside [0,1]")));
            }
            let v = noise_var[j];
            if !(v > 0.0 && v.is_finite()) {
                return Err(HbeError::Argument(format!(
                    "noise variance entry {j} = {v} is not strictly positive"
                )));
            }
            if m != 0.0 && !observed[j].is_finite() {
                return Err(HbeError::Argument(format!(
                    "observed entry {j} is non-finite at an observed coordinate"
                )));
            }
        }
        Ok(Self {
            observed,
            mask,
            noise_var,
        })
    }

    /// Fully observed patch with constant noise variance.
    pub fn fully_observed(observed: DVector<f64>, noise_var: f64) -> Result<Self> {
        let n = observed.len();
        Self::new(
            observed,
            DVector::from_element(n, 1.0),
            DVector::from_element(n, noise_var),
        )
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    /// Indices with a non-zero mask entry.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.mask[j] != 0.0).collect()
    }

    /// `trace(Dᵢ)`.
    pub fn known_count(&self) -> f64 {
        self.mask.sum()
    }
}

/// Gaussian patch model `N(μ, Λ⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if precision.nrows() != n || precision.ncols() != n {
            return Err(HbeError::Argument(format!(
                "precision must be {n}x{n}, got {}x{}",
                precision.nrows(),
                precision.ncols()
            )));
        }
        if relative_asymmetry(&precision) > 1e-10 {
            return Err(HbeError::Domain("precision matrix is not symmetric".into()));
        }
        Cholesky::factor(&precision, "model precision")?;
        Ok(Self { mean, precision })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Normal-Wishart hyperprior `N(μ | μ₀, (κΛ)⁻¹) W(Λ | (νΣ₀)⁻¹, ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperpriorParams {
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub kappa: f64,
    pub nu: f64,
}

impl HyperpriorParams {
    pub fn new(mu0: DVector<f64>, sigma0: DMatrix<f64>, kappa: f64, nu: f64) -> Result<Self> {
        let n = mu0.len();
        if n == 0 {
            return Err(HbeError::Argument("hyperprior mean must be non-empty".into()));
        }
        if sigma0.nrows() != n || sigma0.ncols() != n {
            return Err(HbeError::Argument(format!(
                "sigma0 must be {n}x{n}, got {}x{}",
                sigma0.nrows(),
                sigma0.ncols()
            )));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(HbeError::Argument(format!("kappa must be positive, got {kappa}")));
        }
        if !(nu > n as f64 - 1.0 && nu.is_finite()) {
            return Err(HbeError::Argument(format!(
                "nu must exceed n - 1 = {}, got {nu}",
                n - 1
            )));
        }
        if relative_asymmetry(&sigma0) > 1e-10 {
            return Err(HbeError::Argument("sigma0 is not symmetric".into()));
        }
        Cholesky::factor(&sigma0, "hyperprior sigma0")?;
        Ok(Self {
            mu0,
            sigma0,
            kappa,
            nu,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }
}

/// Output of [`minimize_f`].
#[derive(Debug, Clone)]
pub struct MapSolution {
    pub patches: Vec<Patch>,
    pub model: GaussianModel,
    /// `f` after each full alternation.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Stopping rule for the alternating minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub max_iters: usize,
    /// Stop once `|f(l) − f(l−1)| ≤ rel_tol·|f(l−1)|`; zero disables early stopping.
    pub rel_tol: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
        }
    }
}

/// The five terms of `f`, kept apart for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub data: f64,
    pub log_det: f64,
    pub spread: f64,
    pub mean_prior: f64,
    pub trace: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.data + self.log_det + self.spread + self.mean_prior + self.trace
    }
}

/// Gain matrix `Aᵢ = Λ⁻¹Dᵢᵀ(DᵢΛ⁻¹Dᵢᵀ + Σ_Nᵢ)⁻¹`, stored by its non-zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Gain {
    n: usize,
    observed: Vec<usize>,
    /// `n × P` block of the columns listed in `observed`.
    block: DMatrix<f64>,
}

impl Gain {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// The full `n × n` matrix; unobserved columns are zero.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (k, &j) in self.observed.iter().enumerate() {
            a.set_column(j, &self.block.column(k));
        }
        a
    }

    /// `A r`, reading `r` only at observed coordinates.
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (k, &j) in self.observed.iter().enumerate() {
            let rj = r[j];
            out.axpy(rj, &self.block.column(k), 1.0);
        }
        out
    }

    /// Adds `A D` into `acc`.
    fn add_times_mask(&self, mask: &DVector<f64>, acc: &mut DMatrix<f64>) {
        for (k, &j) in self.observed.iter().enumerate() {
            let mut col = acc.column_mut(j);
            col.axpy(mask[j], &self.block.column(k), 1.0);
        }
    }
}

fn check_diag_inputs(n: usize, mask: &DVector<f64>, noise_var: &DVector<f64>) -> Result<()> {
    if mask.len() != n || noise_var.len() != n {
        return Err(HbeError::Argument(format!(
            "gain inputs must have length {n}: mask {}, noise_var {}",
            mask.len(),
            noise_var.len()
        )));
    }
    if let Some(j) = (0..n).find(|&j| !(noise_var[j] > 0.0 && noise_var[j].is_finite())) {
        return Err(HbeError::Argument(format!(
            "noise variance entry {j} = {} is not strictly positive",
            noise_var[j]
        )));
    }
    Ok(())
}

/// Computes `Aᵢ` for a given precision.
///
/// The precision is factored once to obtain the covariance; the inner matrix is
/// restricted to observed coordinates (zero-mask rows and columns decouple) and
/// solved by Cholesky for all right-hand sides at once.
pub fn compute_gain(precision: &DMatrix<f64>, mask: &DVector<f64>, noise_var: &DVector<f64>) -> Result<Gain> {
    let n = precision.nrows();
    if precision.ncols() != n {
        return Err(HbeError::Argument("precision must be square".into()));
    }
    check_diag_inputs(n, mask, noise_var)?;
    let covariance = Cholesky::factor(precision, "gain precision")?.inverse();
    gain_from_covariance(&covariance, mask, noise_var)
}

/// Same as [`compute_gain`] when the covariance `Λ⁻¹` is already at hand.
pub fn gain_from_covariance(covariance: &DMatrix<f64>, mask: &DVector<f64>, noise_var: &DVector<f64>) -> Result<Gain> {
    let n = covariance.nrows();
    check_diag_inputs(n, mask, noise_var)?;
    let observed: Vec<usize> = (0..n).filter(|&j| mask[j] != 0.0).collect();
    let p = observed.len();
    if p == 0 {
        return Ok(Gain {
            n,
            observed,
            block: DMatrix::zeros(n, 0),
        });
    }
    // inner = D Σ D + Σ_N on the observed block
    let inner = DMatrix::from_fn(p, p, |a, b| {
        let (ja, jb) = (observed[a], observed[b]);
        let v = mask[ja] * covariance[(ja, jb)] * mask[jb];
        if a == b {
            v + noise_var[ja]
        } else {
            v
        }
    });
    let chol = Cholesky::factor(&inner, "gain inner matrix").map_err(|e| match e {
        HbeError::NotPositiveDefinite { context, pivot, value } => HbeError::NotPositiveDefinite {
            context,
            pivot: observed[pivot],
            value,
        },
        other => other,
    })?;
    // A restricted to observed columns is Σ[:, obs] D (inner)⁻¹
    let sigma_obs = DMatrix::from_fn(n, p, |i, a| covariance[(i, observed[a])] * mask[observed[a]]);
    Ok(Gain {
        n,
        observed,
        block: sigma_obs * chol.inverse(),
    })
}

fn check_group(group: &[DegradedPatch], n: usize) -> Result<()> {
    if let Some((i, p)) = group.iter().enumerate().find(|(_, p)| p.len() != n) {
        return Err(HbeError::Argument(format!(
            "patch {i} has length {}, expected {n}",
            p.len()
        )));
    }
    Ok(())
}

/// `μ̂ = (κI + Σᵢ AᵢDᵢ)⁻¹ (Σᵢ AᵢZᵢ + κμ₀)`.
pub fn update_mean<G: Borrow<Gain>>(group: &[DegradedPatch], gains: &[G], hyper: &HyperpriorParams) -> Result<DVector<f64>> {
    let n = hyper.dim();
    check_group(group, n)?;
    if gains.len() != group.len() {
        return Err(HbeError::Argument(format!(
            "{} gains for {} patches",
            gains.len(),
            group.len()
        )));
    }
    if group.is_empty() {
        return Ok(hyper.mu0.clone());
    }
    let mut system = DMatrix::identity(n, n) * hyper.kappa;
    let mut rhs = &hyper.mu0 * hyper.kappa;
    for (patch, gain) in group.iter().zip(gains) {
        let gain = gain.borrow();
        if gain.dim() != n {
            return Err(HbeError::Argument("gain dimension mismatch".into()));
        }
        gain.add_times_mask(&patch.mask, &mut system);
        rhs += gain.apply(&patch.observed);
    }
    let mean = system
        .lu()
        .solve(&rhs)
        .ok_or(HbeError::Singular("mean update"))?;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(HbeError::Singular("mean update"));
    }
    Ok(mean)
}

/// `Ĉᵢ = Aᵢ(Zᵢ − Dᵢμ̂) + μ̂`.
pub fn update_patches<G: Borrow<Gain>>(group: &[DegradedPatch], gains: &[G], mean: &DVector<f64>) -> Result<Vec<Patch>> {
    let n = mean.len();
    check_group(group, n)?;
    if gains.len() != group.len() {
        return Err(HbeError::Argument(format!(
            "{} gains for {} patches",
            gains.len(),
            group.len()
        )));
    }
    group
        .iter()
        .zip(gains)
        .map(|(patch, gain)| {
            let gain = gain.borrow();
            if gain.dim() != n {
                return Err(HbeError::Argument("gain dimension mismatch".into()));
            }
            let residual = &patch.observed - patch.mask.component_mul(mean);
            Ok(Patch {
                values: gain.apply(&residual) + mean,
            })
        })
        .collect()
}

/// The covariance-side matrix `Λ̂⁻¹`, symmetrized, together with its factor.
fn updated_covariance(patches: &[Patch], mean: &DVector<f64>, hyper: &HyperpriorParams) -> Result<(DMatrix<f64>, Cholesky)> {
    let n = hyper.dim();
    if mean.len() != n {
        return Err(HbeError::Argument("mean dimension mismatch".into()));
    }
    if let Some(p) = patches.iter().find(|p| p.len() != n) {
        return Err(HbeError::Argument(format!(
            "patch of length {} in a dimension-{n} group",
            p.len()
        )));
    }
    let m = patches.len() as f64;
    let dof = hyper.nu + m - n as f64;
    if !(dof > 0.0) {
        return Err(HbeError::Argument(format!(
            "precision update needs nu + M - n > 0, got {dof}"
        )));
    }
    let mut scatter = &hyper.sigma0 * hyper.nu;
    let d = mean - &hyper.mu0;
    scatter.ger(hyper.kappa, &d, &d, 1.0);
    for patch in patches {
        let e = &patch.values - mean;
        scatter.ger(1.0, &e, &e, 1.0);
    }
    let covariance = symmetrize(&(scatter / dof));
    let chol = Cholesky::factor(&covariance, "precision update")?;
    Ok((covariance, chol))
}

/// `Λ̂ = (ν + M − n) [νΣ₀ + κ(μ−μ₀)(μ−μ₀)ᵀ + Σᵢ(Cᵢ−μ)(Cᵢ−μ)ᵀ]⁻¹`.
pub fn update_precision(patches: &[Patch], mean: &DVector<f64>, hyper: &HyperpriorParams) -> Result<DMatrix<f64>> {
    let (_, chol) = updated_covariance(patches, mean, hyper)?;
    Ok(chol.inverse())
}

/// Term-by-term evaluation of `f`.
pub fn objective_terms(
    group: &[DegradedPatch],
    patches: &[Patch],
    model: &GaussianModel,
    hyper: &HyperpriorParams,
) -> Result<ObjectiveTerms> {
    let n = hyper.dim();
    check_group(group, n)?;
    if patches.len() != group.len() {
        return Err(HbeError::Argument(format!(
            "{} restored patches for {} observations",
            patches.len(),
            group.len()
        )));
    }
    if model.dim() != n || model.precision.nrows() != n || patches.iter().any(|p| p.len() != n) {
        return Err(HbeError::Argument("objective dimension mismatch".into()));
    }
    let chol = Cholesky::factor(&model.precision, "objective precision").map_err(|e| {
        HbeError::Domain(format!("precision is not positive definite ({e})"))
    })?;
    let m = group.len() as f64;
    let lambda = &model.precision;

    let mut data = 0.0;
    for (obs, c) in group.iter().zip(patches) {
        for j in 0..n {
            let mj = obs.mask[j];
            if mj != 0.0 {
                let r = obs.observed[j] - mj * c.values[j];
                data += r * r / obs.noise_var[j];
            }
        }
    }
    let spread: f64 = patches
        .iter()
        .map(|c| quad_form(lambda, &(&c.values - &model.mean)))
        .sum();
    let dm = &model.mean - &hyper.mu0;
    let trace = (hyper.sigma0.component_mul(&lambda.transpose())).sum();

    Ok(ObjectiveTerms {
        data: 0.5 * data,
        log_det: -0.5 * (hyper.nu - n as f64 + m) * chol.log_det(),
        spread: 0.5 * spread,
        mean_prior: 0.5 * hyper.kappa * quad_form(lambda, &dm),
        trace: 0.5 * hyper.nu * trace,
    })
}

/// The joint-MAP objective `f`.
pub fn objective_f(
    group: &[DegradedPatch],
    patches: &[Patch],
    model: &GaussianModel,
    hyper: &HyperpriorParams,
) -> Result<f64> {
    objective_terms(group, patches, model, hyper).map(|t| t.total())
}

/// Patches of a group that share one mask and noise pattern, and hence one gain.
struct Slot {
    mask: DVector<f64>,
    noise_var: DVector<f64>,
    observed: Vec<usize>,
    members: Vec<usize>,
    /// Observations of the members at the observed coordinates, `P × |members|`.
    z_obs: DMatrix<f64>,
    /// Row sums of `z_obs`.
    z_sum: DVector<f64>,
}

fn group_slots(group: &[DegradedPatch]) -> Vec<Slot> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut slots: Vec<Slot> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, patch) in group.iter().enumerate() {
        let key: Vec<u64> = patch.mask.iter().chain(patch.noise_var.iter()).map(|v| v.to_bits()).collect();
        let slot = *seen.entry(key).or_insert_with(|| {
            slots.push(Slot {
                mask: patch.mask.clone(),
                noise_var: patch.noise_var.clone(),
                observed: patch.observed_indices(),
                members: Vec::new(),
                z_obs: DMatrix::zeros(0, 0),
                z_sum: DVector::zeros(0),
            });
            members.push(Vec::new());
            slots.len() - 1
        });
        members[slot].push(i);
    }
    for (slot, members) in slots.iter_mut().zip(members) {
        let z_obs = DMatrix::from_fn(slot.observed.len(), members.len(), |a, k| group[members[k]].observed[slot.observed[a]]);
        slot.z_sum = z_obs.column_sum();
        slot.z_obs = z_obs;
        slot.members = members;
    }
    slots
}

/// One `(C, μ)` step for all slots at a given covariance; patches are the
/// columns of the returned matrix.
fn joint_step(slots: &[Slot], m: usize, covariance: &DMatrix<f64>, hyper: &HyperpriorParams) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = hyper.dim();
    let gains = slots
        .iter()
        .map(|s| gain_from_covariance(covariance, &s.mask, &s.noise_var))
        .collect::<Result<Vec<_>>>()?;
    let mut system = DMatrix::identity(n, n) * hyper.kappa;
    let mut rhs = &hyper.mu0 * hyper.kappa;
    for (slot, gain) in slots.iter().zip(&gains) {
        let count = slot.members.len() as f64;
        for (k, &j) in slot.observed.iter().enumerate() {
            system.column_mut(j).axpy(count * slot.mask[j], &gain.block.column(k), 1.0);
        }
        rhs.gemv(1.0, &gain.block, &slot.z_sum, 1.0);
    }
    let mean = system.lu().solve(&rhs).ok_or(HbeError::Singular("mean update"))?;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(HbeError::Singular("mean update"));
    }
    let mut patches = DMatrix::zeros(n, m);
    for (slot, gain) in slots.iter().zip(&gains) {
        let mut residual = slot.z_obs.clone();
        for (a, &j) in slot.observed.iter().enumerate() {
            let shift = slot.mask[j] * mean[j];
            residual.row_mut(a).add_scalar_mut(-shift);
        }
        let restored = &gain.block * residual;
        for (k, &i) in slot.members.iter().enumerate() {
            let mut col = patches.column_mut(i);
            col.copy_from(&restored.column(k));
            col += &mean;
        }
    }
    Ok((patches, mean))
}

/// `f` at `(C, μ, Λ̂(C, μ))`, where `cov_chol` factors `Λ̂⁻¹`.
///
/// At the precision update `Λ̂⁻¹ = [νΣ₀ + κddᵀ + S] / (ν+M−n)`, so the spread,
/// mean-prior and trace terms together equal `(ν+M−n)·n/2` and no inverse is
/// needed.
fn objective_at_update(slots: &[Slot], patches: &DMatrix<f64>, cov_chol: &Cholesky, hyper: &HyperpriorParams) -> (f64, f64, f64) {
    let n = hyper.dim() as f64;
    let m = patches.ncols() as f64;
    let mut data = 0.0;
    for slot in slots {
        for (k, &i) in slot.members.iter().enumerate() {
            for (a, &j) in slot.observed.iter().enumerate() {
                let r = slot.z_obs[(a, k)] - slot.mask[j] * patches[(j, i)];
                data += r * r / slot.noise_var[j];
            }
        }
    }
    let dof = hyper.nu - n + m;
    (0.5 * data, 0.5 * dof * cov_chol.log_det(), 0.5 * dof * n)
}

/// Alternating convex minimization of `f`, starting from `Λ⁰ = Σ₀⁻¹`.
///
/// Each alternation solves the `(C, μ)` step in closed form, then the `Λ` step,
/// and records `f`.
pub fn minimize_f(group: &[DegradedPatch], hyper: &HyperpriorParams, cfg: &InnerConfig) -> Result<MapSolution> {
    if cfg.max_iters == 0 {
        return Err(HbeError::Argument("max_iters must be at least 1".into()));
    }
    if !(cfg.rel_tol >= 0.0) {
        return Err(HbeError::Argument(format!("rel_tol must be >= 0, got {}", cfg.rel_tol)));
    }
    if group.is_empty() {
        return Err(HbeError::Argument("cannot restore an empty group".into()));
    }
    let n = hyper.dim();
    check_group(group, n)?;
    let m = group.len();
    let dof = hyper.nu + m as f64 - n as f64;
    let slots = group_slots(group);

    let mut covariance = hyper.sigma0.clone();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut state: Option<(DMatrix<f64>, DVector<f64>, Cholesky)> = None;

    for iteration in 1..=cfg.max_iters {
        let (patches, mean) = joint_step(&slots, m, &covariance, hyper)?;
        let mut centered = patches.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let scatter = &centered * centered.transpose();
        let d = &mean - &hyper.mu0;
        let mut total = &hyper.sigma0 * hyper.nu + &scatter;
        total.ger(hyper.kappa, &d, &d, 1.0);
        let next_cov = symmetrize(&(total / dof));
        let chol = Cholesky::factor(&next_cov, "precision update")?;

        let (data, log_det, rest) = objective_at_update(&slots, &patches, &chol, hyper);
        if !data.is_finite() {
            return Err(HbeError::NonFinite { iteration, term: "data fidelity" });
        }
        if !log_det.is_finite() {
            return Err(HbeError::NonFinite { iteration, term: "log-determinant" });
        }
        let value = data + log_det + rest;
        let previous = trace.last().copied();
        trace.push(value);
        covariance = next_cov;
        state = Some((patches, mean, chol));

        if let Some(prev) = previous {
            if (value - prev).abs() <= cfg.rel_tol * prev.abs() {
                break;
            }
        }
    }

    let (patches, mean, chol) = state.expect("at least one iteration ran");
    let precision = chol.inverse();
    Ok(MapSolution {
        patches: patches.column_iter().map(|c| Patch { values: c.into_owned() }).collect(),
        model: GaussianModel { mean, precision },
        iterations: trace.len(),
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(z: f64) -> (Vec<DegradedPatch>, Vec<Patch>, GaussianModel, HyperpriorParams) {
        let group = vec![DegradedPatch::fully_observed(DVector::from_element(1, z), 1.0).unwrap()];
        let patches = vec![Patch::from_slice(&[5.0]).unwrap()];
        let model = GaussianModel::new(DVector::from_element(1, 5.0), DMatrix::identity(1, 1)).unwrap();
        let hyper = HyperpriorParams::new(DVector::from_element(1, 5.0), DMatrix::identity(1, 1), 1.0, 2.0).unwrap();
        (group, patches, model, hyper)
    }

    #[test]
    fn objective_scalar_examples() {
        let (g, p, m, h) = scalar_group(5.0);
        assert!((objective_f(&g, &p, &m, &h).unwrap() - 1.0).abs() < 1e-15);
        let (g, p, m, h) = scalar_group(7.0);
        assert!((objective_f(&g, &p, &m, &h).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn objective_rejects_indefinite_precision() {
        let (g, p, mut m, h) = scalar_group(5.0);
        m.precision[(0, 0)] = -1.0;
        assert!(matches!(objective_f(&g, &p, &m, &h), Err(HbeError::Domain(_))));
    }

    #[test]
    fn objective_rejects_length_mismatch() {
        let (g, _, m, h) = scalar_group(5.0);
        assert!(matches!(objective_f(&g, &[], &m, &h), Err(HbeError::Argument(_))));
    }

    #[test]
    fn scalar_gain_closed_form() {
        for &(lambda, s2) in &[(1.0, 1.0), (4.0, 0.25), (0.3, 7.0)] {
            let a = compute_gain(
                &DMatrix::from_element(1, 1, lambda),
                &DVector::from_element(1, 1.0),
                &DVector::from_element(1, s2),
            )
            .unwrap()
            .dense();
            let expected = (1.0 / lambda) / (1.0 / lambda + s2);
            assert!((a[(0, 0)] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_coordinate_gets_zero_gain() {
        let s2 = 0.5;
        let a = compute_gain(
            &DMatrix::identity(2, 2),
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::from_element(2, s2),
        )
        .unwrap()
        .dense();
        assert!((a[(0, 0)] - 1.0 / (1.0 + s2)).abs() < 1e-15);
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 0)], 0.0);
        assert_eq!(a[(1, 1)], 0.0);
    }

    #[test]
    fn fully_masked_patch_returns_mean() {
        let group = vec![DegradedPatch::new(
            DVector::from_element(3, f64::NAN),
            DVector::zeros(3),
            DVector::from_element(3, MASKED_NOISE_PLACEHOLDER),
        )
        .unwrap()];
        let gain = compute_gain(&DMatrix::identity(3, 3), &group[0].mask, &group[0].noise_var).unwrap();
        let mean = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let out = update_patches(&group, &[gain], &mean).unwrap();
        assert_eq!(out[0].values, mean);
    }

    #[test]
    fn empty_group_mean_is_prior() {
        let hyper = HyperpriorParams::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2), 3.0, 4.0).unwrap();
        let none: [Gain; 0] = [];
        assert_eq!(update_mean(&[], &none, &hyper).unwrap(), hyper.mu0);
    }

    #[test]
    fn precision_update_scalar_and_prior_only() {
        let hyper = HyperpriorParams::new(DVector::from_element(1, 5.0), DMatrix::identity(1, 1), 1.0, 2.0).unwrap();
        let lam = update_precision(&[Patch::from_slice(&[5.0]).unwrap()], &hyper.mu0, &hyper).unwrap();
        assert!((lam[(0, 0)] - 1.0).abs() < 1e-15);

        let sigma0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let hyper = HyperpriorParams::new(DVector::zeros(2), sigma0.clone(), 1.0, 5.0).unwrap();
        let lam = update_precision(&[], &hyper.mu0, &hyper).unwrap();
        let expected = (sigma0 * 5.0 / 3.0).try_inverse().unwrap();
        assert!((lam - expected).amax() < 1e-12);
    }

    #[test]
    fn precision_update_rejects_small_dof() {
        let hyper = HyperpriorParams::new(DVector::zeros(3), DMatrix::identity(3, 3), 1.0, 2.5).unwrap();
        // nu + M - n = 2.5 + 0 - 3 < 0
        assert!(matches!(
            update_precision(&[], &hyper.mu0, &hyper),
            Err(HbeError::Argument(_))
        ));
    }

    #[test]
    fn hyperprior_validation() {
        assert!(HyperpriorParams::new(DVector::zeros(2), DMatrix::identity(2, 2), 0.0, 3.0).is_err());
        assert!(HyperpriorParams::new(DVector::zeros(3), DMatrix::identity(3, 3), 1.0, 2.0).is_err());
        let mut bad = DMatrix::identity(2, 2);
        bad[(1, 1)] = -1.0;
        assert!(matches!(
            HyperpriorParams::new(DVector::zeros(2), bad, 1.0, 3.0),
            Err(HbeError::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn single_iteration_trace_length() {
        let group = vec![
            DegradedPatch::fully_observed(DVector::from_vec(vec![1.0, 2.0]), 0.1).unwrap(),
            DegradedPatch::fully_observed(DVector::from_vec(vec![1.5, 2.5]), 0.1).unwrap(),
        ];
        let hyper = HyperpriorParams::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2), 2.0, 4.0).unwrap();
        let sol = minimize_f(&group, &hyper, &InnerConfig { max_iters: 1, rel_tol: 0.0 }).unwrap();
        assert_eq!(sol.objective_trace.len(), 1);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn trace_matches_full_objective() {
        let group = vec![
            DegradedPatch::new(DVector::from_vec(vec![1.0, 0.0, 3.0]), DVector::from_vec(vec![1.0, 0.0, 1.0]), DVector::from_vec(vec![0.5, 0.5, 2.0])).unwrap(),
            DegradedPatch::fully_observed(DVector::from_vec(vec![1.5, 2.5, 2.0]), 0.3).unwrap(),
            DegradedPatch::new(DVector::from_vec(vec![0.0, 2.0, 2.5]), DVector::from_vec(vec![0.0, 1.0, 0.5]), DVector::from_vec(vec![1.0, 0.2, 0.4])).unwrap(),
        ];
        let sigma0 = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, -0.3, 0.1, -0.3, 1.0]);
        let hyper = HyperpriorParams::new(DVector::from_vec(vec![1.0, 2.0, 2.0]), sigma0, 1.5, 4.5).unwrap();
        let sol = minimize_f(&group, &hyper, &InnerConfig { max_iters: 4, rel_tol: 0.0 }).unwrap();
        let full = objective_f(&group, &sol.patches, &sol.model, &hyper).unwrap();
        let last = *sol.objective_trace.last().unwrap();
        assert!((full - last).abs() <= 1e-10 * full.abs(), "{full} vs {last}");
    }

    #[test]
    fn noiseless_full_mask_returns_observations() {
        let obs = [vec![10.0, 12.0, 9.0, 11.0], vec![30.0, -4.0, 2.0, 8.0], vec![0.5, 0.25, 7.0, 3.0]];
        let group: Vec<_> = obs
            .iter()
            .map(|z| DegradedPatch::fully_observed(DVector::from_vec(z.clone()), 1e-12).unwrap())
            .collect();
        let hyper = HyperpriorParams::new(DVector::from_element(4, 100.0), DMatrix::identity(4, 4) * 0.5, 5.0, 9.0).unwrap();
        let sol = minimize_f(&group, &hyper, &InnerConfig::default()).unwrap();
        for (c, z) in sol.patches.iter().zip(&obs) {
            for j in 0..4 {
                assert!((c.values[j] - z[j]).abs() < 1e-6, "{} vs {}", c.values[j], z[j]);
            }
        }
    }

    #[test]
    fn degraded_patch_validation() {
        let ok = DegradedPatch::new(
            DVector::from_vec(vec![1.0, f64::NAN]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(ok.is_ok());
        let bad = DegradedPatch::new(
            DVector::from_vec(vec![f64::NAN, 1.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(bad.is_err());
        let bad = DegradedPatch::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.0]),
        );
        assert!(bad.is_err());
    }
}
