//! Patch-based image restoration with a Normal-Wishart hyperprior.
//!
//! Groups of similar patches share a Gaussian model whose mean and precision
//! are estimated jointly with the restored patches. The same machinery covers
//! denoising, inpainting, zooming and single-shot HDR imaging.

pub mod baseline;
pub mod degradation;
pub mod error;
pub mod hdr;
pub mod image;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod rng;
pub mod solver;
pub mod synthetic;

pub use error::{HbeError, Result};
pub use image::{ImageGrid, MaskImage, VarianceImage};
pub use model::{minimize_f, DegradedPatch, GaussianModel, HyperpriorParams, InnerConfig, MapSolution, Patch};
pub use patch::{PatchGroup, PatchIndex, SearchConfig};
pub use solver::{restore, restore_with, Diagnostics, InitMode, Restoration, RestorationProblem, RestoreHooks, SolverConfig};
