//! Random instances and independent reference solvers shared by the
//! integration tests.
#![allow(dead_code)]

use hbe::model::{DegradedPatch, HyperpriorParams};
use hbe::solver::{kappa_nu_rule, SolverConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(n, n) * 0.1) * scale
}

pub struct Instance {
    pub group: Vec<DegradedPatch>,
    pub hyper: HyperpriorParams,
}

/// Random group with binary masks, heterogeneous noise and κ, ν from the
/// interpolation rule.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Instance {
    let mu0 = DVector::from_fn(n, |_, _| rng.random_range(0.0..255.0));
    let scale = rng.random_range(1.0..400.0);
    let sigma0 = random_spd(n, rng, scale);
    let mut group = Vec::with_capacity(m);
    for _ in 0..m {
        let mask = DVector::from_fn(n, |_, _| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
        let var = DVector::from_fn(n, |_, _| rng.random_range(0.1..20.0));
        let obs = DVector::from_fn(n, |j, _| mask[j] * (mu0[j] + rng.random_range(-40.0..40.0)));
        group.push(DegradedPatch::new(obs, mask, var).unwrap());
    }
    let known = group[0].known_count();
    let (kappa, nu) = kappa_nu_rule(m, known, n, &SolverConfig::interpolation());
    let hyper = HyperpriorParams::new(mu0, sigma0, kappa, nu).unwrap();
    Instance { group, hyper }
}

/// Minimizer of `f` over `(C₁, …, C_M, μ)` at fixed `Λ`, from the dense
/// `(M+1)n` normal equations solved by LU.
pub fn brute_force_joint(group: &[DegradedPatch], hyper: &HyperpriorParams, precision: &DMatrix<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
    let n = hyper.mu0.len();
    let m = group.len();
    let dim = (m + 1) * n;
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for (i, p) in group.iter().enumerate() {
        let o = i * n;
        for a in 0..n {
            for c in 0..n {
                h[(o + a, o + c)] += precision[(a, c)];
                h[(o + a, m * n + c)] -= precision[(a, c)];
                h[(m * n + a, o + c)] -= precision[(a, c)];
                h[(m * n + a, m * n + c)] += precision[(a, c)];
            }
            let d = p.mask[a];
            h[(o + a, o + a)] += d * d / p.noise_var[a];
            if d != 0.0 {
                b[o + a] += d * p.observed[a] / p.noise_var[a];
            }
        }
    }
    let prior = precision * hyper.kappa;
    let rhs_mu = &prior * &hyper.mu0;
    for a in 0..n {
        for c in 0..n {
            h[(m * n + a, m * n + c)] += prior[(a, c)];
        }
        b[m * n + a] += rhs_mu[a];
    }
    let x = h.lu().solve(&b).expect("joint system is non-singular");
    let patches = (0..m).map(|i| x.rows(i * n, n).into_owned()).collect();
    (patches, x.rows(m * n, n).into_owned())
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
