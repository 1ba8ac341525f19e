//! Reference reconstructions: harmonic smooth fill and bilinear zoom.

use crate::error::{HbeError, Result};
use crate::image::{ImageGrid, MaskImage};

/// Over-relaxation factor for the Gauss-Seidel sweeps.
const SOR_OMEGA: f64 = 1.8;
const FILL_TOL: f64 = 1e-9;
const FILL_MAX_SWEEPS: usize = 100_000;

/// Fills every pixel with `mask == 0` by the discrete harmonic interpolant of
/// the known pixels (each unknown equals the average of its 4-neighbours).
///
/// Known values are `observed / mask`. Missing observations are never read. An
/// image with no known pixel is filled with zeros.
pub fn smooth_fill(observed: &ImageGrid, mask: &MaskImage) -> Result<ImageGrid> {
    observed.ensure_same_shape(mask, "mask")?;
    let (w, h) = (observed.width(), observed.height());
    let known: Vec<bool> = mask.data().iter().map(|&m| m != 0.0).collect();
    let n_known = known.iter().filter(|&&k| k).count();
    if n_known == 0 {
        return Ok(ImageGrid::filled(w, h, 0.0));
    }
    let mut sum = 0.0;
    let mut out = vec![0.0; w * h];
    for i in 0..w * h {
        if known[i] {
            out[i] = observed.data()[i] / mask.data()[i];
            sum += out[i];
        }
    }
    let start = sum / n_known as f64;
    let scale = out.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..w * h {
        if !known[i] {
            out[i] = start;
        }
    }
    let unknown: Vec<usize> = (0..w * h).filter(|&i| !known[i]).collect();
    for _ in 0..FILL_MAX_SWEEPS {
        let mut change = 0.0f64;
        for &i in &unknown {
            let (r, c) = (i / w, i % w);
            let mut acc = 0.0;
            let mut cnt = 0.0;
            if r > 0 {
                acc += out[i - w];
                cnt += 1.0;
            }
            if r + 1 < h {
                acc += out[i + w];
                cnt += 1.0;
            }
            if c > 0 {
                acc += out[i - 1];
                cnt += 1.0;
            }
            if c + 1 < w {
                acc += out[i + 1];
                cnt += 1.0;
            }
            if cnt == 0.0 {
                continue;
            }
            let delta = SOR_OMEGA * (acc / cnt - out[i]);
            out[i] += delta;
            change = change.max(delta.abs());
        }
        if change <= FILL_TOL * scale {
            break;
        }
    }
    ImageGrid::new(w, h, out)
}

/// Bilinear interpolation from the samples on the lattice `(i·z, j·z)`.
/// Pixels past the last lattice row or column take the nearest lattice value
/// along that axis.
pub fn bilinear_zoom(observed: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 {
        return Err(HbeError::Argument("zoom factor must be positive".into()));
    }
    let (w, h) = (observed.width(), observed.height());
    let last_r = (h - 1) / factor;
    let last_c = (w - 1) / factor;
    let sample = |i: usize, j: usize| observed.get(i * factor, j * factor);
    let axis = |x: usize, last: usize| -> (usize, usize, f64) {
        let i0 = (x / factor).min(last);
        if i0 == last {
            (i0, i0, 0.0)
        } else {
            (i0, i0 + 1, (x - i0 * factor) as f64 / factor as f64)
        }
    };
    Ok(ImageGrid::from_fn(w, h, |r, c| {
        let (r0, r1, tr) = axis(r, last_r);
        let (c0, c1, tc) = axis(c, last_c);
        let top = (1.0 - tc) * sample(r0, c0) + tc * sample(r0, c1);
        let bottom = (1.0 - tc) * sample(r1, c0) + tc * sample(r1, c1);
        (1.0 - tr) * top + tr * bottom
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_fill_matches_jacobi_oracle() {
        let (w, h) = (12, 10);
        let clean = ImageGrid::from_fn(w, h, |r, c| ((r * 7 + c * 3) % 11) as f64);
        // an all-missing 4x4 block with known surroundings, plus scattered holes
        let mask = ImageGrid::from_fn(w, h, |r, c| {
            let block = (3..7).contains(&r) && (4..8).contains(&c);
            if block || (r * 5 + c) % 7 == 0 {
                0.0
            } else {
                1.0
            }
        });
        let observed = clean.zip_map(&mask, |v, m| v * m).unwrap();
        let filled = smooth_fill(&observed, &mask).unwrap();

        let mut x = observed.clone();
        for _ in 0..20_000 {
            let prev = x.clone();
            for r in 0..h {
                for c in 0..w {
                    if mask.get(r, c) != 0.0 {
                        continue;
                    }
                    let mut nb = Vec::new();
                    if r > 0 {
                        nb.push(prev.get(r - 1, c));
                    }
                    if r + 1 < h {
                        nb.push(prev.get(r + 1, c));
                    }
                    if c > 0 {
                        nb.push(prev.get(r, c - 1));
                    }
                    if c + 1 < w {
                        nb.push(prev.get(r, c + 1));
                    }
                    x.set(r, c, nb.iter().sum::<f64>() / nb.len() as f64);
                }
            }
        }
        for (a, b) in filled.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for i in 0..clean.len() {
            if mask.data()[i] == 1.0 {
                assert_eq!(filled.data()[i], clean.data()[i]);
            }
        }
    }

    #[test]
    fn fill_ignores_missing_values() {
        let mask = ImageGrid::from_fn(5, 5, |r, c| if (r + c) % 2 == 0 { 1.0 } else { 0.0 });
        let observed = mask.map(|m| if m == 0.0 { f64::NAN } else { 3.0 });
        let filled = smooth_fill(&observed, &mask).unwrap();
        assert!(filled.data().iter().all(|&v| (v - 3.0).abs() < 1e-9));
    }

    #[test]
    fn bilinear_reproduces_planes() {
        let plane = ImageGrid::from_fn(9, 9, |r, c| 2.0 * r as f64 - c as f64 + 5.0);
        let z = bilinear_zoom(&plane, 2).unwrap();
        for (a, b) in z.data().iter().zip(plane.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
