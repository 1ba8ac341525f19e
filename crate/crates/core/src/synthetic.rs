//! Procedural test images: stripes, checkerboards, filtered noise, straight
//! edges and a high-dynamic-range scene.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::ImageGrid;
use crate::rng::{global_rng, mix_seed, TAG_SYNTH};

/// Sinusoidal stripes in `[lo, hi]` with the given period (pixels) and
/// orientation of the wave vector (degrees from the column axis).
pub fn stripes(width: usize, height: usize, period: f64, angle_deg: f64, lo: f64, hi: f64) -> ImageGrid {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let k = 2.0 * PI / period;
    ImageGrid::from_fn(width, height, |r, col| {
        let t = c * col as f64 + s * r as f64;
        lo + (hi - lo) * 0.5 * (1.0 + (k * t).sin())
    })
}

/// Sum of two sinusoidal gratings, a simple periodic texture.
pub fn plaid(width: usize, height: usize, period_a: f64, angle_a: f64, period_b: f64, angle_b: f64) -> ImageGrid {
    let a = stripes(width, height, period_a, angle_a, 0.0, 1.0);
    let b = stripes(width, height, period_b, angle_b, 0.0, 1.0);
    a.zip_map(&b, |x, y| 30.0 + 100.0 * x + 95.0 * y).expect("same shape")
}

pub fn checkerboard(width: usize, height: usize, cell: usize, lo: f64, hi: f64) -> ImageGrid {
    let cell = cell.max(1);
    ImageGrid::from_fn(width, height, |r, c| if (r / cell + c / cell) % 2 == 0 { lo } else { hi })
}

/// White Gaussian noise blurred by a Gaussian of standard deviation `sigma`
/// pixels, affinely rescaled to `[0, 255]`.
pub fn filtered_noise(width: usize, height: usize, sigma: f64, seed: u64) -> ImageGrid {
    let mut rng = global_rng(mix_seed(seed, TAG_SYNTH));
    let raw = ImageGrid::from_fn(width, height, |_, _| StandardNormal.sample(&mut rng));
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let blur = |img: &ImageGrid, horizontal: bool| {
        ImageGrid::from_fn(width, height, |r, c| {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let d = k as isize - radius;
                let (rr, cc) = if horizontal {
                    (r as isize, reflect(c as isize + d, width))
                } else {
                    (reflect(r as isize + d, height), c as isize)
                };
                acc += wk * img.get(rr as usize, cc as usize);
            }
            acc / norm
        })
    };
    let smooth = blur(&blur(&raw, true), false);
    rescale(&smooth, 0.0, 255.0)
}

fn reflect(i: isize, n: usize) -> isize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

/// Affine rescale of the value range to `[lo, hi]`.
pub fn rescale(img: &ImageGrid, lo: f64, hi: f64) -> ImageGrid {
    let (a, b) = img.min_max();
    if b == a {
        return img.map(|_| lo);
    }
    img.map(|v| lo + (hi - lo) * (v - a) / (b - a))
}

/// Piecewise-constant image cut by `cuts` random straight lines, with
/// anti-aliased boundaries. Each line adds a signed random step.
pub fn straight_edges(width: usize, height: usize, cuts: usize, seed: u64) -> ImageGrid {
    let mut rng = global_rng(mix_seed(seed, TAG_SYNTH ^ 0xED6E));
    let lines: Vec<(f64, f64, f64, f64)> = (0..cuts)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let (cx, cy) = (
                rng.random_range(0.2..0.8) * width as f64,
                rng.random_range(0.2..0.8) * height as f64,
            );
            let step = rng.random_range(40.0..90.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (theta, cx, cy, step)
        })
        .collect();
    let base = 128.0;
    let img = ImageGrid::from_fn(width, height, |r, c| {
        let mut v = base;
        for &(theta, cx, cy, step) in &lines {
            let d = -theta.sin() * (c as f64 - cx) + theta.cos() * (r as f64 - cy);
            v += step * (d + 0.5).clamp(0.0, 1.0);
        }
        v
    });
    let (lo, hi) = img.min_max();
    if lo < 10.0 || hi > 245.0 {
        rescale(&img, 10.0, 245.0)
    } else {
        img
    }
}

/// Linear-irradiance scene spanning `[c_min, c_max]`: a smooth log-domain
/// illumination gradient with a few bright discs and a dark rectangle.
pub fn hdr_scene(width: usize, height: usize, c_min: f64, c_max: f64) -> ImageGrid {
    let (w, h) = (width as f64, height as f64);
    let discs = [(0.3, 0.3, 0.12, 1.6), (0.7, 0.25, 0.08, 2.2), (0.6, 0.7, 0.18, 1.0)];
    let log_img = ImageGrid::from_fn(width, height, |r, c| {
        let (x, y) = (c as f64 / w, r as f64 / h);
        let mut v = 1.5 * x + 0.8 * y + 0.3 * (6.0 * x).sin() * (4.0 * y).cos();
        for &(dx, dy, rad, gain) in &discs {
            let dist = ((x - dx).powi(2) + (y - dy).powi(2)).sqrt();
            let t = ((rad - dist) * w * 0.5).clamp(0.0, 1.0);
            v += gain * t;
        }
        if (0.1..0.35).contains(&x) && (0.65..0.9).contains(&y) {
            v -= 1.2;
        }
        v
    });
    let (lo, hi) = log_img.min_max();
    let (l0, l1) = (c_min.ln(), c_max.ln());
    log_img.map(|v| (l0 + (l1 - l0) * (v - lo) / (hi - lo)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        let s = stripes(32, 32, 8.0, 30.0, 10.0, 200.0);
        let (lo, hi) = s.min_max();
        assert!(lo >= 10.0 - 1e-9 && hi <= 200.0 + 1e-9);
        let n = filtered_noise(32, 24, 2.0, 1);
        assert_eq!(n.min_max(), (0.0, 255.0));
        assert_eq!(filtered_noise(32, 24, 2.0, 1), n);
        let e = straight_edges(64, 64, 3, 4);
        let (lo, hi) = e.min_max();
        assert!(lo >= 10.0 - 1e-9 && hi <= 245.0 + 1e-9);
        let hd = hdr_scene(64, 64, 10.0, 1e5);
        let (lo, hi) = hd.min_max();
        assert!((lo - 10.0).abs() < 1e-6 && (hi - 1e5).abs() < 1e-3);
        assert_eq!(checkerboard(4, 4, 2, 0.0, 1.0).get(2, 0), 1.0);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }
}
