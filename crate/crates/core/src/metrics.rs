//! Peak signal-to-noise ratio.

use crate::error::{HbeError, Result};
use crate::image::ImageGrid;

/// Rectangle `(top, left, width, height)`.
pub type Rect = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `+∞` for identical images.
    pub psnr: f64,
    pub mse: f64,
    pub per_region: Vec<(Rect, f64)>,
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b, "comparison image")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak / mse.sqrt()).log10()
    }
}

/// `20·log₁₀(peak/√mse)`.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn compute_psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<Metrics> {
    compute_psnr_regions(a, b, peak, &[])
}

/// Global metrics plus one PSNR per listed rectangle.
pub fn compute_psnr_regions(a: &ImageGrid, b: &ImageGrid, peak: f64, regions: &[Rect]) -> Result<Metrics> {
    if !(peak > 0.0) {
        return Err(HbeError::Argument(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    let per_region = regions
        .iter()
        .map(|&rect @ (top, left, w, h)| {
            let ra = a.crop(top, left, w, h)?;
            let rb = b.crop(top, left, w, h)?;
            Ok((rect, psnr(&ra, &rb, peak)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics {
        psnr: psnr_from_mse(m, peak),
        mse: m,
        per_region,
    })
}

/// PSNR restricted to pixels where `select` is true.
pub fn psnr_where(a: &ImageGrid, b: &ImageGrid, peak: f64, select: impl Fn(usize) -> bool) -> Result<f64> {
    a.ensure_same_shape(b, "comparison image")?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if select(i) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(HbeError::Argument("no pixels selected for PSNR".into()));
    }
    Ok(psnr_from_mse(sum / count as f64, peak))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_infinite() {
        let a = ImageGrid::filled(3, 3, 7.0);
        assert_eq!(compute_psnr(&a, &a, 255.0).unwrap().psnr, f64::INFINITY);
    }

    #[test]
    fn full_scale_difference_is_zero_db() {
        let a = ImageGrid::filled(4, 4, 255.0);
        let b = ImageGrid::filled(4, 4, 0.0);
        assert!(compute_psnr(&a, &b, 255.0).unwrap().psnr.abs() < 1e-12);
    }

    #[test]
    fn mse_ten() {
        // alternating ±√10 gives mse exactly 10
        let d = 10f64.sqrt();
        let a = ImageGrid::from_fn(64, 64, |r, c| if (r + c) % 2 == 0 { d } else { -d });
        let b = ImageGrid::filled(64, 64, 0.0);
        let m = compute_psnr(&a, &b, 255.0).unwrap();
        assert!((m.mse - 10.0).abs() < 1e-12);
        let expected = 20.0 * (255.0 / 10f64.sqrt()).log10();
        assert!((m.psnr - expected).abs() < 1e-12);
        assert!((m.psnr - 38.13).abs() < 0.01);
    }

    #[test]
    fn dims_must_match() {
        assert!(mse(&ImageGrid::filled(2, 2, 0.0), &ImageGrid::filled(2, 3, 0.0)).is_err());
    }

    #[test]
    fn regions() {
        let a = ImageGrid::from_fn(4, 4, |r, _| if r < 2 { 1.0 } else { 0.0 });
        let b = ImageGrid::filled(4, 4, 0.0);
        let m = compute_psnr_regions(&a, &b, 1.0, &[(0, 0, 4, 2), (2, 0, 4, 2)]).unwrap();
        assert!(m.per_region[0].1.abs() < 1e-12);
        assert_eq!(m.per_region[1].1, f64::INFINITY);
    }
}
