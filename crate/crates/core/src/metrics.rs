//! Reconstruction metrics on normalized maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
/// Dynamic range of normalized maps.
pub const SSIM_DYNAMIC_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(pred: &Grid2D, truth: &Grid2D) -> Result<Self> {
        Ok(Self {
            nmse: nmse(pred, truth)?,
            rmse: rmse(pred, truth)?,
            ssim: ssim(pred, truth)?,
        })
    }

    /// Componentwise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let sum = reports.iter().fold(MetricReport::default(), |acc, r| MetricReport {
            nmse: acc.nmse + r.nmse,
            rmse: acc.rmse + r.rmse,
            ssim: acc.ssim + r.ssim,
        });
        MetricReport {
            nmse: sum.nmse / n,
            rmse: sum.rmse / n,
            ssim: sum.ssim / n,
        }
    }
}

/// Σ(p − t)² / Σt².
pub fn nmse(pred: &Grid2D, truth: &Grid2D) -> Result<f64> {
    pred.check_shape(truth, "nmse")?;
    let energy: f64 = truth.values().iter().map(|t| t * t).sum();
    if energy == 0.0 {
        return Err(Error::UndefinedNmse);
    }
    let err: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(err / energy)
}

pub fn rmse(pred: &Grid2D, truth: &Grid2D) -> Result<f64> {
    pred.check_shape(truth, "rmse")?;
    let n = pred.len() as f64;
    let err: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((err / n).sqrt())
}

/// Single-scale SSIM: uniform 8×8 windows at stride 1, population statistics,
/// C1 = (0.01 L)², C2 = (0.03 L)² with L = 1, averaged over all windows.
///
/// Window sums come from summed-area tables, so the cost is O(HW).
pub fn ssim(pred: &Grid2D, truth: &Grid2D) -> Result<f64> {
    pred.check_shape(truth, "ssim")?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::SsimInputTooSmall(SSIM_WINDOW));
    }
    let c1 = (0.01 * SSIM_DYNAMIC_RANGE).powi(2);
    let c2 = (0.03 * SSIM_DYNAMIC_RANGE).powi(2);
    let (x, y) = (pred.values(), truth.values());
    let table = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += f(i * w + j);
                s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
            }
        }
        s
    };
    let sx = table(&|k| x[k]);
    let sy = table(&|k| y[k]);
    let sxx = table(&|k| x[k] * x[k]);
    let syy = table(&|k| y[k] * y[k]);
    let sxy = table(&|k| x[k] * y[k]);
    let area = |s: &[f64], i: usize, j: usize| {
        let (i1, j1) = (i + SSIM_WINDOW, j + SSIM_WINDOW);
        s[i1 * (w + 1) + j1] - s[i * (w + 1) + j1] - s[i1 * (w + 1) + j] + s[i * (w + 1) + j]
    };
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let mx = area(&sx, i, j) / n;
            let my = area(&sy, i, j) / n;
            let vx = area(&sxx, i, j) / n - mx * mx;
            let vy = area(&syy, i, j) / n - my * my;
            let cov = area(&sxy, i, j) / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Grid2D {
        Grid2D::from_fn(n, n, 1.0, |_, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random(&mut rng, 16);
        let r = MetricReport::compute(&t, &t).unwrap();
        assert_eq!(r.nmse, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.ssim, 1.0);
    }

    #[test]
    fn zero_prediction_nmse_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random(&mut rng, 12);
        let z = Grid2D::zeros(12, 12, 1.0).unwrap();
        assert_eq!(nmse(&z, &t).unwrap(), 1.0);
        assert_eq!(nmse(&t, &z).unwrap_err().to_string(), "undefined NMSE");
    }

    #[test]
    fn constant_offset_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&mut rng, 9);
        let p = t.map(|v| v - 0.125).unwrap();
        assert!((rmse(&p, &t).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn inverted_pattern_has_low_ssim() {
        let t = Grid2D::from_fn(16, 16, 1.0, |i, j| ((i / 2 + j / 2) % 2) as f64).unwrap();
        let p = t.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&p, &t).unwrap() < 0.5);
    }

    #[test]
    fn undersized_ssim_rejected() {
        let g = Grid2D::zeros(7, 20, 1.0).unwrap();
        assert!(ssim(&g, &g).is_err());
    }

    #[test]
    fn nmse_is_asymmetric_rmse_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(&mut rng, 10), random(&mut rng, 10));
        assert_ne!(nmse(&a, &b).unwrap(), nmse(&b, &a).unwrap());
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn interpolation_toward_truth_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, t) = (random(&mut rng, 10), random(&mut rng, 10));
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for s in 0..=20 {
            let s = s as f64 / 20.0;
            let q = Grid2D::from_fn(10, 10, 1.0, |i, j| (1.0 - s) * p.get(i, j) + s * t.get(i, j)).unwrap();
            let cur = (nmse(&q, &t).unwrap(), rmse(&q, &t).unwrap());
            assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
            prev = cur;
        }
        assert!(prev.0 < 1e-28);
    }
}
