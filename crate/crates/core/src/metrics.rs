//! Reference-based quality metrics. All accumulation happens in f64.

use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};

/// PSNR reported for (near-)identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub sam: f64,
    pub skipped_pixels: usize,
}

/// Spectral angle and the number of pixels left out of the average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamResult {
    pub degrees: f64,
    pub skipped_pixels: usize,
}

/// Peak 1.0, global MSE over all voxels.
pub fn psnr(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    reference.check_same_dims(estimate, "psnr")?;
    let mse = reference
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / reference.values().len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

// Separable valid-region filtering of an h x w image.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..SSIM_WINDOW).map(|k| win[k] * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(r + k) * wo + c]).sum();
        }
    }
    out
}

fn ssim_band(x: &[f32], y: &[f32], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> f64 {
    let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, win);
    let my = filter_valid(&y, h, w, win);
    let mxx = filter_valid(&prod(&x, &x), h, w, win);
    let myy = filter_valid(&prod(&y, &y), h, w, win);
    let mxy = filter_valid(&prod(&x, &y), h, w, win);
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, valid region) averaged over bands.
pub fn ssim(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    reference.check_same_dims(estimate, "ssim")?;
    let (h, w, b) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let total: f64 = (0..b)
        .map(|k| ssim_band(reference.band(k), estimate.band(k), h, w, &win))
        .sum();
    Ok(total / b as f64)
}

/// `100 / s * sqrt(mean_i (RMSE_i / mu_i)^2)` with `mu_i` the reference band mean.
pub fn ergas(reference: &HsiCube, estimate: &HsiCube, s: usize) -> Result<f64> {
    reference.check_same_dims(estimate, "ergas")?;
    if s == 0 {
        return Err(Error::invalid("ergas ratio must be positive"));
    }
    let b = reference.bands();
    let n = reference.pixels() as f64;
    let mut acc = 0.0;
    for k in 0..b {
        let (r, e) = (reference.band(k), estimate.band(k));
        let mu = r.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        if mu == 0.0 {
            return Err(Error::invalid(format!("ergas undefined: reference band {k} has zero mean")));
        }
        let mse = r
            .iter()
            .zip(e)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            / n;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / s as f64 * (acc / b as f64).sqrt())
}

/// Mean spectral angle in degrees over pixels whose spectra both have norm > 1e-8.
pub fn sam(reference: &HsiCube, estimate: &HsiCube) -> Result<SamResult> {
    reference.check_same_dims(estimate, "sam")?;
    let (h, w, b) = reference.dims();
    if b < 2 {
        return Err(Error::dim("sam needs at least two bands"));
    }
    let n = h * w;
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for p in 0..n {
        let (mut nr, mut ne) = (0.0f64, 0.0f64);
        for k in 0..b {
            nr += f64::from(reference.values()[k * n + p]).powi(2);
            ne += f64::from(estimate.values()[k * n + p]).powi(2);
        }
        let (nr, ne) = (nr.sqrt(), ne.sqrt());
        if nr <= 1e-8 || ne <= 1e-8 {
            skipped += 1;
            continue;
        }
        // Kahan's form of arccos(<x,y> / |x||y|); stays accurate near 0 and 180 degrees.
        let (mut diff, mut sum_sq) = (0.0f64, 0.0f64);
        for k in 0..b {
            let x = f64::from(reference.values()[k * n + p]) / nr;
            let y = f64::from(estimate.values()[k * n + p]) / ne;
            diff += (x - y).powi(2);
            sum_sq += (x + y).powi(2);
        }
        sum += (2.0 * diff.sqrt().atan2(sum_sq.sqrt())).to_degrees();
        used += 1;
    }
    let degrees = if used == 0 { 0.0 } else { sum / used as f64 };
    Ok(SamResult {
        degrees,
        skipped_pixels: skipped,
    })
}

/// All four metrics. `s` is the resolution ratio used by ERGAS.
pub fn evaluate(reference: &HsiCube, estimate: &HsiCube, s: usize) -> Result<MetricsReport> {
    let sam = sam(reference, estimate)?;
    Ok(MetricsReport {
        psnr: psnr(reference, estimate)?,
        ssim: ssim(reference, estimate)?,
        ergas: ergas(reference, estimate, s)?,
        sam: sam.degrees,
        skipped_pixels: sam.skipped_pixels,
    })
}
