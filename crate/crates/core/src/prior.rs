//! Detail maps and their SVD energy curves.
//!
//! The clean detail map `D = H - up(down(H))` is spectrally redundant: its
//! cumulative singular-value energy rises steeply. Noise in the low-resolution
//! observation flattens that curve.

use crate::cube::{spectral_singular_values, HsiCube};
use crate::degrade::{downsample, upsample};
use crate::error::{Error, Result};

/// `D = H - up(down(H, s), s)`
pub fn detail_map(hr: &HsiCube, s: usize) -> Result<HsiCube> {
    let low = downsample(hr, s)?;
    hr.sub(&upsample(&low, s)?)
}

/// `D~ = H - up(N, s)`
pub fn noisy_detail_map(hr: &HsiCube, noisy: &HsiCube, s: usize) -> Result<HsiCube> {
    let (h, w, b) = hr.dims();
    if s == 0 || noisy.dims() != (h / s, w / s, b) || h % s != 0 || w % s != 0 {
        return Err(Error::dim(format!(
            "noisy cube {:?} is not {hr:?} reduced by {s}",
            noisy.dims(),
            hr = hr.dims()
        )));
    }
    hr.sub(&upsample(noisy, s)?)
}

/// Cumulative normalised singular-value sums `E_k`, `k = 1..=bands`.
pub fn energy_curve(map: &HsiCube) -> Result<Vec<f64>> {
    if map.bands() < 2 {
        return Err(Error::dim("energy curve needs at least two bands"));
    }
    let sv = spectral_singular_values(map);
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("energy curve of an all-zero map is undefined".into()));
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = sv
        .iter()
        .map(|s| {
            acc += s;
            acc / total
        })
        .collect();
    // remove rounding drift in the final ratio
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    Ok(curve)
}
