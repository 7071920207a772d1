//! Deterministic textured phantom cubes.
//!
//! `H = V x3 U` with `rank` base images and row-stochastic coefficients, so
//! the cube is exactly low-rank and stays in `[0, 1]` without clamping. Each
//! base image mixes a smooth gradient with a texture shared by all base
//! images; the shared texture is what makes the detail map strongly
//! low-rank and what the PAN image carries at full resolution.

use std::f32::consts::PI;

use hipandas::cube::mode3_product;
use hipandas::{BaseImages, CoeffMatrix, Error, HsiCube, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub rank: usize,
    pub seed: u64,
}

fn normalize(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    values.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Oriented sinusoids with log-uniform periods in `[min_period, max_period]`
/// pixels and amplitude growing with the period (a rough `1/f` spectrum).
fn wave_field(rng: &mut ChaCha8Rng, h: usize, w: usize, waves: usize, min_period: f32, max_period: f32) -> Vec<f32> {
    let params: Vec<(f32, f32, f32, f32)> = (0..waves)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let period = (rng.random_range(min_period.ln()..=max_period.ln())).exp();
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0) * period.sqrt();
            (theta, 2.0 * PI / period, phase, amp)
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = params
                .iter()
                .map(|&(t, k, ph, a)| a * (k * (c as f32 * t.cos() + r as f32 * t.sin()) + ph).sin())
                .sum();
        }
    }
    out
}

/// Sharp-edged rectangles with log-uniform sizes, so step edges appear at
/// every scale.
fn patch_field(rng: &mut ChaCha8Rng, h: usize, w: usize, patches: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    let max_side = (h.min(w) / 2).max(5) as f32;
    for _ in 0..patches {
        let mut side = || rng.random_range(4f32.ln()..=max_side.ln()).exp().round() as usize;
        let (ph, pw) = (side(), side());
        let r0 = rng.random_range(0..h.saturating_sub(ph).max(1));
        let c0 = rng.random_range(0..w.saturating_sub(pw).max(1));
        let level = rng.random_range(-1.0..1.0);
        for r in r0..(r0 + ph).min(h) {
            for c in c0..(c0 + pw).min(w) {
                out[r * w + c] += level;
            }
        }
    }
    out
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<HsiCube> {
    let PhantomSpec {
        height: h,
        width: w,
        bands,
        rank,
        seed,
    } = *spec;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("phantom needs positive spatial size".into()));
    }
    if rank == 0 || rank >= bands {
        return Err(Error::InvalidValue(format!("rank {rank} must be in [1, {bands})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let size = h.max(w) as f32;
    let mut texture = wave_field(&mut rng, h, w, 6, 6.0, size / 2.0);
    let patches = patch_field(&mut rng, h, w, 16);
    let wave_scale = (size / 2.0).sqrt();
    texture.iter_mut().zip(&patches).for_each(|(t, p)| *t = *t / wave_scale + p);
    normalize(&mut texture);

    let mut bases = Vec::with_capacity(rank * h * w);
    for _ in 0..rank {
        let mut smooth = wave_field(&mut rng, h, w, 2, size, 3.0 * size);
        normalize(&mut smooth);
        let tex_weight = rng.random_range(0.35..0.65f32);
        bases.extend(smooth.iter().zip(&texture).map(|(s, t)| (1.0 - tex_weight) * s + tex_weight * t));
    }
    let bases = BaseImages::new(h, w, rank, bases)?;

    // smooth spectral signatures: one Gaussian bump per endmember
    let centers: Vec<f32> = (0..rank).map(|_| rng.random_range(0.0..bands as f32)).collect();
    let width_b = (bands as f32 / rank as f32).max(1.0);
    let mut entries = Vec::with_capacity(bands * rank);
    for k in 0..bands {
        let raw: Vec<f32> = centers
            .iter()
            .map(|&m| 0.05 + (-((k as f32 - m) / width_b).powi(2)).exp())
            .collect();
        let sum: f32 = raw.iter().sum();
        entries.extend(raw.iter().map(|v| v / sum));
    }
    let coeffs = CoeffMatrix::new(bands, rank, entries)?;
    Ok(mode3_product(&bases, &coeffs)?.clamped_unit().with_unit_scaled(true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hipandas::cube::numerical_rank;
    use hipandas::prior::{detail_map, energy_curve};

    fn spec() -> PhantomSpec {
        PhantomSpec {
            height: 64,
            width: 64,
            bands: 8,
            rank: 3,
            seed: 7,
        }
    }

    #[test]
    fn phantom_is_unit_low_rank_and_seeded() {
        let a = make_phantom(&spec()).unwrap();
        assert_eq!(a.dims(), (64, 64, 8));
        assert!(a.is_within_unit());
        assert!(numerical_rank(&a, 1e-5) <= 3);
        assert_eq!(a, make_phantom(&spec()).unwrap());
        assert_ne!(a, make_phantom(&PhantomSpec { seed: 8, ..spec() }).unwrap());
    }

    #[test]
    fn detail_energy_is_concentrated() {
        let e = energy_curve(&detail_map(&make_phantom(&spec()).unwrap(), 4).unwrap()).unwrap();
        assert!(e[2] >= 0.9, "{e:?}");
    }

    #[test]
    fn rejects_rank_at_band_count() {
        assert!(make_phantom(&PhantomSpec { rank: 8, ..spec() }).is_err());
    }
}
