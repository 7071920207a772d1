//! Forward observation model: spatial degradation, PAN synthesis and the
//! noise generators used to simulate `(N, P, Q)` from a clean cube.
//!
//! Noise intensities are given on the 0-255 scale and divided by 255 before
//! being applied to unit-scaled data.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube::{HsiCube, PanImage};
use crate::error::{Error, Result};
use crate::ops;

/// Amplitude bound of the per-column stripe offsets.
pub const STRIPE_AMPLITUDE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianIid,
    GaussianNoniid,
    Mixture,
}

fn default_sigma_range() -> [f64; 2] {
    [10.0, 50.0]
}

/// Declarative degradation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation on the 0-255 scale (`gaussian_iid`).
    #[serde(default)]
    pub sigma: f64,
    /// Per-band sigma range on the 0-255 scale (`gaussian_noniid`, and the
    /// Gaussian bands of `mixture`).
    #[serde(default = "default_sigma_range")]
    pub sigma_range: [f64; 2],
    /// Sparse-noise intensity for `mixture`.
    #[serde(default)]
    pub p: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian_iid(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::GaussianIid,
            sigma,
            sigma_range: default_sigma_range(),
            p: 0.0,
            seed,
        }
    }

    pub fn gaussian_noniid(lo: f64, hi: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::GaussianNoniid,
            sigma: 0.0,
            sigma_range: [lo, hi],
            p: 0.0,
            seed,
        }
    }

    pub fn mixture(lo: f64, hi: f64, p: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Mixture,
            sigma: 0.0,
            sigma_range: [lo, hi],
            p,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.sigma_range;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("sigma_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!("p must lie in [0, 1], got {}", self.p)));
        }
        Ok(())
    }

    /// Short label used in tables, e.g. `iid10`, `noniid10-50`, `mix0.15`.
    pub fn label(&self) -> String {
        let [lo, hi] = self.sigma_range;
        match self.kind {
            NoiseKind::GaussianIid => format!("iid{}", self.sigma),
            NoiseKind::GaussianNoniid => format!("noniid{lo}-{hi}"),
            NoiseKind::Mixture => format!("mix{}", self.p),
        }
    }
}

/// Spectral response `phi` mapping a spectrum to a PAN intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SpectralResponse {
    weights: Vec<f64>,
}

impl SpectralResponse {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("spectral response needs at least one weight"));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("spectral response weights must be finite and >= 0"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("spectral response sums to {sum}, expected 1")));
        }
        Ok(Self { weights })
    }

    /// Rescales nonnegative weights to unit sum (e.g. a sensor response
    /// sampled at the cube's band centres).
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::invalid("spectral response weights sum to zero"));
        }
        Self::new(raw.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(bands: usize) -> Self {
        Self {
            weights: vec![1.0 / bands as f64; bands],
        }
    }

    pub fn bands(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl TryFrom<Vec<f64>> for SpectralResponse {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpectralResponse> for Vec<f64> {
    fn from(s: SpectralResponse) -> Self {
        s.weights
    }
}

fn check_ratio(s: usize) -> Result<()> {
    if s < 2 {
        return Err(Error::invalid(format!("ratio must be an integer >= 2, got {s}")));
    }
    Ok(())
}

/// `s x s` block mean per band.
pub fn downsample(cube: &HsiCube, s: usize) -> Result<HsiCube> {
    check_ratio(s)?;
    let (h, w, b) = cube.dims();
    if h % s != 0 || w % s != 0 {
        return Err(Error::dim(format!("{h}x{w} is not divisible by ratio {s}")));
    }
    let out = ops::downsample(cube.values(), b, h, w, s);
    Ok(HsiCube::new(h / s, w / s, b, out)?.with_unit_scaled(cube.unit_scaled))
}

/// Bicubic (Catmull-Rom, edge-replicated) upsampling per band.
pub fn upsample(cube: &HsiCube, s: usize) -> Result<HsiCube> {
    check_ratio(s)?;
    let (h, w, b) = cube.dims();
    let out = ops::upsample(cube.values(), b, h, w, s);
    HsiCube::new(h * s, w * s, b, out)
}

pub fn downsample_pan(pan: &PanImage, s: usize) -> Result<PanImage> {
    PanImage::from_cube(&downsample(&pan.to_cube(), s)?)
}

pub fn upsample_pan(pan: &PanImage, s: usize) -> Result<PanImage> {
    PanImage::from_cube(&upsample(&pan.to_cube(), s)?)
}

/// `P(x, y) = sum_i phi_i H(x, y, i)`
pub fn synthesize_pan(cube: &HsiCube, phi: &SpectralResponse) -> Result<PanImage> {
    if phi.bands() != cube.bands() {
        return Err(Error::dim(format!(
            "spectral response has {} weights for a {}-band cube",
            phi.bands(),
            cube.bands()
        )));
    }
    let n = cube.pixels();
    let mut acc = vec![0.0f64; n];
    for (k, &wk) in phi.weights().iter().enumerate() {
        for (a, &v) in acc.iter_mut().zip(cube.band(k)) {
            *a += wk * f64::from(v);
        }
    }
    PanImage::new(cube.height(), cube.width(), acc.into_iter().map(|v| v as f32).collect())
}

fn add_band_gaussian(band: &mut [f32], std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    for v in band.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (f64::from(*v) + std * z) as f32;
    }
}

/// Gaussian noise, i.i.d. or with per-band sigma drawn from `sigma_range`.
pub fn add_gaussian_noise(cube: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = cube.clone();
    match spec.kind {
        NoiseKind::GaussianIid => {
            for k in 0..cube.bands() {
                add_band_gaussian(out.band_mut(k), spec.sigma / 255.0, &mut rng);
            }
        }
        NoiseKind::GaussianNoniid => {
            let sigmas = draw_sigmas(cube.bands(), spec.sigma_range, &mut rng);
            for (k, s) in sigmas.into_iter().enumerate() {
                add_band_gaussian(out.band_mut(k), s / 255.0, &mut rng);
            }
        }
        NoiseKind::Mixture => {
            return Err(Error::invalid("add_gaussian_noise called with a mixture spec"));
        }
    }
    Ok(out)
}

fn draw_sigmas(bands: usize, [lo, hi]: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..bands)
        .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

/// Corruption assigned to one band by the mixture generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BandNoise {
    Gaussian { sigma: f64 },
    Impulse,
    Stripe,
    Deadline,
}

/// Band assignment of the mixture generator for a given seed: a seeded
/// permutation puts `ceil(2b/3)` bands under non-i.i.d. Gaussian noise and
/// deals the rest round-robin to impulse, stripe and deadline noise.
pub fn mixture_layout(bands: usize, spec: &NoiseSpec) -> Vec<BandNoise> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    mixture_layout_with(bands, spec, &mut rng)
}

fn mixture_layout_with(bands: usize, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Vec<BandNoise> {
    let mut order: Vec<usize> = (0..bands).collect();
    order.shuffle(rng);
    let n_gauss = (2 * bands).div_ceil(3);
    let sigmas = draw_sigmas(n_gauss, spec.sigma_range, rng);
    let mut layout = vec![BandNoise::Impulse; bands];
    for (j, &band) in order.iter().enumerate() {
        layout[band] = if j < n_gauss {
            BandNoise::Gaussian { sigma: sigmas[j] }
        } else {
            match (j - n_gauss) % 3 {
                0 => BandNoise::Impulse,
                1 => BandNoise::Stripe,
                _ => BandNoise::Deadline,
            }
        };
    }
    layout
}

/// Mixture of non-i.i.d. Gaussian, impulse, stripe and deadline noise.
pub fn add_mixture_noise(cube: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    spec.validate()?;
    if spec.kind != NoiseKind::Mixture {
        return Err(Error::invalid("add_mixture_noise needs a mixture spec"));
    }
    if cube.bands() < 3 {
        return Err(Error::dim(format!(
            "mixture noise needs at least 3 bands, got {}",
            cube.bands()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = mixture_layout_with(cube.bands(), spec, &mut rng);
    let (h, w, _) = cube.dims();
    let mut out = cube.clone();
    for (k, kind) in layout.into_iter().enumerate() {
        let band = out.band_mut(k);
        match kind {
            BandNoise::Gaussian { sigma } => add_band_gaussian(band, sigma / 255.0, &mut rng),
            BandNoise::Impulse => {
                let count = (spec.p * (h * w) as f64).round() as usize;
                for idx in index::sample(&mut rng, h * w, count) {
                    band[idx] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
            BandNoise::Stripe => {
                let count = (spec.p * w as f64).round() as usize;
                for col in index::sample(&mut rng, w, count) {
                    let offset = rng.random_range(-STRIPE_AMPLITUDE..=STRIPE_AMPLITUDE);
                    for r in 0..h {
                        let v = &mut band[r * w + col];
                        *v = (f64::from(*v) + offset) as f32;
                    }
                }
            }
            BandNoise::Deadline => {
                let count = (spec.p * w as f64).round() as usize;
                for col in index::sample(&mut rng, w, count) {
                    for r in 0..h {
                        band[r * w + col] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Applies whichever generator `spec` names.
pub fn add_noise(cube: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    match spec.kind {
        NoiseKind::Mixture => add_mixture_noise(cube, spec),
        _ => add_gaussian_noise(cube, spec),
    }
}

/// Simulated observation triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Noisy low-resolution cube.
    pub n: HsiCube,
    /// High-resolution PAN.
    pub p: PanImage,
    /// PAN at the low resolution.
    pub q: PanImage,
}

/// `N = add_noise(H down s)`, `P = H x3 phi`, `Q = P down s`.
pub fn simulate_observation(
    hr: &HsiCube,
    s: usize,
    phi: &SpectralResponse,
    spec: &NoiseSpec,
) -> Result<Observation> {
    let low = downsample(hr, s)?;
    let n = add_noise(&low, spec)?.with_unit_scaled(false);
    let p = synthesize_pan(hr, phi)?;
    let q = downsample_pan(&p, s)?;
    Ok(Observation { n, p, q })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, b: usize) -> HsiCube {
        HsiCube::from_fn(h, w, b, |r, c, k| {
            (0.5 + 0.3 * ((r as f32) * 0.7 + k as f32).sin() * ((c as f32) * 0.45).cos()).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn downsample_block_mean() {
        let cube = HsiCube::new(2, 2, 1, vec![0.0, 0.2, 0.4, 0.6]).unwrap();
        let d = downsample(&cube, 2).unwrap();
        assert_eq!(d.dims(), (1, 1, 1));
        assert!((d.get(0, 0, 0) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn downsample_constant_and_composition() {
        let c = HsiCube::filled(8, 8, 2, 0.42);
        assert!(downsample(&c, 4).unwrap().values().iter().all(|&v| (v - 0.42).abs() < 1e-6));
        let t = textured(16, 16, 3);
        let twice = downsample(&downsample(&t, 2).unwrap(), 2).unwrap();
        let once = downsample(&t, 4).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_rejects_indivisible_dims() {
        assert!(matches!(downsample(&HsiCube::zeros(6, 8, 1), 4), Err(Error::Dimension(_))));
        assert!(downsample(&HsiCube::zeros(8, 8, 1), 1).is_err());
    }

    #[test]
    fn downsample_preserves_band_means() {
        let t = textured(12, 12, 3);
        let d = downsample(&t, 3).unwrap();
        for k in 0..3 {
            let m0: f64 = t.band(k).iter().map(|&v| f64::from(v)).sum::<f64>() / 144.0;
            let m1: f64 = d.band(k).iter().map(|&v| f64::from(v)).sum::<f64>() / 16.0;
            assert!((m0 - m1).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = HsiCube::filled(3, 4, 2, 0.7);
        let u = upsample(&c, 3).unwrap();
        assert_eq!(u.dims(), (9, 12, 2));
        assert!(u.values().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let one = HsiCube::filled(1, 1, 1, 0.25);
        let u = upsample(&one, 4).unwrap();
        assert_eq!(u.dims(), (4, 4, 1));
        assert!(u.values().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn upsample_reproduces_affine_ramp_in_interior() {
        let (h, w, s) = (8usize, 8usize, 4usize);
        let ramp = |y: f64, x: f64| 0.1 + 0.03 * x + 0.05 * y;
        let low = HsiCube::from_fn(h, w, 1, |r, c, _| ramp(r as f64, c as f64) as f32);
        let up = upsample(&low, s).unwrap();
        // output pixel o sits at low-res coordinate (o + 0.5)/s - 0.5
        for r in 2 * s..(h - 2) * s {
            for c in 2 * s..(w - 2) * s {
                let y = (r as f64 + 0.5) / s as f64 - 0.5;
                let x = (c as f64 + 0.5) / s as f64 - 0.5;
                assert!((f64::from(up.get(r, c, 0)) - ramp(y, x)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn pan_synthesis_cases() {
        let c = HsiCube::filled(2, 2, 4, 0.3);
        let phi = SpectralResponse::normalized(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(synthesize_pan(&c, &phi).unwrap().values().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let t = textured(4, 4, 4);
        let onehot = SpectralResponse::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let p = synthesize_pan(&t, &onehot).unwrap();
        assert_eq!(p.values(), t.band(2));

        let spec = HsiCube::from_fn(1, 1, 4, |_, _, k| [0.1, 0.2, 0.3, 0.4][k]);
        let p = synthesize_pan(&spec, &SpectralResponse::uniform(4)).unwrap();
        assert!((p.get(0, 0) - 0.25).abs() < 1e-7);

        assert!(synthesize_pan(&t, &SpectralResponse::uniform(3)).is_err());
    }

    #[test]
    fn spectral_response_validation() {
        assert!(SpectralResponse::new(vec![0.5, 0.6]).is_err());
        assert!(SpectralResponse::new(vec![-0.5, 1.5]).is_err());
        let parsed: SpectralResponse = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(parsed.weights(), &[0.25, 0.75]);
        assert!(serde_json::from_str::<SpectralResponse>("[0.2,0.2]").is_err());
    }

    #[test]
    fn pan_commutes_with_downsample() {
        let t = textured(16, 16, 5);
        let phi = SpectralResponse::normalized(vec![0.1, 0.3, 0.2, 0.3, 0.1]).unwrap();
        let a = downsample_pan(&synthesize_pan(&t, &phi).unwrap(), 4).unwrap();
        let b = synthesize_pan(&downsample(&t, 4).unwrap(), &phi).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let t = textured(8, 8, 3);
        let out = add_gaussian_noise(&t, &NoiseSpec::gaussian_iid(0.0, 9)).unwrap();
        assert_eq!(out.values(), t.values());
    }

    #[test]
    fn iid_noise_has_requested_std() {
        let c = HsiCube::filled(256, 256, 1, 0.5);
        let out = add_gaussian_noise(&c, &NoiseSpec::gaussian_iid(10.0, 1234)).unwrap();
        let diffs: Vec<f64> = out.values().iter().map(|&v| f64::from(v) - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = 10.0 / 255.0;
        assert!((std - target).abs() / target < 0.02, "std {std} vs {target}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let t = textured(16, 16, 6);
        for spec in [
            NoiseSpec::gaussian_iid(30.0, 5),
            NoiseSpec::gaussian_noniid(10.0, 50.0, 5),
            NoiseSpec::mixture(10.0, 50.0, 0.35, 5),
        ] {
            assert_eq!(add_noise(&t, &spec).unwrap(), add_noise(&t, &spec).unwrap());
        }
        let a = add_noise(&t, &NoiseSpec::gaussian_iid(30.0, 5)).unwrap();
        let b = add_noise(&t, &NoiseSpec::gaussian_iid(30.0, 6)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn noniid_bands_get_different_levels() {
        let c = HsiCube::filled(64, 64, 4, 0.5);
        let out = add_gaussian_noise(&c, &NoiseSpec::gaussian_noniid(10.0, 50.0, 3)).unwrap();
        let stds: Vec<f64> = (0..4)
            .map(|k| {
                let d: Vec<f64> = out.band(k).iter().map(|&v| f64::from(v) - 0.5).collect();
                (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt() * 255.0
            })
            .collect();
        assert!(stds.iter().all(|&s| (8.0..55.0).contains(&s)), "{stds:?}");
        let spread = stds.iter().cloned().fold(0.0, f64::max) - stds.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 1.0);
    }

    #[test]
    fn mixture_layout_proportions() {
        let spec = NoiseSpec::mixture(10.0, 50.0, 0.15, 77);
        let layout = mixture_layout(32, &spec);
        let gauss = layout.iter().filter(|b| matches!(b, BandNoise::Gaussian { .. })).count();
        assert_eq!(gauss, 22);
        let count = |k: BandNoise| layout.iter().filter(|&&b| b == k).count();
        assert_eq!(count(BandNoise::Impulse), 4);
        assert_eq!(count(BandNoise::Stripe), 3);
        assert_eq!(count(BandNoise::Deadline), 3);
    }

    #[test]
    fn mixture_with_zero_p_only_touches_gaussian_bands() {
        let t = textured(16, 16, 9);
        let spec = NoiseSpec::mixture(10.0, 50.0, 0.0, 4);
        let out = add_mixture_noise(&t, &spec).unwrap();
        for (k, kind) in mixture_layout(9, &spec).into_iter().enumerate() {
            let changed = out.band(k) != t.band(k);
            assert_eq!(changed, matches!(kind, BandNoise::Gaussian { .. }), "band {k}");
        }
    }

    #[test]
    fn deadline_with_full_intensity_zeroes_band() {
        let spec = NoiseSpec::mixture(10.0, 50.0, 1.0, 2);
        // 9 bands: 6 gaussian, then one each of impulse, stripe, deadline
        let t9 = textured(8, 8, 9);
        let out = add_mixture_noise(&t9, &spec).unwrap();
        let layout = mixture_layout(9, &spec);
        let k = layout.iter().position(|&b| b == BandNoise::Deadline).expect("deadline band");
        assert!(out.band(k).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stripe_count_matches_intensity() {
        let t = textured(32, 64, 6);
        let spec = NoiseSpec::mixture(10.0, 50.0, 0.15, 21);
        let out = add_mixture_noise(&t, &spec).unwrap();
        let layout = mixture_layout(6, &spec);
        let k = layout.iter().position(|&b| b == BandNoise::Stripe).expect("stripe band");
        let striped = (0..64)
            .filter(|&c| {
                let res: Vec<f32> = (0..32).map(|r| out.get(r, c, k) - t.get(r, c, k)).collect();
                let first = res[0];
                first != 0.0 && res.iter().all(|&x| (x - first).abs() < 1e-6)
            })
            .count();
        assert_eq!(striped, (0.15f64 * 64.0).round() as usize);
    }

    #[test]
    fn mixture_needs_three_bands() {
        let spec = NoiseSpec::mixture(10.0, 50.0, 0.1, 0);
        assert!(add_mixture_noise(&HsiCube::zeros(4, 4, 2), &spec).is_err());
    }

    #[test]
    fn simulate_shapes_and_noise_free_path() {
        let h = textured(256, 256, 32);
        let phi = SpectralResponse::uniform(32);
        let obs = simulate_observation(&h, 4, &phi, &NoiseSpec::gaussian_iid(0.0, 1)).unwrap();
        assert_eq!(obs.n.dims(), (64, 64, 32));
        assert_eq!(obs.p.dims(), (256, 256));
        assert_eq!(obs.q.dims(), (64, 64));
        assert_eq!(obs.n.values(), downsample(&h, 4).unwrap().values());
    }

    #[test]
    fn simulate_constant_cube() {
        let h = HsiCube::filled(16, 16, 4, 0.5);
        let obs = simulate_observation(&h, 4, &SpectralResponse::uniform(4), &NoiseSpec::gaussian_iid(10.0, 3)).unwrap();
        assert!(obs.p.values().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(obs.q.values().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(obs.n.values().iter().any(|&v| (v - 0.5).abs() > 1e-4));
    }

    #[test]
    fn noise_spec_json() {
        let spec: NoiseSpec = serde_json::from_str(r#"{"kind":"mixture","p":0.35,"seed":7}"#).unwrap();
        assert_eq!(spec, NoiseSpec::mixture(10.0, 50.0, 0.35, 7));
        let bad = NoiseSpec { p: 1.5, ..spec };
        assert!(bad.validate().is_err());
    }
}
