//! Cross-module invariants checked on random inputs.

use hipandas::cube::{mode3_product, spectral_singular_values};
use hipandas::degrade::{add_noise, downsample, downsample_pan, simulate_observation, synthesize_pan, NoiseSpec, SpectralResponse};
use hipandas::metrics::{ergas, psnr, sam, ssim};
use hipandas::nets::{gdn_forward, gsrn_forward, init_state, prn_forward, ArchConfig};
use hipandas::prior::energy_curve;
use hipandas::train::{loss_denoise, loss_pan_highfreq, loss_sr_stage2};
use hipandas::{BaseImages, CoeffMatrix, HsiCube, PanImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cube(h: usize, w: usize, b: usize, seed: u64) -> HsiCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HsiCube::from_fn(h, w, b, |_, _, _| rng.random_range(0.05f32..0.95))
}

fn pan(h: usize, w: usize, seed: u64) -> PanImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PanImage::from_fn(h, w, |_, _| rng.random())
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        channels: 4,
        rank_gdn: 2,
        rank_gsrn: 3,
        ..ArchConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn downsample_keeps_band_means(seed in 0u64..10_000, s in 2usize..5) {
        let c = cube(4 * s, 2 * s, 3, seed);
        let d = downsample(&c, s).unwrap();
        for k in 0..3 {
            let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            prop_assert!((mean(c.band(k)) - mean(d.band(k))).abs() < 1e-6);
        }
    }

    #[test]
    fn pan_synthesis_commutes_with_downsample(seed in 0u64..10_000, raw in proptest::collection::vec(0.01f64..1.0, 4)) {
        let c = cube(8, 8, 4, seed);
        let phi = SpectralResponse::normalized(raw).unwrap();
        let a = downsample_pan(&synthesize_pan(&c, &phi).unwrap(), 2).unwrap();
        let b = synthesize_pan(&downsample(&c, 2).unwrap(), &phi).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn metric_identities(seed in 0u64..10_000, c in 0.1f32..5.0) {
        let a = cube(12, 12, 3, seed);
        let b = cube(12, 12, 3, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(sam(&a, &a.map(|v| c * v)).unwrap().degrees < 1e-4);
        prop_assert!(ergas(&a, &a, 4).unwrap().abs() < 1e-6);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn energy_curve_is_a_normalized_cdf(seed in 0u64..10_000, b in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = HsiCube::from_fn(6, 5, b, |_, _, _| rng.random_range(-1.0f32..1.0));
        let e = energy_curve(&m).unwrap();
        prop_assert_eq!(e.len(), b);
        prop_assert!(e.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(e.iter().all(|&v| v > 0.0 && v <= 1.0 + 1e-12));
        prop_assert!((e[b - 1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn factorized_cube_rank_is_bounded(seed in 0u64..10_000, r in 1usize..4) {
        let bands = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = BaseImages::new(6, 6, r, (0..36 * r).map(|_| rng.random::<f32>()).collect()).unwrap();
        let u = CoeffMatrix::new(bands, r, (0..bands * r).map(|_| rng.random::<f32>()).collect()).unwrap();
        let sv = spectral_singular_values(&mode3_product(&v, &u).unwrap());
        prop_assert!(sv[r..].iter().all(|&x| x <= 1e-5 * sv[0]));
    }

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000) {
        let a = cube(8, 8, 3, seed);
        let b = cube(8, 8, 3, seed + 7);
        prop_assert!(loss_denoise(&a, &b).unwrap() >= 0.0);
        prop_assert!(loss_sr_stage2(&a, &downsample(&b, 2).unwrap(), 2).unwrap() >= 0.0);
        prop_assert!(loss_pan_highfreq(&pan(8, 8, seed), &pan(8, 8, seed + 1)).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_outputs_respect_their_ranges(seed in 0u64..10_000) {
        let state = init_state(&small_arch(), 5, seed).unwrap();
        let n = cube(8, 8, 5, seed);
        let gdn = gdn_forward(&state, &n, &pan(8, 8, seed)).unwrap();
        prop_assert!(gdn.l_hat.is_within_unit());
        prop_assert!(gdn.coeffs.unwrap().is_row_stochastic(1e-6));
        let sv = spectral_singular_values(&gdn.l_hat);
        prop_assert!(sv[2..].iter().all(|&x| x <= 1e-5 * sv[0]));

        let sr = gsrn_forward(&state, &gdn.l_hat, &pan(16, 16, seed + 1), 2).unwrap();
        prop_assert!(sr.detail.values().iter().all(|v| v.abs() <= 0.5));
        let sv = spectral_singular_values(&sr.detail);
        prop_assert!(sv[3..].iter().all(|&x| x <= 1e-5 * sv[0]));
        prop_assert_eq!(prn_forward(&state, &sr.h_hat).unwrap().dims(), (16, 16));
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = cube(32, 32, 4, 3);
    let scores: Vec<f64> = [5.0, 10.0, 30.0]
        .iter()
        .map(|&sigma| psnr(&clean, &add_noise(&clean, &NoiseSpec::gaussian_iid(sigma, 9)).unwrap()).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

#[test]
fn simulation_is_bit_deterministic() {
    let hr = cube(16, 16, 4, 4);
    let phi = SpectralResponse::uniform(4);
    for spec in [
        NoiseSpec::gaussian_iid(30.0, 5),
        NoiseSpec::gaussian_noniid(10.0, 50.0, 5),
        NoiseSpec::mixture(10.0, 50.0, 0.15, 5),
    ] {
        let a = simulate_observation(&hr, 2, &phi, &spec).unwrap();
        let b = simulate_observation(&hr, 2, &phi, &spec).unwrap();
        assert_eq!(a.n.values(), b.n.values());
        assert_eq!(a.q.values(), b.q.values());
    }
}

#[test]
fn zero_pan_input_changes_fusion_output() {
    let state = init_state(&small_arch(), 5, 2).unwrap();
    let n = cube(8, 8, 5, 2);
    let textured = gdn_forward(&state, &n, &pan(8, 8, 3)).unwrap().l_hat;
    let blank = gdn_forward(&state, &n, &PanImage::zeros(8, 8)).unwrap().l_hat;
    assert_ne!(textured.values(), blank.values());
}
