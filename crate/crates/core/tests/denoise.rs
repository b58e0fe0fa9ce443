use std::path::PathBuf;

use proptest::prelude::*;
use sepdl_core::data::{add_gaussian_noise, load_pgm, GrayImage};
use sepdl_core::denoise::{denoise_image, psnr, ssim, DenoiseConfig, DenoiseError};
use sepdl_core::dictupdate::{DictMode, DictionaryPair};
use sepdl_core::numerics::{polar_factor, Mat};
use sepdl_core::rng::{gaussian_mat, seeded, unit_column_mat};
use sepdl_core::DataError;

fn camera() -> GrayImage {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/camera.pgm");
    load_pgm(path).unwrap()
}

fn ortho(seed: u64, m: usize) -> DictionaryPair {
    let mut rng = seeded(seed);
    let d1 = polar_factor(&gaussian_mat(&mut rng, m, m)).unwrap().q;
    let d2 = polar_factor(&gaussian_mat(&mut rng, m, m)).unwrap().q;
    DictionaryPair::new(DictMode::Orthonormal, d1, d2).unwrap()
}

/// SSIM straight from the definition: explicit 2D Gaussian window, local
/// moments per window position, mean over positions.
#[allow(clippy::needless_range_loop)]
fn ssim_naive(a: &GrayImage, b: &GrayImage) -> f64 {
    let k = 11;
    let sigma: f64 = 1.5;
    let mut win = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *w = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *w;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=a.height() - k {
        for c in 0..=a.width() - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let w = win[i][j] / total;
                    mx += w * a.get(r + i, c + j);
                    my += w * b.get(r + i, c + j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let w = win[i][j] / total;
                    let (x, y) = (a.get(r + i, c + j) - mx, b.get(r + i, c + j) - my);
                    vx += w * x * x;
                    vy += w * y * y;
                    cov += w * x * y;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_direct_formula() {
    let clean = GrayImage::from_fn(40, 33, |r, c| 128.0 + 60.0 * ((r as f64) * 0.3).sin() * ((c as f64) * 0.2).cos());
    let noisy = add_gaussian_noise(&clean, 10.0, 3).unwrap();
    let fast = ssim(&clean, &noisy).unwrap();
    let slow = ssim_naive(&clean, &noisy);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    assert!(fast < 1.0 && fast > -1.0);
}

#[test]
fn noise_at_sigma_ten_gives_expected_input_psnr() {
    let clean = camera();
    assert_eq!((clean.height(), clean.width()), (512, 512));
    let noisy = add_gaussian_noise(&clean, 10.0, 1).unwrap();
    let p = psnr(&noisy, &clean).unwrap();
    assert!((p - 28.13).abs() <= 0.05, "{p}");
    let noisy5 = add_gaussian_noise(&clean, 5.0, 1).unwrap();
    let p5 = psnr(&noisy5, &clean).unwrap();
    assert!((p5 - 34.16).abs() <= 0.05, "{p5}");
}

#[test]
fn exact_coding_on_a_tiling_is_the_identity() {
    let m = 4;
    let dict = ortho(2, m);
    let img = GrayImage::from_fn(12, 16, |r, c| 20.0 + ((r * 13 + c * 7) % 200) as f64);
    let mut cfg = DenoiseConfig::new(0.0, m);
    cfg.s_cap = m * m;
    cfg.stride = m;
    let (out, stats) = denoise_image(&img, &dict, &cfg).unwrap();
    assert_eq!(stats.patches_coded, 3 * 4);
    for (a, b) in out.pixels().iter().zip(img.pixels()) {
        assert!((a - b).abs() < 1e-8);
    }
    // stride 1 averages exact estimates, still the identity
    cfg.stride = 1;
    let (out, _) = denoise_image(&img, &dict, &cfg).unwrap();
    assert!(out.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-8));
}

#[test]
fn general_dictionary_uses_omp() {
    let m = 4;
    let mut rng = seeded(5);
    let d1 = unit_column_mat(&mut rng, m, 6);
    let d2 = unit_column_mat(&mut rng, m, 6);
    let dict = DictionaryPair::new(DictMode::General, d1, d2).unwrap();
    let img = GrayImage::from_fn(10, 10, |r, c| ((r * 29 + c * 11) % 256) as f64);
    let cfg = DenoiseConfig::new(5.0, m);
    let (out, stats) = denoise_image(&img, &dict, &cfg).unwrap();
    assert!(stats.mean_triplets <= cfg.s_cap as f64);
    assert!(out.pixels().iter().all(|v| (0.0..=255.0).contains(v)));
}

#[test]
fn blend_weight_pulls_towards_the_input() {
    let m = 4;
    let dict = ortho(3, m);
    let img = add_gaussian_noise(&GrayImage::from_fn(16, 16, |r, c| (r * 10 + c) as f64), 10.0, 2).unwrap();
    let mut cfg = DenoiseConfig::new(10.0, m);
    let (plain, _) = denoise_image(&img, &dict, &cfg).unwrap();
    cfg.blend = Some(1e9);
    let (held, _) = denoise_image(&img, &dict, &cfg).unwrap();
    let clamped = img.map(|v| v.clamp(0.0, 255.0));
    assert!(psnr(&held, &clamped).unwrap() > 60.0);
    assert!(psnr(&plain, &clamped).unwrap() < psnr(&held, &clamped).unwrap());
}

#[test]
fn errors() {
    let dict = ortho(1, 8);
    let small = GrayImage::from_fn(6, 20, |_, _| 0.0);
    let cfg = DenoiseConfig::new(1.0, 8);
    assert!(matches!(denoise_image(&small, &dict, &cfg), Err(DenoiseError::Data(DataError::ImageTooSmall { .. }))));
    let img = GrayImage::from_fn(12, 12, |_, _| 0.0);
    let other = GrayImage::from_fn(12, 13, |_, _| 0.0);
    assert!(matches!(ssim(&img, &other), Err(DenoiseError::ShapeMismatch(_))));
    let mut bad = DenoiseConfig::new(1.0, 8);
    bad.s_cap = 65;
    assert!(matches!(denoise_image(&img, &dict, &bad), Err(DenoiseError::InvalidConfig(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_stays_in_range_and_meets_the_error_rule(
        h in 4usize..14, w in 4usize..14, sigma in 0.0f64..40.0, stride in 1usize..4, seed in any::<u64>()
    ) {
        let m = 4;
        let dict = ortho(seed, m);
        let base = GrayImage::from_fn(h, w, |r, c| ((r * 37 + c * 11 + seed as usize % 97) % 256) as f64);
        let noisy = add_gaussian_noise(&base, 30.0, seed).unwrap();
        let cfg = DenoiseConfig { stride, ..DenoiseConfig::new(sigma, m) };
        let (out, stats) = denoise_image(&noisy, &dict, &cfg).unwrap();
        prop_assert!(out.pixels().iter().all(|v| (0.0..=255.0).contains(v)));
        prop_assert!(stats.mean_triplets <= cfg.s_cap as f64);
        // every coded patch meets the stopping rule
        let eps = cfg.epsilon(m);
        let coder = sepdl_core::SparseCoder::for_dict(&dict);
        let stop = sepdl_core::CodingStop::ErrorDriven { epsilon: eps, s_cap: cfg.s_cap };
        for r in (0..=h - m).step_by(stride) {
            for c in (0..=w - m).step_by(stride) {
                let y: Mat = noisy.patch(r, c, m);
                let code = coder.code(&y, stop).unwrap();
                let res = y.sub(&dict.reconstruct(&code)).frobenius();
                prop_assert!(res <= eps + 1e-9 || code.len() == cfg.s_cap);
            }
        }
    }
}
