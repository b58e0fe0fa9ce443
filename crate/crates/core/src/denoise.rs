//! Patch-based denoising with a trained pair, and PSNR/SSIM scoring.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{patch_grid, patch_mean, DataError, GrayImage};
use crate::dictupdate::DictionaryPair;
use crate::sparse2d::{CodingError, CodingStop, SparseCoder};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 999.0;
pub const PEAK: f64 = 255.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {height}x{width} is smaller than the {min}x{min} minimum")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Coding(#[from] CodingError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseConfig {
    /// Noise standard deviation in intensity units.
    pub sigma: f64,
    pub epsilon_gain: f64,
    /// Hard cap on triplets per patch.
    pub s_cap: usize,
    pub stride: usize,
    /// Weight of the noisy image in the per-pixel average; `None` is a plain
    /// average of patch estimates.
    pub blend: Option<f64>,
    /// Code mean-removed patches and add the mean back.
    pub remove_mean: bool,
}

impl DenoiseConfig {
    /// Defaults for patch side `m`: gain 1.15, cap `⌊m²/2⌋`, stride 1.
    pub fn new(sigma: f64, m: usize) -> Self {
        DenoiseConfig {
            sigma,
            epsilon_gain: 1.15,
            s_cap: (m * m / 2).max(1),
            stride: 1,
            blend: None,
            remove_mean: false,
        }
    }

    /// Residual target `gain · σ · √(m²)`.
    pub fn epsilon(&self, m: usize) -> f64 {
        self.epsilon_gain * self.sigma * ((m * m) as f64).sqrt()
    }

    pub fn validate(&self) -> Result<(), DenoiseError> {
        let bad = |msg: &str| Err(DenoiseError::InvalidConfig(msg.into()));
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("sigma must be finite and >= 0");
        }
        if !(self.epsilon_gain.is_finite() && self.epsilon_gain >= 0.0) {
            return bad("epsilon gain must be finite and >= 0");
        }
        if self.s_cap == 0 {
            return bad("s_cap must be >= 1");
        }
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if let Some(w) = self.blend {
            if !(w.is_finite() && w >= 0.0) {
                return bad("blend weight must be finite and >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DenoiseStats {
    pub patches_coded: usize,
    pub mean_triplets: f64,
}

/// Codes every patch on the grid with the error-driven rule, averages the
/// overlapping estimates per pixel and clamps to `[0, 255]`. Pixels not
/// covered by any patch (possible when the stride does not tile the image)
/// keep their input value.
pub fn denoise_image(
    noisy: &GrayImage,
    dict: &DictionaryPair,
    cfg: &DenoiseConfig,
) -> Result<(GrayImage, DenoiseStats), DenoiseError> {
    cfg.validate()?;
    let m = dict.m();
    if cfg.s_cap > dict.n1() * dict.n2() {
        return Err(DenoiseError::InvalidConfig(format!(
            "s_cap {} exceeds n1*n2 = {}",
            cfg.s_cap,
            dict.n1() * dict.n2()
        )));
    }
    let grid = patch_grid(noisy.height(), noisy.width(), m, cfg.stride)?;
    let stop = CodingStop::ErrorDriven { epsilon: cfg.epsilon(m), s_cap: cfg.s_cap };
    let coder = SparseCoder::for_dict(dict);
    let (h, w) = (noisy.height(), noisy.width());

    let mut rows: Vec<usize> = grid.iter().map(|&(r, _)| r).collect();
    rows.dedup();
    let cols: Vec<usize> = grid.iter().filter(|&&(r, _)| r == rows[0]).map(|&(_, c)| c).collect();

    // one m×w strip per grid row, summed afterwards in row order
    let strips: Vec<(Vec<f64>, usize)> = rows
        .par_iter()
        .map(|&r| -> Result<(Vec<f64>, usize), DenoiseError> {
            let mut strip = vec![0.0; m * w];
            let mut triplets = 0;
            for &c in &cols {
                let mut y = noisy.patch(r, c, m);
                let mean = if cfg.remove_mean { patch_mean(&y) } else { 0.0 };
                if cfg.remove_mean {
                    y.as_mut_slice().iter_mut().for_each(|v| *v -= mean);
                }
                let code = coder.code(&y, stop)?;
                triplets += code.len();
                let est = dict.reconstruct(&code);
                for j in 0..m {
                    for i in 0..m {
                        strip[i * w + c + j] += est[(i, j)] + mean;
                    }
                }
            }
            Ok((strip, triplets))
        })
        .collect::<Result<_, _>>()?;

    let mut sum = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    let mut total_triplets = 0usize;
    for (&r, (strip, triplets)) in rows.iter().zip(&strips) {
        total_triplets += triplets;
        for i in 0..m {
            let row = (r + i) * w;
            for (k, v) in strip[i * w..(i + 1) * w].iter().enumerate() {
                sum[row + k] += v;
            }
            for &c in &cols {
                for j in 0..m {
                    count[row + c + j] += 1;
                }
            }
        }
    }

    let lambda = cfg.blend.unwrap_or(0.0);
    let pixels = noisy
        .pixels()
        .iter()
        .zip(sum.iter().zip(&count))
        .map(|(&y, (&s, &n))| {
            let v = if n == 0 { y } else { (lambda * y + s) / (lambda + n as f64) };
            v.clamp(0.0, PEAK)
        })
        .collect();
    let out = GrayImage::new(h, w, pixels)?;
    let stats = DenoiseStats { patches_coded: grid.len(), mean_triplets: total_triplets as f64 / grid.len() as f64 };
    Ok((out, stats))
}

fn same_shape(a: &GrayImage, b: &GrayImage) -> Result<(), DenoiseError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(DenoiseError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log₁₀(255² / MSE)`, or [`PSNR_CAP_DB`] when the images are equal.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64, DenoiseError> {
    same_shape(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|k| (-((k as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a row-major image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            horiz[r * ow + c] = taps.iter().enumerate().map(|(t, g)| g * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, g)| g * horiz[(r + t) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over all fully contained 11×11 Gaussian
/// windows (σ = 1.5, K1 = 0.01, K2 = 0.03, range 255).
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64, DenoiseError> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DenoiseError::TooSmall { height: h, width: w, min: SSIM_WINDOW });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (a.pixels(), b.pixels());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let (mx, _, _) = filter_valid(x, h, w, &taps);
    let (my, _, _) = filter_valid(y, h, w, &taps);
    let (sxx, _, _) = filter_valid(&xx, h, w, &taps);
    let (syy, _, _) = filter_valid(&yy, h, w, &taps);
    let (sxy, _, _) = filter_valid(&xy, h, w, &taps);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let total: f64 = (0..mx.len())
        .map(|k| {
            let (ux, uy) = (mx[k], my[k]);
            let vx = sxx[k] - ux * ux;
            let vy = syy[k] - uy * uy;
            let cov = sxy[k] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseReport {
    pub psnr_noisy: Option<f64>,
    pub psnr_denoised: Option<f64>,
    pub ssim_noisy: Option<f64>,
    pub ssim_denoised: Option<f64>,
    pub patches_coded: usize,
    pub mean_triplets: f64,
}

impl DenoiseReport {
    /// Scores against `clean` when it is available.
    pub fn new(
        clean: Option<&GrayImage>,
        noisy: &GrayImage,
        denoised: &GrayImage,
        stats: DenoiseStats,
    ) -> Result<Self, DenoiseError> {
        let mut report = DenoiseReport {
            psnr_noisy: None,
            psnr_denoised: None,
            ssim_noisy: None,
            ssim_denoised: None,
            patches_coded: stats.patches_coded,
            mean_triplets: stats.mean_triplets,
        };
        if let Some(clean) = clean {
            report.psnr_noisy = Some(psnr(noisy, clean)?);
            report.psnr_denoised = Some(psnr(denoised, clean)?);
            report.ssim_noisy = Some(ssim(noisy, clean)?);
            report.ssim_denoised = Some(ssim(denoised, clean)?);
        }
        Ok(report)
    }
}
