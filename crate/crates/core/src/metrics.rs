//! Full-reference image metrics, a sharpness score, and analytic MAC counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DegradationEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::losses::{FrozenFeatureExtractor, MSE_FLOOR};
use crate::msdi::{Generator, MsdiConfig};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Extractor stage (0-based) whose activations feed contextual similarity.
pub const CX_LAYER: usize = 2;
const CX_BANDWIDTH: f64 = 0.5;
const CX_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub cx: f64,
}

/// Mean squared error in double precision.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&u, &v)| {
            let d = u as f64 - v as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / mse)` for unit dynamic range, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    (-10.0 * mse.max(MSE_FLOOR).log10()).min(PSNR_CAP_DB)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let mid = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows and all channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..CHANNELS {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Rows of unit-norm feature vectors, one per spatial position.
fn unit_vectors(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let s = t.shape();
    let plane = s.h * s.w;
    (0..plane)
        .map(|p| {
            let v: Vec<f64> = (0..s.c).map(|c| t.data()[c * plane + p] as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Contextual dissimilarity between two single-sample feature maps.
/// `i` ranges over positions of `fa`, `j` over positions of `fb`.
pub fn contextual_similarity_features(fa: &Tensor<f32>, fb: &Tensor<f32>) -> Result<f64> {
    if fa.shape() != fb.shape() || fa.shape().n != 1 {
        return Err(Error::Dimension(format!("feature maps differ: {} vs {}", fa.shape(), fb.shape())));
    }
    let va = unit_vectors(fa);
    let vb = unit_vectors(fb);
    let n = vb.len();
    let mut best = vec![0.0f64; n];
    let mut row = vec![0.0f64; n];
    for a in &va {
        for (j, b) in vb.iter().enumerate() {
            let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            row[j] = (1.0 - cos).max(0.0);
        }
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        for d in row.iter_mut() {
            *d = ((1.0 - *d / (min + CX_EPS)) / CX_BANDWIDTH).exp();
        }
        let z: f64 = row.iter().sum();
        for (j, w) in row.iter().enumerate() {
            best[j] = best[j].max(w / z);
        }
    }
    let mean = best.iter().sum::<f64>() / n as f64;
    Ok(-mean.ln())
}

/// Contextual dissimilarity on the extractor's third-stage features; lower
/// means more similar content.
pub fn contextual_similarity(a: &Image, b: &Image, extractor: &FrozenFeatureExtractor<f32>) -> Result<f64> {
    a.same_dims(b)?;
    let fa = extractor.features(&a.to_tensor());
    let fb = extractor.features(&b.to_tensor());
    contextual_similarity_features(&fa[CX_LAYER], &fb[CX_LAYER])
}

pub fn luminance(a: &Image) -> Vec<f64> {
    let (r, g, b) = (a.plane(0), a.plane(1), a.plane(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
        .collect()
}

/// Variance of the 4-neighbour Laplacian of luminance over interior pixels.
pub fn sharpness(a: &Image) -> f64 {
    let (h, w) = a.dims();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let l = luminance(a);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let lap = l[i - w] + l[i + w] + l[i - 1] + l[i + 1] - 4.0 * l[i];
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let n = ((h - 2) * (w - 2)) as f64;
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

pub fn evaluate(a: &Image, b: &Image, extractor: &FrozenFeatureExtractor<f32>) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
        cx: contextual_similarity(a, b, extractor)?,
    })
}

/// Multiply-accumulates of one deblurring pass at `h × w`: every stacked net
/// with its injection branches, plus the encoder when degradation is used.
pub fn count_macs(generator: &MsdiConfig, encoder: &EncoderConfig, h: usize, w: usize) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Generator::<f32>::new(generator, &mut rng)?;
    let mut total = g.macs(h, w);
    if generator.uses_degradation() {
        total += DegradationEncoder::<f32>::new(encoder, &mut rng)?.macs(h, w);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.gen::<f32>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let p = psnr(&Image::filled(16, 16, 0.2), &Image::filled(16, 16, 0.3)).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert!(psnr(&a, &random(16, 32, 1)).is_err());
    }

    #[test]
    fn ssim_identity_inverse_and_size_check() {
        let a = random(32, 32, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = Image::from_fn(32, 32, |c, y, x| 1.0 - a.get(c, y, x));
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        assert!(ssim(&random(8, 8, 0), &random(8, 8, 1)).is_err());
    }

    #[test]
    fn sharpness_cases() {
        assert_eq!(sharpness(&Image::filled(16, 16, 0.4)), 0.0);
        let checker = Image::from_fn(16, 16, |_, y, x| ((x + y) % 2) as f32);
        let boxed = Image::from_fn(16, 16, |c, y, x| {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, 15) as usize;
                    let xx = (x as i64 + dx).clamp(0, 15) as usize;
                    s += checker.get(c, yy, xx);
                }
            }
            s / 9.0
        });
        assert!(sharpness(&checker) > sharpness(&boxed));
    }

    #[test]
    fn cx_self_match_is_zero_and_below_cross() {
        let ext = FrozenFeatureExtractor::<f32>::default();
        let a = random(32, 32, 3);
        let b = random(32, 32, 4);
        let self_cx = contextual_similarity(&a, &a, &ext).unwrap();
        assert!(self_cx.abs() < 1e-9, "{self_cx}");
        assert!(self_cx <= contextual_similarity(&a, &b, &ext).unwrap());
    }

    #[test]
    fn cx_of_equal_constant_images_is_not_minimal() {
        // identical interior features make every affinity tie, so a textured
        // self-pair scores lower than a flat one
        let ext = FrozenFeatureExtractor::<f32>::default();
        let flat = Image::filled(32, 32, 0.5);
        let textured = random(32, 32, 5);
        let flat_cx = contextual_similarity(&flat, &flat, &ext).unwrap();
        assert!(flat_cx > contextual_similarity(&textured, &textured, &ext).unwrap() + 1.0);
    }

    #[test]
    fn macs_scale_with_area() {
        let cfg = MsdiConfig::default();
        let enc = EncoderConfig::default();
        let small = count_macs(&cfg, &enc, 64, 64).unwrap();
        assert_eq!(count_macs(&cfg, &enc, 128, 128).unwrap(), 4 * small);
    }
}
