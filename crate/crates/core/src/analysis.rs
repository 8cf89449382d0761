//! Representation analyses: latent interpolation, degradation swapping,
//! content/blur decoupling and blur-percentile reports.

use serde::{Deserialize, Serialize};

use crate::dataset::ImagePair;
use crate::encoder::DegradationEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::FrozenFeatureExtractor;
use crate::metrics::{contextual_similarity, psnr, ssim};
use crate::msdi::Generator;
use crate::tensor::Tensor;
use crate::training::infer_deblur;

/// Ranking key used to order pairs from blurriest to sharpest.
pub const BLUR_RANKING: &str = "psnr(blurry, sharp)";

/// `(1 − α)·a + α·b`, elementwise.
pub fn lerp_degradation(a: &Tensor<f32>, b: &Tensor<f32>, alpha: f32) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("degradation maps differ: {} vs {}", a.shape(), b.shape())));
    }
    Ok(a.zip_map(b, |u, v| (1.0 - alpha) * u + alpha * v))
}

fn encode_one(encoder: &DegradationEncoder<f32>, img: &Image) -> Result<Tensor<f32>> {
    Ok(encoder.encode(&img.to_tensor())?.data)
}

fn reblur_one(g_r: &Generator<f32>, sharp: &Image, deg: &Tensor<f32>) -> Result<Image> {
    let out = g_r.run(&sharp.to_tensor(), Some(deg))?;
    let mut images = Image::from_batch(&out)?;
    Ok(images.remove(0).clamped())
}

/// Reblur `x` under degradations interpolated from `E(x)` (α = 0) to `E(y)`
/// (α = 1). Outputs are clamped to `[0, 1]`.
pub fn interpolate_degradations(
    x: &Image,
    y: &Image,
    encoder: &DegradationEncoder<f32>,
    g_r: &Generator<f32>,
    alphas: &[f64],
) -> Result<Vec<Image>> {
    x.same_dims(y)?;
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Invalid(format!("interpolation weight {a} is outside [0, 1]")));
    }
    let deg_x = encode_one(encoder, x)?;
    let deg_y = encode_one(encoder, y)?;
    alphas
        .iter()
        .map(|&a| reblur_one(g_r, x, &lerp_degradation(&deg_x, &deg_y, a as f32)?))
        .collect()
}

/// The standard reblurring path `reblur(x, E(y))` for one image.
pub fn reblur_image(x: &Image, y: &Image, encoder: &DegradationEncoder<f32>, g_r: &Generator<f32>) -> Result<Image> {
    x.same_dims(y)?;
    reblur_one(g_r, x, &encode_one(encoder, y)?)
}

/// Reblur the sharp scene `a` with the degradation extracted from `b`.
pub fn swap_reblur(a_sharp: &Image, b_blurry: &Image, encoder: &DegradationEncoder<f32>, g_r: &Generator<f32>) -> Result<Image> {
    if a_sharp.dims() != b_blurry.dims() {
        return Err(Error::Dimension(format!(
            "swap needs equal sizes, got {:?} and {:?}",
            a_sharp.dims(),
            b_blurry.dims()
        )));
    }
    reblur_image(a_sharp, b_blurry, encoder, g_r)
}

/// Number of sign changes in the first difference of `values`. Zero steps
/// carry no sign.
pub fn derivative_sign_changes(values: &[f64]) -> usize {
    let signs: Vec<f64> = values
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d != 0.0)
        .map(f64::signum)
        .collect();
    signs.windows(2).filter(|s| s[0] != s[1]).count()
}

/// Contextual dissimilarities for one `(A, B)` pairing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingCx {
    pub a: String,
    pub b: String,
    pub blur_a_vs_a: f64,
    pub swap_vs_a: f64,
    pub blur_a_vs_b: f64,
    pub swap_vs_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplenessReport {
    /// Mean `CX(blur(A), A)`.
    pub blur_a_vs_a: f64,
    /// Mean `CX(ReBlur(A, deg_B), A)`.
    pub swap_vs_a: f64,
    /// Mean `CX(blur(A), B)`.
    pub blur_a_vs_b: f64,
    /// Mean `CX(ReBlur(A, deg_B), B)`.
    pub swap_vs_b: f64,
    pub pairs: usize,
    /// Pairings with `CX(swap, A) < CX(swap, B)`.
    pub content_kept_fraction: f64,
    pub rows: Vec<PairingCx>,
}

impl DecouplenessReport {
    /// Both same-content means sit below both cross-content means.
    pub fn ordering_holds(&self) -> bool {
        self.blur_a_vs_a.max(self.swap_vs_a) < self.blur_a_vs_b.min(self.swap_vs_b)
    }
}

/// Split `pairs` into consecutive `(A, B)` pairings and measure how much of
/// each reblurred swap still looks like its own scene.
pub fn decoupleness_report(
    pairs: &[ImagePair],
    encoder: &DegradationEncoder<f32>,
    g_r: &Generator<f32>,
    extractor: &FrozenFeatureExtractor<f32>,
) -> Result<DecouplenessReport> {
    if pairs.is_empty() || pairs.len() % 2 != 0 {
        return Err(Error::Invalid(format!("decoupleness needs an even, non-zero number of pairs, got {}", pairs.len())));
    }
    let rows = pairs
        .chunks(2)
        .map(|ab| {
            let (a, b) = (&ab[0], &ab[1]);
            let swap = swap_reblur(&a.sharp, &b.blurry, encoder, g_r)?;
            Ok(PairingCx {
                a: a.id.clone(),
                b: b.id.clone(),
                blur_a_vs_a: contextual_similarity(&a.blurry, &a.sharp, extractor)?,
                swap_vs_a: contextual_similarity(&swap, &a.sharp, extractor)?,
                blur_a_vs_b: contextual_similarity(&a.blurry, &b.sharp, extractor)?,
                swap_vs_b: contextual_similarity(&swap, &b.sharp, extractor)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let avg = |f: fn(&PairingCx) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(DecouplenessReport {
        blur_a_vs_a: avg(|r| r.blur_a_vs_a),
        swap_vs_a: avg(|r| r.swap_vs_a),
        blur_a_vs_b: avg(|r| r.blur_a_vs_b),
        swap_vs_b: avg(|r| r.swap_vs_b),
        pairs: rows.len(),
        content_kept_fraction: rows.iter().filter(|r| r.swap_vs_a < r.swap_vs_b).count() as f64 / n,
        rows,
    })
}

/// Indices of the blurriest and sharpest `floor(fraction·N)` pairs.
pub fn percentile_split(pairs: &[ImagePair], fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Invalid(format!("fraction must lie in (0, 0.5], got {fraction}")));
    }
    let k = (fraction * pairs.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Invalid(format!(
            "{} pairs are too few for a {fraction} split",
            pairs.len()
        )));
    }
    let scores: Vec<f64> = pairs.iter().map(ImagePair::input_psnr).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let sharpest = order[order.len() - k..].to_vec();
    order.truncate(k);
    Ok((order, sharpest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub blurriest_psnr: f64,
    pub sharpest_psnr: f64,
    pub blurriest_input_psnr: f64,
    pub sharpest_input_psnr: f64,
    pub input_psnr: f64,
    pub n: usize,
    pub fraction: f64,
    pub ranking: String,
}

/// Deblurring quality overall and on the blurriest/sharpest subsets.
pub fn eval_report(
    pairs: &[ImagePair],
    encoder: &DegradationEncoder<f32>,
    g_d: &Generator<f32>,
    fraction: f64,
) -> Result<EvalReport> {
    let blurry: Vec<&Image> = pairs.iter().map(|p| &p.blurry).collect();
    let restored = infer_deblur(encoder, g_d, &blurry)?;
    score_restorations(pairs, &restored, fraction)
}

/// [`eval_report`] for precomputed restorations, one per pair.
pub fn score_restorations(pairs: &[ImagePair], restored: &[Image], fraction: f64) -> Result<EvalReport> {
    if restored.len() != pairs.len() {
        return Err(Error::Invalid(format!("{} restorations for {} pairs", restored.len(), pairs.len())));
    }
    let (blurriest, sharpest) = percentile_split(pairs, fraction)?;
    let psnrs = restored
        .iter()
        .zip(pairs)
        .map(|(r, p)| psnr(r, &p.sharp))
        .collect::<Result<Vec<_>>>()?;
    let ssims = restored
        .iter()
        .zip(pairs)
        .map(|(r, p)| ssim(r, &p.sharp))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<f64> = pairs.iter().map(ImagePair::input_psnr).collect();
    let subset = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
    let all: Vec<usize> = (0..pairs.len()).collect();
    Ok(EvalReport {
        psnr: subset(&psnrs, &all),
        ssim: subset(&ssims, &all),
        blurriest_psnr: subset(&psnrs, &blurriest),
        sharpest_psnr: subset(&psnrs, &sharpest),
        blurriest_input_psnr: subset(&inputs, &blurriest),
        sharpest_input_psnr: subset(&inputs, &sharpest),
        input_psnr: subset(&inputs, &all),
        n: pairs.len(),
        fraction,
        ranking: BLUR_RANKING.to_string(),
    })
}
