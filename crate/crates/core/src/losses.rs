//! Training objectives and the frozen feature extractor behind the
//! perceptual loss and contextual similarity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{hinge_g_loss, DiscriminatorOutputs};
use crate::autograd::{Graph, Var};
use crate::encoder::DegradationEncoder;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, HE_GAIN, LEAKY_SLOPE};
use crate::tensor::{ConvGeometry, Real, Tensor};

pub const EXTRACTOR_STAGES: usize = 5;
const EXTRACTOR_STRIDES: [usize; EXTRACTOR_STAGES] = [1, 2, 2, 2, 2];
const EXTRACTOR_WIDTHS: [usize; EXTRACTOR_STAGES] = [16, 32, 32, 64, 64];
/// Seed of the default extractor weights.
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;
/// MSE floor shared by the PSNR metric and loss.
pub const MSE_FLOOR: f64 = 1e-10;

/// Seeded random conv pyramid with frozen weights. Weights can also be
/// supplied from outside through [`FrozenFeatureExtractor::from_params`].
#[derive(Clone, Debug)]
pub struct FrozenFeatureExtractor<T> {
    params: ParamStore<T>,
    stages: Vec<Conv2d>,
}

impl<T: Real> FrozenFeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c_in = 3;
        let stages = EXTRACTOR_WIDTHS
            .iter()
            .zip(EXTRACTOR_STRIDES)
            .enumerate()
            .map(|(i, (&w, s))| {
                let conv = Conv2d::new(&mut params, &format!("stage{i}"), c_in, w, ConvGeometry::new(3, s, 1), HE_GAIN, &mut rng);
                c_in = w;
                conv
            })
            .collect();
        Self { params, stages }
    }

    /// Replace the seeded weights with externally trained ones of the same layout.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let mut ext = Self::new(0);
        ext.params.load_from(&params)?;
        Ok(ext)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.params.bind(graph, false)
    }

    /// Activations after each stage.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut h = x;
        self.stages
            .iter()
            .map(|conv| {
                h = conv.forward(p, h).leaky_relu(LEAKY_SLOPE);
                h
            })
            .collect()
    }

    pub fn features(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let g = Graph::new();
        let p = self.bind(&g);
        self.forward(&p, g.constant(x.clone()))
            .iter()
            .map(|v| (*v.value()).clone())
            .collect()
    }
}

impl<T: Real> Default for FrozenFeatureExtractor<T> {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Perceptual term against the adversarial term of the reblurring loss.
    pub lambda1: f64,
    /// L1 deblurring term in stage 1.
    pub lambda2: f64,
    /// Blur-aware term in stage 2.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 30.0,
            lambda2: 10.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

fn same_shape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("loss operands differ: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn l1_loss<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(&a, &b)?;
    Ok(a.sub(b).abs().mean())
}

/// Sum over extractor stages of the mean absolute activation difference.
pub fn perceptual_loss<'g, T: Real>(
    extractor: &FrozenFeatureExtractor<T>,
    p: &Bound<'g, T>,
    a: Var<'g, T>,
    b: Var<'g, T>,
) -> Result<Var<'g, T>> {
    same_shape(&a, &b)?;
    let fa = extractor.forward(p, a);
    let fb = extractor.forward(p, b);
    Ok(sum(fa.iter().zip(&fb).map(|(u, v)| u.sub(*v).abs().mean())))
}

/// Negative PSNR, `10 log10(max(mse, 1e-10))`, averaged over the batch.
pub fn psnr_loss<'g, T: Real>(x: Var<'g, T>, restored: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(&x, &restored)?;
    Ok(restored.sub(x).square().mean_per_sample().clamp_min(MSE_FLOOR).log10().scale(10.0).mean())
}

/// Sum over encoder stages of the mean absolute activation difference.
/// The target side is detached, so gradients reach `restored` only.
pub fn blur_aware_loss<'g, T: Real>(
    encoder: &DegradationEncoder<T>,
    p: &Bound<'g, T>,
    restored: Var<'g, T>,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    same_shape(&restored, &x)?;
    let fr = encoder.forward(p, restored).layers;
    let fx = encoder.forward(p, x.detach()).layers;
    Ok(sum(fr.iter().zip(&fx).map(|(u, v)| u.sub(*v).abs().mean())))
}

fn sum<'g, T: Real>(mut terms: impl Iterator<Item = Var<'g, T>>) -> Var<'g, T> {
    let first = terms.next().expect("at least one term");
    terms.fold(first, |acc, t| acc.add(t))
}

/// Generator-side terms of the joint stage.
pub struct Stage1Objective<'g, T: Real> {
    pub adversarial: Var<'g, T>,
    pub perceptual: Var<'g, T>,
    /// `adversarial + λ1 · perceptual`.
    pub generator_total: Var<'g, T>,
    /// `λ2 · L1` summed over deblurred stack outputs.
    pub deblur: Var<'g, T>,
    pub total: Var<'g, T>,
}

/// Reblurring and deblurring objectives. `reblurred` and `deblurred` hold
/// every stacked net's output; the adversarial term scores the final one.
#[allow(clippy::too_many_arguments)]
pub fn stage1_objective<'g, T: Real>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    reblurred: &[Var<'g, T>],
    deblurred: &[Var<'g, T>],
    fake_scores: &DiscriminatorOutputs<'g, T>,
    extractor: &FrozenFeatureExtractor<T>,
    pe: &Bound<'g, T>,
    weights: &LossWeights,
) -> Result<Stage1Objective<'g, T>> {
    if reblurred.is_empty() || deblurred.is_empty() {
        return Err(Error::Invalid("stage-1 objective needs generator outputs".into()));
    }
    let adversarial = hinge_g_loss(fake_scores)?;
    let perceptual = sum(
        reblurred
            .iter()
            .map(|r| perceptual_loss(extractor, pe, y, *r))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    let generator_total = adversarial.add(perceptual.scale(weights.lambda1));
    let l1 = sum(deblurred.iter().map(|d| l1_loss(x, *d)).collect::<Result<Vec<_>>>()?.into_iter());
    let deblur = l1.scale(weights.lambda2);
    Ok(Stage1Objective {
        adversarial,
        perceptual,
        generator_total,
        deblur,
        total: generator_total.add(deblur),
    })
}

pub struct Stage2Objective<'g, T: Real> {
    pub psnr: Var<'g, T>,
    pub blur: Var<'g, T>,
    /// `psnr + λ3 · blur`.
    pub total: Var<'g, T>,
}

/// PSNR loss plus the blur-aware loss, summed over deblurred stack outputs.
pub fn stage2_objective<'g, T: Real>(
    x: Var<'g, T>,
    deblurred: &[Var<'g, T>],
    encoder: &DegradationEncoder<T>,
    pe: &Bound<'g, T>,
    weights: &LossWeights,
) -> Result<Stage2Objective<'g, T>> {
    if deblurred.is_empty() {
        return Err(Error::Invalid("stage-2 objective needs generator outputs".into()));
    }
    let psnr = sum(deblurred.iter().map(|d| psnr_loss(x, *d)).collect::<Result<Vec<_>>>()?.into_iter());
    let blur = if weights.lambda3 == 0.0 {
        x.graph().constant(Tensor::scalar(T::zero()))
    } else {
        sum(
            deblurred
                .iter()
                .map(|d| blur_aware_loss(encoder, pe, *d, x))
                .collect::<Result<Vec<_>>>()?
                .into_iter(),
        )
    };
    let total = if weights.lambda3 == 0.0 {
        psnr
    } else {
        psnr.add(blur.scale(weights.lambda3))
    };
    Ok(Stage2Objective { psnr, blur, total })
}
