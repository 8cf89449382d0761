//! Conditional multi-scale patch discriminator and hinge losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, HE_GAIN, LEAKY_SLOPE};
use crate::tensor::{ConvGeometry, Real};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Channels of each image; the network sees twice this many.
    pub in_channels: usize,
    pub base_width: usize,
    pub scales: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            scales: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::config("discriminator", "channel counts must be positive"));
        }
        if self.scales == 0 {
            return Err(Error::config("discriminator.scales", "must be at least 1"));
        }
        Ok(())
    }
}

/// Patch logits, one map per scale (finest first).
pub struct DiscriminatorOutputs<'g, T: Real> {
    pub scores: Vec<Var<'g, T>>,
}

const BODY_STRIDES: [usize; 4] = [2, 2, 2, 1];

#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator<T> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    bodies: Vec<[Conv2d; 4]>,
}

impl<T: Real> MultiScaleDiscriminator<T> {
    pub fn new<R: Rng>(config: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let w = config.base_width;
        let widths = [2 * config.in_channels, w, 2 * w, 4 * w, 1];
        let bodies = (0..config.scales)
            .map(|s| {
                std::array::from_fn(|l| {
                    Conv2d::new(
                        &mut params,
                        &format!("scale{s}.conv{l}"),
                        widths[l],
                        widths[l + 1],
                        ConvGeometry::new(3, BODY_STRIDES[l], 1),
                        HE_GAIN,
                        rng,
                    )
                })
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            bodies,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Score `candidate` as a plausible blurry counterpart of the sharp `x`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, candidate: Var<'g, T>) -> Result<DiscriminatorOutputs<'g, T>> {
        if x.shape() != candidate.shape() {
            return Err(Error::Dimension(format!(
                "discriminator inputs differ: {} vs {}",
                x.shape(),
                candidate.shape()
            )));
        }
        if x.shape().c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "discriminator expects {} channels per image, got {}",
                self.config.in_channels,
                x.shape().c
            )));
        }
        let mut input = Var::concat(&[x, candidate]);
        let mut scores = Vec::with_capacity(self.bodies.len());
        for (s, body) in self.bodies.iter().enumerate() {
            if s > 0 {
                let sh = input.shape();
                if sh.h % 2 != 0 || sh.w % 2 != 0 || sh.h < 2 {
                    return Err(Error::Dimension(format!("cannot pool {sh} for discriminator scale {}", s + 1)));
                }
                input = input.avg_pool2();
            }
            let mut h = input;
            for (l, conv) in body.iter().enumerate() {
                h = conv.forward(p, h);
                if l + 1 < body.len() {
                    h = h.leaky_relu(LEAKY_SLOPE);
                }
            }
            scores.push(h);
        }
        Ok(DiscriminatorOutputs { scores })
    }

    pub fn cast<U: Real>(&self) -> MultiScaleDiscriminator<U> {
        MultiScaleDiscriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            bodies: self.bodies.clone(),
        }
    }
}

fn check_structure<T: Real>(real: &DiscriminatorOutputs<'_, T>, fake: &DiscriminatorOutputs<'_, T>) -> Result<()> {
    if real.scores.len() != fake.scores.len() || real.scores.is_empty() {
        return Err(Error::Dimension("real and fake score lists differ".into()));
    }
    Ok(())
}

/// `mean relu(1 - real) + mean relu(1 + fake)`, averaged over scales.
pub fn hinge_d_loss<'g, T: Real>(real: &DiscriminatorOutputs<'g, T>, fake: &DiscriminatorOutputs<'g, T>) -> Result<Var<'g, T>> {
    check_structure(real, fake)?;
    let n = real.scores.len() as f64;
    let mut total: Option<Var<'g, T>> = None;
    for (r, f) in real.scores.iter().zip(&fake.scores) {
        let term = r.neg().add_scalar(1.0).relu().mean().add(f.add_scalar(1.0).relu().mean());
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / n))
}

/// `-mean(fake)`, averaged over scales.
pub fn hinge_g_loss<'g, T: Real>(fake: &DiscriminatorOutputs<'g, T>) -> Result<Var<'g, T>> {
    let n = fake.scores.len();
    if n == 0 {
        return Err(Error::Dimension("no discriminator scores".into()));
    }
    let total = fake.scores[1..]
        .iter()
        .fold(fake.scores[0].mean(), |acc, f| acc.add(f.mean()));
    Ok(total.scale(-1.0 / n as f64))
}
