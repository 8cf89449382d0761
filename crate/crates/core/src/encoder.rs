//! Degradation encoder: blurry image → latent degradation map at 1/16 scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, HE_GAIN, LEAKY_SLOPE};
use crate::tensor::{ConvGeometry, Real, Shape, Tensor};

/// Number of stride-2 stages; the latent sits at `1 / 2^ENCODER_STAGES`.
pub const ENCODER_STAGES: usize = 4;
pub const LATENT_STRIDE: usize = 1 << ENCODER_STAGES;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; ENCODER_STAGES],
    pub latent_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [16, 32, 64, 64],
            latent_channels: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.latent_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("encoder", "channel counts must be positive"));
        }
        Ok(())
    }
}

/// Latent degradation map, `n × C_d × H/16 × W/16`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationMap<T> {
    pub data: Tensor<T>,
    pub source_shape: (usize, usize),
}

/// Per-stage activations; stage `i` (1-based) sits at `H/2^i × W/2^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<T> {
    pub layers: Vec<Tensor<T>>,
}

/// Graph-level encoder outputs from one forward pass.
pub struct EncoderTrace<'g, T: Real> {
    pub layers: Vec<Var<'g, T>>,
    pub latent: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct DegradationEncoder<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
    blocks: Vec<[Conv2d; 2]>,
    head: Conv2d,
}

/// Input dimensions the latent grid can represent exactly.
pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} input must be non-empty and divisible by {LATENT_STRIDE}"
        )));
    }
    Ok(())
}

impl<T: Real> DegradationEncoder<T> {
    pub fn new<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(ENCODER_STAGES);
        let mut c_in = config.in_channels;
        for (i, &width) in config.widths.iter().enumerate() {
            let down = Conv2d::new(&mut params, &format!("stage{i}.down"), c_in, width, ConvGeometry::new(3, 2, 1), HE_GAIN, rng);
            let conv = Conv2d::new(&mut params, &format!("stage{i}.conv"), width, width, ConvGeometry::same3(), HE_GAIN, rng);
            blocks.push([down, conv]);
            c_in = width;
        }
        let head = Conv2d::new(&mut params, "head", c_in, config.latent_channels, ConvGeometry::new(1, 1, 0), 1.0, rng);
        Ok(Self {
            config: config.clone(),
            params,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Single forward pass; the latent is a 1×1 projection of the last stage.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, y: Var<'g, T>) -> EncoderTrace<'g, T> {
        let mut h = y;
        let mut layers = Vec::with_capacity(ENCODER_STAGES);
        for [down, conv] in &self.blocks {
            h = down.forward(p, h).leaky_relu(LEAKY_SLOPE);
            h = conv.forward(p, h).leaky_relu(LEAKY_SLOPE);
            layers.push(h);
        }
        let latent = self.head.forward(p, h);
        EncoderTrace { layers, latent }
    }

    fn check(&self, x: &Tensor<T>) -> Result<Shape> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "encoder expects {} channels, got {}",
                self.config.in_channels, s.c
            )));
        }
        check_input_dims(s.h, s.w)?;
        Ok(s)
    }

    pub fn encode(&self, y: &Tensor<T>) -> Result<DegradationMap<T>> {
        let s = self.check(y)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let trace = self.forward(&p, g.constant(y.clone()));
        Ok(DegradationMap {
            data: (*trace.latent.value()).clone(),
            source_shape: (s.h, s.w),
        })
    }

    pub fn encode_features(&self, x: &Tensor<T>) -> Result<(EncoderFeatures<T>, DegradationMap<T>)> {
        let s = self.check(x)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let trace = self.forward(&p, g.constant(x.clone()));
        let layers = trace.layers.iter().map(|v| (*v.value()).clone()).collect();
        Ok((
            EncoderFeatures { layers },
            DegradationMap {
                data: (*trace.latent.value()).clone(),
                source_shape: (s.h, s.w),
            },
        ))
    }

    pub fn freeze(self) -> FrozenEncoder<T> {
        FrozenEncoder(self)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut h, mut w) = (h, w);
        let mut total = 0;
        for [down, conv] in &self.blocks {
            total += down.macs(h, w);
            (h, w) = down.geometry.output_size(h, w).expect("encoder geometry");
            total += conv.macs(h, w);
        }
        total + self.head.macs(h, w)
    }

    pub fn cast<U: Real>(&self) -> DegradationEncoder<U> {
        DegradationEncoder {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }
}

/// Encoder whose parameters can no longer be handed to an optimizer.
/// Gradients still propagate through it to its inputs.
#[derive(Clone, Debug)]
pub struct FrozenEncoder<T>(DegradationEncoder<T>);

impl<T: Real> FrozenEncoder<T> {
    pub fn inner(&self) -> &DegradationEncoder<T> {
        &self.0
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.0.params.bind(graph, false)
    }

    pub fn forward<'g>(&self, p: &Bound<'g, T>, y: Var<'g, T>) -> EncoderTrace<'g, T> {
        self.0.forward(p, y)
    }

    pub fn encode(&self, y: &Tensor<T>) -> Result<DegradationMap<T>> {
        self.0.encode(y)
    }

    pub fn checksum(&self) -> String {
        self.0.params.checksum()
    }

    pub fn into_inner(self) -> DegradationEncoder<T> {
        self.0
    }
}
