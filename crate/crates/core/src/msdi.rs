//! Multi-scale degradation injection U-Net and the stacked residual
//! generators built from it.
//!
//! Scale 1 is full resolution and scale 5 the coarsest (`H/16`). The latent
//! degradation map enters at scale 5 and is walked up to finer scales by
//! nearest-neighbour ×2 + 3×3 conv blocks; at each injected scale it predicts
//! a per-pixel affine modulation of the skip feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{check_input_dims, LATENT_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, HE_GAIN, LEAKY_SLOPE};
use crate::tensor::{ConvGeometry, Real, Tensor};

pub const SCALES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Spatially adaptive modulation `γ ⊙ f + β` of skip features.
    Sam,
    /// Skip features concatenated with the map, then two residual blocks.
    Concat,
    /// Degradation ignored.
    None,
    /// Map upsampled to full resolution and concatenated to the input image.
    InputConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionScales {
    All,
    CoarsestOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct MsdiConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub stack_depth: usize,
    pub injection_mode: InjectionMode,
    pub injection_scales: InjectionScales,
    pub degradation_channels: usize,
    /// Inject into every stacked net, not only the first.
    pub inject_all_stages: bool,
}

impl Default for MsdiConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            max_channels: 128,
            stack_depth: 2,
            injection_mode: InjectionMode::Sam,
            injection_scales: InjectionScales::All,
            degradation_channels: 32,
            inject_all_stages: true,
        }
    }
}

impl MsdiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config("base_channels", "must be positive and at most max_channels"));
        }
        if self.stack_depth == 0 {
            return Err(Error::config("stack_depth", "must be at least 1"));
        }
        if self.degradation_channels == 0 {
            return Err(Error::config("degradation_channels", "must be positive"));
        }
        Ok(())
    }

    /// Feature width at 1-based scale `i`.
    pub fn channels(&self, scale: usize) -> usize {
        (self.base_channels << (scale - 1)).min(self.max_channels)
    }

    pub fn uses_degradation(&self) -> bool {
        self.injection_mode != InjectionMode::None
    }

    /// 1-based scales whose skip connection receives the degradation map.
    pub fn injected_scales(&self) -> Vec<usize> {
        match (self.injection_mode, self.injection_scales) {
            (InjectionMode::None | InjectionMode::InputConcat, _) => Vec::new(),
            (_, InjectionScales::All) => (1..=SCALES).collect(),
            (_, InjectionScales::CoarsestOnly) => vec![SCALES],
        }
    }
}

/// Nearest-neighbour ×2 followed by a 3×3 conv.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsampleBlock {
    pub conv: Conv2d,
}

impl UpsampleBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, name, c_in, c_out, ConvGeometry::same3(), HE_GAIN, rng),
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, m: Var<'g, T>) -> Var<'g, T> {
        self.conv.forward(p, m.upsample_nearest(2))
    }

    /// Turn the conv into a per-channel delta (requires `c_in == c_out`).
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.conv.in_channels, self.conv.out_channels);
        self.conv.set_zero(store);
        let w = store.get_mut(self.conv.weight);
        for c in 0..self.conv.out_channels {
            w.set(c, c, 1, 1, T::one());
        }
    }

    pub fn macs(&self, h_in: usize, w_in: usize) -> u64 {
        self.conv.macs(2 * h_in, 2 * w_in)
    }
}

/// Spatially adaptive modulation: a shared 3×3 trunk on the map followed by
/// separate 3×3 heads for `γ` and `β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sam {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

/// Initial weight scale of the modulation heads; with `γ`'s bias at 1 the
/// module starts close to the identity.
const SAM_HEAD_GAIN: f64 = 0.1;

impl Sam {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        map_channels: usize,
        feature_channels: usize,
        rng: &mut R,
    ) -> Self {
        let g = ConvGeometry::same3();
        let shared = Conv2d::new(store, &format!("{name}.shared"), map_channels, feature_channels, g, HE_GAIN, rng);
        let gamma = Conv2d::new(store, &format!("{name}.gamma"), feature_channels, feature_channels, g, SAM_HEAD_GAIN, rng);
        let beta = Conv2d::new(store, &format!("{name}.beta"), feature_channels, feature_channels, g, SAM_HEAD_GAIN, rng);
        store.get_mut(gamma.bias).data_mut().fill(T::one());
        store.get_mut(beta.bias).data_mut().fill(T::zero());
        Self { shared, gamma, beta }
    }

    /// `(γ, β)` predicted from the map.
    pub fn params<'g, T: Real>(&self, p: &Bound<'g, T>, m: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let h = self.shared.forward(p, m).leaky_relu(LEAKY_SLOPE);
        (self.gamma.forward(p, h), self.beta.forward(p, h))
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, f: Var<'g, T>, m: Var<'g, T>) -> Result<Var<'g, T>> {
        let (fs, ms) = (f.shape(), m.shape());
        if (fs.n, fs.h, fs.w) != (ms.n, ms.h, ms.w) {
            return Err(Error::Dimension(format!("skip feature {fs} and degradation map {ms} differ spatially")));
        }
        let (gamma, beta) = self.params(p, m);
        Ok(gamma.mul(f).add(beta))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.shared.macs(h, w) + self.gamma.macs(h, w) + self.beta.macs(h, w)
    }
}

/// Concatenation-based injection followed by two two-layer residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcatInjector {
    pub fuse: Conv2d,
    pub res: [[Conv2d; 2]; 2],
}

impl ConcatInjector {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        map_channels: usize,
        feature_channels: usize,
        rng: &mut R,
    ) -> Self {
        let g = ConvGeometry::same3();
        let c = feature_channels;
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), c + map_channels, c, g, HE_GAIN, rng);
        let mut block = |i: usize, rng: &mut R| {
            [
                Conv2d::new(store, &format!("{name}.res{i}.0"), c, c, g, HE_GAIN, rng),
                Conv2d::new(store, &format!("{name}.res{i}.1"), c, c, g, HE_GAIN, rng),
            ]
        };
        let res = [block(0, rng), block(1, rng)];
        Self { fuse, res }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, f: Var<'g, T>, m: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.fuse.forward(p, Var::concat(&[f, m]));
        for [a, b] in &self.res {
            let r = b.forward(p, a.forward(p, h).leaky_relu(LEAKY_SLOPE));
            h = h.add(r);
        }
        h
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.fuse.macs(h, w) + self.res.iter().flatten().map(|c| c.macs(h, w)).sum::<u64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Injector {
    Sam(Sam),
    Concat(ConcatInjector),
}

impl Injector {
    fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, f: Var<'g, T>, m: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Injector::Sam(s) => s.forward(p, f, m),
            Injector::Concat(c) => Ok(c.forward(p, f, m)),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Injector::Sam(s) => s.macs(h, w),
            Injector::Concat(c) => c.macs(h, w),
        }
    }
}

/// Result of one U-Net pass.
pub struct NetForward<'g, T: Real> {
    pub residual: Var<'g, T>,
    /// Number of injection modules that fired.
    pub injections: usize,
    /// Degradation maps per 1-based scale (index 0 unused), for inspection.
    pub maps: Vec<Option<Var<'g, T>>>,
}

/// One five-scale U-Net with degradation injection on its skip connections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdiNet {
    mode: InjectionMode,
    in_conv: Conv2d,
    enc: Vec<[Conv2d; 2]>,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    fuse: Vec<[Conv2d; 2]>,
    head: Conv2d,
    deg_in: Option<Conv2d>,
    /// `deg_up[i]` lifts the map from scale `i + 2` to scale `i + 1`.
    deg_up: Vec<UpsampleBlock>,
    /// `injectors[i]` serves 1-based scale `i + 1`.
    injectors: Vec<Option<Injector>>,
}

/// Initial weight scale of the residual head: outputs start near zero.
const HEAD_GAIN: f64 = 0.1;

impl MsdiNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, cfg: &MsdiConfig, mode: InjectionMode, rng: &mut R) -> Self {
        let g3 = ConvGeometry::same3();
        let ch = |i: usize| cfg.channels(i);
        let cd = cfg.degradation_channels;
        let input_c = if mode == InjectionMode::InputConcat { cfg.in_channels + cd } else { cfg.in_channels };
        let name = |s: &str| format!("{prefix}.{s}");

        let in_conv = Conv2d::new(store, &name("in"), input_c, ch(1), g3, HE_GAIN, rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 1..=SCALES {
            enc.push([
                Conv2d::new(store, &name(&format!("enc{i}.0")), ch(i), ch(i), g3, HE_GAIN, rng),
                Conv2d::new(store, &name(&format!("enc{i}.1")), ch(i), ch(i), g3, HE_GAIN, rng),
            ]);
            if i < SCALES {
                down.push(Conv2d::new(store, &name(&format!("down{i}")), ch(i), ch(i + 1), ConvGeometry::new(3, 2, 1), HE_GAIN, rng));
            }
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for i in 1..SCALES {
            up.push(Conv2d::new(store, &name(&format!("up{i}")), ch(i + 1), ch(i), g3, HE_GAIN, rng));
            fuse.push([
                Conv2d::new(store, &name(&format!("dec{i}.0")), 2 * ch(i), ch(i), g3, HE_GAIN, rng),
                Conv2d::new(store, &name(&format!("dec{i}.1")), ch(i), ch(i), g3, HE_GAIN, rng),
            ]);
        }
        let head = Conv2d::new(store, &name("head"), ch(1), cfg.in_channels, g3, HEAD_GAIN, rng);

        let injected = {
            let mut c = cfg.clone();
            c.injection_mode = mode;
            c.injected_scales()
        };
        let (deg_in, deg_up, injectors) = if injected.is_empty() {
            (None, Vec::new(), vec![None; SCALES])
        } else {
            let deg_in = Conv2d::new(store, &name("deg_in"), cd, ch(SCALES), g3, HE_GAIN, rng);
            let finest = *injected.iter().min().expect("non-empty");
            let deg_up = (finest..SCALES)
                .map(|i| UpsampleBlock::new(store, &name(&format!("deg_up{i}")), ch(i + 1), ch(i), rng))
                .collect();
            let injectors = (1..=SCALES)
                .map(|i| {
                    injected.contains(&i).then(|| {
                        let n = name(&format!("inject{i}"));
                        match mode {
                            InjectionMode::Sam => Injector::Sam(Sam::new(store, &n, ch(i), ch(i), rng)),
                            _ => Injector::Concat(ConcatInjector::new(store, &n, ch(i), ch(i), rng)),
                        }
                    })
                })
                .collect();
            (Some(deg_in), deg_up, injectors)
        };
        Self {
            mode,
            in_conv,
            enc,
            down,
            up,
            fuse,
            head,
            deg_in,
            deg_up,
            injectors,
        }
    }

    pub fn mode(&self) -> InjectionMode {
        self.mode
    }

    pub fn head(&self) -> Conv2d {
        self.head
    }

    pub fn injector(&self, scale: usize) -> Option<&Injector> {
        self.injectors[scale - 1].as_ref()
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>, deg: Option<Var<'g, T>>) -> Result<NetForward<'g, T>> {
        let lrelu = |v: Var<'g, T>| v.leaky_relu(LEAKY_SLOPE);
        let needs_deg = self.mode != InjectionMode::None;
        let deg = match (needs_deg, deg) {
            (false, _) => None,
            (true, Some(d)) => Some(d),
            (true, None) => return Err(Error::Invalid("this generator needs a degradation map".into())),
        };
        let xs = x.shape();
        if let Some(d) = deg {
            let ds = d.shape();
            if ds.n != xs.n || ds.h * LATENT_STRIDE != xs.h || ds.w * LATENT_STRIDE != xs.w {
                return Err(Error::Dimension(format!("degradation map {ds} does not match input {xs}")));
            }
        }

        let input = match (self.mode, deg) {
            (InjectionMode::InputConcat, Some(d)) => Var::concat(&[x, d.upsample_nearest(LATENT_STRIDE)]),
            _ => x,
        };
        let mut h = lrelu(self.in_conv.forward(p, input));
        let mut skips = Vec::with_capacity(SCALES);
        for i in 0..SCALES {
            let [a, b] = &self.enc[i];
            h = lrelu(b.forward(p, lrelu(a.forward(p, h))));
            skips.push(h);
            if i + 1 < SCALES {
                h = lrelu(self.down[i].forward(p, h));
            }
        }

        let mut maps: Vec<Option<Var<'g, T>>> = vec![None; SCALES + 1];
        let mut injections = 0;
        if let (Some(deg_in), Some(d)) = (self.deg_in, deg) {
            let mut m = deg_in.forward(p, d);
            maps[SCALES] = Some(m);
            let finest = SCALES - self.deg_up.len();
            for scale in (finest..SCALES).rev() {
                m = self.deg_up[scale - finest].forward(p, m);
                maps[scale] = Some(m);
            }
            for scale in 1..=SCALES {
                if let (Some(inj), Some(m)) = (&self.injectors[scale - 1], maps[scale]) {
                    skips[scale - 1] = inj.forward(p, skips[scale - 1], m)?;
                    injections += 1;
                }
            }
        }

        let mut d = skips[SCALES - 1];
        for i in (0..SCALES - 1).rev() {
            let u = lrelu(self.up[i].forward(p, d.upsample_nearest(2)));
            let [a, b] = &self.fuse[i];
            d = lrelu(b.forward(p, lrelu(a.forward(p, Var::concat(&[u, skips[i]])))));
        }
        let residual = self.head.forward(p, d);
        Ok(NetForward {
            residual,
            injections,
            maps,
        })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let dims = |scale: usize| (h >> (scale - 1), w >> (scale - 1));
        let mut total = self.in_conv.macs(h, w);
        for i in 0..SCALES {
            let (sh, sw) = dims(i + 1);
            total += self.enc[i].iter().map(|c| c.macs(sh, sw)).sum::<u64>();
            if i + 1 < SCALES {
                total += self.down[i].macs(sh, sw);
            }
        }
        for i in 0..SCALES - 1 {
            let (sh, sw) = dims(i + 1);
            total += self.up[i].macs(sh, sw);
            total += self.fuse[i].iter().map(|c| c.macs(sh, sw)).sum::<u64>();
        }
        total += self.head.macs(h, w);
        if let Some(deg_in) = self.deg_in {
            let (sh, sw) = dims(SCALES);
            total += deg_in.macs(sh, sw);
        }
        let finest = SCALES - self.deg_up.len();
        for (k, blk) in self.deg_up.iter().enumerate() {
            let (sh, sw) = dims(finest + k + 1);
            total += blk.macs(sh, sw);
        }
        for (i, inj) in self.injectors.iter().enumerate() {
            if let Some(inj) = inj {
                let (sh, sw) = dims(i + 1);
                total += inj.macs(sh, sw);
            }
        }
        total
    }
}

/// Outputs of a stacked generator: the image after each net.
pub struct StackOutput<'g, T: Real> {
    pub stages: Vec<Var<'g, T>>,
    pub injections: usize,
}

impl<'g, T: Real> StackOutput<'g, T> {
    pub fn output(&self) -> Var<'g, T> {
        *self.stages.last().expect("at least one stage")
    }
}

/// Stack of residual MSDI-Nets: each net refines the previous net's image.
/// Serves as both the reblurring and the deblurring generator.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: MsdiConfig,
    params: ParamStore<T>,
    nets: Vec<MsdiNet>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng>(config: &MsdiConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let nets = (0..config.stack_depth)
            .map(|k| {
                let mode = if k == 0 || config.inject_all_stages {
                    config.injection_mode
                } else {
                    InjectionMode::None
                };
                MsdiNet::new(&mut params, &format!("net{k}"), config, mode, rng)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            nets,
        })
    }

    pub fn config(&self) -> &MsdiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn nets(&self) -> &[MsdiNet] {
        &self.nets
    }

    /// Zero every net's output head, making the generator an exact identity.
    pub fn zero_heads(&mut self) {
        for net in &self.nets {
            net.head.set_zero(&mut self.params);
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, T>, input: Var<'g, T>, deg: Option<Var<'g, T>>) -> Result<StackOutput<'g, T>> {
        let s = input.shape();
        check_input_dims(s.h, s.w)?;
        let mut current = input;
        let mut stages = Vec::with_capacity(self.nets.len());
        let mut injections = 0;
        for net in &self.nets {
            let out = net.forward(p, current, deg)?;
            injections += out.injections;
            current = current.add(out.residual);
            stages.push(current);
        }
        Ok(StackOutput { stages, injections })
    }

    /// Final output for a batch, without recording gradients.
    pub fn run(&self, input: &Tensor<T>, deg: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(input.clone()), deg.map(|d| g.constant(d.clone())))?;
        Ok((*out.output().value()).clone())
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.nets.iter().map(|n| n.macs(h, w)).sum()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            nets: self.nets.clone(),
        }
    }
}

/// `ý = x + G_r(x, E(y))`, through every stacked net.
pub fn reblur<'g, T: Real>(
    g_r: &Generator<T>,
    p: &Bound<'g, T>,
    sharp: Var<'g, T>,
    deg: Option<Var<'g, T>>,
) -> Result<StackOutput<'g, T>> {
    g_r.forward(p, sharp, deg)
}

/// `x́ = y + G_d(y, E(y))`, through every stacked net.
pub fn deblur<'g, T: Real>(
    g_d: &Generator<T>,
    p: &Bound<'g, T>,
    blurry: Var<'g, T>,
    deg: Option<Var<'g, T>>,
) -> Result<StackOutput<'g, T>> {
    g_d.forward(p, blurry, deg)
}
