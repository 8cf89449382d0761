//! Two-stage optimisation: joint reblurring/deblurring with an adversarial
//! critic, then deblurring-only retraining against the frozen encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{hinge_d_loss, DiscriminatorConfig, MultiScaleDiscriminator};
use crate::autograd::Graph;
use crate::checkpoint;
use crate::dataset::{crop_and_augment, BatchSampler, ImagePair};
use crate::encoder::{DegradationEncoder, EncoderConfig, FrozenEncoder, LATENT_STRIDE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{l1_loss, stage1_objective, stage2_objective, FrozenFeatureExtractor, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::msdi::{deblur, reblur, Generator, InjectionMode, InjectionScales, MsdiConfig};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

/// Losses beyond this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Side of the square training crops.
    pub crop_size: usize,
    pub augment: bool,
    /// Pairs taken from the end of the dataset for evaluation; 0 evaluates
    /// on the training pairs.
    pub holdout: usize,
    /// Train the reblurring branch and discriminator in stage 1.
    pub reblurring: bool,
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub reblur_generator: MsdiConfig,
    pub deblur_generator: MsdiConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            batch_size: 4,
            total_iters: 5000,
            lr_max: 3e-4,
            lr_min: 1e-7,
            seed: 0,
            eval_every: 500,
            crop_size: 64,
            augment: true,
            holdout: 0,
            reblurring: true,
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
            reblur_generator: MsdiConfig::default(),
            deblur_generator: MsdiConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::config("stage", "must be 1 or 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be at least 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config("lr_min", "must satisfy 0 <= lr_min < lr_max"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.crop_size < 32 || self.crop_size % LATENT_STRIDE != 0 {
            return Err(Error::config("crop_size", format!("must be at least 32 and divisible by {LATENT_STRIDE}")));
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        self.reblur_generator.validate()?;
        self.deblur_generator.validate()?;
        self.discriminator.validate()?;
        for (name, g) in [("reblur_generator", &self.reblur_generator), ("deblur_generator", &self.deblur_generator)] {
            if g.degradation_channels != self.encoder.latent_channels {
                return Err(Error::config(
                    format!("{name}.degradation_channels"),
                    "must equal encoder.latent_channels",
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total_iters))`.
pub fn cosine_lr(step: u64, config: &TrainConfig) -> Result<f64> {
    if step > config.total_iters {
        return Err(Error::Invalid(format!("step {step} is past total_iters {}", config.total_iters)));
    }
    let progress = step as f64 / config.total_iters as f64;
    Ok(config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn guard(step: u64, name: &str, value: f64) -> Result<f64> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            step,
            loss: name.to_string(),
            value,
        });
    }
    Ok(value)
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
}

/// Held-out evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: u8,
    pub step: u64,
    pub n: usize,
    /// Mean `PSNR(y, x)`.
    pub input_psnr: f64,
    /// Mean `PSNR(x́, x)`.
    pub deblur_psnr: f64,
    pub deblur_ssim: f64,
    /// Mean `PSNR(ý, y)`, stage 1 only.
    pub reblur_psnr: Option<f64>,
}

pub enum Event<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

/// Line-oriented JSON metrics log.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write<S: Serialize>(&mut self, kind: &str, record: &S) -> Result<()> {
        let mut value = serde_json::to_value(record).map_err(|e| Error::Invalid(e.to_string()))?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("kind".into(), kind.into());
        }
        writeln!(self.out, "{value}").map_err(|e| Error::io("<metrics>", e))
    }

    pub fn event(&mut self, event: &Event<'_>) -> Result<()> {
        match event {
            Event::Step(r) => self.write("step", r),
            Event::Eval(r) => self.write("eval", r),
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: u8,
    /// Iterations completed. Batches and augmentation are a pure function of
    /// `(config.seed, step)`, so no generator state needs saving beyond this.
    pub step: u64,
    pub config: TrainConfig,
    pub encoder: ParamStore<f32>,
    pub reblur: Option<ParamStore<f32>>,
    pub deblur: Option<ParamStore<f32>>,
    pub discriminator: Option<ParamStore<f32>>,
    pub optimizers: BTreeMap<String, Adam>,
}

fn rebuild_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn missing(what: &str) -> Error {
    Error::Integrity(format!("checkpoint has no {what}"))
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        checkpoint::load(path)
    }

    pub fn encoder(&self) -> Result<DegradationEncoder<f32>> {
        let mut enc = DegradationEncoder::new(&self.config.encoder, &mut rebuild_rng())?;
        enc.params_mut().load_from(&self.encoder)?;
        Ok(enc)
    }

    pub fn reblur_generator(&self) -> Result<Generator<f32>> {
        let params = self.reblur.as_ref().ok_or_else(|| missing("reblurring generator"))?;
        let mut g = Generator::new(&self.config.reblur_generator, &mut rebuild_rng())?;
        g.params_mut().load_from(params)?;
        Ok(g)
    }

    pub fn deblur_generator(&self) -> Result<Generator<f32>> {
        let params = self.deblur.as_ref().ok_or_else(|| missing("deblurring generator"))?;
        let mut g = Generator::new(&self.config.deblur_generator, &mut rebuild_rng())?;
        g.params_mut().load_from(params)?;
        Ok(g)
    }

    pub fn discriminator(&self) -> Result<MultiScaleDiscriminator<f32>> {
        let params = self.discriminator.as_ref().ok_or_else(|| missing("discriminator"))?;
        let mut d = MultiScaleDiscriminator::new(&self.config.discriminator, &mut rebuild_rng())?;
        d.params_mut().load_from(params)?;
        Ok(d)
    }

    fn optimizer(&self, name: &str) -> Result<Adam> {
        self.optimizers.get(name).cloned().ok_or_else(|| missing(&format!("{name} optimizer state")))
    }
}

/// Training pairs, the evaluation split, and the batch schedule.
struct Data {
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    sampler: BatchSampler,
}

impl Data {
    fn new(config: &TrainConfig, train: Vec<ImagePair>, val: Vec<ImagePair>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        for p in train.iter().chain(&val) {
            let (h, w) = p.sharp.dims();
            if h < config.crop_size || w < config.crop_size {
                return Err(Error::Dimension(format!(
                    "pair {} ({h}x{w}) is smaller than crop_size {}",
                    p.id, config.crop_size
                )));
            }
        }
        let val = if val.is_empty() { train.clone() } else { val };
        let sampler = BatchSampler::new(train.len(), config.batch_size, config.seed)?;
        Ok(Self { train, val, sampler })
    }

    /// Sharp and blurry batches for `step`.
    fn batch(&self, config: &TrainConfig, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step + 1);
        let pairs = self
            .sampler
            .batch_at(step)
            .into_iter()
            .map(|i| crop_and_augment(&self.train[i], config.crop_size, config.augment, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let sharp: Vec<&Image> = pairs.iter().map(|p| &p.sharp).collect();
        let blurry: Vec<&Image> = pairs.iter().map(|p| &p.blurry).collect();
        Ok((Image::to_batch(&sharp)?, Image::to_batch(&blurry)?))
    }
}

/// Split `pairs` into training and held-out parts per `config.holdout`.
pub fn split_holdout(mut pairs: Vec<ImagePair>, holdout: usize) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    if holdout >= pairs.len() && holdout > 0 {
        return Err(Error::config("holdout", format!("must be smaller than the {} available pairs", pairs.len())));
    }
    let val = pairs.split_off(pairs.len() - holdout);
    Ok((pairs, val))
}

/// Batched inference outputs, clamped to `[0, 1]`.
pub fn infer_deblur(encoder: &DegradationEncoder<f32>, g_d: &Generator<f32>, blurry: &[&Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(blurry.len());
    for chunk in blurry.chunks(EVAL_BATCH) {
        let y = Image::to_batch(chunk)?;
        let deg = if g_d.config().uses_degradation() {
            Some(encoder.encode(&y)?.data)
        } else {
            None
        };
        let x = g_d.run(&y, deg.as_ref())?;
        out.extend(Image::from_batch(&x)?.into_iter().map(|i| i.clamped()));
    }
    Ok(out)
}

/// `reblur(sharp, E(source))` in batches, clamped to `[0, 1]`.
pub fn infer_reblur(
    encoder: &DegradationEncoder<f32>,
    g_r: &Generator<f32>,
    sharp: &[&Image],
    degradation_source: &[&Image],
) -> Result<Vec<Image>> {
    if sharp.len() != degradation_source.len() {
        return Err(Error::Invalid("one degradation source per sharp image".into()));
    }
    let mut out = Vec::with_capacity(sharp.len());
    for (xs, ys) in sharp.chunks(EVAL_BATCH).zip(degradation_source.chunks(EVAL_BATCH)) {
        let x = Image::to_batch(xs)?;
        let deg = encoder.encode(&Image::to_batch(ys)?)?.data;
        let r = g_r.run(&x, Some(&deg))?;
        out.extend(Image::from_batch(&r)?.into_iter().map(|i| i.clamped()));
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

fn evaluate_pairs(
    stage: u8,
    step: u64,
    pairs: &[ImagePair],
    encoder: &DegradationEncoder<f32>,
    g_d: &Generator<f32>,
    g_r: Option<&Generator<f32>>,
) -> Result<EvalRecord> {
    let blurry: Vec<&Image> = pairs.iter().map(|p| &p.blurry).collect();
    let sharp: Vec<&Image> = pairs.iter().map(|p| &p.sharp).collect();
    let restored = infer_deblur(encoder, g_d, &blurry)?;
    let reblur_psnr = match g_r {
        Some(g_r) => {
            let reblurred = infer_reblur(encoder, g_r, &sharp, &blurry)?;
            Some(mean(
                reblurred.iter().zip(&blurry).map(|(r, y)| psnr(r, y)).collect::<Result<Vec<_>>>()?.into_iter(),
            ))
        }
        None => None,
    };
    let psnrs = restored.iter().zip(&sharp).map(|(r, x)| psnr(r, x)).collect::<Result<Vec<_>>>()?;
    let ssims = restored.iter().zip(&sharp).map(|(r, x)| ssim(r, x)).collect::<Result<Vec<_>>>()?;
    Ok(EvalRecord {
        stage,
        step,
        n: pairs.len(),
        input_psnr: mean(pairs.iter().map(ImagePair::input_psnr)),
        deblur_psnr: mean(psnrs.into_iter()),
        deblur_ssim: mean(ssims.into_iter()),
        reblur_psnr,
    })
}

/// Shared driver for both stages.
pub trait Trainer {
    fn config(&self) -> &TrainConfig;
    fn steps_done(&self) -> u64;
    fn step(&mut self) -> Result<StepRecord>;
    fn evaluate(&self) -> Result<EvalRecord>;
    fn checkpoint(&self) -> Checkpoint;

    fn finished(&self) -> bool {
        self.steps_done() >= self.config().total_iters
    }

    /// Train to `total_iters`, evaluating every `eval_every` steps and at
    /// the end. `on_event` sees each record together with the trainer.
    fn run(&mut self, mut on_event: impl FnMut(Event<'_>, &Self) -> Result<()>) -> Result<()>
    where
        Self: Sized,
    {
        while !self.finished() {
            let rec = self.step()?;
            on_event(Event::Step(&rec), self)?;
            let done = self.steps_done();
            if done % self.config().eval_every == 0 || done == self.config().total_iters {
                let eval = self.evaluate()?;
                on_event(Event::Eval(&eval), self)?;
            }
        }
        Ok(())
    }
}

/// Joint training of `E`, `G_r`, `G_d` and `D`.
pub struct Stage1Trainer {
    config: TrainConfig,
    step: u64,
    encoder: DegradationEncoder<f32>,
    reblur: Generator<f32>,
    deblur: Generator<f32>,
    disc: MultiScaleDiscriminator<f32>,
    extractor: FrozenFeatureExtractor<f32>,
    opt_encoder: Adam,
    opt_reblur: Adam,
    opt_deblur: Adam,
    opt_disc: Adam,
    data: Data,
}

impl Stage1Trainer {
    pub fn new(config: TrainConfig, train: Vec<ImagePair>, val: Vec<ImagePair>) -> Result<Self> {
        config.validate()?;
        if config.stage != 1 {
            return Err(Error::config("stage", "stage-1 trainer needs stage = 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = DegradationEncoder::new(&config.encoder, &mut rng)?;
        let reblur = Generator::new(&config.reblur_generator, &mut rng)?;
        let deblur = Generator::new(&config.deblur_generator, &mut rng)?;
        let disc = MultiScaleDiscriminator::new(&config.discriminator, &mut rng)?;
        Ok(Self {
            opt_encoder: Adam::new(encoder.params()),
            opt_reblur: Adam::new(reblur.params()),
            opt_deblur: Adam::new(deblur.params()),
            opt_disc: Adam::new(disc.params()),
            data: Data::new(&config, train, val)?,
            config,
            step: 0,
            encoder,
            reblur,
            deblur,
            disc,
            extractor: FrozenFeatureExtractor::default(),
        })
    }

    pub fn resume(ckpt: &Checkpoint, train: Vec<ImagePair>, val: Vec<ImagePair>) -> Result<Self> {
        if ckpt.stage != 1 {
            return Err(Error::Integrity(format!("expected a stage-1 checkpoint, found stage {}", ckpt.stage)));
        }
        Ok(Self {
            config: ckpt.config.clone(),
            step: ckpt.step,
            encoder: ckpt.encoder()?,
            reblur: ckpt.reblur_generator()?,
            deblur: ckpt.deblur_generator()?,
            disc: ckpt.discriminator()?,
            extractor: FrozenFeatureExtractor::default(),
            opt_encoder: ckpt.optimizer("encoder")?,
            opt_reblur: ckpt.optimizer("reblur")?,
            opt_deblur: ckpt.optimizer("deblur")?,
            opt_disc: ckpt.optimizer("discriminator")?,
            data: Data::new(&ckpt.config, train, val)?,
        })
    }

    pub fn encoder(&self) -> &DegradationEncoder<f32> {
        &self.encoder
    }

    pub fn reblur_generator(&self) -> &Generator<f32> {
        &self.reblur
    }

    pub fn deblur_generator(&self) -> &Generator<f32> {
        &self.deblur
    }

    pub fn discriminator(&self) -> &MultiScaleDiscriminator<f32> {
        &self.disc
    }

    /// One discriminator update on detached reblurred images.
    fn discriminator_step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>, fake: &Tensor<f32>, lr: f64) -> Result<f64> {
        let g = Graph::new();
        let p = self.disc.params().bind(&g, true);
        let xv = g.constant(x.clone());
        let real = self.disc.forward(&p, xv, g.constant(y.clone()))?;
        let fake = self.disc.forward(&p, xv, g.constant(fake.clone()))?;
        let loss = hinge_d_loss(&real, &fake)?;
        let value = guard(self.step, "discriminator", loss.item())?;
        let grads = g.backward(loss);
        let grads = self.disc.params().collect_grads(&p, &grads);
        self.opt_disc.update(self.disc.params_mut(), &grads, lr);
        Ok(value)
    }
}

impl Trainer for Stage1Trainer {
    fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn steps_done(&self) -> u64 {
        self.step
    }

    fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = cosine_lr(step, &self.config)?;
        let (x, y) = self.data.batch(&self.config, step)?;
        let weights = self.config.weights.clone();
        let reblurring = self.config.reblurring;

        let g = Graph::new();
        let pe = self.encoder.params().bind(&g, true);
        let pr = self.reblur.params().bind(&g, reblurring);
        let pd = self.deblur.params().bind(&g, true);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let deg = self.encoder.forward(&pe, yv).latent;
        let deblurred = deblur(&self.deblur, &pd, yv, Some(deg))?;

        let mut losses = BTreeMap::new();
        let total = if reblurring {
            let reblurred = reblur(&self.reblur, &pr, xv, Some(deg))?;
            let fake = (*reblurred.output().value()).clone();
            let d_loss = self.discriminator_step(&x, &y, &fake, lr)?;
            losses.insert("discriminator".to_string(), d_loss);

            let pdisc = self.disc.params().bind(&g, false);
            let scores = self.disc.forward(&pdisc, xv, reblurred.output())?;
            let px = self.extractor.bind(&g);
            let obj = stage1_objective(xv, yv, &reblurred.stages, &deblurred.stages, &scores, &self.extractor, &px, &weights)?;
            losses.insert("adversarial".to_string(), obj.adversarial.item());
            losses.insert("perceptual".to_string(), obj.perceptual.item());
            losses.insert("generator_total".to_string(), obj.generator_total.item());
            losses.insert("deblur".to_string(), obj.deblur.item());
            obj.total
        } else {
            let mut l1 = l1_loss(xv, deblurred.stages[0])?;
            for d in &deblurred.stages[1..] {
                l1 = l1.add(l1_loss(xv, *d)?);
            }
            let deblur_term = l1.scale(weights.lambda2);
            losses.insert("deblur".to_string(), deblur_term.item());
            deblur_term
        };
        losses.insert("total".to_string(), total.item());
        for (name, v) in &losses {
            guard(step, name, *v)?;
        }

        let grads = g.backward(total);
        let ge = self.encoder.params().collect_grads(&pe, &grads);
        let gd = self.deblur.params().collect_grads(&pd, &grads);
        self.opt_encoder.update(self.encoder.params_mut(), &ge, lr);
        self.opt_deblur.update(self.deblur.params_mut(), &gd, lr);
        if reblurring {
            let gr = self.reblur.params().collect_grads(&pr, &grads);
            self.opt_reblur.update(self.reblur.params_mut(), &gr, lr);
        }
        self.step += 1;
        Ok(StepRecord {
            stage: 1,
            step: self.step,
            lr,
            losses,
        })
    }

    fn evaluate(&self) -> Result<EvalRecord> {
        let g_r = self.config.reblurring.then_some(&self.reblur);
        evaluate_pairs(1, self.step, &self.data.val, &self.encoder, &self.deblur, g_r)
    }

    fn checkpoint(&self) -> Checkpoint {
        let optimizers = [
            ("encoder", &self.opt_encoder),
            ("reblur", &self.opt_reblur),
            ("deblur", &self.opt_deblur),
            ("discriminator", &self.opt_disc),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
        Checkpoint {
            stage: 1,
            step: self.step,
            config: self.config.clone(),
            encoder: self.encoder.params().clone(),
            reblur: Some(self.reblur.params().clone()),
            deblur: Some(self.deblur.params().clone()),
            discriminator: Some(self.disc.params().clone()),
            optimizers,
        }
    }
}

/// Deblurring-only retraining of a freshly initialised `G_d`.
pub struct Stage2Trainer {
    config: TrainConfig,
    step: u64,
    encoder: FrozenEncoder<f32>,
    deblur: Generator<f32>,
    opt_deblur: Adam,
    data: Data,
}

impl Stage2Trainer {
    pub fn new(config: TrainConfig, encoder: FrozenEncoder<f32>, train: Vec<ImagePair>, val: Vec<ImagePair>) -> Result<Self> {
        config.validate()?;
        if config.stage != 2 {
            return Err(Error::config("stage", "stage-2 trainer needs stage = 2"));
        }
        if encoder.inner().config() != &config.encoder {
            return Err(Error::config("encoder", "does not match the supplied encoder checkpoint"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        let deblur = Generator::new(&config.deblur_generator, &mut rng)?;
        Ok(Self {
            opt_deblur: Adam::new(deblur.params()),
            data: Data::new(&config, train, val)?,
            config,
            step: 0,
            encoder,
            deblur,
        })
    }

    pub fn resume(ckpt: &Checkpoint, train: Vec<ImagePair>, val: Vec<ImagePair>) -> Result<Self> {
        if ckpt.stage != 2 {
            return Err(Error::Integrity(format!("expected a stage-2 checkpoint, found stage {}", ckpt.stage)));
        }
        Ok(Self {
            config: ckpt.config.clone(),
            step: ckpt.step,
            encoder: ckpt.encoder()?.freeze(),
            deblur: ckpt.deblur_generator()?,
            opt_deblur: ckpt.optimizer("deblur")?,
            data: Data::new(&ckpt.config, train, val)?,
        })
    }

    pub fn encoder(&self) -> &FrozenEncoder<f32> {
        &self.encoder
    }

    pub fn deblur_generator(&self) -> &Generator<f32> {
        &self.deblur
    }

    /// Scalar parameters the optimizer updates.
    pub fn trainable_parameters(&self) -> usize {
        self.deblur.params().numel()
    }
}

impl Trainer for Stage2Trainer {
    fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn steps_done(&self) -> u64 {
        self.step
    }

    fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = cosine_lr(step, &self.config)?;
        let (x, y) = self.data.batch(&self.config, step)?;
        let g = Graph::new();
        let pe = self.encoder.bind(&g);
        let pd = self.deblur.params().bind(&g, true);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let deg = self
            .deblur
            .config()
            .uses_degradation()
            .then(|| self.encoder.forward(&pe, yv).latent);
        let deblurred = deblur(&self.deblur, &pd, yv, deg)?;
        let obj = stage2_objective(xv, &deblurred.stages, self.encoder.inner(), &pe, &self.config.weights)?;
        let mut losses = BTreeMap::new();
        losses.insert("psnr".to_string(), obj.psnr.item());
        losses.insert("blur".to_string(), obj.blur.item());
        losses.insert("total".to_string(), obj.total.item());
        for (name, v) in &losses {
            guard(step, name, *v)?;
        }
        let grads = g.backward(obj.total);
        let gd = self.deblur.params().collect_grads(&pd, &grads);
        self.opt_deblur.update(self.deblur.params_mut(), &gd, lr);
        self.step += 1;
        Ok(StepRecord {
            stage: 2,
            step: self.step,
            lr,
            losses,
        })
    }

    fn evaluate(&self) -> Result<EvalRecord> {
        evaluate_pairs(2, self.step, &self.data.val, self.encoder.inner(), &self.deblur, None)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: 2,
            step: self.step,
            config: self.config.clone(),
            encoder: self.encoder.inner().params().clone(),
            reblur: None,
            deblur: Some(self.deblur.params().clone()),
            discriminator: None,
            optimizers: [("deblur".to_string(), self.opt_deblur.clone())].into_iter().collect(),
        }
    }
}

pub fn train_stage1(
    config: TrainConfig,
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    on_event: impl FnMut(Event<'_>, &Stage1Trainer) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Stage1Trainer::new(config, train, val)?;
    t.run(on_event)?;
    Ok(t.checkpoint())
}

pub fn train_stage2(
    config: TrainConfig,
    encoder: FrozenEncoder<f32>,
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    on_event: impl FnMut(Event<'_>, &Stage2Trainer) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Stage2Trainer::new(config, encoder, train, val)?;
    t.run(on_event)?;
    Ok(t.checkpoint())
}

/// Variants of the component study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    WithoutDegradation,
    WithoutReblurring,
    WithoutBlurLoss,
    SingleScaleInjection,
    InputConcat,
    ConcatInjection,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::WithoutDegradation,
        Ablation::WithoutReblurring,
        Ablation::WithoutBlurLoss,
        Ablation::SingleScaleInjection,
        Ablation::InputConcat,
        Ablation::ConcatInjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutDegradation => "w/o degradation",
            Ablation::WithoutReblurring => "w/o reblurring",
            Ablation::WithoutBlurLoss => "w/o blur loss",
            Ablation::SingleScaleInjection => "injection w/o multi-scale",
            Ablation::InputConcat => "input w/ concat",
            Ablation::ConcatInjection => "w/ concat injection",
        }
    }

    /// Accepts the short names above, optionally prefixed with "Ours" or
    /// "Our" as in the published table, case-insensitively.
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.trim().to_lowercase();
        let short = lower
            .strip_prefix("ours ")
            .or_else(|| lower.strip_prefix("our "))
            .unwrap_or(&lower)
            .trim();
        Self::ALL.into_iter().find(|a| a.name() == short).ok_or_else(|| Error::UnknownAblation {
            name: name.to_string(),
            valid: Self::ALL.iter().map(|a| format!("{:?}", a.name())).collect::<Vec<_>>().join(", "),
        })
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let g = &mut cfg.deblur_generator;
        match self {
            Ablation::Full => {}
            Ablation::WithoutDegradation => g.injection_mode = InjectionMode::None,
            Ablation::WithoutReblurring => cfg.reblurring = false,
            Ablation::WithoutBlurLoss => cfg.weights.lambda3 = 0.0,
            Ablation::SingleScaleInjection => g.injection_scales = InjectionScales::CoarsestOnly,
            Ablation::InputConcat => g.injection_mode = InjectionMode::InputConcat,
            Ablation::ConcatInjection => g.injection_mode = InjectionMode::Concat,
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub seed: u64,
    pub eval: EvalRecord,
}

/// Run both stages for one variant and report the held-out stage-2 result.
pub fn run_ablation(
    ablation: Ablation,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    train: &[ImagePair],
    val: &[ImagePair],
) -> Result<AblationReport> {
    let s1 = ablation.apply(stage1);
    let s2 = ablation.apply(stage2);
    let ckpt = train_stage1(s1, train.to_vec(), val.to_vec(), |_, _| Ok(()))?;
    let mut t = Stage2Trainer::new(s2, ckpt.encoder()?.freeze(), train.to_vec(), val.to_vec())?;
    t.run(|_, _| Ok(()))?;
    Ok(AblationReport {
        name: ablation.name().to_string(),
        seed: stage2.seed,
        eval: t.evaluate()?,
    })
}
