//! Synthetic paired datasets: procedural scenes, blur synthesis, cropping,
//! augmentation, batching, and the on-disk PNG layout.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blur::{apply_spatially_varying_blur, default_steps, synthesize_motion_field, FieldParams, MotionField};
use crate::encoder::LATENT_STRIDE;
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, write_atomic, Image, CHANNELS};
use crate::metrics::psnr;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAX_NOISE_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_pairs: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub max_magnitude: f64,
    pub max_segments: usize,
    pub augment: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_pairs: 64,
            patch_size: 64,
            seed: 0,
            max_magnitude: 8.0,
            max_segments: 4,
            augment: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::config("num_pairs", "must be at least 1"));
        }
        if self.patch_size < 32 || self.patch_size % LATENT_STRIDE != 0 {
            return Err(Error::config(
                "patch_size",
                format!("must be at least 32 and divisible by {LATENT_STRIDE}, got {}", self.patch_size),
            ));
        }
        self.field_params().validate()
    }

    pub fn field_params(&self) -> FieldParams {
        FieldParams {
            max_magnitude: self.max_magnitude,
            max_segments: self.max_segments,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub sharp: Image,
    pub blurry: Image,
    /// Ground-truth motion; absent for pairs loaded from disk.
    pub field: Option<MotionField>,
    pub noise_sigma: f64,
}

impl ImagePair {
    pub fn input_psnr(&self) -> f64 {
        psnr(&self.blurry, &self.sharp).expect("pair images share a size")
    }
}

/// Per-pair record of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub noise_sigma: f64,
    pub field_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub pairs: Vec<PairRecord>,
}

/// Independent stream for pair `index`.
fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn pair_id(index: usize) -> String {
    format!("{index:05}")
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

fn colour<R: Rng>(rng: &mut R) -> [f32; 3] {
    std::array::from_fn(|_| rng.gen::<f32>())
}

/// Procedural scene: a colour gradient overlaid with shapes, thin text-like
/// strokes, and faint band-limited noise.
pub fn procedural_scene<R: Rng>(rng: &mut R, h: usize, w: usize) -> Image {
    let (c0, c1) = (colour(rng), colour(rng));
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let extent = (h.max(w)) as f32;
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let t = (((x as f32 * ca + y as f32 * sa) / extent) * 0.5 + 0.5).clamp(0.0, 1.0);
            let px = lerp(c0, c1, t);
            for (c, v) in px.iter().enumerate() {
                img.set(c, y, x, *v);
            }
        }
    }

    let shapes = rng.gen_range(3..8);
    for _ in 0..shapes {
        let col = colour(rng);
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let r = rng.gen_range(0.08..0.3) * extent;
        let round = rng.gen_bool(0.5);
        let ry = r * rng.gen_range(0.4..1.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = if round {
                    (dx / r).powi(2) + (dy / ry).powi(2) <= 1.0
                } else {
                    dx.abs() <= r && dy.abs() <= ry
                };
                if inside {
                    for (c, v) in col.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }

    let strokes = rng.gen_range(4..12);
    for _ in 0..strokes {
        let col = if rng.gen_bool(0.5) { [0.05; 3] } else { [0.95; 3] };
        let (mut py, mut px) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
        let segments = rng.gen_range(2..5);
        let width = rng.gen_range(0.6..1.4f32);
        for _ in 0..segments {
            let len = rng.gen_range(3.0..0.25 * extent);
            let dir = rng.gen_range(0..4) as f32 * std::f32::consts::FRAC_PI_2 + rng.gen_range(-0.3..0.3);
            let (qy, qx) = (py + len * dir.sin(), px + len * dir.cos());
            draw_segment(&mut img, (py, px), (qy, qx), width, col);
            (py, px) = (qy, qx);
        }
    }

    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.01..0.03),
            )
        })
        .collect();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let n: f32 = waves
                    .iter()
                    .map(|&(fy, fx, ph, amp)| amp * (fy * y as f32 + fx * x as f32 + ph + c as f32).sin())
                    .sum();
                let v = img.get(c, y, x) + n;
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn draw_segment(img: &mut Image, a: (f32, f32), b: (f32, f32), width: f32, col: [f32; 3]) {
    let (h, w) = img.dims();
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dy * dy + dx * dx).max(1e-6);
    let pad = width.ceil() as i64 + 1;
    let y_lo = (a.0.min(b.0) as i64 - pad).max(0);
    let y_hi = (a.0.max(b.0) as i64 + pad).min(h as i64 - 1);
    let x_lo = (a.1.min(b.1) as i64 - pad).max(0);
    let x_hi = (a.1.max(b.1) as i64 + pad).min(w as i64 - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (py, px) = (y as f32 - a.0, x as f32 - a.1);
            let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
            let (ey, ex) = (py - t * dy, px - t * dx);
            if (ey * ey + ex * ex).sqrt() <= width * 0.5 + 0.25 {
                for (c, v) in col.iter().enumerate() {
                    img.set(c, y as usize, x as usize, *v);
                }
            }
        }
    }
}

/// Pair `index` of the dataset described by `config`.
pub fn make_pair(config: &DatasetConfig, index: usize) -> Result<(ImagePair, PairRecord)> {
    let mut rng = pair_rng(config.seed, index);
    let size = config.patch_size;
    let id = pair_id(index);
    let sharp = procedural_scene(&mut rng, size, size).with_id(id.clone());
    let field_seed: u64 = rng.gen();
    let noise_sigma = rng.gen_range(0.0..=MAX_NOISE_SIGMA);
    let field = synthesize_motion_field(&mut ChaCha8Rng::seed_from_u64(field_seed), size, size, &config.field_params())?;
    let blurry = apply_spatially_varying_blur(&sharp, &field, default_steps(config.max_magnitude), noise_sigma, &mut rng)?;
    Ok((
        ImagePair {
            id: id.clone(),
            sharp,
            blurry,
            field: Some(field),
            noise_sigma,
        },
        PairRecord {
            id,
            noise_sigma,
            field_seed,
        },
    ))
}

/// Deterministic dataset; pair `i` depends only on `(seed, i)`.
pub fn make_dataset(config: &DatasetConfig) -> Result<Vec<ImagePair>> {
    Ok(make_dataset_with_manifest(config)?.0)
}

pub fn make_dataset_with_manifest(config: &DatasetConfig) -> Result<(Vec<ImagePair>, Manifest)> {
    config.validate()?;
    let (pairs, records) = (0..config.num_pairs)
        .map(|i| make_pair(config, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok((
        pairs,
        Manifest {
            config: config.clone(),
            pairs: records,
        },
    ))
}

/// Random `size × size` window with, when `augment` is set, a random
/// horizontal flip and quarter-turn rotation, applied identically to both
/// images and the field.
pub fn crop_and_augment<R: Rng>(pair: &ImagePair, size: usize, augment: bool, rng: &mut R) -> Result<ImagePair> {
    let (h, w) = pair.sharp.dims();
    if size == 0 || size > h.min(w) {
        return Err(Error::Dimension(format!("crop {size} does not fit {h}x{w}")));
    }
    let y = rng.gen_range(0..=h - size);
    let x = rng.gen_range(0..=w - size);
    let mut out = ImagePair {
        id: pair.id.clone(),
        sharp: pair.sharp.crop(y, x, size, size)?,
        blurry: pair.blurry.crop(y, x, size, size)?,
        field: pair.field.as_ref().map(|f| f.crop(y, x, size, size)),
        noise_sigma: pair.noise_sigma,
    };
    if augment {
        if rng.gen_bool(0.5) {
            out = flip_pair(&out);
        }
        let turns = rng.gen_range(0..4);
        out = rotate_pair(&out, turns);
    }
    Ok(out)
}

pub fn flip_pair(pair: &ImagePair) -> ImagePair {
    ImagePair {
        id: pair.id.clone(),
        sharp: pair.sharp.flip_horizontal(),
        blurry: pair.blurry.flip_horizontal(),
        field: pair.field.as_ref().map(MotionField::flip_horizontal),
        noise_sigma: pair.noise_sigma,
    }
}

pub fn rotate_pair(pair: &ImagePair, quarter_turns: usize) -> ImagePair {
    ImagePair {
        id: pair.id.clone(),
        sharp: pair.sharp.rotate90(quarter_turns),
        blurry: pair.blurry.rotate90(quarter_turns),
        field: pair.field.as_ref().map(|f| f.rotate90(quarter_turns)),
        noise_sigma: pair.noise_sigma,
    }
}

/// Shuffled index batches; epoch `e` is a pure function of `(seed, e)`
/// and any trailing partial batch is dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > len {
            return Err(Error::config(
                "batch_size",
                format!("must be between 1 and the dataset size {len}, got {batch_size}"),
            ));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Batch consumed at global step `step`.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        self.epoch(step / per).swap_remove((step % per) as usize)
    }

    /// Endless stream of batches starting at epoch 0.
    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}

pub fn sharp_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_sharp.png"))
}

pub fn blur_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_blur.png"))
}

/// Write `{id}_sharp.png`, `{id}_blur.png` and the manifest.
pub fn write_dataset(dir: &Path, pairs: &[ImagePair], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for pair in pairs {
        save_image(&pair.sharp, sharp_path(dir, &pair.id))?;
        save_image(&pair.blurry, blur_path(dir, &pair.id))?;
    }
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Load every pair listed in the directory's manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    let manifest = read_manifest(dir)?;
    if manifest.pairs.is_empty() {
        return Err(Error::Invalid(format!("{} lists no pairs", dir.display())));
    }
    manifest
        .pairs
        .iter()
        .map(|rec| {
            let sharp = load_image(sharp_path(dir, &rec.id))?.with_id(rec.id.clone());
            let blurry = load_image(blur_path(dir, &rec.id))?.with_id(rec.id.clone());
            sharp.same_dims(&blurry)?;
            Ok(ImagePair {
                id: rec.id.clone(),
                sharp,
                blurry,
                field: None,
                noise_sigma: rec.noise_sigma,
            })
        })
        .collect()
}
