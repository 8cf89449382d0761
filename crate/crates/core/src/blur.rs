//! Piecewise-smooth motion fields and per-pixel line-integral blur.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::metrics::gaussian_taps;

/// Standard deviation of the Gaussian that softens region masks.
pub const MASK_SIGMA: f64 = 5.0;

/// Parameters of the random field generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub max_magnitude: f64,
    pub max_segments: usize,
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_magnitude >= 0.0 && self.max_magnitude.is_finite()) {
            return Err(Error::config("max_magnitude", "must be finite and non-negative"));
        }
        if self.max_segments == 0 {
            return Err(Error::config("max_segments", "must be at least 1"));
        }
        Ok(())
    }

    /// Largest affine slope, in pixels of motion per pixel of position.
    fn slope(&self, h: usize, w: usize) -> f64 {
        self.max_magnitude / (4 * h.max(w)) as f64
    }

    /// Bound on `|v(p + e) - v(p)|` per component for any unit step `e`.
    ///
    /// Each smoothed convex-region mask changes by at most the peak Gaussian
    /// tap per step, region velocities stay below `1.5 · max_magnitude`, and
    /// the radial magnitude clip is 1-Lipschitz.
    pub fn smoothness_bound(&self, h: usize, w: usize) -> f64 {
        let taps = gaussian_taps(mask_taps(), MASK_SIGMA);
        let peak = taps.iter().copied().fold(0.0, f64::max);
        let per_component = self.max_segments as f64 * peak * 1.5 * self.max_magnitude + self.slope(h, w);
        std::f64::consts::SQRT_2 * per_component
    }
}

fn mask_taps() -> usize {
    2 * (3.0 * MASK_SIGMA).ceil() as usize + 1
}

/// Per-pixel displacement `(vx, vy)` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionField {
    height: usize,
    width: usize,
    vx: Vec<f32>,
    vy: Vec<f32>,
    pub max_magnitude: f64,
}

impl MotionField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vx: vec![0.0; height * width],
            vy: vec![0.0; height * width],
            max_magnitude: 0.0,
        }
    }

    pub fn uniform(height: usize, width: usize, vx: f32, vy: f32) -> Self {
        Self {
            height,
            width,
            vx: vec![vx; height * width],
            vy: vec![vy; height * width],
            max_magnitude: (vx as f64).hypot(vy as f64),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.vx[i], self.vy[i])
    }

    pub fn vx(&self) -> &[f32] {
        &self.vx
    }

    pub fn vy(&self) -> &[f32] {
        &self.vy
    }

    /// Every vector multiplied by `s`.
    pub fn scaled(&self, s: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            vx: self.vx.iter().map(|v| v * s).collect(),
            vy: self.vy.iter().map(|v| v * s).collect(),
            max_magnitude: self.max_magnitude * s.abs() as f64,
        }
    }

    pub fn peak_magnitude(&self) -> f64 {
        self.vx
            .iter()
            .zip(&self.vy)
            .map(|(&x, &y)| (x as f64).hypot(y as f64))
            .fold(0.0, f64::max)
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Self {
        let take = |src: &[f32]| {
            (0..h)
                .flat_map(|yy| src[(y + yy) * self.width + x..(y + yy) * self.width + x + w].iter().copied())
                .collect()
        };
        Self {
            height: h,
            width: w,
            vx: take(&self.vx),
            vy: take(&self.vy),
            max_magnitude: self.max_magnitude,
        }
    }

    /// Field of the horizontally mirrored image.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let mut out = Self::zeros(self.height, w);
        out.max_magnitude = self.max_magnitude;
        for y in 0..self.height {
            for x in 0..w {
                let (vx, vy) = self.at(y, w - 1 - x);
                out.vx[y * w + x] = -vx;
                out.vy[y * w + x] = vy;
            }
        }
        out
    }

    /// Field of the image rotated by `quarter_turns × 90°`, matching
    /// [`Image::rotate90`].
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            out = out.rotate_once();
        }
        out
    }

    fn rotate_once(&self) -> Self {
        // new(y, x) = old(x, w-1-y): old x-axis maps to new -y, old y to new x
        let (h, w) = (self.height, self.width);
        let mut out = Self::zeros(w, h);
        out.max_magnitude = self.max_magnitude;
        for y in 0..w {
            for x in 0..h {
                let (vx, vy) = self.at(x, w - 1 - y);
                out.vx[y * h + x] = vy;
                out.vy[y * h + x] = -vx;
            }
        }
        out
    }
}

/// Separable Gaussian smoothing with clamp-to-edge borders.
fn smooth(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[(y as isize + i as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

struct Region {
    cy: f64,
    cx: f64,
    v0: (f64, f64),
    a: [[f64; 2]; 2],
}

/// Random field from 1..=max_segments Voronoi regions, each moving under
/// its own affine model, blended through Gaussian-smoothed masks and
/// clipped to `max_magnitude`.
pub fn synthesize_motion_field<R: Rng>(rng: &mut R, h: usize, w: usize, params: &FieldParams) -> Result<MotionField> {
    params.validate()?;
    if h < 32 || w < 32 {
        return Err(Error::Dimension(format!("motion field needs at least 32x32, got {h}x{w}")));
    }
    let m = params.max_magnitude;
    let slope = params.slope(h, w);
    let count = rng.gen_range(1..=params.max_segments);
    let vel = Uniform::new_inclusive(-1.0, 1.0);
    let regions: Vec<Region> = (0..count)
        .map(|_| Region {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            v0: (m * vel.sample(rng), m * vel.sample(rng)),
            a: [
                [slope * vel.sample(rng), slope * vel.sample(rng)],
                [slope * vel.sample(rng), slope * vel.sample(rng)],
            ],
        })
        .collect();
    let taps = gaussian_taps(mask_taps(), MASK_SIGMA);
    let mut masks = vec![vec![0.0; h * w]; count];
    for y in 0..h {
        for x in 0..w {
            let nearest = regions
                .iter()
                .enumerate()
                .map(|(k, r)| (k, (y as f64 - r.cy).powi(2) + (x as f64 - r.cx).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .expect("at least one region");
            masks[nearest][y * w + x] = 1.0;
        }
    }
    let masks: Vec<Vec<f64>> = masks.iter().map(|mk| smooth(mk, h, w, &taps)).collect();
    let mut field = MotionField::zeros(h, w);
    field.max_magnitude = m;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (mut fx, mut fy) = (0.0, 0.0);
            for (r, mk) in regions.iter().zip(&masks) {
                let (dx, dy) = (x as f64 - r.cx, y as f64 - r.cy);
                fx += mk[i] * (r.v0.0 + r.a[0][0] * dx + r.a[0][1] * dy);
                fy += mk[i] * (r.v0.1 + r.a[1][0] * dx + r.a[1][1] * dy);
            }
            let mag = fx.hypot(fy);
            if mag > m {
                let s = if mag > 0.0 { m / mag } else { 0.0 };
                fx *= s;
                fy *= s;
            }
            field.vx[i] = fx as f32;
            field.vy[i] = fy as f32;
        }
    }
    Ok(field)
}

/// Number of line samples for a field of the given peak magnitude.
pub fn default_steps(max_magnitude: f64) -> usize {
    3.max((2.0 * max_magnitude).ceil() as usize + 1)
}

/// Sample positions `t ∈ [-½, ½]` along the blur segment.
pub fn line_offsets(steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    (0..steps).map(|k| k as f64 / (steps - 1) as f64 - 0.5).collect()
}

/// Bilinear sample with clamp-to-edge addressing.
#[inline]
pub fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Each output pixel is the mean of `steps` bilinear samples along
/// `p + v(p)·t`, `t ∈ [-½, ½]`; Gaussian noise of std `noise_sigma` is then
/// added and the result clamped to `[0, 1]`.
pub fn apply_spatially_varying_blur<R: Rng>(
    sharp: &Image,
    field: &MotionField,
    steps: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Image> {
    if steps == 0 {
        return Err(Error::Invalid("blur needs at least one sample".into()));
    }
    if sharp.dims() != field.dims() {
        return Err(Error::Dimension(format!(
            "field {:?} does not match image {:?}",
            field.dims(),
            sharp.dims()
        )));
    }
    let (h, w) = sharp.dims();
    let ts = line_offsets(steps);
    let mut out = Image::new(h, w);
    out.id = sharp.id.clone();
    for c in 0..CHANNELS {
        let plane = sharp.plane(c);
        for y in 0..h {
            for x in 0..w {
                let (vx, vy) = field.at(y, x);
                let acc: f64 = ts
                    .iter()
                    .map(|&t| bilinear(plane, h, w, y as f64 + vy as f64 * t, x as f64 + vx as f64 * t))
                    .sum();
                out.set(c, y, x, (acc / steps as f64) as f32);
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in out.data_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    Ok(out.clamped())
}
