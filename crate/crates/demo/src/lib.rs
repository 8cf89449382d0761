//! Browser demo: synthesize a spatially varying motion blur, sweep its
//! strength, and inspect the blur kernel under any pixel.

use blurrep::blur::{apply_spatially_varying_blur, default_steps, line_offsets, synthesize_motion_field, FieldParams, MotionField};
use blurrep::dataset::procedural_scene;
use blurrep::image::Image;
use blurrep::metrics::psnr;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn to_rgba(img: &Image) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match h6 as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Blur kernel of a single motion vector, splatted onto a `side × side`
/// grid centred on the pixel.
pub fn line_psf(vx: f64, vy: f64, steps: usize, side: usize) -> Vec<f64> {
    let r = (side / 2) as i64;
    let mut k = vec![0.0; side * side];
    for t in line_offsets(steps) {
        let (dy, dx) = (vy * t, vx * t);
        let (y0, x0) = (dy.floor(), dx.floor());
        let (fy, fx) = (dy - y0, dx - x0);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let ky = y0 as i64 + oy + r;
                let kx = x0 as i64 + ox + r;
                if (0..side as i64).contains(&ky) && (0..side as i64).contains(&kx) {
                    k[ky as usize * side + kx as usize] += wy * wx / steps as f64;
                }
            }
        }
    }
    k
}

#[wasm_bindgen]
pub struct Scene {
    sharp: Image,
    field: MotionField,
    strength: f32,
    blurry: Image,
    max_magnitude: f64,
}

#[wasm_bindgen]
impl Scene {
    /// A procedural scene and a random motion field. `size` must be at
    /// least 32.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, max_magnitude: f64, max_segments: usize) -> Result<Scene, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sharp = procedural_scene(&mut rng, size, size);
        let params = FieldParams { max_magnitude, max_segments };
        let field = synthesize_motion_field(&mut rng, size, size, &params).map_err(|e| JsError::new(&e.to_string()))?;
        let mut scene = Scene {
            blurry: sharp.clone(),
            sharp,
            field,
            strength: 1.0,
            max_magnitude,
        };
        scene.set_strength(1.0)?;
        Ok(scene)
    }

    pub fn size(&self) -> usize {
        self.sharp.height()
    }

    /// Re-blur with every motion vector scaled by `s`.
    pub fn set_strength(&mut self, s: f32) -> Result<(), JsError> {
        self.strength = s;
        let field = self.field.scaled(s);
        let steps = default_steps(self.max_magnitude * s as f64);
        self.blurry = apply_spatially_varying_blur(&self.sharp, &field, steps, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(())
    }

    pub fn sharp_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sharp)
    }

    pub fn blurry_rgba(&self) -> Vec<u8> {
        to_rgba(&self.blurry)
    }

    /// Hue is the blur axis, brightness the local magnitude.
    pub fn field_rgba(&self) -> Vec<u8> {
        let peak = self.field.peak_magnitude().max(1e-6);
        let mut out = Vec::with_capacity(self.field.vx().len() * 4);
        for (&vx, &vy) in self.field.vx().iter().zip(self.field.vy()) {
            let (vx, vy) = (vx as f64, vy as f64);
            let axis = vy.atan2(vx).rem_euclid(std::f64::consts::PI) / std::f64::consts::PI;
            out.extend(hsv(axis, 0.85, vx.hypot(vy) / peak));
            out.push(255);
        }
        out
    }

    pub fn input_psnr(&self) -> f64 {
        psnr(&self.blurry, &self.sharp).unwrap_or(f64::NAN)
    }

    /// Local blur length in pixels at the current strength.
    pub fn magnitude_at(&self, x: usize, y: usize) -> f64 {
        let (vx, vy) = self.field.at(y, x);
        (vx as f64).hypot(vy as f64) * self.strength as f64
    }

    /// Grey-scale PSF under pixel `(x, y)`, normalised to its peak.
    pub fn psf_rgba(&self, x: usize, y: usize, side: usize) -> Vec<u8> {
        let (vx, vy) = self.field.at(y, x);
        let s = self.strength as f64;
        let k = line_psf(vx as f64 * s, vy as f64 * s, default_steps(self.max_magnitude * s), side);
        let peak = k.iter().cloned().fold(0.0, f64::max).max(1e-12);
        k.iter()
            .flat_map(|v| {
                let g = (v / peak * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psf_sums_to_one_when_it_fits() {
        let k = line_psf(5.0, -3.0, 11, 15);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let still = line_psf(0.0, 0.0, 5, 5);
        assert_eq!(still[12], 1.0);
    }

    #[test]
    fn zero_strength_leaves_the_scene_sharp() {
        let mut scene = Scene::new(3, 32, 6.0, 2).unwrap();
        assert_eq!(scene.sharp_rgba().len(), 32 * 32 * 4);
        scene.set_strength(0.0).unwrap();
        assert_eq!(scene.blurry_rgba(), scene.sharp_rgba());
        assert_eq!(scene.magnitude_at(5, 5), 0.0);
    }
}
