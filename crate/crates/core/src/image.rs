//! RGB raster container and PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHANNELS: usize = 3;

/// Three-channel planar image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub id: Option<String>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
            id: None,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        let mut img = Self::new(height, width);
        img.data.fill(value);
        img
    }

    /// Planar `c, y, x` data.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            id: None,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Values as they read back from a 16-bit PNG written by `save_image16`.
    pub fn quantized16(&self) -> Self {
        let data = self.data.iter().map(|&v| quantize(v, 65535.0) as u16 as f32 / 65535.0).collect();
        Self {
            height: self.height,
            width: self.width,
            data,
            id: self.id.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Window `[y, y+h) × [x, x+w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Dimension(format!(
                "{h}x{w} window at ({y}, {x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::from_fn(h, w, |c, yy, xx| self.get(c, y + yy, x + xx));
        out.id = self.id.clone();
        Ok(out)
    }

    /// Mirror left to right.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let mut out = Self::from_fn(self.height, w, |c, y, x| self.get(c, y, w - 1 - x));
        out.id = self.id.clone();
        out
    }

    /// Rotate by `quarter_turns × 90°` counter-clockwise.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::from_fn(w, h, |c, y, x| self.get(c, x, w - 1 - y)),
            2 => Self::from_fn(h, w, |c, y, x| self.get(c, h - 1 - y, w - 1 - x)),
            _ => Self::from_fn(w, h, |c, y, x| self.get(c, h - 1 - x, y)),
        };
        out.id = self.id.clone();
        out
    }

    /// Reflect-pad on the bottom and right up to the next multiple of `m`.
    pub fn pad_reflect_to_multiple(&self, m: usize) -> Self {
        let ph = self.height.div_ceil(m) * m;
        let pw = self.width.div_ceil(m) * m;
        if (ph, pw) == self.dims() {
            return self.clone();
        }
        let mut out = Self::from_fn(ph, pw, |c, y, x| self.get(c, reflect(y, self.height), reflect(x, self.width)));
        out.id = self.id.clone();
        out
    }

    /// One-sample `1 × 3 × H × W` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, CHANNELS, self.height, self.width), self.data.clone()).expect("image shape")
    }

    pub fn to_batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_dims(img)?;
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(Shape::new(images.len(), CHANNELS, first.height, first.width), data)
    }

    /// Split a batch tensor back into images.
    pub fn from_batch(t: &Tensor<f32>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.c != CHANNELS {
            return Err(Error::Dimension(format!("expected {CHANNELS} channels, got {s}")));
        }
        (0..s.n)
            .map(|n| Image::from_planar(s.h, s.w, t.sample(n).to_vec()))
            .collect()
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Load an 8- or 16-bit PNG as RGB. Grayscale inputs are replicated and alpha
/// is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let sixteen = matches!(
        decoded,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let mut img = Image::new(h, w);
    if sixteen {
        let buf = decoded.to_rgb16();
        for (x, y, px) in buf.enumerate_pixels() {
            for c in 0..CHANNELS {
                img.set(c, y as usize, x as usize, px[c] as f32 / 65535.0);
            }
        }
    } else if matches!(decoded, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_)) {
        let buf = decoded.to_rgb8();
        for (x, y, px) in buf.enumerate_pixels() {
            for c in 0..CHANNELS {
                img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
    } else {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("unsupported pixel format {:?}", decoded.color()),
        });
    }
    img.id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    Ok(img)
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn write_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_atomic(path, bytes.get_ref())
}

/// Write through a temporary sibling and rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Save as 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = img.dims();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| quantize(img.get(c, y as usize, x as usize), 255.0) as u8))
    });
    write_png(path.as_ref(), DynamicImage::ImageRgb8(buf))
}

/// Save as 16-bit RGB PNG, clamping to `[0, 1]`.
pub fn save_image16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = img.dims();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| quantize(img.get(c, y as usize, x as usize), 65535.0) as u16))
    });
    write_png(path.as_ref(), DynamicImage::ImageRgb16(buf))
}

/// Tile images into a grid with one row per inner vector, separated by a
/// 2-pixel white gutter.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<Image> {
    const GUTTER: usize = 2;
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Dimension("contact sheet needs at least one image".into()))?;
    let (th, tw) = first.dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = rows.len() * th + (rows.len() - 1) * GUTTER;
    let w = cols * tw + (cols.saturating_sub(1)) * GUTTER;
    let mut sheet = Image::filled(h, w, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            first.same_dims(img)?;
            let (oy, ox) = (r * (th + GUTTER), k * (tw + GUTTER));
            for c in 0..CHANNELS {
                for y in 0..th {
                    for x in 0..tw {
                        sheet.set(c, oy + y, ox + x, img.get(c, y, x).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(sheet)
}
