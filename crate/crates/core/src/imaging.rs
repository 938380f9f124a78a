//! Raster and latent value types plus the handful of pixel operations the
//! rest of the engine is built on.
//!
//! Images store `f32` intensities in `[0, 1]`, row-major. Sketches follow the
//! paper-and-ink convention: `1.0` is blank paper, `0.0` is full ink.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// Number of latent channels produced by the autoencoder.
pub const LATENT_CHANNELS: usize = 4;

/// Spatial downscale between pixel space and latent space.
pub const LATENT_DOWNSCALE: usize = 8;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::contract(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

fn check_unit(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::contract(format!(
            "intensity {} at index {i} lies outside [0, 1]",
            data[i]
        ))),
        None => Ok(()),
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[inline]
fn dequantize(b: u8) -> f32 {
    f32::from(b) / 255.0
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::mismatch(width * height, data.len()));
        }
        check_unit(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel; results are
    /// clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    /// Clamps arbitrary values into range. Used for the output of filters
    /// whose arithmetic is only range-preserving up to rounding.
    pub(crate) fn from_clamped(width: usize, height: usize, data: impl IntoIterator<Item = f64>) -> Self {
        let data: Vec<f32> = data
            .into_iter()
            .map(|v| (v as f32).clamp(0.0, 1.0))
            .collect();
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Ink map: `1 - v` per pixel, so blank paper has zero norm.
    pub fn inverted(&self) -> GrayImage {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Lifts to RGB by replicating the intensity into all three channels.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<GrayImage> {
        check_dims(width, height)?;
        let data = resample(&self.data, self.width, self.height, 1, width, height);
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Returns the image as 8-bit luma with `round(v * 255)` quantization.
    pub fn to_luma8(&self) -> Vec<u8> {
        self.data.iter().copied().map(quantize).collect()
    }

    /// Re-reads the image through 8-bit quantization, exactly as a PNG
    /// round trip would.
    pub fn quantized(&self) -> GrayImage {
        Self {
            width: self.width,
            height: self.height,
            data: self.to_luma8().into_iter().map(dequantize).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_luma8())
                .expect("buffer length matches dimensions");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes any PNG into 8-bit grayscale.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<GrayImage> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        GrayImage::new(
            w as usize,
            h as usize,
            img.into_raw().into_iter().map(dequantize).collect(),
        )
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<GrayImage> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Three-channel image, row-major interleaved RGB, each channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != 3 * width * height {
            return Err(Error::mismatch(3 * width * height, data.len()));
        }
        check_unit(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(
            width,
            height,
            std::iter::repeat_n(rgb, width * height).flatten().collect(),
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma with 0.299 / 0.587 / 0.114 weights.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                let [r, g, b] = [p[0], p[1], p[2]].map(f64::from);
                ((0.299 * r + 0.587 * g + 0.114 * b) as f32).clamp(0.0, 1.0)
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<RgbImage> {
        check_dims(width, height)?;
        let data = resample(&self.data, self.width, self.height, 3, width, height);
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().copied().map(quantize).collect()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
                .expect("buffer length matches dimensions");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<RgbImage> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        RgbImage::new(
            w as usize,
            h as usize,
            img.into_raw().into_iter().map(dequantize).collect(),
        )
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// `rgb_to_gray` as a free function.
pub fn rgb_to_gray(img: &RgbImage) -> GrayImage {
    img.to_gray()
}

/// Align-corners source coordinate for destination index `i`.
#[inline]
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

fn resample(
    src: &[f32],
    sw: usize,
    sh: usize,
    channels: usize,
    dw: usize,
    dh: usize,
) -> Vec<f32> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    // Per-column taps are shared by every row.
    let cols: Vec<(usize, usize, f64)> = (0..dw)
        .map(|x| {
            let sx = source_coord(x, sw, dw);
            let x0 = (sx.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(dw * dh * channels);
    for y in 0..dh {
        let sy = source_coord(y, sh, dh);
        let y0 = (sy.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &cols {
            for c in 0..channels {
                let at = |x: usize, y: usize| f64::from(src[(y * sw + x) * channels + c]);
                let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
                let bottom = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
                let v = top + (bottom - top) * fy;
                out.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Cosine similarity of two equally sized images over their flattened
/// intensity vectors.
///
/// A zero-norm operand yields `0.0`, so a blank canvas never looks similar
/// to anything.
pub fn cosine_similarity(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::mismatch(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    // sqrt(na * nb) rather than na.sqrt() * nb.sqrt(): exact 1.0 for a == b.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Latent tensor: four channels at one eighth of the pixel resolution,
/// stored channel-major (`c, y, x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Latent {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        let len = LATENT_CHANNELS * height * width;
        if data.len() != len {
            return Err(Error::mismatch(len, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "latent value at index {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; LATENT_CHANNELS * height * width],
        }
    }

    /// Latent shape matching an image of the given pixel size.
    pub fn shape_for_image(width: usize, height: usize) -> Result<(usize, usize)> {
        if width % LATENT_DOWNSCALE != 0 || height % LATENT_DOWNSCALE != 0 || width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "image {width}x{height} is not divisible by {LATENT_DOWNSCALE}"
            )));
        }
        Ok((height / LATENT_DOWNSCALE, width / LATENT_DOWNSCALE))
    }

    pub fn channels(&self) -> usize {
        LATENT_CHANNELS
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[channels, height, width]`.
    pub fn shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise `f(a, b)`; errors on shape mismatch.
    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.check_same_shape(other)?;
        Latent::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Latent> {
        Latent::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}
