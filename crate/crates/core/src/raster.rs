//! Planar float rasters and conversions to and from encoded image files.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use thiserror::Error;

use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

/// Single-channel raster with values nominally in [0,1]. Used for importance
/// maps, QR rasters and element masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(width * height, data.len());
        Self { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Plane {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Plane::new(w, h, 0.0);
        for y in 0..h {
            let src = (y0 + y) * self.width + x0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        out
    }

    pub fn paste(&mut self, patch: &Plane, x0: usize, y0: usize) {
        assert!(x0 + patch.width <= self.width && y0 + patch.height <= self.height);
        for y in 0..patch.height {
            let dst = (y0 + y) * self.width + x0;
            self.data[dst..dst + patch.width].copy_from_slice(&patch.data[y * patch.width..(y + 1) * patch.width]);
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Triangle-filtered resize (area-like when shrinking).
    pub fn resize(&self, w: usize, h: usize) -> Plane {
        if (w, h) == self.dims() {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("plane buffer");
        let out = image::imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
        Plane::from_vec(w, h, out.into_raw())
    }

    /// Rotate clockwise by `quarter_turns` * 90 degrees.
    pub fn rotate(&self, quarter_turns: u32) -> Plane {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => self.clone(),
            2 => {
                let mut d = self.data.clone();
                d.reverse();
                Plane::from_vec(w, h, d)
            }
            1 => {
                let mut out = Plane::new(h, w, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        out.set(h - 1 - y, x, self.get(x, y));
                    }
                }
                out
            }
            _ => {
                let mut out = Plane::new(h, w, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        out.set(y, w - 1 - x, self.get(x, y));
                    }
                }
                out
            }
        }
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.iter().map(|&v| to_u8(v)).collect())
            .expect("gray buffer")
    }

    pub fn from_gray8(img: &GrayImage) -> Plane {
        Plane::from_vec(img.width() as usize, img.height() as usize, img.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor, index: usize) -> Plane {
        assert_eq!(t.c(), 1);
        Plane::from_vec(t.w(), t.h(), t.sample(index).to_vec())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        self.to_gray8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Plane, RasterError> {
        Ok(Plane::from_gray8(&image::open(path)?.to_luma8()))
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar RGB image in [0,1]: the carrier and coded images.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartImage {
    pub width: usize,
    pub height: usize,
    /// Three consecutive planes, R then G then B.
    pub data: Vec<f32>,
}

impl ChartImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = fill[c]);
        }
        Self { width, height, data }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(3 * width * height, data.len());
        Self { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn plane(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.plane() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let p = self.plane();
        self.data[c * p + y * self.width + x] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    pub fn channel(&self, c: usize) -> Plane {
        let p = self.plane();
        Plane::from_vec(self.width, self.height, self.data[c * p..(c + 1) * p].to_vec())
    }

    pub fn from_channels(r: &Plane, g: &Plane, b: &Plane) -> Self {
        let mut data = Vec::with_capacity(3 * r.data.len());
        data.extend_from_slice(&r.data);
        data.extend_from_slice(&g.data);
        data.extend_from_slice(&b.data);
        Self::from_planar(r.width, r.height, data)
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> Plane {
        let p = self.plane();
        let data = (0..p).map(|i| 0.299 * self.data[i] + 0.587 * self.data[p + i] + 0.114 * self.data[2 * p + i]).collect();
        Plane::from_vec(self.width, self.height, data)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ChartImage {
        let [r, g, b] = [0, 1, 2].map(|c| self.channel(c).crop(x0, y0, w, h));
        Self::from_channels(&r, &g, &b)
    }

    pub fn paste(&mut self, patch: &ChartImage, x0: usize, y0: usize) {
        assert!(x0 + patch.width <= self.width && y0 + patch.height <= self.height);
        let (p, pp) = (self.plane(), patch.plane());
        for c in 0..3 {
            for y in 0..patch.height {
                let dst = c * p + (y0 + y) * self.width + x0;
                let src = c * pp + y * patch.width;
                self.data[dst..dst + patch.width].copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
    }

    pub fn resize(&self, w: usize, h: usize) -> ChartImage {
        if (w, h) == self.dims() {
            return self.clone();
        }
        let [r, g, b] = [0, 1, 2].map(|c| self.channel(c).resize(w, h));
        Self::from_channels(&r, &g, &b)
    }

    pub fn rotate(&self, quarter_turns: u32) -> ChartImage {
        let [r, g, b] = [0, 1, 2].map(|c| self.channel(c).rotate(quarter_turns));
        Self::from_channels(&r, &g, &b)
    }

    /// Snap every value onto the 8-bit grid, as a lossless save and reload would.
    pub fn quantize(&self) -> ChartImage {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Self::from_planar(self.width, self.height, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let p = self.plane();
        let mut raw = Vec::with_capacity(3 * p);
        for i in 0..p {
            for c in 0..3 {
                raw.push(to_u8(self.data[c * p + i]));
            }
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("rgb buffer")
    }

    pub fn from_rgb8(img: &RgbImage) -> ChartImage {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let p = w * h;
        let mut data = vec![0.0; 3 * p];
        for (i, px) in img.pixels().enumerate() {
            let Rgb(v) = *px;
            for c in 0..3 {
                data[c * p + i] = v[c] as f32 / 255.0;
            }
        }
        Self::from_planar(w, h, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor, index: usize) -> ChartImage {
        assert_eq!(t.c(), 3);
        Self::from_planar(t.w(), t.h(), t.sample(index).to_vec())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(self.to_rgb8()).write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Baseline JPEG at `quality` (1-100).
    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, RasterError> {
        let mut out = Vec::new();
        let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100));
        self.to_rgb8().write_with_encoder(enc)?;
        Ok(out)
    }

    /// Decode any supported container (PNG or JPEG).
    pub fn decode(bytes: &[u8]) -> Result<ChartImage, RasterError> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ChartImage, RasterError> {
        Self::decode(&std::fs::read(path)?)
    }
}
