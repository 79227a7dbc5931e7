use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, Rgb, Rgb32FImage};
use serde::{Deserialize, Serialize};

use super::ImagingError;

/// Display-encoded RGB, each channel in `[0, 1]`.
pub type Pixel = [f32; 3];

/// Storage precision of integer raster files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_code(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// A frame of display-encoded pixels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<Pixel>,
}

impl ImageBuffer {
    /// Builds a frame, clamping every channel into `[0, 1]`.
    pub fn from_pixels(width: usize, height: usize, mut pixels: Vec<Pixel>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(ImagingError::PixelCount {
                width,
                height,
                len: pixels.len(),
            });
        }
        for p in &mut pixels {
            for v in p.iter_mut() {
                if !v.is_finite() {
                    return Err(ImagingError::NonFinite);
                }
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: Pixel) -> Result<Self, ImagingError> {
        Self::from_pixels(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Pixel) -> Result<Self, ImagingError> {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::from_pixels(width, height, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Pixel {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<Pixel> {
        self.pixels
    }

    /// Mean of `0.2126 R + 0.7152 G + 0.0722 B` over the frame.
    pub fn mean_luma(&self) -> f64 {
        let sum: f64 = self
            .pixels
            .iter()
            .map(|p| 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64)
            .sum();
        sum / self.pixels.len() as f64
    }

    /// Nearest-neighbour resize, used for thumbnails.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self, ImagingError> {
        Self::from_fn(width, height, |x, y| {
            let sx = (x * self.width) / width;
            let sy = (y * self.height) / height;
            self.pixel(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    fn from_dynamic(img: DynamicImage) -> Result<Self, ImagingError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_) => img
                .to_rgb16()
                .pixels()
                .map(|p| p.0.map(|v| v as f32 / 65535.0))
                .collect(),
            DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => img.to_rgb32f().pixels().map(|p| p.0).collect(),
            _ => img
                .to_rgb8()
                .pixels()
                .map(|p| p.0.map(|v| v as f32 / 255.0))
                .collect(),
        };
        Self::from_pixels(w, h, pixels)
    }

    fn to_dynamic(&self, depth: BitDepth) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        let quantize = |v: f32| (v.clamp(0.0, 1.0) * depth.max_code()).round();
        match depth {
            BitDepth::Eight => {
                let raw = self.pixels.iter().flat_map(|p| p.map(|v| quantize(v) as u8)).collect();
                DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("buffer size"))
            }
            BitDepth::Sixteen => {
                let raw = self.pixels.iter().flat_map(|p| p.map(|v| quantize(v) as u16)).collect();
                DynamicImage::ImageRgb16(image::ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw).expect("buffer size"))
            }
        }
    }

    /// Converts to an `image` crate float buffer.
    pub fn to_rgb32f(&self) -> Rgb32FImage {
        let raw = self.pixels.iter().flat_map(|p| *p).collect();
        Rgb32FImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }
}

/// Decodes an 8- or 16-bit raster file into `[0, 1]` values.
pub fn load_image(path: &Path) -> Result<ImageBuffer, ImagingError> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| ImagingError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| ImagingError::io(path, e))?;
    if reader.format().is_none() {
        return Err(ImagingError::UnsupportedFormat(path.display().to_string()));
    }
    let img = reader.decode().map_err(|e| ImagingError::Decode {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    ImageBuffer::from_dynamic(img)
}

/// Decodes an in-memory raster file.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ImagingError> {
    let img = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode {
        what: "upload".into(),
        message: e.to_string(),
    })?;
    ImageBuffer::from_dynamic(img)
}

/// Writes a PNG, quantized to `depth`.
pub fn save_image(buffer: &ImageBuffer, path: &Path, depth: BitDepth) -> Result<(), ImagingError> {
    buffer
        .to_dynamic(depth)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(format!("{}: {e}", path.display())))
}

/// Encodes a lossless PNG in memory.
pub fn encode_png(buffer: &ImageBuffer, depth: BitDepth) -> Result<Vec<u8>, ImagingError> {
    let mut out = Cursor::new(Vec::new());
    buffer
        .to_dynamic(depth)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Encodes an 8-bit JPEG preview.
pub fn encode_jpeg(buffer: &ImageBuffer, quality: u8) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    let rgb = buffer.to_dynamic(BitDepth::Eight).to_rgb8();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality)
        .encode_image(&rgb)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out)
}
