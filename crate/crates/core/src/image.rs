//! RGB images, posed views and PNG I/O.
//!
//! Pixel data is stored row-major as interleaved RGB (`H×W×3`). Two value
//! ranges are in use: renders and metrics work in `[0, 1]`, the diffusion
//! model works in `[-1, 1]`. Conversions are explicit.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Maps `[0, 1]` values to `[-1, 1]`.
    pub fn to_signed(&self) -> Image {
        self.map(|v| v * 2.0 - 1.0)
    }

    /// Maps `[-1, 1]` values to `[0, 1]`.
    pub fn to_unit(&self) -> Image {
        self.map(|v| (v + 1.0) * 0.5)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::new(h, w, data)
    }

    /// Writes `[0, 1]` values as 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction");
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::dataset(path, e))
    }

    /// Reads an 8-bit PNG into `[0, 1]` values.
    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::dataset(path, "missing file"));
        }
        let img = ::image::open(path)
            .map_err(|e| Error::dataset(path, e))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|p| p as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }
}

/// An image with the camera that captured it.
#[derive(Debug, Clone)]
pub struct PosedImage {
    pub image: Image,
    pub pose: Pose,
    pub camera: Camera,
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn stack_images(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| im.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_round_trip() {
        let mut im = Image::filled(2, 3, [0.0, 0.0, 0.0]);
        im.set_pixel(1, 2, [0.1, 0.2, 0.3]);
        let t = im.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 2, 3]);
        let g = t.get(1).unwrap().get(1).unwrap().get(2).unwrap();
        assert_eq!(g.to_scalar::<f32>().unwrap(), 0.2);
        assert_eq!(Image::from_tensor(&t).unwrap(), im);
    }

    #[test]
    fn png_quantises_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let im = Image::filled(4, 5, [0.0, 1.0, 0.5]);
        im.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.pixel(3, 4), [0.0, 1.0, 128.0 / 255.0]);
        let signed = back.to_signed();
        assert_eq!(signed.pixel(0, 0)[0], -1.0);
        assert_eq!(signed.pixel(0, 0)[1], 1.0);
    }

    #[test]
    fn missing_png_names_the_file() {
        let err = Image::load_png(Path::new("/nonexistent/view_000.png")).unwrap_err();
        assert!(err.to_string().contains("view_000.png"));
    }
}
