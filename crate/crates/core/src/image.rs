use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// An image with 1 or 3 channels, values clamped to [0, 1] on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CoreError::Image(format!("unsupported channel count {channels}")));
        }
        if data.len() != channels * h * w {
            return Err(CoreError::shape(
                "Image::new",
                format!("{} values", channels * h * w),
                format!("{}", data.len()),
            ));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Image { channels, h, w, data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Image { channels, h, w, data: vec![0.0; channels * h * w] }
    }

    #[inline]
    pub fn channels(&self) -> usize { self.channels }
    #[inline]
    pub fn h(&self) -> usize { self.h }
    #[inline]
    pub fn w(&self) -> usize { self.w }
    #[inline]
    pub fn data(&self) -> &[f64] { &self.data }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// View as a batch-1 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(1, self.channels, self.h, self.w, self.data.clone())
            .expect("image dims are consistent")
    }

    /// Clamp a batch-1 tensor into image range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.shape();
        if b != 1 {
            return Err(CoreError::Image(format!("expected batch 1 tensor, got batch {b}")));
        }
        Image::new(c, h, w, t.data().to_vec())
    }

    /// Luminance plane (BT.601 weights for RGB, identity for grayscale).
    pub fn luminance(&self) -> Tensor {
        let mut out = Tensor::zeros(1, 1, self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let v = if self.channels == 1 {
                    self.at(0, y, x)
                } else {
                    0.299 * self.at(0, y, x) + 0.587 * self.at(1, y, x) + 0.114 * self.at(2, y, x)
                };
                *out.at_mut(0, 0, y, x) = v;
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let to_byte = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let (w, h) = (self.w as u32, self.h as u32);
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_byte(v)).collect();
                let img = image::GrayImage::from_raw(w, h, buf)
                    .ok_or_else(|| CoreError::Image("gray buffer size mismatch".into()))?;
                img.save(path.as_ref()).map_err(|e| CoreError::Image(e.to_string()))
            }
            _ => {
                let mut buf = Vec::with_capacity(self.h * self.w * 3);
                for y in 0..self.h {
                    for x in 0..self.w {
                        for c in 0..3 {
                            buf.push(to_byte(self.at(c, y, x)));
                        }
                    }
                }
                let img = image::RgbImage::from_raw(w, h, buf)
                    .ok_or_else(|| CoreError::Image("rgb buffer size mismatch".into()))?;
                img.save(path.as_ref()).map_err(|e| CoreError::Image(e.to_string()))
            }
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let dyn_img = image::open(path.as_ref()).map_err(|e| CoreError::Image(e.to_string()))?;
        match dyn_img {
            image::DynamicImage::ImageLuma8(img) => {
                let (w, h) = (img.width() as usize, img.height() as usize);
                let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
                Image::new(1, h, w, data)
            }
            other => {
                let img = other.into_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let raw = img.into_raw();
                let mut data = vec![0.0; 3 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            data[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] as f64 / 255.0;
                        }
                    }
                }
                Image::new(3, h, w, data)
            }
        }
    }
}
