//! Image values in `[0, 1]` and 8-bit PNG conversion.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `channels x height x width` image with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty image {c}x{h}x{w}")));
        }
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("image value {bad} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    /// Builds an RGB image from `f(channel, row, col)`, clamping into `[0, 1]`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Self(Tensor::from_fn(&[3, h, w], |i| {
            f(i / (h * w), (i / w) % h, i % w).clamp(0.0, 1.0)
        }))
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[c, h, w], value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }

    pub(crate) fn expect_rgb(&self) -> Result<()> {
        if self.channels() != 3 {
            return Err(Error::shape(format!(
                "expected a 3-channel image, got {} channels",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Copies the window `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let (c, ih, iw) = (self.channels(), self.height(), self.width());
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"
            )));
        }
        let src = self.0.data();
        Ok(Self(Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let y = (i / w) % h + top;
            let x = i % w + left;
            src[(ch * ih + y) * iw + x]
        })))
    }

    pub fn flip_horizontal(&self) -> Self {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let src = self.0.data();
        Self(Tensor::from_fn(&[c, h, w], |i| {
            let x = i % w;
            src[i - x + (w - 1 - x)]
        }))
    }

    /// Reads an 8-bit image file as RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Self(Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            raw[p * 3 + c] as f64 / 255.0
        }))
    }

    /// Quantizes to 8 bits with round-half-to-even.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        self.expect_rgb()?;
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        let mut buf = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            for c in 0..3 {
                buf.push(quantize(d[c * h * w + p]));
            }
        }
        ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, buf).ok_or_else(|| Error::shape("rgb buffer size"))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageTensor::new(Tensor::full(&[3, 2, 2], 1.5)).is_err());
        assert!(ImageTensor::new(Tensor::full(&[2, 2], 0.5)).is_err());
    }

    #[test]
    fn quantization_is_half_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn eight_bit_roundtrip_is_exact() {
        let img = ImageTensor::from_fn(4, 5, |c, y, x| ((c * 20 + y * 5 + x) * 3) as f64 / 255.0);
        let back = ImageTensor::from_rgb8(&img.to_rgb8().unwrap());
        assert_eq!(back.to_rgb8().unwrap(), img.to_rgb8().unwrap());
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ImageTensor::from_fn(3, 4, |c, y, x| (c + y * 4 + x) as f64 / 30.0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().tensor().data()[0], img.tensor().data()[3]);
    }
}
