//! Planar RGB images and PNG conversion.

use std::path::Path;

use eclf_nn::{Real, Tensor};

use crate::error::{EclfError, Result};

/// An RGB image stored channel-planar (`3 x H x W`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Rounds to the nearest 8-bit level so images survive PNG round trips unchanged.
pub fn quantize(v: f64) -> f32 {
    level_to_f32((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn level_to_f32(level: u8) -> f32 {
    level as f32 / 255.0
}

impl Image {
    pub fn black(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let hw = self.pixels();
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * hw + i] = v;
        }
    }

    /// Rec. 601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let hw = self.pixels();
        (0..hw)
            .map(|i| 0.299 * self.data[i] as f64 + 0.587 * self.data[hw + i] as f64 + 0.114 * self.data[2 * hw + i] as f64)
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        let l = self.luminance();
        l.iter().sum::<f64>() / l.len() as f64
    }

    /// Builds from an `[3, H, W]` slice (one row of a batch tensor), clamping to `[0, 1]`.
    pub fn from_planar<T: Real>(height: usize, width: usize, data: &[T]) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(EclfError::Invalid(format!(
                "image of {height}x{width}x3 needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data: data.iter().map(|v| v.as_f64().clamp(0.0, 1.0) as f32).collect(),
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let hw = self.pixels();
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let px = |c: usize| (self.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::black(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(y as usize, x as usize, p.0.map(level_to_f32));
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| EclfError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Decodes a PNG, resizing to `size x size` when needed.
    pub fn load_png(path: &Path, size: Option<usize>) -> Result<Self> {
        let img = image::open(path).map_err(|e| EclfError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut rgb = img.to_rgb8();
        if let Some(s) = size {
            if rgb.width() as usize != s || rgb.height() as usize != s {
                rgb = image::imageops::resize(&rgb, s as u32, s as u32, image::imageops::FilterType::Triangle);
            }
        }
        Ok(Image::from_rgb8(&rgb))
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn stack<'a, T: Real>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(EclfError::Invalid(format!(
                    "cannot stack a {}x{} image with {}x{} images",
                    img.height, img.width, d.0, d.1
                )))
            }
            _ => {}
        }
        data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| EclfError::Invalid("cannot stack zero images".into()))?;
    Ok(Tensor::new(vec![n, 3, h, w], data)?)
}

/// Lays frames out left to right with a one-pixel black gutter.
pub fn strip(frames: &[Image]) -> Result<Image> {
    let first = frames.first().ok_or_else(|| EclfError::Invalid("empty strip".into()))?;
    let (h, w) = (first.height, first.width);
    let total_w = frames.len() * w + frames.len().saturating_sub(1);
    let mut out = Image::black(h, total_w);
    for (f, frame) in frames.iter().enumerate() {
        if (frame.height, frame.width) != (h, w) {
            return Err(EclfError::Invalid("strip frames differ in size".into()));
        }
        let x0 = f * (w + 1);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x0 + x, [frame.get(0, y, x), frame.get(1, y, x), frame.get(2, y, x)]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::black(5, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = quantize((i as f64 * 0.037) % 1.0);
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p, None).unwrap(), img);
    }

    #[test]
    fn stack_layout_is_planar() {
        let mut img = Image::black(2, 2);
        img.set(1, 0, [0.5, 0.25, 1.0]);
        let t: Tensor<f32> = stack([&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert_eq!(t.data()[2], 0.5);
        assert_eq!(t.data()[6], 0.25);
        assert_eq!(t.data()[10], 1.0);
    }
}
