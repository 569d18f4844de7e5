use std::path::Path;

use ndarray::{Array3, Axis, IxDyn};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// An `H x W x C` image. Values are nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(pub Array3<f64>);

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image(Array3::zeros((h, w, c)))
    }

    pub fn constant(h: usize, w: usize, c: usize, v: f64) -> Self {
        Image(Array3::from_elem((h, w, c), v))
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        Image(Array3::from_shape_fn((h, w, c), f))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height(), self.width(), self.channels()]
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        Image(self.0.mapv(|v| v.clamp(lo, hi)))
    }

    /// Round to the 8-bit grid a PNG round trip would produce.
    pub fn quantized(&self) -> Image {
        Image(self.0.mapv(|v| to_u8(v) as f64 / 255.0))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.shape(), other.shape());
        (&self.0 - &other.0).mapv(f64::abs).mean().unwrap_or(0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let c = c.min(self.channels() - 1);
                to_u8(self.0[[y as usize, x as usize, c]])
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        Image::from_fn(h as usize, w as usize, 3, |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Load any image and resize it (triangle filter) to `h x w`.
    pub fn load_resized(path: &Path, h: usize, w: usize) -> Result<Image> {
        let img = Image::load_png(path)?;
        if img.height() == h && img.width() == w {
            return Ok(img);
        }
        let resized = image::imageops::resize(
            &img.to_rgb8(),
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        );
        Ok(Image::from_rgb8(&resized))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stack images into an `(N, C, H, W)` tensor, mapping each value through `f`.
pub fn to_nchw(images: &[&Image], f: impl Fn(f64) -> f64) -> Tensor {
    let [h, w, c] = images[0].shape();
    let mut t = Tensor::zeros(IxDyn(&[images.len(), c, h, w]));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), [h, w, c], "images in a batch must share a shape");
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    t[[n, ch, y, x]] = f(img.0[[y, x, ch]]);
                }
            }
        }
    }
    t
}

/// Split an `(N, C, H, W)` tensor back into images, mapping values through `f`.
pub fn from_nchw(t: &Tensor, f: impl Fn(f64) -> f64) -> Vec<Image> {
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    t.axis_iter(Axis(0))
        .map(|s| Image::from_fn(h, w, c, |(y, x, ch)| f(s[[ch, y, x]])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_round_trip() {
        let a = Image::from_fn(4, 5, 3, |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let b = Image::constant(4, 5, 3, 0.5);
        let t = to_nchw(&[&a, &b], |v| v);
        assert_eq!(t.shape(), &[2, 3, 4, 5]);
        assert_eq!(t[[0, 2, 3, 1]], 312.0);
        let back = from_nchw(&t, |v| v);
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(8, 8, 3, |(y, x, c)| ((y * 8 + x) * 3 + c) as f64 / 200.0).quantized();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }
}
