//! Planar float images and resampling.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Similarity};

/// Channel-planar float image; pixel `(x, y)` has its center at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Border {
    Constant(f32),
    Clamp,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 1,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rounds and clips channel 0 to an 8-bit grayscale image.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(0, x as usize, y as usize).round().clamp(0.0, 255.0) as u8])
        })
    }

    /// Loads any image file as `channels` planes (1 = luma, 3 = RGB) in [0, 255].
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Raster::new(w, h, channels);
        if channels == 1 {
            let g = img.to_luma8();
            out.data.iter_mut().zip(g.as_raw()).for_each(|(d, &s)| *d = s as f32);
        } else {
            let rgb = img.to_rgb8();
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..channels.min(3) {
                    out.data[c * w * h + i] = px.0[c] as f32;
                }
            }
        }
        Ok(out)
    }

    pub fn save_gray(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Bilinear sample of one channel at a continuous position.
    pub fn sample_bilinear(&self, c: usize, p: Point2, border: Border) -> f32 {
        let plane = self.plane(c);
        let (w, h) = (self.width as isize, self.height as isize);
        let x0 = p.x.floor();
        let y0 = p.y.floor();
        let fx = (p.x - x0) as f32;
        let fy = (p.y - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let fetch = |x: isize, y: isize| -> f32 {
            if x >= 0 && y >= 0 && x < w && y < h {
                plane[(y * w + x) as usize]
            } else {
                match border {
                    Border::Constant(v) => v,
                    Border::Clamp => plane[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize],
                }
            }
        };
        let top = fetch(x0, y0) * (1.0 - fx) + fetch(x0 + 1, y0) * fx;
        let bot = fetch(x0, y0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Output pixel `p` takes the input value at `t^-1(p)`.
    pub fn warp_similarity(&self, t: &Similarity, border: Border) -> Raster {
        let mut out = Raster::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = t.apply_inverse(Point2::new(x as f64, y as f64));
                for c in 0..self.channels {
                    let v = self.sample_bilinear(c, src, border);
                    out.data[(c * self.height + y) * self.width + x] = v;
                }
            }
        }
        out
    }

    /// Area-averaged downscale by an integer factor, or bilinear resize otherwise.
    pub fn resize(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Raster::new(width, height, self.channels);
        if self.width % width == 0 && self.height % height == 0 && self.width / width == self.height / height {
            let f = self.width / width;
            let norm = 1.0 / (f * f) as f32;
            for c in 0..self.channels {
                for y in 0..height {
                    for x in 0..width {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += self.get(c, x * f + dx, y * f + dy);
                            }
                        }
                        out.data[(c * height + y) * width + x] = acc * norm;
                    }
                }
            }
            return out;
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let p = Point2::new((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
                    out.data[(c * height + y) * width + x] = self.sample_bilinear(c, p, Border::Clamp);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_is_exact() {
        let mut r = Raster::new(5, 4, 2);
        r.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let t = Similarity::identity(Point2::new(2.0, 1.5));
        assert_eq!(r.warp_similarity(&t, Border::Constant(0.0)), r);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut r = Raster::new(2, 1, 1);
        r.data = vec![0.0, 10.0];
        assert_eq!(r.sample_bilinear(0, Point2::new(0.5, 0.0), Border::Clamp), 5.0);
        assert_eq!(r.sample_bilinear(0, Point2::new(-3.0, 0.0), Border::Constant(7.0)), 7.0);
    }

    #[test]
    fn integer_downscale_averages() {
        let mut r = Raster::new(4, 4, 1);
        r.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 2) as f32);
        let d = r.resize(2, 2);
        assert!(d.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
