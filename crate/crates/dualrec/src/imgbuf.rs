//! Float RGB image buffer with PNG and `.tsr` interchange.

use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// H×W×3 image, values in [0,1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageBuf { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn rmse(&self, other: &ImageBuf) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        let n = self.data.len() as f64;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        (s / n).sqrt() as f32
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&v| T::from_f64c(v as f64)).collect(),
        )
        .expect("consistent image buffer")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w, 3] => (*h, *w),
            s => {
                return Err(Error::Dimension(format!("image tensor must be [H,W,3], got {s:?}")))
            }
        };
        Ok(ImageBuf {
            width: w,
            height: h,
            data: t.data().iter().map(|&v| v.to_f64c() as f32).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for row in 0..self.height {
            for col in 0..self.width {
                let p = self.pixel(row, col);
                let bytes = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel(col as u32, row as u32, image::Rgb(bytes));
            }
        }
        img.save(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }

    /// Load an 8-bit PNG; alpha is composited over white.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?
            .to_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageBuf::new(w, h);
        for row in 0..h {
            for col in 0..w {
                let p = img.get_pixel(col as u32, row as u32).0;
                let a = p[3] as f32 / 255.0;
                let rgb = [
                    p[0] as f32 / 255.0 * a + (1.0 - a),
                    p[1] as f32 / 255.0 * a + (1.0 - a),
                    p[2] as f32 / 255.0 * a + (1.0 - a),
                ];
                out.set_pixel(row, col, rgb);
            }
        }
        Ok(out)
    }

    /// Resize to a square target with white padding (aspect preserved,
    /// bilinear).
    pub fn resize_square_white(&self, size: usize) -> ImageBuf {
        let scale = (size as f32 / self.width as f32).min(size as f32 / self.height as f32);
        let nw = (self.width as f32 * scale).round() as usize;
        let nh = (self.height as f32 * scale).round() as usize;
        let off_x = (size - nw) / 2;
        let off_y = (size - nh) / 2;
        let mut out = ImageBuf::filled(size, size, [1.0; 3]);
        for row in 0..nh {
            for col in 0..nw {
                let sy = (row as f32 + 0.5) / scale - 0.5;
                let sx = (col as f32 + 0.5) / scale - 0.5;
                out.set_pixel(row + off_y, col + off_x, self.sample_bilinear(sy, sx, [1.0; 3]));
            }
        }
        out
    }

    /// Bilinear sample at fractional pixel coordinates; out-of-range uses `fill`.
    pub fn sample_bilinear(&self, y: f32, x: f32, fill: [f32; 3]) -> [f32; 3] {
        if y < -0.5 || x < -0.5 || y > self.height as f32 - 0.5 || x > self.width as f32 - 0.5 {
            return fill;
        }
        let y0 = y.floor() as isize;
        let x0 = x.floor() as isize;
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let mut out = [0.0f32; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let yy = y0 + dy;
                let xx = x0 + dx;
                let p = if yy < 0
                    || xx < 0
                    || yy >= self.height as isize
                    || xx >= self.width as isize
                {
                    fill
                } else {
                    self.pixel(yy as usize, xx as usize)
                };
                for c in 0..3 {
                    out[c] += wy * wx * p[c];
                }
            }
        }
        out
    }
}
