//! Single-channel images with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer does not match {height}x{width}");
        Self { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        (self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64) as f32
    }

    pub fn clamp01(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Bilinear sample at continuous pixel coordinates; outside reads as 0.
    pub fn sample_bilinear(&self, y: f32, x: f32) -> f32 {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |yy: isize, xx: isize| -> f32 {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                0.0
            } else {
                self.pixels[yy as usize * self.width + xx as usize]
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Quantizes to 8 bits (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_integer_coordinates_is_exact() {
        let img = Image::from_fn(3, 4, |y, x| (y * 4 + x) as f32 / 12.0);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(img.sample_bilinear(y as f32, x as f32), img.get(y, x));
            }
        }
        assert_eq!(img.sample_bilinear(-1.0, 0.0), 0.0);
        let mid = img.sample_bilinear(0.5, 0.5);
        let expect = (img.get(0, 0) + img.get(0, 1) + img.get(1, 0) + img.get(1, 1)) / 4.0;
        assert!((mid - expect).abs() < 1e-6);
    }

    #[test]
    fn quantization_error_is_within_half_step() {
        let img = Image::from_fn(5, 5, |y, x| ((y * 5 + x) as f32 * 0.0413).fract());
        let back = Image::from_u8(5, 5, &img.to_u8());
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
