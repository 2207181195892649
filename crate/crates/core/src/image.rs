use num_complex::Complex64;

use crate::error::{ensure, Result};

/// A 2-D complex image stored row-major (`values[y * width + x]`).
///
/// Pixel `(x, y)` sits at the centered coordinate `(x - width/2, y - height/2)`
/// for the Fourier operators.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    width: usize,
    height: usize,
    values: Vec<Complex64>,
}

impl ComplexImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![Complex64::new(0.0, 0.0); width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<Complex64>) -> Result<Self> {
        ensure!(
            values.len() == width * height,
            DimensionMismatch,
            "{} values for a {}x{} image",
            values.len(),
            width,
            height
        );
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_real(width: usize, height: usize, re: &[f64]) -> Result<Self> {
        Self::from_values(
            width,
            height,
            re.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    /// Builds an image from a `[2, H, W]` channel grid (real plane, then imaginary plane).
    pub fn from_channels(width: usize, height: usize, grid: &[f64]) -> Result<Self> {
        let n = width * height;
        ensure!(
            grid.len() == 2 * n,
            DimensionMismatch,
            "{} channel values for a 2x{}x{} grid",
            grid.len(),
            height,
            width
        );
        let values = (0..n)
            .map(|i| Complex64::new(grid[i], grid[n + i]))
            .collect();
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Flattens into a `[2, H, W]` grid: real plane followed by imaginary plane.
    pub fn to_channels(&self) -> Vec<f64> {
        let n = self.values.len();
        let mut out = vec![0.0; 2 * n];
        for (i, v) in self.values.iter().enumerate() {
            out[i] = v.re;
            out[n + i] = v.im;
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Complex64) {
        self.values[y * self.width + x] = v;
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn same_shape(&self, other: &ComplexImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `‖self - other‖₂ / ‖other‖₂`.
    pub fn nmse_to(&self, reference: &ComplexImage) -> f64 {
        let num: f64 = self
            .values
            .iter()
            .zip(&reference.values)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        (num / reference.values.iter().map(|v| v.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> ComplexImage {
        ComplexImage {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Copy of the rectangle `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ComplexImage> {
        ensure!(
            x0 + w <= self.width && y0 + h <= self.height,
            InvalidArgument,
            "crop {}x{}+{}+{} outside {}x{} image",
            w,
            h,
            x0,
            y0,
            self.width,
            self.height
        );
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(ComplexImage {
            width: w,
            height: h,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mapping_is_lossless() {
        let vals: Vec<Complex64> = (0..12)
            .map(|i| Complex64::new(i as f64 * 0.5 - 1.0, (i * i) as f64 * 1e-3))
            .collect();
        let img = ComplexImage::from_values(4, 3, vals).unwrap();
        let back = ComplexImage::from_channels(4, 3, &img.to_channels()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn crop_rejects_out_of_bounds() {
        let img = ComplexImage::zeros(4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().len(), 9);
    }
}
