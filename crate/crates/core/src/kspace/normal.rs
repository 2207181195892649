use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fft::Fft2;

/// `E^H E` for a fixed coordinate set, applied as a circulant-embedded convolution.
///
/// `(E^H E x)[p] = Σ_q K(p - q) x[q]` with `K(d) = Σ_m exp(2πi k_m·d)` exactly, so
/// zero-padding to `2W x 2H` and multiplying spectra reproduces the direct
/// product up to FFT rounding. The kernel costs `O(M·4WH)` once per trajectory.
#[derive(Clone, Debug)]
pub struct NormalOperator {
    width: usize,
    height: usize,
    fft: Fft2,
    kernel_hat: Vec<Complex64>,
}

impl NormalOperator {
    pub fn new(width: usize, height: usize, coords: &[[f64; 2]]) -> Self {
        let (pw, ph) = (2 * width, 2 * height);
        let nx = 2 * width - 1;
        let ny = 2 * height - 1;
        let mut kernel = vec![Complex64::new(0.0, 0.0); ny * nx];
        let mut tx = vec![Complex64::new(0.0, 0.0); nx];
        let mut ty = vec![Complex64::new(0.0, 0.0); ny];
        for k in coords {
            for (i, t) in tx.iter_mut().enumerate() {
                let d = i as f64 - (width - 1) as f64;
                *t = Complex64::from_polar(1.0, 2.0 * PI * k[0] * d);
            }
            for (j, t) in ty.iter_mut().enumerate() {
                let d = j as f64 - (height - 1) as f64;
                *t = Complex64::from_polar(1.0, 2.0 * PI * k[1] * d);
            }
            for (row, &fy) in kernel.chunks_exact_mut(nx).zip(&ty) {
                for (o, &fx) in row.iter_mut().zip(&tx) {
                    *o += fx * fy;
                }
            }
        }
        let mut circ = vec![Complex64::new(0.0, 0.0); pw * ph];
        for j in 0..ny {
            let dy = j as isize - (height as isize - 1);
            let yy = dy.rem_euclid(ph as isize) as usize;
            for i in 0..nx {
                let dx = i as isize - (width as isize - 1);
                let xx = dx.rem_euclid(pw as isize) as usize;
                circ[yy * pw + xx] = kernel[j * nx + i];
            }
        }
        let fft = Fft2::new(pw, ph);
        fft.forward(&mut circ);
        let scale = 1.0 / (pw * ph) as f64;
        circ.iter_mut().for_each(|v| *v *= scale);
        Self {
            width,
            height,
            fft,
            kernel_hat: circ,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.width * self.height, "normal operator input size");
        let pw = 2 * self.width;
        let mut buf = vec![Complex64::new(0.0, 0.0); pw * 2 * self.height];
        for (y, row) in x.chunks_exact(self.width).enumerate() {
            buf[y * pw..y * pw + self.width].copy_from_slice(row);
        }
        self.fft.forward(&mut buf);
        buf.iter_mut().zip(&self.kernel_hat).for_each(|(b, k)| *b *= k);
        self.fft.inverse(&mut buf);
        let mut out = Vec::with_capacity(x.len());
        for y in 0..self.height {
            out.extend_from_slice(&buf[y * pw..y * pw + self.width]);
        }
        out
    }

    /// Largest eigenvalue (= σ_max(E)²) by power iteration from a seeded start.
    pub fn max_eigenvalue(&self, iterations: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<Complex64> = (0..self.width * self.height)
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|z| *z /= norm);
            let av = self.apply(&v);
            lambda = v.iter().zip(&av).map(|(a, b)| (a.conj() * b).re).sum();
            v = av;
        }
        lambda
    }

    /// Applies to a `[2, H, W]` real/imaginary channel grid.
    pub fn apply_channels(&self, grid: &[f64]) -> Vec<f64> {
        let n = self.width * self.height;
        assert_eq!(grid.len(), 2 * n, "normal operator channel grid size");
        let x: Vec<Complex64> = (0..n).map(|i| Complex64::new(grid[i], grid[n + i])).collect();
        let y = self.apply(&x);
        let mut out = vec![0.0; 2 * n];
        for (i, v) in y.iter().enumerate() {
            out[i] = v.re;
            out[n + i] = v.im;
        }
        out
    }
}
