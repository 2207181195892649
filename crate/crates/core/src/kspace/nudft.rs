use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{KSpaceData, RadialTrajectory};
use crate::error::{ensure, Result};
use crate::image::ComplexImage;

/// Exact non-uniform DFT over an arbitrary coordinate set.
///
/// The 2-D phase factorises per sample, so the operator keeps one row of
/// `exp(-2πi kx (x - W/2))` and one of `exp(-2πi ky (y - H/2))` per sample and
/// never evaluates trig functions in the inner loop.
#[derive(Clone, Debug)]
pub struct Nudft {
    width: usize,
    height: usize,
    n_samples: usize,
    phase_x: Vec<Complex64>,
    phase_y: Vec<Complex64>,
}

impl Nudft {
    pub fn new(width: usize, height: usize, coords: &[[f64; 2]]) -> Self {
        let cx = (width / 2) as f64;
        let cy = (height / 2) as f64;
        let mut phase_x = Vec::with_capacity(coords.len() * width);
        let mut phase_y = Vec::with_capacity(coords.len() * height);
        for k in coords {
            phase_x.extend((0..width).map(|x| Complex64::from_polar(1.0, -2.0 * PI * k[0] * (x as f64 - cx))));
            phase_y.extend((0..height).map(|y| Complex64::from_polar(1.0, -2.0 * PI * k[1] * (y as f64 - cy))));
        }
        Self {
            width,
            height,
            n_samples: coords.len(),
            phase_x,
            phase_y,
        }
    }

    pub fn for_trajectory(width: usize, height: usize, traj: &RadialTrajectory) -> Self {
        Self::new(width, height, traj.coords())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn forward(&self, x: &ComplexImage) -> Result<Vec<Complex64>> {
        ensure!(
            x.width() == self.width && x.height() == self.height,
            DimensionMismatch,
            "image {}x{} for an operator on {}x{}",
            x.width(),
            x.height(),
            self.width,
            self.height
        );
        Ok(self.forward_raw(x.values()))
    }

    pub(crate) fn forward_raw(&self, x: &[Complex64]) -> Vec<Complex64> {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(self.n_samples);
        for m in 0..self.n_samples {
            let px = &self.phase_x[m * w..(m + 1) * w];
            let py = &self.phase_y[m * h..(m + 1) * h];
            let mut acc = Complex64::new(0.0, 0.0);
            for (row, &fy) in x.chunks_exact(w).zip(py) {
                let mut inner = Complex64::new(0.0, 0.0);
                for (&v, &fx) in row.iter().zip(px) {
                    inner += v * fx;
                }
                acc += inner * fy;
            }
            out.push(acc);
        }
        out
    }

    /// `E^H (W y)`; `weights = None` means `W = I`.
    pub fn adjoint(&self, y: &[Complex64], weights: Option<&[f64]>) -> Result<ComplexImage> {
        ensure!(
            y.len() == self.n_samples,
            DimensionMismatch,
            "{} samples for an operator with {} points",
            y.len(),
            self.n_samples
        );
        if let Some(w) = weights {
            ensure!(
                w.len() == self.n_samples,
                DimensionMismatch,
                "{} weights for {} samples",
                w.len(),
                self.n_samples
            );
            ensure!(
                w.iter().all(|&v| v >= 0.0 && v.is_finite()),
                InvalidArgument,
                "density weights must be finite and non-negative"
            );
        }
        let values = self.adjoint_raw(y, weights);
        ComplexImage::from_values(self.width, self.height, values)
    }

    pub(crate) fn adjoint_raw(&self, y: &[Complex64], weights: Option<&[f64]>) -> Vec<Complex64> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![Complex64::new(0.0, 0.0); w * h];
        for (m, &ym) in y.iter().enumerate() {
            let a = match weights {
                Some(wt) => ym * wt[m],
                None => ym,
            };
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            let px = &self.phase_x[m * w..(m + 1) * w];
            let py = &self.phase_y[m * h..(m + 1) * h];
            for (row, &fy) in out.chunks_exact_mut(w).zip(py) {
                let b = a * fy.conj();
                for (o, &fx) in row.iter_mut().zip(px) {
                    *o += b * fx.conj();
                }
            }
        }
        out
    }

    /// `E^H E x`, evaluated directly.
    pub fn normal_raw(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.adjoint_raw(&self.forward_raw(x), None)
    }
}

fn check_image_against(x: &ComplexImage, traj: &RadialTrajectory) -> Result<()> {
    ensure!(
        x.width() >= 2 && x.height() >= 2,
        DimensionMismatch,
        "image {}x{} too small",
        x.width(),
        x.height()
    );
    ensure!(!traj.is_empty(), DimensionMismatch, "empty trajectory");
    Ok(())
}

pub fn nudft_forward(x: &ComplexImage, traj: &RadialTrajectory) -> Result<KSpaceData> {
    check_image_against(x, traj)?;
    let op = Nudft::for_trajectory(x.width(), x.height(), traj);
    KSpaceData::new(op.forward(x)?, traj.clone())
}

pub fn nudft_adjoint(
    y: &KSpaceData,
    width: usize,
    height: usize,
    weights: Option<&[f64]>,
) -> Result<ComplexImage> {
    Nudft::for_trajectory(width, height, y.trajectory()).adjoint(y.samples(), weights)
}

/// Largest eigenvalue of `E^H E` (= σ_max(E)²) by power iteration from a seeded start.
pub fn max_normal_eigenvalue(op: &Nudft, iterations: usize, seed: u64) -> f64 {
    let n = op.width * op.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
        .collect();
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|z| *z /= norm);
        let av = op.normal_raw(&v);
        lambda = v.iter().zip(&av).map(|(a, b)| (a.conj() * b).re).sum();
        v = av;
    }
    lambda
}
