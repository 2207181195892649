//! Golden-angle radial sampling and the exact non-uniform Fourier encoding.
//!
//! Coordinates are in cycles/pixel. Image pixel `(x, y)` sits at the centered
//! position `(x - W/2, y - H/2)`, so the forward operator is
//! `y[m] = Σ_p x[p] exp(-2πi k_m·p)`.

mod density;
mod io;
mod normal;
mod nudft;
mod trajectory;

pub use density::{density_compensation, regrid_reconstruct};
pub use io::{read_kspace, write_kspace, KSPACE_MAGIC};
pub use normal::NormalOperator;
pub use nudft::{max_normal_eigenvalue, nudft_adjoint, nudft_forward, Nudft};
pub use trajectory::{golden_angle_deg, golden_angle_trajectory, nyquist_spokes, RadialTrajectory};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};

/// Samples acquired along one frame's trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    samples: Vec<Complex64>,
    trajectory: RadialTrajectory,
}

impl KSpaceData {
    pub fn new(samples: Vec<Complex64>, trajectory: RadialTrajectory) -> Result<Self> {
        ensure!(
            samples.len() == trajectory.len(),
            DimensionMismatch,
            "{} samples for a trajectory of {} points",
            samples.len(),
            trajectory.len()
        );
        ensure!(
            samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()),
            NonFinite,
            "k-space samples"
        );
        Ok(Self {
            samples,
            trajectory,
        })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Complex64] {
        &mut self.samples
    }

    pub fn trajectory(&self) -> &RadialTrajectory {
        &self.trajectory
    }

    pub fn norm(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Adds i.i.d. circular complex Gaussian noise with `E|n|² = std²`.
    pub fn add_noise<R: Rng>(&mut self, std: f64, rng: &mut R) {
        if std <= 0.0 {
            return;
        }
        let s = std / std::f64::consts::SQRT_2;
        for v in &mut self.samples {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(s * re, s * im);
        }
    }
}
