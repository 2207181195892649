use std::f64::consts::PI;

use num_complex::Complex64;

use super::{KSpaceData, Nudft, RadialTrajectory};
use crate::error::Result;
use crate::image::ComplexImage;

/// Ramp density compensation for a radial trajectory.
///
/// Each sample gets the polar area element `|k| Δk (π / n_spokes)`; the k = 0
/// sample of each spoke gets the half-bin disc share `π Δk² / (4 n_spokes)`.
/// The whole set is then rescaled so that regridding a constant `width x height`
/// image returns mean intensity exactly 1.
pub fn density_compensation(traj: &RadialTrajectory, width: usize, height: usize) -> Vec<f64> {
    let dk = 1.0 / traj.n_readout() as f64;
    let dtheta = PI / traj.n_spokes() as f64;
    let center = traj.center_index();
    let mut w: Vec<f64> = traj
        .coords()
        .iter()
        .enumerate()
        .map(|(m, k)| {
            if m % traj.n_readout() == center {
                dtheta * dk * dk / 4.0
            } else {
                (k[0] * k[0] + k[1] * k[1]).sqrt() * dk * dtheta
            }
        })
        .collect();

    // mean of E^H(W E 1) = (1/N) Σ_m w_m |D_x(kx_m) D_y(ky_m)|², D the Dirichlet sum
    let n = (width * height) as f64;
    let dirichlet = |k: f64, len: usize| -> f64 {
        let c = (len / 2) as f64;
        (0..len)
            .map(|p| Complex64::from_polar(1.0, -2.0 * PI * k * (p as f64 - c)))
            .sum::<Complex64>()
            .norm_sqr()
    };
    let mean: f64 = traj
        .coords()
        .iter()
        .zip(&w)
        .map(|(k, wm)| wm * dirichlet(k[0], width) * dirichlet(k[1], height))
        .sum::<f64>()
        / n;
    if mean > 0.0 {
        w.iter_mut().for_each(|v| *v /= mean);
    }
    w
}

/// Density-compensated adjoint reconstruction `E^H (W y)`.
pub fn regrid_reconstruct(y: &KSpaceData, width: usize, height: usize) -> Result<ComplexImage> {
    let w = density_compensation(y.trajectory(), width, height);
    Nudft::for_trajectory(width, height, y.trajectory()).adjoint(y.samples(), Some(&w))
}
