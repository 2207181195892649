use crate::error::{ensure, Result};

/// `180° / φ` with `φ = (1 + √5) / 2`.
pub fn golden_angle_deg() -> f64 {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    180.0 / phi
}

/// Spokes needed to meet Nyquist at the k-space edge of an `n x n` image.
pub fn nyquist_spokes(n: usize) -> usize {
    (std::f64::consts::FRAC_PI_2 * n as f64).ceil() as usize
}

/// Per-spoke angles and per-sample coordinates of one frame's acquisition.
///
/// Sample `i` of a spoke lies at radius `(i - n_readout/2) / n_readout`, so the
/// spoke runs from `-0.5` up to (but excluding) `+0.5` and passes through the
/// origin at `i = n_readout/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialTrajectory {
    spoke_angles: Vec<f64>,
    n_readout: usize,
    start_index: u64,
    coords: Vec<[f64; 2]>,
}

impl RadialTrajectory {
    /// Rebuilds a trajectory from explicit spoke angles (degrees).
    pub fn from_angles(spoke_angles: Vec<f64>, n_readout: usize, start_index: u64) -> Result<Self> {
        ensure!(!spoke_angles.is_empty(), InvalidArgument, "trajectory needs at least one spoke");
        ensure!(
            n_readout >= 2 && n_readout % 2 == 0,
            InvalidArgument,
            "n_readout must be even and >= 2, got {}",
            n_readout
        );
        ensure!(
            spoke_angles.iter().all(|a| a.is_finite()),
            NonFinite,
            "spoke angle"
        );
        let mut coords = Vec::with_capacity(spoke_angles.len() * n_readout);
        for &deg in &spoke_angles {
            let (s, c) = deg.to_radians().sin_cos();
            for i in 0..n_readout {
                let r = (i as f64 - (n_readout / 2) as f64) / n_readout as f64;
                coords.push([r * c, r * s]);
            }
        }
        Ok(Self {
            spoke_angles,
            n_readout,
            start_index,
            coords,
        })
    }

    pub fn spoke_angles(&self) -> &[f64] {
        &self.spoke_angles
    }

    pub fn n_spokes(&self) -> usize {
        self.spoke_angles.len()
    }

    pub fn n_readout(&self) -> usize {
        self.n_readout
    }

    pub fn start_index(&self) -> u64 {
        self.start_index
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Total sample count, `n_spokes * n_readout`.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Index of the k = 0 sample within every spoke.
    pub fn center_index(&self) -> usize {
        self.n_readout / 2
    }
}

/// Golden-angle radial trajectory continuing the global spoke counter at `start_index`.
pub fn golden_angle_trajectory(
    n_spokes: usize,
    n_readout: usize,
    start_index: u64,
) -> Result<RadialTrajectory> {
    ensure!(n_spokes >= 1, InvalidArgument, "n_spokes must be >= 1");
    let ga = golden_angle_deg();
    let angles = (0..n_spokes as u64)
        .map(|j| ((start_index + j) as f64 * ga) % 180.0)
        .collect();
    RadialTrajectory::from_angles(angles, n_readout, start_index)
}
