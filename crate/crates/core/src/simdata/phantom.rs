use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::ComplexImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Logistic edge scale in pixels.
    pub edge_width: f64,
    pub min_structures: usize,
    pub max_structures: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            edge_width: 1.5,
            min_structures: 4,
            max_structures: 8,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.edge_width.is_finite() && self.edge_width > 0.0,
            InvalidArgument,
            "phantom.edge_width must be positive"
        );
        ensure!(
            self.min_structures <= self.max_structures,
            InvalidArgument,
            "phantom.min_structures exceeds max_structures"
        );
        Ok(())
    }
}

/// Ellipse in centered pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Soft indicator in [0, 1] with a logistic edge.
    fn mask(&self, x: f64, y: f64, edge: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        let rho = ((xr / self.a).powi(2) + (yr / self.b).powi(2)).sqrt();
        let d = (rho - 1.0) * self.a.min(self.b);
        1.0 / (1.0 + (d / (0.5 * edge)).exp())
    }
}

/// Geometry of a generated head, reused to place the intervention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadGeometry {
    pub brain: Ellipse,
}

pub(crate) fn phantom_with_geometry(seed: u64, size: usize, cfg: &PhantomConfig) -> Result<(ComplexImage, HeadGeometry)> {
    ensure!(size >= 8, InvalidArgument, "phantom size {} is too small", size);
    ensure!(size % 2 == 0, InvalidArgument, "phantom size must be even, got {}", size);
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = size as f64 / 2.0;
    let head = Ellipse {
        cx: rng.gen_range(-0.03..0.03) * r,
        cy: rng.gen_range(-0.03..0.03) * r,
        a: rng.gen_range(0.66..0.74) * r,
        b: rng.gen_range(0.82..0.90) * r,
        angle: rng.gen_range(-0.1..0.1),
    };
    let scalp = rng.gen_range(0.8..1.0);
    let brain = Ellipse {
        a: head.a - rng.gen_range(0.06..0.1) * r,
        b: head.b - rng.gen_range(0.06..0.1) * r,
        ..head
    };
    let tissue = rng.gen_range(0.35..0.5);
    let n_struct = rng.gen_range(cfg.min_structures..=cfg.max_structures);
    let mut structures = Vec::with_capacity(n_struct);
    for _ in 0..n_struct {
        let rad = rng.gen_range(0.0..0.6f64).sqrt() * 0.8;
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let e = Ellipse {
            cx: brain.cx + rad * brain.a * phi.cos(),
            cy: brain.cy + rad * brain.b * phi.sin(),
            a: rng.gen_range(0.06..0.22) * r,
            b: rng.gen_range(0.06..0.22) * r,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        };
        structures.push((e, rng.gen_range(0.05..1.0)));
    }

    let edge = cfg.edge_width;
    let mut img = ComplexImage::zeros(size, size);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 - r, yi as f64 - r);
            let mut v = scalp * head.mask(x, y, edge);
            let m = brain.mask(x, y, edge);
            v = v * (1.0 - m) + tissue * m;
            for (e, level) in &structures {
                let m = e.mask(x, y, edge) * brain.mask(x, y, edge);
                v = v * (1.0 - m) + level * m;
            }
            img.set(xi, yi, num_complex::Complex64::new(v.clamp(0.0, 1.0), 0.0));
        }
    }
    Ok((img, HeadGeometry { brain }))
}

/// Deterministic ellipse head phantom with randomized internal structures.
///
/// Real-valued, magnitudes in [0, 1]; `size` must be even.
pub fn generate_reference_phantom(seed: u64, size: usize) -> Result<ComplexImage> {
    generate_reference_phantom_with(seed, size, &PhantomConfig::default())
}

pub fn generate_reference_phantom_with(seed: u64, size: usize, cfg: &PhantomConfig) -> Result<ComplexImage> {
    phantom_with_geometry(seed, size, cfg).map(|(img, _)| img)
}
