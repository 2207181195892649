use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FrameSequence, InterventionParams, Roi};
use crate::error::{ensure, Error, Result};
use crate::image::ComplexImage;

const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub max_shift_px: i64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 10.0,
            max_shift_px: 4,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0,
            InvalidArgument,
            "augment.max_rotation_deg must be non-negative"
        );
        ensure!(self.max_shift_px >= 0, InvalidArgument, "augment.max_shift_px must be non-negative");
        Ok(())
    }
}

/// Rotation about the pixel-grid center followed by an integer shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub angle_rad: f64,
    pub shift: [i64; 2],
    center: [f64; 2],
}

impl RigidTransform {
    pub fn new(angle_rad: f64, shift: [i64; 2], width: usize, height: usize) -> Self {
        Self {
            angle_rad,
            shift,
            center: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle_rad.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [
            c * dx - s * dy + self.center[0] + self.shift[0] as f64,
            s * dx + c * dy + self.center[1] + self.shift[1] as f64,
        ]
    }

    fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle_rad.sin_cos();
        let dx = q[0] - self.center[0] - self.shift[0] as f64;
        let dy = q[1] - self.center[1] - self.shift[1] as f64;
        [c * dx + s * dy + self.center[0], -s * dx + c * dy + self.center[1]]
    }

    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle_rad.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    /// Bilinear resampling; samples falling outside the source read as zero.
    pub fn warp(&self, img: &ComplexImage) -> ComplexImage {
        let (w, h) = (img.width(), img.height());
        let at = |x: i64, y: i64| -> Complex64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                Complex64::new(0.0, 0.0)
            } else {
                img.get(x as usize, y as usize)
            }
        };
        let mut out = ComplexImage::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = self.invert([x as f64, y as f64]);
                let (fx, fy) = (p[0].floor(), p[1].floor());
                let (ax, ay) = (p[0] - fx, p[1] - fy);
                let (ix, iy) = (fx as i64, fy as i64);
                let v = at(ix, iy) * ((1.0 - ax) * (1.0 - ay))
                    + at(ix + 1, iy) * (ax * (1.0 - ay))
                    + at(ix, iy + 1) * ((1.0 - ax) * ay)
                    + at(ix + 1, iy + 1) * (ax * ay);
                out.set(x, y, v);
            }
        }
        out
    }

    /// Bounding box of the transformed box, padded by one pixel for interpolation
    /// spread and clipped to the image. `None` if nothing of it remains inside.
    pub fn map_roi(&self, roi: &Roi, width: usize, height: usize) -> Option<Roi> {
        let (x0, y0) = (roi.x as f64 - 0.5, roi.y as f64 - 0.5);
        let (x1, y1) = (x0 + roi.width as f64, y0 + roi.height as f64);
        let corners = [[x0, y0], [x1, y0], [x0, y1], [x1, y1]].map(|p| self.apply(p));
        let min_x = corners.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let px0 = ((min_x + 0.5).floor() - 1.0).max(0.0);
        let py0 = ((min_y + 0.5).floor() - 1.0).max(0.0);
        let px1 = ((max_x - 0.5).ceil() + 1.0).min((width - 1) as f64);
        let py1 = ((max_y - 0.5).ceil() + 1.0).min((height - 1) as f64);
        if px0 > px1 || py0 > py1 {
            return None;
        }
        Some(Roi {
            x: px0 as usize,
            y: py0 as usize,
            width: (px1 - px0) as usize + 1,
            height: (py1 - py0) as usize + 1,
        })
    }
}

/// Applies one random rigid transform to the reference, every frame, the ROI
/// and the feature path. Transforms that would push the feature path out of
/// the image are redrawn.
pub fn augment_sequence(seq: &FrameSequence, seed: u64) -> Result<FrameSequence> {
    augment_sequence_with(seq, seed, &AugmentConfig::default())
}

pub fn augment_sequence_with(seq: &FrameSequence, seed: u64, cfg: &AugmentConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    if !cfg.enabled || (cfg.max_rotation_deg == 0.0 && cfg.max_shift_px == 0) {
        return Ok(seq.clone());
    }
    let (w, h) = (seq.reference.width(), seq.reference.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rot = cfg.max_rotation_deg.to_radians();
    for _ in 0..MAX_ATTEMPTS {
        let angle = if max_rot > 0.0 { rng.gen_range(-max_rot..=max_rot) } else { 0.0 };
        let s = cfg.max_shift_px;
        let shift = [rng.gen_range(-s..=s), rng.gen_range(-s..=s)];
        let tf = RigidTransform::new(angle, shift, w, h);
        let params = InterventionParams {
            entry: tf.apply(seq.params.entry),
            direction: tf.rotate(seq.params.direction),
            ..seq.params.clone()
        };
        if !params.path_inside(w, h, 0.5 * params.width) {
            continue;
        }
        let Some(roi) = tf.map_roi(&seq.roi, w, h) else {
            continue;
        };
        return Ok(FrameSequence {
            reference: tf.warp(&seq.reference),
            frames: seq.frames.iter().map(|f| tf.warp(f)).collect(),
            roi,
            params,
            seed: seq.seed,
        });
    }
    Err(Error::InvalidArgument(format!(
        "no admissible augmentation found in {} attempts",
        MAX_ATTEMPTS
    )))
}
