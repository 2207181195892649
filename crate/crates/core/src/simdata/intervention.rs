use rand::Rng;
use serde::{Deserialize, Serialize};

use super::phantom::HeadGeometry;
use crate::error::{ensure, Error, Result};
use crate::image::ComplexImage;

/// Axis-aligned pixel box `[x, x+width) x [y, y+height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }
}

/// A straight signal-void feature advancing from `entry` along `direction`.
/// Coordinates are pixel indices (x to the right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionParams {
    pub entry: [f64; 2],
    pub direction: [f64; 2],
    pub tip_depth: Vec<f64>,
    pub width: f64,
    pub intensity_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub width: f64,
    pub intensity_scale: f64,
    pub initial_depth: [f64; 2],
    pub depth_step: [f64; 2],
    /// Maximum deviation of the insertion direction from the head center, in degrees.
    pub max_tilt_deg: f64,
    pub roi_margin: usize,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            width: 1.5,
            intensity_scale: 0.15,
            initial_depth: [3.0, 6.0],
            depth_step: [1.0, 3.0],
            max_tilt_deg: 20.0,
            roi_margin: 4,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1.0, InvalidArgument, "intervention.width must be at least 1 pixel");
        ensure!(
            (0.0..1.0).contains(&self.intensity_scale),
            InvalidArgument,
            "intervention.intensity_scale must lie in [0, 1)"
        );
        for (name, r) in [("initial_depth", self.initial_depth), ("depth_step", self.depth_step)] {
            ensure!(
                r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite(),
                InvalidArgument,
                "intervention.{} must be an ordered non-negative range",
                name
            );
        }
        ensure!(
            self.max_tilt_deg.is_finite() && self.max_tilt_deg >= 0.0,
            InvalidArgument,
            "intervention.max_tilt_deg must be non-negative"
        );
        Ok(())
    }
}

impl InterventionParams {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let norm = self.direction[0].hypot(self.direction[1]);
        ensure!(
            (norm - 1.0).abs() < 1e-9,
            InvalidArgument,
            "direction must be a unit vector, has norm {}",
            norm
        );
        ensure!(self.width >= 1.0, InvalidArgument, "feature width {} below 1 pixel", self.width);
        ensure!(
            (0.0..1.0).contains(&self.intensity_scale),
            InvalidArgument,
            "intensity scale {} outside [0, 1)",
            self.intensity_scale
        );
        ensure!(
            self.tip_depth.windows(2).all(|w| w[0] <= w[1]) && self.tip_depth.iter().all(|d| *d >= 0.0),
            InvalidArgument,
            "tip depths must be non-negative and non-decreasing"
        );
        let inside = |p: [f64; 2]| {
            p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (width - 1) as f64 && p[1] <= (height - 1) as f64
        };
        let last = self.tip_depth.last().copied().unwrap_or(0.0);
        let tip = self.tip(last);
        if !inside(self.entry) || !inside(tip) {
            return Err(Error::InvalidArgument(format!(
                "feature path {:?} -> {:?} leaves the {}x{} image",
                self.entry, tip, width, height
            )));
        }
        Ok(())
    }

    /// Whether the entry and final tip stay at least `margin` pixels inside the image.
    pub fn path_inside(&self, width: usize, height: usize, margin: f64) -> bool {
        let last = self.tip(self.tip_depth.last().copied().unwrap_or(0.0));
        let (wx, hy) = (width as f64 - 1.0 - margin, height as f64 - 1.0 - margin);
        [self.entry, last]
            .iter()
            .all(|q| q[0] >= margin && q[1] >= margin && q[0] <= wx && q[1] <= hy)
    }

    pub fn tip(&self, depth: f64) -> [f64; 2] {
        [
            self.entry[0] + depth * self.direction[0],
            self.entry[1] + depth * self.direction[1],
        ]
    }

    /// Fraction of pixel `(x, y)` covered by the feature at `depth`: one inside
    /// the core, falling linearly to zero over one pixel at the edge.
    pub fn coverage(&self, x: f64, y: f64, depth: f64) -> f64 {
        if depth <= 0.0 {
            return 0.0;
        }
        let (px, py) = (x - self.entry[0], y - self.entry[1]);
        let s = (px * self.direction[0] + py * self.direction[1]).clamp(0.0, depth);
        let dist = (px - s * self.direction[0]).hypot(py - s * self.direction[1]);
        (0.5 * self.width + 0.5 - dist).clamp(0.0, 1.0)
    }

    /// Tight box around the full path, dilated by half the width plus `margin`, clipped to the image.
    pub fn roi(&self, width: usize, height: usize, margin: usize) -> Roi {
        let depth = self.tip_depth.last().copied().unwrap_or(0.0);
        let tip = self.tip(depth);
        let pad = (0.5 * self.width + 0.5).ceil() + margin as f64;
        let x0 = (self.entry[0].min(tip[0]) - pad).floor().max(0.0) as usize;
        let y0 = (self.entry[1].min(tip[1]) - pad).floor().max(0.0) as usize;
        let x1 = ((self.entry[0].max(tip[0]) + pad).ceil() as usize).min(width - 1);
        let y1 = ((self.entry[1].max(tip[1]) + pad).ceil() as usize).min(height - 1);
        Roi {
            x: x0,
            y: y0,
            width: x1 - x0 + 1,
            height: y1 - y0 + 1,
        }
    }
}

/// `ref` with the frame-`t` feature imprinted: covered pixels are scaled
/// towards `intensity_scale` in proportion to their coverage.
pub fn render_intervention_frame(reference: &ComplexImage, params: &InterventionParams, t: usize) -> Result<ComplexImage> {
    ensure!(
        t < params.tip_depth.len(),
        InvalidArgument,
        "frame {} requested, {} depths defined",
        t,
        params.tip_depth.len()
    );
    params.validate(reference.width(), reference.height())?;
    let depth = params.tip_depth[t];
    let mut out = reference.clone();
    if depth <= 0.0 {
        return Ok(out);
    }
    for y in 0..reference.height() {
        for x in 0..reference.width() {
            let c = params.coverage(x as f64, y as f64, depth);
            if c > 0.0 {
                let v = reference.get(x, y);
                out.set(x, y, v * ((1.0 - c) + c * params.intensity_scale));
            }
        }
    }
    Ok(out)
}

/// Draws an insertion path entering the brain boundary and heading roughly
/// towards its center.
pub(crate) fn sample_intervention<R: Rng>(
    rng: &mut R,
    head: &HeadGeometry,
    size: usize,
    frames: usize,
    cfg: &InterventionConfig,
) -> Result<InterventionParams> {
    let r = size as f64 / 2.0;
    for _ in 0..16 {
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let b = &head.brain;
        let (s, c) = b.angle.sin_cos();
        let ex = 0.85 * b.a * phi.cos();
        let ey = 0.85 * b.b * phi.sin();
        let entry = [b.cx + ex * c - ey * s + r, b.cy + ex * s + ey * c + r];
        let tilt = rng.gen_range(-cfg.max_tilt_deg..=cfg.max_tilt_deg).to_radians();
        let inward = (b.cy + r - entry[1]).atan2(b.cx + r - entry[0]) + tilt;
        let direction = [inward.cos(), inward.sin()];
        let mut depth = rng.gen_range(cfg.initial_depth[0]..=cfg.initial_depth[1]);
        let mut tip_depth = Vec::with_capacity(frames);
        for t in 0..frames {
            if t > 0 {
                depth += rng.gen_range(cfg.depth_step[0]..=cfg.depth_step[1]);
            }
            tip_depth.push(depth);
        }
        let p = InterventionParams {
            entry,
            direction,
            tip_depth,
            width: cfg.width,
            intensity_scale: cfg.intensity_scale,
        };
        if p.path_inside(size, size, 0.5 * cfg.width + 1.0) {
            return Ok(p);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place a {}-frame feature path inside a {}x{} image",
        frames, size, size
    )))
}
