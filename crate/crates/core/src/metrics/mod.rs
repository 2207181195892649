//! Image-quality metrics on magnitude images and their report aggregation.

mod report;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use report::{aggregate_report, MetricItem, MetricReport, ReportCell, Stat, METRIC_NAMES, NORMALIZATION_NOTE};

use crate::error::{ensure, Error, Result};
use crate::image::ComplexImage;
use crate::simdata::Roi;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Side of a uniform sliding window; `None` uses global image statistics.
    pub ssim_window: Option<usize>,
    /// Report `‖rec − gt‖² / ‖gt‖²` instead of the unsquared ratio.
    pub squared_nmse: bool,
}

impl MetricOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.ssim_window {
            ensure!(w >= 2, InvalidArgument, "ssim window must be at least 2 pixels");
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    ensure!(
        a.len() == b.len() && !a.is_empty(),
        DimensionMismatch,
        "images hold {} and {} pixels",
        a.len(),
        b.len()
    );
    Ok(())
}

fn ssim_stats(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Structural similarity from global means, variances and covariance.
/// Inputs are assumed to have dynamic range 1.
pub fn ssim(rec: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(rec, gt)?;
    Ok(ssim_stats(rec, gt))
}

/// Mean of [`ssim`] over every `window x window` patch.
pub fn ssim_windowed(rec: &[f64], gt: &[f64], width: usize, height: usize, window: usize) -> Result<f64> {
    same_len(rec, gt)?;
    ensure!(
        rec.len() == width * height,
        DimensionMismatch,
        "{} pixels for {}x{}",
        rec.len(),
        width,
        height
    );
    ensure!(
        window >= 2 && window <= width && window <= height,
        InvalidArgument,
        "window {} for a {}x{} image",
        window,
        width,
        height
    );
    let mut total = 0.0;
    let mut count = 0usize;
    let mut pa = Vec::with_capacity(window * window);
    let mut pb = Vec::with_capacity(window * window);
    for y0 in 0..=height - window {
        for x0 in 0..=width - window {
            pa.clear();
            pb.clear();
            for y in y0..y0 + window {
                pa.extend_from_slice(&rec[y * width + x0..y * width + x0 + window]);
                pb.extend_from_slice(&gt[y * width + x0..y * width + x0 + window]);
            }
            total += ssim_stats(&pa, &pb);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10 log10(max(gt)² / MSE)`; an exact match gives `f64::INFINITY`.
pub fn psnr(rec: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(rec, gt)?;
    let mse = rec.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rec.len() as f64;
    let peak = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `‖rec − gt‖ / ‖gt‖`.
pub fn nmse(rec: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(rec, gt)?;
    let num: f64 = rec.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = gt.iter().map(|b| b * b).sum();
    ensure!(den > 0.0, InvalidArgument, "nmse against an all-zero ground truth");
    Ok((num / den).sqrt())
}

pub fn nmse_squared(rec: &[f64], gt: &[f64]) -> Result<f64> {
    nmse(rec, gt).map(|v| v * v)
}

/// Magnitudes of both images divided by the ground-truth maximum.
pub fn normalized_magnitudes(rec: &ComplexImage, gt: &ComplexImage) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(
        rec.same_shape(gt),
        DimensionMismatch,
        "reconstruction {}x{} vs ground truth {}x{}",
        rec.width(),
        rec.height(),
        gt.width(),
        gt.height()
    );
    let g = gt.magnitude();
    let peak = g.iter().copied().fold(0.0, f64::max);
    ensure!(peak > 0.0, InvalidArgument, "ground truth is identically zero");
    let r = rec.magnitude().into_iter().map(|v| v / peak).collect();
    Ok((r, g.into_iter().map(|v| v / peak).collect()))
}

fn crop(v: &[f64], width: usize, roi: &Roi) -> Vec<f64> {
    (roi.y..roi.y + roi.height)
        .flat_map(|y| v[y * width + roi.x..y * width + roi.x + roi.width].iter().copied())
        .collect()
}

/// `(ssim, nmse)` restricted to `roi`.
pub fn local_metrics(rec: &[f64], gt: &[f64], width: usize, height: usize, roi: &Roi) -> Result<(f64, f64)> {
    same_len(rec, gt)?;
    ensure!(
        rec.len() == width * height,
        DimensionMismatch,
        "{} pixels for {}x{}",
        rec.len(),
        width,
        height
    );
    ensure!(roi.fits(width, height), InvalidArgument, "roi {:?} outside a {}x{} image", roi, width, height);
    let (a, b) = (crop(rec, width, roi), crop(gt, width, roi));
    Ok((ssim(&a, &b)?, nmse(&a, &b)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub ssim: f64,
    pub psnr: f64,
    pub nmse: f64,
    pub local_ssim: f64,
    pub local_nmse: f64,
}

impl FrameMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "ssim" => Some(self.ssim),
            "psnr" => Some(self.psnr),
            "nmse" => Some(self.nmse),
            "local_ssim" => Some(self.local_ssim),
            "local_nmse" => Some(self.local_nmse),
            _ => None,
        }
    }
}

/// All metrics of one reconstructed frame after joint normalization by the ground-truth maximum.
pub fn evaluate_frame(rec: &ComplexImage, gt: &ComplexImage, roi: &Roi, opts: &MetricOptions) -> Result<FrameMetrics> {
    opts.validate()?;
    let (r, g) = normalized_magnitudes(rec, gt)?;
    let (w, h) = (gt.width(), gt.height());
    let ssim_v = match opts.ssim_window {
        Some(win) => ssim_windowed(&r, &g, w, h, win)?,
        None => ssim(&r, &g)?,
    };
    let (local_ssim, local_nmse) = local_metrics(&r, &g, w, h, roi)?;
    let sq = |v: f64| if opts.squared_nmse { v * v } else { v };
    Ok(FrameMetrics {
        ssim: ssim_v,
        psnr: psnr(&r, &g)?,
        nmse: sq(nmse(&r, &g)?),
        local_ssim,
        local_nmse: sq(local_nmse),
    })
}

/// 8-bit binary PGM of a magnitude image scaled so that `max` maps to 255.
pub fn write_pgm(path: &Path, magnitude: &[f64], width: usize, height: usize, max: f64) -> Result<()> {
    ensure!(
        magnitude.len() == width * height,
        DimensionMismatch,
        "{} pixels for {}x{}",
        magnitude.len(),
        width,
        height
    );
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(magnitude.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
