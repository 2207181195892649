use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{FrameMetrics, MetricOptions};
use crate::error::{ensure, Error, Result};

pub const METRIC_NAMES: [&str; 5] = ["ssim", "psnr", "nmse", "local_ssim", "local_nmse"];

pub const NORMALIZATION_NOTE: &str =
    "magnitude images; ground truth scaled to maximum 1 and the reconstruction scaled by the same factor";

/// Metrics of one reconstructed frame of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricItem {
    pub method: String,
    pub spokes: usize,
    /// Number of frames in the reconstructed sequence.
    pub frames: usize,
    pub sequence: String,
    pub frame: usize,
    pub metrics: FrameMetrics,
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.iter().any(|v| !v.is_finite()) {
            let all_inf = values.iter().all(|&v| v == f64::INFINITY);
            let mean = values.iter().sum::<f64>() / n;
            return Self {
                mean,
                std: if all_inf { 0.0 } else { f64::NAN },
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportCell {
    pub method: String,
    pub spokes: usize,
    pub frames: usize,
    pub count: usize,
    /// In [`METRIC_NAMES`] order.
    pub stats: Vec<(&'static str, Stat)>,
}

impl ReportCell {
    pub fn stat(&self, metric: &str) -> Option<Stat> {
        self.stats.iter().find(|(n, _)| *n == metric).map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub options: MetricOptions,
    /// Ordered by spokes, then method, then frame count.
    pub cells: Vec<ReportCell>,
    pub items: Vec<MetricItem>,
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn text(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

/// Groups items by (spokes, method, frames) and summarizes every metric.
pub fn aggregate_report(items: &[MetricItem], options: MetricOptions) -> Result<MetricReport> {
    ensure!(!items.is_empty(), InvalidArgument, "cannot aggregate an empty set of metrics");
    let mut groups: BTreeMap<(usize, String, usize), Vec<&MetricItem>> = BTreeMap::new();
    for it in items {
        groups.entry((it.spokes, it.method.clone(), it.frames)).or_default().push(it);
    }
    let cells = groups
        .into_iter()
        .map(|((spokes, method, frames), members)| {
            let stats = METRIC_NAMES
                .iter()
                .map(|&name| {
                    let vals: Vec<f64> = members.iter().map(|m| m.metrics.get(name).unwrap()).collect();
                    (name, Stat::of(&vals))
                })
                .collect();
            ReportCell {
                method,
                spokes,
                frames,
                count: members.len(),
                stats,
            }
        })
        .collect();
    let mut items = items.to_vec();
    items.sort_by(|a, b| {
        (a.spokes, &a.method, a.frames, &a.sequence, a.frame).cmp(&(b.spokes, &b.method, b.frames, &b.sequence, b.frame))
    });
    Ok(MetricReport { options, cells, items })
}

impl MetricReport {
    pub fn cell(&self, method: &str, spokes: usize, frames: usize) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.spokes == spokes && c.frames == frames)
    }

    fn conventions(&self) -> (String, String) {
        let ssim = match self.options.ssim_window {
            Some(w) => format!("windowed ({w}x{w} uniform)"),
            None => "global statistics".to_string(),
        };
        let nmse = if self.options.squared_nmse { "squared" } else { "unsquared" }.to_string();
        (ssim, nmse)
    }

    /// One row per (method, spokes, frames, metric).
    pub fn to_csv(&self) -> String {
        let (ssim, nmse) = self.conventions();
        let mut out = String::new();
        let _ = writeln!(out, "# normalization: {NORMALIZATION_NOTE}");
        let _ = writeln!(out, "# ssim: {ssim}; nmse: {nmse}");
        out.push_str("method,spokes,frames,metric,mean,std\n");
        for c in &self.cells {
            for (name, s) in &c.stats {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    c.method,
                    c.spokes,
                    c.frames,
                    name,
                    text(s.mean),
                    text(s.std)
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let (ssim, nmse) = self.conventions();
        let cells: Vec<Value> = self
            .cells
            .iter()
            .map(|c| {
                let stats: serde_json::Map<String, Value> = c
                    .stats
                    .iter()
                    .map(|(n, s)| (n.to_string(), json!({"mean": number(s.mean), "std": number(s.std)})))
                    .collect();
                json!({
                    "method": c.method,
                    "spokes": c.spokes,
                    "frames": c.frames,
                    "count": c.count,
                    "metrics": stats,
                })
            })
            .collect();
        let items: Vec<Value> = self
            .items
            .iter()
            .map(|it| {
                let m: serde_json::Map<String, Value> = METRIC_NAMES
                    .iter()
                    .map(|&n| (n.to_string(), number(it.metrics.get(n).unwrap())))
                    .collect();
                json!({
                    "method": it.method,
                    "spokes": it.spokes,
                    "frames": it.frames,
                    "sequence": it.sequence,
                    "frame": it.frame,
                    "metrics": m,
                })
            })
            .collect();
        json!({
            "normalization": NORMALIZATION_NOTE,
            "ssim": ssim,
            "nmse": nmse,
            "cells": cells,
            "items": items,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let js = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Json {
            path: js.clone(),
            source: e,
        })?;
        std::fs::write(&js, body + "\n").map_err(|e| Error::io(&js, e))
    }
}
