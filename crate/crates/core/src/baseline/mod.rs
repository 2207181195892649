//! Iterative compressed-sensing baseline: proximal gradient on per-frame data
//! fidelity plus an ℓ1 penalty on temporal differences.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ComplexImage;
use crate::kspace::{regrid_reconstruct, KSpaceData, NormalOperator, Nudft};

const POWER_ITERATIONS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepRule {
    /// Constant step, in units of `1 / L` with `L` the gradient Lipschitz constant.
    Fixed { step: f64 },
    /// Each iteration starts from the previous step times `grow` and multiplies
    /// by `shrink` until the objective does not increase.
    Backtracking {
        initial: f64,
        shrink: f64,
        grow: f64,
        max_backtracks: usize,
    },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            initial: 1.0,
            shrink: 0.5,
            grow: 1.5,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    /// Temporal total-variation weight; the default was picked on the validation split.
    pub lambda: f64,
    pub n_iter: usize,
    pub step: StepRule,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            lambda: 30.0,
            n_iter: 100,
            step: StepRule::default(),
        }
    }
}

impl GraspConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda.is_finite() && self.lambda >= 0.0,
            InvalidArgument,
            "grasp.lambda must be finite and non-negative"
        );
        ensure!(self.n_iter >= 1, InvalidArgument, "grasp.n_iter must be at least 1");
        match self.step {
            StepRule::Fixed { step } => ensure!(
                step.is_finite() && step > 0.0,
                InvalidArgument,
                "grasp fixed step must be positive"
            ),
            StepRule::Backtracking {
                initial,
                shrink,
                grow,
                ..
            } => ensure!(
                initial > 0.0 && shrink > 0.0 && shrink < 1.0 && grow >= 1.0,
                InvalidArgument,
                "grasp backtracking needs initial > 0, 0 < shrink < 1 and grow >= 1"
            ),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraspResult {
    pub frames: Vec<ComplexImage>,
    /// Objective at the initial point, then after every iteration.
    pub objective: Vec<f64>,
    /// Step actually taken per iteration, in units of `1 / L`; zero when every trial was rejected.
    pub steps: Vec<f64>,
}

fn soft(d: Complex64, threshold: f64) -> Complex64 {
    let m = d.norm();
    if m <= threshold {
        Complex64::new(0.0, 0.0)
    } else {
        d * ((m - threshold) / m)
    }
}

/// Shrinks every temporal difference `x_{t+1} - x_t` in magnitude by
/// `threshold` (phase kept), then rebuilds the sequence with its temporal mean
/// unchanged. Threshold 0 and single frames are returned as is.
pub fn temporal_tv_prox(frames: &[Vec<Complex64>], threshold: f64) -> Vec<Vec<Complex64>> {
    let t = frames.len();
    if threshold <= 0.0 || t < 2 {
        return frames.to_vec();
    }
    let n = frames[0].len();
    let mut out = vec![vec![Complex64::new(0.0, 0.0); n]; t];
    for p in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut offsets = Vec::with_capacity(t);
        offsets.push(acc);
        for s in 0..t - 1 {
            acc += soft(frames[s + 1][p] - frames[s][p], threshold);
            offsets.push(acc);
        }
        let mean: Complex64 = frames.iter().map(|f| f[p]).sum::<Complex64>() / t as f64;
        let mean_off: Complex64 = offsets.iter().sum::<Complex64>() / t as f64;
        let base = mean - mean_off;
        for (o, off) in out.iter_mut().zip(&offsets) {
            o[p] = base + off;
        }
    }
    out
}

struct Frame {
    normal: NormalOperator,
    adjoint_data: Vec<Complex64>,
    data_energy: f64,
}

impl Frame {
    /// `‖E x − y‖² = xᴴ(N x) − 2 Re xᴴ(Eᴴ y) + ‖y‖²`, given `N x`.
    fn residual(&self, x: &[Complex64], nx: &[Complex64]) -> f64 {
        let mut quad = 0.0;
        let mut cross = 0.0;
        for ((xi, ni), bi) in x.iter().zip(nx).zip(&self.adjoint_data) {
            quad += (xi.conj() * ni).re;
            cross += (xi.conj() * bi).re;
        }
        (quad - 2.0 * cross + self.data_energy).max(0.0)
    }
}

fn tv(frames: &[Vec<Complex64>]) -> f64 {
    frames
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).norm()).sum::<f64>())
        .sum()
}

/// Minimizes `Σ_t ‖E_t x_t − y_t‖² + λ Σ_t ‖x_{t+1} − x_t‖₁` by proximal
/// gradient, starting from the regridded frames.
pub fn grasp_reconstruct(y_frames: &[KSpaceData], width: usize, height: usize, cfg: &GraspConfig) -> Result<GraspResult> {
    cfg.validate()?;
    ensure!(!y_frames.is_empty(), InvalidArgument, "grasp needs at least one frame");
    let ops: Vec<Frame> = y_frames
        .iter()
        .map(|y| -> Result<Frame> {
            let b = Nudft::for_trajectory(width, height, y.trajectory()).adjoint(y.samples(), None)?;
            Ok(Frame {
                normal: NormalOperator::new(width, height, y.trajectory().coords()),
                adjoint_data: b.into_values(),
                data_energy: y.samples().iter().map(|s| s.norm_sqr()).sum(),
            })
        })
        .collect::<Result<_>>()?;
    let lip = 2.0
        * ops
            .iter()
            .map(|f| f.normal.max_eigenvalue(POWER_ITERATIONS, 0x6a5b))
            .fold(0.0, f64::max);
    ensure!(lip > 0.0, InvalidArgument, "trajectories carry no samples");

    let mut x: Vec<Vec<Complex64>> = y_frames
        .iter()
        .map(|y| regrid_reconstruct(y, width, height).map(ComplexImage::into_values))
        .collect::<Result<_>>()?;
    let mut nx: Vec<Vec<Complex64>> = ops.iter().zip(&x).map(|(f, xi)| f.normal.apply(xi)).collect();
    let objective_of = |x: &[Vec<Complex64>], nx: &[Vec<Complex64>]| -> f64 {
        let data: f64 = ops.iter().zip(x).zip(nx).map(|((f, xi), ni)| f.residual(xi, ni)).sum();
        data + cfg.lambda * tv(x)
    };
    let mut obj = objective_of(&x, &nx);
    if !obj.is_finite() {
        return Err(Error::NonFinite("grasp objective at the initial point".into()));
    }
    let mut trace = vec![obj];
    let mut steps = Vec::with_capacity(cfg.n_iter);
    let mut step = match cfg.step {
        StepRule::Fixed { step } => step,
        StepRule::Backtracking { initial, .. } => initial,
    };

    for it in 0..cfg.n_iter {
        let grad: Vec<Vec<Complex64>> = ops
            .iter()
            .zip(&nx)
            .map(|(f, ni)| ni.iter().zip(&f.adjoint_data).map(|(n, b)| 2.0 * (n - b)).collect())
            .collect();
        let trial = |s: f64| -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>, f64) {
            let tau = s / lip;
            let moved: Vec<Vec<Complex64>> = x
                .iter()
                .zip(&grad)
                .map(|(xi, gi)| xi.iter().zip(gi).map(|(a, g)| a - tau * g).collect())
                .collect();
            let cand = temporal_tv_prox(&moved, 2.0 * tau * cfg.lambda);
            let ncand: Vec<Vec<Complex64>> = ops.iter().zip(&cand).map(|(f, c)| f.normal.apply(c)).collect();
            let o = objective_of(&cand, &ncand);
            (cand, ncand, o)
        };
        match cfg.step {
            StepRule::Fixed { step: s } => {
                let (cand, ncand, o) = trial(s);
                x = cand;
                nx = ncand;
                obj = o;
                steps.push(s);
            }
            StepRule::Backtracking {
                shrink,
                grow,
                max_backtracks,
                ..
            } => {
                let mut s = step * grow;
                let mut taken = 0.0;
                for _ in 0..=max_backtracks {
                    let (cand, ncand, o) = trial(s);
                    if !o.is_finite() {
                        return Err(Error::NonFinite(format!("grasp objective at iteration {}", it)));
                    }
                    if o <= obj {
                        x = cand;
                        nx = ncand;
                        obj = o;
                        taken = s;
                        break;
                    }
                    s *= shrink;
                }
                if taken > 0.0 {
                    step = taken;
                }
                steps.push(taken);
            }
        }
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("grasp objective at iteration {}", it)));
        }
        trace.push(obj);
    }
    let frames = x
        .into_iter()
        .map(|v| ComplexImage::from_values(width, height, v))
        .collect::<Result<_>>()?;
    Ok(GraspResult {
        frames,
        objective: trace,
        steps,
    })
}

/// Conjugate gradient on the normal equations `Eᴴ E x = Eᴴ y` with the direct
/// operator, started from `x0`.
pub fn cg_least_squares(y: &KSpaceData, width: usize, height: usize, x0: &ComplexImage, iterations: usize) -> Result<ComplexImage> {
    ensure!(
        x0.width() == width && x0.height() == height,
        DimensionMismatch,
        "start image {}x{} for a {}x{} problem",
        x0.width(),
        x0.height(),
        width,
        height
    );
    let op = Nudft::for_trajectory(width, height, y.trajectory());
    let b = op.adjoint(y.samples(), None)?.into_values();
    let mut x = x0.values().to_vec();
    let ax = op.normal_raw(&x);
    let mut r: Vec<Complex64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v.norm_sqr()).sum();
    let stop = 1e-30 * b.iter().map(|v| v.norm_sqr()).sum::<f64>();
    for _ in 0..iterations {
        if rs <= stop {
            break;
        }
        let ap = op.normal_raw(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| (a.conj() * b).re).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rs_new: f64 = r.iter().map(|v| v.norm_sqr()).sum();
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
    }
    ComplexImage::from_values(width, height, x)
}
