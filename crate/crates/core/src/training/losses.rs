use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, DiffTensor, Graph};
use crate::error::{ensure, Result};
use crate::fft::Fft2;

/// Probabilities fed to the logarithms are clamped to `[CLAMP, 1 - CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub image: f64,
    pub frequency: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 60.0,
            frequency: 30.0,
            perceptual: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("image", self.image), ("frequency", self.frequency), ("perceptual", self.perceptual)] {
            ensure!(v.is_finite() && v >= 0.0, InvalidArgument, "loss weight {} must be non-negative", n);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub imse: f64,
    pub fmse: f64,
    pub perceptual: f64,
    pub gen: f64,
}

/// `w_img·iMSE + w_freq·fMSE + w_perc·perc (+ GEN when the discriminator is used)`.
pub fn loss_total(parts: &LossParts, w: &LossWeights, use_discriminator: bool) -> f64 {
    let base = w.image * parts.imse + w.frequency * parts.fmse + w.perceptual * parts.perceptual;
    if use_discriminator {
        base + parts.gen
    } else {
        base
    }
}

/// `‖rec − gt‖ / ‖gt‖`, or its square when `squared` is set.
pub fn loss_imse(g: &mut Graph, rec: DiffTensor, gt: DiffTensor, squared: bool) -> Result<DiffTensor> {
    let gt_norm = g.value(gt).iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(gt_norm > 0.0, InvalidArgument, "image loss against an all-zero ground truth");
    let diff = g.sub(rec, gt)?;
    if squared {
        let s = g.sum_squares(diff);
        Ok(g.scale(s, 1.0 / (gt_norm * gt_norm)))
    } else {
        let n = g.l2_norm(diff);
        Ok(g.scale(n, 1.0 / gt_norm))
    }
}

struct FrequencyLoss {
    fft: Fft2,
}

impl FrequencyLoss {
    fn spectrum(&self, grid: &[f64]) -> Vec<Complex64> {
        let n = grid.len() / 2;
        let mut z: Vec<Complex64> = (0..n).map(|i| Complex64::new(grid[i], grid[n + i])).collect();
        self.fft.forward(&mut z);
        z
    }
}

impl CustomOp for FrequencyLoss {
    fn name(&self) -> &'static str {
        "frequency_loss"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.spectrum(inputs[0]);
        let b = self.spectrum(inputs[1]);
        let v = a.iter().zip(&b).map(|(p, q)| (p - q).norm_sqr()).sum();
        Ok((vec![1], vec![v]))
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = inputs[0].len() / 2;
        // d/dx Σ|F x − F y|² = 2 Fᴴ(F x − F y); the unnormalized inverse is Fᴴ.
        let mut r: Vec<Complex64> = self
            .spectrum(inputs[0])
            .iter()
            .zip(&self.spectrum(inputs[1]))
            .map(|(p, q)| 2.0 * grad[0] * (p - q))
            .collect();
        self.fft.inverse(&mut r);
        let mut gx = vec![0.0; 2 * n];
        for (i, v) in r.iter().enumerate() {
            gx[i] = v.re;
            gx[n + i] = v.im;
        }
        let gy = needs[1].then(|| gx.iter().map(|v| -v).collect());
        vec![needs[0].then_some(gx), gy]
    }
}

/// `‖DFT(rec) − DFT(gt)‖²` with the unnormalized 2-D DFT over `[2,H,W]` grids.
pub fn loss_fmse(g: &mut Graph, rec: DiffTensor, gt: DiffTensor) -> Result<DiffTensor> {
    ensure!(
        g.shape(rec) == g.shape(gt) && g.shape(rec).len() == 3 && g.shape(rec)[0] == 2,
        DimensionMismatch,
        "frequency loss needs matching [2,H,W] grids, got {:?} and {:?}",
        g.shape(rec),
        g.shape(gt)
    );
    let (h, w) = (g.shape(rec)[1], g.shape(rec)[2]);
    g.custom(&[rec, gt], Box::new(FrequencyLoss { fft: Fft2::new(w, h) }))
}

/// `−ln(clamp(d))` for a discriminator probability `d`.
pub fn loss_gen(g: &mut Graph, d: DiffTensor) -> Result<DiffTensor> {
    ensure!(g.value(d).len() == 1, DimensionMismatch, "adversarial loss needs a scalar, got {:?}", g.shape(d));
    Ok(g.neg_log_clamped(d, PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Frozen three-layer convolutional feature extractor with seeded random kernels.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    layers: Vec<(Vec<usize>, Vec<f64>, usize)>,
    slope: f64,
}

impl PerceptualNet {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(channels, 2, 1), (channels, channels, 2), (channels, channels, 1)];
        let layers = spec
            .iter()
            .map(|&(co, ci, stride)| {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let w = (0..co * ci * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect();
                (vec![co, ci, 3, 3], w, stride)
            })
            .collect();
        Self { layers, slope: 0.2 }
    }

    pub fn features(&self, g: &mut Graph, x: DiffTensor) -> Result<DiffTensor> {
        let mut f = x;
        for (i, (shape, w, stride)) in self.layers.iter().enumerate() {
            let k = g.constant(shape, w.clone())?;
            f = g.conv2d(f, k, None, *stride, 1)?;
            if i + 1 < self.layers.len() {
                f = g.leaky_relu(f, self.slope);
            }
        }
        Ok(f)
    }
}

/// Squared distance between frozen features of `rec` and `gt`.
pub fn loss_perceptual(g: &mut Graph, net: &PerceptualNet, rec: DiffTensor, gt: DiffTensor) -> Result<DiffTensor> {
    let a = net.features(g, rec)?;
    let b = net.features(g, gt)?;
    let d = g.sub(a, b)?;
    Ok(g.sum_squares(d))
}
