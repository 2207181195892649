use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{DiffTensor, Graph, ParamStore};
use crate::error::{ensure, Result};

/// Three stride-2 convolutions, global average pooling, a linear logit and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    store: ParamStore,
    channels: usize,
}

pub const DISCRIMINATOR_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        ensure!(channels >= 1, InvalidArgument, "discriminator needs at least one channel");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [2, channels, 2 * channels, 2 * channels];
        for l in 0..3 {
            let (ci, co) = (widths[l], widths[l + 1]);
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let w = (0..co * ci * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            store.add(&format!("disc.conv{l}.w"), &[co, ci, 3, 3], w)?;
            store.add(&format!("disc.conv{l}.b"), &[co], vec![0.0; co])?;
        }
        let c = 2 * channels;
        let std = (1.0 / c as f64).sqrt();
        let w = (0..c)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
            .collect();
        store.add("disc.fc.w", &[1, c], w)?;
        store.add("disc.fc.b", &[1], vec![0.0])?;
        Ok(Self { store, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<DiffTensor> {
        self.store.bind(g, trainable).tensors().to_vec()
    }
}

/// Probability in (0, 1) that `x` is a ground-truth image; `p` as returned by [`Discriminator::bind`].
pub fn discriminator_forward(g: &mut Graph, p: &[DiffTensor], x: DiffTensor) -> Result<DiffTensor> {
    ensure!(p.len() == 8, DimensionMismatch, "discriminator expects 8 tensors, got {}", p.len());
    let mut f = x;
    for l in 0..3 {
        let z = g.conv2d(f, p[2 * l], Some(p[2 * l + 1]), 2, 1)?;
        f = g.leaky_relu(z, DISCRIMINATOR_SLOPE);
    }
    let pooled = g.mean_pool(f)?;
    let logit = g.linear(pooled, p[6], p[7])?;
    Ok(g.sigmoid(logit))
}

/// Binary cross-entropy with label 1 for `real` and 0 for `fake`.
pub fn discriminator_loss(g: &mut Graph, d_real: DiffTensor, d_fake: DiffTensor) -> Result<DiffTensor> {
    let clamp = super::losses::PROB_CLAMP;
    let a = g.neg_log_clamped(d_real, clamp, 1.0 - clamp);
    let b = g.neg_log1m_clamped(d_fake, clamp, 1.0 - clamp);
    g.add(a, b)
}
