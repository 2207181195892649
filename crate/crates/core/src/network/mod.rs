//! The ConvLR recurrent reconstruction network.
//!
//! Each frame is regridded, then refined by a cascade of recurrent blocks. A
//! block encodes its input to a quarter-resolution feature grid, passes it
//! through ConvLSTM layers whose states persist across frames, decodes a
//! residual image and finishes with a soft data-consistency step. The LSTM
//! states start from features of the fully sampled reference image.

mod dc;
mod layers;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use dc::{dc_soft_projection, FrameOperator, OperatorCache, SequenceInput};
pub use layers::{
    conv_lstm_cell, deconv_head, encoder_forward, initializer_forward, rnn_block_forward, zero_states,
    BlockTensors, ConvTensors, InitializerTensors, LstmState, LstmTensors, ModelTensors,
};

use crate::autodiff::{read_checkpoint, write_checkpoint, DiffTensor, Graph, LeafSpec, ParamId, ParamStore};
use crate::error::{ensure, Error, Result};
use crate::image::ComplexImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub blocks: usize,
    pub channels: usize,
    pub lstm_layers: usize,
    pub kernel: usize,
    /// One step size for all blocks instead of one per block.
    pub shared_alpha: bool,
    /// Initial step size in units of `1 / σ_max(E)²`.
    pub alpha_init: f64,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            channels: 32,
            lstm_layers: 2,
            kernel: 3,
            shared_alpha: false,
            alpha_init: 0.5,
            leaky_slope: 0.2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.blocks >= 1, InvalidArgument, "network.blocks must be at least 1");
        ensure!(self.channels >= 1, InvalidArgument, "network.channels must be at least 1");
        ensure!(self.lstm_layers >= 1, InvalidArgument, "network.lstm_layers must be at least 1");
        ensure!(
            self.kernel % 2 == 1,
            InvalidArgument,
            "network.kernel must be odd, got {}",
            self.kernel
        );
        ensure!(
            self.alpha_init.is_finite(),
            InvalidArgument,
            "network.alpha_init must be finite"
        );
        ensure!(
            self.leaky_slope.is_finite() && self.leaky_slope >= 0.0,
            InvalidArgument,
            "network.leaky_slope must be finite and non-negative"
        );
        Ok(())
    }
}

/// Ablation switches that change the forward pass without changing the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_initializer: bool,
    pub mask_lstm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_initializer: true,
            mask_lstm: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    encoder: [ConvIds; 2],
    lstm: Vec<LstmIds>,
    head: [ConvIds; 2],
    alpha: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvLr {
    config: NetworkConfig,
    store: ParamStore,
    blocks: Vec<BlockIds>,
    initializer: [ConvIds; 3],
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    architecture: NetworkConfig,
    parameters: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

const SIDECAR_VERSION: u32 = 1;

fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    k: usize,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, co: usize, ci: usize, gain: f64) -> Result<ConvIds> {
        let fan_in = (ci * self.k * self.k) as f64;
        let vals = normal_values(&mut self.rng, co * ci * self.k * self.k, gain / fan_in.sqrt());
        let w = self.store.add(&format!("{name}.w"), &[co, ci, self.k, self.k], vals)?;
        let b = self.store.add(&format!("{name}.b"), &[co], vec![0.0; co])?;
        Ok(ConvIds { w, b })
    }

    /// Transposed-conv kernel `[C_in, C_out, k, k]`; fan-in counts the taps that hit one output.
    fn deconv(&mut self, name: &str, ci: usize, co: usize, gain: f64) -> Result<ConvIds> {
        let fan_in = (ci * self.k * self.k) as f64 / 4.0;
        let vals = normal_values(&mut self.rng, co * ci * self.k * self.k, gain / fan_in.sqrt());
        let w = self.store.add(&format!("{name}.w"), &[ci, co, self.k, self.k], vals)?;
        let b = self.store.add(&format!("{name}.b"), &[co], vec![0.0; co])?;
        Ok(ConvIds { w, b })
    }

    fn lstm(&mut self, name: &str, ci: usize, c: usize) -> Result<LstmIds> {
        let kk = self.k * self.k;
        let std = 1.0 / (((ci + c) * kk) as f64).sqrt();
        let wx = normal_values(&mut self.rng, 4 * c * ci * kk, std);
        let wh = normal_values(&mut self.rng, 4 * c * c * kk, std);
        let mut b = vec![0.0; 4 * c];
        b[c..2 * c].iter_mut().for_each(|v| *v = 1.0);
        Ok(LstmIds {
            wx: self.store.add(&format!("{name}.wx"), &[4 * c, ci, self.k, self.k], wx)?,
            wh: self.store.add(&format!("{name}.wh"), &[4 * c, c, self.k, self.k], wh)?,
            b: self.store.add(&format!("{name}.b"), &[4 * c], b)?,
        })
    }
}

impl ConvLr {
    /// Freshly initialized model. The last head layer starts at zero so an
    /// untrained block reduces to data consistency applied to its input.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            k: config.kernel,
        };
        let shared_alpha = if config.shared_alpha {
            Some(b.store.add("alpha", &[1], vec![config.alpha_init])?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for j in 0..config.blocks {
            let encoder = [
                b.conv(&format!("block{j}.enc0"), c, 2, gain)?,
                b.conv(&format!("block{j}.enc1"), c, c, gain)?,
            ];
            let lstm = (0..config.lstm_layers)
                .map(|k| b.lstm(&format!("block{j}.lstm{k}"), c, c))
                .collect::<Result<Vec<_>>>()?;
            let head0 = b.deconv(&format!("block{j}.head0"), c, c, gain)?;
            let head1 = b.deconv(&format!("block{j}.head1"), c, 2, 0.0)?;
            let alpha = match shared_alpha {
                Some(id) => id,
                None => b.store.add(&format!("block{j}.alpha"), &[1], vec![config.alpha_init])?,
            };
            blocks.push(BlockIds {
                encoder,
                lstm,
                head: [head0, head1],
                alpha,
            });
        }
        let init_out = 2 * config.blocks * config.lstm_layers * c;
        let initializer = [
            b.conv("init.conv0", c, 2, gain)?,
            b.conv("init.conv1", c, c, gain)?,
            b.conv("init.out", init_out, c, 1.0)?,
        ];
        Ok(Self {
            config,
            store,
            blocks,
            initializer,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Learnable step sizes in units of `1 / σ_max(E)²`, one per block.
    pub fn alphas(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| self.store.entry(b.alpha).values[0]).collect()
    }

    /// Leaf specs for every parameter, in store order.
    pub fn leaf_specs(&self) -> Vec<LeafSpec> {
        self.store
            .entries()
            .iter()
            .map(|e| LeafSpec::new(&e.shape, e.values.clone()))
            .collect()
    }

    /// Structured view over graph tensors given in store order.
    pub fn tensors_from(&self, ts: &[DiffTensor]) -> Result<ModelTensors> {
        ensure!(
            ts.len() == self.store.len(),
            DimensionMismatch,
            "{} tensors for {} parameters",
            ts.len(),
            self.store.len()
        );
        let conv = |ids: ConvIds| ConvTensors {
            w: ts[ids.w.index()],
            b: ts[ids.b.index()],
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockTensors {
                encoder: [conv(b.encoder[0]), conv(b.encoder[1])],
                lstm: b
                    .lstm
                    .iter()
                    .map(|l| LstmTensors {
                        wx: ts[l.wx.index()],
                        wh: ts[l.wh.index()],
                        b: ts[l.b.index()],
                    })
                    .collect(),
                head: [conv(b.head[0]), conv(b.head[1])],
                alpha: ts[b.alpha.index()],
            })
            .collect();
        let i = &self.initializer;
        Ok(ModelTensors {
            blocks,
            initializer: InitializerTensors {
                layers: [conv(i[0]), conv(i[1]), conv(i[2])],
            },
        })
    }

    /// Inserts the parameters into `g` and returns their structured view plus the flat list.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (ModelTensors, Vec<DiffTensor>) {
        let bound = self.store.bind(g, trainable);
        let flat = bound.tensors().to_vec();
        let model = self.tensors_from(&flat).expect("bound tensors match the store");
        (model, flat)
    }

    /// Recurrent reconstruction of the first `frames` frames, returned as `[2,H,W]` tensors.
    pub fn forward(
        &self,
        g: &mut Graph,
        model: &ModelTensors,
        input: &SequenceInput,
        frames: usize,
        ablation: Ablation,
    ) -> Result<Vec<DiffTensor>> {
        convlr_forward(g, model, &self.config, input, frames, ablation)
    }

    /// Inference without gradient bookkeeping.
    pub fn reconstruct(&self, input: &SequenceInput, frames: usize, ablation: Ablation) -> Result<Vec<ComplexImage>> {
        let mut g = Graph::new();
        let (model, _) = self.bind(&mut g, false);
        let outs = self.forward(&mut g, &model, input, frames, ablation)?;
        outs.iter()
            .map(|&t| ComplexImage::from_channels(input.width(), input.height(), g.value(t)))
            .collect()
    }

    /// Writes the checkpoint and a `.json` sidecar holding the architecture and `extra`.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        write_checkpoint(path, &self.store)?;
        let sidecar = Sidecar {
            format_version: SIDECAR_VERSION,
            architecture: self.config.clone(),
            parameters: self.store.num_scalars(),
            extra,
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Json {
            path: side.clone(),
            source: e,
        })?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    /// Loads a checkpoint written by [`ConvLr::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: side.clone(),
            source: e,
        })?;
        if sidecar.format_version != SIDECAR_VERSION {
            return Err(Error::format(
                &side,
                format!("unsupported sidecar version {}", sidecar.format_version),
            ));
        }
        let mut model = Self::new(sidecar.architecture, 0)?;
        let stored = read_checkpoint(path)?;
        model.store.load_from(&stored)?;
        Ok(model)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Runs the recurrent cascade over `frames` frames. Frame `t` only sees
/// frames `0..=t` and the reference image.
pub fn convlr_forward(
    g: &mut Graph,
    model: &ModelTensors,
    config: &NetworkConfig,
    input: &SequenceInput,
    frames: usize,
    ablation: Ablation,
) -> Result<Vec<DiffTensor>> {
    ensure!(frames >= 1, InvalidArgument, "at least one frame must be reconstructed");
    ensure!(
        frames <= input.n_frames(),
        InvalidArgument,
        "{} frames requested, sequence has {}",
        frames,
        input.n_frames()
    );
    ensure!(
        model.blocks.len() == config.blocks,
        DimensionMismatch,
        "{} block tensors for {} blocks",
        model.blocks.len(),
        config.blocks
    );
    let (w, h) = (input.width(), input.height());
    let slope = config.leaky_slope;
    let mut states = if ablation.use_initializer {
        let x_ref = g.constant(&[2, h, w], input.reference().to_vec())?;
        initializer_forward(g, x_ref, &model.initializer, config.blocks, config.lstm_layers, slope)?
    } else {
        ensure!(
            h % 4 == 0 && w % 4 == 0,
            DimensionMismatch,
            "image {}x{} is not divisible by 4",
            w,
            h
        );
        zero_states(g, config.blocks, config.lstm_layers, config.channels, h / 4, w / 4)
    };
    let scale = input.dc_scale();
    let mut outputs = Vec::with_capacity(frames);
    for frame in &input.frames()[..frames] {
        let mut x = g.constant(&[2, h, w], frame.regrid().to_vec())?;
        for (block, st) in model.blocks.iter().zip(states.iter_mut()) {
            let (x_next, st_next) = rnn_block_forward(g, x, st, frame, scale, block, ablation.mask_lstm, slope)?;
            x = x_next;
            *st = st_next;
        }
        outputs.push(x);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests;
