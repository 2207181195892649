use super::dc::{dc_soft_projection, FrameOperator};
use crate::autodiff::{DiffTensor, Graph};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug)]
pub struct ConvTensors {
    pub w: DiffTensor,
    pub b: DiffTensor,
}

/// Gate kernels stacked in the order input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmTensors {
    /// `[4C, C_in, k, k]`
    pub wx: DiffTensor,
    /// `[4C, C, k, k]`
    pub wh: DiffTensor,
    /// `[4C]`
    pub b: DiffTensor,
}

#[derive(Clone, Debug)]
pub struct BlockTensors {
    pub encoder: [ConvTensors; 2],
    pub lstm: Vec<LstmTensors>,
    pub head: [ConvTensors; 2],
    pub alpha: DiffTensor,
}

#[derive(Clone, Debug)]
pub struct InitializerTensors {
    pub layers: [ConvTensors; 3],
}

#[derive(Clone, Debug)]
pub struct ModelTensors {
    pub blocks: Vec<BlockTensors>,
    pub initializer: InitializerTensors,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub c: DiffTensor,
    pub h: DiffTensor,
}

/// Convolutional LSTM update:
/// `i,f,o = σ(Wx∗x + Wh∗h + b)`, `g = tanh(…)`, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn conv_lstm_cell(g: &mut Graph, x: DiffTensor, prev: LstmState, p: &LstmTensors) -> Result<LstmState> {
    ensure!(
        g.shape(prev.c) == g.shape(prev.h),
        DimensionMismatch,
        "cell state {:?} and hidden state {:?} differ",
        g.shape(prev.c),
        g.shape(prev.h)
    );
    let hidden = g.shape(prev.h)[0];
    ensure!(
        g.shape(p.b) == [4 * hidden],
        DimensionMismatch,
        "gate bias {:?} for {} hidden channels",
        g.shape(p.b),
        hidden
    );
    let pad = g.shape(p.wx)[2] / 2;
    let zx = g.conv2d(x, p.wx, Some(p.b), 1, pad)?;
    let zh = g.conv2d(prev.h, p.wh, None, 1, pad)?;
    ensure!(
        g.shape(zx) == g.shape(zh),
        DimensionMismatch,
        "input path {:?} and hidden path {:?} differ",
        g.shape(zx),
        g.shape(zh)
    );
    let z = g.add(zx, zh)?;
    let zi = g.slice_channels(z, 0, hidden)?;
    let zf = g.slice_channels(z, hidden, hidden)?;
    let zo = g.slice_channels(z, 2 * hidden, hidden)?;
    let zg = g.slice_channels(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zg);
    let keep = g.hadamard(f, prev.c)?;
    let write = g.hadamard(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.hadamard(o, tc)?;
    Ok(LstmState { c, h })
}

fn strided_stack(g: &mut Graph, x: DiffTensor, layers: &[ConvTensors], slope: f64) -> Result<DiffTensor> {
    let mut f = x;
    for l in layers {
        let pad = g.shape(l.w)[2] / 2;
        let z = g.conv2d(f, l.w, Some(l.b), 2, pad)?;
        f = g.leaky_relu(z, slope);
    }
    Ok(f)
}

/// Two stride-2 convolutions with leaky-ReLU: `[2,H,W] -> [C,H/4,W/4]`.
pub fn encoder_forward(g: &mut Graph, x: DiffTensor, p: &[ConvTensors; 2], slope: f64) -> Result<DiffTensor> {
    let (_, h, w) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    ensure!(
        h % 4 == 0 && w % 4 == 0,
        DimensionMismatch,
        "encoder input {}x{} is not divisible by 4",
        w,
        h
    );
    strided_stack(g, x, p, slope)
}

/// Two stride-2 transposed convolutions: `[C,H/4,W/4] -> [2,H,W]`.
pub fn deconv_head(g: &mut Graph, f: DiffTensor, p: &[ConvTensors; 2], slope: f64) -> Result<DiffTensor> {
    let pad = g.shape(p[0].w)[2] / 2;
    let u = g.conv_transpose2d(f, p[0].w, Some(p[0].b), 2, pad, 1)?;
    let u = g.leaky_relu(u, slope);
    let pad = g.shape(p[1].w)[2] / 2;
    g.conv_transpose2d(u, p[1].w, Some(p[1].b), 2, pad, 1)
}

/// Maps the reference image to one `(c, h)` pair per (block, layer).
///
/// The last convolution emits `2·blocks·layers·C` channels; each consecutive
/// pair of `C`-channel slices becomes a raw cell state and `tanh` of a hidden state.
pub fn initializer_forward(
    g: &mut Graph,
    x_ref: DiffTensor,
    p: &InitializerTensors,
    blocks: usize,
    layers: usize,
    slope: f64,
) -> Result<Vec<Vec<LstmState>>> {
    let f = encoder_forward(g, x_ref, &[p.layers[0], p.layers[1]], slope)?;
    let pad = g.shape(p.layers[2].w)[2] / 2;
    let out = g.conv2d(f, p.layers[2].w, Some(p.layers[2].b), 1, pad)?;
    let total = g.shape(out)[0];
    ensure!(
        total % (2 * blocks * layers) == 0,
        DimensionMismatch,
        "initializer emits {} channels for {} blocks x {} layers",
        total,
        blocks,
        layers
    );
    let hidden = total / (2 * blocks * layers);
    let mut states = Vec::with_capacity(blocks);
    for j in 0..blocks {
        let mut per_block = Vec::with_capacity(layers);
        for k in 0..layers {
            let base = 2 * (j * layers + k) * hidden;
            let c = g.slice_channels(out, base, hidden)?;
            let raw_h = g.slice_channels(out, base + hidden, hidden)?;
            let h = g.tanh(raw_h);
            per_block.push(LstmState { c, h });
        }
        states.push(per_block);
    }
    Ok(states)
}

/// All-zero states, used when the initializer is disabled.
pub fn zero_states(
    g: &mut Graph,
    blocks: usize,
    layers: usize,
    hidden: usize,
    height: usize,
    width: usize,
) -> Vec<Vec<LstmState>> {
    let n = hidden * height * width;
    (0..blocks)
        .map(|_| {
            (0..layers)
                .map(|_| {
                    let shape = [hidden, height, width];
                    let c = g.constant(&shape, vec![0.0; n]).expect("consistent shape");
                    let h = g.constant(&shape, vec![0.0; n]).expect("consistent shape");
                    LstmState { c, h }
                })
                .collect()
        })
        .collect()
}

/// One recurrent block: encode, run the ConvLSTM layers on a residual feature
/// stream `f_k = f_{k-1} + h_k`, decode, add to `x_in`, then apply data consistency.
///
/// With `mask_lstm` the LSTM contribution is zero and the states come back unchanged.
#[allow(clippy::too_many_arguments)]
pub fn rnn_block_forward(
    g: &mut Graph,
    x_in: DiffTensor,
    states: &[LstmState],
    frame: &FrameOperator,
    dc_scale: f64,
    p: &BlockTensors,
    mask_lstm: bool,
    slope: f64,
) -> Result<(DiffTensor, Vec<LstmState>)> {
    ensure!(
        states.len() == p.lstm.len(),
        DimensionMismatch,
        "{} states for {} LSTM layers",
        states.len(),
        p.lstm.len()
    );
    let mut f = encoder_forward(g, x_in, &p.encoder, slope)?;
    let mut next = states.to_vec();
    if !mask_lstm {
        for (state, layer) in next.iter_mut().zip(&p.lstm) {
            *state = conv_lstm_cell(g, f, *state, layer)?;
            f = g.add(f, state.h)?;
        }
    }
    let delta = deconv_head(g, f, &p.head, slope)?;
    let x_cnn = g.add(x_in, delta)?;
    let x_out = dc_soft_projection(g, x_cnn, p.alpha, frame, dc_scale)?;
    Ok((x_out, next))
}
