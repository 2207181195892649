use super::conv::{col2im, conv_output_size, conv_transpose_output_size, gemm, im2col, ConvGeom};
use crate::error::{ensure, Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiffTensor(usize);

impl DiffTensor {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the engine.
///
/// The engine only needs the vector-Jacobian product; linear operators supply
/// their adjoint here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Output shape and values for the given inputs.
    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<usize>, Vec<f64>)>;

    /// Gradient w.r.t. each input whose `needs` flag is set (`None` otherwise).
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: DiffTensor,
        kernel: DiffTensor,
        bias: Option<DiffTensor>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        input: DiffTensor,
        kernel: DiffTensor,
        bias: Option<DiffTensor>,
        geom: ConvGeom,
    },
    Sigmoid(DiffTensor),
    Tanh(DiffTensor),
    LeakyRelu(DiffTensor, f64),
    Add(DiffTensor, DiffTensor),
    Sub(DiffTensor, DiffTensor),
    Hadamard(DiffTensor, DiffTensor),
    Scale(DiffTensor, f64),
    MulScalar(DiffTensor, DiffTensor),
    Concat(Vec<DiffTensor>),
    SliceChannels(DiffTensor, usize),
    Sum(DiffTensor),
    SumSquares(DiffTensor),
    Norm(DiffTensor),
    MeanPool(DiffTensor),
    Linear {
        x: DiffTensor,
        w: DiffTensor,
        b: DiffTensor,
    },
    NegLog(DiffTensor, f64, f64),
    NegLog1m(DiffTensor, f64, f64),
    Custom(Vec<DiffTensor>, Box<dyn CustomOp>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of differentiable operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sabotage: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the sigmoid backward rule. Exists so gradient checking can be
    /// shown to catch a wrong derivative.
    #[doc(hidden)]
    pub fn set_sabotage(&mut self, on: bool) {
        self.sabotage = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: DiffTensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: DiffTensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, t: DiffTensor) -> f64 {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on a tensor of {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self, t: DiffTensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`]; `None` when no
    /// gradient reached the node.
    pub fn grad(&self, t: DiffTensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Gradient, or zeros when the node is not on a path to the loss.
    pub fn grad_or_zeros(&self, t: DiffTensor) -> Vec<f64> {
        self.grad(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.value(t).len()])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> DiffTensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        DiffTensor(self.nodes.len() - 1)
    }

    fn rg(&self, ts: &[DiffTensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<DiffTensor> {
        ensure!(
            numel(shape) == values.len(),
            DimensionMismatch,
            "{} values for shape {:?}",
            values.len(),
            shape
        );
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<DiffTensor> {
        self.leaf(shape, values, true)
    }

    /// Constant leaf (no gradient is accumulated for it).
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<DiffTensor> {
        self.leaf(shape, values, false)
    }

    fn same_shape(&self, a: DiffTensor, b: DiffTensor, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            DimensionMismatch,
            "{}: shapes {:?} and {:?}",
            what,
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn chw(&self, t: DiffTensor, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(t);
        ensure!(s.len() == 3, DimensionMismatch, "{} expects [C,H,W], got {:?}", what, s);
        Ok((s[0], s[1], s[2]))
    }

    fn kernel_dims(&self, t: DiffTensor) -> Result<(usize, usize, usize)> {
        let s = self.shape(t);
        ensure!(
            s.len() == 4 && s[2] == s[3],
            DimensionMismatch,
            "kernel must be [C_out, C_in, k, k], got {:?}",
            s
        );
        Ok((s[0], s[1], s[2]))
    }

    fn check_bias(&self, bias: Option<DiffTensor>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            ensure!(
                self.shape(b) == [channels],
                DimensionMismatch,
                "bias shape {:?} for {} channels",
                self.shape(b),
                channels
            );
        }
        Ok(())
    }

    /// Cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,k,k]`.
    pub fn conv2d(
        &mut self,
        input: DiffTensor,
        kernel: DiffTensor,
        bias: Option<DiffTensor>,
        stride: usize,
        padding: usize,
    ) -> Result<DiffTensor> {
        let (ci, hi, wi) = self.chw(input, "conv2d input")?;
        let (co, kci, k) = self.kernel_dims(kernel)?;
        ensure!(ci == kci, DimensionMismatch, "conv2d: input has {} channels, kernel expects {}", ci, kci);
        self.check_bias(bias, co)?;
        let ho = conv_output_size(hi, k, stride, padding)?;
        let wo = conv_output_size(wi, k, stride, padding)?;
        let geom = ConvGeom { ci, hi, wi, co, ho, wo, k, stride, pad: padding };
        let cols = im2col(self.value(input), &geom);
        let npix = geom.out_pixels();
        let mut out = vec![0.0; co * npix];
        if let Some(b) = bias {
            for (c, &bv) in self.value(b).iter().enumerate() {
                out[c * npix..(c + 1) * npix].fill(bv);
            }
        }
        gemm(co, geom.patch(), npix, self.value(kernel), false, &cols, false, 1.0, &mut out);
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(vec![co, ho, wo], out, rg, Op::Conv2d { input, kernel, bias, geom, cols }))
    }

    /// Adjoint of [`Graph::conv2d`] with the same kernel: maps `[C_out,H',W']`
    /// back to `[C_in,H,W]`, where `H = (H'-1)·stride - 2·padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: DiffTensor,
        kernel: DiffTensor,
        bias: Option<DiffTensor>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<DiffTensor> {
        let (co, ho, wo) = self.chw(input, "conv_transpose2d input")?;
        let (kco, ci, k) = self.kernel_dims(kernel)?;
        ensure!(
            co == kco,
            DimensionMismatch,
            "conv_transpose2d: input has {} channels, kernel expects {}",
            co,
            kco
        );
        ensure!(k % 2 == 1, InvalidArgument, "kernel size {} must be odd", k);
        self.check_bias(bias, ci)?;
        let hi = conv_transpose_output_size(ho, k, stride, padding, output_padding)?;
        let wi = conv_transpose_output_size(wo, k, stride, padding, output_padding)?;
        let geom = ConvGeom { ci, hi, wi, co, ho, wo, k, stride, pad: padding };
        let npix = geom.out_pixels();
        let mut cols = vec![0.0; geom.patch() * npix];
        gemm(geom.patch(), co, npix, self.value(kernel), true, self.value(input), false, 0.0, &mut cols);
        let mut out = col2im(&cols, &geom);
        if let Some(b) = bias {
            let plane = hi * wi;
            for (c, &bv) in self.value(b).iter().enumerate() {
                out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(vec![ci, hi, wi], out, rg, Op::ConvTranspose2d { input, kernel, bias, geom }))
    }

    fn unary(&mut self, x: DiffTensor, f: impl Fn(f64) -> f64, op: Op) -> DiffTensor {
        let v = self.value(x).iter().map(|&a| f(a)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, v, rg, op)
    }

    pub fn sigmoid(&mut self, x: DiffTensor) -> DiffTensor {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: DiffTensor) -> DiffTensor {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: DiffTensor, slope: f64) -> DiffTensor {
        self.unary(x, |a| if a > 0.0 { a } else { slope * a }, Op::LeakyRelu(x, slope))
    }

    pub fn scale(&mut self, x: DiffTensor, c: f64) -> DiffTensor {
        self.unary(x, |a| c * a, Op::Scale(x, c))
    }

    fn binary(&mut self, a: DiffTensor, b: DiffTensor, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<DiffTensor> {
        self.same_shape(a, b, what)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, v, rg, op))
    }

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn hadamard(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary(a, b, |p, q| p * q, Op::Hadamard(a, b), "hadamard")
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: DiffTensor, s: DiffTensor) -> Result<DiffTensor> {
        ensure!(self.value(s).len() == 1, DimensionMismatch, "mul_scalar: factor has shape {:?}", self.shape(s));
        let c = self.value(s)[0];
        let v = self.value(x).iter().map(|&a| c * a).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(shape, v, rg, Op::MulScalar(x, s)))
    }

    /// Stacks `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        ensure!(!parts.is_empty(), InvalidArgument, "concat of nothing");
        let (_, h, w) = self.chw(parts[0], "concat")?;
        let mut c_total = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (c, hh, ww) = self.chw(p, "concat")?;
            ensure!(hh == h && ww == w, DimensionMismatch, "concat: {}x{} vs {}x{}", hh, ww, h, w);
            c_total += c;
            v.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![c_total, h, w], v, rg, Op::Concat(parts.to_vec())))
    }

    /// Channels `[start, start+len)` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: DiffTensor, start: usize, len: usize) -> Result<DiffTensor> {
        let (c, h, w) = self.chw(x, "slice_channels")?;
        ensure!(len > 0 && start + len <= c, DimensionMismatch, "slice {}..{} of {} channels", start, start + len, c);
        let v = self.value(x)[start * h * w..(start + len) * h * w].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, h, w], v, rg, Op::SliceChannels(x, start)))
    }

    pub fn sum(&mut self, x: DiffTensor) -> DiffTensor {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: DiffTensor) -> DiffTensor {
        let s = self.value(x).iter().map(|a| a * a).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::SumSquares(x))
    }

    /// Euclidean norm; its gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, x: DiffTensor) -> DiffTensor {
        let s = self.value(x).iter().map(|a| a * a).sum::<f64>().sqrt();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Norm(x))
    }

    /// Global average pooling `[C,H,W] -> [C]`.
    pub fn mean_pool(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let (c, h, w) = self.chw(x, "mean_pool")?;
        let n = (h * w) as f64;
        let v = self.value(x).chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c], v, rg, Op::MeanPool(x)))
    }

    /// `w x + b` with `x [n]`, `w [m, n]`, `b [m]`.
    pub fn linear(&mut self, x: DiffTensor, w: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let n = self.value(x).len();
        let ws = self.shape(w).to_vec();
        ensure!(ws.len() == 2 && ws[1] == n, DimensionMismatch, "linear: weight {:?} for input of {}", ws, n);
        ensure!(self.shape(b) == [ws[0]], DimensionMismatch, "linear: bias {:?}", self.shape(b));
        let xv = self.value(x);
        let v = self
            .value(w)
            .chunks_exact(n)
            .zip(self.value(b))
            .map(|(row, bi)| bi + row.iter().zip(xv).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![ws[0]], v, rg, Op::Linear { x, w, b }))
    }

    /// Elementwise `-ln(clamp(x, lo, hi))`; the gradient vanishes where the clamp is active.
    pub fn neg_log_clamped(&mut self, x: DiffTensor, lo: f64, hi: f64) -> DiffTensor {
        self.unary(x, |a| -a.clamp(lo, hi).ln(), Op::NegLog(x, lo, hi))
    }

    /// Elementwise `-ln(1 - clamp(x, lo, hi))`.
    pub fn neg_log1m_clamped(&mut self, x: DiffTensor, lo: f64, hi: f64) -> DiffTensor {
        self.unary(x, |a| -(1.0 - a.clamp(lo, hi)).ln(), Op::NegLog1m(x, lo, hi))
    }

    pub fn custom(&mut self, inputs: &[DiffTensor], op: Box<dyn CustomOp>) -> Result<DiffTensor> {
        let vals: Vec<&[f64]> = inputs.iter().map(|&t| self.value(t)).collect();
        let (shape, value) = op.forward(&vals)?;
        ensure!(
            numel(&shape) == value.len(),
            DimensionMismatch,
            "custom op {} returned {} values for shape {:?}",
            op.name(),
            value.len(),
            shape
        );
        let rg = self.rg(inputs);
        Ok(self.push(shape, value, rg, Op::Custom(inputs.to_vec(), op)))
    }

    /// Populates gradients of every node that leads to the scalar `loss`.
    /// Gradients from earlier calls are cleared first.
    pub fn backward(&mut self, loss: DiffTensor) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            InvalidArgument,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, delta) in contributions {
                let node = &mut self.nodes[parent.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, t: DiffTensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(DiffTensor, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let npix = geom.out_pixels();
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; geom.co * geom.patch()];
                    gemm(geom.co, npix, geom.patch(), g, false, cols, true, 0.0, &mut dk);
                    out.push((*kernel, dk));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        out.push((*b, g.chunks_exact(npix).map(|r| r.iter().sum()).collect()));
                    }
                }
                if self.needs(*input) {
                    let mut dcols = vec![0.0; geom.patch() * npix];
                    gemm(geom.patch(), geom.co, npix, self.value(*kernel), true, g, false, 0.0, &mut dcols);
                    out.push((*input, col2im(&dcols, geom)));
                }
            }
            Op::ConvTranspose2d { input, kernel, bias, geom } => {
                let npix = geom.out_pixels();
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let plane = geom.hi * geom.wi;
                        out.push((*b, g.chunks_exact(plane).map(|r| r.iter().sum()).collect()));
                    }
                }
                if self.needs(*kernel) || self.needs(*input) {
                    let gcols = im2col(g, geom);
                    if self.needs(*kernel) {
                        let mut dk = vec![0.0; geom.co * geom.patch()];
                        gemm(geom.co, npix, geom.patch(), self.value(*input), false, &gcols, true, 0.0, &mut dk);
                        out.push((*kernel, dk));
                    }
                    if self.needs(*input) {
                        let mut dx = vec![0.0; geom.co * npix];
                        gemm(geom.co, geom.patch(), npix, self.value(*kernel), false, &gcols, false, 0.0, &mut dx);
                        out.push((*input, dx));
                    }
                }
            }
            Op::Sigmoid(x) => {
                let fudge = if self.sabotage { 1.05 } else { 1.0 };
                let d = node.value.iter().zip(g).map(|(y, gi)| fudge * gi * y * (1.0 - y)).collect();
                out.push((*x, d));
            }
            Op::Tanh(x) => {
                out.push((*x, node.value.iter().zip(g).map(|(y, gi)| gi * (1.0 - y * y)).collect()));
            }
            Op::LeakyRelu(x, slope) => {
                let d = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(a, gi)| if *a > 0.0 { *gi } else { slope * gi })
                    .collect();
                out.push((*x, d));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(self.value(*b)).map(|(p, q)| p * q).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(self.value(*a)).map(|(p, q)| p * q).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| c * v).collect())),
            Op::MulScalar(x, s) => {
                let c = self.value(*s)[0];
                if self.needs(*x) {
                    out.push((*x, g.iter().map(|v| c * v).collect()));
                }
                if self.needs(*s) {
                    out.push((*s, vec![g.iter().zip(self.value(*x)).map(|(p, q)| p * q).sum()]));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        out.push((*p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SliceChannels(x, start) => {
                let mut d = vec![0.0; self.value(*x).len()];
                let plane = node.shape[1] * node.shape[2];
                d[start * plane..start * plane + g.len()].copy_from_slice(g);
                out.push((*x, d));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::SumSquares(x) => out.push((*x, self.value(*x).iter().map(|a| 2.0 * a * g[0]).collect())),
            Op::Norm(x) => {
                let n = node.value[0];
                let d = if n > 0.0 {
                    self.value(*x).iter().map(|a| a / n * g[0]).collect()
                } else {
                    vec![0.0; self.value(*x).len()]
                };
                out.push((*x, d));
            }
            Op::MeanPool(x) => {
                let s = self.shape(*x);
                let plane = s[1] * s[2];
                let mut d = Vec::with_capacity(s[0] * plane);
                for gc in g {
                    d.extend(std::iter::repeat(gc / plane as f64).take(plane));
                }
                out.push((*x, d));
            }
            Op::Linear { x, w, b } => {
                let n = self.value(*x).len();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n];
                    for (row, gi) in self.value(*w).chunks_exact(n).zip(g) {
                        dx.iter_mut().zip(row).for_each(|(d, r)| *d += gi * r);
                    }
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let xv = self.value(*x);
                    let dw = g.iter().flat_map(|gi| xv.iter().map(move |a| gi * a)).collect();
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::NegLog(x, lo, hi) => {
                let d = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&a, gi)| if a > *lo && a < *hi { -gi / a } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::NegLog1m(x, lo, hi) => {
                let d = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&a, gi)| if a > *lo && a < *hi { gi / (1.0 - a) } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&[f64]> = inputs.iter().map(|&t| self.value(t)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&t| self.needs(t)).collect();
                for (t, d) in inputs.iter().zip(op.backward(&vals, &node.value, g, &needs)) {
                    if let Some(d) = d {
                        out.push((*t, d));
                    }
                }
            }
        }
        out
    }

    /// Fails with the first node holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(j) = n.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("node {} element {}", i, j)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 3, 4], (0..12).map(|i| i as f64 * 0.7 - 2.0).collect()).unwrap();
        let k = g.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = g.constant(&[1], vec![0.0]).unwrap();
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn averaging_kernel_matches_direct_sum() {
        // brute-force oracle: out[y][x] = Σ_{dy,dx} in[y+dy-1][x+dx-1] / 9 with zero padding
        let input = [[1.0, 2.0], [3.0, 4.0]];
        let mut g = Graph::new();
        let x = g.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = g.constant(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (iy, ix) = (oy as isize + dy - 1, ox as isize + dx - 1);
                        if (0..2).contains(&iy) && (0..2).contains(&ix) {
                            acc += input[iy as usize][ix as usize] / 9.0;
                        }
                    }
                }
                assert!((g.value(y)[oy * 2 + ox] - acc).abs() < 1e-15);
            }
        }
        // every output sees all four inputs: 10/9
        assert!((g.value(y)[0] - 10.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn strided_shape() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 32, 32], vec![0.0; 2048]).unwrap();
        let k = g.constant(&[4, 2, 3, 3], vec![0.0; 72]).unwrap();
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[4, 16, 16]);
        let up = g.conv_transpose2d(y, k, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(up), &[2, 32, 32]);
        assert!(g.value(up).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(&[1, 2, 2], vec![0.0; 4]).unwrap();
        let b = g.constant(&[1, 2, 3], vec![0.0; 6]).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.hadamard(a, b).is_err());
        let k = g.constant(&[1, 2, 3, 3], vec![0.0; 18]).unwrap();
        assert!(g.conv2d(a, k, None, 1, 1).is_err());
        assert!(g.leaf(&[2, 2], vec![0.0; 3], true).is_err());
        assert!(g.slice_channels(a, 0, 2).is_err());
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::new();
        let x = g.param(&[1], vec![0.0]).unwrap();
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        assert_eq!(g.scalar(s), 0.5);
        assert_eq!(g.scalar(t), 0.0);
        g.backward(t).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
        let n = g.constant(&[2], vec![-1.0, 2.0]).unwrap();
        let l = g.leaky_relu(n, 0.2);
        assert_eq!(g.value(l), &[-0.2, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(&[2, 3], vec![0.5; 6]).unwrap();
        let unused = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn hadamard_gradient_by_finite_differences() {
        let xv = vec![0.3, -1.2, 2.0, 0.7];
        let yv = vec![1.5, 0.25, -0.5, 3.0];
        let mut g = Graph::new();
        let x = g.param(&[4], xv.clone()).unwrap();
        let y = g.constant(&[4], yv.clone()).unwrap();
        let h = g.hadamard(x, y).unwrap();
        let l = g.sum(h);
        g.backward(l).unwrap();
        let num = fd(|p| p.iter().zip(&yv).map(|(a, b)| a * b).sum(), &xv, 1e-5);
        for (a, n) in g.grad(x).unwrap().iter().zip(&num) {
            assert!((a - n).abs() < 1e-9);
        }
        assert_eq!(g.grad(x).unwrap(), yv.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_and_resets() {
        let mut g = Graph::new();
        let x = g.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(g.backward(x).is_err());
        let s = g.sum_squares(x);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
        assert_eq!(first, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn clamped_logs() {
        let mut g = Graph::new();
        let p = g.param(&[3], vec![1.0, (-1f64).exp(), 1e-12]).unwrap();
        let l = g.neg_log_clamped(p, 1e-7, 1.0 - 1e-7);
        let v = g.value(l).to_vec();
        assert!((v[0] - 1e-7).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - 1e-7f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.param(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.param(&[2, 2, 2], (5..13).map(f64::from).collect()).unwrap();
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 2]);
        let s = g.slice_channels(c, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none() || g.grad(a).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(g.grad(b).unwrap(), &[1.0; 8]);
    }
}
