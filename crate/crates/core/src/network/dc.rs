use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::autodiff::{CustomOp, DiffTensor, Graph};
use crate::error::{ensure, Result};
use crate::image::ComplexImage;
use crate::kspace::{regrid_reconstruct, KSpaceData, NormalOperator, Nudft, RadialTrajectory};

const POWER_ITERATIONS: usize = 50;
const POWER_SEED: u64 = 0x5eed;

/// Everything the network needs from one acquired frame.
#[derive(Clone, Debug)]
pub struct FrameOperator {
    width: usize,
    height: usize,
    normal: Arc<NormalOperator>,
    lambda_max: f64,
    adjoint_data: Arc<Vec<f64>>,
    regrid: Vec<f64>,
}

impl FrameOperator {
    pub fn new(y: &KSpaceData, width: usize, height: usize) -> Result<Self> {
        let normal = Arc::new(NormalOperator::new(width, height, y.trajectory().coords()));
        let lambda = normal.max_eigenvalue(POWER_ITERATIONS, POWER_SEED);
        Self::with_normal(y, width, height, normal, lambda)
    }

    fn with_normal(
        y: &KSpaceData,
        width: usize,
        height: usize,
        normal: Arc<NormalOperator>,
        lambda_max: f64,
    ) -> Result<Self> {
        ensure!(
            normal.width() == width && normal.height() == height,
            DimensionMismatch,
            "normal operator is {}x{}, frame is {}x{}",
            normal.width(),
            normal.height(),
            width,
            height
        );
        let ehy = Nudft::for_trajectory(width, height, y.trajectory()).adjoint(y.samples(), None)?;
        let regrid = regrid_reconstruct(y, width, height)?;
        Ok(Self {
            width,
            height,
            normal,
            lambda_max,
            adjoint_data: Arc::new(ehy.to_channels()),
            regrid: regrid.to_channels(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// σ_max(E)² estimated by power iteration.
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// `E^H y` as a `[2,H,W]` grid.
    pub fn adjoint_data(&self) -> &[f64] {
        &self.adjoint_data
    }

    /// Density-compensated regridding of the frame as a `[2,H,W]` grid.
    pub fn regrid(&self) -> &[f64] {
        &self.regrid
    }

    pub fn normal(&self) -> &NormalOperator {
        &self.normal
    }
}

type TrajectoryKey = (usize, usize, usize, Vec<u64>);

/// Shares normal operators between frames acquired on identical trajectories.
#[derive(Default)]
pub struct OperatorCache {
    map: Mutex<HashMap<TrajectoryKey, (Arc<NormalOperator>, f64)>>,
}

impl OperatorCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(traj: &RadialTrajectory, width: usize, height: usize) -> TrajectoryKey {
        (
            width,
            height,
            traj.n_readout(),
            traj.spoke_angles().iter().map(|a| a.to_bits()).collect(),
        )
    }

    pub fn frame(&self, y: &KSpaceData, width: usize, height: usize) -> Result<FrameOperator> {
        let key = Self::key(y.trajectory(), width, height);
        let hit = self.map.lock().expect("operator cache poisoned").get(&key).cloned();
        let (normal, lambda) = match hit {
            Some(v) => v,
            None => {
                let normal = Arc::new(NormalOperator::new(width, height, y.trajectory().coords()));
                let lambda = normal.max_eigenvalue(POWER_ITERATIONS, POWER_SEED);
                self.map
                    .lock()
                    .expect("operator cache poisoned")
                    .entry(key)
                    .or_insert((normal, lambda))
                    .clone()
            }
        };
        FrameOperator::with_normal(y, width, height, normal, lambda)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("operator cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reference image and acquired frames of one sequence, prepared for the network.
#[derive(Clone, Debug)]
pub struct SequenceInput {
    width: usize,
    height: usize,
    reference: Vec<f64>,
    frames: Vec<FrameOperator>,
}

impl SequenceInput {
    pub fn new(reference: &ComplexImage, y_frames: &[KSpaceData]) -> Result<Self> {
        Self::build(reference, y_frames, None)
    }

    pub fn with_cache(reference: &ComplexImage, y_frames: &[KSpaceData], cache: &OperatorCache) -> Result<Self> {
        Self::build(reference, y_frames, Some(cache))
    }

    fn build(reference: &ComplexImage, y_frames: &[KSpaceData], cache: Option<&OperatorCache>) -> Result<Self> {
        ensure!(!y_frames.is_empty(), InvalidArgument, "a sequence needs at least one frame");
        let (w, h) = (reference.width(), reference.height());
        let frames = y_frames
            .iter()
            .map(|y| match cache {
                Some(c) => c.frame(y, w, h),
                None => FrameOperator::new(y, w, h),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(reference.to_channels(), w, h, frames)?)
    }

    pub fn from_parts(reference: Vec<f64>, width: usize, height: usize, frames: Vec<FrameOperator>) -> Result<Self> {
        ensure!(!frames.is_empty(), InvalidArgument, "a sequence needs at least one frame");
        ensure!(
            reference.len() == 2 * width * height,
            DimensionMismatch,
            "reference grid has {} values for {}x{}",
            reference.len(),
            width,
            height
        );
        for f in &frames {
            ensure!(
                f.width == width && f.height == height,
                DimensionMismatch,
                "frame is {}x{}, reference is {}x{}",
                f.width,
                f.height,
                width,
                height
            );
        }
        Ok(Self {
            width,
            height,
            reference,
            frames,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn frames(&self) -> &[FrameOperator] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Step-size normalizer `1 / σ_max(E)²` taken from the first frame's trajectory.
    pub fn dc_scale(&self) -> f64 {
        let l = self.frames[0].lambda_max;
        if l > 0.0 {
            1.0 / l
        } else {
            0.0
        }
    }
}

struct DcOp {
    normal: Arc<NormalOperator>,
    adjoint_data: Arc<Vec<f64>>,
    scale: f64,
}

impl CustomOp for DcOp {
    fn name(&self) -> &'static str {
        "dc_soft_projection"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<usize>, Vec<f64>)> {
        let (x, a) = (inputs[0], inputs[1][0]);
        let nx = self.normal.apply_channels(x);
        let step = a * self.scale;
        let out = x
            .iter()
            .zip(&nx)
            .zip(self.adjoint_data.iter())
            .map(|((&xi, &ni), &di)| xi - step * (ni - di))
            .collect();
        Ok((vec![2, self.normal.height(), self.normal.width()], out))
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, a) = (inputs[0], inputs[1][0]);
        let step = a * self.scale;
        let gx = needs[0].then(|| {
            let ng = self.normal.apply_channels(grad);
            grad.iter().zip(&ng).map(|(&g, &n)| g - step * n).collect()
        });
        let ga = needs[1].then(|| {
            let nx = self.normal.apply_channels(x);
            let dot: f64 = grad
                .iter()
                .zip(&nx)
                .zip(self.adjoint_data.iter())
                .map(|((&g, &n), &d)| g * (n - d))
                .sum();
            vec![-self.scale * dot]
        });
        vec![gx, ga]
    }
}

/// `x - a·scale·E^H(E x - y)` on a `[2,H,W]` grid; `a` is a one-element tensor.
///
/// Differentiable in `x` and `a`. The effective step size is `a · scale`.
pub fn dc_soft_projection(
    g: &mut Graph,
    x: DiffTensor,
    a: DiffTensor,
    frame: &FrameOperator,
    scale: f64,
) -> Result<DiffTensor> {
    ensure!(
        g.shape(x) == [2, frame.height, frame.width],
        DimensionMismatch,
        "dc input {:?} for a {}x{} frame",
        g.shape(x),
        frame.width,
        frame.height
    );
    ensure!(g.value(a).len() == 1, DimensionMismatch, "dc step must be a scalar, got {:?}", g.shape(a));
    ensure!(
        g.value(a)[0].is_finite() && scale.is_finite(),
        NonFinite,
        "dc step {} x {}",
        g.value(a)[0],
        scale
    );
    g.custom(
        &[x, a],
        Box::new(DcOp {
            normal: frame.normal.clone(),
            adjoint_data: frame.adjoint_data.clone(),
            scale,
        }),
    )
}
