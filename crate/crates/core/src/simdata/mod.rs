//! Synthetic interventional sequences: a head phantom as the fully sampled
//! reference, a hypointense feature advancing through it frame by frame, and
//! the undersampled radial k-space of every frame.

mod augment;
mod dataset;
mod intervention;
mod io;
mod phantom;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_sequence, augment_sequence_with, AugmentConfig, RigidTransform};
pub use dataset::{
    build_dataset, frame_trajectory, kspace_noise_seed, simulate_kspace, Dataset, DatasetConfig, Manifest,
    SplitEntry, SplitSeeds, MANIFEST_VERSION,
};
pub use intervention::{render_intervention_frame, InterventionConfig, InterventionParams, Roi};
pub use io::{read_image, write_image, IMAGE_MAGIC};
pub use phantom::{generate_reference_phantom, generate_reference_phantom_with, PhantomConfig};

use crate::error::{ensure, Result};
use crate::image::ComplexImage;

/// SplitMix64 finalizer over a list of words; used to derive independent sub-seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub reference: ComplexImage,
    pub frames: Vec<ComplexImage>,
    pub roi: Roi,
    pub params: InterventionParams,
    pub seed: u64,
}

impl FrameSequence {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.frames.is_empty(), InvalidArgument, "sequence has no frames");
        for f in &self.frames {
            ensure!(
                f.same_shape(&self.reference),
                DimensionMismatch,
                "frame {}x{} differs from reference {}x{}",
                f.width(),
                f.height(),
                self.reference.width(),
                self.reference.height()
            );
        }
        ensure!(
            self.roi.fits(self.reference.width(), self.reference.height()),
            InvalidArgument,
            "roi {:?} outside the image",
            self.roi
        );
        Ok(())
    }
}

/// Generation settings shared by every sequence of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub phantom: PhantomConfig,
    pub intervention: InterventionConfig,
    pub augment: AugmentConfig,
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.intervention.validate()?;
        self.augment.validate()
    }
}

/// One complete sequence, a pure function of `(seed, size, frames, cfg)`.
pub fn generate_sequence(seed: u64, size: usize, frames: usize, cfg: &SequenceConfig) -> Result<FrameSequence> {
    ensure!(frames >= 1, InvalidArgument, "a sequence needs at least one frame");
    cfg.validate()?;
    let (reference, head) = phantom::phantom_with_geometry(derive_seed(&[seed, 1]), size, &cfg.phantom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2]));
    let params = intervention::sample_intervention(&mut rng, &head, size, frames, &cfg.intervention)?;
    let frames_img = (0..frames)
        .map(|t| render_intervention_frame(&reference, &params, t))
        .collect::<Result<Vec<_>>>()?;
    let roi = params.roi(size, size, cfg.intervention.roi_margin);
    let seq = FrameSequence {
        reference,
        frames: frames_img,
        roi,
        params,
        seed,
    };
    augment_sequence_with(&seq, derive_seed(&[seed, 3]), &cfg.augment)
}

#[cfg(test)]
mod tests;
