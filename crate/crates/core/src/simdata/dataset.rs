use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_sequence, read_image, write_image, FrameSequence, InterventionParams, Roi, SequenceConfig};
use crate::error::{ensure, Error, Result};
use crate::image::ComplexImage;
use crate::kspace::{golden_angle_trajectory, nudft_forward, read_kspace, write_kspace, KSpaceData, RadialTrajectory};

pub const MANIFEST_VERSION: u32 = 1;
const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Explicit first seed of each split; sequence `i` of a split uses `start + i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSeeds {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub frames: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub split_seeds: Option<SplitSeeds>,
    pub spokes: Vec<usize>,
    /// Samples per spoke; `None` means twice the image size.
    pub n_readout: Option<usize>,
    pub noise_std: f64,
    pub sequence: SequenceConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 32,
            frames: 5,
            train: 100,
            val: 20,
            test: 20,
            seed: 1,
            split_seeds: None,
            spokes: vec![4, 8, 16, 32],
            n_readout: None,
            noise_std: 0.0,
            sequence: SequenceConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn n_readout(&self) -> usize {
        self.n_readout.unwrap_or(2 * self.size)
    }

    fn count(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }

    /// First seed of each split, in `SPLITS` order.
    pub fn seed_starts(&self) -> Result<[u64; 3]> {
        let starts = match self.split_seeds {
            Some(s) => [s.train, s.val, s.test],
            None => {
                let val = self.seed.checked_add(self.train as u64);
                let test = val.and_then(|v| v.checked_add(self.val as u64));
                match (val, test) {
                    (Some(v), Some(t)) => [self.seed, v, t],
                    _ => return Err(Error::InvalidArgument("dataset seed range overflows".into())),
                }
            }
        };
        Ok(starts)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.size >= 8 && self.size % 4 == 0,
            InvalidArgument,
            "dataset.size must be a multiple of 4 and at least 8, got {}",
            self.size
        );
        ensure!(self.frames >= 1, InvalidArgument, "dataset.frames must be at least 1");
        ensure!(!self.spokes.is_empty(), InvalidArgument, "dataset.spokes must not be empty");
        ensure!(
            self.spokes.iter().all(|&s| s >= 1),
            InvalidArgument,
            "dataset.spokes entries must be positive"
        );
        let mut sorted = self.spokes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(
            sorted.len() == self.spokes.len(),
            InvalidArgument,
            "dataset.spokes contains duplicates"
        );
        ensure!(self.n_readout() >= 2, InvalidArgument, "dataset.n_readout must be at least 2");
        ensure!(
            self.noise_std.is_finite() && self.noise_std >= 0.0,
            InvalidArgument,
            "dataset.noise_std must be non-negative"
        );
        self.sequence.validate()?;
        let starts = self.seed_starts()?;
        let ranges: Vec<(u64, u64)> = SPLITS
            .iter()
            .zip(starts)
            .map(|(s, start)| {
                start
                    .checked_add(self.count(s) as u64)
                    .map(|end| (start, end))
                    .ok_or_else(|| Error::InvalidArgument(format!("{} seed range overflows", s)))
            })
            .collect::<Result<_>>()?;
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (ranges[i], ranges[j]);
                let empty = a.0 == a.1 || b.0 == b.1;
                ensure!(
                    empty || a.1 <= b.0 || b.1 <= a.0,
                    InvalidArgument,
                    "seed ranges of {} {:?} and {} {:?} overlap",
                    SPLITS[i],
                    a,
                    SPLITS[j],
                    b
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub seed_start: u64,
    pub count: usize,
    pub sequences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub size: usize,
    pub frames: usize,
    pub n_readout: usize,
    pub spokes: Vec<usize>,
    pub noise_std: f64,
    pub splits: Vec<SplitEntry>,
    pub config: DatasetConfig,
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    seed: u64,
    frames: usize,
    roi: Roi,
    params: InterventionParams,
}

/// Golden-angle trajectory of frame `t`; frames continue the angle sequence
/// where the previous frame stopped.
pub fn frame_trajectory(spokes: usize, n_readout: usize, t: usize) -> Result<RadialTrajectory> {
    golden_angle_trajectory(spokes, n_readout, (t * spokes) as u64)
}

pub fn kspace_noise_seed(sequence_seed: u64, spokes: usize, t: usize) -> u64 {
    derive_seed(&[sequence_seed, 4, spokes as u64, t as u64])
}

/// `E x` on `traj`, plus complex Gaussian noise when `noise_std > 0`.
pub fn simulate_kspace(gt: &ComplexImage, traj: &RadialTrajectory, noise_std: f64, noise_seed: u64) -> Result<KSpaceData> {
    let mut y = nudft_forward(gt, traj)?;
    if noise_std > 0.0 {
        y.add_noise(noise_std, &mut ChaCha8Rng::seed_from_u64(noise_seed));
    }
    Ok(y)
}

fn kspace_name(spokes: usize, t: usize) -> String {
    format!("s{spokes:03}_f{t:02}.ksp")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_sequence(dir: &Path, seq: &FrameSequence, cfg: &DatasetConfig) -> Result<()> {
    let ks_dir = dir.join("kspace");
    std::fs::create_dir_all(&ks_dir).map_err(|e| Error::io(&ks_dir, e))?;
    write_image(&dir.join("reference.img"), &seq.reference)?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_image(&dir.join(format!("frame_{t:02}.img")), f)?;
        for &s in &cfg.spokes {
            let traj = frame_trajectory(s, cfg.n_readout(), t)?;
            let y = simulate_kspace(f, &traj, cfg.noise_std, kspace_noise_seed(seq.seed, s, t))?;
            write_kspace(&ks_dir.join(kspace_name(s, t)), &y)?;
        }
    }
    write_json(
        &dir.join("meta.json"),
        &SequenceMeta {
            seed: seq.seed,
            frames: seq.frames.len(),
            roi: seq.roi,
            params: seq.params.clone(),
        },
    )
}

/// Generates every split into `out` and writes `manifest.json`. The result is a
/// pure function of `cfg`.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let starts = cfg.seed_starts()?;
    let splits: Vec<SplitEntry> = SPLITS
        .iter()
        .zip(starts)
        .map(|(name, seed_start)| {
            let count = cfg.count(name);
            SplitEntry {
                name: name.to_string(),
                seed_start,
                count,
                sequences: (0..count).map(|i| format!("{name}/seq_{i:05}")).collect(),
            }
        })
        .collect();
    let jobs: Vec<(u64, &String)> = splits
        .iter()
        .flat_map(|s| s.sequences.iter().enumerate().map(move |(i, rel)| (s.seed_start + i as u64, rel)))
        .collect();
    jobs.par_iter().try_for_each(|&(seed, rel)| -> Result<()> {
        let seq = generate_sequence(seed, cfg.size, cfg.frames, &cfg.sequence)?;
        write_sequence(&out.join(rel), &seq, cfg)
    })?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        size: cfg.size,
        frames: cfg.frames,
        n_readout: cfg.n_readout(),
        spokes: cfg.spokes.clone(),
        noise_std: cfg.noise_std,
        splits,
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read access to a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let manifest: Manifest = read_json(&path)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", manifest.format_version),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("dataset has no split named {name}")))
    }

    pub fn sequence_dir(&self, split: &str, index: usize) -> Result<PathBuf> {
        let s = self.split(split)?;
        let rel = s.sequences.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("split {} has {} sequences, index {} requested", split, s.count, index))
        })?;
        Ok(self.root.join(rel))
    }

    pub fn load_sequence(&self, split: &str, index: usize) -> Result<FrameSequence> {
        let dir = self.sequence_dir(split, index)?;
        let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
        let reference = read_image(&dir.join("reference.img"))?;
        let frames = (0..meta.frames)
            .map(|t| read_image(&dir.join(format!("frame_{t:02}.img"))))
            .collect::<Result<Vec<_>>>()?;
        let seq = FrameSequence {
            reference,
            frames,
            roi: meta.roi,
            params: meta.params,
            seed: meta.seed,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn load_kspace(&self, split: &str, index: usize, spokes: usize) -> Result<Vec<KSpaceData>> {
        ensure!(
            self.manifest.spokes.contains(&spokes),
            InvalidArgument,
            "dataset holds no {}-spoke acquisitions (available: {:?})",
            spokes,
            self.manifest.spokes
        );
        let dir = self.sequence_dir(split, index)?.join("kspace");
        (0..self.manifest.frames)
            .map(|t| read_kspace(&dir.join(kspace_name(spokes, t))))
            .collect()
    }
}
