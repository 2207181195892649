use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use convlr_core::baseline::grasp_reconstruct;
use convlr_core::kspace::regrid_reconstruct;
use convlr_core::metrics::{aggregate_report, evaluate_frame, write_pgm, MetricItem, MetricReport};
use convlr_core::network::{Ablation, ConvLr, OperatorCache, SequenceInput};
use convlr_core::simdata::{build_dataset, read_image, write_image, Dataset, Manifest};
use convlr_core::training::{checkpoint_ablation, train, TrainOutcome};
use convlr_core::ComplexImage;

use crate::checks::{gradcheck_suite, CheckOutcome};
use crate::config::{ExperimentConfig, Method};
use crate::error::{invalid, CliError, CliResult};

pub const RECON_INDEX: &str = "recon.json";
const RECON_VERSION: u32 = 1;

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn open_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::open(dir).map_err(|e| CliError::Validation(format!("dataset {}: {e}", dir.display())))
}

pub(crate) fn require_out(out: Option<&Path>) -> CliResult<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| CliError::Validation("--out is required for this command".into()))
}

/// Generates the dataset described by `cfg.dataset` into `out`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<Manifest> {
    cfg.validate()?;
    let manifest = build_dataset(&cfg.dataset, out)?;
    write_config(out, cfg)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainFlags {
    pub mask_lstm: bool,
    pub no_discriminator: bool,
    pub no_initializer: bool,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.mask_lstm {
            cfg.training.mask_lstm = true;
        }
        if self.no_discriminator {
            cfg.training.use_discriminator = false;
        }
        if self.no_initializer {
            cfg.training.use_initializer = false;
        }
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let dataset = open_dataset(dataset_dir)?;
    let m = dataset.manifest();
    if !m.spokes.contains(&cfg.training.spokes) {
        return Err(CliError::Validation(format!(
            "dataset holds no {}-spoke acquisitions (available: {:?})",
            cfg.training.spokes, m.spokes
        )));
    }
    if cfg.training.frames.is_some_and(|f| f > m.frames) {
        return Err(CliError::Validation(format!(
            "training.frames exceeds the {} frames stored in the dataset",
            m.frames
        )));
    }
    if m.size % 4 != 0 {
        return Err(CliError::Validation(format!("image size {} is not divisible by 4", m.size)));
    }
    create_dir(out)?;
    write_config(out, cfg)?;
    Ok(train(&dataset, &cfg.model, &cfg.training, out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRun {
    pub spokes: usize,
    pub frames: usize,
    pub dir: String,
    pub sequences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconIndex {
    pub format_version: u32,
    pub method: Method,
    pub label: String,
    pub split: String,
    pub runs: Vec<ReconRun>,
}

impl ReconIndex {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RECON_INDEX);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let idx: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("cannot parse {}: {e}", path.display())))?;
        if idx.format_version != RECON_VERSION {
            return Err(CliError::Validation(format!(
                "{}: unsupported format_version {}",
                path.display(),
                idx.format_version
            )));
        }
        Ok(idx)
    }
}

#[derive(Clone, Debug)]
pub struct ReconOptions {
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
    pub spokes: Vec<usize>,
    pub frames: Vec<usize>,
    pub split: String,
    pub label: Option<String>,
}

#[derive(Serialize)]
struct SequenceTiming {
    sequence: String,
    total_seconds: f64,
    seconds_per_frame: f64,
}

#[derive(Serialize)]
struct RunTiming {
    spokes: usize,
    frames: usize,
    sequences: Vec<SequenceTiming>,
}

fn sequence_name(dataset: &Dataset, split: &str, i: usize) -> CliResult<String> {
    let dir = dataset.sequence_dir(split, i)?;
    Ok(dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("sequence")
        .to_string())
}

fn reconstruct_sequence(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    opts: &ReconOptions,
    model: Option<&(ConvLr, Ablation)>,
    cache: &OperatorCache,
    i: usize,
    spokes: usize,
    frames: usize,
    seq_dir: &Path,
) -> anyhow::Result<()> {
    let (w, h) = (dataset.manifest().size, dataset.manifest().size);
    let images: Vec<ComplexImage> = match opts.method {
        Method::GroundTruth => dataset.load_sequence(&opts.split, i)?.frames[..frames].to_vec(),
        Method::Regrid => {
            let y = dataset.load_kspace(&opts.split, i, spokes)?;
            y[..frames]
                .iter()
                .map(|f| regrid_reconstruct(f, w, h))
                .collect::<convlr_core::Result<_>>()?
        }
        Method::Grasp => {
            let y = dataset.load_kspace(&opts.split, i, spokes)?;
            let res = grasp_reconstruct(&y[..frames], w, h, &cfg.grasp)?;
            let path = seq_dir.join("objective.jsonl");
            let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            for (k, v) in res.objective.iter().enumerate() {
                let step = if k == 0 { 0.0 } else { res.steps[k - 1] };
                writeln!(f, "{}", serde_json::json!({"iteration": k, "objective": v, "step": step}))?;
            }
            f.flush()?;
            res.frames
        }
        Method::Convlr => {
            let (net, ablation) = model.expect("model loaded for convlr");
            let seq = dataset.load_sequence(&opts.split, i)?;
            let y = dataset.load_kspace(&opts.split, i, spokes)?;
            let input = SequenceInput::with_cache(&seq.reference, &y[..frames], cache)?;
            net.reconstruct(&input, frames, *ablation)?
        }
    };
    for (t, img) in images.iter().enumerate() {
        write_image(&seq_dir.join(format!("frame_{t:02}.img")), img)?;
    }
    Ok(())
}

/// Reconstructs every sequence of the split for each spoke count and frame count.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path, opts: &ReconOptions) -> CliResult<ReconIndex> {
    cfg.validate()?;
    let dataset = open_dataset(dataset_dir)?;
    let m = dataset.manifest();
    let split = dataset.split(&opts.split).map_err(invalid)?;
    let count = cfg.evaluation.max_sequences.map_or(split.count, |n| n.min(split.count));
    if let Some(s) = opts.spokes.iter().find(|s| !m.spokes.contains(s)) {
        return Err(CliError::Validation(format!(
            "dataset holds no {s}-spoke acquisitions (available: {:?})",
            m.spokes
        )));
    }
    if let Some(f) = opts.frames.iter().find(|&&f| f == 0 || f > m.frames) {
        return Err(CliError::Validation(format!("frame count {f} must lie in 1..={}", m.frames)));
    }
    if opts.spokes.is_empty() || opts.frames.is_empty() {
        return Err(CliError::Validation("at least one spoke count and frame count are needed".into()));
    }
    let model = match opts.method {
        Method::Convlr => {
            let ckpt = opts
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Validation("--method convlr needs --checkpoint".into()))?;
            let net = ConvLr::load(ckpt).map_err(|e| CliError::Validation(format!("checkpoint: {e}")))?;
            let recorded = checkpoint_ablation(ckpt).map_err(invalid)?;
            let ablation = cfg.evaluation.ablation.or(recorded).unwrap_or_default();
            Some((net, ablation))
        }
        _ => None,
    };
    let names = (0..count)
        .map(|i| sequence_name(&dataset, &opts.split, i))
        .collect::<CliResult<Vec<_>>>()?;

    create_dir(out)?;
    write_config(out, cfg)?;
    let cache = OperatorCache::new();
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    for &spokes in &opts.spokes {
        for &frames in &opts.frames {
            let dir = format!("s{spokes:03}_t{frames}");
            let times = (0..count)
                .into_par_iter()
                .map(|i| {
                    let seq_dir = out.join(&dir).join(&names[i]);
                    create_dir(&seq_dir)?;
                    let start = Instant::now();
                    reconstruct_sequence(cfg, &dataset, opts, model.as_ref(), &cache, i, spokes, frames, &seq_dir)
                        .with_context(|| format!("sequence {}", names[i]))?;
                    let total = start.elapsed().as_secs_f64();
                    Ok(SequenceTiming {
                        sequence: names[i].clone(),
                        total_seconds: total,
                        seconds_per_frame: total / frames as f64,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            timings.push(RunTiming {
                spokes,
                frames,
                sequences: times,
            });
            runs.push(ReconRun {
                spokes,
                frames,
                dir,
                sequences: names.clone(),
            });
        }
    }
    let index = ReconIndex {
        format_version: RECON_VERSION,
        method: opts.method,
        label: opts.label.clone().unwrap_or_else(|| opts.method.name().to_string()),
        split: opts.split.clone(),
        runs,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(out.join(RECON_INDEX), text).context("writing reconstruction index")?;
    let text = serde_json::to_string_pretty(&serde_json::json!({ "runs": timings })).expect("timings serialize");
    std::fs::write(out.join("timings.json"), text).context("writing timings")?;
    Ok(index)
}

/// Scores reconstructions against the dataset ground truth and writes `report.csv` / `report.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, dataset_dir: &Path, recon_dirs: &[PathBuf], out: &Path) -> CliResult<MetricReport> {
    cfg.validate()?;
    if recon_dirs.is_empty() {
        return Err(CliError::Validation("at least one reconstruction directory is required".into()));
    }
    let dataset = open_dataset(dataset_dir)?;
    let m = dataset.manifest();
    let indices = recon_dirs
        .iter()
        .map(|d| ReconIndex::load(d))
        .collect::<CliResult<Vec<_>>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for idx in &indices {
        let split = dataset.split(&idx.split).map_err(invalid)?;
        for run in &idx.runs {
            if run.frames == 0 || run.frames > m.frames || run.sequences.len() > split.count {
                return Err(CliError::Validation(format!(
                    "{} run {} does not align with the dataset manifest",
                    idx.label, run.dir
                )));
            }
            if !seen.insert((idx.label.clone(), run.spokes, run.frames)) {
                return Err(CliError::Validation(format!(
                    "duplicate reconstruction for {} at {} spokes, {} frames",
                    idx.label, run.spokes, run.frames
                )));
            }
        }
    }

    let mut jobs = Vec::new();
    for (idx, dir) in indices.iter().zip(recon_dirs) {
        for run in &idx.runs {
            for (i, name) in run.sequences.iter().enumerate() {
                jobs.push((idx, dir, run, i, name));
            }
        }
    }
    let items = jobs
        .par_iter()
        .map(|&(idx, dir, run, i, name)| -> anyhow::Result<Vec<MetricItem>> {
            let gt = dataset.load_sequence(&idx.split, i)?;
            (0..run.frames)
                .map(|t| {
                    let path = dir.join(&run.dir).join(name).join(format!("frame_{t:02}.img"));
                    let rec = read_image(&path)?;
                    let metrics = evaluate_frame(&rec, &gt.frames[t], &gt.roi, &cfg.metrics)
                        .with_context(|| format!("scoring {}", path.display()))?;
                    Ok(MetricItem {
                        method: idx.label.clone(),
                        spokes: run.spokes,
                        frames: run.frames,
                        sequence: name.clone(),
                        frame: t,
                        metrics,
                    })
                })
                .collect()
        })
        .collect::<anyhow::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    create_dir(out)?;
    write_config(out, cfg)?;
    let report = aggregate_report(&items, cfg.metrics)?;
    report.write(out, "report")?;
    if cfg.evaluation.export_pgm {
        export_pgm(&jobs, &dataset, out)?;
    }
    Ok(report)
}

type Job<'a> = (&'a ReconIndex, &'a PathBuf, &'a ReconRun, usize, &'a String);

fn export_pgm(jobs: &[Job<'_>], dataset: &Dataset, out: &Path) -> anyhow::Result<()> {
    for &(idx, dir, run, i, name) in jobs {
        let gt = dataset.load_sequence(&idx.split, i)?;
        let target = out.join("pgm").join(&idx.label).join(&run.dir);
        create_dir(&target)?;
        for t in 0..run.frames {
            let rec = read_image(&dir.join(&run.dir).join(name).join(format!("frame_{t:02}.img")))?;
            let max = gt.frames[t].magnitude().into_iter().fold(0.0, f64::max);
            let file = target.join(format!("{name}_f{t:02}.pgm"));
            write_pgm(&file, &rec.magnitude(), rec.width(), rec.height(), max)?;
        }
    }
    Ok(())
}

/// Runs the finite-difference suite and optionally writes `gradcheck.json` into `out`.
pub fn cmd_gradcheck(sabotage: bool, eps: f64, tolerance: f64, out: Option<&Path>) -> CliResult<Vec<CheckOutcome>> {
    if !(1e-7..=1e-3).contains(&eps) || !(tolerance > 0.0) {
        return Err(CliError::Validation(
            "--eps must lie in [1e-7, 1e-3] and --tolerance must be positive".into(),
        ));
    }
    let results = gradcheck_suite(sabotage, eps, tolerance);
    if let Some(dir) = out {
        create_dir(dir)?;
        let text = serde_json::to_string_pretty(&results).expect("outcomes serialize");
        std::fs::write(dir.join("gradcheck.json"), text).context("writing gradcheck.json")?;
    }
    Ok(results)
}
