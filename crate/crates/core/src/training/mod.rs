//! Four-term generator loss, the image discriminator and the alternating
//! adversarial training loop.

mod adam;
mod discriminator;
mod losses;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use discriminator::{discriminator_forward, discriminator_loss, Discriminator, DISCRIMINATOR_SLOPE};
pub use losses::{
    loss_fmse, loss_gen, loss_imse, loss_perceptual, loss_total, LossParts, LossWeights, PerceptualNet, PROB_CLAMP,
};

use crate::autodiff::{write_checkpoint, DiffTensor, Graph};
use crate::error::{ensure, Error, Result};
use crate::network::{Ablation, ConvLr, NetworkConfig, OperatorCache, SequenceInput};
use crate::simdata::{derive_seed, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    /// Steps per moving-average window.
    pub window: usize,
    /// Stop when the latest window improves on the previous one by less than this fraction.
    pub min_relative_improvement: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            window: 100,
            min_relative_improvement: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Frames per training sequence; `None` uses every stored frame.
    pub frames: Option<usize>,
    pub spokes: usize,
    pub use_discriminator: bool,
    pub use_initializer: bool,
    pub mask_lstm: bool,
    pub weights: LossWeights,
    pub squared_imse: bool,
    pub discriminator_channels: usize,
    pub perceptual_channels: usize,
    pub perceptual_seed: u64,
    /// Train on the first `n` sequences of the split only.
    pub max_sequences: Option<usize>,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub early_stop: Option<EarlyStopConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            adam: AdamConfig::default(),
            seed: 0,
            frames: None,
            spokes: 8,
            use_discriminator: true,
            use_initializer: true,
            mask_lstm: false,
            weights: LossWeights::default(),
            squared_imse: false,
            discriminator_channels: 8,
            perceptual_channels: 8,
            perceptual_seed: 7,
            max_sequences: None,
            checkpoint_every: 0,
            early_stop: Some(EarlyStopConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, InvalidArgument, "training.steps must be at least 1");
        ensure!(self.batch_size >= 1, InvalidArgument, "training.batch_size must be at least 1");
        ensure!(self.spokes >= 1, InvalidArgument, "training.spokes must be at least 1");
        for (n, v) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            ensure!(v.is_finite() && v > 0.0, InvalidArgument, "training.{} must be positive", n);
        }
        let a = &self.adam;
        ensure!(
            (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0,
            InvalidArgument,
            "training.adam needs betas in [0,1) and a positive eps"
        );
        ensure!(self.frames != Some(0), InvalidArgument, "training.frames must be at least 1");
        ensure!(self.max_sequences != Some(0), InvalidArgument, "training.max_sequences must be at least 1");
        ensure!(
            self.discriminator_channels >= 1 && self.perceptual_channels >= 1,
            InvalidArgument,
            "discriminator and perceptual channels must be positive"
        );
        if let Some(e) = &self.early_stop {
            ensure!(e.window >= 1, InvalidArgument, "training.early_stop.window must be at least 1");
            ensure!(
                e.min_relative_improvement.is_finite() && e.min_relative_improvement >= 0.0,
                InvalidArgument,
                "training.early_stop.min_relative_improvement must be non-negative"
            );
        }
        self.weights.validate()
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_initializer: self.use_initializer,
            mask_lstm: self.mask_lstm,
        }
    }
}

/// One training sequence: operators for every frame and the ground truth as channel grids.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub input: SequenceInput,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    samples: Vec<TrainingSample>,
    frames: usize,
}

impl TrainingData {
    pub fn new(samples: Vec<TrainingSample>, frames: usize) -> Result<Self> {
        ensure!(!samples.is_empty(), InvalidArgument, "no training sequences");
        ensure!(frames >= 1, InvalidArgument, "at least one training frame is needed");
        for s in &samples {
            ensure!(
                s.input.n_frames() >= frames && s.targets.len() >= frames,
                InvalidArgument,
                "training sequence shorter than {} frames",
                frames
            );
        }
        Ok(Self { samples, frames })
    }

    /// Loads `split` at the given spoke count, sharing normal operators across sequences.
    pub fn load(
        dataset: &Dataset,
        split: &str,
        spokes: usize,
        frames: Option<usize>,
        max_sequences: Option<usize>,
    ) -> Result<Self> {
        let available = dataset.split(split)?.count;
        let n = max_sequences.map_or(available, |m| m.min(available));
        let frames = frames.unwrap_or(dataset.manifest().frames);
        ensure!(
            frames <= dataset.manifest().frames,
            InvalidArgument,
            "{} training frames requested, dataset has {}",
            frames,
            dataset.manifest().frames
        );
        let cache = OperatorCache::new();
        let samples = (0..n)
            .into_par_iter()
            .map(|i| {
                let seq = dataset.load_sequence(split, i)?;
                let y = dataset.load_kspace(split, i, spokes)?;
                let input = SequenceInput::with_cache(&seq.reference, &y[..frames], &cache)?;
                let targets = seq.frames[..frames].iter().map(|f| f.to_channels()).collect();
                Ok(TrainingSample { input, targets })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, frames)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub imse: f64,
    pub fmse: f64,
    pub perceptual: f64,
    pub gen: f64,
    pub discriminator: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

struct ForwardPass {
    graph: Graph,
    params: Vec<DiffTensor>,
    recs: Vec<DiffTensor>,
    base: DiffTensor,
    parts: LossParts,
}

/// Generator, optional discriminator and their optimizers, advanced one batch at a time.
pub struct Trainer {
    cfg: TrainConfig,
    model: ConvLr,
    disc: Discriminator,
    perceptual: PerceptualNet,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(network: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ConvLr::new(network, derive_seed(&[cfg.seed, 1]))?;
        let disc = Discriminator::new(cfg.discriminator_channels, derive_seed(&[cfg.seed, 2]))?;
        Ok(Self::from_parts(cfg, model, disc))
    }

    pub fn from_parts(cfg: TrainConfig, model: ConvLr, disc: Discriminator) -> Self {
        let opt_g = Adam::new(model.params(), cfg.lr_generator, cfg.adam);
        let opt_d = Adam::new(disc.params(), cfg.lr_discriminator, cfg.adam);
        Self {
            perceptual: PerceptualNet::new(cfg.perceptual_channels, cfg.perceptual_seed),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3])),
            cfg,
            model,
            disc,
            opt_g,
            opt_d,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        }
    }

    pub fn model(&self) -> &ConvLr {
        &self.model
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size.min(n);
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn forward_pass(&self, sample: &TrainingSample, frames: usize) -> Result<ForwardPass> {
        let mut g = Graph::new();
        let (tensors, params) = self.model.bind(&mut g, true);
        let recs = self.model.forward(&mut g, &tensors, &sample.input, frames, self.cfg.ablation())?;
        let (base, parts) = reconstruction_loss(
            &mut g,
            &recs,
            &sample.targets,
            [sample.input.height(), sample.input.width()],
            &self.cfg.weights,
            self.cfg.squared_imse,
            &self.perceptual,
        )?;
        Ok(ForwardPass {
            graph: g,
            params,
            recs,
            base,
            parts,
        })
    }

    /// Discriminator loss and gradients for one sequence, with reconstructions held fixed.
    fn discriminator_pass(&self, sample: &TrainingSample, recs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let bound = self.disc.params().bind(&mut g, true);
        let shape = [2, sample.input.height(), sample.input.width()];
        let mut total: Option<DiffTensor> = None;
        for (t, rec) in recs.iter().enumerate() {
            let real = g.constant(&shape, sample.targets[t].clone())?;
            let fake = g.constant(&shape, rec.clone())?;
            let dr = discriminator_forward(&mut g, bound.tensors(), real)?;
            let df = discriminator_forward(&mut g, bound.tensors(), fake)?;
            let l = discriminator_loss(&mut g, dr, df)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("at least one frame"), 1.0 / recs.len() as f64);
        g.backward(loss)?;
        Ok((g.scalar(loss), self.disc.params().gradients(&g, &bound)))
    }

    /// Adds the adversarial term (when enabled) and back-propagates into the generator.
    fn generator_backward(&self, mut pass: ForwardPass) -> Result<(LossParts, f64, Vec<Vec<f64>>)> {
        let g = &mut pass.graph;
        let mut loss = pass.base;
        if self.cfg.use_discriminator {
            let d = self.disc.bind(g, false);
            let gen = adversarial_loss(g, &d, &pass.recs)?;
            pass.parts.gen = g.scalar(gen);
            loss = g.add(loss, gen)?;
        }
        let total = g.scalar(loss);
        g.backward(loss)?;
        let grads = pass.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
        Ok((pass.parts, total, grads))
    }

    /// Loss parts, total loss and generator gradients for one sequence under the current parameters.
    pub fn sample_gradients(&self, sample: &TrainingSample, frames: usize) -> Result<(LossParts, f64, Vec<Vec<f64>>)> {
        let pass = self.forward_pass(sample, frames)?;
        self.generator_backward(pass)
    }

    /// One discriminator update followed by one generator update on the next batch.
    pub fn step(&mut self, data: &TrainingData) -> Result<StepRecord> {
        let step = self.step;
        let batch = self.next_batch(data.len());
        let frames = data.frames();
        let scale = 1.0 / batch.len() as f64;
        let passes = batch
            .par_iter()
            .map(|&i| self.forward_pass(&data.samples[i], frames))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| non_finite_at(step, e))?;

        let mut d_loss = None;
        if self.cfg.use_discriminator {
            let recs: Vec<Vec<Vec<f64>>> = passes
                .iter()
                .map(|p| p.recs.iter().map(|&r| p.graph.value(r).to_vec()).collect())
                .collect();
            let results = batch
                .par_iter()
                .zip(recs.par_iter())
                .map(|(&i, r)| self.discriminator_pass(&data.samples[i], r))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| non_finite_at(step, e))?;
            let (loss, grads) = reduce(results, scale);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: "discriminator loss".into(),
                });
            }
            self.opt_d
                .step(self.disc.params_mut(), &grads)
                .map_err(|e| non_finite_at(step, e))?;
            d_loss = Some(loss);
        }

        let results = passes
            .into_par_iter()
            .map(|p| self.generator_backward(p))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| non_finite_at(step, e))?;
        let mut parts = LossParts::default();
        for (p, _, _) in &results {
            parts.imse += scale * p.imse;
            parts.fmse += scale * p.fmse;
            parts.perceptual += scale * p.perceptual;
            parts.gen += scale * p.gen;
        }
        let (loss, grads) = reduce(results.into_iter().map(|(_, l, g)| (l, g)).collect(), scale);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("generator loss {loss} ({parts:?})"),
            });
        }
        self.opt_g
            .step(self.model.params_mut(), &grads)
            .map_err(|e| non_finite_at(step, e))?;
        self.step += 1;
        Ok(StepRecord {
            step,
            loss,
            imse: parts.imse,
            fmse: parts.fmse,
            perceptual: parts.perceptual,
            gen: parts.gen,
            discriminator: d_loss,
        })
    }

    /// Writes the generator checkpoint with its sidecar and the discriminator next to it.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.model.save(path, extra)?;
        if self.cfg.use_discriminator {
            write_checkpoint(&discriminator_path(path), self.disc.params())?;
        }
        Ok(())
    }
}

/// Frame-averaged `w_img·iMSE + w_freq·fMSE + w_perc·perc` against constant targets.
pub fn reconstruction_loss(
    g: &mut Graph,
    recs: &[DiffTensor],
    targets: &[Vec<f64>],
    [h, w]: [usize; 2],
    weights: &LossWeights,
    squared_imse: bool,
    perceptual: &PerceptualNet,
) -> Result<(DiffTensor, LossParts)> {
    ensure!(!recs.is_empty(), InvalidArgument, "no reconstructed frames");
    ensure!(
        targets.len() >= recs.len(),
        DimensionMismatch,
        "{} targets for {} frames",
        targets.len(),
        recs.len()
    );
    let mut parts = LossParts::default();
    let mut total: Option<DiffTensor> = None;
    for (t, &rec) in recs.iter().enumerate() {
        let gt = g.constant(&[2, h, w], targets[t].clone())?;
        let i = loss_imse(g, rec, gt, squared_imse)?;
        let f = loss_fmse(g, rec, gt)?;
        let p = loss_perceptual(g, perceptual, rec, gt)?;
        parts.imse += g.scalar(i);
        parts.fmse += g.scalar(f);
        parts.perceptual += g.scalar(p);
        let i = g.scale(i, weights.image);
        let f = g.scale(f, weights.frequency);
        let p = g.scale(p, weights.perceptual);
        let s = g.add(i, f)?;
        let s = g.add(s, p)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let inv = 1.0 / recs.len() as f64;
    parts.imse *= inv;
    parts.fmse *= inv;
    parts.perceptual *= inv;
    Ok((g.scale(total.expect("non-empty"), inv), parts))
}

/// Frame-averaged `−ln D(rec)` for discriminator tensors `d`.
pub fn adversarial_loss(g: &mut Graph, d: &[DiffTensor], recs: &[DiffTensor]) -> Result<DiffTensor> {
    ensure!(!recs.is_empty(), InvalidArgument, "no reconstructed frames");
    let mut gen: Option<DiffTensor> = None;
    for &rec in recs {
        let p = discriminator_forward(g, d, rec)?;
        let l = loss_gen(g, p)?;
        gen = Some(match gen {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(g.scale(gen.expect("non-empty"), 1.0 / recs.len() as f64))
}

pub fn discriminator_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}.disc.ckpt"))
}

fn non_finite_at(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::NonFiniteLoss { step, detail },
        other => other,
    }
}

/// Ordered sum of per-sample losses and gradients, scaled by `scale`.
fn reduce(results: Vec<(f64, Vec<Vec<f64>>)>, scale: f64) -> (f64, Vec<Vec<f64>>) {
    let mut iter = results.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for a in acc.iter_mut().flatten() {
        *a *= scale;
    }
    (loss * scale, acc)
}

/// Moving-average plateau test over the loss history.
pub fn should_stop(history: &[f64], cfg: &EarlyStopConfig) -> bool {
    let w = cfg.window;
    if history.len() < 2 * w {
        return false;
    }
    let n = history.len();
    let cur: f64 = history[n - w..].iter().sum::<f64>() / w as f64;
    let prev: f64 = history[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    prev - cur < cfg.min_relative_improvement * prev.abs()
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    record: &'a StepRecord,
    elapsed_s: f64,
    timestamp: f64,
}

/// Trains on the `train` split of `dataset`, writing `train_log.jsonl`,
/// optional periodic checkpoints under `checkpoints/` and `model.ckpt` into `out`.
pub fn train(dataset: &Dataset, network: &NetworkConfig, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    network.validate()?;
    let data = TrainingData::load(dataset, "train", cfg.spokes, cfg.frames, cfg.max_sequences)?;
    train_on(&data, network, cfg, out)
}

pub fn train_on(data: &TrainingData, network: &NetworkConfig, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = Trainer::new(network.clone(), cfg.clone())?;
    let log_path = out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut stopped_early = false;
    let extra = |steps: usize, early: bool| {
        serde_json::json!({
            "training": cfg,
            "frames": data.frames(),
            "sequences": data.len(),
            "steps_run": steps,
            "stopped_early": early,
            "ablation": cfg.ablation(),
        })
    };
    for _ in 0..cfg.steps {
        let rec = trainer.step(data)?;
        history.push(rec.loss);
        let line = LogLine {
            record: &rec,
            elapsed_s: start.elapsed().as_secs_f64(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Json {
            path: log_path.clone(),
            source: e,
        })?;
        writeln!(log, "{text}").map_err(|e| Error::io(&log_path, e))?;
        let done = trainer.steps_done();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            let dir = out.join("checkpoints");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            trainer.save(&dir.join(format!("step_{done:06}.ckpt")), extra(done, false))?;
        }
        if let Some(es) = &cfg.early_stop {
            if should_stop(&history, es) {
                stopped_early = true;
                break;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = out.join("model.ckpt");
    trainer.save(&checkpoint, extra(trainer.steps_done(), stopped_early))?;
    Ok(TrainOutcome {
        steps_run: trainer.steps_done(),
        stopped_early,
        final_loss: history.last().copied().unwrap_or(f64::NAN),
        checkpoint,
        log: log_path,
    })
}

/// Ablation recorded in a checkpoint sidecar by [`train`], if any.
pub fn checkpoint_ablation(checkpoint: &Path) -> Result<Option<Ablation>> {
    let side = crate::network::sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: side.clone(),
        source: e,
    })?;
    match v.get("extra").and_then(|e| e.get("ablation")) {
        Some(a) => serde_json::from_value(a.clone())
            .map(Some)
            .map_err(|e| Error::Json { path: side, source: e }),
        None => Ok(None),
    }
}
