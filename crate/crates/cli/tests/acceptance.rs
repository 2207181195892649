//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;

use convlr_cli::checks::{gradcheck_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use convlr_cli::{
    cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_train, ExperimentConfig, Method, ReconOptions,
};
use convlr_core::autodiff::{Graph, LeafSpec};
use convlr_core::baseline::{cg_least_squares, grasp_reconstruct, GraspConfig};
use convlr_core::kspace::{golden_angle_trajectory, nudft_forward, nyquist_spokes, regrid_reconstruct, KSpaceData, Nudft};
use convlr_core::metrics::{nmse, psnr, ssim, MetricReport};
use convlr_core::network::{dc_soft_projection, Ablation, ConvLr, FrameOperator, NetworkConfig, SequenceInput};
use convlr_core::simdata::generate_reference_phantom;
use convlr_core::training::loss_fmse;
use convlr_core::ComplexImage;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(w: usize, h: usize, seed: u64) -> ComplexImage {
    ComplexImage::from_channels(w, h, &LeafSpec::random(&[2, h, w], 1.0, seed).values).unwrap()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Direct evaluation of `Σ_p x[p] exp(−2πi k·p)` over centered pixel coordinates.
fn brute_force_dft(x: &ComplexImage, coords: &[[f64; 2]]) -> Vec<Complex64> {
    let (w, h) = (x.width(), x.height());
    coords
        .iter()
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for py in 0..h {
                for px in 0..w {
                    let (cx, cy) = (px as f64 - (w / 2) as f64, py as f64 - (h / 2) as f64);
                    let phase = -2.0 * std::f64::consts::PI * (k[0] * cx + k[1] * cy);
                    acc += x.get(px, py) * Complex64::from_polar(1.0, phase);
                }
            }
            acc
        })
        .collect()
}

fn criterion_operator() -> Outcome {
    let (w, h) = (16, 16);
    let mut worst_adj: f64 = 0.0;
    for case in 0..100u64 {
        let traj = golden_angle_trajectory(8, 2 * w, case * 13).unwrap();
        let op = Nudft::for_trajectory(w, h, &traj);
        let x = random_image(w, h, 1000 + case);
        let yv = LeafSpec::random(&[2 * traj.len()], 1.0, 5000 + case).values;
        let y: Vec<Complex64> = (0..traj.len()).map(|i| Complex64::new(yv[2 * i], yv[2 * i + 1])).collect();
        let ex = op.forward(&x).unwrap();
        let ehy = op.adjoint(&y, None).unwrap();
        let lhs = dot(&ex, &y);
        let rhs = dot(x.values(), ehy.values());
        worst_adj = worst_adj.max((lhs - rhs).norm() / (norm(&ex) * norm(&y)));
    }
    let mut worst_dft: f64 = 0.0;
    for case in 0..5u64 {
        let x = random_image(w, h, 7000 + case);
        let cart: Vec<[f64; 2]> = (0..h)
            .flat_map(|v| (0..w).map(move |u| [(u as f64 - 8.0) / 16.0, (v as f64 - 8.0) / 16.0]))
            .collect();
        let radial = golden_angle_trajectory(8, 2 * w, case).unwrap();
        for coords in [cart.as_slice(), radial.coords()] {
            let fast = Nudft::new(w, h, coords).forward(&x).unwrap();
            let slow = brute_force_dft(&x, coords);
            let diff: Vec<Complex64> = fast.iter().zip(&slow).map(|(a, b)| a - b).collect();
            worst_dft = worst_dft.max(norm(&diff) / norm(&slow));
        }
    }
    outcome(
        worst_adj < 1e-10 && worst_dft < 1e-9,
        format!("adjoint identity worst {worst_adj:.2e} (< 1e-10), NUDFT vs direct DFT worst {worst_dft:.2e} (< 1e-9)"),
    )
}

fn criterion_gradients() -> Outcome {
    let clean = gradcheck_suite(false, DEFAULT_EPS, DEFAULT_TOLERANCE);
    let failed: Vec<_> = clean.iter().filter(|c| !c.passed).map(|c| c.line()).collect();
    let worst = clean.iter().filter_map(|c| c.max_rel_error).fold(0.0, f64::max);
    let sabotaged = gradcheck_suite(true, DEFAULT_EPS, DEFAULT_TOLERANCE);
    let caught = sabotaged.iter().filter(|c| !c.passed).count();
    let names: Vec<&str> = clean.iter().map(|c| c.name.as_str()).collect();
    let blocks = ["encoder", "conv_lstm_cell", "deconv_head", "dc_layer", "rnn_block", "discriminator"];
    let covered = blocks.iter().all(|b| names.contains(b));
    outcome(
        failed.is_empty() && caught > 0 && covered,
        format!(
            "{} checks, worst relative error {worst:.2e} (<= 1e-4), sabotaged sigmoid caught by {caught} checks{}",
            clean.len(),
            if failed.is_empty() { String::new() } else { format!("; failures: {failed:?}") }
        ),
    )
}

/// Largest eigenvalue of `EᴴE` by power iteration on the direct forward and adjoint transforms.
fn power_iteration(op: &Nudft, w: usize, h: usize, seed: u64) -> f64 {
    let mut v = random_image(w, h, seed);
    let mut lambda = 0.0;
    for _ in 0..200 {
        let n = v.norm();
        v = v.scaled(1.0 / n);
        let av = op.adjoint(&op.forward(&v).unwrap(), None).unwrap();
        lambda = dot(av.values(), v.values()).re;
        v = av;
    }
    lambda
}

fn criterion_data_consistency() -> Outcome {
    let (w, h) = (16, 16);
    let mut identity = true;
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for case in 0..50u64 {
        let traj = golden_angle_trajectory(8, 2 * w, case * 7).unwrap();
        let y = nudft_forward(&random_image(w, h, 100 + case), &traj).unwrap();
        let op = Nudft::for_trajectory(w, h, &traj);
        let sigma2 = power_iteration(&op, w, h, 900 + case);
        let frame = FrameOperator::new(&y, w, h).unwrap();
        let x_in = random_image(w, h, 300 + case);
        let residual = |x: &ComplexImage| {
            let ex = op.forward(x).unwrap();
            let d: Vec<Complex64> = ex.iter().zip(y.samples()).map(|(a, b)| a - b).collect();
            norm(&d)
        };
        let run = |a: f64| {
            let mut g = Graph::new();
            let x = g.constant(&[2, h, w], x_in.to_channels()).unwrap();
            let at = g.constant(&[1], vec![a]).unwrap();
            let o = dc_soft_projection(&mut g, x, at, &frame, 1.0).unwrap();
            ComplexImage::from_channels(w, h, g.value(o)).unwrap()
        };
        identity &= run(0.0) == x_in;
        let before = residual(&x_in);
        for a in [1.0 / sigma2, 0.5 / sigma2, 0.1 / sigma2] {
            let after = residual(&run(a));
            worst_ratio = worst_ratio.max(after / before);
            if after > before {
                violations += 1;
            }
        }
    }
    outcome(
        identity && violations == 0,
        format!(
            "alpha = 0 identity {}; 50 cases x 3 steps <= 1/sigma_max^2: {violations} residual increases, worst ratio {worst_ratio:.4}",
            if identity { "exact" } else { "BROKEN" }
        ),
    )
}

fn criterion_metrics() -> Outcome {
    let x = LeafSpec::random(&[256], 1.0, 3).values.iter().map(|v| v.abs().min(1.0)).collect::<Vec<_>>();
    let s = ssim(&x, &x).unwrap();
    let n = nmse(&x, &x).unwrap();
    let mut gt: Vec<f64> = (0..256).map(|i| (i % 17) as f64 / 16.0).collect();
    gt[0] = 1.0;
    let rec: Vec<f64> = gt.iter().map(|v| v + 0.1).collect();
    let p = psnr(&rec, &gt).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let a = LeafSpec::random(&[2, 12, 10], 1.0, 40 + seed);
        let b = LeafSpec::random(&[2, 12, 10], 1.0, 80 + seed);
        let mut g = Graph::new();
        let ta = g.constant(&a.shape, a.values.clone()).unwrap();
        let tb = g.constant(&b.shape, b.values.clone()).unwrap();
        let f = loss_fmse(&mut g, ta, tb).unwrap();
        let d2: f64 = a.values.iter().zip(&b.values).map(|(p, q)| (p - q) * (p - q)).sum();
        let oracle = 120.0 * d2;
        worst = worst.max((g.scalar(f) - oracle).abs() / oracle);
    }
    let pass = (s - 1.0).abs() <= 1e-12 && n == 0.0 && (p - 20.0).abs() <= 1e-9 && worst <= 1e-9;
    outcome(
        pass,
        format!("SSIM(x,x) - 1 = {:.1e}, NMSE(x,x) = {n}, PSNR case {p:.12} dB, frequency loss vs N*|diff|^2 worst {worst:.1e}", s - 1.0),
    )
}

fn criterion_baseline() -> Outcome {
    let mut monotone = true;
    let mut checked = 0;
    for (seed, spokes) in [(3u64, 5usize), (4, 8), (5, 13)] {
        let img = generate_reference_phantom(seed, 16).unwrap();
        let ys: Vec<KSpaceData> = (0..3)
            .map(|t| {
                let f = img.scaled(1.0 + 0.05 * t as f64);
                nudft_forward(&f, &golden_angle_trajectory(spokes, 32, (t * spokes) as u64).unwrap()).unwrap()
            })
            .collect();
        for lambda in [0.1, 1.0, 10.0] {
            let r = grasp_reconstruct(&ys, 16, 16, &GraspConfig { lambda, n_iter: 40, ..GraspConfig::default() }).unwrap();
            monotone &= r.objective.windows(2).all(|w| w[1] <= w[0]);
            checked += r.objective.len() - 1;
        }
    }
    let n = 16;
    let img = generate_reference_phantom(11, n).unwrap();
    let spokes = nyquist_spokes(n);
    let ys: Vec<KSpaceData> = (0..2)
        .map(|t| nudft_forward(&img, &golden_angle_trajectory(spokes, 2 * n, (t * spokes) as u64).unwrap()).unwrap())
        .collect();
    let iters = 200;
    let r = grasp_reconstruct(&ys, n, n, &GraspConfig { lambda: 0.0, n_iter: iters, ..GraspConfig::default() }).unwrap();
    let mut worst_nmse: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for (f, y) in r.frames.iter().zip(&ys) {
        let e = f.nmse_to(&img);
        let x0 = regrid_reconstruct(y, n, n).unwrap();
        let cg = cg_least_squares(y, n, n, &x0, iters).unwrap().nmse_to(&img);
        worst_nmse = worst_nmse.max(e);
        worst_gap = worst_gap.max((e - cg).abs());
    }
    outcome(
        monotone && worst_nmse < 0.01 && worst_gap <= 1e-3,
        format!(
            "objective non-increasing over {checked} iterations: {monotone}; lambda = 0 at {spokes} spokes: NMSE {worst_nmse:.2e} (< 0.01), |GRASP - CG| {worst_gap:.2e} (<= 1e-3)"
        ),
    )
}

fn randomized_model(seed: u64) -> ConvLr {
    let cfg = NetworkConfig {
        blocks: 2,
        channels: 4,
        lstm_layers: 2,
        ..NetworkConfig::default()
    };
    let mut m = ConvLr::new(cfg, seed).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        let len = m.params().entry(id).values.len();
        let alpha = m.params().entry(id).name.ends_with("alpha");
        let z = LeafSpec::random(&[len], 0.3, seed * 100 + n as u64).values;
        for (v, z) in m.params_mut().values_mut(id).iter_mut().zip(z) {
            *v = if alpha { 0.6 + z } else { z };
        }
    }
    m
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.size = 32;
    cfg.dataset.frames = 7;
    cfg.dataset.train = 4;
    cfg.dataset.val = 1;
    cfg.dataset.test = 2;
    cfg.dataset.spokes = vec![8, 26];
    cfg.model = NetworkConfig {
        blocks: 1,
        channels: 4,
        lstm_layers: 1,
        ..NetworkConfig::default()
    };
    cfg.training.steps = 4;
    cfg.training.batch_size = 2;
    cfg.training.discriminator_channels = 2;
    cfg.training.perceptual_channels = 2;
    cfg.training.early_stop = None;
    cfg.grasp.n_iter = 10;
    cfg.evaluation.spokes = vec![8];
    cfg.evaluation.frames = vec![3, 5, 7];
    cfg
}

fn recon(method: Method, checkpoint: Option<PathBuf>, spokes: Vec<usize>, frames: Vec<usize>, label: &str) -> ReconOptions {
    ReconOptions {
        method,
        checkpoint,
        spokes,
        frames,
        split: "test".into(),
        label: Some(label.into()),
    }
}

fn criterion_causality(work: &Path) -> Outcome {
    let (w, h, spokes) = (16, 16, 6);
    let mut broken = Vec::new();
    let mut compared = 0;
    for (k, &t_len) in [3usize, 5, 7].iter().enumerate() {
        let model = randomized_model(10 + k as u64);
        let reference = random_image(w, h, 20);
        let frames: Vec<KSpaceData> = (0..t_len)
            .map(|t| {
                let traj = golden_angle_trajectory(spokes, 2 * w, (t * spokes) as u64).unwrap();
                nudft_forward(&random_image(w, h, 30 + t as u64), &traj).unwrap()
            })
            .collect();
        let base = model
            .reconstruct(&SequenceInput::new(&reference, &frames).unwrap(), t_len, Ablation::default())
            .unwrap();
        for t in 0..t_len - 1 {
            let mut perturbed = frames.clone();
            for s in perturbed[t + 1].samples_mut() {
                *s += Complex64::new(0.37, -0.21);
            }
            let out = model
                .reconstruct(&SequenceInput::new(&reference, &perturbed).unwrap(), t_len, Ablation::default())
                .unwrap();
            for u in 0..=t {
                compared += 1;
                if out[u].to_channels().iter().zip(base[u].to_channels()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    broken.push((t_len, t, u));
                }
            }
            if out[t + 1] == base[t + 1] {
                broken.push((t_len, t, t + 1));
            }
        }
    }
    let cfg = tiny_config();
    let end_to_end = (|| -> anyhow::Result<Vec<usize>> {
        let data = work.join("data");
        cmd_simulate(&cfg, &data)?;
        let run = cmd_train(&cfg, &data, &work.join("run"))?;
        let r = work.join("recon");
        cmd_reconstruct(&cfg, &data, &r, &recon(Method::Convlr, Some(run.checkpoint), vec![8], vec![3, 5, 7], "convlr"))?;
        let report = cmd_evaluate(&cfg, &data, &[r], &work.join("report"))?;
        Ok(report.cells.iter().map(|c| c.frames).collect())
    })();
    let sweep_ok = matches!(&end_to_end, Ok(f) if f == &vec![3, 5, 7]);
    outcome(
        broken.is_empty() && sweep_ok,
        format!(
            "{compared} earlier-frame outputs bitwise unchanged after perturbing a later frame (violations {broken:?}); CLI frame sweep T in {{3,5,7}}: {}",
            match &end_to_end {
                Ok(f) => format!("report cells for T = {f:?}"),
                Err(e) => format!("failed: {e:#}"),
            }
        ),
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_determinism(work: &Path) -> Outcome {
    let cfg = tiny_config();
    let mut trees = Vec::new();
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    let result = (|| -> anyhow::Result<()> {
        for rep in 0..2 {
            let root = work.join(format!("rep{rep}"));
            let data = root.join("data");
            cmd_simulate(&cfg, &data)?;
            trees.push(files(&data));
            let run = cmd_train(&cfg, &data, &root.join("run"))?;
            let mut c = files(&root.join("run"));
            c.remove(Path::new("train_log.jsonl"));
            ckpts.push(c);
            let a = root.join("convlr");
            let b = root.join("grasp");
            cmd_reconstruct(&cfg, &data, &a, &recon(Method::Convlr, Some(run.checkpoint), vec![8], vec![5], "convlr"))?;
            cmd_reconstruct(&cfg, &data, &b, &recon(Method::Grasp, None, vec![8], vec![5], "grasp"))?;
            cmd_evaluate(&cfg, &data, &[a, b], &root.join("report"))?;
            reports.push(files(&root.join("report")));
        }
        Ok(())
    })();
    if let Err(e) = result {
        return outcome(false, format!("pipeline failed: {e:#}"));
    }
    let same_data = trees[0] == trees[1];
    let same_ckpt = ckpts[0] == ckpts[1] && ckpts[0].keys().any(|k| k.ends_with("model.ckpt"));
    let same_report = reports[0] == reports[1];
    outcome(
        same_data && same_ckpt && same_report,
        format!(
            "dataset {} files identical: {same_data}; checkpoints {:?} identical: {same_ckpt}; reports identical: {same_report}",
            trees[0].len(),
            ckpts[0].keys().collect::<Vec<_>>()
        ),
    )
}

struct Desk {
    report: Option<MetricReport>,
    error: Option<String>,
    minutes: f64,
    steps: Vec<(String, usize)>,
}

fn desk_experiment(work: &Path) -> Desk {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let mut steps = Vec::new();
    let result = (|| -> anyhow::Result<MetricReport> {
        let base = ExperimentConfig::load(&path)?;
        let data = work.join("data");
        cmd_simulate(&base, &data)?;
        let variants: [(&str, usize, bool, bool); 5] = [
            ("convlr", 4, false, true),
            ("convlr", 8, false, true),
            ("convlr", 32, false, true),
            ("masked", 8, true, true),
            ("no-initializer", 8, false, false),
        ];
        let mut dirs = Vec::new();
        for (label, spokes, mask, init) in variants {
            let mut cfg = base.clone();
            cfg.training.spokes = spokes;
            cfg.training.mask_lstm = mask;
            cfg.training.use_initializer = init;
            let run_dir = work.join(format!("{label}_{spokes}"));
            let run = cmd_train(&cfg, &data, &run_dir)?;
            steps.push((format!("{label}@{spokes}"), run.steps_run));
            let out = work.join(format!("recon_{label}_{spokes}"));
            cmd_reconstruct(&cfg, &data, &out, &recon(Method::Convlr, Some(run.checkpoint), vec![spokes], vec![5], label))?;
            dirs.push(out);
        }
        Ok(cmd_evaluate(&base, &data, &dirs, &work.join("report"))?)
    })();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    match result {
        Ok(r) => Desk {
            report: Some(r),
            error: None,
            minutes,
            steps,
        },
        Err(e) => Desk {
            report: None,
            error: Some(format!("{e:#}")),
            minutes,
            steps,
        },
    }
}

fn cell(report: &MetricReport, label: &str, spokes: usize, metric: &str) -> f64 {
    report
        .cell(label, spokes, 5)
        .and_then(|c| c.stat(metric))
        .map_or(f64::NAN, |s| s.mean)
}

fn criterion_trend(desk: &Desk) -> Outcome {
    let Some(r) = &desk.report else {
        return outcome(false, format!("desk experiment failed: {}", desk.error.as_deref().unwrap_or("")));
    };
    let (n4, n8, n32) = (cell(r, "convlr", 4, "nmse"), cell(r, "convlr", 8, "nmse"), cell(r, "convlr", 32, "nmse"));
    outcome(
        n32 < n8 && n8 < n4,
        format!(
            "held-out NMSE 32 spokes {n32:.4} < 8 spokes {n8:.4} < 4 spokes {n4:.4} (desk run {:.1} min on {} threads, steps {:?})",
            desk.minutes,
            rayon::current_num_threads(),
            desk.steps
        ),
    )
}

fn criterion_ablation(desk: &Desk) -> Outcome {
    let Some(r) = &desk.report else {
        return outcome(false, format!("desk experiment failed: {}", desk.error.as_deref().unwrap_or("")));
    };
    let full = cell(r, "convlr", 8, "nmse");
    let masked = cell(r, "masked", 8, "nmse");
    let ssim_init = cell(r, "convlr", 8, "ssim");
    let ssim_none = cell(r, "no-initializer", 8, "ssim");
    outcome(
        full < masked && ssim_init >= ssim_none,
        format!(
            "8 spokes: NMSE ConvLR {full:.4} < masked {masked:.4}; SSIM with initializer {ssim_init:.4} >= without {ssim_none:.4}"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "operator correctness", criterion_operator());
    record(2, "differentiation", criterion_gradients());
    record(3, "data-consistency layer", criterion_data_consistency());
    record(4, "metric oracles", criterion_metrics());
    record(5, "iterative baseline", criterion_baseline());
    let desk = desk_experiment(&work.path().join("desk"));
    record(6, "trend over spoke counts", criterion_trend(&desk));
    record(7, "ablation direction", criterion_ablation(&desk));
    record(8, "causality", criterion_causality(&work.path().join("causal")));
    record(9, "determinism", criterion_determinism(&work.path().join("determinism")));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
