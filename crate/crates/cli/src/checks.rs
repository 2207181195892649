//! Finite-difference checks over every differentiable op and composed block.

use serde::Serialize;

use convlr_core::autodiff::{grad_check, random_projection, DiffTensor, GradCheckReport, Graph, LeafSpec};
use convlr_core::kspace::{golden_angle_trajectory, nudft_forward};
use convlr_core::network::{
    conv_lstm_cell, deconv_head, dc_soft_projection, encoder_forward, initializer_forward, rnn_block_forward,
    Ablation, ConvLr, ConvTensors, FrameOperator, InitializerTensors, LstmState, LstmTensors, NetworkConfig,
    SequenceInput,
};
use convlr_core::training::{
    adversarial_loss, discriminator_forward, discriminator_loss, loss_fmse, loss_gen, loss_imse, loss_perceptual,
    reconstruction_loss, Discriminator, LossWeights, PerceptualNet,
};
use convlr_core::{ComplexImage, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub max_rel_error: Option<f64>,
    pub worst_leaf: Option<usize>,
    pub worst_index: Option<usize>,
    pub analytic: Option<f64>,
    pub numeric: Option<f64>,
    pub checked: Option<usize>,
    pub error: Option<String>,
}

impl CheckOutcome {
    fn from_report(name: &str, r: Result<GradCheckReport>, tol: f64) -> Self {
        match r {
            Ok(r) => Self {
                name: name.into(),
                passed: r.max_rel_error <= tol,
                max_rel_error: Some(r.max_rel_error),
                worst_leaf: Some(r.worst_leaf),
                worst_index: Some(r.worst_index),
                analytic: Some(r.analytic),
                numeric: Some(r.numeric),
                checked: Some(r.checked),
                error: None,
            },
            Err(e) => Self {
                name: name.into(),
                passed: false,
                max_rel_error: None,
                worst_leaf: None,
                worst_index: None,
                analytic: None,
                numeric: None,
                checked: None,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match (&self.error, self.max_rel_error) {
            (Some(e), _) => format!("{verdict} {:<22} error: {e}", self.name),
            (None, Some(err)) => format!(
                "{verdict} {:<22} max_rel_error {:.3e} at leaf {} index {} (analytic {:.6e}, numeric {:.6e}, {} coords)",
                self.name,
                err,
                self.worst_leaf.unwrap_or(0),
                self.worst_index.unwrap_or(0),
                self.analytic.unwrap_or(f64::NAN),
                self.numeric.unwrap_or(f64::NAN),
                self.checked.unwrap_or(0)
            ),
            _ => format!("{verdict} {}", self.name),
        }
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[DiffTensor]) -> Result<DiffTensor> + Sync>;

struct Case {
    name: &'static str,
    leaves: Vec<LeafSpec>,
    build: Builder,
}

fn r(shape: &[usize], scale: f64, seed: u64) -> LeafSpec {
    LeafSpec::random(shape, scale, seed)
}

fn random_image(w: usize, h: usize, seed: u64) -> ComplexImage {
    ComplexImage::from_channels(w, h, &r(&[2, h, w], 0.5, seed).values).expect("shape matches")
}

fn frame_operator(w: usize, h: usize, spokes: usize, seed: u64) -> FrameOperator {
    let traj = golden_angle_trajectory(spokes, 2 * w, seed).expect("valid trajectory");
    let y = nudft_forward(&random_image(w, h, seed), &traj).expect("valid shapes");
    FrameOperator::new(&y, w, h).expect("valid frame")
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        blocks: 2,
        channels: 3,
        lstm_layers: 2,
        ..NetworkConfig::default()
    }
}

fn randomized_model(seed: u64) -> ConvLr {
    let mut m = ConvLr::new(tiny_network(), seed).expect("valid config");
    let ids: Vec<_> = m.params().ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        let is_alpha = m.params().entry(id).name.ends_with("alpha");
        let len = m.params().entry(id).values.len();
        let z = r(&[len], 0.3, seed * 1000 + n as u64).values;
        for (v, z) in m.params_mut().values_mut(id).iter_mut().zip(z) {
            *v = if is_alpha { 0.7 + 0.1 * z } else { z };
        }
    }
    m
}

fn op_cases() -> Vec<Case> {
    let unary = |name: &'static str, f: fn(&mut Graph, DiffTensor) -> DiffTensor| Case {
        name,
        leaves: vec![r(&[2, 3, 4], 2.0, 3)],
        build: Box::new(move |g, t| {
            let y = f(g, t[0]);
            random_projection(g, y, 4)
        }),
    };
    vec![
        Case {
            name: "conv2d",
            leaves: vec![r(&[2, 6, 5], 1.0, 1), r(&[3, 2, 3, 3], 0.5, 2), r(&[3], 0.2, 3)],
            build: Box::new(|g, t| {
                let y = g.conv2d(t[0], t[1], Some(t[2]), 1, 1)?;
                random_projection(g, y, 5)
            }),
        },
        Case {
            name: "conv2d_strided",
            leaves: vec![r(&[2, 7, 8], 1.0, 6), r(&[3, 2, 3, 3], 0.5, 7)],
            build: Box::new(|g, t| {
                let y = g.conv2d(t[0], t[1], None, 2, 1)?;
                random_projection(g, y, 8)
            }),
        },
        Case {
            name: "conv_transpose2d",
            leaves: vec![r(&[3, 3, 4], 1.0, 9), r(&[3, 2, 3, 3], 0.5, 10), r(&[2], 0.2, 11)],
            build: Box::new(|g, t| {
                let y = g.conv_transpose2d(t[0], t[1], Some(t[2]), 2, 1, 1)?;
                random_projection(g, y, 12)
            }),
        },
        unary("sigmoid", |g, x| g.sigmoid(x)),
        unary("tanh", |g, x| g.tanh(x)),
        unary("leaky_relu", |g, x| g.leaky_relu(x, 0.2)),
        unary("scale", |g, x| g.scale(x, -1.7)),
        Case {
            name: "add_sub_hadamard",
            leaves: vec![r(&[2, 3, 3], 1.0, 13), r(&[2, 3, 3], 1.0, 14)],
            build: Box::new(|g, t| {
                let a = g.add(t[0], t[1])?;
                let s = g.sub(t[0], t[1])?;
                let y = g.hadamard(a, s)?;
                random_projection(g, y, 15)
            }),
        },
        Case {
            name: "mul_scalar",
            leaves: vec![r(&[2, 3, 3], 1.0, 16), r(&[1], 1.0, 17)],
            build: Box::new(|g, t| {
                let y = g.mul_scalar(t[0], t[1])?;
                random_projection(g, y, 18)
            }),
        },
        Case {
            name: "concat_slice",
            leaves: vec![r(&[2, 3, 3], 1.0, 19), r(&[3, 3, 3], 1.0, 20)],
            build: Box::new(|g, t| {
                let c = g.concat_channels(&[t[0], t[1]])?;
                let y = g.slice_channels(c, 1, 3)?;
                random_projection(g, y, 21)
            }),
        },
        Case {
            name: "reductions",
            leaves: vec![r(&[2, 3, 3], 1.0, 22)],
            build: Box::new(|g, t| {
                let a = g.sum(t[0]);
                let b = g.sum_squares(t[0]);
                let c = g.l2_norm(t[0]);
                let ab = g.add(a, b)?;
                g.add(ab, c)
            }),
        },
        Case {
            name: "mean_pool_linear",
            leaves: vec![r(&[4, 3, 3], 1.0, 23), r(&[2, 4], 1.0, 24), r(&[2], 1.0, 25)],
            build: Box::new(|g, t| {
                let p = g.mean_pool(t[0])?;
                let y = g.linear(p, t[1], t[2])?;
                random_projection(g, y, 26)
            }),
        },
        Case {
            name: "log_losses",
            leaves: vec![LeafSpec::new(&[1], vec![0.3]), LeafSpec::new(&[1], vec![0.6])],
            build: Box::new(|g, t| {
                let a = g.neg_log_clamped(t[0], 1e-7, 1.0 - 1e-7);
                let b = g.neg_log1m_clamped(t[1], 1e-7, 1.0 - 1e-7);
                g.add(a, b)
            }),
        },
    ]
}

fn block_cases() -> Vec<Case> {
    let frame = frame_operator(8, 8, 4, 3);
    let dc_scale = 1.0 / frame.lambda_max();
    let model = randomized_model(70);
    let n_model = model.params().len();
    let mut block_leaves = model.leaf_specs();
    block_leaves.push(LeafSpec::new(&[2, 8, 8], frame.regrid().to_vec()));
    for s in 0..4 {
        block_leaves.push(r(&[3, 2, 2], if s % 2 == 0 { 1.0 } else { 0.5 }, 72 + s));
    }
    let seq_frames: Vec<_> = (0..2)
        .map(|t| {
            let traj = golden_angle_trajectory(6, 32, (6 * t) as u64).expect("valid trajectory");
            nudft_forward(&random_image(16, 16, 90 + t as u64), &traj).expect("valid shapes")
        })
        .collect();
    let seq = SequenceInput::new(&random_image(16, 16, 89), &seq_frames).expect("valid sequence");
    let targets: Vec<Vec<f64>> = (0..2).map(|t| random_image(16, 16, 95 + t).to_channels()).collect();
    let tiny = ConvLr::new(
        NetworkConfig {
            blocks: 1,
            lstm_layers: 1,
            ..tiny_network()
        },
        5,
    )
    .expect("valid config");
    let mut total_leaves = tiny.leaf_specs();
    for (n, l) in total_leaves.iter_mut().enumerate() {
        let z = r(&[l.values.len()], 0.3, 40 + n as u64).values;
        l.values = if l.values.len() == 1 { vec![0.6] } else { z };
    }
    let disc = Discriminator::new(2, 5).expect("valid discriminator");
    let disc_leaves: Vec<LeafSpec> = disc
        .params()
        .entries()
        .iter()
        .map(|e| LeafSpec::new(&e.shape, e.values.clone()))
        .chain([r(&[2, 8, 8], 1.0, 8)])
        .collect();
    let real = r(&[2, 8, 8], 1.0, 9).values;
    let perceptual = PerceptualNet::new(2, 6);
    let gt = r(&[2, 8, 6], 1.0, 31).values;

    let frame_dc = frame.clone();
    let frame_block = frame;
    vec![
        Case {
            name: "encoder",
            leaves: vec![
                r(&[2, 8, 8], 1.0, 20),
                r(&[3, 2, 3, 3], 0.5, 21),
                r(&[3], 0.1, 22),
                r(&[3, 3, 3, 3], 0.5, 23),
                r(&[3], 0.1, 24),
            ],
            build: Box::new(|g, t| {
                let p = [ConvTensors { w: t[1], b: t[2] }, ConvTensors { w: t[3], b: t[4] }];
                let f = encoder_forward(g, t[0], &p, 0.2)?;
                random_projection(g, f, 25)
            }),
        },
        Case {
            name: "conv_lstm_cell",
            leaves: vec![
                r(&[2, 4, 4], 1.0, 10),
                r(&[3, 4, 4], 1.0, 11),
                r(&[3, 4, 4], 0.5, 12),
                r(&[12, 2, 3, 3], 0.3, 13),
                r(&[12, 3, 3, 3], 0.3, 14),
                r(&[12], 0.3, 15),
            ],
            build: Box::new(|g, t| {
                let p = LstmTensors { wx: t[3], wh: t[4], b: t[5] };
                let s = conv_lstm_cell(g, t[0], LstmState { c: t[1], h: t[2] }, &p)?;
                let both = g.concat_channels(&[s.c, s.h])?;
                random_projection(g, both, 16)
            }),
        },
        Case {
            name: "deconv_head",
            leaves: vec![
                r(&[3, 2, 2], 1.0, 30),
                r(&[3, 3, 3, 3], 0.5, 31),
                r(&[3], 0.1, 32),
                r(&[3, 2, 3, 3], 0.5, 33),
                r(&[2], 0.1, 34),
            ],
            build: Box::new(|g, t| {
                let p = [ConvTensors { w: t[1], b: t[2] }, ConvTensors { w: t[3], b: t[4] }];
                let y = deconv_head(g, t[0], &p, 0.2)?;
                random_projection(g, y, 35)
            }),
        },
        Case {
            name: "initializer",
            leaves: vec![
                r(&[2, 8, 8], 1.0, 36),
                r(&[3, 2, 3, 3], 0.5, 37),
                r(&[3], 0.1, 38),
                r(&[3, 3, 3, 3], 0.5, 39),
                r(&[3], 0.1, 40),
                r(&[12, 3, 3, 3], 0.15, 41),
                r(&[12], 0.1, 42),
            ],
            build: Box::new(|g, t| {
                let p = InitializerTensors {
                    layers: [
                        ConvTensors { w: t[1], b: t[2] },
                        ConvTensors { w: t[3], b: t[4] },
                        ConvTensors { w: t[5], b: t[6] },
                    ],
                };
                let states = initializer_forward(g, t[0], &p, 2, 1, 0.2)?;
                let parts: Vec<DiffTensor> = states.iter().flatten().flat_map(|s| [s.c, s.h]).collect();
                let all = g.concat_channels(&parts)?;
                random_projection(g, all, 43)
            }),
        },
        Case {
            name: "dc_layer",
            leaves: vec![r(&[2, 8, 8], 1.0, 51), LeafSpec::new(&[1], vec![0.8])],
            build: Box::new(move |g, t| {
                let o = dc_soft_projection(g, t[0], t[1], &frame_dc, dc_scale)?;
                random_projection(g, o, 52)
            }),
        },
        Case {
            name: "rnn_block",
            leaves: block_leaves,
            build: Box::new(move |g, t| {
                let m = model.tensors_from(&t[..n_model])?;
                let n = n_model;
                let st = [LstmState { c: t[n + 1], h: t[n + 2] }, LstmState { c: t[n + 3], h: t[n + 4] }];
                let (out, next) = rnn_block_forward(g, t[n], &st, &frame_block, dc_scale, &m.blocks[0], false, 0.2)?;
                let all = g.concat_channels(&[next[1].c, next[1].h])?;
                let a = random_projection(g, out, 76)?;
                let b = random_projection(g, all, 77)?;
                g.add(a, b)
            }),
        },
        Case {
            name: "discriminator",
            leaves: disc_leaves,
            build: Box::new(move |g, t| {
                let rl = g.constant(&[2, 8, 8], real.clone())?;
                let dr = discriminator_forward(g, &t[..8], rl)?;
                let df = discriminator_forward(g, &t[..8], t[8])?;
                let bce = discriminator_loss(g, dr, df)?;
                let gen = loss_gen(g, df)?;
                g.add(bce, gen)
            }),
        },
        Case {
            name: "image_losses",
            leaves: vec![r(&[2, 8, 6], 1.0, 30)],
            build: Box::new(move |g, t| {
                let y = g.constant(&[2, 8, 6], gt.clone())?;
                let i = loss_imse(g, t[0], y, false)?;
                let f = loss_fmse(g, t[0], y)?;
                let p = loss_perceptual(g, &perceptual, t[0], y)?;
                let s = g.add(i, f)?;
                g.add(s, p)
            }),
        },
        Case {
            name: "generator_total_loss",
            leaves: total_leaves,
            build: Box::new(move |g, t| {
                let m = tiny.tensors_from(t)?;
                let recs = tiny.forward(g, &m, &seq, 2, Ablation::default())?;
                let net = PerceptualNet::new(2, 6);
                let (base, _) =
                    reconstruction_loss(g, &recs, &targets, [16, 16], &LossWeights::default(), false, &net)?;
                let d = disc.bind(g, false);
                let gen = adversarial_loss(g, &d, &recs)?;
                g.add(base, gen)
            }),
        },
    ]
}

/// Runs every check. With `sabotage` set, the sigmoid backward pass is deliberately wrong.
pub fn gradcheck_suite(sabotage: bool, eps: f64, tolerance: f64) -> Vec<CheckOutcome> {
    let cases: Vec<Case> = op_cases().into_iter().chain(block_cases()).collect();
    cases
        .iter()
        .map(|c| {
            let report = grad_check(
                |g, t| {
                    g.set_sabotage(sabotage);
                    (c.build)(g, t)
                },
                &c.leaves,
                eps,
            );
            CheckOutcome::from_report(c.name, report, tolerance)
        })
        .collect()
}
