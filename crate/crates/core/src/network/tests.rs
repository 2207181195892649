use super::*;
use crate::autodiff::{grad_check, random_projection};
use crate::kspace::{golden_angle_trajectory, nudft_forward, KSpaceData, Nudft};
use num_complex::Complex64;

fn random_image(w: usize, h: usize, seed: u64) -> ComplexImage {
    let spec = LeafSpec::random(&[2, h, w], 0.5, seed);
    ComplexImage::from_channels(w, h, &spec.values).unwrap()
}

fn random_frames(w: usize, h: usize, spokes: usize, t: usize, seed: u64) -> (ComplexImage, Vec<KSpaceData>) {
    let reference = random_image(w, h, seed);
    let frames = (0..t)
        .map(|i| {
            let traj = golden_angle_trajectory(spokes, 2 * w, (i * spokes) as u64).unwrap();
            nudft_forward(&random_image(w, h, seed + 1 + i as u64), &traj).unwrap()
        })
        .collect();
    (reference, frames)
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        blocks: 2,
        channels: 3,
        lstm_layers: 2,
        ..NetworkConfig::default()
    }
}

/// Model with every parameter randomized, so no gradient path is trivially zero.
fn randomized(config: NetworkConfig, seed: u64) -> ConvLr {
    let mut m = ConvLr::new(config, seed).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        let len = m.params().entry(id).values.len();
        let r = LeafSpec::random(&[len], 0.3, seed * 1000 + n as u64);
        let is_alpha = m.params().entry(id).name.ends_with("alpha");
        for (v, z) in m.params_mut().values_mut(id).iter_mut().zip(r.values) {
            *v = if is_alpha { 0.7 + 0.1 * z } else { z };
        }
    }
    m
}

fn state(g: &mut Graph, c: &[usize], seed: u64) -> LstmState {
    let cs = LeafSpec::random(c, 1.0, seed);
    let hs = LeafSpec::random(c, 0.5, seed + 1);
    LstmState {
        c: g.constant(c, cs.values).unwrap(),
        h: g.constant(c, hs.values).unwrap(),
    }
}

#[test]
fn lstm_cell_zero_parameters_give_zero_state() {
    let mut g = Graph::new();
    let x = g.constant(&[2, 4, 4], LeafSpec::random(&[2, 4, 4], 1.0, 1).values).unwrap();
    let z = |g: &mut Graph, s: &[usize]| g.constant(s, vec![0.0; s.iter().product()]).unwrap();
    let p = LstmTensors {
        wx: z(&mut g, &[12, 2, 3, 3]),
        wh: z(&mut g, &[12, 3, 3, 3]),
        b: z(&mut g, &[12]),
    };
    let prev = LstmState {
        c: z(&mut g, &[3, 4, 4]),
        h: z(&mut g, &[3, 4, 4]),
    };
    let s = conv_lstm_cell(&mut g, x, prev, &p).unwrap();
    assert!(g.value(s.c).iter().all(|&v| v == 0.0));
    assert!(g.value(s.h).iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_cell_saturated_gates_keep_cell() {
    let mut g = Graph::new();
    let x = g.constant(&[2, 4, 4], LeafSpec::random(&[2, 4, 4], 1.0, 2).values).unwrap();
    let wx = g.constant(&[12, 2, 3, 3], LeafSpec::random(&[12, 2, 3, 3], 0.1, 3).values).unwrap();
    let wh = g.constant(&[12, 3, 3, 3], LeafSpec::random(&[12, 3, 3, 3], 0.1, 4).values).unwrap();
    let mut bias = vec![0.0; 12];
    bias[..3].iter_mut().for_each(|v| *v = -20.0);
    bias[3..6].iter_mut().for_each(|v| *v = 20.0);
    let b = g.constant(&[12], bias).unwrap();
    let prev = state(&mut g, &[3, 4, 4], 5);
    let s = conv_lstm_cell(&mut g, x, prev, &LstmTensors { wx, wh, b }).unwrap();
    for (a, b) in g.value(s.c).iter().zip(g.value(prev.c)) {
        assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }
}

#[test]
fn lstm_cell_gradients() {
    let leaves = [
        LeafSpec::random(&[2, 4, 4], 1.0, 10),
        LeafSpec::random(&[3, 4, 4], 1.0, 11),
        LeafSpec::random(&[3, 4, 4], 0.5, 12),
        LeafSpec::random(&[12, 2, 3, 3], 0.3, 13),
        LeafSpec::random(&[12, 3, 3, 3], 0.3, 14),
        LeafSpec::random(&[12], 0.3, 15),
    ];
    let rep = grad_check(
        |g, t| {
            let s = conv_lstm_cell(g, t[0], LstmState { c: t[1], h: t[2] }, &LstmTensors { wx: t[3], wh: t[4], b: t[5] })?;
            let both = g.concat_channels(&[s.c, s.h])?;
            random_projection(g, both, 16)
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
}

#[test]
fn encoder_and_head_geometry() {
    let m = ConvLr::new(NetworkConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let (t, _) = m.bind(&mut g, false);
    let x = g.constant(&[2, 32, 32], LeafSpec::random(&[2, 32, 32], 1.0, 2).values).unwrap();
    let f = encoder_forward(&mut g, x, &t.blocks[0].encoder, 0.2).unwrap();
    assert_eq!(g.shape(f), &[32, 8, 8]);
    let y = deconv_head(&mut g, f, &t.blocks[0].head, 0.2).unwrap();
    assert_eq!(g.shape(y), &[2, 32, 32]);

    let zero = g.constant(&[2, 32, 32], vec![0.0; 2048]).unwrap();
    let f0 = encoder_forward(&mut g, zero, &t.blocks[0].encoder, 0.2).unwrap();
    assert!(g.value(f0).iter().all(|&v| v == 0.0));
    let m2 = randomized(NetworkConfig::default(), 3);
    let mut g2 = Graph::new();
    let (t2, _) = m2.bind(&mut g2, false);
    let zb = g2.constant(&[32], vec![0.0; 32]).unwrap();
    let zb2 = g2.constant(&[2], vec![0.0; 2]).unwrap();
    let head = [
        ConvTensors { w: t2.blocks[0].head[0].w, b: zb },
        ConvTensors { w: t2.blocks[0].head[1].w, b: zb2 },
    ];
    let zf = g2.constant(&[32, 8, 8], vec![0.0; 2048]).unwrap();
    let out = deconv_head(&mut g2, zf, &head, 0.2).unwrap();
    assert!(g2.value(out).iter().all(|&v| v == 0.0));

    let odd = g.constant(&[2, 30, 30], vec![0.0; 1800]).unwrap();
    assert!(encoder_forward(&mut g, odd, &t.blocks[0].encoder, 0.2).is_err());
}

#[test]
fn encoder_and_head_gradients() {
    let leaves = [
        LeafSpec::random(&[2, 8, 8], 1.0, 20),
        LeafSpec::random(&[3, 2, 3, 3], 0.5, 21),
        LeafSpec::random(&[3], 0.1, 22),
        LeafSpec::random(&[3, 3, 3, 3], 0.5, 23),
        LeafSpec::random(&[3], 0.1, 24),
    ];
    let rep = grad_check(
        |g, t| {
            let f = encoder_forward(g, t[0], &[ConvTensors { w: t[1], b: t[2] }, ConvTensors { w: t[3], b: t[4] }], 0.2)?;
            random_projection(g, f, 25)
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "encoder {:?}", rep);

    let leaves = [
        LeafSpec::random(&[3, 2, 2], 1.0, 30),
        LeafSpec::random(&[3, 3, 3, 3], 0.5, 31),
        LeafSpec::random(&[3], 0.1, 32),
        LeafSpec::random(&[3, 2, 3, 3], 0.5, 33),
        LeafSpec::random(&[2], 0.1, 34),
    ];
    let rep = grad_check(
        |g, t| {
            let y = deconv_head(g, t[0], &[ConvTensors { w: t[1], b: t[2] }, ConvTensors { w: t[3], b: t[4] }], 0.2)?;
            assert_eq!(g.shape(y), &[2, 8, 8]);
            random_projection(g, y, 35)
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "head {:?}", rep);
}

#[test]
fn initializer_states() {
    let cfg = tiny_config();
    let m = ConvLr::new(cfg.clone(), 4).unwrap();
    let mut g = Graph::new();
    let (t, _) = m.bind(&mut g, false);
    let zero = g.constant(&[2, 8, 8], vec![0.0; 128]).unwrap();
    let st = initializer_forward(&mut g, zero, &t.initializer, 2, 2, 0.2).unwrap();
    assert_eq!(st.len(), 2);
    for s in st.iter().flatten() {
        assert_eq!(g.shape(s.c), &[3, 2, 2]);
        assert_eq!(g.shape(s.h), &[3, 2, 2]);
        assert!(g.value(s.c).iter().chain(g.value(s.h)).all(|&v| v == 0.0));
    }
    let norm = |g: &Graph, st: &[Vec<LstmState>]| -> f64 {
        st.iter()
            .flatten()
            .flat_map(|s| g.value(s.c).iter().chain(g.value(s.h)))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    };
    let a = g.constant(&[2, 8, 8], random_image(8, 8, 5).to_channels()).unwrap();
    let b = g.constant(&[2, 8, 8], random_image(8, 8, 6).to_channels()).unwrap();
    let sa = initializer_forward(&mut g, a, &t.initializer, 2, 2, 0.2).unwrap();
    let sb = initializer_forward(&mut g, b, &t.initializer, 2, 2, 0.2).unwrap();
    assert!((norm(&g, &sa) - norm(&g, &sb)).abs() > 1e-6);
}

#[test]
fn dc_identity_cases_and_contraction() {
    let (w, h) = (8, 8);
    let traj = golden_angle_trajectory(5, 16, 0).unwrap();
    let truth = random_image(w, h, 40);
    let y = nudft_forward(&truth, &traj).unwrap();
    let frame = FrameOperator::new(&y, w, h).unwrap();
    let mut g = Graph::new();
    let x_in = random_image(w, h, 41);
    let x = g.constant(&[2, h, w], x_in.to_channels()).unwrap();
    let zero = g.constant(&[1], vec![0.0]).unwrap();
    let out = dc_soft_projection(&mut g, x, zero, &frame, 1.0).unwrap();
    assert_eq!(g.value(out), g.value(x));

    let xt = g.constant(&[2, h, w], truth.to_channels()).unwrap();
    let one = g.constant(&[1], vec![1.0]).unwrap();
    let out = dc_soft_projection(&mut g, xt, one, &frame, 1.0 / frame.lambda_max()).unwrap();
    let diff: f64 = g.value(out).iter().zip(g.value(xt)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "{}", diff);

    let op = Nudft::for_trajectory(w, h, &traj);
    let resid = |img: &[f64]| -> f64 {
        let e = op.forward(&ComplexImage::from_channels(w, h, img).unwrap()).unwrap();
        e.iter().zip(y.samples()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
    };
    let out = dc_soft_projection(&mut g, x, one, &frame, 1.0 / frame.lambda_max()).unwrap();
    assert!(resid(g.value(out)) <= resid(g.value(x)));
}

#[test]
fn dc_gradients() {
    let (w, h) = (8, 8);
    let traj = golden_angle_trajectory(4, 16, 3).unwrap();
    let y = nudft_forward(&random_image(w, h, 50), &traj).unwrap();
    let frame = FrameOperator::new(&y, w, h).unwrap();
    let scale = 1.0 / frame.lambda_max();
    let leaves = [LeafSpec::random(&[2, h, w], 1.0, 51), LeafSpec::new(&[1], vec![0.8])];
    let rep = grad_check(
        |g, t| {
            let o = dc_soft_projection(g, t[0], t[1], &frame, scale)?;
            random_projection(g, o, 52)
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
}

#[test]
fn masked_block_ignores_states() {
    let m = randomized(tiny_config(), 60);
    let (r, ys) = random_frames(8, 8, 4, 1, 61);
    let input = SequenceInput::new(&r, &ys).unwrap();
    let run = |seed: u64| -> Vec<f64> {
        let mut g = Graph::new();
        let (t, _) = m.bind(&mut g, false);
        let x = g.constant(&[2, 8, 8], input.frames()[0].regrid().to_vec()).unwrap();
        let st = vec![state(&mut g, &[3, 2, 2], seed), state(&mut g, &[3, 2, 2], seed + 7)];
        let (out, next) =
            rnn_block_forward(&mut g, x, &st, &input.frames()[0], input.dc_scale(), &t.blocks[0], true, 0.2).unwrap();
        assert_eq!(g.value(next[0].c), g.value(st[0].c));
        g.value(out).to_vec()
    };
    assert_eq!(run(1), run(100));
}

#[test]
fn block_gradients() {
    let m = randomized(tiny_config(), 70);
    let (r, ys) = random_frames(8, 8, 4, 1, 71);
    let input = SequenceInput::new(&r, &ys).unwrap();
    let mut leaves = m.leaf_specs();
    let n = leaves.len();
    leaves.push(LeafSpec::new(&[2, 8, 8], input.frames()[0].regrid().to_vec()));
    leaves.push(LeafSpec::random(&[3, 2, 2], 1.0, 72));
    leaves.push(LeafSpec::random(&[3, 2, 2], 0.5, 73));
    leaves.push(LeafSpec::random(&[3, 2, 2], 1.0, 74));
    leaves.push(LeafSpec::random(&[3, 2, 2], 0.5, 75));
    let rep = grad_check(
        |g, t| {
            let model = m.tensors_from(&t[..n])?;
            let st = [LstmState { c: t[n + 1], h: t[n + 2] }, LstmState { c: t[n + 3], h: t[n + 4] }];
            let (out, next) =
                rnn_block_forward(g, t[n], &st, &input.frames()[0], input.dc_scale(), &model.blocks[0], false, 0.2)?;
            let all = g.concat_channels(&[next[1].c, next[1].h])?;
            let a = random_projection(g, out, 76)?;
            let b = random_projection(g, all, 77)?;
            g.add(a, b)
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
}

#[test]
fn zero_alpha_and_zero_kernels() {
    let (r, ys) = random_frames(8, 8, 4, 1, 80);
    let input = SequenceInput::new(&r, &ys).unwrap();
    let frame = &input.frames()[0];
    let mut m = randomized(tiny_config(), 81);
    for id in m.params().ids().collect::<Vec<_>>() {
        if m.params().entry(id).name.ends_with("alpha") {
            m.params_mut().values_mut(id)[0] = 0.0;
        }
    }
    let mut g = Graph::new();
    let (t, _) = m.bind(&mut g, false);
    let st = zero_states(&mut g, 1, 2, 3, 2, 2);
    let x = g.constant(&[2, 8, 8], frame.regrid().to_vec()).unwrap();
    let (out, _) = rnn_block_forward(&mut g, x, &st[0], frame, input.dc_scale(), &t.blocks[0], false, 0.2).unwrap();
    let mut f = encoder_forward(&mut g, x, &t.blocks[0].encoder, 0.2).unwrap();
    let mut s = st[0].clone();
    for (si, l) in s.iter_mut().zip(&t.blocks[0].lstm) {
        *si = conv_lstm_cell(&mut g, f, *si, l).unwrap();
        f = g.add(f, si.h).unwrap();
    }
    let d = deconv_head(&mut g, f, &t.blocks[0].head, 0.2).unwrap();
    let cnn = g.add(x, d).unwrap();
    assert_eq!(g.value(out), g.value(cnn));

    let mut z = randomized(tiny_config(), 82);
    for id in z.params().ids().collect::<Vec<_>>() {
        if !z.params().entry(id).name.ends_with("alpha") {
            z.params_mut().values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut g = Graph::new();
    let (t, _) = z.bind(&mut g, false);
    let st = zero_states(&mut g, 1, 2, 3, 2, 2);
    let x = g.constant(&[2, 8, 8], frame.regrid().to_vec()).unwrap();
    let (out, _) = rnn_block_forward(&mut g, x, &st[0], frame, input.dc_scale(), &t.blocks[0], false, 0.2).unwrap();
    let dc = dc_soft_projection(&mut g, x, t.blocks[0].alpha, frame, input.dc_scale()).unwrap();
    assert_eq!(g.value(out), g.value(dc));
}

#[test]
fn forward_is_causal() {
    let m = randomized(tiny_config(), 90);
    for &t in &[3usize, 5, 7] {
        let (r, ys) = random_frames(8, 8, 3, t, 91);
        let base = m.reconstruct(&SequenceInput::new(&r, &ys).unwrap(), t, Ablation::default()).unwrap();
        assert_eq!(base.len(), t);
        for cut in 0..t - 1 {
            let mut ys2 = ys.clone();
            for v in ys2[cut + 1].samples_mut() {
                *v += Complex64::new(0.3, -0.2);
            }
            let pert = m.reconstruct(&SequenceInput::new(&r, &ys2).unwrap(), t, Ablation::default()).unwrap();
            assert_eq!(&base[..=cut], &pert[..=cut]);
            assert_ne!(base[cut + 1], pert[cut + 1]);
        }
    }
}

#[test]
fn untrained_model_is_data_consistency_of_regrid() {
    let m = ConvLr::new(tiny_config(), 100).unwrap();
    let (r, ys) = random_frames(8, 8, 4, 2, 101);
    let input = SequenceInput::new(&r, &ys).unwrap();
    let out = m.reconstruct(&input, 2, Ablation::default()).unwrap();
    let mut g = Graph::new();
    let a = g.constant(&[1], vec![0.5]).unwrap();
    let x = g.constant(&[2, 8, 8], input.frames()[1].regrid().to_vec()).unwrap();
    let once = dc_soft_projection(&mut g, x, a, &input.frames()[1], input.dc_scale()).unwrap();
    let twice = dc_soft_projection(&mut g, once, a, &input.frames()[1], input.dc_scale()).unwrap();
    assert_eq!(out[1].to_channels(), g.value(twice));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let m = randomized(tiny_config(), 110);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.ckpt");
    m.save(&p, serde_json::json!({"note": "test"})).unwrap();
    let back = ConvLr::load(&p).unwrap();
    assert_eq!(back.params(), m.params());
    let (r, ys) = random_frames(8, 8, 4, 2, 111);
    let input = SequenceInput::new(&r, &ys).unwrap();
    assert_eq!(
        m.reconstruct(&input, 2, Ablation::default()).unwrap(),
        back.reconstruct(&input, 2, Ablation::default()).unwrap()
    );
}

#[test]
fn shared_alpha_and_validation() {
    let cfg = NetworkConfig {
        shared_alpha: true,
        ..tiny_config()
    };
    let m = ConvLr::new(cfg, 1).unwrap();
    assert_eq!(m.alphas(), vec![0.5, 0.5]);
    assert_eq!(m.params().entries().iter().filter(|e| e.name.contains("alpha")).count(), 1);
    assert!(ConvLr::new(NetworkConfig { kernel: 4, ..tiny_config() }, 1).is_err());
    assert!(ConvLr::new(NetworkConfig { blocks: 0, ..tiny_config() }, 1).is_err());
}

#[test]
fn operator_cache_shares_trajectories() {
    let cache = OperatorCache::new();
    let (r, ys) = random_frames(8, 8, 4, 3, 120);
    let a = SequenceInput::with_cache(&r, &ys, &cache).unwrap();
    let (r2, ys2) = random_frames(8, 8, 4, 3, 130);
    let b = SequenceInput::with_cache(&r2, &ys2, &cache).unwrap();
    assert_eq!(cache.len(), 3);
    let direct = SequenceInput::new(&r, &ys).unwrap();
    assert_eq!(a.frames()[2].regrid(), direct.frames()[2].regrid());
    assert_eq!(a.dc_scale(), direct.dc_scale());
    assert_eq!(b.n_frames(), 3);
}
