use super::*;
use crate::kspace::read_kspace;
use num_complex::Complex64;
use proptest::prelude::*;

fn small_dataset() -> DatasetConfig {
    DatasetConfig {
        size: 16,
        frames: 3,
        train: 3,
        val: 2,
        test: 2,
        spokes: vec![4, 8],
        noise_std: 0.01,
        ..DatasetConfig::default()
    }
}

#[test]
fn phantom_is_deterministic_and_bounded() {
    let a = generate_reference_phantom(7, 32).unwrap();
    let b = generate_reference_phantom(7, 32).unwrap();
    assert_eq!(a, b);
    assert!(a.values().iter().all(|v| v.im == 0.0 && (0.0..=1.0).contains(&v.re)));
    assert!(generate_reference_phantom(7, 31).is_err());
    for size in [32, 48, 64] {
        let x = generate_reference_phantom(1, size).unwrap();
        let y = generate_reference_phantom(2, size).unwrap();
        assert!(x.nmse_to(&y) > 0.05, "size {} nmse {}", size, x.nmse_to(&y));
    }
}

fn straight_feature() -> (ComplexImage, InterventionParams) {
    let reference = generate_reference_phantom(3, 32).unwrap();
    let params = InterventionParams {
        entry: [8.0, 16.0],
        direction: [1.0, 0.0],
        tip_depth: vec![0.0, 4.0, 9.0],
        width: 1.5,
        intensity_scale: 0.15,
    };
    (reference, params)
}

#[test]
fn render_basics() {
    let (reference, params) = straight_feature();
    assert_eq!(render_intervention_frame(&reference, &params, 0).unwrap(), reference);
    let f = render_intervention_frame(&reference, &params, 2).unwrap();
    for x in 8..=17 {
        assert_eq!(f.get(x, 16), reference.get(x, 16) * 0.15);
    }
    assert_eq!(f.get(20, 16), reference.get(20, 16));
    assert!(render_intervention_frame(&reference, &params, 3).is_err());
    let bad = InterventionParams {
        tip_depth: vec![40.0],
        ..params.clone()
    };
    assert!(render_intervention_frame(&reference, &bad, 0).is_err());
}

proptest! {
    #[test]
    fn altered_pixels_are_nested(
        ex in 6.0f64..26.0, ey in 6.0f64..26.0, ang in 0.0f64..6.28,
        d0 in 0.0f64..3.0, steps in prop::collection::vec(0.0f64..3.0, 1..5), width in 1.0f64..3.0,
    ) {
        let reference = ComplexImage::from_real(32, 32, &vec![0.8; 1024]).unwrap();
        let mut tip_depth = vec![d0];
        for s in steps {
            let last = *tip_depth.last().unwrap();
            tip_depth.push(last + s);
        }
        let p = InterventionParams { entry: [ex, ey], direction: [ang.cos(), ang.sin()], tip_depth, width, intensity_scale: 0.15 };
        prop_assume!(p.validate(32, 32).is_ok());
        let frames: Vec<_> = (0..p.tip_depth.len()).map(|t| render_intervention_frame(&reference, &p, t).unwrap()).collect();
        for w in frames.windows(2) {
            for (i, (a, b)) in w[0].values().iter().zip(w[1].values()).enumerate() {
                let r = reference.values()[i];
                prop_assert!(*a == r || *b != r);
                prop_assert!(b.re <= a.re);
            }
        }
    }
}

#[test]
fn augmentation_identity_and_determinism() {
    let seq = generate_sequence(5, 32, 4, &SequenceConfig::default()).unwrap();
    let off = AugmentConfig {
        enabled: true,
        max_rotation_deg: 0.0,
        max_shift_px: 0,
    };
    assert_eq!(augment_sequence_with(&seq, 9, &off).unwrap(), seq);
    let a = augment_sequence(&seq, 9).unwrap();
    let b = augment_sequence(&seq, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.reference, seq.reference);
    let t = RigidTransform::new(0.0, [0, 0], 32, 32);
    assert_eq!(t.warp(&seq.reference), seq.reference);
}

#[test]
fn roi_contains_feature_after_augmentation() {
    let plain = SequenceConfig {
        augment: AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        },
        ..SequenceConfig::default()
    };
    for seed in 0..20 {
        let seq = generate_sequence(seed, 32, 5, &plain).unwrap();
        let aug = augment_sequence(&seq, seed + 100).unwrap();
        let p = &aug.params;
        let depth = *p.tip_depth.last().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if p.coverage(x as f64, y as f64, depth) > 0.0 {
                    assert!(aug.roi.contains(x, y), "seed {} pixel ({}, {}) outside {:?}", seed, x, y, aug.roi);
                }
            }
        }
    }
}

#[test]
fn frames_differ_from_reference_only_inside_roi() {
    for seed in 0..20 {
        let seq = generate_sequence(seed, 32, 5, &SequenceConfig::default()).unwrap();
        assert!(seq.roi.fits(32, 32));
        for f in &seq.frames {
            for y in 0..32 {
                for x in 0..32 {
                    if !seq.roi.contains(x, y) {
                        assert_eq!(f.get(x, y), seq.reference.get(x, y));
                    }
                    let m = f.get(x, y).norm();
                    assert!((0.0..=1.0 + 1e-12).contains(&m));
                }
            }
        }
        let p = &seq.params;
        assert!(p.tip_depth.windows(2).all(|w| w[0] <= w[1]));
        for (w, dd) in p.tip_depth.windows(2).map(|w| (w, w[1] - w[0])) {
            assert!((1.0..=3.0).contains(&dd), "{:?}", w);
        }
    }
}

#[test]
fn dataset_layout_and_round_trip() {
    let cfg = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.splits.iter().map(|s| s.count).collect::<Vec<_>>(), vec![3, 2, 2]);
    let seeds = |name: &str| {
        let s = m.splits.iter().find(|s| s.name == name).unwrap();
        (s.seed_start..s.seed_start + s.count as u64).collect::<Vec<_>>()
    };
    assert!(seeds("train").iter().all(|s| !seeds("test").contains(s)));

    let ds = Dataset::open(dir.path()).unwrap();
    let seq = ds.load_sequence("val", 1).unwrap();
    assert_eq!(seq.frames.len(), 3);
    for &s in &cfg.spokes {
        let ks = ds.load_kspace("val", 1, s).unwrap();
        for (t, y) in ks.iter().enumerate() {
            let traj = frame_trajectory(s, cfg.n_readout(), t).unwrap();
            let again = simulate_kspace(&seq.frames[t], &traj, cfg.noise_std, kspace_noise_seed(seq.seed, s, t)).unwrap();
            assert_eq!(y, &again);
        }
    }
    let files = std::fs::read_dir(ds.sequence_dir("train", 0).unwrap().join("kspace")).unwrap().count();
    assert_eq!(files, cfg.spokes.len() * cfg.frames);
    assert!(ds.load_kspace("val", 1, 16).is_err());
    assert!(ds.load_sequence("train", 3).is_err());
    let p = ds.sequence_dir("test", 0).unwrap().join("kspace").join("s008_f02.ksp");
    assert_eq!(read_kspace(&p).unwrap().trajectory().start_index(), 16);
}

#[test]
fn dataset_is_bitwise_reproducible() {
    let cfg = small_dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&cfg, a.path()).unwrap();
    build_dataset(&cfg, b.path()).unwrap();
    let mut stack = vec![std::path::PathBuf::new()];
    let mut n = 0;
    while let Some(rel) = stack.pop() {
        for e in std::fs::read_dir(a.path().join(&rel)).unwrap() {
            let e = e.unwrap();
            let r = rel.join(e.file_name());
            if e.file_type().unwrap().is_dir() {
                stack.push(r);
            } else {
                assert_eq!(std::fs::read(a.path().join(&r)).unwrap(), std::fs::read(b.path().join(&r)).unwrap());
                n += 1;
            }
        }
    }
    assert!(n > 50);
}

#[test]
fn overlapping_seed_ranges_are_rejected() {
    let cfg = DatasetConfig {
        split_seeds: Some(SplitSeeds {
            train: 0,
            val: 100,
            test: 2,
        }),
        ..small_dataset()
    };
    assert!(cfg.validate().is_err());
    let ok = DatasetConfig {
        split_seeds: Some(SplitSeeds {
            train: 0,
            val: 100,
            test: 200,
        }),
        ..small_dataset()
    };
    ok.validate().unwrap();
    assert!(DatasetConfig { size: 30, ..small_dataset() }.validate().is_err());
}

#[test]
fn noise_changes_samples_deterministically() {
    let img = generate_reference_phantom(1, 16).unwrap();
    let traj = frame_trajectory(4, 32, 1).unwrap();
    let clean = simulate_kspace(&img, &traj, 0.0, 0).unwrap();
    let a = simulate_kspace(&img, &traj, 0.1, 5).unwrap();
    let b = simulate_kspace(&img, &traj, 0.1, 5).unwrap();
    assert_eq!(a, b);
    let diff: Vec<Complex64> = a.samples().iter().zip(clean.samples()).map(|(p, q)| p - q).collect();
    let var = diff.iter().map(|d| d.norm_sqr()).sum::<f64>() / diff.len() as f64;
    assert!((var - 0.01).abs() < 0.004, "{}", var);
}
