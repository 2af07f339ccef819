use std::collections::BTreeMap;

use fusionseg_core::pipeline::{
    assemble_input, augment_flip, flip_batch, project_prediction, sample_patches, sliding_window_infer, tile_starts,
    train, Case, InferenceConfig, PipelineError, Setup, TrainConfig,
};
use fusionseg_core::volume::{Affine3, MultimodalStudy, SpaceTag, Split, Volume, VolumeError};
use fusionseg_nn::{Tensor5, UNetConfig, UNetModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(dims: [usize; 3]) -> Volume {
    Volume::zeros(dims, [1.0; 3], [0.0; 3], SpaceTag::Trus).unwrap()
}

fn noise(dims: [usize; 3], seed: u64) -> Volume {
    let g = grid(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.with_data((0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn study(dims: [usize; 3]) -> MultimodalStudy {
    MultimodalStudy {
        study_id: "s".into(),
        t2w: noise(dims, 1),
        adc: noise(dims, 2),
        dwi: noise(dims, 3),
        trus: noise(dims, 4),
        gland_mask: grid(dims),
        lesion_labels: grid(dims),
        lesion_gg: BTreeMap::new(),
        mri_to_trus: None,
        split: Split::Train,
    }
}

/// Case with a single CsPCa voxel at `lesion` and an all-zero gland.
fn case(dims: [usize; 3], channels: usize, lesion: Option<[usize; 3]>) -> Case {
    let g = grid(dims);
    let mut labels = vec![0.0; g.len()];
    let mut gg = BTreeMap::new();
    if let Some([x, y, z]) = lesion {
        labels[g.index(x, y, z)] = 1.0;
        gg.insert(1, 2);
    }
    Case {
        study_id: "c".into(),
        channels: (0..channels).map(|c| noise(dims, 10 + c as u64)).collect(),
        gland_mask: g.clone(),
        lesion_labels: g.with_data(labels).unwrap(),
        lesion_gg: gg,
    }
}

fn small_unet(in_channels: usize) -> UNetConfig {
    UNetConfig { in_channels, stages: 2, base_channels: 4, max_channels: 8, ..UNetConfig::default() }
}

fn train_cfg(setup: Setup, patch: [usize; 3]) -> TrainConfig {
    TrainConfig { setup, patch_size: patch, steps_per_epoch: 4, seed: 3, ..TrainConfig::default() }
}

#[test]
fn channel_order_per_setup() {
    let s = study([6, 5, 4]);
    let multi = assemble_input(&s, Setup::Multimodal).unwrap();
    assert_eq!(multi.len(), 4);
    assert_eq!(multi[0], s.trus);
    assert_eq!(multi[3], s.dwi);
    assert_eq!(assemble_input(&s, Setup::TrusOnly).unwrap(), std::slice::from_ref(&s.trus));
    let mri = assemble_input(&s, Setup::MriOnly).unwrap();
    assert_eq!(mri, [s.t2w.clone(), s.adc.clone(), s.dwi.clone()]);
    for setup in Setup::ALL {
        assert_eq!(assemble_input(&s, setup).unwrap().len(), setup.channels());
    }
}

#[test]
fn mismatched_channels_are_rejected() {
    let mut s = study([6, 5, 4]);
    s.adc = noise([6, 5, 5], 9);
    let err = assemble_input(&s, Setup::Multimodal).unwrap_err();
    assert!(matches!(err, PipelineError::Volume(VolumeError::GridMismatch(_))), "{err}");
}

#[test]
fn foreground_oversampling_always_hits_the_lesion() {
    let lesion = [13, 2, 7];
    let c = case([20, 18, 10], 1, Some(lesion));
    let cfg = TrainConfig { fg_oversample: 1.0, batch_size: 4, ..train_cfg(Setup::TrusOnly, [8, 8, 4]) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..25 {
        let b = sample_patches(&c, &cfg, &mut rng).unwrap();
        for s in 0..4 {
            assert_eq!(b.centers[s], lesion);
            let cs = b.targets[2].sample(s);
            assert_eq!(cs.iter().sum::<f32>(), 1.0);
            let local: [usize; 3] = std::array::from_fn(|a| lesion[a] - b.starts[s][a]);
            assert_eq!(b.targets[2].get([s, 0, local[2], local[1], local[0]]), 1.0);
        }
    }
}

#[test]
fn uniform_centers_pass_a_chi_square_test() {
    let c = case([16, 16, 16], 1, Some([3, 3, 3]));
    let cfg = TrainConfig { fg_oversample: 0.0, batch_size: 100, ..train_cfg(Setup::TrusOnly, [4, 4, 4]) };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bins = [0usize; 8];
    for _ in 0..100 {
        for p in sample_patches(&c, &cfg, &mut rng).unwrap().centers {
            bins[(p[0] / 8) + 2 * (p[1] / 8) + 4 * (p[2] / 8)] += 1;
        }
    }
    let expected = 10_000.0 / 8.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of chi-square with 7 degrees of freedom.
    assert!(chi2 < 24.322, "chi2 {chi2}, bins {bins:?}");
}

#[test]
fn grid_smaller_than_patch_is_zero_padded() {
    let c = case([5, 3, 2], 1, None);
    let cfg = TrainConfig { batch_size: 1, ..train_cfg(Setup::TrusOnly, [8, 4, 4]) };
    let b = sample_patches(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.starts[0], [0, 0, 0]);
    assert_eq!(b.input.get([0, 0, 1, 2, 4]), c.channels[0].get(4, 2, 1));
    assert_eq!(b.input.get([0, 0, 1, 2, 5]), 0.0);
    assert_eq!(b.input.get([0, 0, 3, 0, 0]), 0.0);
}

#[test]
fn empty_grid_is_rejected() {
    let empty = Case { channels: vec![], ..case([4, 4, 4], 1, None) };
    assert!(sample_patches(&empty, &train_cfg(Setup::TrusOnly, [4, 4, 4]), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn corner_batch() -> fusionseg_core::pipeline::Batch {
    let c = case([6, 4, 2], 2, Some([0, 0, 0]));
    let cfg = TrainConfig { batch_size: 2, ..train_cfg(Setup::TrusOnly, [6, 4, 2]) };
    sample_patches(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn flip_moves_a_corner_to_the_mirrored_corner() {
    let orig = corner_batch();
    let mut b = orig.clone();
    flip_batch(&mut b, &[[true, true, true], [false; 3]]);
    // (x, y, z) = (0, 0, 0) → (5, 3, 1), tensor index order (z, y, x).
    assert_eq!(b.targets[2].get([0, 0, 1, 3, 5]), 1.0);
    assert_eq!(b.targets[2].get([0, 0, 0, 0, 0]), 0.0);
    assert_eq!(b.targets[1].get([0, 0, 1, 3, 5]), 1.0);
    for ch in 0..2 {
        assert_eq!(b.input.get([0, ch, 1, 3, 5]), orig.input.get([0, ch, 0, 0, 0]));
    }
    assert_eq!(b.input.sample(1), orig.input.sample(1));
}

#[test]
fn double_flip_is_identity_and_probability_zero_is_a_no_op() {
    let orig = corner_batch();
    let mut b = orig.clone();
    let flips = [[true, false, true], [false, true, false]];
    flip_batch(&mut b, &flips);
    assert_ne!(b, orig);
    flip_batch(&mut b, &flips);
    assert_eq!(b, orig);

    let mut same = orig.clone();
    let drawn = augment_flip(&mut same, [true; 3], 0.0, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(drawn, [[false; 3]; 2]);
    assert_eq!(same, orig);
}

#[test]
fn training_is_deterministic_and_finite() {
    let cases = [case([12, 12, 8], 1, Some([5, 6, 3])), case([10, 12, 8], 1, Some([2, 2, 2]))];
    let cfg = train_cfg(Setup::TrusOnly, [8, 8, 4]);
    let run = || train(&cases, UNetModel::build(small_unet(1), 5).unwrap(), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history.len(), 4);
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().all(|r| r.total.is_finite()));
    for (p, q) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(p.tensor, q.tensor, "{}", p.name);
    }
}

#[test]
fn training_writes_one_checkpoint_per_epoch() {
    let cases = [case([8, 8, 4], 1, Some([1, 1, 1]))];
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 1,
        checkpoint_dir: Some(dir.path().join("ckpt")),
        ..train_cfg(Setup::TrusOnly, [8, 8, 4])
    };
    let out = train(&cases, UNetModel::build(small_unet(1), 5).unwrap(), &cfg).unwrap();
    assert_eq!(out.checkpoints.len(), 2);
    assert!(out.checkpoints.iter().all(|p| p.is_file()));
}

#[test]
fn setup_channel_disagreement_is_rejected() {
    let cases = [case([8, 8, 4], 1, None)];
    let err = train(&cases, UNetModel::build(small_unet(4), 0).unwrap(), &train_cfg(Setup::TrusOnly, [8, 8, 4]));
    assert!(matches!(err, Err(PipelineError::ShapeMismatch(_))));
    let err = train(&cases, UNetModel::build(small_unet(4), 0).unwrap(), &train_cfg(Setup::Multimodal, [8, 8, 4]));
    assert!(matches!(err, Err(PipelineError::ShapeMismatch(_))));
}

#[test]
fn tile_lattice_examples() {
    assert_eq!(tile_starts(8, 8, 0.5), [0]);
    assert_eq!(tile_starts(5, 8, 0.5), [0]);
    assert_eq!(tile_starts(16, 8, 0.5), [0, 4, 8]);
    assert_eq!(tile_starts(17, 8, 0.5), [0, 4, 8, 9]);
    assert_eq!(tile_starts(12, 8, 0.0), [0, 4]);
}

fn to_tensor(channels: &[Volume], region: [std::ops::Range<usize>; 3]) -> Tensor5<f32> {
    let [rx, ry, rz] = region;
    let shape = [1, channels.len(), rz.len(), ry.len(), rx.len()];
    Tensor5::from_fn(shape, |[_, c, z, y, x]| channels[c].get(rx.start + x, ry.start + y, rz.start + z))
}

#[test]
fn single_tile_equals_a_direct_forward_pass() {
    let model = UNetModel::build(small_unet(2), 7).unwrap();
    let chans = case([8, 8, 4], 2, None).channels;
    let cfg = InferenceConfig { patch_size: [8, 8, 4], ..InferenceConfig::default() };
    let heads = sliding_window_infer(&model, &chans, &cfg).unwrap();
    let direct = model.forward(&to_tensor(&chans, [0..8, 0..8, 0..4])).unwrap();
    for (h, d) in heads.iter().zip(&direct) {
        assert_eq!(h.dims(), [8, 8, 4]);
        let err = h.data().iter().zip(d.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn zero_heads_blend_to_one_half() {
    let mut model = UNetModel::build(small_unet(1), 7).unwrap();
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("head.")) {
        p.tensor.data_mut().fill(0.0);
    }
    let chans = case([19, 11, 6], 1, None).channels;
    let cfg = InferenceConfig { patch_size: [8, 8, 4], overlap: 0.3, ..InferenceConfig::default() };
    for h in sliding_window_infer(&model, &chans, &cfg).unwrap() {
        assert!(h.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}

#[test]
fn two_tiles_blend_as_a_gaussian_weighted_mean() {
    let model = UNetModel::build(small_unet(1), 9).unwrap();
    let chans = case([12, 8, 4], 1, None).channels;
    let cfg = InferenceConfig { patch_size: [8, 8, 4], overlap: 0.5, ..InferenceConfig::default() };
    assert_eq!(tile_starts(12, 8, 0.5), [0, 4]);
    let heads = sliding_window_infer(&model, &chans, &cfg).unwrap();
    let left = model.forward(&to_tensor(&chans, [0..8, 0..8, 0..4])).unwrap();
    let right = model.forward(&to_tensor(&chans, [4..12, 0..8, 0..4])).unwrap();
    // Along x only the weights differ: exp(−(i − 3.5)² / (2σ²)), σ = 1.
    let w = |i: usize| (-(i as f64 - 3.5).powi(2) / 2.0).exp();
    for k in 0..3 {
        for z in 0..4 {
            for y in 0..8 {
                for x in 4..8 {
                    let (a, b) = (f64::from(left[k].get([0, 0, z, y, x])), f64::from(right[k].get([0, 0, z, y, x - 4])));
                    let want = (w(x) * a + w(x - 4) * b) / (w(x) + w(x - 4));
                    let got = f64::from(heads[k].get(x, y, z));
                    assert!((got - want).abs() < 1e-5, "voxel ({x},{y},{z}): {got} vs {want}");
                    assert!(got >= a.min(b) - 1e-6 && got <= a.max(b) + 1e-6);
                }
                assert!((f64::from(heads[k].get(1, y, z)) - f64::from(left[k].get([0, 0, z, y, 1]))).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn channel_count_mismatch_fails_inference() {
    let model = UNetModel::build(small_unet(4), 0).unwrap();
    let chans = case([8, 8, 4], 1, None).channels;
    let cfg = InferenceConfig { patch_size: [8, 8, 4], ..InferenceConfig::default() };
    assert!(matches!(sliding_window_infer(&model, &chans, &cfg), Err(PipelineError::ShapeMismatch(_))));
}

#[test]
fn identity_projection_and_constants() {
    let p = noise([10, 9, 8], 4).map(|v| 0.5 + v / 2.0).unwrap();
    let same = project_prediction(&p, &Affine3::identity(), &p).unwrap();
    let err = same.data().iter().zip(p.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-6);
    let c = p.map(|_| 0.7).unwrap();
    let moved = project_prediction(&c, &Affine3::translation([1.3, -0.4, 0.6]), &c).unwrap();
    assert!(moved.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
}

fn centroid(v: &Volume) -> [f64; 3] {
    let mut acc = [0.0; 4];
    for i in 0..v.len() {
        let w = f64::from(v.data()[i]);
        let p = v.voxel_to_world(v.coords(i).map(|c| c as f64));
        for a in 0..3 {
            acc[a] += w * p[a];
        }
        acc[3] += w;
    }
    [acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]]
}

#[test]
fn translation_moves_the_centroid_by_the_offset() {
    let g = Volume::zeros([24, 24, 16], [0.5; 3], [0.0; 3], SpaceTag::Mri).unwrap();
    let c = [5.5, 6.0, 3.5];
    let blob = g
        .with_data(
            (0..g.len())
                .map(|i| {
                    let p = g.voxel_to_world(g.coords(i).map(|v| v as f64));
                    let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    (-d2 / 2.0).exp() as f32
                })
                .collect(),
        )
        .unwrap();
    let d = [1.2, -0.7, 0.5];
    let moved = project_prediction(&blob, &Affine3::translation(d), &g).unwrap();
    let (before, after) = (centroid(&blob), centroid(&moved));
    for a in 0..3 {
        let shift = after[a] - before[a];
        assert!((shift - d[a]).abs() < 0.25, "axis {a}: {shift} vs {}", d[a]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_starts_stay_in_bounds(
        dims in prop::array::uniform3(1usize..20),
        patch in prop::array::uniform3(1usize..12),
        fg in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let c = case(dims, 1, Some([dims[0] / 2, dims[1] / 2, dims[2] / 2]));
        let cfg = TrainConfig { fg_oversample: fg, batch_size: 3, ..train_cfg(Setup::TrusOnly, patch) };
        let b = sample_patches(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for s in &b.starts {
            for a in 0..3 {
                if dims[a] >= patch[a] {
                    prop_assert!(s[a] + patch[a] <= dims[a]);
                } else {
                    prop_assert_eq!(s[a], 0);
                }
            }
        }
        prop_assert_eq!(b.input.shape(), [3, 1, patch[2], patch[1], patch[0]]);
    }

    #[test]
    fn inference_maps_are_probabilities(seed in 0u64..1000, dims in prop::array::uniform3(3usize..14)) {
        let model = UNetModel::build(small_unet(1), seed).unwrap();
        let chans = [noise(dims, seed)];
        let cfg = InferenceConfig { patch_size: [8, 8, 4], ..InferenceConfig::default() };
        for h in sliding_window_infer(&model, &chans, &cfg).unwrap() {
            prop_assert_eq!(h.dims(), dims);
            prop_assert!(h.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}
