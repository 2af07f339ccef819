use fusionseg_nn::{gradcheck, GradcheckConfig, Tape, Tensor5, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 5], seed: u64) -> Tensor5<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor5::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_probs(shape: [usize; 5], seed: u64) -> Tensor5<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor5::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

fn random_binary(shape: [usize; 5], seed: u64) -> Tensor5<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor5::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn check<F>(op: F, inputs: &[Tensor5<f64>], tolerance: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> fusionseg_nn::Result<Var>,
{
    let cfg = GradcheckConfig {
        tolerance,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(op, inputs, cfg).unwrap();
    assert!(
        report.passed(),
        "max rel err {} at {:?}; flagged {:?}",
        report.max_rel_error,
        report.worst,
        &report.flagged[..report.flagged.len().min(3)]
    );
    report.max_rel_error
}

#[test]
fn pointwise_identity_kernel_returns_input() {
    let x = random([1, 1, 3, 4, 5], 1).cast::<f32>();
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor5::full([1, 1, 1, 1, 1], 1.0f32));
    let b = t.constant(Tensor5::zeros([1, 1, 1, 1, 1]));
    let y = t.conv3d(xv, w, Some(b), [1; 3], [0; 3]).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn all_ones_conv_counts_neighbours() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor5::full([1, 1, 3, 3, 3], 1.0));
    let w = t.constant(Tensor5::full([1, 1, 3, 3, 3], 1.0));
    let y = t.conv3d(x, w, None, [1; 3], [1; 3]).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), [1, 1, 3, 3, 3]);
    assert_eq!(out.get([0, 0, 1, 1, 1]), 27.0);
    assert_eq!(out.get([0, 0, 0, 0, 0]), 8.0);
    // Face centre: 3·3·2 neighbours.
    assert_eq!(out.get([0, 0, 0, 1, 1]), 18.0);
}

#[test]
fn conv_matches_direct_summation_with_stride() {
    // Direct nested-loop cross-correlation as oracle.
    let x = random([2, 2, 5, 4, 6], 2);
    let wt = random([3, 2, 3, 2, 3], 3);
    let (stride, pad) = ([2, 1, 2], [1, 0, 1]);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(wt.clone());
    let y = t.conv3d(xv, wv, None, stride, pad).unwrap();
    let out = t.value(y);
    let s = out.shape();
    for n in 0..s[0] {
        for co in 0..s[1] {
            for od in 0..s[2] {
                for oh in 0..s[3] {
                    for ow in 0..s[4] {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for kz in 0..3 {
                                for ky in 0..2 {
                                    for kx in 0..3 {
                                        let iz = (od * stride[0] + kz) as isize - pad[0] as isize;
                                        let iy = (oh * stride[1] + ky) as isize - pad[1] as isize;
                                        let ix = (ow * stride[2] + kx) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= 5 || iy >= 4 || ix >= 6 {
                                            continue;
                                        }
                                        acc += wt.get([co, ci, kz, ky, kx])
                                            * x.get([n, ci, iz as usize, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        assert!((out.get([n, co, od, oh, ow]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let cases = [
        ([1, 2, 3, 4, 4], [2, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([2, 1, 4, 3, 5], [3, 1, 3, 3, 3], [2, 2, 2], [1, 1, 1]),
        ([1, 3, 2, 5, 3], [2, 3, 1, 3, 2], [1, 2, 1], [0, 1, 0]),
    ];
    for (i, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let inputs = [
            random(xs, 10 + i as u64),
            random(ws, 20 + i as u64),
            random([ws[0], 1, 1, 1, 1], 30 + i as u64),
        ];
        check(
            |t, v| t.conv3d(v[0], v[1], Some(v[2]), stride, pad),
            &inputs,
            1e-3,
        );
    }
}

#[test]
fn pointwise_conv_is_exactly_linear() {
    let inputs = [random([2, 3, 2, 3, 4], 4), random([2, 3, 1, 1, 1], 5)];
    let err = check(|t, v| t.conv3d(v[0], v[1], None, [1; 3], [0; 3]), &inputs, 1e-8);
    assert!(err < 1e-8);
}

#[test]
fn transposed_conv_places_kernel_copies() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor5::full([1, 1, 1, 1, 1], 2.5));
    let w = t.constant(Tensor5::full([1, 1, 2, 2, 2], 1.0));
    let y = t.conv3d_transpose(x, w, None, [2; 3]).unwrap();
    assert_eq!(t.value(y), &Tensor5::full([1, 1, 2, 2, 2], 2.5));

    let x = t.constant(random([1, 3, 3, 4, 5], 6));
    let w = t.constant(random([3, 2, 2, 2, 2], 7));
    let y = t.conv3d_transpose(x, w, None, [2; 3]).unwrap();
    assert_eq!(t.shape(y), [1, 2, 6, 8, 10]);
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    // <convT(x; w), y> == <x, conv(y; w)> with the weight read as (Cin, Cout).
    let x = random([1, 3, 2, 3, 2], 8);
    let y = random([1, 2, 4, 6, 4], 9);
    let w = random([3, 2, 2, 2, 2], 10);
    let mut t = Tape::<f64>::new();
    let (xv, yv, wv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(w.clone()));
    let up = t.conv3d_transpose(xv, wv, None, [2; 3]).unwrap();
    let down = t.conv3d(yv, wv, None, [2; 3], [0; 3]).unwrap();
    let lhs: f64 = t.value(up).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = t.value(down).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let cases = [
        ([1, 2, 2, 2, 2], [2, 3, 2, 2, 2], [2, 2, 2]),
        ([2, 3, 1, 2, 3], [3, 2, 2, 2, 2], [2, 2, 2]),
        ([1, 1, 3, 2, 2], [1, 2, 3, 2, 3], [1, 2, 2]),
    ];
    for (i, (xs, ws, stride)) in cases.into_iter().enumerate() {
        let inputs = [
            random(xs, 40 + i as u64),
            random(ws, 50 + i as u64),
            random([ws[1], 1, 1, 1, 1], 60 + i as u64),
        ];
        let err = check(
            |t, v| t.conv3d_transpose(v[0], v[1], Some(v[2]), stride),
            &inputs,
            1e-3,
        );
        assert!(err < 1e-8, "bilinear op should be exact, got {err}");
    }
}

#[test]
fn instance_norm_standardizes_each_channel() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random([2, 3, 3, 4, 5], 11).clone());
    let g = t.constant(Tensor5::full([3, 1, 1, 1, 1], 1.0));
    let b = t.constant(Tensor5::zeros([3, 1, 1, 1, 1]));
    let y = t.instance_norm(x, g, b, 1e-5).unwrap();
    let out = t.value(y);
    let m = 60;
    for chunk in out.data().chunks(m) {
        let mean = chunk.iter().sum::<f64>() / m as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    let c = t.constant(Tensor5::full([1, 3, 2, 2, 2], 4.2));
    let y = t.instance_norm(c, g, b, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn instance_norm_gradients_match_finite_differences() {
    for (i, xs) in [[1, 2, 2, 3, 3], [2, 3, 1, 2, 4], [1, 1, 3, 3, 3]].into_iter().enumerate() {
        let c = xs[1];
        let inputs = [
            random(xs, 70 + i as u64),
            random([c, 1, 1, 1, 1], 80 + i as u64),
            random([c, 1, 1, 1, 1], 90 + i as u64),
        ];
        check(|t, v| t.instance_norm(v[0], v[1], v[2], 1e-5), &inputs, 1e-3);
    }
}

#[test]
fn leaky_relu_values_and_limits() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor5::new([1, 1, 1, 1, 2], vec![2.0, -2.0]).unwrap());
    let y = t.leaky_relu(x, 0.01);
    assert_eq!(t.value(y).data(), &[2.0, -0.02]);
    let r = t.leaky_relu(x, 0.0);
    assert_eq!(t.value(r).data(), &[2.0, 0.0]);
}

#[test]
fn leaky_relu_gradients_away_from_the_kink() {
    for (i, shape) in [[1, 2, 2, 2, 2], [2, 1, 3, 2, 1], [1, 3, 1, 4, 2]].into_iter().enumerate() {
        let mut x = random(shape, 100 + i as u64);
        for v in x.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        check(|t, v| Ok(t.leaky_relu(v[0], 0.01)), &[x], 1e-4);
    }
}

#[test]
fn gradcheck_flags_elements_at_a_kink() {
    let x = Tensor5::new([1, 1, 1, 1, 3], vec![0.5, 0.0, -0.5]).unwrap();
    let report = gradcheck(|t, v| Ok(t.leaky_relu(v[0], 0.01)), &[x], GradcheckConfig::default()).unwrap();
    assert!(!report.passed());
    assert_eq!(report.flagged.len(), 1);
    assert_eq!((report.flagged[0].input, report.flagged[0].element), (0, 1));
    assert_eq!(report.worst, Some((0, 1)));
}

#[test]
fn concat_stacks_channels_and_splits_gradients() {
    let a = random([1, 2, 4, 4, 4], 12);
    let b = random([1, 3, 4, 4, 4], 13);
    let mut t = Tape::<f64>::new();
    let (av, bv) = (t.param(a.clone()), t.param(b.clone()));
    let c = t.concat_channels(av, bv).unwrap();
    assert_eq!(t.shape(c), [1, 5, 4, 4, 4]);
    let head = t.slice_channel(c, 0).unwrap();
    let tail = t.slice_channel(c, 4).unwrap();
    assert_eq!(t.value(head).data(), &a.data()[..64]);
    assert_eq!(t.value(tail).data(), &b.data()[128..]);
    let s = t.sum(c);
    t.backward(s).unwrap();
    assert!(t.grad(av).unwrap().iter().all(|g| *g == 1.0));
    assert!(t.grad(bv).unwrap().iter().all(|g| *g == 1.0));

    let bad = t.constant(random([1, 1, 4, 4, 3], 14));
    assert!(t.concat_channels(av, bad).is_err());
}

#[test]
fn concat_slice_add_scale_are_exactly_linear() {
    let inputs = [random([2, 2, 1, 2, 3], 15), random([2, 1, 1, 2, 3], 16)];
    let err = check(
        |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let s = t.slice_channel(c, 2)?;
            let s0 = t.slice_channel(c, 0)?;
            let sum = t.add(s, s0)?;
            Ok(t.scale(sum, -1.5))
        },
        &inputs,
        1e-8,
    );
    assert!(err < 1e-8);
    let shapes = [[1, 1, 2, 2, 2], [3, 2, 1, 1, 4], [1, 4, 2, 3, 1]];
    for (i, s) in shapes.into_iter().enumerate() {
        let inputs = [random(s, 200 + i as u64), random(s, 210 + i as u64)];
        let err = check(
            |t, v| {
                let c = t.concat_channels(v[0], v[1])?;
                let a = t.add(v[0], v[1])?;
                let sa = t.sum(a);
                let sc = t.weighted_sum(c, (0..2 * s.iter().product::<usize>()).map(|k| k as f64).collect())?;
                t.add(sa, sc)
            },
            &inputs,
            1e-8,
        );
        assert!(err < 1e-8);
    }
}

#[test]
fn softmax_closed_forms() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor5::new([1, 2, 1, 1, 2], vec![0.0, 1.0, 0.0, 3f64.ln() + 1.0]).unwrap());
    let y = t.softmax_channels(x).unwrap();
    let v = t.value(y).data();
    // voxel 0: logits (0, 0); voxel 1: logits (1, 1 + ln 3)
    assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
    assert!((v[1] - 0.25).abs() < 1e-12 && (v[3] - 0.75).abs() < 1e-12);
    let one = t.constant(Tensor5::zeros([1, 1, 1, 1, 1]));
    assert!(t.softmax_channels(one).is_err());
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for (i, s) in [[1, 2, 2, 2, 2], [2, 3, 1, 2, 2], [1, 4, 3, 1, 2]].into_iter().enumerate() {
        check(|t, v| t.softmax_channels(v[0]), &[random(s, 110 + i as u64)], 1e-3);
    }
}

#[test]
fn bce_closed_forms() {
    let mut t = Tape::<f64>::new();
    let y = random_binary([1, 1, 2, 3, 4], 17);
    let p = t.constant(y.clone());
    let l = t.bce_loss(p, &y).unwrap();
    assert!(t.item(l) < 1e-5);
    let half = t.constant(Tensor5::full([1, 1, 2, 3, 4], 0.5));
    let l = t.bce_loss(half, &y).unwrap();
    assert!((t.item(l) - 2f64.ln()).abs() < 1e-12);
    let wrong = Tensor5::zeros([1, 1, 2, 3, 3]);
    assert!(t.bce_loss(half, &wrong).is_err());
}

#[test]
fn bce_gradients_match_finite_differences() {
    for (i, s) in [[1, 1, 2, 2, 2], [2, 1, 1, 3, 2], [1, 2, 2, 1, 3]].into_iter().enumerate() {
        let y = random_binary(s, 120 + i as u64);
        check(move |t, v| t.bce_loss(v[0], &y), &[random_probs(s, 130 + i as u64)], 1e-3);
    }
}

#[test]
fn dice_closed_forms() {
    let mut t = Tape::<f64>::new();
    let y = random_binary([1, 1, 4, 4, 4], 18);
    let sum_y: f64 = y.data().iter().sum();
    let p = t.constant(y.clone());
    let l = t.soft_dice_loss(p, &y, 1.0).unwrap();
    assert!(t.item(l) < 1.0 / (2.0 * sum_y + 1.0));

    let half_target = Tensor5::from_fn([1, 1, 2, 2, 2], |i| if i[4] == 0 { 1.0 } else { 0.0 });
    let half = t.constant(Tensor5::full([1, 1, 2, 2, 2], 0.5));
    let l = t.soft_dice_loss(half, &half_target, 0.0).unwrap();
    assert!((t.item(l) - 0.5).abs() < 1e-12);

    let empty = Tensor5::zeros([1, 1, 2, 2, 2]);
    let zero = t.constant(empty.clone());
    let l = t.soft_dice_loss(zero, &empty, 1.0).unwrap();
    assert_eq!(t.item(l), 0.0);
}

#[test]
fn dice_gradients_match_finite_differences() {
    for (i, s) in [[1, 1, 2, 2, 2], [2, 1, 3, 1, 2], [1, 1, 1, 4, 3]].into_iter().enumerate() {
        let y = random_binary(s, 140 + i as u64);
        check(move |t, v| t.soft_dice_loss(v[0], &y, 1.0), &[random_probs(s, 150 + i as u64)], 1e-3);
    }
}

#[test]
fn combined_loss_is_the_label_mean() {
    let shape = [1, 1, 2, 2, 2];
    let y = random_binary(shape, 19);
    let mut t = Tape::<f64>::new();
    let perfect: Vec<Var> = (0..3).map(|_| t.constant(y.clone())).collect();
    let targets = vec![y.clone(), y.clone(), y.clone()];
    let l = t.combined_loss(&perfect, &targets, 1.0).unwrap();
    assert!(t.item(l.total) < 1e-3);

    // Hand case: p = 0.5 everywhere against a half-filled target.
    let half_target = Tensor5::from_fn(shape, |i| if i[4] == 0 { 1.0 } else { 0.0 });
    let half = t.constant(Tensor5::full(shape, 0.5));
    let bce = 2f64.ln();
    let dice = 1.0 - (2.0 * 2.0 + 1.0) / (4.0 + 4.0 + 1.0);
    let single = t.combined_loss(&[half], std::slice::from_ref(&half_target), 1.0).unwrap();
    assert!((t.item(single.total) - (bce + dice)).abs() < 1e-12);

    let mixed = t
        .combined_loss(&[half, perfect[0]], &[half_target.clone(), y.clone()], 1.0)
        .unwrap();
    let perfect_term = t.item(mixed.per_label[1].bce) + t.item(mixed.per_label[1].dice);
    assert!((t.item(mixed.total) - (bce + dice + perfect_term) / 2.0).abs() < 1e-12);

    let doubled = t
        .combined_loss(
            &[half, perfect[0], half, perfect[0]],
            &[half_target.clone(), y.clone(), half_target, y],
            1.0,
        )
        .unwrap();
    assert!((t.item(doubled.total) - t.item(mixed.total)).abs() < 1e-12);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let x = t.constant(random([1, 2, 4, 6, 6], 21).cast());
        let w = t.constant(random([3, 2, 3, 3, 3], 22).cast());
        let y = t.conv3d(x, w, None, [1; 3], [1; 3]).unwrap();
        let g = t.constant(Tensor5::full([3, 1, 1, 1, 1], 1.0));
        let b = t.constant(Tensor5::zeros([3, 1, 1, 1, 1]));
        let n = t.instance_norm(y, g, b, 1e-5).unwrap();
        let s = t.softmax_channels(n).unwrap();
        t.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one_even_for_large_logits(
        logits in proptest::collection::vec(-100.0f32..100.0, 3 * 8)
    ) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor5::new([1, 3, 2, 2, 2], logits).unwrap());
        let y = t.softmax_channels(x).unwrap();
        let v = t.value(y).data();
        for voxel in 0..8 {
            let s: f32 = (0..3).map(|c| v[c * 8 + voxel]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = t.constant(Tensor5::new([1, 3, 2, 2, 2], t.value(x).data().iter().map(|l| l + 7.0).collect()).unwrap());
        let y2 = t.softmax_channels(shifted).unwrap();
        for (a, b) in t.value(y).data().iter().zip(t.value(y2).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn losses_stay_in_range(
        p in proptest::collection::vec(0.0f64..1.0, 12),
        y in proptest::collection::vec(proptest::bool::ANY, 12),
    ) {
        let target = Tensor5::new([1, 1, 1, 3, 4], y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut t = Tape::<f64>::new();
        let pv = t.constant(Tensor5::new([1, 1, 1, 3, 4], p).unwrap());
        let d = t.soft_dice_loss(pv, &target, 1.0).unwrap();
        let b = t.bce_loss(pv, &target).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.item(d)));
        prop_assert!(t.item(b) >= 0.0);
    }
}
