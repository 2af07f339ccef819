use fusionseg_core::preprocess::{
    bspline_prefilter, center_crop_pad, resample_volume, sample_at, zscore_normalize, InterpKind, PreprocessConfig,
    PreprocessError, Sampler,
};
use fusionseg_core::volume::{SpaceTag, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [InterpKind; 3] = [InterpKind::Nearest, InterpKind::Trilinear, InterpKind::CubicBSpline];

fn field(dims: [usize; 3], spacing: [f64; 3], f: impl Fn([f64; 3]) -> f64) -> Volume {
    let v = Volume::zeros(dims, spacing, [0.0; 3], SpaceTag::Other).unwrap();
    let data = (0..v.len()).map(|i| f(v.voxel_to_world(v.coords(i).map(|c| c as f64))) as f32).collect();
    v.with_data(data).unwrap()
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], [0.0; 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), SpaceTag::Other)
        .unwrap()
}

/// Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// One-axis interpolation matrix: interior rows (1, 4, 1)/6; with the
/// linear ghost extension the end rows reduce to the identity.
fn axis_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            if i == 0 || i == n - 1 {
                row[i] = 1.0;
            } else {
                row[i - 1] = 1.0 / 6.0;
                row[i] = 4.0 / 6.0;
                row[i + 1] = 1.0 / 6.0;
            }
            row
        })
        .collect()
}

#[test]
fn prefilter_matches_dense_tensor_product_solve() {
    let n = 8;
    let v = random_volume([n, n, n], 3);
    let a = axis_matrix(n);
    let total = n * n * n;
    // Kronecker product A ⊗ A ⊗ A in x-fastest order.
    let big: Vec<Vec<f64>> = (0..total)
        .map(|r| {
            let (rx, ry, rz) = (r % n, (r / n) % n, r / (n * n));
            (0..total)
                .map(|c| {
                    let (cx, cy, cz) = (c % n, (c / n) % n, c / (n * n));
                    a[rx][cx] * a[ry][cy] * a[rz][cz]
                })
                .collect()
        })
        .collect();
    let want = dense_solve(big, v.data().iter().map(|&x| x as f64).collect());
    let got = bspline_prefilter(&v).unwrap();
    let err = got.data().iter().zip(&want).map(|(g, w)| (*g as f64 - w).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "max coefficient error {err}");
}

#[test]
fn bspline_on_grid_reproduces_random_samples() {
    let v = random_volume([8, 8, 8], 11);
    let r = resample_volume(&v, [1.0; 3], InterpKind::CubicBSpline).unwrap();
    let err = r.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-3, "on-grid error {err}");
}

#[test]
fn constant_prefilters_to_itself() {
    let v = field([6, 5, 4], [1.0; 3], |_| 2.5);
    let c = bspline_prefilter(&v).unwrap();
    assert!(c.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
}

#[test]
fn bspline_reproduces_the_x_ramp() {
    let v = field([10, 4, 4], [1.0; 3], |p| p[0]);
    let s = Sampler::new(&v, InterpKind::CubicBSpline).unwrap();
    assert!((s.at([2.25, 1.0, 2.0]) - 2.25).abs() < 1e-4);
    for k in 0..=90 {
        let x = k as f64 * 0.1;
        assert!((s.at([x, 1.5, 0.5]) - x).abs() < 1e-4, "x = {x}");
    }
}

#[test]
fn trilinear_grid_points_and_midpoint() {
    let v = Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![2.0, 4.0], SpaceTag::Other).unwrap();
    assert_eq!(sample_at(&v, [0.0; 3], InterpKind::Trilinear), 2.0);
    assert_eq!(sample_at(&v, [0.5, 0.0, 0.0], InterpKind::Trilinear), 3.0);
}

#[test]
fn identity_resample_and_constants() {
    let v = random_volume([7, 6, 5], 5);
    for kind in KINDS {
        let r = resample_volume(&v, [1.0; 3], kind).unwrap();
        assert_eq!(r.dims(), v.dims());
        let err = r.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{kind:?}: {err}");
    }
    let c = field([6, 6, 6], [1.0; 3], |_| -1.75);
    for kind in KINDS {
        for sp in [[0.3, 0.7, 1.9], [2.0, 2.0, 0.5]] {
            let r = resample_volume(&c, sp, kind).unwrap();
            assert!(r.data().iter().all(|&x| (x + 1.75).abs() < 1e-5), "{kind:?} {sp:?}");
        }
    }
}

#[test]
fn trilinear_resample_of_linear_field_is_exact() {
    let f = |p: [f64; 3]| 2.0 * p[0] + 3.0 * p[1] - p[2];
    let v = field([8, 8, 8], [1.0; 3], f);
    let r = resample_volume(&v, [0.5; 3], InterpKind::Trilinear).unwrap();
    assert_eq!(r.dims(), [16, 16, 16]);
    for i in 0..r.len() {
        let p = r.voxel_to_world(r.coords(i).map(|c| c as f64));
        // The last output sample sits past the input's last center and is clamped.
        if p.iter().any(|&c| c > 7.0) {
            continue;
        }
        assert!((r.data()[i] as f64 - f(p)).abs() < 1e-4);
    }
}

#[test]
fn output_dims_round_up_the_extent() {
    let v = field([5, 5, 3], [1.0; 3], |_| 0.0);
    let r = resample_volume(&v, [2.0, 0.5, 3.0], InterpKind::Nearest).unwrap();
    assert_eq!(r.dims(), [3, 10, 1]);
}

#[test]
fn crop_pad_to_the_stated_image_size() {
    let big = field([300, 300, 2], [0.5, 0.5, 3.0], |p| p[0]);
    assert_eq!(center_crop_pad(&big, [128.0, 128.0], 0.0).unwrap().dims(), [256, 256, 2]);
    let exact = field([256, 256, 2], [0.5, 0.5, 3.0], |p| p[0] + p[1]);
    assert_eq!(center_crop_pad(&exact, [128.0, 128.0], 0.0).unwrap(), exact);
    let small = field([200, 200, 1], [0.5, 0.5, 3.0], |_| 1.0);
    let p = center_crop_pad(&small, [128.0, 128.0], 0.0).unwrap();
    assert_eq!(p.dims(), [256, 256, 1]);
    for (x, y) in [(27, 100), (28, 28), (227, 227), (228, 100), (100, 27)] {
        let want = if (28..228).contains(&x) && (28..228).contains(&y) { 1.0 } else { 0.0 };
        assert_eq!(p.get(x, y, 0), want, "({x}, {y})");
    }
}

#[test]
fn default_target_spacings() {
    let c = PreprocessConfig::default();
    assert_eq!(c.mri_spacing, [0.5, 0.5, 3.0]);
    assert_eq!(c.trus_spacing, [0.5, 0.5, 0.5]);
    assert_eq!(c.crop_extent_mm, [128.0, 128.0]);
    assert_eq!(c.interp, InterpKind::CubicBSpline);
}

#[test]
fn zscore_examples() {
    let v = Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![1.0, 3.0], SpaceTag::Other).unwrap();
    let m = v.with_data(vec![1.0, 1.0]).unwrap();
    assert_eq!(zscore_normalize(&v, &m).unwrap().data(), &[-1.0, 1.0]);
    let z = zscore_normalize(&random_volume([5, 5, 5], 2), &field([5, 5, 5], [1.0; 3], |_| 1.0)).unwrap();
    let again = zscore_normalize(&z, &field([5, 5, 5], [1.0; 3], |_| 1.0)).unwrap();
    assert!(z.data().iter().zip(again.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    let flat = Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![4.0, 4.0], SpaceTag::Other).unwrap();
    assert!(matches!(zscore_normalize(&flat, &m), Err(PreprocessError::DegenerateStd(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nearest_mask_resample_keeps_label_values(
        seed in any::<u64>(),
        sp in prop::array::uniform3(0.3f64..2.5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Volume::new([6, 6, 6], [1.0; 3], [0.0; 3], (0..216).map(|_| rng.random_range(0..4) as f32).collect(), SpaceTag::Other).unwrap();
        let r = resample_volume(&v, sp, InterpKind::Nearest).unwrap();
        prop_assert!(r.data().iter().all(|x| [0.0, 1.0, 2.0, 3.0].contains(x)));
    }

    #[test]
    fn crop_pad_keeps_physical_positions(nx in 3usize..40, ny in 3usize..40, ex in 2.0f64..30.0, ey in 2.0f64..30.0) {
        let v = field([nx, ny, 2], [0.5, 0.5, 3.0], |p| p[0] * 7.0 + p[1] * 131.0);
        let c = center_crop_pad(&v, [ex, ey], -1000.0).unwrap();
        for i in 0..c.len() {
            let val = c.data()[i];
            if val == -1000.0 {
                continue;
            }
            let p = c.voxel_to_world(c.coords(i).map(|k| k as f64));
            let q = v.world_to_voxel(p);
            let src = v.get(q[0].round() as usize, q[1].round() as usize, q[2].round() as usize);
            prop_assert!((q[0] - q[0].round()).abs() < 1e-6 && (q[1] - q[1].round()).abs() < 1e-6);
            prop_assert_eq!(src, val);
        }
    }

    #[test]
    fn zscore_ignores_positive_affine_intensity_maps(seed in any::<u64>(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
        let v = random_volume([5, 4, 3], seed);
        let mask = v.map(|x| if x > -0.5 { 1.0 } else { 0.0 }).unwrap();
        let w = v.map(|x| (a * x as f64 + b) as f32).unwrap();
        let (zv, zw) = (zscore_normalize(&v, &mask).unwrap(), zscore_normalize(&w, &mask).unwrap());
        prop_assert!(zv.data().iter().zip(zw.data()).all(|(p, q)| (p - q).abs() < 1e-4));
    }

    #[test]
    fn resample_is_exact_on_constants(c in -100.0f32..100.0, sp in prop::array::uniform3(0.3f64..3.0)) {
        let v = field([5, 5, 5], [1.0; 3], |_| c as f64);
        for kind in KINDS {
            let r = resample_volume(&v, sp, kind).unwrap();
            prop_assert!(r.data().iter().all(|x| (x - c).abs() <= 1e-4 * (1.0 + c.abs())));
        }
    }
}
