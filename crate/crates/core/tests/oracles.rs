//! Library kernels against the nested-loop references in `common`.

mod common;

use bcn_fas::bilateral::{bilateral_base_direct, dbo_forward, BilateralParams, DboParams};
use bcn_fas::mfrm::refine_forward;
use bcn_fas::supervision::{loss_patch, loss_patch_material, mse};
use bcn_fas::tensor::{conv2d_forward, maxpool2_forward, ConvSpec, Tape, Tensor};
use common::*;

const SEEDS: [u64; 6] = [1, 2, 3, 4, 5, 6];

#[test]
fn bilateral_direct_matches_reference() {
    for seed in SEEDS {
        let (h, w, c) = (7 + seed as usize % 3, 6, 1 + seed as usize % 3);
        let img = random(&[h, w, c], 0.0, 1.0, seed);
        let p = BilateralParams::new(1.0 + 0.3 * seed as f64, 0.1 + 0.05 * seed as f64, 5).unwrap();
        let got = bilateral_base_direct(&img.cast(), &p).unwrap().cast::<f64>();
        let want = bilateral(&img.cast::<f32>().cast::<f64>().into_data(), h, w, c, p.sigma_s, p.sigma_r, p.window);
        assert!(max_abs_diff(got.data(), &want) < 1e-6, "seed {seed}");
    }
}

#[test]
fn bilateral_impulse_matches_reference() {
    let mut img = Tensor::<f32>::zeros([5, 5, 1]);
    img.data_mut()[12] = 1.0;
    let p = BilateralParams::new(1.0, 0.5, 5).unwrap();
    let got = bilateral_base_direct(&img, &p).unwrap().cast::<f64>();
    let want = bilateral(&img.cast::<f64>().into_data(), 5, 5, 1, 1.0, 0.5, 5);
    assert!(max_abs_diff(got.data(), &want) < 1e-6);
}

#[test]
fn dbo_matches_reference() {
    for seed in SEEDS {
        let x = random(&[1, 2, 4, 4], -1.0, 1.0, seed);
        let p = DboParams::range_only(1.0);
        let got = dbo_forward(&x, &p).unwrap();
        assert!(max_abs_diff(got.data(), &dbo(&x, 1.0, None, 3)) < 1e-6, "seed {seed}");
    }
}

#[test]
fn dbo_wide_windows_match_reference() {
    for seed in SEEDS {
        let x = random(&[2, 3, 6, 5], -2.0, 2.0, seed);
        let p = DboParams {
            window: 5,
            ..DboParams::range_only(0.5 + seed as f64 * 0.2)
        };
        let got = dbo_forward(&x, &p).unwrap();
        assert!(max_abs_diff(got.data(), &dbo(&x, p.sigma_r, None, 5)) < 1e-6, "seed {seed}");
    }
}

#[test]
fn dbo_full_matches_reference() {
    for seed in SEEDS {
        let x = random(&[1, 2, 6, 6], -1.0, 1.0, seed);
        let p = DboParams {
            window: 5,
            ..DboParams::full(0.8, 0.5 + 0.3 * seed as f64)
        };
        let got = dbo_forward(&x, &p).unwrap();
        assert!(max_abs_diff(got.data(), &dbo(&x, 0.8, Some(p.sigma_s), 5)) < 1e-6, "seed {seed}");
    }
}

#[test]
fn dbo_large_range_scale_is_box_mean() {
    for seed in SEEDS {
        let x = random(&[1, 2, 5, 5], -1.0, 1.0, seed);
        let got = dbo_forward(&x, &DboParams::range_only(1e6)).unwrap();
        let ones = Tensor::full([1, 2, 5, 5], 1.0);
        // box sum and neighbour count via the convolution reference
        let mut w = Tensor::full([2, 2, 3, 3], 0.0);
        for c in 0..2 {
            for i in 0..9 {
                w.data_mut()[(c * 2 + c) * 9 + i] = 1.0;
            }
        }
        let sum = conv2d(&x, &w, &[0.0, 0.0]);
        let count = conv2d(&ones, &w, &[0.0, 0.0]);
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / n).collect();
        assert!(max_abs_diff(got.data(), &mean) < 1e-4, "seed {seed}");
    }
}

#[test]
fn dbo_full_with_wide_spatial_scale_equals_range_only() {
    for seed in SEEDS {
        let x = random(&[1, 2, 5, 5], -1.0, 1.0, seed);
        let a = dbo_forward(&x, &DboParams::full(1.0, 1e8)).unwrap();
        let b = dbo_forward(&x, &DboParams::range_only(1.0)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "seed {seed}");
    }
}

#[test]
fn conv2d_matches_reference() {
    for seed in SEEDS {
        let k = [1, 3, 5][seed as usize % 3];
        let spec = ConvSpec::new(2, 3, k).unwrap();
        let x = random(&[2, 2, 5, 5], -1.0, 1.0, seed);
        let w = random(&spec.weight_shape(), -1.0, 1.0, seed + 100);
        let b = random(&[3], -1.0, 1.0, seed + 200);
        let got = conv2d_forward(&x.cast::<f32>(), &spec, &w.cast(), &b.cast()).unwrap().cast::<f64>();
        let want = conv2d(&x.cast::<f32>().cast(), &w.cast::<f32>().cast(), &b.cast::<f32>().cast::<f64>().into_data());
        assert!(max_abs_diff(got.data(), &want) < 1e-5, "seed {seed}");
    }
}

#[test]
fn maxpool2_matches_reference() {
    for seed in SEEDS {
        let x = random(&[1, 1 + seed as usize % 2, 8, 8], -1.0, 1.0, seed);
        let (got, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(got.data(), &maxpool2(&x)[..], "seed {seed}");
    }
}

#[test]
fn refine_matches_reference() {
    for seed in SEEDS {
        let k = [3, 5][seed as usize % 2];
        let f = random(&[1, 2, 6, 6], -1.0, 1.0, seed);
        let kernels = softmax_channels(&random(&[1, k * k, 6, 6], -2.0, 2.0, seed + 50));
        let got = refine_forward(&f, &kernels).unwrap();
        assert!(max_abs_diff(got.data(), &refine(&f, &kernels)) < 1e-6, "seed {seed}");
    }
}

fn scalar_loss(
    f: impl Fn(&mut Tape<f64>, bcn_fas::Var, bcn_fas::Var) -> bcn_fas::Result<bcn_fas::Var>,
    p: &Tensor<f64>,
    t: &Tensor<f64>,
) -> f64 {
    let mut tape = Tape::new();
    let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
    let out = f(&mut tape, pv, tv).unwrap();
    tape.value(out).item()
}

#[test]
fn losses_match_reference() {
    for seed in SEEDS {
        let p = random(&[2, 3, 4, 4], 0.0, 1.0, seed);
        let t = random(&[2, 3, 4, 4], 0.0, 1.0, seed + 10);
        assert!((scalar_loss(mse, &p, &t) - common::mse(p.data(), t.data())).abs() < 1e-7);

        let hard = Tensor::from_fn([2, 3, 4, 4], |i| ((i as u64 + seed) % 2) as f64);
        // saturated probabilities exercise the clamp
        let mut ps = p.clone();
        ps.data_mut()[0] = 0.0;
        ps.data_mut()[1] = 1.0;
        assert!((scalar_loss(loss_patch, &ps, &hard) - bce(ps.data(), hard.data())).abs() < 1e-6);

        let probs = softmax_channels(&random(&[2, 5, 3, 3], -3.0, 3.0, seed + 20));
        let classes = Tensor::from_fn([2, 1, 3, 3], |i| ((i as u64 * 7 + seed) % 5) as f64);
        let got = scalar_loss(loss_patch_material, &probs, &classes);
        assert!((got - categorical_ce(&probs, &classes)).abs() < 1e-7, "seed {seed}");
    }
}
