//! Randomised invariants.

mod common;

use bcn_fas::bcn::{bcn_level, BcnConfig, DboPlacement};
use bcn_fas::bilateral::{bilateral_base_direct, bilateral_decompose, dbo_forward, BilateralParams, DboParams};
use bcn_fas::mfrm::refine_forward;
use bcn_fas::params::ModelParams;
use bcn_fas::supervision::{loss_patch, mse, score, HeadOutputs, PatchMode};
use bcn_fas::tensor::{softmax_channel_forward, Tape, Tensor};
use common::random;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..4, 2usize..7, 2usize..7, any::<u64>())
}

fn dbo_params() -> impl Strategy<Value = DboParams> {
    (0.2f64..3.0, prop_oneof![Just(1usize), Just(3), Just(5)], any::<bool>(), 0.5f64..3.0).prop_map(
        |(sigma_r, window, use_spatial, sigma_s)| DboParams {
            sigma_r,
            window,
            use_spatial,
            sigma_s,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reusing_a_tensor_sums_its_gradients((c, h, w, seed) in dims()) {
        let x = random(&[1, c, h, w], -1.0, 1.0, seed);
        let k = random(&[1, c, h, w], -1.0, 1.0, seed ^ 1);
        let grad_of = |uses: usize| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let kv = tape.constant(k.clone());
            let mut terms = Vec::new();
            for _ in 0..uses {
                let m = tape.mul(xv, kv).unwrap();
                terms.push(tape.sum(m).unwrap());
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t).unwrap();
            }
            tape.backward(total).unwrap();
            tape.grad(xv).unwrap().to_vec()
        };
        let once = grad_of(1);
        let twice = grad_of(2);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert_eq!(a + a, *b);
        }
    }

    #[test]
    fn softmax_is_positive_and_sums_to_one((c, h, w, seed) in dims(), scale in 0.1f64..30.0) {
        let x = random(&[2, c + 1, h, w], -scale, scale, seed);
        let p = softmax_channel_forward(&x).unwrap();
        let plane = h * w;
        for s in 0..2 {
            for i in 0..plane {
                let total: f64 = (0..=c).map(|k| p.data()[(s * (c + 1) + k) * plane + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn filters_keep_constants((c, h, w, seed) in dims(), p in dbo_params(), v in -5.0f64..5.0) {
        let x = Tensor::full([1, c, h, w], v);
        let y = dbo_forward(&x, &p).unwrap();
        prop_assert!(y.data().iter().all(|&o| (o - v).abs() <= 1e-6));
        let img = Tensor::<f32>::full([h, w, c], (v.abs() / 5.0) as f32);
        let bp = BilateralParams::new(1.0 + (seed % 3) as f64, 0.1, 5).unwrap();
        let base = bilateral_base_direct(&img, &bp).unwrap();
        prop_assert!(base.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn decomposition_rebuilds_the_image((c, h, w, seed) in dims()) {
        let img = random(&[h + 4, w + 4, c], 0.0, 1.0, seed).cast::<f32>();
        let p = BilateralParams::defaults_for(&img).unwrap();
        let d = bilateral_decompose(&img, &p).unwrap();
        for ((b, r), i) in d.base.data().iter().zip(d.residual.data()).zip(img.data()) {
            prop_assert_eq!(*r, i - b);
        }
        prop_assert!(d.reconstruct().max_abs_diff(&img) <= f32::EPSILON as f64);
    }

    #[test]
    fn dbo_commutes_with_channel_permutations((c, h, w, seed) in dims(), p in dbo_params()) {
        let c = c + 1;
        let x = random(&[1, c, h, w], -1.0, 1.0, seed);
        let plane = h * w;
        // rotate channels by one
        let rotate = |t: &Tensor<f64>| {
            Tensor::from_fn([1, c, h, w], |i| t.data()[((i / plane + 1) % c) * plane + i % plane])
        };
        let a = dbo_forward(&rotate(&x), &p).unwrap();
        let b = rotate(&dbo_forward(&x, &p).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dbo_stays_within_its_window((c, h, w, seed) in dims(), p in dbo_params()) {
        let x = random(&[1, c, h, w], -1.0, 1.0, seed);
        let y = dbo_forward(&x, &p).unwrap();
        let r = (p.window / 2) as isize;
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for a in -r..=r {
                        for b in -r..=r {
                            let (qi, qj) = (i + a, j + b);
                            if qi >= 0 && qj >= 0 && qi < h as isize && qj < w as isize {
                                let v = x.at4(0, ch, qi as usize, qj as usize);
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    let o = y.at4(0, ch, i as usize, j as usize);
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn refine_is_a_convex_combination((c, h, w, seed) in dims(), k in prop_oneof![Just(1usize), Just(3), Just(5)]) {
        let f = random(&[1, c, h, w], -1.0, 1.0, seed);
        let kernels = softmax_channel_forward(&random(&[1, k * k, h, w], -4.0, 4.0, seed ^ 7)).unwrap();
        let y = refine_forward(&f, &kernels).unwrap();
        let r = (k / 2) as isize;
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    // out-of-map neighbours count as zero
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for a in -r..=r {
                        for b in -r..=r {
                            let (qi, qj) = (i + a, j + b);
                            let v = if qi >= 0 && qj >= 0 && qi < h as isize && qj < w as isize {
                                f.at4(0, ch, qi as usize, qj as usize)
                            } else {
                                0.0
                            };
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let o = y.at4(0, ch, i as usize, j as usize);
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_targets((c, h, w, seed) in dims()) {
        let p = random(&[1, c, h, w], 0.0, 1.0, seed);
        let t = random(&[1, c, h, w], 0.0, 1.0, seed ^ 3);
        let mut tape = Tape::new();
        let (pv, tv) = (tape.constant(p.clone()), tape.constant(t));
        let l = mse(&mut tape, pv, tv).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
        let same = mse(&mut tape, pv, pv).unwrap();
        prop_assert_eq!(tape.value(same).item(), 0.0);
        let hard = tape.constant(p.map(|v| v.round()));
        let b = loss_patch(&mut tape, pv, hard).unwrap();
        prop_assert!(tape.value(b).item() >= 0.0);
        let exact = loss_patch(&mut tape, hard, hard).unwrap();
        prop_assert!(tape.value(exact).item() <= 1.1e-7);
    }

    #[test]
    fn score_is_bounded_and_monotone(seed in any::<u64>(), pick in 0usize..16, bump in 0.0f64..1.0) {
        let outputs = |d: Tensor<f64>, r: Tensor<f64>, p: Tensor<f64>| HeadOutputs {
            depth: d,
            reflection: r,
            patch: p,
            mode: PatchMode::Binary,
        };
        let d = random(&[1, 1, 4, 4], 0.0, 1.0, seed);
        let r = random(&[1, 3, 4, 4], 0.0, 1.0, seed ^ 1);
        let p = random(&[1, 1, 4, 4], 0.0, 1.0, seed ^ 2);
        let base = score(&outputs(d.clone(), r.clone(), p.clone())).unwrap()[0];
        prop_assert!((0.0..=3.0).contains(&base));
        let raise = |t: &Tensor<f64>| {
            let mut t = t.clone();
            let v = &mut t.data_mut()[pick];
            *v = (*v + bump).min(1.0);
            t
        };
        prop_assert!(score(&outputs(raise(&d), r.clone(), p.clone())).unwrap()[0] >= base);
        prop_assert!(score(&outputs(d.clone(), raise(&r), p.clone())).unwrap()[0] <= base);
        prop_assert!(score(&outputs(d.clone(), r.clone(), raise(&p))).unwrap()[0] >= base);
        let zeros = score(&outputs(d.map(|_| 0.0), r.map(|_| 1.0), p.map(|_| 0.0))).unwrap()[0];
        let ones = score(&outputs(d.map(|_| 1.0), r.map(|_| 0.0), p.map(|_| 1.0))).unwrap()[0];
        prop_assert_eq!((zeros, ones), (0.0, 3.0));
    }
}

fn small_bcn(placement: DboPlacement) -> BcnConfig {
    BcnConfig {
        input_size: 8,
        stem_channels: 3,
        level_channels: [[4, 5, 4], [4, 4, 4], [4, 4, 4]],
        dbo: DboParams::range_only(1.0),
        dbo_placement: placement,
    }
}

fn run_level(cfg: &BcnConfig, params: &ModelParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let layers = cfg.bind_level(&vars, 0).unwrap();
    let out = bcn_level(&mut tape, xv, &layers, cfg).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zeroing_a_branch_leaves_the_other(seed in any::<u64>()) {
        let cfg = small_bcn(DboPlacement::Input);
        let params = ModelParams::<f64>::init_uniform(&cfg.param_specs(), seed);
        let x = random(&[1, 3, 8, 8], 0.0, 1.0, seed ^ 5);

        let mut only_base = params.clone();
        only_base.zero_prefix("bcn.level0.conv_block");
        let mut only_residual = params.clone();
        only_residual.zero_prefix("bcn.level0.bilateral_block");

        // the remaining branch alone, pooled, built from the untouched params
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let layers = cfg.bind_level(&vars, 0).unwrap();
        let base = bcn_fas::bcn::bilateral_conv_block(&mut tape, xv, &layers.bilateral_block, &cfg.dbo, cfg.dbo_placement).unwrap();
        let base = tape.maxpool2(base).unwrap();
        let residual = bcn_fas::bcn::conv_block(&mut tape, xv, &layers.conv_block).unwrap();
        let residual = tape.maxpool2(residual).unwrap();

        prop_assert_eq!(run_level(&cfg, &only_base, &x).into_data(), tape.value(base).data().to_vec());
        prop_assert_eq!(run_level(&cfg, &only_residual, &x).into_data(), tape.value(residual).data().to_vec());
    }

    #[test]
    fn level_forward_is_deterministic(seed in any::<u64>()) {
        let cfg = small_bcn(DboPlacement::Input);
        let params = ModelParams::<f64>::init_uniform(&cfg.param_specs(), seed);
        let x = random(&[1, 3, 8, 8], 0.0, 1.0, seed ^ 9);
        prop_assert_eq!(run_level(&cfg, &params, &x).into_data(), run_level(&cfg, &params, &x).into_data());
    }
}

#[test]
fn removing_the_dbo_changes_outputs() {
    let with = small_bcn(DboPlacement::Input);
    let without = small_bcn(DboPlacement::Disabled);
    let params = ModelParams::<f64>::init_uniform(&with.param_specs(), 3);
    let x = random(&[1, 3, 8, 8], 0.0, 1.0, 4);
    let a = run_level(&with, &params, &x);
    let b = run_level(&without, &params, &x);
    assert!(a.max_abs_diff(&b) > 1e-3);
}

#[test]
fn targets_follow_the_zeroing_rule_over_a_manifest() {
    use bcn_fas::{dataset, manifest, synth, ModelConfig};
    let dir = tempfile::tempdir().unwrap();
    let path = synth::synth_dataset(6, 6, 11, dir.path()).unwrap();
    let samples = dataset::load_samples(&manifest::read_manifest(&path).unwrap(), &ModelConfig::tiny()).unwrap();
    assert_eq!(samples.len(), 12);
    for s in &samples {
        let (d, r, p) = (&s.targets.depth, &s.targets.reflection, &s.targets.patch);
        for t in [d, r, p] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        if s.label.is_live() {
            assert_eq!(r.data().iter().sum::<f32>(), 0.0);
            assert!(d.data().iter().sum::<f32>() > 0.0);
            assert!(p.data().iter().all(|&v| v == 1.0));
        } else {
            assert_eq!(d.data().iter().sum::<f32>(), 0.0);
            assert!(r.data().iter().sum::<f32>() > 0.0);
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }
}
