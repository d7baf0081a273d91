//! Property tests for the layout, attention, refinement, resampling,
//! disparity, metric and file invariants.

use depthkit::disparity::{disp_to_depth, AttDisp, DispConfig, DispKind, MAX_DEPTH_OUT, MIN_DEPTH_OUT};
use depthkit::graph::Graph;
use depthkit::io::{decode_tensor, encode_tensor, AnyTensor};
use depthkit::metrics::{ada_search_scale, compute_metrics, scale_factor, DEFAULT_CAP};
use depthkit::nn::{Mha, MhaSpec, Module};
use depthkit::param::ParamStore;
use depthkit::refine::{Refine, RefineConfig, RefineKind};
use depthkit::resample::{Down, DownKind, Up, UpKind, UpRefine};
use depthkit::scene::{synth_scene, SceneSpec};
use depthkit::tensor::{self, Axis, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn run<M: Module>(store: &ParamStore<f64>, m: &M, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::with_params(store);
    let v = g.constant(x.clone());
    let y = m.forward(&mut g, v).unwrap();
    g.value(y).clone()
}

fn map_shape() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..5).prop_map(|(n, c, h, w)| [n, c, 2 * h, 2 * w])
}

fn depth_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (4usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(0.05f64..120.0, n),
            prop::collection::vec(0.2f64..90.0, n),
            prop::collection::vec(prop::bool::weighted(0.85), n),
        )
            .prop_filter("some pixel valid", |(_, _, m)| m.iter().any(|&v| v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn layout_ops_permute_values(shape in map_shape(), seed in any::<u64>()) {
        let x = randn(&shape, seed);
        let sorted = x.sorted_values();
        for axis in [Axis::Height, Axis::Width] {
            let f = tensor::axial_fold(&x, axis, 2).unwrap();
            prop_assert_eq!(f.sorted_values(), sorted.clone());
            prop_assert!(tensor::axial_unfold(&f, axis, 2).unwrap().bit_eq(&x));
        }
        let s = tensor::pixel_unshuffle(&x, 2).unwrap();
        prop_assert_eq!(s.sorted_values(), sorted.clone());
        prop_assert!(tensor::pixel_shuffle(&s, 2).unwrap().bit_eq(&x));
        let p = tensor::permute(&x, &[0, 2, 3, 1]).unwrap();
        prop_assert_eq!(p.sorted_values(), sorted.clone());
        let cat = tensor::concat(&[&x, &p.reshape(x.shape()).unwrap()], 1).unwrap();
        let back = tensor::slice_axis(&cat, 1, 0, shape[1]).unwrap();
        prop_assert!(back.bit_eq(&x));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..6, cols in 1usize..12, seed in any::<u64>(), shift in -50.0f64..50.0, scale in 0.1f64..40.0,
    ) {
        let x = Tensor::<f64>::randn(&[rows, cols], scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = tensor::softmax(&x, 1).unwrap();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let shifted = tensor::softmax(&x.map(|v| v + shift), 1).unwrap();
        prop_assert!(shifted.max_abs_diff(&y) <= 1e-6);
    }

    #[test]
    fn mha_without_projection_or_mlp_is_identity(tokens in 1usize..6, heads in 1usize..3, seed in any::<u64>()) {
        let embed = 4 * heads;
        let mut store = ParamStore::<f64>::new(seed);
        let m = Mha::new(&mut store.scope(""), "m", MhaSpec::new(tokens, embed, heads).unwrap()).unwrap();
        store.perturb_all(seed, 0.5);
        let zeroed: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.contains("proj") || p.name.contains("mlp"))
            .map(|(id, p)| (id, Tensor::zeros(p.value.shape())))
            .collect();
        prop_assert!(!zeroed.is_empty());
        for (id, z) in zeroed {
            store.set_value(id, z).unwrap();
        }
        let x = randn(&[2, tokens, embed], seed ^ 1);
        prop_assert!(run(&store, &m, &x).bit_eq(&x));
    }

    #[test]
    fn fresh_ada_rm_is_identity(c in 1usize..3, h in 1usize..3, w in 1usize..3, seed in any::<u64>()) {
        let cfg = RefineConfig {
            channels: 4 * c,
            height: 4 * h,
            width: 4 * w,
            squeeze: 2,
            sub: (2, 2),
            embed: 4,
            heads: 2,
            kind: RefineKind::AdaRm,
        };
        let mut store = ParamStore::<f64>::new(seed);
        let m = Refine::new(&mut store.scope(""), "r", cfg).unwrap();
        let x = randn(&[1, 4 * c, 4 * h, 4 * w], seed);
        prop_assert!(run(&store, &m, &x).bit_eq(&x));

        let rm = Refine::new(&mut store.scope(""), "rm", RefineConfig { kind: RefineKind::Rm, ..cfg }).unwrap();
        prop_assert_eq!(run(&store, &rm, &x).shape().to_vec(), x.shape().to_vec());
    }

    #[test]
    fn downsamplers_halve_and_ada_matches_core(c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let (c, h, w) = (2 * c, 2 * h, 2 * w);
        let x = randn(&[1, c, h, w], seed);
        for kind in DownKind::ALL {
            let mut store = ParamStore::<f64>::new(seed);
            let d = Down::new(&mut store.scope(""), "d", kind, c, h, w).unwrap();
            let y = run(&store, &d, &x);
            prop_assert_eq!(y.shape(), &[1, c, h / 2, w / 2][..]);
            prop_assert!(y.bit_eq(&run(&store, &d.without_adaptive(), &x)));
        }
    }

    #[test]
    fn upsamplers_double_and_keep_channels(c in 1usize..3, h in 1usize..3, w in 1usize..3, seed in any::<u64>()) {
        let (c, h, w) = (2 * c, 2 * h, 2 * w);
        let rc = UpRefine { squeeze: 2, sub: (2, 2), embed: 4, heads: 2 };
        let x = randn(&[1, c, h, w], seed);
        for kind in UpKind::ALL {
            let mut store = ParamStore::<f64>::new(seed);
            let u = Up::new(&mut store.scope(""), "u", kind, c, h, w, rc).unwrap();
            prop_assert_eq!(run(&store, &u, &x).shape().to_vec(), vec![1, c, 2 * h, 2 * w]);
        }
    }

    #[test]
    fn att_disp_is_inside_the_open_unit_interval(seed in any::<u64>(), noise in 0.0f64..0.3) {
        let cfg = DispConfig { channels: 4, height: 8, width: 8, sub: (4, 4), embed: 4, heads: 2, kind: DispKind::AttDisp };
        let mut store = ParamStore::<f64>::new(seed);
        let m = AttDisp::new(&mut store.scope(""), "a", &cfg).unwrap();
        store.perturb_all(seed, noise);
        let y = run(&store, &m, &randn(&[2, 4, 8, 8], seed ^ 7));
        let (lo, hi) = y.data().iter().fold((1.0f64, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
        prop_assert!(lo > 0.0 && hi < 1.0, "range {lo:e} {hi}");
    }

    #[test]
    fn disp_to_depth_is_decreasing_and_bounded(mut d in prop::collection::vec(0.0f64..=1.0, 2..50)) {
        d.sort_by(f64::total_cmp);
        d.dedup();
        let z = disp_to_depth(&Tensor::from_vec(d)).unwrap();
        prop_assert!(z.data().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(z.data().iter().all(|v| (MIN_DEPTH_OUT..=MAX_DEPTH_OUT).contains(v)));
    }

    #[test]
    fn metrics_are_bounded((pred, gt, mask) in depth_pair(), cap in 10.0f64..100.0) {
        let m = compute_metrics(&pred, &gt, &mask, cap).unwrap();
        prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
        prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
    }

    #[test]
    fn search_never_loses_to_its_endpoints((pred, gt, mask) in depth_pair()) {
        let best = ada_search_scale(&pred, &gt, &mask, DEFAULT_CAP).unwrap();
        prop_assert!(best.scale > 0.0);
        for zeta in [0.0, 1.0] {
            let s = scale_factor(&pred, &gt, &mask, zeta).unwrap();
            let scaled: Vec<f64> = pred.iter().map(|p| p * s).collect();
            prop_assert!(best.abs_rel <= compute_metrics(&scaled, &gt, &mask, DEFAULT_CAP).unwrap().abs_rel);
        }
    }

    #[test]
    fn scale_factor_ignores_joint_rescaling((pred, gt, mask) in depth_pair(), k in 0.01f64..100.0, zeta in 0.0f64..=1.0) {
        let a = scale_factor(&pred, &gt, &mask, zeta).unwrap();
        let p: Vec<f64> = pred.iter().map(|v| v * k).collect();
        let g: Vec<f64> = gt.iter().map(|v| v * k).collect();
        let b = scale_factor(&p, &g, &mask, zeta).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn tensor_records_round_trip(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let x = randn(&shape, seed);
        let (back, used) = decode_tensor(&encode_tensor(&x).unwrap()).unwrap();
        prop_assert_eq!(used, 8 + 4 * shape.len() + 8 * x.numel());
        prop_assert!(matches!(back, AnyTensor::F64(t) if t.bit_eq(&x)));
        let y = x.cast::<f32>();
        let (back, _) = decode_tensor(&encode_tensor(&y).unwrap()).unwrap();
        prop_assert!(matches!(back, AnyTensor::F32(t) if t.bit_eq(&y)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn scenes_are_pure_functions_of_their_spec(seed in any::<u64>(), objects in 0usize..6) {
        let spec = SceneSpec { seed, objects, height: 16, width: 24, ..SceneSpec::default() };
        let (i1, d1) = synth_scene::<f32>(&spec).unwrap();
        let (i2, d2) = synth_scene::<f32>(&spec).unwrap();
        prop_assert!(i1.bit_eq(&i2) && d1.bit_eq(&d2));
        prop_assert!(d1.data().iter().all(|&z| (spec.near as f32..=spec.far as f32).contains(&z)));
    }
}
