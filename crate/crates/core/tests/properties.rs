use edsc::deformable::{effective_sampling_map, MaskField, OffsetField, SepKernelField};
use edsc::io::{decode_checkpoint, decode_flow, decode_ppm, encode_checkpoint, encode_flow, encode_ppm};
use edsc::metrics::{ie_boundary, in_border, interpolation_error, masked_rmse, psnr, ssim};
use edsc::model::{build_model, ModelConfig};
use edsc::sampling::{BilinearWeights, FlowField};
use edsc::training::dni_interpolate;
use edsc::{Frame, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frame(seed: u64, w: usize, h: usize) -> Frame {
    let t = Tensor::<f64>::uniform([1, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Frame::from_tensor(&t, 0).unwrap()
}

fn noisy(f: &Frame, seed: u64, amp: f64) -> Frame {
    let n = frame(seed, f.width(), f.height());
    let data = f.data().iter().zip(n.data()).map(|(a, b)| a + amp * (b - 0.5)).collect();
    Frame::from_planes(f.width(), f.height(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bilinear_weights_sum_to_one(x in -20.0f64..40.0, y in -20.0f64..40.0, w in 1usize..12, h in 1usize..12) {
        let bw = BilinearWeights::at(x, y, w, h);
        let s: f64 = bw.weight.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(bw.weight.iter().all(|&v| v >= 0.0));
        prop_assert!(bw.index.iter().all(|&i| i < w * h));
    }

    #[test]
    fn constant_image_samples_to_constant(c in -3.0f64..3.0, x in -9.0f64..9.0, y in -9.0f64..9.0) {
        let plane = vec![c; 20];
        let v = BilinearWeights::at(x, y, 5, 4).sample(&plane);
        prop_assert!((v - c).abs() < 1e-12);
    }

    #[test]
    fn sampling_map_conserves_kernel_mass(seed in 0u64..1000, px in 0usize..6, py in 0usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 3, 5, 6);
        let n = 3;
        let u = |r: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64| Tensor::<f64>::uniform(s.with_channels(c), lo, hi, r);
        let k = SepKernelField { k1v: u(&mut r, n, -1.0, 1.0), k1h: u(&mut r, n, -1.0, 1.0), k2v: u(&mut r, n, -1.0, 1.0), k2h: u(&mut r, n, -1.0, 1.0) };
        let o = OffsetField { off1: u(&mut r, 2 * n * n, -5.0, 5.0), off2: u(&mut r, 2 * n * n, -5.0, 5.0) };
        let m = MaskField { mask1: u(&mut r, n * n, 0.0, 1.0), mask2: u(&mut r, n * n, 0.0, 1.0) };
        let map = effective_sampling_map(&k, &o, &m, 0, px, py).unwrap();
        let mut want = 0.0;
        for (kv, kh, mk) in [(&k.k1v, &k.k1h, &m.mask1), (&k.k2v, &k.k2h, &m.mask2)] {
            for j in 0..n * n {
                want += (kv.at(0, j / n, py, px) * kh.at(0, j % n, py, px) * mk.at(0, j, py, px)).abs();
            }
        }
        prop_assert!((map.total_mass() - want).abs() < 1e-10);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..500, a in 0.01f64..0.2, extra in 0.01f64..0.2) {
        let gt = frame(seed, 12, 12);
        let p1 = psnr(&noisy(&gt, seed + 1, a), &gt, 1.0).unwrap();
        let p2 = psnr(&noisy(&gt, seed + 1, a + extra), &gt, 1.0).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn ssim_is_bounded_and_one_on_identity(seed in 0u64..500, amp in 0.0f64..1.0) {
        let gt = frame(seed, 16, 14);
        let s = ssim(&noisy(&gt, seed ^ 7, amp), &gt).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((ssim(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_ie_covering_frame_is_ie(seed in 0u64..500, w in 2usize..20, h in 2usize..20) {
        let gt = frame(seed, w, h);
        let pred = noisy(&gt, seed + 3, 0.3);
        let band = w.max(h);
        let a = ie_boundary(&pred, &gt, band).unwrap();
        prop_assert!((a - interpolation_error(&pred, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ie_over_a_union_pools_squared_errors(seed in 0u64..500, band in 1usize..5) {
        let (w, h) = (14, 11);
        let gt = frame(seed, w, h);
        let pred = noisy(&gt, seed + 9, 0.4);
        let inside = |x, y| !in_border(x, y, w, h, band);
        let n_in = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| inside(x, y)).count() as f64;
        let n_out = (w * h) as f64 - n_in;
        let ie_in = if n_in > 0.0 { masked_rmse(&pred, &gt, inside).unwrap() } else { 0.0 };
        let ie_out = ie_boundary(&pred, &gt, band).unwrap();
        let pooled = ((n_in * ie_in * ie_in + n_out * ie_out * ie_out) / (w * h) as f64).sqrt();
        prop_assert!((pooled - interpolation_error(&pred, &gt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn dni_is_affine_in_alpha(alpha in -0.5f64..1.5, beta in 0.0f64..1.0) {
        let cfg = ModelConfig { widths: vec![4, 6], estimator_widths: [4, 4, 4], block_depth: 1, hetconv_p: 2, ..ModelConfig::default() };
        let a = build_model::<f64>(&cfg, 1).unwrap();
        let b = build_model::<f64>(&cfg, 2).unwrap();
        let mid = dni_interpolate(&a, &b, alpha).unwrap();
        let lerp = dni_interpolate(&a, &mid, beta).unwrap();
        let direct = dni_interpolate(&a, &b, alpha * beta).unwrap();
        for (name, t) in lerp.iter() {
            prop_assert!(t.max_abs_diff(direct.get(name).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn ppm_round_trip_is_stable(seed in 0u64..500, w in 1usize..9, h in 1usize..9) {
        let f = frame(seed, w, h);
        let once = decode_ppm(&encode_ppm(&f)).unwrap();
        for (a, b) in once.data().iter().zip(f.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let bytes = encode_ppm(&once);
        prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
    }

    #[test]
    fn flow_round_trip_is_exact_in_f32(seed in 0u64..500, w in 1usize..9, h in 1usize..9) {
        let t = Tensor::<f32>::uniform([1, 2, h, w], -30.0, 30.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let f = FlowField::new(t).unwrap();
        let back: FlowField<f32> = decode_flow(&encode_flow(&f).unwrap()).unwrap();
        prop_assert_eq!(back.tensor().data(), f.tensor().data());
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in 0u64..50, multi in any::<bool>()) {
        let cfg = ModelConfig { widths: vec![4, 6, 8], estimator_widths: [4, 4, 4], block_depth: 1, hetconv_p: 2, multi_time: multi, seed, ..ModelConfig::default() };
        let p = build_model::<f32>(&cfg, seed).unwrap();
        let q: edsc::model::ModelParams<f32> = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        prop_assert_eq!(q.config(), p.config());
        for (name, t) in p.iter() {
            prop_assert_eq!(q.get(name).unwrap().data(), t.data());
        }
    }
}
