//! Library operators against independent brute-force implementations.

use std::sync::Arc;

use edsc::autodiff::HetPlan;
use edsc::deformable::{
    edsc_forward, flow_mode, sepconv_reference, BiasField, MaskField, OffsetField, SepKernelField,
};
use edsc::sampling::{flow_as_conv, flow_warp, FlowField};
use edsc::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let ws = w.shape();
    let k = ws.height;
    let oh = (s.height + 2 * pad - k) / stride + 1;
    let ow = (s.width + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([s.batch, ws.batch, oh, ow]);
    for n in 0..s.batch {
        for o in 0..ws.batch {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..s.channels {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                    continue;
                                }
                                acc += w.at(o, c, i, j) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    out
}

fn graph_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.input(x.clone()).unwrap(), g.input(w.clone()).unwrap(), g.input(b.clone()).unwrap());
    let y = g.conv2d(xi, wi, bi, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv2d_matches_loop_oracle_on_small_shapes() {
    let mut r = rng(1);
    for b in 1..=2 {
        for c in 1..=4 {
            for h in [1, 2, 5, 9] {
                for w in [1, 3, 4, 9] {
                    for (k, stride) in [(1, 1), (3, 1), (3, 2)] {
                        let x = Tensor::uniform([b, c, h, w], -1.0, 1.0, &mut r);
                        let wt = Tensor::uniform([3, c, k, k], -1.0, 1.0, &mut r);
                        let bias = Tensor::uniform([1, 1, 1, 3], -1.0, 1.0, &mut r);
                        let pad = k / 2;
                        let got = graph_conv(&x, &wt, &bias, stride, pad);
                        let want = naive_conv(&x, &wt, bias.data(), stride, pad);
                        assert_eq!(got.shape(), want.shape());
                        assert!(got.max_abs_diff(&want) <= 1e-12, "{:?}", (b, c, h, w, k, stride));
                    }
                }
            }
        }
    }
}

/// Dense 3x3 weights equivalent to a HetConv layer, built from the shifted
/// arrangement directly.
fn dense_hetconv_weight(w3: &Tensor<f64>, w1: &Tensor<f64>, cin: usize, p: usize) -> Tensor<f64> {
    let cout = w3.shape().batch;
    let g = cin.div_ceil(p);
    let mut full = Tensor::zeros([cout, cin, 3, 3]);
    for m in 0..cout {
        let three: Vec<usize> = (0..g).map(|j| (m * g + j) % cin).collect();
        for (j, &ch) in three.iter().enumerate() {
            for i in 0..3 {
                for k in 0..3 {
                    full.set(m, ch, i, k, w3.at(m, j, i, k));
                }
            }
        }
        let ones: Vec<usize> = (0..cin).filter(|c| !three.contains(c)).collect();
        for (j, &ch) in ones.iter().enumerate() {
            full.set(m, ch, 1, 1, w1.at(m, j, 0, 0));
        }
    }
    full
}

#[test]
fn hetconv_matches_dense_equivalent() {
    let mut r = rng(2);
    for (cin, cout, p) in [(4, 3, 4), (6, 5, 4), (8, 8, 2), (5, 7, 3), (16, 4, 4), (3, 2, 1)] {
        let x = Tensor::uniform([2, cin, 5, 6], -1.0, 1.0, &mut r);
        let plan = Arc::new(HetPlan::new(cin, cout, p).unwrap());
        let (s3, s1) = plan.weight_shapes();
        let w3 = Tensor::uniform(s3, -1.0, 1.0, &mut r);
        let w1 = Tensor::uniform(s1, -1.0, 1.0, &mut r);
        let b = Tensor::uniform([1, 1, 1, cout], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let ids = [x.clone(), w3.clone(), w1.clone(), b.clone()].map(|t| g.input(t).unwrap());
        let y = g.hetconv2d(ids[0], ids[1], ids[2], ids[3], plan).unwrap();
        let want = naive_conv(&x, &dense_hetconv_weight(&w3, &w1, cin, p), b.data(), 1, 1);
        assert!(g.value(y).max_abs_diff(&want) <= 1e-12, "{:?}", (cin, cout, p));
    }
}

#[test]
fn hetconv_with_one_part_is_conv2d() {
    let mut r = rng(3);
    let x = Tensor::uniform([2, 4, 7, 5], -1.0, 1.0, &mut r);
    let plan = Arc::new(HetPlan::new(4, 6, 1).unwrap());
    let (s3, s1) = plan.weight_shapes();
    assert_eq!(s1.numel(), 0);
    let w3 = Tensor::uniform(s3, -1.0, 1.0, &mut r);
    let b = Tensor::uniform([1, 1, 1, 6], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let ids = [x.clone(), w3.clone(), Tensor::zeros(s1), b.clone()].map(|t| g.input(t).unwrap());
    let y = g.hetconv2d(ids[0], ids[1], ids[2], ids[3], plan).unwrap();
    assert!(g.value(y).max_abs_diff(&graph_conv(&x, &w3, &b, 1, 1)) <= 1e-12);
}

fn bilinear_oracle(img: &Tensor<f64>, b: usize, c: usize, x: f64, y: f64) -> f64 {
    let s = img.shape();
    let px = |xi: i64, yi: i64| {
        let xi = xi.clamp(0, s.width as i64 - 1) as usize;
        let yi = yi.clamp(0, s.height as i64 - 1) as usize;
        img.at(b, c, yi, xi)
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    (1.0 - ay) * ((1.0 - ax) * px(x0, y0) + ax * px(x0 + 1, y0))
        + ay * ((1.0 - ax) * px(x0, y0 + 1) + ax * px(x0 + 1, y0 + 1))
}

struct Fields {
    k: SepKernelField<f64>,
    o: OffsetField<f64>,
    m: MaskField<f64>,
    b: BiasField<f64>,
}

fn random_fields(r: &mut ChaCha8Rng, s: Shape, n: usize, reach: f64) -> Fields {
    let u = |r: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64| Tensor::uniform(s.with_channels(c), lo, hi, r);
    Fields {
        k: SepKernelField {
            k1v: u(r, n, -1.0, 1.0),
            k1h: u(r, n, -1.0, 1.0),
            k2v: u(r, n, -1.0, 1.0),
            k2h: u(r, n, -1.0, 1.0),
        },
        o: OffsetField {
            off1: u(r, 2 * n * n, -reach, reach),
            off2: u(r, 2 * n * n, -reach, reach),
        },
        m: MaskField {
            mask1: u(r, n * n, 0.01, 0.99),
            mask2: u(r, n * n, 0.01, 0.99),
        },
        b: BiasField { bias: u(r, 3, -0.3, 0.3) },
    }
}

/// Materialises every resampled patch, then dot-products with the outer
/// product kernel.
fn patch_oracle(i1: &Tensor<f64>, i2: &Tensor<f64>, f: &Fields, n: usize) -> Tensor<f64> {
    let s = i1.shape();
    let half = (n / 2) as f64;
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                for c in 0..3 {
                    let mut acc = f.b.bias.at(b, c, y, x);
                    for (img, kv, kh, off, mask) in [
                        (i1, &f.k.k1v, &f.k.k1h, &f.o.off1, &f.m.mask1),
                        (i2, &f.k.k2v, &f.k.k2h, &f.o.off2, &f.m.mask2),
                    ] {
                        let mut patch = vec![0.0; n * n];
                        for r in 0..n {
                            for q in 0..n {
                                let j = r * n + q;
                                let dy = off.at(b, j, y, x);
                                let dx = off.at(b, n * n + j, y, x);
                                let sy = y as f64 + r as f64 - half + dy;
                                let sx = x as f64 + q as f64 - half + dx;
                                patch[j] = bilinear_oracle(img, b, c, sx, sy);
                            }
                        }
                        for r in 0..n {
                            for q in 0..n {
                                let j = r * n + q;
                                let kk = kv.at(b, r, y, x) * kh.at(b, q, y, x);
                                acc += kk * mask.at(b, j, y, x) * patch[j];
                            }
                        }
                    }
                    out.set(b, c, y, x, acc);
                }
            }
        }
    }
    out
}

#[test]
fn edsc_matches_patch_oracle_over_fifty_seeds() {
    for seed in 0..50u64 {
        let mut r = rng(100 + seed);
        let b = r.gen_range(1..=2);
        let h = r.gen_range(1..=8);
        let w = r.gen_range(1..=8);
        let n = [1, 3, 5][r.gen_range(0..3)];
        let s = Shape::new(b, 3, h, w);
        let i1 = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let i2 = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let f = random_fields(&mut r, s, n, 3.0);
        let got = edsc_forward(&i1, &i2, &f.k, &f.o, &f.m, &f.b).unwrap();
        let want = patch_oracle(&i1, &i2, &f, n);
        assert!(got.max_abs_diff(&want) <= 1e-10, "seed {} diff {}", seed, got.max_abs_diff(&want));
    }
}

#[test]
fn edsc_reduces_to_sepconv() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let s = Shape::new(2, 3, 7, 6);
        let n = [1, 3, 5][seed as usize % 3];
        let i1 = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let i2 = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let f = random_fields(&mut r, s, n, 1.0);
        let got = edsc_forward(&i1, &i2, &f.k, &OffsetField::zeros(s, n), &MaskField::ones(s, n), &BiasField::zeros(s)).unwrap();
        let want = sepconv_reference(&i1, &i2, &f.k).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn edsc_reduces_to_flow_mode_and_warp() {
    for seed in 0..10 {
        let mut r = rng(300 + seed);
        let s = Shape::new(2, 3, 6, 7);
        let i1 = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let i2 = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let k1 = Tensor::uniform(s.with_channels(1), -1.0, 1.0, &mut r);
        let k2 = Tensor::uniform(s.with_channels(1), -1.0, 1.0, &mut r);
        let f1 = FlowField::new(Tensor::uniform(s.with_channels(2), -4.0, 4.0, &mut r)).unwrap();
        let f2 = FlowField::new(Tensor::uniform(s.with_channels(2), -4.0, 4.0, &mut r)).unwrap();
        let k = SepKernelField {
            k1v: k1.clone(),
            k1h: Tensor::full(s.with_channels(1), 1.0),
            k2v: k2.clone(),
            k2h: Tensor::full(s.with_channels(1), 1.0),
        };
        let o = OffsetField::from_flows(&f1, &f2);
        let got = edsc_forward(&i1, &i2, &k, &o, &MaskField::ones(s, 1), &BiasField::zeros(s)).unwrap();
        let fm = flow_mode(&i1, &i2, &k1, &k2, &f1, &f2).unwrap();
        assert!(got.max_abs_diff(&fm) <= 1e-12);
        // k1 = 1, k2 = 0 isolates the warp of frame 1
        let one = Tensor::full(s.with_channels(1), 1.0);
        let zero = Tensor::zeros(s.with_channels(1));
        let warped = flow_mode(&i1, &i2, &one, &zero, &f1, &f2).unwrap();
        assert!(warped.max_abs_diff(&flow_warp(&i1, &f1).unwrap()) <= 1e-12);
    }
}

#[test]
fn flow_warp_equals_flow_as_conv_on_hundred_flows() {
    let mut r = rng(4);
    for case in 0..100 {
        let s = Shape::new(1, 3, r.gen_range(1..=9), r.gen_range(1..=9));
        let img = Tensor::uniform(s, 0.0, 1.0, &mut r);
        let mut flow = Tensor::uniform(s.with_channels(2), -6.0, 6.0, &mut r);
        if case % 10 == 0 {
            flow = flow.map(|v: f64| v.round());
        }
        let flow = FlowField::new(flow).unwrap();
        let a = flow_warp(&img, &flow).unwrap();
        let b = flow_as_conv(&img, &flow).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12, "case {}", case);
        for y in 0..s.height {
            for x in 0..s.width {
                let (u, v) = flow.uv(0, y, x);
                let want = bilinear_oracle(&img, 0, 1, x as f64 + u, y as f64 + v);
                assert!((a.at(0, 1, y, x) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn bias_enters_linearly() {
    let mut r = rng(5);
    let s = Shape::new(1, 3, 5, 5);
    let i1 = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let i2 = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let f = random_fields(&mut r, s, 3, 2.0);
    let base = edsc_forward(&i1, &i2, &f.k, &f.o, &f.m, &f.b).unwrap();
    let c = 0.125;
    let shifted = BiasField { bias: f.b.bias.map(|v| v + c) };
    let moved = edsc_forward(&i1, &i2, &f.k, &f.o, &f.m, &shifted).unwrap();
    for (a, b) in moved.data().iter().zip(base.data()) {
        assert!((a - b - c).abs() <= 1e-15);
    }
}

#[test]
fn colour_permutation_commutes() {
    let mut r = rng(6);
    let s = Shape::new(2, 3, 6, 5);
    let i1 = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let i2 = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let f = random_fields(&mut r, s, 3, 2.0);
    let perm = [2usize, 0, 1];
    let p = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |[b, c, y, x]| t.at(b, perm[c], y, x));
    let out = edsc_forward(&i1, &i2, &f.k, &f.o, &f.m, &f.b).unwrap();
    let pb = BiasField { bias: p(&f.b.bias) };
    let pout = edsc_forward(&p(&i1), &p(&i2), &f.k, &f.o, &f.m, &pb).unwrap();
    assert!(pout.max_abs_diff(&p(&out)) <= 1e-15);
}

#[test]
fn delta_and_box_kernels() {
    let mut r = rng(7);
    let s = Shape::new(1, 3, 6, 6);
    let i1 = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let i2 = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let delta = [0.0, 1.0, 0.0];
    let zero = [0.0; 3];
    let k = SepKernelField::uniform(s, &delta, &delta, &zero, &zero);
    assert!(sepconv_reference(&i1, &i2, &k).unwrap().max_abs_diff(&i1) == 0.0);
    // 1/n^2 split evenly: each 1D kernel carries sqrt(1/(2 n^2))
    let v = (1.0 / 18.0f64).sqrt();
    let k = SepKernelField::uniform(s, &[v; 3], &[v; 3], &[v; 3], &[v; 3]);
    let got = sepconv_reference(&i1, &i2, &k).unwrap();
    let clamp = |a: isize| a.clamp(0, 5) as usize;
    for c in 0..3 {
        for y in 0..6 {
            for x in 0..6 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (py, px) = (clamp(y as isize + dy), clamp(x as isize + dx));
                        acc += (i1.at(0, c, py, px) + i2.at(0, c, py, px)) / 18.0;
                    }
                }
                assert!((got.at(0, c, y, x) - acc).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn hetconv_layer_cost_is_one_third_at_four_parts() {
    use edsc::model::{LayerKind, LayerSpec};
    for (cin, cout) in [(16, 16), (32, 64), (128, 128), (64, 32)] {
        let het = LayerSpec { name: "a".into(), kind: LayerKind::Het { cin, cout, p: 4 }, scale: 1 };
        let std = LayerSpec { name: "b".into(), kind: LayerKind::Conv { cin, cout, k: 3 }, scale: 1 };
        assert_eq!(3 * het.weight_count(), std.weight_count());
        assert_eq!(3 * het.macs_per_pixel(), std.macs_per_pixel());
        // closed form: cin * (9/P + 1 - 1/P) per filter
        for p in [1usize, 2, 4, 8, 16] {
            let h = LayerSpec { name: "c".into(), kind: LayerKind::Het { cin, cout, p }, scale: 1 };
            let per_filter = cin as f64 * (9.0 / p as f64 + 1.0 - 1.0 / p as f64);
            assert_eq!(h.weight_count() as f64, cout as f64 * per_filter);
        }
    }
}

#[test]
fn model_shrinks_as_part_grows() {
    use edsc::model::{build_model, count_macs, count_params, ModelConfig};
    for base in [ModelConfig::default(), ModelConfig::full_scale()] {
        let mut last = usize::MAX;
        let mut last_macs = u64::MAX;
        for p in [1, 2, 4, 8, 16, 32] {
            let cfg = ModelConfig { hetconv_p: p, ..base.clone() };
            let n = count_params(&build_model::<f32>(&cfg, 0).unwrap());
            let macs = count_macs(&cfg, 128, 128);
            assert!(n < last, "P={} params {} not below {}", p, n, last);
            assert!(macs < last_macs);
            last = n;
            last_macs = macs;
        }
    }
}

#[test]
fn time_plane_costs_under_a_thousandth_at_full_scale() {
    use edsc::model::{build_model, count_params, ModelConfig};
    let s = ModelConfig { multi_time: false, ..ModelConfig::full_scale() };
    let m = ModelConfig { multi_time: true, ..ModelConfig::full_scale() };
    let ns = count_params(&build_model::<f32>(&s, 0).unwrap());
    let nm = count_params(&build_model::<f32>(&m, 0).unwrap());
    assert!(nm > ns);
    assert!(((nm - ns) as f64) / (ns as f64) < 1e-3);
}
