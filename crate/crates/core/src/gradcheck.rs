//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EdscNodes, Graph, HetPlan, NodeId};
use crate::error::{Error, Result};
use crate::model::{build_model, forward_graph, ModelConfig, TimeStep};
use crate::sampling::flow_warp_node;
use crate::tensor::{Shape, Tensor};
use crate::training::FeatureExtractor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Step of the central difference.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative errors divide by `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Elements checked per input; larger inputs are subsampled.
    pub max_per_input: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_per_input: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements skipped as kinks; more than a tenth of `checked` fails.
    pub kinks: usize,
    pub passed: bool,
    pub worst: Option<Mismatch>,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh graph with every input registered as a parameter and
/// returns the output node. Non-scalar outputs are reduced with a fixed random
/// projection. The function is evaluated twice at the unperturbed inputs and
/// must produce identical values. A mismatching element whose one-sided
/// slopes disagree, and whose analytic value matches one of them, sits on a
/// kink (ReLU, bilinear cell edge); it is counted in `kinks` rather than
/// compared.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |xs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let ids = xs
            .iter()
            .map(|x| g.param(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut out = f(&mut g, &ids)?;
        if g.value(out).numel() != 1 {
            let s = g.shape(out);
            let w = projection
                .get_or_insert_with(|| Tensor::uniform(s, -1.0, 1.0, &mut rng))
                .clone();
            out = g.dot(out, w)?;
        }
        let value = g.value(out).data()[0];
        let grads = if want_grads {
            let gr = g.backward(out)?;
            ids.iter()
                .zip(xs)
                .map(|(&id, x)| gr.get(id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (base, analytic) = eval(inputs, true)?;
    let (again, _) = eval(inputs, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Numerical(format!(
            "op graph is not deterministic: {} then {}",
            base, again
        )));
    }

    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
        passed: true,
        worst: None,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        let n = xs[i].numel();
        let elements: Vec<usize> = if n <= opts.max_per_input {
            (0..n).collect()
        } else {
            let mut v = sample(&mut pick, n, opts.max_per_input).into_vec();
            v.sort_unstable();
            v
        };
        for e in elements {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + opts.h;
            let (plus, _) = eval(&xs, false)?;
            xs[i].data_mut()[e] = orig - opts.h;
            let (minus, _) = eval(&xs, false)?;
            xs[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > opts.tol {
                let (right, left) = ((plus - base) / opts.h, (base - minus) / opts.h);
                let scale = right.abs().max(left.abs()).max(opts.floor);
                let near = |side: f64| (a - side).abs() <= opts.tol.sqrt() * scale;
                if (right - left).abs() > opts.tol * scale && (near(right) || near(left)) {
                    report.kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(Mismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tol && report.kinks * 10 <= report.checked;
    Ok(report)
}

/// Result of one entry of [`op_suite`].
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub shape: Shape,
    pub tol: f64,
    pub report: GradcheckReport,
}

/// Input shapes cycled through by [`op_suite`] seeds.
pub const SUITE_SHAPES: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 6, 4], [1, 4, 6, 8]];

/// Uniform values whose fractional parts lie in `[0.2, 0.8)`.
fn off_lattice(rng: &mut ChaCha8Rng, s: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_| rng.gen_range(lo..hi).floor() + rng.gen_range(0.2..0.8))
}

/// Checks every differentiable op on random inputs drawn from `seed`.
///
/// The input shape is `SUITE_SHAPES[seed % 3]` (channels adjusted where an op
/// needs a particular count). Offsets are kept away from integer lattice
/// points, where bilinear sampling has kinks.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [b, c, h, w] = SUITE_SHAPES[(seed % 3) as usize];
    let shape = Shape::new(b, c, h, w);
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let mut out = Vec::new();
    let mut run = |op: &'static str,
                   shape: Shape,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>|
     -> Result<()> {
        let report = gradcheck(f, &inputs, opts)?;
        out.push(OpCheck {
            op,
            shape,
            tol: opts.tol,
            report,
        });
        Ok(())
    };

    let x = Tensor::<f64>::uniform([b, c, h, w], -1.0, 1.0, &mut rng);
    let wt = Tensor::<f64>::uniform([3, c, 3, 3], -0.5, 0.5, &mut rng);
    let bias = Tensor::<f64>::uniform([1, 1, 1, 3], -0.5, 0.5, &mut rng);
    run("conv2d", shape, vec![x.clone(), wt.clone(), bias.clone()], &|g, i| {
        g.conv2d(i[0], i[1], i[2], 1, 1)
    })?;
    run("conv2d_stride2", shape, vec![x.clone(), wt, bias.clone()], &|g, i| {
        g.conv2d(i[0], i[1], i[2], 2, 1)
    })?;

    let plan = Arc::new(HetPlan::new(c, 3, 2.min(c))?);
    let (s3, s1) = plan.weight_shapes();
    let w3 = Tensor::<f64>::uniform(s3.dims(), -0.5, 0.5, &mut rng);
    let w1 = Tensor::<f64>::uniform(s1.dims(), -0.5, 0.5, &mut rng);
    let p2 = plan.clone();
    run("hetconv2d", shape, vec![x.clone(), w3, w1, bias], &move |g, i| {
        g.hetconv2d(i[0], i[1], i[2], i[3], p2.clone())
    })?;

    run("relu", shape, vec![x.clone()], &|g, i| g.relu(i[0]))?;
    run("sigmoid", shape, vec![x.clone()], &|g, i| g.sigmoid(i[0]))?;
    run("avg_pool2x2", shape, vec![x.clone()], &|g, i| g.avg_pool2x2(i[0]))?;
    run("upsample_bilinear2x", shape, vec![x.clone()], &|g, i| {
        g.upsample_bilinear2x(i[0])
    })?;
    run("upsample_after_pool", shape, vec![x.clone()], &|g, i| {
        let p = g.avg_pool2x2(i[0])?;
        g.upsample_bilinear2x(p)
    })?;
    let y = Tensor::<f64>::uniform([b, 2, h, w], -1.0, 1.0, &mut rng);
    run("concat_channels", shape, vec![x.clone(), y], &|g, i| {
        g.concat_channels(i[0], i[1])
    })?;
    let z = Tensor::<f64>::uniform([b, c, h, w], -1.0, 1.0, &mut rng);
    run("add_sub_scale", shape, vec![x.clone(), z.clone()], &|g, i| {
        let s = g.add(i[0], i[1])?;
        let d = g.sub(s, i[1])?;
        let d = g.scale(d, 0.7)?;
        g.add(d, s)
    })?;

    let img = Tensor::<f64>::uniform([b, 3, h, w], 0.0, 1.0, &mut rng);
    let flow = off_lattice(&mut rng, [b, 2, h, w], -2.5, 2.5);
    run("bilinear_sample", shape.with_channels(3), vec![img, flow], &|g, i| {
        flow_warp_node(g, i[0], i[1])
    })?;

    let n = 3;
    let fr = Shape::new(b, 3, h, w);
    let edsc_inputs = vec![
        Tensor::<f64>::uniform(fr.dims(), 0.0, 1.0, &mut rng),
        Tensor::<f64>::uniform(fr.dims(), 0.0, 1.0, &mut rng),
        Tensor::<f64>::uniform([b, n, h, w], -1.0, 1.0, &mut rng),
        Tensor::<f64>::uniform([b, n, h, w], -1.0, 1.0, &mut rng),
        Tensor::<f64>::uniform([b, n, h, w], -1.0, 1.0, &mut rng),
        Tensor::<f64>::uniform([b, n, h, w], -1.0, 1.0, &mut rng),
        off_lattice(&mut rng, [b, 2 * n * n, h, w], -1.5, 1.5),
        off_lattice(&mut rng, [b, 2 * n * n, h, w], -1.5, 1.5),
        Tensor::<f64>::uniform([b, n * n, h, w], 0.1, 0.9, &mut rng),
        Tensor::<f64>::uniform([b, n * n, h, w], 0.1, 0.9, &mut rng),
        Tensor::<f64>::uniform(fr.dims(), -0.2, 0.2, &mut rng),
    ];
    run("edsc_forward", fr, edsc_inputs, &|g, i| {
        g.edsc(EdscNodes {
            frame1: i[0],
            frame2: i[1],
            k1v: i[2],
            k1h: i[3],
            k2v: i[4],
            k2h: i[5],
            offset1: i[6],
            offset2: i[7],
            mask1: i[8],
            mask2: i[9],
            bias: i[10],
        })
    })?;

    let gt = Tensor::<f64>::uniform(fr.dims(), 0.0, 1.0, &mut rng);
    let pred = Tensor::<f64>::uniform(fr.dims(), 0.0, 1.0, &mut rng);
    let gt2 = gt.clone();
    run("charbonnier", fr, vec![pred.clone()], &move |g, i| {
        let t = g.input(gt2.clone())?;
        g.charbonnier(i[0], t, 1e-6)
    })?;
    let gt2 = gt.clone();
    run("mse", fr, vec![pred], &move |g, i| {
        let t = g.input(gt2.clone())?;
        g.mse(i[0], t)
    })?;
    let big = Shape::new(1, 3, 16, 16);
    let fx = FeatureExtractor::<f64>::new(seed);
    let gt16 = Tensor::<f64>::uniform(big.dims(), 0.0, 1.0, &mut rng);
    run("feature_loss", big, vec![Tensor::<f64>::uniform(big.dims(), 0.0, 1.0, &mut rng)], &move |g, i| {
        let t = g.input(gt16.clone())?;
        fx.loss_node(g, i[0], t)
    })?;
    Ok(out)
}

/// Tolerance of the end-to-end check, looser than per-op checks because of
/// depth.
pub const END_TO_END_TOL: f64 = 1e-3;

/// Charbonnier loss of a small network on 8x8 frames, checked with respect
/// to both frames and a subsample of every parameter tensor.
pub fn end_to_end(seed: u64, multi_time: bool) -> Result<OpCheck> {
    let cfg = ModelConfig {
        kernel_size: 3,
        hetconv_p: 2,
        widths: vec![4, 6, 8],
        block_depth: 1,
        estimator_widths: [4, 4, 4],
        multi_time,
        ..ModelConfig::default()
    };
    let params = build_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let s = Shape::new(1, 3, 8, 8);
    // perturb the zero-initialised offset layers so sampling is non-trivial,
    // and the zero biases so no pre-activation sits exactly on a ReLU kink
    let params = params.map_tensors(|name, t| {
        if name.starts_with("est.off") {
            Tensor::uniform(t.shape(), -0.3, 0.3, &mut rng)
        } else if name.ends_with(".b") {
            Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng)
        } else {
            t.clone()
        }
    });
    let mut inputs = vec![
        Tensor::uniform(s, 0.0, 1.0, &mut rng),
        Tensor::uniform(s, 0.0, 1.0, &mut rng),
    ];
    let target = Tensor::uniform(s, 0.0, 1.0, &mut rng);
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let t = multi_time.then(|| TimeStep::new(0.3)).transpose()?;
    let opts = GradcheckOptions {
        seed,
        tol: END_TO_END_TOL,
        max_per_input: 6,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(
        |g, ids| {
            let p = params.bind(&ids[2..])?;
            let out = forward_graph(g, &cfg, &p, ids[0], ids[1], t)?;
            let gt = g.input(target.clone())?;
            g.charbonnier(out.output, gt, 1e-6)
        },
        &inputs,
        opts,
    )?;
    Ok(OpCheck {
        op: if multi_time { "end_to_end_multi_time" } else { "end_to_end" },
        shape: s,
        tol: END_TO_END_TOL,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn times_three(g: &mut Graph<f64>, ids: &[NodeId], slope: f64) -> Result<NodeId> {
        let x = ids[0];
        let v = g.value(x).map(|v| 3.0 * v);
        g.custom(
            &[x],
            v,
            Arc::new(move |_, _, dout| vec![dout.map(|d| d * slope)]),
        )
    }

    #[test]
    fn linear_op_passes() {
        let x = Tensor::new([1, 1, 1, 4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let r = gradcheck(|g, ids| times_three(g, ids, 3.0), &[x], GradcheckOptions::default()).unwrap();
        assert!(r.passed, "{:?}", r);
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::new([1, 1, 1, 4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let r = gradcheck(|g, ids| times_three(g, ids, 2.9), &[x], GradcheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_err > 0.01);
    }

    #[test]
    fn nondeterministic_graph_is_an_error() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::full([1, 1, 1, 1], 1.0);
        let r = gradcheck(
            |g, ids| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                g.scale(ids[0], 1.0 + k)
            },
            &[x],
            GradcheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn suite_passes_on_one_seed() {
        for c in op_suite(1).unwrap() {
            assert!(c.report.passed, "{} {:?}", c.op, c.report.worst);
        }
    }
}
