//! Deformable separable synthesis.
//!
//! Every output pixel convolves a resampled patch from each input frame with its
//! own separable kernel. Tap `j` of an `n x n` patch sits at the regular grid
//! position `p_j` plus a learned fractional offset, is read bilinearly, scaled
//! by a modulation mask, and weighted by `k_v[row] * k_h[col]`. A per-pixel
//! RGB residual is added at the end.
//!
//! Kernels, offsets and masks are shared across colour channels; the bias is
//! per channel. Offsets are stored as `n^2` vertical components followed by
//! `n^2` horizontal components, taps in row-major order over the grid.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampling::{flow_warp, BilinearWeights, FlowField};
use crate::tensor::{Shape, Tensor};

/// Per-pixel 1D kernels for both frames, each `[B, n, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SepKernelField<T> {
    pub k1v: Tensor<T>,
    pub k1h: Tensor<T>,
    pub k2v: Tensor<T>,
    pub k2h: Tensor<T>,
}

/// Per-pixel, per-tap `(dy, dx)` displacements, each `[B, 2 n^2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T> {
    pub off1: Tensor<T>,
    pub off2: Tensor<T>,
}

/// Per-tap modulation, each `[B, n^2, H, W]` with values in `(0, 1)` when
/// produced by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskField<T> {
    pub mask1: Tensor<T>,
    pub mask2: Tensor<T>,
}

/// Per-pixel residual `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField<T> {
    pub bias: Tensor<T>,
}

impl<T: Real> SepKernelField<T> {
    pub fn kernel_size(&self) -> usize {
        self.k1v.shape().channels
    }

    /// The same kernel pair for every pixel of both frames.
    pub fn uniform(shape: Shape, kv1: &[T], kh1: &[T], kv2: &[T], kh2: &[T]) -> Self {
        let n = kv1.len();
        let make = |k: &[T]| Tensor::from_fn(shape.with_channels(n), |[_, c, _, _]| k[c]);
        SepKernelField {
            k1v: make(kv1),
            k1h: make(kh1),
            k2v: make(kv2),
            k2h: make(kh2),
        }
    }
}

impl<T: Real> OffsetField<T> {
    pub fn zeros(shape: Shape, n: usize) -> Self {
        let s = shape.with_channels(2 * n * n);
        OffsetField {
            off1: Tensor::zeros(s),
            off2: Tensor::zeros(s),
        }
    }

    /// Offsets for the `n = 1` case taken from two flow fields.
    pub fn from_flows(flow1: &FlowField<T>, flow2: &FlowField<T>) -> Self {
        let swap = |f: &FlowField<T>| {
            let t = f.tensor();
            Tensor::from_fn(t.shape(), |[b, c, y, x]| t.at(b, 1 - c, y, x))
        };
        OffsetField {
            off1: swap(flow1),
            off2: swap(flow2),
        }
    }
}

impl<T: Real> MaskField<T> {
    pub fn ones(shape: Shape, n: usize) -> Self {
        let s = shape.with_channels(n * n);
        MaskField {
            mask1: Tensor::full(s, T::one()),
            mask2: Tensor::full(s, T::one()),
        }
    }
}

impl<T: Real> BiasField<T> {
    pub fn zeros(shape: Shape) -> Self {
        BiasField {
            bias: Tensor::zeros(shape),
        }
    }
}

/// `(dy, dx)` of every tap of the regular `n x n` grid, row-major.
pub fn regular_grid(n: usize) -> Vec<(isize, isize)> {
    let half = (n / 2) as isize;
    (0..n as isize)
        .flat_map(|r| (0..n as isize).map(move |c| (r - half, c - half)))
        .collect()
}

/// Borrowed operands of the synthesis kernel.
#[derive(Clone, Copy)]
pub(crate) struct EdscInputs<'a, T> {
    pub i1: &'a Tensor<T>,
    pub i2: &'a Tensor<T>,
    pub k1v: &'a Tensor<T>,
    pub k1h: &'a Tensor<T>,
    pub k2v: &'a Tensor<T>,
    pub k2h: &'a Tensor<T>,
    pub off1: &'a Tensor<T>,
    pub off2: &'a Tensor<T>,
    pub mask1: &'a Tensor<T>,
    pub mask2: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<'a, T: Real> EdscInputs<'a, T> {
    pub fn from_fields(
        i1: &'a Tensor<T>,
        i2: &'a Tensor<T>,
        k: &'a SepKernelField<T>,
        o: &'a OffsetField<T>,
        m: &'a MaskField<T>,
        b: &'a BiasField<T>,
    ) -> Self {
        EdscInputs {
            i1,
            i2,
            k1v: &k.k1v,
            k1h: &k.k1h,
            k2v: &k.k2v,
            k2h: &k.k2h,
            off1: &o.off1,
            off2: &o.off2,
            mask1: &m.mask1,
            mask2: &m.mask2,
            bias: &b.bias,
        }
    }

    fn named(&self) -> [(&'static str, &'a Tensor<T>); 11] {
        [
            ("frame1", self.i1),
            ("frame2", self.i2),
            ("k1v", self.k1v),
            ("k1h", self.k1h),
            ("k2v", self.k2v),
            ("k2h", self.k2h),
            ("offset1", self.off1),
            ("offset2", self.off2),
            ("mask1", self.mask1),
            ("mask2", self.mask2),
            ("bias", self.bias),
        ]
    }

    /// Validates shapes and returns the kernel size `n`.
    pub fn validate(&self) -> Result<usize> {
        let s = self.i1.shape();
        let n = self.k1v.shape().channels;
        if n == 0 || n % 2 == 0 {
            return Err(Error::shape("edsc", format!("kernel size {} must be odd", n)));
        }
        let expect = |name: &str, t: &Tensor<T>, ch: usize| -> Result<()> {
            let ts = t.shape();
            if ts != s.with_channels(ch) {
                return Err(Error::shape(
                    "edsc",
                    format!("{} has shape {}, expected {}", name, ts, s.with_channels(ch)),
                ));
            }
            Ok(())
        };
        expect("frame2", self.i2, s.channels)?;
        expect("k1h", self.k1h, n)?;
        expect("k2v", self.k2v, n)?;
        expect("k2h", self.k2h, n)?;
        expect("offset1", self.off1, 2 * n * n)?;
        expect("offset2", self.off2, 2 * n * n)?;
        expect("mask1", self.mask1, n * n)?;
        expect("mask2", self.mask2, n * n)?;
        expect("bias", self.bias, s.channels)?;
        if s.plane() == 0 {
            return Err(Error::shape("edsc", "empty frames"));
        }
        for (name, t) in self.named() {
            t.ensure_finite(name)?;
        }
        Ok(n)
    }
}

/// One frame's share of a pixel: kernels, offsets and masks for that frame.
struct Branch<'a, T> {
    frame: &'a Tensor<T>,
    kv: &'a Tensor<T>,
    kh: &'a Tensor<T>,
    off: &'a Tensor<T>,
    mask: &'a Tensor<T>,
}

#[inline]
fn tap_weights<'a, T: Real>(
    br: &'a Branch<'a, T>,
    n: usize,
    b: usize,
    y: usize,
    x: usize,
    grid: &'a [(isize, isize)],
) -> impl Iterator<Item = (usize, usize, usize, T, T, T, BilinearWeights<T>)> + 'a {
    let s = br.frame.shape();
    let nn = n * n;
    grid.iter().enumerate().map(move |(j, &(gy, gx))| {
        let (r, c) = (j / n, j % n);
        let kv = br.kv.at(b, r, y, x);
        let kh = br.kh.at(b, c, y, x);
        let m = br.mask.at(b, j, y, x);
        let sy = T::lit((y as isize + gy) as f64) + br.off.at(b, j, y, x);
        let sx = T::lit((x as isize + gx) as f64) + br.off.at(b, nn + j, y, x);
        (j, r, c, kv, kh, m, BilinearWeights::at(sx, sy, s.width, s.height))
    })
}

pub(crate) fn edsc_forward_raw<T: Real>(inp: &EdscInputs<'_, T>, n: usize) -> Tensor<T> {
    use rayon::prelude::*;

    let s = inp.i1.shape();
    let grid = regular_grid(n);
    let branches = [
        Branch {
            frame: inp.i1,
            kv: inp.k1v,
            kh: inp.k1h,
            off: inp.off1,
            mask: inp.mask1,
        },
        Branch {
            frame: inp.i2,
            kv: inp.k2v,
            kh: inp.k2h,
            off: inp.off2,
            mask: inp.mask2,
        },
    ];
    let mut out = inp.bias.clone();
    let item = s.channels * s.plane();
    out.data_mut()
        .par_chunks_mut(item)
        .enumerate()
        .for_each(|(b, dst)| {
            for y in 0..s.height {
                for x in 0..s.width {
                    for br in &branches {
                        for (_, _, _, kv, kh, m, bw) in tap_weights(br, n, b, y, x, &grid) {
                            let w = kv * kh * m;
                            for ch in 0..s.channels {
                                let plane = &br.frame.data()[(b * s.channels + ch) * s.plane()..][..s.plane()];
                                dst[ch * s.plane() + y * s.width + x] += w * bw.sample(plane);
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradients of the synthesis with respect to each operand, in the order of
/// [`EdscInputs`]. Frame gradients are only produced when requested.
pub(crate) struct EdscGrads<T> {
    pub i1: Option<Tensor<T>>,
    pub i2: Option<Tensor<T>>,
    pub k1v: Tensor<T>,
    pub k1h: Tensor<T>,
    pub k2v: Tensor<T>,
    pub k2h: Tensor<T>,
    pub off1: Tensor<T>,
    pub off2: Tensor<T>,
    pub mask1: Tensor<T>,
    pub mask2: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn edsc_backward_raw<T: Real>(
    inp: &EdscInputs<'_, T>,
    n: usize,
    dout: &Tensor<T>,
    need_frames: [bool; 2],
) -> EdscGrads<T> {
    let s = inp.i1.shape();
    let grid = regular_grid(n);
    let nn = n * n;
    let plane = s.plane();
    let branches = [
        Branch {
            frame: inp.i1,
            kv: inp.k1v,
            kh: inp.k1h,
            off: inp.off1,
            mask: inp.mask1,
        },
        Branch {
            frame: inp.i2,
            kv: inp.k2v,
            kh: inp.k2h,
            off: inp.off2,
            mask: inp.mask2,
        },
    ];
    let mut dk = [
        [Tensor::zeros(s.with_channels(n)), Tensor::zeros(s.with_channels(n))],
        [Tensor::zeros(s.with_channels(n)), Tensor::zeros(s.with_channels(n))],
    ];
    let mut doff = [
        Tensor::zeros(s.with_channels(2 * nn)),
        Tensor::zeros(s.with_channels(2 * nn)),
    ];
    let mut dmask = [Tensor::zeros(s.with_channels(nn)), Tensor::zeros(s.with_channels(nn))];
    let mut dframe: [Option<Tensor<T>>; 2] = need_frames.map(|f| f.then(|| Tensor::zeros(s)));
    let mut g = vec![T::zero(); s.channels];

    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                for (ch, gc) in g.iter_mut().enumerate() {
                    *gc = dout.at(b, ch, y, x);
                }
                for (f, br) in branches.iter().enumerate() {
                    for (j, r, c, kv, kh, m, bw) in tap_weights(br, n, b, y, x, &grid) {
                        let w = kv * kh * m;
                        // d out / d sample, summed over channels
                        let mut ds = T::zero();
                        let (mut ddx, mut ddy) = (T::zero(), T::zero());
                        for ch in 0..s.channels {
                            let base = (b * s.channels + ch) * plane;
                            let src = &br.frame.data()[base..base + plane];
                            ds += g[ch] * bw.sample(src);
                            let (gx, gy) = bw.coord_grad(src);
                            ddx += g[ch] * gx;
                            ddy += g[ch] * gy;
                            if let Some(df) = dframe[f].as_mut() {
                                let gw = g[ch] * w;
                                let dst = &mut df.data_mut()[base..base + plane];
                                for k in 0..4 {
                                    dst[bw.index[k]] += gw * bw.weight[k];
                                }
                            }
                        }
                        let iv = dk[f][0].index(b, r, y, x);
                        dk[f][0].data_mut()[iv] += ds * kh * m;
                        let ih = dk[f][1].index(b, c, y, x);
                        dk[f][1].data_mut()[ih] += ds * kv * m;
                        dmask[f].set(b, j, y, x, ds * kv * kh);
                        doff[f].set(b, j, y, x, ddy * w);
                        doff[f].set(b, nn + j, y, x, ddx * w);
                    }
                }
            }
        }
    }
    let [[k1v, k1h], [k2v, k2h]] = dk;
    let [off1, off2] = doff;
    let [mask1, mask2] = dmask;
    let [i1, i2] = dframe;
    EdscGrads {
        i1,
        i2,
        k1v,
        k1h,
        k2v,
        k2h,
        off1,
        off2,
        mask1,
        mask2,
        bias: dout.clone(),
    }
}

/// Synthesises the intermediate frame from two frames and per-pixel fields.
///
/// `i1`/`i2` are `[B, C, H, W]`; every field must share `B`, `H`, `W` and the
/// kernel size `n`.
pub fn edsc_forward<T: Real>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    k: &SepKernelField<T>,
    o: &OffsetField<T>,
    m: &MaskField<T>,
    b: &BiasField<T>,
) -> Result<Tensor<T>> {
    let inp = EdscInputs::from_fields(i1, i2, k, o, m, b);
    let n = inp.validate()?;
    Ok(edsc_forward_raw(&inp, n))
}

/// Plain local separable adaptive convolution: integer taps on the regular
/// grid only, replicate border, no offsets, masks or residual.
pub fn sepconv_reference<T: Real>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    k: &SepKernelField<T>,
) -> Result<Tensor<T>> {
    let s = i1.shape();
    let n = k.kernel_size();
    if i2.shape() != s {
        return Err(Error::shape("sepconv", format!("{} vs {}", s, i2.shape())));
    }
    if n == 0 || n % 2 == 0 {
        return Err(Error::shape("sepconv", format!("kernel size {} must be odd", n)));
    }
    for t in [&k.k1v, &k.k1h, &k.k2v, &k.k2h] {
        if t.shape() != s.with_channels(n) {
            return Err(Error::shape(
                "sepconv",
                format!("kernel {} vs frames {}", t.shape(), s),
            ));
        }
    }
    let half = (n / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for ch in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut acc = T::zero();
                    for (frame, kv, kh) in [(i1, &k.k1v, &k.k1h), (i2, &k.k2v, &k.k2h)] {
                        for r in 0..n {
                            let py = clamp(y as isize + r as isize - half, s.height);
                            let mut row = T::zero();
                            for c in 0..n {
                                let px = clamp(x as isize + c as isize - half, s.width);
                                row += kh.at(b, c, y, x) * frame.at(b, ch, py, px);
                            }
                            acc += kv.at(b, r, y, x) * row;
                        }
                    }
                    out.set(b, ch, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Flow-based synthesis: `k1 * warp(I1, flow1) + k2 * warp(I2, flow2)` with
/// per-pixel scalar weights `[B, 1, H, W]`.
pub fn flow_mode<T: Real>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    k1: &Tensor<T>,
    k2: &Tensor<T>,
    flow1: &FlowField<T>,
    flow2: &FlowField<T>,
) -> Result<Tensor<T>> {
    let s = i1.shape();
    for k in [k1, k2] {
        if k.shape() != s.with_channels(1) {
            return Err(Error::shape(
                "flow_mode",
                format!("weights {} vs frames {}", k.shape(), s),
            ));
        }
    }
    let w1 = flow_warp(i1, flow1)?;
    let w2 = flow_warp(i2, flow2)?;
    Ok(Tensor::from_fn(s, |[b, c, y, x]| {
        k1.at(b, 0, y, x) * w1.at(b, c, y, x) + k2.at(b, 0, y, x) * w2.at(b, c, y, x)
    }))
}

/// Rescales offsets learned for the midpoint to time `t`: frame-1 offsets by
/// `t / 0.5`, frame-2 offsets by `(1 - t) / 0.5`. Kernels and masks stay tied
/// to the midpoint, which is what makes this a poor substitute for a
/// time-conditioned model.
pub fn naive_time_rescale<T: Real>(o: &OffsetField<T>, t: f64) -> Result<OffsetField<T>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("time step {} outside (0, 1)", t)));
    }
    let s1 = T::lit(t / 0.5);
    let s2 = T::lit((1.0 - t) / 0.5);
    Ok(OffsetField {
        off1: o.off1.map(|v| v * s1),
        off2: o.off2.map(|v| v * s2),
    })
}

/// Where one output pixel draws its samples from, per input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMap {
    pub width: usize,
    pub height: usize,
    pub frame1: Vec<f64>,
    pub frame2: Vec<f64>,
}

impl SamplingMap {
    pub fn total_mass(&self) -> f64 {
        self.frame1.iter().chain(&self.frame2).sum()
    }
}

/// Splats `|K[j] * m[j]|` bilinearly at each tap's sampling position for the
/// output pixel `(x, y)` of batch item `batch`.
pub fn effective_sampling_map<T: Real>(
    k: &SepKernelField<T>,
    o: &OffsetField<T>,
    m: &MaskField<T>,
    batch: usize,
    x: usize,
    y: usize,
) -> Result<SamplingMap> {
    let s = k.k1v.shape();
    let n = k.kernel_size();
    if x >= s.width || y >= s.height || batch >= s.batch {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) of item {} outside {}x{} frame",
            x, y, batch, s.width, s.height
        )));
    }
    if o.off1.shape() != s.with_channels(2 * n * n) || m.mask1.shape() != s.with_channels(n * n) {
        return Err(Error::shape("effective_sampling_map", "field shapes disagree"));
    }
    let grid = regular_grid(n);
    let nn = n * n;
    let mut maps = [vec![0.0; s.plane()], vec![0.0; s.plane()]];
    let branches = [
        (&k.k1v, &k.k1h, &o.off1, &m.mask1),
        (&k.k2v, &k.k2h, &o.off2, &m.mask2),
    ];
    for (map, (kv, kh, off, mask)) in maps.iter_mut().zip(branches) {
        for (j, &(gy, gx)) in grid.iter().enumerate() {
            let (r, c) = (j / n, j % n);
            let mass = (kv.at(batch, r, y, x) * kh.at(batch, c, y, x) * mask.at(batch, j, y, x))
                .as_f64()
                .abs();
            let sy = (y as isize + gy) as f64 + off.at(batch, j, y, x).as_f64();
            let sx = (x as isize + gx) as f64 + off.at(batch, nn + j, y, x).as_f64();
            let bw = BilinearWeights::at(sx, sy, s.width, s.height);
            for q in 0..4 {
                map[bw.index[q]] += mass * bw.weight[q];
            }
        }
    }
    let [frame1, frame2] = maps;
    Ok(SamplingMap {
        width: s.width,
        height: s.height,
        frame1,
        frame2,
    })
}
