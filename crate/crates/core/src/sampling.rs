//! Fractional-coordinate bilinear sampling with replicate borders, backward
//! flow warping, and warping rewritten as a 2x2 per-pixel convolution.

use std::sync::Arc;

use crate::autodiff::{CustomBackward, Graph, NodeId};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// A sampling position in pixels; `x` is the column, `y` the row, and the
/// origin is the centre of the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCoord<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> SampleCoord<T> {
    pub fn new(x: T, y: T) -> Self {
        SampleCoord { x, y }
    }
}

/// The four corner taps of a bilinear lookup.
///
/// Corners are ordered `(y0, x0)`, `(y0, x1)`, `(y1, x0)`, `(y1, x1)` with
/// indices already clamped to the image, so out-of-range coordinates read the
/// replicated border.
#[derive(Debug, Clone, Copy)]
pub struct BilinearWeights<T> {
    pub index: [usize; 4],
    pub weight: [T; 4],
    /// Fractional offsets inside the cell, used by coordinate derivatives.
    pub fx: T,
    pub fy: T,
}

impl<T: Real> BilinearWeights<T> {
    /// Caller guarantees finite coordinates and a non-empty image.
    #[inline]
    pub fn at(x: T, y: T, width: usize, height: usize) -> Self {
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let clamp = |v: T, n: usize| -> usize {
            if v <= T::zero() {
                0
            } else {
                let i = v.to_usize().unwrap_or(usize::MAX);
                i.min(n - 1)
            }
        };
        let x0 = clamp(x0f, width);
        let x1 = clamp(x0f + T::one(), width);
        let y0 = clamp(y0f, height);
        let y1 = clamp(y0f + T::one(), height);
        let (gx, gy) = (T::one() - fx, T::one() - fy);
        BilinearWeights {
            index: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weight: [gy * gx, gy * fx, fy * gx, fy * fx],
            fx,
            fy,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let [a, b, c, d] = self.index;
        let [wa, wb, wc, wd] = self.weight;
        wa * plane[a] + wb * plane[b] + wc * plane[c] + wd * plane[d]
    }

    /// Derivatives of the sampled value with respect to `x` and `y`.
    ///
    /// Piecewise linear; at integer coordinates this is the right-sided derivative.
    #[inline]
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let [a, b, c, d] = self.index.map(|i| plane[i]);
        let dx = (T::one() - self.fy) * (b - a) + self.fy * (d - c);
        let dy = (T::one() - self.fx) * (c - a) + self.fx * (d - b);
        (dx, dy)
    }
}

/// Borrowed single-channel image.
#[derive(Debug, Clone, Copy)]
pub struct Plane<'a, T> {
    pub data: &'a [T],
    pub width: usize,
    pub height: usize,
}

impl<'a, T: Real> Plane<'a, T> {
    pub fn new(data: &'a [T], width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(
                "plane",
                format!("{} values for {}x{}", data.len(), width, height),
            ));
        }
        Ok(Plane {
            data,
            width,
            height,
        })
    }

    /// Channel `c` of batch item `b`.
    pub fn of(t: &'a Tensor<T>, b: usize, c: usize) -> Self {
        let s = t.shape();
        let n = s.plane();
        let start = (b * s.channels + c) * n;
        Plane {
            data: &t.data()[start..start + n],
            width: s.width,
            height: s.height,
        }
    }
}

fn check_coord<T: Real>(c: SampleCoord<T>) -> Result<()> {
    if c.x.is_nan() || c.y.is_nan() {
        Err(Error::invalid("NaN sampling coordinate"))
    } else if !c.x.is_finite() || !c.y.is_finite() {
        Err(Error::NonFinite("sampling coordinate".into()))
    } else {
        Ok(())
    }
}

pub fn bilinear_sample<T: Real>(image: Plane<'_, T>, c: SampleCoord<T>) -> Result<T> {
    check_coord(c)?;
    Ok(BilinearWeights::at(c.x, c.y, image.width, image.height).sample(image.data))
}

/// Value plus derivatives `(d/dx, d/dy)` at `c`.
pub fn bilinear_sample_with_grad<T: Real>(
    image: Plane<'_, T>,
    c: SampleCoord<T>,
) -> Result<(T, T, T)> {
    check_coord(c)?;
    let w = BilinearWeights::at(c.x, c.y, image.width, image.height);
    let (dx, dy) = w.coord_grad(image.data);
    Ok((w.sample(image.data), dx, dy))
}

/// Per-pixel displacement field: channel 0 is `u` (columns), channel 1 is `v` (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    tensor: Tensor<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().channels != 2 {
            return Err(Error::shape(
                "flow",
                format!("flow needs 2 channels, got {}", tensor.shape()),
            ));
        }
        tensor.ensure_finite("flow field")?;
        Ok(FlowField { tensor })
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        FlowField {
            tensor: Tensor::zeros([batch, 2, height, width]),
        }
    }

    pub fn constant(batch: usize, height: usize, width: usize, u: T, v: T) -> Self {
        FlowField {
            tensor: Tensor::from_fn([batch, 2, height, width], |[_, c, _, _]| {
                if c == 0 {
                    u
                } else {
                    v
                }
            }),
        }
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    #[inline]
    pub fn uv(&self, b: usize, y: usize, x: usize) -> (T, T) {
        (self.tensor.at(b, 0, y, x), self.tensor.at(b, 1, y, x))
    }
}

fn check_flow<T: Real>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<()> {
    let (si, sf) = (image.shape(), flow.shape());
    if si.batch != sf.batch || si.height != sf.height || si.width != sf.width {
        return Err(Error::shape(
            "flow_warp",
            format!("image {} vs flow {}", si, sf),
        ));
    }
    if si.plane() == 0 {
        return Err(Error::shape("flow_warp", "empty image"));
    }
    Ok(())
}

/// Backward warping: `out(x, y) = image(x + u, y + v)`.
pub fn flow_warp<T: Real>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    check_flow(image, flow)?;
    let s = image.shape();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                let (u, v) = flow.uv(b, y, x);
                let w = BilinearWeights::at(
                    T::lit(x as f64) + u,
                    T::lit(y as f64) + v,
                    s.width,
                    s.height,
                );
                for c in 0..s.channels {
                    let val = w.sample(Plane::of(image, b, c).data);
                    out.set(b, c, y, x, val);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`flow_warp`] with respect to the image and the flow.
pub fn flow_warp_backward<T: Real>(
    image: &Tensor<T>,
    flow: &FlowField<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_flow(image, flow)?;
    let s = image.shape();
    if dout.shape() != s {
        return Err(Error::shape(
            "flow_warp",
            format!("output gradient {} vs image {}", dout.shape(), s),
        ));
    }
    let mut dimg = Tensor::zeros(s);
    let mut dflow = Tensor::zeros(flow.shape());
    let n = s.plane();
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                let (u, v) = flow.uv(b, y, x);
                let w = BilinearWeights::at(
                    T::lit(x as f64) + u,
                    T::lit(y as f64) + v,
                    s.width,
                    s.height,
                );
                let (mut du, mut dv) = (T::zero(), T::zero());
                for c in 0..s.channels {
                    let g = dout.at(b, c, y, x);
                    let (gx, gy) = w.coord_grad(Plane::of(image, b, c).data);
                    du += g * gx;
                    dv += g * gy;
                    let base = (b * s.channels + c) * n;
                    let d = dimg.data_mut();
                    for k in 0..4 {
                        d[base + w.index[k]] += g * w.weight[k];
                    }
                }
                let i0 = dflow.index(b, 0, y, x);
                let i1 = dflow.index(b, 1, y, x);
                dflow.data_mut()[i0] = du;
                dflow.data_mut()[i1] = dv;
            }
        }
    }
    Ok((dimg, dflow))
}

/// Records [`flow_warp`] on a graph, differentiable in both arguments.
pub fn flow_warp_node<T: Real>(g: &mut Graph<T>, image: NodeId, flow: NodeId) -> Result<NodeId> {
    let f = FlowField::new(g.value(flow).clone())?;
    let out = flow_warp(g.value(image), &f)?;
    let backward: CustomBackward<T> = Arc::new(|inputs, _out, dout| {
        let f = FlowField {
            tensor: inputs[1].clone(),
        };
        let (di, df) = flow_warp_backward(inputs[0], &f, dout).expect("shapes checked forward");
        vec![di, df]
    });
    g.custom(&[image, flow], out, backward)
}

/// The fixed 2x2 stencil that reproduces bilinear warping as a convolution.
///
/// Taps sit at integer displacements `(floor(u) + i, floor(v) + j)` for
/// `i, j in {0, 1}` with coefficients that depend only on the fractional parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpStencil<T> {
    /// `(du, dv, coefficient)` per tap.
    pub taps: [(i64, i64, T); 4],
}

impl<T: Real> WarpStencil<T> {
    pub fn for_flow(u: T, v: T) -> Self {
        let (fu, fv) = (u.floor(), v.floor());
        let (au, av) = (u - fu, v - fv);
        let (iu, iv) = (fu.to_i64().unwrap_or(0), fv.to_i64().unwrap_or(0));
        let one = T::one();
        WarpStencil {
            taps: [
                (iu, iv, (one - au) * (one - av)),
                (iu, iv + 1, (one - au) * av),
                (iu + 1, iv, au * (one - av)),
                (iu + 1, iv + 1, au * av),
            ],
        }
    }
}

/// Warping evaluated as a per-pixel 2x2 convolution over integer-offset taps.
///
/// Numerically interchangeable with [`flow_warp`]; kept as a separate code path
/// so the equivalence can be checked.
pub fn flow_as_conv<T: Real>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    check_flow(image, flow)?;
    let s = image.shape();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                let (u, v) = flow.uv(b, y, x);
                let stencil = WarpStencil::for_flow(u, v);
                for c in 0..s.channels {
                    let mut acc = T::zero();
                    for &(du, dv, coef) in &stencil.taps {
                        let px = clamp(x as i64 + du, s.width);
                        let py = clamp(y as i64 + dv, s.height);
                        acc += coef * image.at(b, c, py, px);
                    }
                    out.set(b, c, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}
