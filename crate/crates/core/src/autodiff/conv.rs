//! Convolution kernels: dense cross-correlation and heterogeneous (HetConv) filters.
//!
//! Both lower to `im2col` + GEMM per batch item. Weight gradients are computed
//! per item and reduced in batch order so results do not depend on the thread
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Unfolds one `(c, h, w)` image into a `(c * k * k, oh * ow)` column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn conv_geom<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let s = input.shape();
    let ws = weight.shape();
    if ws.height != ws.width || ws.height % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square and odd, got {}", ws),
        ));
    }
    if ws.channels != s.channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weight {} expects {}", s.channels, ws, ws.channels),
        ));
    }
    if bias.numel() != ws.batch {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {} filters", bias.numel(), ws.batch),
        ));
    }
    let k = ws.height;
    let (oh, ow) = match (
        conv_out_dim(s.height, k, stride, pad),
        conv_out_dim(s.width, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("input {} too small for kernel {} with pad {} stride {}", s, k, pad, stride),
            ))
        }
    };
    Ok(ConvGeom {
        cin: s.channels,
        cout: ws.batch,
        k,
        stride,
        pad,
        h: s.height,
        w: s.width,
        oh,
        ow,
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: ConvGeom,
) -> Tensor<T> {
    let batch = input.shape().batch;
    let in_item = g.cin * g.h * g.w;
    let ohw = g.oh * g.ow;
    let kk = g.cin * g.k * g.k;
    let mut out = Tensor::zeros([batch, g.cout, g.oh, g.ow]);
    out.data_mut()
        .par_chunks_mut(g.cout * ohw)
        .enumerate()
        .for_each(|(b, dst)| {
            let img = &input.data()[b * in_item..(b + 1) * in_item];
            for (m, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(bias.data()[m]);
            }
            if g.direct() {
                T::gemm(g.cout, kk, ohw, T::one(), weight.data(), kk as isize, 1, img, ohw as isize, 1, T::one(), dst, ohw as isize, 1);
            } else {
                let mut cols = vec![T::zero(); kk * ohw];
                im2col(img, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut cols);
                T::gemm(g.cout, kk, ohw, T::one(), weight.data(), kk as isize, 1, &cols, ohw as isize, 1, T::one(), dst, ohw as isize, 1);
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let batch = input.shape().batch;
    let in_item = g.cin * g.h * g.w;
    let ohw = g.oh * g.ow;
    let kk = g.cin * g.k * g.k;
    let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let img = &input.data()[b * in_item..(b + 1) * in_item];
            let dy = &dout.data()[b * g.cout * ohw..(b + 1) * g.cout * ohw];
            let mut dw = vec![T::zero(); g.cout * kk];
            let db: Vec<T> = dy.chunks(ohw).map(|r| r.iter().copied().sum()).collect();
            let cols_owned;
            let cols: &[T] = if g.direct() {
                img
            } else {
                let mut c = vec![T::zero(); kk * ohw];
                im2col(img, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut c);
                cols_owned = c;
                &cols_owned
            };
            // dW = dY * cols^T
            T::gemm(g.cout, ohw, kk, T::one(), dy, ohw as isize, 1, cols, 1, ohw as isize, T::zero(), &mut dw, kk as isize, 1);
            let dx = need_input.then(|| {
                let mut dcols = vec![T::zero(); kk * ohw];
                // dcols = W^T * dY
                T::gemm(kk, g.cout, ohw, T::one(), weight.data(), 1, kk as isize, dy, ohw as isize, 1, T::zero(), &mut dcols, ohw as isize, 1);
                if g.direct() {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); in_item];
                    col2im(&dcols, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut dx);
                    dx
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); g.cout * kk];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_input.then(|| Vec::with_capacity(batch * in_item));
    for (pw, pb, px) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend_from_slice(&px);
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d).expect("dx shape")),
        weight: Tensor::new(weight.shape(), dw).expect("dw shape"),
        bias: Tensor::new(Shape::new(1, 1, 1, g.cout), db).expect("db shape"),
    }
}

/// Channel assignment of a HetConv layer.
///
/// Each filter sees `g = ceil(cin / p)` channels through 3x3 kernels and the
/// remaining `cin - g` through 1x1 kernels. The 3x3 block of filter `m` starts
/// at channel `(m * g) mod cin` and wraps around.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HetPlan {
    pub cin: usize,
    pub cout: usize,
    pub part: usize,
    pub g: usize,
    groups: Vec<HetGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HetGroup {
    filters: Vec<usize>,
    /// Rows of the full `cin * 9` column matrix: 3x3 channels first, then the
    /// centre tap of each 1x1 channel in increasing channel order.
    rows: Vec<usize>,
}

impl HetPlan {
    pub fn new(cin: usize, cout: usize, part: usize) -> Result<Self> {
        if part == 0 || part > cin {
            return Err(Error::invalid(format!(
                "HetConv part {} must be in 1..={} (input channels)",
                part, cin
            )));
        }
        if cout == 0 {
            return Err(Error::invalid("HetConv with zero filters"));
        }
        let g = cin.div_ceil(part);
        let mut groups: Vec<(usize, HetGroup)> = Vec::new();
        for m in 0..cout {
            let start = (m * g) % cin;
            if let Some((_, grp)) = groups.iter_mut().find(|(s, _)| *s == start) {
                grp.filters.push(m);
                continue;
            }
            let three: Vec<usize> = (0..g).map(|i| (start + i) % cin).collect();
            let mut rows: Vec<usize> = three
                .iter()
                .flat_map(|&ch| (0..9).map(move |t| ch * 9 + t))
                .collect();
            rows.extend((0..cin).filter(|ch| !three.contains(ch)).map(|ch| ch * 9 + 4));
            groups.push((
                start,
                HetGroup {
                    filters: vec![m],
                    rows,
                },
            ));
        }
        Ok(HetPlan {
            cin,
            cout,
            part,
            g,
            groups: groups.into_iter().map(|(_, g)| g).collect(),
        })
    }

    /// Shapes of the 3x3 and 1x1 weight tensors.
    pub fn weight_shapes(&self) -> (Shape, Shape) {
        (
            Shape::new(self.cout, self.g, 3, 3),
            Shape::new(self.cout, self.cin - self.g, 1, 1),
        )
    }

    pub fn weight_count(&self) -> usize {
        self.cout * (9 * self.g + self.cin - self.g)
    }

    /// Channels feeding the 3x3 path of filter `m`.
    pub fn three_by_three_channels(&self, m: usize) -> Vec<usize> {
        let start = (m * self.g) % self.cin;
        (0..self.g).map(|i| (start + i) % self.cin).collect()
    }

    fn width(&self) -> usize {
        9 * self.g + self.cin - self.g
    }

    /// Packs one filter's weights in the group's row order.
    fn gather_weights<T: Real>(&self, grp: &HetGroup, w3: &Tensor<T>, w1: &Tensor<T>) -> Vec<T> {
        let width = self.width();
        let n1 = self.cin - self.g;
        let mut out = Vec::with_capacity(grp.filters.len() * width);
        for &m in &grp.filters {
            out.extend_from_slice(&w3.data()[m * self.g * 9..(m + 1) * self.g * 9]);
            out.extend_from_slice(&w1.data()[m * n1..(m + 1) * n1]);
        }
        out
    }

    fn scatter_weight_grads<T: Real>(
        &self,
        grp: &HetGroup,
        packed: &[T],
        dw3: &mut [T],
        dw1: &mut [T],
    ) {
        let width = self.width();
        let n1 = self.cin - self.g;
        for (i, &m) in grp.filters.iter().enumerate() {
            let src = &packed[i * width..(i + 1) * width];
            dw3[m * self.g * 9..(m + 1) * self.g * 9]
                .iter_mut()
                .zip(&src[..self.g * 9])
                .for_each(|(a, &b)| *a += b);
            dw1[m * n1..(m + 1) * n1]
                .iter_mut()
                .zip(&src[self.g * 9..])
                .for_each(|(a, &b)| *a += b);
        }
    }
}

pub(crate) fn check_hetconv<T: Real>(
    input: &Tensor<T>,
    w3: &Tensor<T>,
    w1: &Tensor<T>,
    bias: &Tensor<T>,
    plan: &HetPlan,
) -> Result<()> {
    let s = input.shape();
    if s.channels != plan.cin {
        return Err(Error::shape(
            "hetconv2d",
            format!("input {} but layer expects {} channels", s, plan.cin),
        ));
    }
    let (s3, s1) = plan.weight_shapes();
    if w3.shape() != s3 || w1.shape() != s1 {
        return Err(Error::shape(
            "hetconv2d",
            format!("weights {} / {}, expected {} / {}", w3.shape(), w1.shape(), s3, s1),
        ));
    }
    if bias.numel() != plan.cout {
        return Err(Error::shape(
            "hetconv2d",
            format!("bias has {} entries for {} filters", bias.numel(), plan.cout),
        ));
    }
    if s.height == 0 || s.width == 0 {
        return Err(Error::shape("hetconv2d", format!("empty input {}", s)));
    }
    Ok(())
}

fn gather_rows<T: Real>(cols: &[T], rows: &[usize], hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * hw);
    for &r in rows {
        out.extend_from_slice(&cols[r * hw..(r + 1) * hw]);
    }
    out
}

pub(crate) fn hetconv_forward<T: Real>(
    input: &Tensor<T>,
    w3: &Tensor<T>,
    w1: &Tensor<T>,
    bias: &Tensor<T>,
    plan: &HetPlan,
) -> Tensor<T> {
    let s = input.shape();
    let hw = s.plane();
    let in_item = plan.cin * hw;
    let width = plan.width();
    let packed: Vec<Vec<T>> = plan
        .groups
        .iter()
        .map(|grp| plan.gather_weights(grp, w3, w1))
        .collect();
    let mut out = Tensor::zeros([s.batch, plan.cout, s.height, s.width]);
    out.data_mut()
        .par_chunks_mut(plan.cout * hw)
        .enumerate()
        .for_each(|(b, dst)| {
            let img = &input.data()[b * in_item..(b + 1) * in_item];
            let mut cols = vec![T::zero(); plan.cin * 9 * hw];
            im2col(img, plan.cin, s.height, s.width, 3, 1, 1, s.height, s.width, &mut cols);
            for (grp, wg) in plan.groups.iter().zip(&packed) {
                let gathered = gather_rows(&cols, &grp.rows, hw);
                let nf = grp.filters.len();
                let mut res = vec![T::zero(); nf * hw];
                T::gemm(nf, width, hw, T::one(), wg, width as isize, 1, &gathered, hw as isize, 1, T::zero(), &mut res, hw as isize, 1);
                for (i, &m) in grp.filters.iter().enumerate() {
                    let bm = bias.data()[m];
                    dst[m * hw..(m + 1) * hw]
                        .iter_mut()
                        .zip(&res[i * hw..(i + 1) * hw])
                        .for_each(|(d, &r)| *d = r + bm);
                }
            }
        });
    out
}

pub(crate) struct HetGrads<T> {
    pub input: Option<Tensor<T>>,
    pub w3: Tensor<T>,
    pub w1: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn hetconv_backward<T: Real>(
    input: &Tensor<T>,
    w3: &Tensor<T>,
    w1: &Tensor<T>,
    dout: &Tensor<T>,
    plan: &HetPlan,
    need_input: bool,
) -> HetGrads<T> {
    let s = input.shape();
    let hw = s.plane();
    let in_item = plan.cin * hw;
    let width = plan.width();
    let packed: Vec<Vec<T>> = plan
        .groups
        .iter()
        .map(|grp| plan.gather_weights(grp, w3, w1))
        .collect();
    type Partial<T> = (Vec<T>, Vec<T>, Vec<T>, Option<Vec<T>>);
    let partials: Vec<Partial<T>> = (0..s.batch)
        .into_par_iter()
        .map(|b| {
            let img = &input.data()[b * in_item..(b + 1) * in_item];
            let dy = &dout.data()[b * plan.cout * hw..(b + 1) * plan.cout * hw];
            let mut cols = vec![T::zero(); plan.cin * 9 * hw];
            im2col(img, plan.cin, s.height, s.width, 3, 1, 1, s.height, s.width, &mut cols);
            let mut dw3 = vec![T::zero(); w3.numel()];
            let mut dw1 = vec![T::zero(); w1.numel()];
            let db: Vec<T> = dy.chunks(hw).map(|r| r.iter().copied().sum()).collect();
            let mut dcols = need_input.then(|| vec![T::zero(); plan.cin * 9 * hw]);
            for (grp, wg) in plan.groups.iter().zip(&packed) {
                let nf = grp.filters.len();
                let gathered = gather_rows(&cols, &grp.rows, hw);
                let mut dyg = Vec::with_capacity(nf * hw);
                for &m in &grp.filters {
                    dyg.extend_from_slice(&dy[m * hw..(m + 1) * hw]);
                }
                let mut dwg = vec![T::zero(); nf * width];
                T::gemm(nf, hw, width, T::one(), &dyg, hw as isize, 1, &gathered, 1, hw as isize, T::zero(), &mut dwg, width as isize, 1);
                plan.scatter_weight_grads(grp, &dwg, &mut dw3, &mut dw1);
                if let Some(dcols) = dcols.as_mut() {
                    let mut dg = vec![T::zero(); width * hw];
                    T::gemm(width, nf, hw, T::one(), wg, 1, width as isize, &dyg, hw as isize, 1, T::zero(), &mut dg, hw as isize, 1);
                    for (i, &r) in grp.rows.iter().enumerate() {
                        dcols[r * hw..(r + 1) * hw]
                            .iter_mut()
                            .zip(&dg[i * hw..(i + 1) * hw])
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            }
            let dx = dcols.map(|dcols| {
                let mut dx = vec![T::zero(); in_item];
                col2im(&dcols, plan.cin, s.height, s.width, 3, 1, 1, s.height, s.width, &mut dx);
                dx
            });
            (dw3, dw1, db, dx)
        })
        .collect();

    let mut dw3 = vec![T::zero(); w3.numel()];
    let mut dw1 = vec![T::zero(); w1.numel()];
    let mut db = vec![T::zero(); plan.cout];
    let mut dx = need_input.then(|| Vec::with_capacity(s.batch * in_item));
    for (p3, p1, pb, px) in partials {
        dw3.iter_mut().zip(&p3).for_each(|(a, &b)| *a += b);
        dw1.iter_mut().zip(&p1).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend_from_slice(&px);
        }
    }
    HetGrads {
        input: dx.map(|d| Tensor::new(s, d).expect("dx shape")),
        w3: Tensor::new(w3.shape(), dw3).expect("dw3 shape"),
        w1: Tensor::new(w1.shape(), dw1).expect("dw1 shape"),
        bias: Tensor::new(Shape::new(1, 1, 1, plan.cout), db).expect("db shape"),
    }
}
