//! Pooling, upsampling and channel concatenation kernels.

use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub(crate) fn avg_pool2x2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (s.height / 2, s.width / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
    for plane in x.data().chunks(s.plane()) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * s.width..][..s.width];
            let r1 = &plane[(2 * oy + 1) * s.width..][..s.width];
            for ox in 0..ow {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    Tensor::new([s.batch, s.channels, oh, ow], out).expect("pool shape")
}

pub(crate) fn avg_pool2x2_backward<T: Real>(input_shape: Shape, dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape.height, input_shape.width);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dout.data().chunks(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = dplane[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    Tensor::new(input_shape, dx).expect("pool grad shape")
}

/// Source taps of half-pixel-centred x2 bilinear upsampling along one axis.
///
/// Output index `2i` reads `0.75 * in[i] + 0.25 * in[i - 1]`, output `2i + 1`
/// reads `0.75 * in[i] + 0.25 * in[i + 1]`, with indices clamped at the border.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize) {
    let i = o / 2;
    let j = if o % 2 == 0 {
        i.saturating_sub(1)
    } else {
        (i + 1).min(n - 1)
    };
    (i, j)
}

pub(crate) fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.height, s.width);
    let (oh, ow) = (2 * h, 2 * w);
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
    let mut rows = vec![T::zero(); ow * h];
    for plane in x.data().chunks(s.plane()) {
        // horizontal pass into `rows` (h x ow), then vertical
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for ox in 0..ow {
                let (i, j) = up_taps(ox, w);
                rows[y * ow + ox] = near * src[i] + far * src[j];
            }
        }
        for oy in 0..oh {
            let (i, j) = up_taps(oy, h);
            let (ri, rj) = (&rows[i * ow..(i + 1) * ow], &rows[j * ow..(j + 1) * ow]);
            out.extend(ri.iter().zip(rj).map(|(&a, &b)| near * a + far * b));
        }
    }
    Tensor::new([s.batch, s.channels, oh, ow], out).expect("upsample shape")
}

pub(crate) fn upsample2x_backward<T: Real>(input_shape: Shape, dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape.height, input_shape.width);
    let (oh, ow) = (2 * h, 2 * w);
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let mut dx = vec![T::zero(); input_shape.numel()];
    let mut rows = vec![T::zero(); h * ow];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dout.data().chunks(oh * ow)) {
        rows.fill(T::zero());
        for oy in 0..oh {
            let (i, j) = up_taps(oy, h);
            for ox in 0..ow {
                let g = dplane[oy * ow + ox];
                rows[i * ow + ox] += near * g;
                rows[j * ow + ox] += far * g;
            }
        }
        for y in 0..h {
            for ox in 0..ow {
                let (i, j) = up_taps(ox, w);
                let g = rows[y * ow + ox];
                plane[y * w + i] += near * g;
                plane[y * w + j] += far * g;
            }
        }
    }
    Tensor::new(input_shape, dx).expect("upsample grad shape")
}

pub(crate) fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let (na, nb) = (sa.channels * sa.plane(), sb.channels * sb.plane());
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..sa.batch {
        out.extend_from_slice(&a.data()[i * na..(i + 1) * na]);
        out.extend_from_slice(&b.data()[i * nb..(i + 1) * nb]);
    }
    Tensor::new(sa.with_channels(sa.channels + sb.channels), out).expect("concat shape")
}

pub(crate) fn concat_backward<T: Real>(
    sa: Shape,
    sb: Shape,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (na, nb) = (sa.channels * sa.plane(), sb.channels * sb.plane());
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for chunk in dout.data().chunks(na + nb) {
        da.extend_from_slice(&chunk[..na]);
        db.extend_from_slice(&chunk[na..]);
    }
    (
        Tensor::new(sa, da).expect("concat grad a"),
        Tensor::new(sb, db).expect("concat grad b"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_matches_half_pixel_formula() {
        let x = Tensor::<f64>::new([1, 1, 1, 3], vec![0.0, 4.0, 8.0]).unwrap();
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 6));
        // source coordinate of output o is (o + 0.5) / 2 - 0.5, clamped at 0
        assert_eq!(&y.data()[..6], &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
        assert_eq!(&y.data()[..6], &y.data()[6..]);
    }

    #[test]
    fn pool_averages_blocks() {
        let x = Tensor::<f64>::new([1, 1, 2, 4], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 2.0, 6.0]).unwrap();
        assert_eq!(avg_pool2x2_forward(&x).data(), &[4.0, 2.0]);
    }
}
