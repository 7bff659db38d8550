//! Image quality metrics: PSNR, SSIM and RMS interpolation errors over the
//! whole frame, the occluded region and the border band.

use std::fmt;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::sampling::{flow_warp, FlowField};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn mse(pred: &Frame, gt: &Frame) -> Result<f64> {
    pred.same_size(gt, "metric")?;
    let n = pred.data().len();
    if n == 0 {
        return Err(Error::invalid("empty frame"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / n as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Frame, gt: &Frame, peak: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * img[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) and a unit
/// dynamic range, averaged over the valid window positions of each channel
/// and then over channels.
pub fn ssim(pred: &Frame, gt: &Frame) -> Result<f64> {
    pred.same_size(gt, "ssim")?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs frames of at least {0}x{0}, got {1}x{2}",
            SSIM_WINDOW, w, h
        )));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x = pred.plane(c);
        let y = gt.plane(c);
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(x, w, h, &win);
        let my = filter_valid(y, w, h, &win);
        let sxx = filter_valid(&prod(x, x), w, h, &win);
        let syy = filter_valid(&prod(y, y), w, h, &win);
        let sxy = filter_valid(&prod(x, y), w, h, &win);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// RMS error on the 0-255 scale over the pixels selected by `keep`, counting
/// every channel of a selected pixel.
pub fn masked_rmse(pred: &Frame, gt: &Frame, keep: impl Fn(usize, usize) -> bool) -> Result<f64> {
    pred.same_size(gt, "masked rmse")?;
    let (w, h) = (pred.width(), pred.height());
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !keep(x, y) {
                continue;
            }
            count += 1;
            for c in 0..3 {
                let d = 255.0 * (pred.get(x, y, c) - gt.get(x, y, c));
                sum += d * d;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / (3 * count) as f64).sqrt())
}

/// Root-mean-square colour difference on the 0-255 scale.
pub fn interpolation_error(pred: &Frame, gt: &Frame) -> Result<f64> {
    masked_rmse(pred, gt, |_, _| true)
}

/// Pixels where brightness constancy fails.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl OcclusionMask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mask = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        OcclusionMask {
            width,
            height,
            mask,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-pixel brightness-constancy residual: the channel L2 norm of
/// `I1 - warp(I2, flow)`.
pub fn brightness_residual(i1: &Frame, i2: &Frame, flow_1to2: &FlowField<f64>) -> Result<Vec<f64>> {
    i1.same_size(i2, "occlusion mask")?;
    let warped = flow_warp(&i2.to_tensor::<f64>(), flow_1to2)?;
    let warped = Frame::from_tensor(&warped, 0)?;
    let (w, h) = (i1.width(), i1.height());
    Ok((0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            (0..3)
                .map(|c| (i1.get(x, y, c) - warped.get(x, y, c)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Marks pixels whose residual is at least the mean residual.
pub fn occlusion_mask(i1: &Frame, i2: &Frame, flow_1to2: &FlowField<f64>) -> Result<OcclusionMask> {
    let s = flow_1to2.shape();
    if s.batch != 1 {
        return Err(Error::shape("occlusion mask", format!("flow {} must hold one field", s)));
    }
    let d = brightness_residual(i1, i2, flow_1to2)?;
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    Ok(OcclusionMask {
        width: i1.width(),
        height: i1.height(),
        mask: d.iter().map(|&v| v >= mean).collect(),
    })
}

/// RMS error over the occluded pixels.
pub fn ie_occluded(pred: &Frame, gt: &Frame, mask: &OcclusionMask) -> Result<f64> {
    if mask.width != pred.width() || mask.height != pred.height() {
        return Err(Error::shape(
            "ie_occluded",
            format!(
                "mask {}x{} vs frame {}x{}",
                mask.width,
                mask.height,
                pred.width(),
                pred.height()
            ),
        ));
    }
    masked_rmse(pred, gt, |x, y| mask.get(x, y))
}

pub fn in_border(x: usize, y: usize, w: usize, h: usize, band: usize) -> bool {
    x < band || y < band || x + band >= w || y + band >= h
}

/// RMS error over pixels within `width` of any frame edge.
pub fn ie_boundary(pred: &Frame, gt: &Frame, width: usize) -> Result<f64> {
    let (w, h) = (pred.width(), pred.height());
    masked_rmse(pred, gt, |x, y| in_border(x, y, w, h, width))
}

/// The line printed by `eval`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub ie: f64,
    pub ie_o: Option<f64>,
    pub ie_b: f64,
}

impl Evaluation {
    /// Boundary band of 10 pixels; occluded error only when a flow is given.
    pub fn compute(pred: &Frame, gt: &Frame, occlusion: Option<&OcclusionMask>) -> Result<Self> {
        Ok(Evaluation {
            psnr: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt)?,
            ie: interpolation_error(pred, gt)?,
            ie_o: occlusion.map(|m| ie_occluded(pred, gt, m)).transpose()?,
            ie_b: ie_boundary(pred, gt, 10)?,
        })
    }

    /// Per-field mean.
    pub fn mean(items: &[Evaluation]) -> Option<Evaluation> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Evaluation) -> f64| items.iter().map(f).sum::<f64>() / n;
        let ie_o = if items.iter().all(|e| e.ie_o.is_some()) {
            Some(items.iter().map(|e| e.ie_o.unwrap_or(0.0)).sum::<f64>() / n)
        } else {
            None
        };
        Some(Evaluation {
            psnr: avg(|e| e.psnr),
            ssim: avg(|e| e.ssim),
            ie: avg(|e| e.ie),
            ie_o,
            ie_b: avg(|e| e.ie_b),
        })
    }
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr={:.4} ssim={:.6} ie={:.4} ", self.psnr, self.ssim, self.ie)?;
        match self.ie_o {
            Some(v) => write!(f, "ie_o={:.4} ", v)?,
            None => write!(f, "ie_o=na ")?,
        }
        write!(f, "ie_b={:.4}", self.ie_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Frame {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Frame::from_fn(w, h, |_, _| {
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            [next(), next(), next()]
        })
    }

    #[test]
    fn psnr_values() {
        let a = Frame::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Frame::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1.0, 255.0) - 48.130_803_608_679_1).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_and_constant() {
        let a = noise(16, 13, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let g = Frame::filled(12, 12, [0.5; 3]);
        let p = Frame::filled(12, 12, [0.6; 3]);
        let c1 = 1e-4;
        let expect = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        assert!((ssim(&p, &g).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(&Frame::new(10, 20), &Frame::new(10, 20)).is_err());
    }

    #[test]
    fn ssim_anti_correlated_is_negative() {
        let a = Frame::from_fn(16, 16, |x, y| [if (x + y) % 2 == 0 { 0.9 } else { 0.1 }; 3]);
        let b = Frame::from_fn(16, 16, |x, y| [if (x + y) % 2 == 0 { 0.1 } else { 0.9 }; 3]);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ie_values() {
        let a = Frame::filled(5, 5, [0.2; 3]);
        let b = Frame::filled(5, 5, [0.2 + 2.0 / 255.0; 3]);
        assert_eq!(interpolation_error(&a, &a).unwrap(), 0.0);
        assert!((interpolation_error(&a, &b).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_ignores_interior() {
        let gt = Frame::filled(30, 30, [0.3; 3]);
        let mut p = gt.clone();
        p.set(15, 15, 1, 0.9);
        assert_eq!(ie_boundary(&p, &gt, 10).unwrap(), 0.0);
        assert!(ie_boundary(&p, &gt, 15).unwrap() > 0.0);
    }

    #[test]
    fn constant_frames_mask_everything() {
        let a = Frame::filled(6, 4, [0.4; 3]);
        let m = occlusion_mask(&a, &a, &FlowField::zeros(1, 4, 6)).unwrap();
        assert_eq!(m.count(), 24);
        let none = OcclusionMask::from_fn(6, 4, |_, _| false);
        assert!(matches!(ie_occluded(&a, &a, &none), Err(Error::EmptyMask)));
    }

    #[test]
    fn eval_line_format() {
        let e = Evaluation {
            psnr: 30.0,
            ssim: 0.9,
            ie: 2.0,
            ie_o: None,
            ie_b: 1.5,
        };
        assert_eq!(e.to_string(), "psnr=30.0000 ssim=0.900000 ie=2.0000 ie_o=na ie_b=1.5000");
    }
}
