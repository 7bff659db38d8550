//! RGB frames with values nominally in `[0, 1]`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// An `H x W x 3` image stored as three planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    /// `data` holds the R plane, then G, then B.
    pub fn from_planes(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(
                "frame",
                format!("{} values for a {}x{} frame", data.len(), width, height),
            ));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut out = Frame::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for (c, v) in px.into_iter().enumerate() {
                    out.set(x, y, c, v);
                }
            }
        }
        out
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Frame::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_size(&self, other: &Frame, op: &'static str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Frame {
        Frame {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    pub fn flip_horizontal(&self) -> Frame {
        Frame::from_fn(self.width, self.height, |x, y| {
            let sx = self.width - 1 - x;
            [self.get(sx, y, 0), self.get(sx, y, 1), self.get(sx, y, 2)]
        })
    }

    pub fn flip_vertical(&self) -> Frame {
        Frame::from_fn(self.width, self.height, |x, y| {
            let sy = self.height - 1 - y;
            [self.get(x, sy, 0), self.get(x, sy, 1), self.get(x, sy, 2)]
        })
    }

    /// The `width x height` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Frame> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{} frame",
                width, height, x, y, self.width, self.height
            )));
        }
        Ok(Frame::from_fn(width, height, |cx, cy| {
            [0, 1, 2].map(|c| self.get(x + cx, y + cy, c))
        }))
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            Shape::new(1, 3, self.height, self.width),
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("frame length matches shape")
    }

    /// Item `b` of a `[B, 3, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, b: usize) -> Result<Frame> {
        let s = t.shape();
        if s.channels != 3 || b >= s.batch {
            return Err(Error::shape(
                "frame",
                format!("cannot take RGB item {} of {}", b, s),
            ));
        }
        let n = 3 * s.plane();
        let data = t.data()[b * n..(b + 1) * n].iter().map(|v| v.as_f64()).collect();
        Frame::from_planes(s.width, s.height, data)
    }

    /// Stacks frames into a `[B, 3, H, W]` tensor.
    pub fn batch<T: Real>(frames: &[&Frame]) -> Result<Tensor<T>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("empty frame batch"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            first.same_size(f, "frame batch")?;
            data.extend(f.data.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(
            Shape::new(frames.len(), 3, first.height, first.width),
            data,
        )
    }
}
