use std::fs;
use std::path::Path;

use super::Cursor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampling::FlowField;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"FLO1";

/// Item 0 of `flow`, as `FLO1`, u32 height, u32 width, then row-major f32
/// `(u, v)` pairs.
pub fn encode_flow<T: Real>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.batch != 1 {
        return Err(Error::shape("flow file", format!("expected one field, got {}", s)));
    }
    let mut out = Vec::with_capacity(12 + 8 * s.plane());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(s.height as u32).to_le_bytes());
    out.extend_from_slice(&(s.width as u32).to_le_bytes());
    for y in 0..s.height {
        for x in 0..s.width {
            let (u, v) = flow.uv(0, y, x);
            out.extend_from_slice(&(u.as_f64() as f32).to_le_bytes());
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_flow<T: Real>(bytes: &[u8]) -> Result<FlowField<T>> {
    let mut c = Cursor::new(bytes, "FLO1");
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("FLO1", "bad magic"));
    }
    let h = c.u32("height")? as usize;
    let w = c.u32("width")? as usize;
    let mut t = Tensor::zeros(Shape::new(1, 2, h, w));
    for y in 0..h {
        for x in 0..w {
            let b = c.take(8, &format!("vector at ({}, {})", x, y))?;
            let u = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            let v = f32::from_le_bytes([b[4], b[5], b[6], b[7]]);
            t.set(0, 0, y, x, T::lit(u as f64));
            t.set(0, 1, y, x, T::lit(v as f64));
        }
    }
    if c.remaining() != 0 {
        return Err(Error::format("FLO1", format!("{} trailing bytes", c.remaining())));
    }
    FlowField::new(t)
}

pub fn write_flow<T: Real>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    fs::write(path, encode_flow(flow)?)?;
    Ok(())
}

pub fn read_flow<T: Real>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    decode_flow(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let t = Tensor::<f32>::from_fn([1, 2, 3, 5], |[_, c, y, x]| {
            (x as f32 * 0.37 - y as f32 * 1.5) * if c == 0 { 1.0 } else { -0.3 }
        });
        let f = FlowField::new(t.clone()).unwrap();
        let bytes = encode_flow(&f).unwrap();
        assert_eq!(&bytes[..4], b"FLO1");
        assert_eq!(bytes.len(), 12 + 8 * 15);
        let back = decode_flow::<f32>(&bytes).unwrap();
        assert_eq!(back.tensor(), &t);
        assert_eq!(encode_flow(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file() {
        let f = FlowField::<f64>::constant(1, 2, 2, 1.0, 0.5);
        let bytes = encode_flow(&f).unwrap();
        let e = decode_flow::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{}", e);
    }
}
