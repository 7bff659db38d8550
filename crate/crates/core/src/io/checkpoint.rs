use std::fs;
use std::path::Path;

use super::Cursor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::real::{DType, Real};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"EDSC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{} does not fit in u32", v)))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config: String = params
        .config()
        .to_kv()
        .iter()
        .map(|(k, v)| format!("{}={}\n", k, v))
        .collect();
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(4);
        for d in t.shape().dims() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut c = Cursor::new(bytes, "checkpoint");
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic (expected EDSC)"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("version {} unsupported (expected {})", version, CHECKPOINT_VERSION),
        ));
    }
    let len = c.u32("config length")? as usize;
    let text = std::str::from_utf8(c.take(len, "config")?)
        .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
    let mut pairs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("checkpoint", format!("bad config line {:?}", line)))?;
        pairs.push((k.trim(), v.trim()));
    }
    let config = ModelConfig::from_kv(pairs)?;
    let count = c.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("tensor #{}", i);
        let nlen = c.u32(&format!("{} name length", what))? as usize;
        let name = std::str::from_utf8(c.take(nlen, &format!("{} name", what))?)
            .map_err(|_| Error::format("checkpoint", format!("{} name is not UTF-8", what)))?
            .to_string();
        let tag = c.u8(&format!("tensor {} dtype", name))?;
        let dtype = DType::from_tag(tag).ok_or_else(|| {
            Error::format("checkpoint", format!("tensor {} has unknown dtype {}", name, tag))
        })?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {} stored as {:?}, requested {:?}", name, dtype, T::DTYPE),
            ));
        }
        let rank = c.u8(&format!("tensor {} rank", name))? as usize;
        if rank > 4 {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {} has rank {} (at most 4)", name, rank),
            ));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = c.u32(&format!("tensor {} dims", name))? as usize;
        }
        let shape = Shape::from(dims);
        let raw = c.take(shape.numel() * dtype.size(), &format!("tensor {} data", name))?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.remaining() != 0 {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes", c.remaining()),
        ));
    }
    ModelParams::from_parts(config, entries)
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and checks that the stored architecture equals `expected` (the seed
/// is not compared).
pub fn load_checkpoint_for<T: Real>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelParams<T>> {
    let p = load_checkpoint::<T>(path)?;
    let mut a = p.config().clone();
    a.seed = expected.seed;
    if &a != expected {
        return Err(Error::Config(format!(
            "checkpoint architecture differs:\n{}expected:\n{}",
            p.config(),
            expected
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn tiny() -> ModelConfig {
        ModelConfig {
            kernel_size: 3,
            hetconv_p: 2,
            widths: vec![4, 6],
            block_depth: 1,
            estimator_widths: [4, 4, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = build_model::<f32>(&tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(&bytes[..4], b"EDSC");
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn errors_name_the_tensor() {
        let p = build_model::<f64>(&tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        let e = decode_checkpoint::<f64>(&bytes[..bytes.len() - 5]).unwrap_err();
        let last = p.names().last().unwrap();
        assert!(e.to_string().contains(last.as_str()), "{}", e);
        let e = decode_checkpoint::<f32>(&bytes).unwrap_err();
        assert!(e.to_string().contains("enc0.0.w3"), "{}", e);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint::<f64>(&bad).unwrap_err().to_string().contains("version"));
        bad[0] = b'X';
        assert!(decode_checkpoint::<f64>(&bad).unwrap_err().to_string().contains("magic"));
    }
}
