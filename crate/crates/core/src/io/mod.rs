//! File formats: binary PPM images, FLO1 flow fields and EDSC checkpoints.
//! All multi-byte numbers are little-endian.

mod checkpoint;
mod flo;
mod ppm;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    CHECKPOINT_VERSION,
};
pub use flo::{decode_flow, encode_flow, read_flow, write_flow};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image};

use crate::error::{Error, Result};

/// Byte reader that reports truncation in terms of what was being read.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Cursor {
            bytes,
            pos: 0,
            format,
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.format,
                format!(
                    "truncated while reading {} ({} bytes needed, {} left)",
                    what,
                    n,
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
