use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::Frame;

fn quantize(v: f64) -> u8 {
    // round half up after clamping
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let (w, h) = (frame.width(), frame.height());
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(frame.get(x, y, c)));
            }
        }
    }
    out
}

fn header_token(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("PPM", format!("header ends before {}", what))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PPM", format!("expected a number for {}", what)));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PPM", format!("{} out of range", what)))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format("PPM", "missing P6 magic"));
    }
    let mut pos = 2;
    let width = header_token(bytes, &mut pos, "width")?;
    let height = header_token(bytes, &mut pos, "height")?;
    let maxval = header_token(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            "PPM",
            format!("maxval {} unsupported (1 to 255 only)", maxval),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("PPM", "no whitespace after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format("PPM", "dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(Error::format(
            "PPM",
            format!(
                "truncated pixel data: {} bytes for {}x{} needs {}",
                data.len(),
                width,
                height,
                need
            ),
        ));
    }
    let scale = maxval as f64;
    let mut frame = Frame::new(width, height);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = data[(y * width + x) * 3 + c] as f64 / scale;
                frame.set(x, y, c, v.min(1.0));
            }
        }
    }
    Ok(frame)
}

pub fn write_image(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    fs::write(path, encode_ppm(frame))?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format { format, detail } => Error::Format {
            format,
            detail: format!("{}: {}", path.display(), detail),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_bytes() {
        let f = Frame::filled(1, 1, [1.0; 3]);
        assert_eq!(encode_ppm(&f), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
    }

    #[test]
    fn round_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.499 / 255.0), 0);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn header_with_comment() {
        let f = decode_ppm(b"P6 # made by hand\n2 1 255\n\x00\x00\x00\xff\x80\x00").unwrap();
        assert_eq!(f.get(1, 0, 0), 1.0);
        assert_eq!(f.get(1, 0, 1), 128.0 / 255.0);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00").is_err());
        let e = decode_ppm(b"P6\n2 2\n255\n\x00\x00").unwrap_err();
        assert!(e.to_string().contains("truncated"), "{}", e);
    }
}
