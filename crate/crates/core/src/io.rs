//! Binary PGM/PPM images and CSV tables.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `v ∈ [-1, 1]` to `round((v + 1) · 127.5)`, clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Encodes a `(1, H, W)` or `(H, W)` tensor as P5 and a `(3, H, W)` tensor as P6.
/// A leading batch axis of 1 is accepted.
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>> {
    let s = x.shape();
    let s = if s.len() == 4 && s[0] == 1 { &s[1..] } else { s };
    let (c, h, w) = match *s {
        [h, w] => (1, h, w),
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "images must have 1 or 3 channels, got shape {:?}",
                x.shape()
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = x.data();
    for i in 0..h * w {
        for ch in 0..c {
            out.push(quantize(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

/// Decodes a binary PGM/PPM with maxval 255 into a `(C, H, W)` tensor on `[-1, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::InvalidArgument(format!("image: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if body.len() < c * h * w {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = dequantize(body[i * c + ch]);
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn write_image(path: &Path, x: &Tensor) -> Result<()> {
    std::fs::write(path, encode_image(x)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

/// Writes one CSV row per record, with a header derived from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
