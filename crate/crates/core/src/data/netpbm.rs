//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Writing quantizes `round_half_up(v * 255)`; reading divides by the maxval.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn encode(magic: &str, w: usize, h: usize, samples: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(samples.map(quantize));
    out
}

/// Encodes an `(H, W, 3)` image.
pub fn write_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = frame.dims3("write_ppm")?;
    if c != 3 {
        return Err(Error::InvalidShape {
            shape: frame.shape().to_vec(),
            reason: "PPM needs 3 channels".into(),
        });
    }
    Ok(encode("P6", w, h, frame.data().iter().copied()))
}

/// Encodes an `(H, W)` map.
pub fn write_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.dims2("write_pgm")?;
    Ok(encode("P5", w, h, map.data().iter().copied()))
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        reason: reason.into(),
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(parse_err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| parse_err(start, format!("{name} out of range")))?;
        if *field == 0 {
            return Err(parse_err(start, format!("{name} must be positive")));
        }
    }
    if fields[2] > 255 {
        return Err(parse_err(pos, "maxval above 255 is not supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "expected single whitespace after maxval")),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos,
    })
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(Header, Vec<f64>)> {
    let hdr = parse_header(bytes, magic)?;
    let n = hdr.width * hdr.height * channels;
    let body = &bytes[hdr.data_start..];
    if body.len() < n {
        return Err(parse_err(
            bytes.len(),
            format!("pixel data truncated: need {n} bytes, found {}", body.len()),
        ));
    }
    let scale = hdr.maxval as f64;
    let data = body[..n].iter().map(|&b| b as f64 / scale).collect();
    Ok((hdr, data))
}

pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (h, data) = decode(bytes, b"P6", 3)?;
    Tensor::new(vec![h.height, h.width, 3], data)
}

pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (h, data) = decode(bytes, b"P5", 1)?;
    Tensor::new(vec![h.height, h.width], data)
}
