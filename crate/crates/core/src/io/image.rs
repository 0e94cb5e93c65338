//! Binary PPM (P6) and PGM (P5) images with maxval 255, and bilinear resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        if start == pos {
            return Err(format_err(pos, "expected a number in the header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().map_err(|_| format_err(start, "header number too large"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos, "expected whitespace after the header"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(pos, format!("only maxval 255 is supported, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(pos, "image has zero size"));
    }
    Ok(Header { width, height, data_offset: pos + 1 })
}

/// Decode P6 bytes into a 3×H×W tensor in `[0, 1]`, channels R, G, B.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let plane = h.width * h.height;
    let data = &bytes[h.data_offset..];
    if data.len() < 3 * plane {
        return Err(format_err(bytes.len(), format!("pixel data ends after {} of {} bytes", data.len(), 3 * plane)));
    }
    let mut t = Tensor::zeros(Shape::new(3, h.height, h.width));
    for (p, px) in data[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Argument(format!("PPM needs 3 channels, tensor is {}", img.shape())));
    }
    let plane = img.height() * img.width();
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(img.data()[c * plane + p]));
        }
    }
    Ok(out)
}

/// Gray image from row-major levels.
pub fn encode_pgm(width: usize, height: usize, levels: &[u8]) -> Result<Vec<u8>> {
    if levels.len() != width * height {
        return Err(Error::Argument(format!("{} gray levels for a {width}×{height} image", levels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    Ok(out)
}

/// Decode P5 bytes into a 1×H×W tensor in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P5")?;
    let plane = h.width * h.height;
    let data = &bytes[h.data_offset..];
    if data.len() < plane {
        return Err(format_err(bytes.len(), format!("pixel data ends after {} of {plane} bytes", data.len())));
    }
    Tensor::new(Shape::new(1, h.height, h.width), data[..plane].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_ppm(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img)?)?)
}

/// Write a single-channel map in `[0, 1]` as P5.
pub fn save_pgm(map: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::Argument(format!("PGM needs 1 channel, tensor is {}", map.shape())));
    }
    let levels: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    Ok(std::fs::write(path, encode_pgm(map.width(), map.height(), &levels)?)?)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pgm(&std::fs::read(path)?)
}

/// Bilinear resize with half-pixel centres; samples outside the image clamp to the edge.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    if out_h == 0 || out_w == 0 || img.shape().is_empty() {
        return Err(Error::Argument(format!("cannot resize {} to {out_h}×{out_w}", img.shape())));
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, img.height());
    let xs = taps(out_w, img.width());
    Ok(Tensor::from_fn(Shape::new(img.channels(), out_h, out_w), |c, i, j| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
        let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}
