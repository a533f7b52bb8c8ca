//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{FannError, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(FannError::format(
            path,
            0,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(FannError::format(path, start as u64, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| FannError::format(path, start as u64, format!("number `{text}` out of range")))?;
        if i == 2 && *field != 255 {
            return Err(FannError::format(
                path,
                start as u64,
                format!("maxval {} is not supported, only 255", *field),
            ));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(FannError::format(
                path,
                pos as u64,
                "expected a single whitespace byte before pixel data",
            ))
        }
    }
    let [width, height, _] = fields;
    if width == 0 || height == 0 {
        return Err(FannError::format(path, 2, format!("degenerate size {width}x{height}")));
    }
    Ok(Header {
        width,
        height,
        payload_offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = header.width * header.height * channels;
    let available = bytes.len() - header.payload_offset;
    if available < expected {
        return Err(FannError::format(
            path,
            bytes.len() as u64,
            format!("truncated pixel data: expected {expected} bytes, found {available}"),
        ));
    }
    Ok(&bytes[header.payload_offset..header.payload_offset + expected])
}

/// Decodes a P6 image into a `[3, H, W]` tensor with values `byte / 255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6", path)?;
    let px = payload(bytes, &header, 3, path)?;
    let plane = header.width * header.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(rgb[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, header.height, header.width], data)
}

/// Decodes a P5 image into a `[1, H, W]` tensor with values `byte / 255`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let header = parse_header(bytes, b"P5", path)?;
    let px = payload(bytes, &header, 1, path)?;
    let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_vec(&[1, header.height, header.width], data)
}

pub fn read_image_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FannError::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Reads a P5 mask and thresholds it at 0.5 to `{0, 1}`.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FannError::io(path, e))?;
    Ok(threshold(&decode_pgm(&bytes, path)?))
}

pub fn threshold(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(FannError::InvalidShape {
            op: "encode_ppm",
            reason: format!("expected 3 channels, got {}", image.shape()),
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        out.extend_from_slice(&[to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])]);
    }
    Ok(out)
}

pub fn encode_pgm(gray: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = gray.chw()?;
    if c != 1 {
        return Err(FannError::InvalidShape {
            op: "encode_pgm",
            reason: format!("expected 1 channel, got {}", gray.shape()),
        });
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_image_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| FannError::io(path, e))
}

pub fn write_mask_pgm(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(mask)?).map_err(|e| FannError::io(path, e))
}
