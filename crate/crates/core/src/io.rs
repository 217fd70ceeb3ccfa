//! PNG and binary PPM (P6) reading and writing.
//!
//! Files are sniffed by magic bytes, not extension. Gray PNGs are expanded
//! to RGB, alpha is discarded, 8-bit samples scale by 1/255 and 16-bit
//! samples by 1/65535. Writing always produces 8-bit RGB.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::UnsupportedFormat(
            "expected a PNG or binary PPM (P6) file".into(),
        ))
    }
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => encode_png(img)?,
        Some(e) if e.eq_ignore_ascii_case("ppm") => encode_ppm(img)?,
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot infer output format from {}",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantize(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::InvalidParameter(format!(
            "only RGB images can be saved, got {} channels",
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let pixels = quantize(img)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::CorruptData(e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::CorruptData(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let pixels = quantize(img)?;
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

fn interleaved_to_image(
    width: usize,
    height: usize,
    samples: &[f64],
    stride: usize,
    gray: bool,
) -> Result<Image> {
    if samples.len() < width * height * stride {
        return Err(Error::CorruptData("pixel buffer too short".into()));
    }
    Ok(Image::from_fn(width, height, 3, |c, y, x| {
        let base = (y * width + x) * stride;
        if gray {
            samples[base]
        } else {
            samples[base + c]
        }
    }))
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptData(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptData("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptData(e.to_string()))?;
    let buf = &buf[..info.buffer_size()];
    let (width, height) = (info.width as usize, info.height as usize);
    let (stride, gray) = match info.color_type {
        png::ColorType::Grayscale => (1, true),
        png::ColorType::GrayscaleAlpha => (2, true),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (4, false),
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("unexpanded palette PNG".into()))
        }
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / 65535.0)
            .collect(),
        d => {
            return Err(Error::UnsupportedFormat(format!(
                "PNG bit depth {d:?} after expansion"
            )))
        }
    };
    interleaved_to_image(width, height, &samples, stride, gray)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::CorruptData("malformed PPM header".into()))
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos)?;
    let height = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::CorruptData(format!(
            "invalid PPM header {width}x{height} maxval {maxval}"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::CorruptData("missing PPM header terminator".into()));
    }
    pos += 1;
    let body = &bytes[pos..];
    let n = width * height * 3;
    let scale = maxval as f64;
    let samples: Vec<f64> = if maxval < 256 {
        if body.len() < n {
            return Err(Error::CorruptData("truncated PPM body".into()));
        }
        body[..n].iter().map(|&b| b as f64 / scale).collect()
    } else {
        if body.len() < 2 * n {
            return Err(Error::CorruptData("truncated PPM body".into()));
        }
        body[..2 * n]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / scale)
            .collect()
    };
    if samples.iter().any(|&v| v > 1.0) {
        return Err(Error::CorruptData("sample exceeds maxval".into()));
    }
    interleaved_to_image(width, height, &samples, 3, false)
}
