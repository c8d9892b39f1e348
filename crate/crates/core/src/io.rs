//! PNG and PFM reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forensics::HeatMap;
use crate::image::{ImageTensor, Shape};
use crate::metrics::Mask;
use crate::scalar::Scalar;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        kind: "png",
        detail: format!("{}: {e}", path.display()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_png_raw(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Reads an 8-bit PNG as `(shape, interleaved samples)`; alpha is dropped,
/// palettes are expanded.
pub fn read_png_u8(path: &Path) -> Result<(Shape, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "only 8-bit images are supported"));
    }
    buf.truncate(info.buffer_size());
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(png_err(path, "unexpanded palette")),
    };
    let mut out = Vec::with_capacity(h * w * keep);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * src_c];
        for px in row.chunks_exact(src_c) {
            out.extend_from_slice(&px[..keep]);
        }
    }
    Ok((Shape::new(h, w, keep), out))
}

/// Reads an 8-bit gray or RGB PNG into model range.
pub fn read_image<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let (shape, bytes) = read_png_u8(path)?;
    ImageTensor::from_u8_interleaved(shape, &bytes)
}

/// Writes an image (1 or 3 channels) as 8-bit PNG.
pub fn write_image<T: Scalar>(path: &Path, image: &ImageTensor<T>) -> Result<()> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::shape(format!("cannot store {c}-channel image as PNG"))),
    };
    write_png_raw(path, image.width(), image.height(), color, png::BitDepth::Eight, &image.to_u8_interleaved())
}

/// Mask as 8-bit grayscale, 0 / 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_png_raw(path, mask.width(), mask.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &data)
}

/// Reads a mask; pixels `>= 128` (first channel) count as forged.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (shape, bytes) = read_png_u8(path)?;
    let data = bytes
        .chunks_exact(shape.channels)
        .map(|px| (px[0] >= 128) as u8)
        .collect();
    Mask::new(shape.height, shape.width, data)
}

/// Heatmap as 16-bit grayscale PNG, `round(H * 65535)`.
pub fn write_heatmap_png16<T: Scalar>(path: &Path, heat: &HeatMap<T>) -> Result<()> {
    let mut data = Vec::with_capacity(2 * heat.data().len());
    for &h in heat.data() {
        let v = (h.to_f64_lossy().clamp(0.0, 1.0) * 65535.0).round() as u16;
        data.extend_from_slice(&v.to_be_bytes());
    }
    write_png_raw(path, heat.width(), heat.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

/// Grayscale PFM (`Pf`, little-endian scale `-1.0`, rows bottom to top).
pub fn write_heatmap_pfm<T: Scalar>(path: &Path, heat: &HeatMap<T>) -> Result<()> {
    let (h, w) = (heat.height(), heat.width());
    let mut out = create(path)?;
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(4 * h * w);
    for y in (0..h).rev() {
        for &v in &heat.data()[y * w..(y + 1) * w] {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn pfm_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "pfm",
        detail: detail.into(),
    }
}

/// Reads a grayscale PFM of either endianness; returns rows top to bottom.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pfm_err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(pfm_err(format!("unsupported kind '{}'", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| pfm_err(format!("bad size '{s}'")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| pfm_err("bad scale"))?;
    let body = raw.get(pos..).unwrap_or_default();
    if body.len() != 4 * w * h {
        return Err(pfm_err(format!("expected {} data bytes, got {}", 4 * w * h, body.len())));
    }
    let mut data = vec![0f32; w * h];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = v;
    }
    Ok((h, w, data))
}
