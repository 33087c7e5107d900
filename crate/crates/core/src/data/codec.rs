//! PPM (P6, maxval 255) encode/decode and PNG decode.

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded RGB raster as `[3, h, w]` planes in `[0, 1]`.
pub type Planes = Tensor<f32>;

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    f32::from(v) / 255.0
}

/// Interleaves `[3, h, w]` planes into RGB bytes.
pub fn interleave(image: &Planes) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode", format!("expected 3 x h x w, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            rgb.push(to_u8(d[c * plane + p]));
        }
    }
    Ok((h, w, rgb))
}

fn planar(h: usize, w: usize, rgb: &[u8]) -> Result<Planes> {
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = from_u8(px[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

pub fn encode_ppm(image: &Planes) -> Result<Vec<u8>> {
    let (h, w, rgb) = interleave(image)?;
    Ok(ppm_bytes(w, h, &rgb))
}

pub fn ppm_bytes(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_ppm(path: &Path, image: &Planes) -> Result<()> {
    let bytes = encode_ppm(image)?;
    write_file(path, &bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary P6 image with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Planes, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad header")?.to_string());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(format!("expected {need} raster bytes, found {}", bytes.len().saturating_sub(pos)));
    }
    planar(h, w, &bytes[pos..pos + need]).map_err(|e| e.to_string())
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Planes, String> {
    let mut decoder = png::Decoder::new(BufReader::new(std::io::Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err("unexpanded palette".into()),
    };
    planar(h, w, &rgb).map_err(|e| e.to_string())
}

pub fn encode_png(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(rgb).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Reads a `.ppm` or `.png` file, chosen by extension.
pub fn read_image(path: &Path) -> Result<Planes> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let decoded = match ext.as_str() {
        "ppm" => decode_ppm(&bytes),
        "png" => decode_png(&bytes),
        other => Err(format!("unsupported extension {other:?}")),
    };
    decoded.map_err(|msg| Error::Decode {
        path: path.to_path_buf(),
        msg,
    })
}
