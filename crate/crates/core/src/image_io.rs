//! PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn image_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Read an 8- or 16-bit PNG as a `(1, 3, h, w)` tensor in `[0, 1]`.
/// Alpha is dropped and grayscale is replicated to three channels.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let (bytes, max) = match info.bit_depth {
        BitDepth::Eight => (1, 255.0f32),
        BitDepth::Sixteen => (2, 65535.0f32),
        other => return Err(image_err(path, format!("unsupported bit depth {other:?}"))),
    };
    let sample = |y: usize, x: usize, c: usize| -> f32 {
        let off = y * info.line_size + (x * channels + c) * bytes;
        let v = if bytes == 1 { buf[off] as u16 } else { u16::from_be_bytes([buf[off], buf[off + 1]]) };
        v as f32 / max
    };
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let src = if channels < 3 { 0 } else { c };
        sample(y, x, src)
    }))
}

/// Clamp to `[0, 1]` and quantise to an 8-bit level, rounding half away from zero.
pub fn to_u8<T: Real>(v: T) -> u8 {
    let v = v.to_f64().unwrap_or(0.0);
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Round-trip every value through its 8-bit level.
pub fn quantize<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::lit(to_u8(v) as f64 / 255.0))
}

/// Write a `(1, 3, h, w)` or `(1, 1, h, w)` tensor as an 8-bit PNG.
pub fn save_png<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || (s.c != 3 && s.c != 1) {
        return Err(Error::dim("save_png", format!("expected one RGB or gray image, got {s}")));
    }
    let mut data = Vec::with_capacity(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                data.push(to_u8(t.at(0, c, y, x)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    enc.set_color(if s.c == 3 { ColorType::Rgb } else { ColorType::Grayscale });
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Sorted PNG files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
