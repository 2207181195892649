use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::image::ComplexImage;

pub const IMAGE_MAGIC: &[u8; 4] = b"IMG1";
const HEADER_LEN: usize = 16;

/// Writes `magic, u32 width, u32 height, u32 reserved (0)` followed by
/// row-major `f64 (re, im)` pairs, all little-endian.
pub fn write_image(path: &Path, img: &ComplexImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(HEADER_LEN + 16 * img.len());
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in img.values() {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<ComplexImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[0..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "missing IMG1 header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (w, h) = (u32_at(4), u32_at(8));
    let expected = HEADER_LEN + 16 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {}x{}, found {}", expected, w, h, bytes.len()),
        ));
    }
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let values = (0..w * h)
        .map(|i| Complex64::new(f64_at(HEADER_LEN + 16 * i), f64_at(HEADER_LEN + 16 * i + 8)))
        .collect();
    ComplexImage::from_values(w, h, values).map_err(|e| Error::format(path, e.to_string()))
}
