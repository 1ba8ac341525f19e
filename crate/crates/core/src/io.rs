//! PGM (binary `P5` and ASCII `P2`, 8 or 16 bit) and PFM (`Pf`, single channel)
//! readers and writers.
//!
//! PGM writes round to the nearest integer and clamp to `[0, maxval]`. PFM
//! stores `f32`, so a write/read round trip is exact for values representable
//! in single precision.

use std::fs;
use std::path::Path;

use crate::error::{HbeError, Result};
use crate::image::ImageGrid;

fn parse_err(offset: usize, message: impl Into<String>) -> HbeError {
    HbeError::Parse {
        offset,
        message: message.into(),
    }
}

/// Header tokenizer that skips whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| parse_err(start, "header token is not ASCII"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        self.skip_space();
        let start = self.pos;
        let tok = self.token()?;
        tok.parse().map_err(|_| parse_err(start, format!("invalid {what} '{tok}'")))
    }

    /// Consumes the single whitespace byte that ends a binary header.
    fn end_of_header(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(parse_err(self.pos, "missing whitespace after header")),
        }
    }
}

fn dims(h: &mut Header) -> Result<(usize, usize)> {
    let at = h.pos;
    let w: usize = h.number("width")?;
    let ht: usize = h.number("height")?;
    if w == 0 || ht == 0 {
        return Err(parse_err(at, "image dimensions must be positive"));
    }
    if w.checked_mul(ht).is_none_or(|n| n > (1 << 31)) {
        return Err(parse_err(at, "image dimensions are too large"));
    }
    Ok((w, ht))
}

/// Parses PGM bytes. Values are returned on the native integer scale.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token()?;
    let ascii = match magic {
        "P5" => false,
        "P2" => true,
        other => return Err(parse_err(0, format!("not a PGM file (magic '{other}')"))),
    };
    let (w, ht) = dims(&mut h)?;
    let at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(at, format!("maxval {maxval} outside 1..=65535")));
    }
    let n = w * ht;
    let mut data = Vec::with_capacity(n);
    if ascii {
        for _ in 0..n {
            let at = h.pos;
            let v: u32 = h.number("sample")?;
            if v > maxval {
                return Err(parse_err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64);
        }
    } else {
        h.end_of_header()?;
        let bps = if maxval < 256 { 1 } else { 2 };
        let start = h.pos;
        let need = n * bps;
        if bytes.len() < start + need {
            return Err(parse_err(
                bytes.len(),
                format!("truncated pixel data: need {need} bytes, found {}", bytes.len() - start),
            ));
        }
        for i in 0..n {
            let v = if bps == 1 {
                bytes[start + i] as u32
            } else {
                u16::from_be_bytes([bytes[start + 2 * i], bytes[start + 2 * i + 1]]) as u32
            };
            if v > maxval {
                return Err(parse_err(start + i * bps, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64);
        }
    }
    ImageGrid::new(w, ht, data)
}

/// Encodes a binary PGM with the given `maxval` (≤ 255 gives 8-bit samples).
pub fn encode_pgm(image: &ImageGrid, maxval: u16) -> Result<Vec<u8>> {
    if maxval == 0 {
        return Err(HbeError::Argument("maxval must be positive".into()));
    }
    if !image.is_finite() {
        return Err(HbeError::Argument("cannot write non-finite values to PGM".into()));
    }
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
    for &v in image.data() {
        let q = v.round().clamp(0.0, maxval as f64) as u16;
        if maxval < 256 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

/// Parses a grayscale PFM. Rows are stored bottom to top.
pub fn decode_pfm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut h = Header { bytes, pos: 0 };
    match h.token()? {
        "Pf" => {}
        "PF" => return Err(parse_err(0, "color PFM is not supported")),
        other => return Err(parse_err(0, format!("not a PFM file (magic '{other}')"))),
    }
    let (w, ht) = dims(&mut h)?;
    let at = h.pos;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err(at, "scale must be non-zero"));
    }
    h.end_of_header()?;
    let little = scale < 0.0;
    let start = h.pos;
    let n = w * ht;
    if bytes.len() < start + 4 * n {
        return Err(parse_err(
            bytes.len(),
            format!("truncated pixel data: need {} bytes, found {}", 4 * n, bytes.len() - start),
        ));
    }
    let mut data = vec![0.0; n];
    for file_row in 0..ht {
        let row = ht - 1 - file_row;
        for c in 0..w {
            let off = start + 4 * (file_row * w + c);
            let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            data[row * w + c] = v as f64;
        }
    }
    ImageGrid::new(w, ht, data)
}

/// Little-endian PFM (`scale = -1`).
pub fn encode_pfm(image: &ImageGrid) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for row in (0..h).rev() {
        for &v in image.row(row) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Rounds every value to `f32`, the precision kept by PFM files.
pub fn to_f32_precision(image: &ImageGrid) -> ImageGrid {
    image.map(|v| v as f32 as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Pfm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "pgm" => Ok(ImageFormat::Pgm),
            Some(e) if e == "pfm" => Ok(ImageFormat::Pfm),
            _ => Err(HbeError::Argument(format!(
                "cannot infer image format of '{}' (expected .pgm or .pfm)",
                path.display()
            ))),
        }
    }
}

/// Reads a PGM or PFM file, chosen by content.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        decode_pfm(&bytes)
    } else {
        decode_pgm(&bytes)
    }
}

/// Writes by extension. PGM uses 8-bit samples when every rounded value fits
/// in `0..=255` and 16-bit samples otherwise.
pub fn write_image(path: impl AsRef<Path>, image: &ImageGrid) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Pfm => encode_pfm(image),
        ImageFormat::Pgm => {
            let (_, hi) = image.min_max();
            let maxval = if hi.round() <= 255.0 { 255 } else { 65535 };
            encode_pgm(image, maxval)?
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a PGM with an explicit `maxval`.
pub fn write_pgm(path: impl AsRef<Path>, image: &ImageGrid, maxval: u16) -> Result<()> {
    fs::write(path.as_ref(), encode_pgm(image, maxval)?)?;
    Ok(())
}

/// Reads a mask stored as an image; any non-zero sample counts as observed.
/// Samples are normalized by the file's maximum so fractional masks survive.
pub fn read_mask(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let img = read_image(path)?;
    let (_, hi) = img.min_max();
    if hi <= 0.0 {
        return Ok(img.map(|_| 0.0));
    }
    Ok(img.map(|v| (v / hi).clamp(0.0, 1.0)))
}

/// Masks are stored as 0/255 8-bit PGM.
pub fn write_mask(path: impl AsRef<Path>, mask: &ImageGrid) -> Result<()> {
    write_pgm(path, &mask.map(|m| m * 255.0), 255)
}
