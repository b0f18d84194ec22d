//! Binary PGM (`P5`) / PPM (`P6`) and the lossless `EEMF` container
//! (magic, u32-LE width/height/channels, f64-LE pixels).

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"EEMF";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "image",
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad("expected a number in the header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))
    }
}

/// Decode an 8-bit `P5` or `P6` image.
pub fn read_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("only 8-bit images are supported (maxval {maxval})")));
    }
    // exactly one whitespace byte separates header and payload
    if !bytes.get(h.pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval"));
    }
    let start = h.pos + 1;
    let len = width * height * channels;
    let payload = bytes
        .get(start..start + len)
        .ok_or_else(|| bad(format!("truncated payload: need {len} bytes, have {}", bytes.len().saturating_sub(start))))?;
    Image::new(width, height, channels, payload.iter().map(|&b| b as f64).collect())
}

/// Encode as `P5` (grayscale) or `P6` (RGB).
pub fn write_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_u8());
    out
}

pub fn read_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.get(..4) != Some(RAW_MAGIC) {
        return Err(bad("expected EEMF magic"));
    }
    let word = |i: usize| -> Result<usize> {
        let b = bytes.get(4 + 4 * i..8 + 4 * i).ok_or_else(|| bad("truncated EEMF header"))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let (width, height, channels) = (word(0)?, word(1)?, word(2)?);
    let len = width * height * channels;
    let payload = bytes.get(16..16 + 8 * len).ok_or_else(|| bad("truncated EEMF payload"))?;
    if bytes.len() != 16 + 8 * len {
        return Err(bad("trailing bytes after EEMF payload"));
    }
    let pixels = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Image::new(width, height, channels, pixels)
}

pub fn write_raw(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * image.pixels().len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [image.width(), image.height(), image.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in image.pixels() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Read any supported format, detected from the magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    let image = if bytes.starts_with(RAW_MAGIC) {
        read_raw(&bytes)
    } else {
        read_pnm(&bytes)
    };
    image.map_err(|e| e.context(path.display().to_string()))
}

/// Write by extension: `.eemf` is lossless, anything else 8-bit PGM/PPM.
pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("eemf"));
    let bytes = if raw { write_raw(image) } else { write_pnm(image) };
    fs::write(path, bytes).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}
