//! Raw 8-bit NetPBM (P5 grayscale, P6 RGB) reading and writing.

use std::path::Path;

use crate::error::{BicdError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("malformed header: bad {what}"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let fail = |msg: String| BicdError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(fail("malformed header: expected magic P5 or P6".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width").map_err(fail)?;
    let height = h.number("height").map_err(fail)?;
    let maxval = h.number("maxval").map_err(fail)?;
    if maxval != 255 {
        return Err(fail(format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(fail("malformed header: missing separator before raster".into())),
    }
    let need = width * height * channels;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(fail(format!("truncated raster: {} of {need} bytes", raster.len())));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: raster[..need].to_vec(),
    })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| BicdError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(BicdError::Format {
            path: path.to_path_buf(),
            msg: format!("cannot encode {} channels", img.channels),
        });
    }
    std::fs::write(path, encode(img)).map_err(|e| BicdError::io(path, e))
}
