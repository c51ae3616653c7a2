//! 8-bit grayscale images and the binary PGM (P5) format.

use std::fs;
use std::io;
use std::path::Path;

/// Row-major 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("not a binary PGM (expected P5 magic)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (only 8-bit PGM is supported)")]
    MaxVal(u32),
    #[error("PGM data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width * height).then_some(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Rotates 90° counterclockwise: the top row becomes the left column,
    /// so source `(x, y)` lands at `(y, width - 1 - x)`.
    pub fn rotate_ccw(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut out = GrayImage::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                out.set(y, w - 1 - x, self.get(x, y));
            }
        }
        out
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut cursor = HeaderCursor { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(PgmError::BadMagic);
        }
        cursor.pos = 2;
        let width = cursor.next_uint()?;
        let height = cursor.next_uint()?;
        let maxval = cursor.next_uint()?;
        if maxval == 0 || maxval > 255 {
            return Err(PgmError::MaxVal(maxval as u32));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => return Err(PgmError::Header("missing separator before raster".into())),
        }
        let expected = width * height;
        let data = &bytes[cursor.pos..];
        if data.len() < expected {
            return Err(PgmError::Truncated {
                expected,
                found: data.len(),
            });
        }
        let mut pixels = data[..expected].to_vec();
        if maxval != 255 {
            for p in &mut pixels {
                *p = ((*p as usize * 255 + maxval / 2) / maxval).min(255) as u8;
            }
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.encode_pgm())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, PgmError> {
        GrayImage::decode_pgm(&fs::read(path)?)
    }
}

/// Reads only the header of a PGM file and returns `(width, height)`.
pub fn pgm_dimensions(path: &Path) -> Result<(usize, usize), PgmError> {
    let bytes = fs::read(path)?;
    let img = GrayImage::decode_pgm(&bytes)?;
    Ok((img.width, img.height))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_uint(&mut self) -> Result<usize, PgmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::Header(format!("expected a number at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Header(format!("number too large at byte {start}")))
    }
}
