//! 8-bit raster images and binary PGM/PPM (P5/P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{format_err, Error, Result};

/// Interleaved 8-bit image with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(format_err!(
                "image dimensions must be positive, got {width}x{height}"
            ));
        }
        if width * height * channels != data.len() {
            return Err(format_err!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            ));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Gray value at (x, y); panics on colour images.
    pub fn at(&self, x: usize, y: usize) -> u8 {
        assert_eq!(self.channels, 1);
        self.data[y * self.width + x]
    }

    /// Encodes as P5 (gray) or P6 (RGB).
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format_err!("unsupported PNM magic {other:?}")),
        };
        let width = parse_num(&next_token(bytes, &mut pos)?)?;
        let height = parse_num(&next_token(bytes, &mut pos)?)?;
        let maxval = parse_num(&next_token(bytes, &mut pos)?)?;
        if maxval != 255 {
            return Err(format_err!(
                "only 8-bit PNM (maxval 255) is supported, got {maxval}"
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * channels;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != need {
            return Err(format_err!(
                "PNM raster holds {} bytes, expected {need}",
                raster.len()
            ));
        }
        Self::new(width, height, channels, raster.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_pnm(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm()).map_err(|e| Error::file(path, e))
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format_err!("truncated PNM header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err(format_err!("truncated PNM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| format_err!("bad number {tok:?} in PNM header"))
}
