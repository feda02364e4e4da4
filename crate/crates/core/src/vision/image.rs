use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image dimensions {width}×{height} must be positive")));
        }
        if pixels.len() != width * height * Self::CHANNELS {
            return Err(Error::Input(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * Self::CHANNELS,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, pixels }
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

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Parses a binary PPM (`P6`, maxval 255).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let magic = ppm_token(&mut reader)?;
        if magic != "P6" {
            return Err(Error::Input(format!("not a binary PPM (magic {magic:?})")));
        }
        let width = ppm_number(&mut reader, "width")?;
        let height = ppm_number(&mut reader, "height")?;
        let maxval = ppm_number(&mut reader, "maxval")?;
        if maxval != 255 {
            return Err(Error::Input(format!("PPM maxval {maxval} unsupported (need 255)")));
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Input("PPM dimensions overflow".into()))?;
        let mut pixels = Vec::new();
        reader
            .take(need as u64)
            .read_to_end(&mut pixels)
            .map_err(|e| Error::Input(format!("PPM read: {e}")))?;
        if pixels.len() != need {
            return Err(Error::Input(format!("PPM truncated: {} of {need} pixel bytes", pixels.len())));
        }
        Image::new(width, height, pixels)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Next whitespace-delimited header token, skipping `#` comments. Consumes
/// exactly one whitespace byte after the token, as the format requires
/// before the raster.
fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(|e| Error::Input(format!("PPM header: {e}")))?;
        if n == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)
                .map_err(|e| Error::Input(format!("PPM header: {e}")))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
        if tok.len() > 16 {
            return Err(Error::Input("PPM header token too long".into()));
        }
    }
    if tok.is_empty() {
        return Err(Error::Input("PPM header ended early".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Input("PPM header is not ASCII".into()))
}

fn ppm_number<R: BufRead>(r: &mut R, field: &str) -> Result<usize> {
    let tok = ppm_token(r)?;
    tok.parse()
        .map_err(|_| Error::Input(format!("PPM {field} {tok:?} is not a number")))
}
