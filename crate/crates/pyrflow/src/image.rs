//! Binary PGM (P5) / PPM (P6) input and output.
//!
//! Pixels are stored as f32 in [0, 1] (byte value / 255). Only maxval 255 is
//! accepted; other formats are a documented preprocessing step outside this
//! crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Luma weights for RGB → grayscale conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Raster image with interleaved channels, values normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image::new(width, height, channels, vec![0.0; width * height * channels]).unwrap()
    }

    /// Grayscale view; RGB collapses with the standard luma weights.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| px[0] * LUMA[0] + px[1] * LUMA[1] + px[2] * LUMA[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Planar 1×C×H×W tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ci = i / (h * w);
            let p = i % (h * w);
            self.data[p * c + ci]
        })
    }

    /// Builds an image from a planar 1×C×H×W tensor, clamping to [0, 1].
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Image> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || (c != 1 && c != 3) {
            return Err(Error::Shape(format!(
                "expected 1x(1|3)xHxW tensor, got {:?}",
                t.shape()
            )));
        }
        let mut data = vec![0.0f32; w * h * c];
        for ci in 0..c {
            for p in 0..h * w {
                data[p * c + ci] = t.data()[ci * h * w + p].clamp(0.0, 1.0);
            }
        }
        Image::new(w, h, c, data)
    }
}

/// Parses one whitespace-delimited ASCII token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    let n = bytes.len();
    while *pos < n {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < n && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < n && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

/// Reads a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| malformed("missing magic"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::UnsupportedMagic {
                path: path.to_path_buf(),
                found: other.to_string(),
            })
        }
    };
    let parse_dim = |tok: Option<String>, what: &str| -> Result<usize> {
        tok.ok_or_else(|| malformed(&format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|_| malformed(&format!("non-numeric {what}")))
    };
    let width = parse_dim(next_token(&bytes, &mut pos), "width")?;
    let height = parse_dim(next_token(&bytes, &mut pos), "height")?;
    let maxval = parse_dim(next_token(&bytes, &mut pos), "maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed("zero width or height"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval: maxval as u32,
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing separator before payload"));
    }
    pos += 1;
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(width, height, channels, data)
}

/// Writes a binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height)
        .map_err(|e| Error::io(path, e))?;
    out.extend(
        img.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
