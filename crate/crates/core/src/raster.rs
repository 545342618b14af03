//! Netpbm rasters (PGM/PPM, ASCII and binary) and tile crops.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved samples, `channels` per pixel (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u8, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || maxval == 0 {
            return Err(Error::Shape(format!(
                "raster needs 1 or 3 channels and a positive maxval, got {channels} and {maxval}"
            )));
        }
        let expected = width as usize * height as usize * usize::from(channels);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} raster needs {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::Shape(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval,
            data,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u16] {
        let c = usize::from(self.channels);
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut p = Parser { bytes, pos: 0 };
        let magic = p.take(2).ok_or_else(|| Error::format(origin, "truncated header"))?;
        let (channels, binary) = match magic {
            b"P2" => (1, false),
            b"P3" => (3, false),
            b"P5" => (1, true),
            b"P6" => (3, true),
            _ => return Err(Error::format(origin, "not a PGM/PPM file")),
        };
        let mut header = [0u32; 3];
        for h in &mut header {
            *h = p.number().ok_or_else(|| Error::format(origin, "malformed header"))?;
        }
        let [width, height, maxval] = header;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::format(origin, format!("unsupported header {width}x{height} maxval {maxval}")));
        }
        let count = width as usize * height as usize * channels as usize;
        let data = if binary {
            // Exactly one whitespace byte separates the header from the samples.
            p.pos += 1;
            let wide = maxval > 255;
            let raw = p
                .take(count * if wide { 2 } else { 1 })
                .ok_or_else(|| Error::format(origin, "truncated pixel data"))?;
            if wide {
                raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
            } else {
                raw.iter().map(|&b| u16::from(b)).collect()
            }
        } else {
            (0..count)
                .map(|_| {
                    p.number()
                        .and_then(|v| u16::try_from(v).ok())
                        .ok_or_else(|| Error::format(origin, "malformed sample"))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Raster::new(width, height, channels, maxval as u16, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Binary encoding (P5 or P6).
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        } else {
            out.extend(self.data.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<u32> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Reads only the dimensions from a PNM header.
pub fn read_dimensions(path: &Path) -> Result<(u32, u32)> {
    use std::io::Read;
    let mut head = Vec::with_capacity(256);
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .take(4096)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let mut p = Parser { bytes: &head, pos: 0 };
    if !matches!(p.take(2), Some(b"P2" | b"P3" | b"P5" | b"P6")) {
        return Err(Error::format(path, "not a PGM/PPM file"));
    }
    let w = p.number().ok_or_else(|| Error::format(path, "malformed header"))?;
    let h = p.number().ok_or_else(|| Error::format(path, "malformed header"))?;
    Ok((w, h))
}

/// Exact `side × side` crop with its top-left corner at `(x, y)`.
pub fn extract_tile_pixels(image: &Raster, x: u32, y: u32, side: u32) -> Result<Raster> {
    let fits = |o: u32, len: u32| o.checked_add(side).is_some_and(|end| end <= len);
    if side == 0 || !fits(x, image.width) || !fits(y, image.height) {
        return Err(Error::Shape(format!(
            "tile ({x}, {y}) of side {side} leaves the {}x{} image",
            image.width, image.height
        )));
    }
    let c = usize::from(image.channels);
    let mut data = Vec::with_capacity(side as usize * side as usize * c);
    for row in y..y + side {
        let start = (row as usize * image.width as usize + x as usize) * c;
        data.extend_from_slice(&image.data[start..start + side as usize * c]);
    }
    Raster::new(side, side, image.channels, image.maxval, data)
}

pub const HISTOGRAM_BINS: usize = 8;

/// Hand-crafted tile descriptor: per-channel mean and standard deviation,
/// an intensity histogram and mean absolute horizontal and vertical
/// gradients, all on samples scaled to `[0, 1]`.
pub fn tile_descriptor(tile: &Raster) -> Vec<f64> {
    let c = usize::from(tile.channels);
    let n = (tile.width as usize * tile.height as usize) as f64;
    let scale = f64::from(tile.maxval);
    let mut out = Vec::with_capacity(2 * c + HISTOGRAM_BINS + 2);
    for ch in 0..c {
        let vals = tile.data.iter().skip(ch).step_by(c).map(|&v| f64::from(v) / scale);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        out.push(mean);
        out.push(var.sqrt());
    }
    let intensity: Vec<f64> = tile
        .data
        .chunks_exact(c)
        .map(|px| px.iter().map(|&v| f64::from(v)).sum::<f64>() / (c as f64 * scale))
        .collect();
    let mut hist = [0.0; HISTOGRAM_BINS];
    for &v in &intensity {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[bin] += 1.0 / n;
    }
    out.extend_from_slice(&hist);
    let (w, h) = (tile.width as usize, tile.height as usize);
    let mut gx = 0.0;
    let mut gy = 0.0;
    for yy in 0..h {
        for xx in 0..w {
            let v = intensity[yy * w + xx];
            if xx + 1 < w {
                gx += (intensity[yy * w + xx + 1] - v).abs();
            }
            if yy + 1 < h {
                gy += (intensity[(yy + 1) * w + xx] - v).abs();
            }
        }
    }
    out.push(if w > 1 { gx / ((w - 1) * h) as f64 } else { 0.0 });
    out.push(if h > 1 { gy / (w * (h - 1)) as f64 } else { 0.0 });
    out
}
