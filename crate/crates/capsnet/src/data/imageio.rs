//! Binary PPM (P6) / PGM (P5) codecs, bilinear resizing, and the packed
//! CAPD dataset container.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{ImageDataset, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded raster: channel-major planes, values still in `[0, 255]` bytes.
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Rescale bytes to `[0, 1]` by dividing by 255.
pub fn rescale_u8(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Decode a binary PPM/PGM file (maxval up to 255).
pub fn read_pnm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    if bytes.len() < 2 {
        return Err("file too short for a PNM header".into());
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(format!(
                "unsupported magic {:?}; only binary PPM (P6) and PGM (P5) are handled",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = parse_pnm_int(bytes, &mut pos)?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {} unsupported (need 1..=255)", maxval));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let expected = width * height * channels;
    let payload = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| format!("payload truncated: need {} pixel bytes", expected))?;
    // Interleaved -> channel-major planes.
    let mut pixels = vec![0u8; expected];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                pixels[c * height * width + y * width + x] =
                    payload[(y * width + x) * channels + c];
            }
        }
    }
    Ok(RawImage {
        channels,
        height,
        width,
        pixels,
    })
}

fn parse_pnm_int(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    // Skip whitespace and '#' comments.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(b) = bytes.get(*pos) {
                    *pos += 1;
                    if *b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err("header ended early".into()),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos == start {
        return Err("expected an integer in header".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| "non-utf8 header".to_string())?
        .parse()
        .map_err(|e| format!("bad header integer: {}", e))
}

/// Write a binary PPM (3 channels) or PGM (1 channel) from channel-major
/// planes of bytes.
pub fn write_pnm(path: &Path, channels: usize, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    assert!(channels == 1 || channels == 3, "PNM supports 1 or 3 channels");
    assert_eq!(pixels.len(), channels * height * width);
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{}\n{} {}\n255\n", magic, width, height).into_bytes();
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                out.push(pixels[c * height * width + y * width + x]);
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of channel-major `[0,1]` planes to a square side.
/// Source coordinates use half-pixel centers with clamp-to-edge taps.
pub fn bilinear_resize(
    src: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    out_side: usize,
) -> Vec<f32> {
    if height == out_side && width == out_side {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; channels * out_side * out_side];
    let sy_scale = height as f64 / out_side as f64;
    let sx_scale = width as f64 / out_side as f64;
    for c in 0..channels {
        let plane = &src[c * height * width..(c + 1) * height * width];
        for oy in 0..out_side {
            let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (height - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(height - 1);
            let wy = (sy - y0 as f64) as f32;
            for ox in 0..out_side {
                let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (width - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(width - 1);
                let wx = (sx - x0 as f64) as f32;
                let top = plane[y0 * width + x0] * (1.0 - wx) + plane[y0 * width + x1] * wx;
                let bottom = plane[y1 * width + x0] * (1.0 - wx) + plane[y1 * width + x1] * wx;
                out[c * out_side * out_side + oy * out_side + ox] =
                    top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

const CAPD_MAGIC: &[u8; 4] = b"CAPD";
const CAPD_VERSION: u16 = 1;
const CAPD: &str = "CAPD dataset";

/// Write an image dataset into the packed container:
/// magic "CAPD" | version u16 LE | n_samples u32 LE | channels u8 |
/// side u16 LE | n_classes u16 LE | per sample: label u16 LE + pixel bytes.
pub fn write_packed(dataset: &ImageDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CAPD_MAGIC);
    out.extend_from_slice(&CAPD_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.samples.len() as u32).to_le_bytes());
    out.push(dataset.channels as u8);
    out.extend_from_slice(&(dataset.side as u16).to_le_bytes());
    out.extend_from_slice(&(dataset.class_names.len() as u16).to_le_bytes());
    for sample in &dataset.samples {
        out.extend_from_slice(&(sample.label as u16).to_le_bytes());
        for &p in sample.pixels.data() {
            out.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read the packed container back; pixels come out rescaled to `[0,1]`.
pub fn read_packed(path: &Path) -> Result<ImageDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(&bytes);
    let magic = r.take(4, CAPD)?;
    if magic != CAPD_MAGIC {
        return Err(Error::BadMagic { container: CAPD });
    }
    let version = r.u16(CAPD)?;
    if version != CAPD_VERSION {
        return Err(Error::UnsupportedVersion {
            container: CAPD,
            found: version,
            expected: CAPD_VERSION,
        });
    }
    let n_samples = r.u32(CAPD)? as usize;
    let channels = r.take(1, CAPD)?[0] as usize;
    let side = r.u16(CAPD)? as usize;
    let n_classes = r.u16(CAPD)? as usize;
    if channels == 0 || side == 0 || n_classes == 0 {
        return Err(Error::LengthMismatch {
            container: CAPD,
            reason: format!(
                "degenerate header: channels={} side={} classes={}",
                channels, side, n_classes
            ),
        });
    }
    let class_names: Vec<String> = (0..n_classes).map(|i| format!("class_{}", i)).collect();
    let pixel_len = channels * side * side;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let label = r.u16(CAPD)? as usize;
        if label >= n_classes {
            return Err(Error::LengthMismatch {
                container: CAPD,
                reason: format!("label {} exceeds declared class count {}", label, n_classes),
            });
        }
        let pixels = r.take(pixel_len, CAPD)?;
        samples.push(LabeledImage {
            pixels: Tensor::from_vec(vec![channels, side, side], rescale_u8(pixels))?,
            label,
            class_name: class_names[label].clone(),
        });
    }
    if r.remaining() != 0 {
        return Err(Error::LengthMismatch {
            container: CAPD,
            reason: format!("{} trailing bytes after declared payload", r.remaining()),
        });
    }
    Ok(ImageDataset {
        samples,
        class_names,
        channels,
        side,
    })
}

/// Byte cursor with truncation errors that name expected vs found counts.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, container: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                container,
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u16(&mut self, container: &'static str) -> Result<u16> {
        let b = self.take(2, container)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, container: &'static str) -> Result<u32> {
        let b = self.take(4, container)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self, container: &'static str) -> Result<u64> {
        let b = self.take(8, container)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self, container: &'static str) -> Result<f32> {
        let b = self.take(4, container)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
