//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image, interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub data: Vec<u8>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "PNM",
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(format!("expected {what} at byte {start}")))
    }
}

impl Image {
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(format_err("expected P5 or P6 magic")),
        };
        let mut h = Header { bytes, pos: 2 };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(format_err(format!("empty image {width}x{height}")));
        }
        if maxval != 255 {
            return Err(format_err(format!("maxval {maxval} unsupported, expected 255")));
        }
        if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(format_err("missing whitespace after maxval"));
        }
        let payload = &bytes[h.pos + 1..];
        let expected = width * height * channels;
        if payload.len() < expected {
            return Err(format_err(format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(format_err(format!(
                "payload has {} trailing bytes after the expected {expected}",
                payload.len() - expected
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data: payload.to_vec(),
        })
    }

    /// Canonical header `P6\n<w> <h>\n255\n` (or P5) followed by the payload.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// `(1, channels, H, W)` with values `k / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let c = self.channels;
        Tensor::from_fn([1, c, self.height, self.width], |[_, ch, y, x]| {
            f64::from(self.data[(y * self.width + x) * c + ch]) / 255.0
        })
    }

    /// Quantizes a `(1, C, H, W)` tensor with `C` of 1 or 3, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let [n, c, h, w] = t.dims();
        if n != 1 || (c != 1 && c != 3) {
            return Err(Error::shape("write_pnm", format!("expected (1, 1|3, H, W), got {:?}", t.dims())));
        }
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.at(0, ch, y, x);
                    if !v.is_finite() {
                        return Err(Error::NonFinite { op: "write_pnm" });
                    }
                    data[(y * w + x) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Ok(Image {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }
}

/// Reads a P6 file as `(1, 3, H, W)` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = Image::read(path)?;
    if img.channels != 3 {
        return Err(format_err(format!("{}: expected P6, found P5", path.display())));
    }
    Ok(img.to_tensor())
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    if t.dims()[1] != 3 {
        return Err(Error::shape("write_ppm", format!("expected 3 channels, got {:?}", t.dims())));
    }
    Image::from_tensor(t)?.write(path)
}

/// Writes an 8-bit label map as P5.
pub fn write_pgm(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} labels for {width}x{height}", labels.len())));
    }
    Image {
        width,
        height,
        channels: 1,
        data: labels.to_vec(),
    }
    .write(path)
}

/// Reflect-pads `(N, C, H, W)` at the bottom and right to `(out_h, out_w)`,
/// mirroring without repeating the edge pixel.
pub fn reflect_pad(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.dims();
    if out_h < h || out_w < w {
        return Err(Error::shape("reflect_pad", format!("cannot pad {h}x{w} down to {out_h}x{out_w}")));
    }
    let reflect = |i: usize, len: usize| -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    Ok(Tensor::from_fn([n, c, out_h, out_w], |[b, ch, y, x]| {
        t.at(b, ch, reflect(y, h), reflect(x, w))
    }))
}
