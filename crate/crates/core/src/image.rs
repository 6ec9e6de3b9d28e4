//! 8-bit PGM (P5) and PPM (P6) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Converts a `[1, H, W]` (or `[H, W]`) tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (height, width) = (s[s.len() - 2], s[s.len() - 1]);
        let pixels = t
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| {
            self.pixels[i] as f64 / 255.0
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (header, offset) = parse_header(bytes, b"P5", origin)?;
        let n = header.width * header.height;
        let body = &bytes[offset..];
        if body.len() < n {
            return Err(bad(
                origin,
                format!("expected {n} pixel bytes, found {}", body.len()),
            ));
        }
        let pixels = if header.maxval == 255 {
            body[..n].to_vec()
        } else {
            body[..n]
                .iter()
                .map(|&p| ((p as f64 / header.maxval as f64) * 255.0).round() as u8)
                .collect()
        };
        Ok(GrayImage {
            width: header.width,
            height: header.height,
            pixels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(g: &GrayImage) -> Self {
        RgbImage {
            width: g.width,
            height: g.height,
            pixels: g.pixels.iter().map(|&p| [p, p, p]).collect(),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Circle outline via the midpoint algorithm.
    pub fn circle(&mut self, cx: f64, cy: f64, radius: i64, color: [u8; 3]) {
        let (cx, cy) = (cx.round() as i64, cy.round() as i64);
        let (mut x, mut y, mut err) = (radius, 0i64, 1 - radius);
        while x >= y {
            for (dx, dy) in [
                (x, y),
                (y, x),
                (-y, x),
                (-x, y),
                (-x, -y),
                (-y, -x),
                (y, -x),
                (x, -y),
            ] {
                self.put(cx + dx, cy + dy, color);
            }
            y += 1;
            if err < 0 {
                err += 2 * y + 1;
            } else {
                x -= 1;
                err += 2 * (y - x) + 1;
            }
        }
    }

    /// Straight segment sampled at sub-pixel spacing.
    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()) * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                color,
            );
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (header, offset) = parse_header(bytes, b"P6", origin)?;
        if header.maxval != 255 {
            return Err(bad(origin, "only 8-bit PPM is supported".into()));
        }
        let n = header.width * header.height;
        let body = &bytes[offset..];
        if body.len() < 3 * n {
            return Err(bad(
                origin,
                format!("expected {} pixel bytes, found {}", 3 * n, body.len()),
            ));
        }
        Ok(RgbImage {
            width: header.width,
            height: header.height,
            pixels: body[..3 * n]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        })
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
}

fn bad(origin: &Path, reason: String) -> Error {
    Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        reason,
    }
}

/// Parses a binary netpbm header; returns it with the offset of the pixel data.
fn parse_header(bytes: &[u8], magic: &[u8], origin: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(
            origin,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(origin, "malformed header".into()))?;
    }
    // exactly one whitespace byte separates the header from the data
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(origin, "malformed header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad(
            origin,
            format!("unsupported dimensions {width}x{height} maxval {maxval}"),
        ));
    }
    Ok((
        Header {
            width,
            height,
            maxval,
        },
        pos + 1,
    ))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GrayImage::decode(&bytes, path)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    std::fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    std::fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 20, 30, 255, 7],
        };
        let bytes = img.encode();
        assert_eq!(GrayImage::decode(&bytes, Path::new("x")).unwrap(), img);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(GrayImage::decode(&commented, Path::new("x")).unwrap(), img);
        assert!(GrayImage::decode(b"P6\n1 1\n255\n\0\0\0", Path::new("x")).is_err());
        assert!(GrayImage::decode(b"P5\n3 2\n255\n\0", Path::new("x")).is_err());
    }

    #[test]
    fn tensor_conversion_is_exact_on_byte_grid() {
        let img = GrayImage {
            width: 2,
            height: 2,
            pixels: vec![0, 1, 128, 255],
        };
        assert_eq!(GrayImage::from_tensor(&img.to_tensor()), img);
    }

    #[test]
    fn circle_stays_on_radius() {
        let mut c = RgbImage::from_gray(&GrayImage {
            width: 21,
            height: 21,
            pixels: vec![0; 441],
        });
        c.circle(10.0, 10.0, 5, [0, 255, 0]);
        for y in 0..21 {
            for x in 0..21 {
                if c.get(x, y) == [0, 255, 0] {
                    let r = ((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)).sqrt();
                    assert!((r - 5.0).abs() < 1.0);
                }
            }
        }
        assert_eq!(c.get(15, 10), [0, 255, 0]);
    }
}
