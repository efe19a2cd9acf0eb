//! HDR image buffers with portable-float-map I/O and 8-bit PNG previews.

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::math::Vec3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad pfm: {0}")]
    BadPfm(&'static str),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

/// Row-major RGB float image, (0, 0) top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec3>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> ImageBuffer {
        ImageBuffer {
            width,
            height,
            pixels: vec![Vec3::ZERO; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> Vec3 {
        self.pixels[y * self.width + x]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut Vec3 {
        &mut self.pixels[y * self.width + x]
    }

    /// Color PFM ("PF", scale -1 for little-endian), rows bottom-to-top.
    pub fn write_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let p = self.at(x, y);
                for c in [p.x, p.y, p.z] {
                    out.write_all(&(c as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<ImageBuffer, ImageError> {
        Self::decode_pfm(&std::fs::read(path)?)
    }

    /// Parses a color or grayscale PFM from raw bytes.
    pub fn decode_pfm(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<Vec<u8>, ImageError> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            // Every header token, including the last, is terminated by
            // exactly one whitespace byte.
            if start == pos || pos >= bytes.len() {
                return Err(ImageError::BadPfm("truncated header"));
            }
            pos += 1;
            Ok(bytes[start..pos - 1].to_vec())
        };
        let kind = token(bytes)?;
        let color = match kind.as_slice() {
            b"PF" => true,
            b"Pf" => false,
            _ => return Err(ImageError::BadPfm("bad signature")),
        };
        let parse_dim = |t: Vec<u8>| -> Result<usize, ImageError> {
            let s = std::str::from_utf8(&t).map_err(|_| ImageError::BadPfm("bad dimension"))?;
            let v: usize = s.parse().map_err(|_| ImageError::BadPfm("bad dimension"))?;
            if v == 0 || v > 1 << 14 {
                return Err(ImageError::BadPfm("dimension out of range"));
            }
            Ok(v)
        };
        let width = parse_dim(token(bytes)?)?;
        let height = parse_dim(token(bytes)?)?;
        let scale: f64 = std::str::from_utf8(&token(bytes)?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(ImageError::BadPfm("bad scale"))?;
        if !(scale.is_finite() && scale != 0.0) {
            return Err(ImageError::BadPfm("bad scale"));
        }
        let little_endian = scale < 0.0;
        let channels = if color { 3 } else { 1 };
        let expect = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels * 4))
            .ok_or(ImageError::BadPfm("dimension overflow"))?;
        let data = &bytes[pos..];
        if data.len() != expect {
            return Err(ImageError::BadPfm("payload size mismatch"));
        }
        let mut img = ImageBuffer::new(width, height);
        let read = |i: usize| -> f64 {
            let b: [u8; 4] = data[i * 4..i * 4 + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            v as f64 * scale.abs()
        };
        for row in 0..height {
            let y = height - 1 - row; // stored bottom-to-top
            for x in 0..width {
                let base = (row * width + x) * channels;
                let p = if color {
                    crate::math::vec3(read(base), read(base + 1), read(base + 2))
                } else {
                    Vec3::ONE * read(base)
                };
                *img.at_mut(x, y) = p;
            }
        }
        Ok(img)
    }

    /// 8-bit preview: clamp to [0, 1], gamma 1/2.2.
    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for p in &self.pixels {
            for c in [p.x, p.y, p.z] {
                let v = c.clamp(0.0, 1.0).powf(1.0 / 2.2);
                data.push((v * 255.0 + 0.5) as u8);
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer size matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Grayscale float map scaled into an RGB buffer (for probe output).
    pub fn from_scalar_map(map: &[f64], width: usize, height: usize) -> ImageBuffer {
        assert_eq!(map.len(), width * height);
        let mut img = ImageBuffer::new(width, height);
        for (p, v) in img.pixels.iter_mut().zip(map) {
            *p = Vec3::ONE * *v;
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pfm_round_trip_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut img = ImageBuffer::new(17, 9);
        for p in img.pixels.iter_mut() {
            // f32-representable values so the round trip is exact.
            *p = vec3(
                rng.gen::<f32>() as f64 * 100.0f32 as f64,
                rng.gen::<f32>() as f64,
                rng.gen::<f32>() as f64 * 1e-3f32 as f64,
            );
        }
        // Snap to f32 like the writer does.
        for p in img.pixels.iter_mut() {
            *p = vec3(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        img.write_pfm(&path).unwrap();
        let back = ImageBuffer::read_pfm(&path).unwrap();
        assert_eq!(img, back);
        // Writing again produces identical bytes.
        let path2 = dir.path().join("t2.pfm");
        back.write_pfm(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn pfm_orientation() {
        // 1x2 image: top pixel red, bottom pixel green. Bottom row is
        // stored first.
        let mut img = ImageBuffer::new(1, 2);
        *img.at_mut(0, 0) = vec3(1.0, 0.0, 0.0);
        *img.at_mut(0, 1) = vec3(0.0, 1.0, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.pfm");
        img.write_pfm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = b"PF\n1 2\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header_len..header_len + 4].try_into().unwrap());
        let second =
            f32::from_le_bytes(bytes[header_len + 4..header_len + 8].try_into().unwrap());
        assert_eq!(first, 0.0); // bottom pixel, red channel
        assert_eq!(second, 1.0); // bottom pixel, green channel
    }

    #[test]
    fn pfm_golden_fixture() {
        // Checked-in 2x2 file written by an external tool: top row red,
        // green; bottom row blue, white. Guards against format drift.
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures/golden-2x2.pfm");
        let img = ImageBuffer::read_pfm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.at(0, 0), vec3(1.0, 0.0, 0.0));
        assert_eq!(img.at(1, 0), vec3(0.0, 1.0, 0.0));
        assert_eq!(img.at(0, 1), vec3(0.0, 0.0, 1.0));
        assert_eq!(img.at(1, 1), vec3(1.0, 1.0, 1.0));
        // Our writer reproduces the file byte for byte.
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("g.pfm");
        img.write_pfm(&out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn pfm_rejects_malformed() {
        assert!(ImageBuffer::decode_pfm(b"").is_err());
        assert!(ImageBuffer::decode_pfm(b"P6\n1 1\n-1.0\n").is_err());
        assert!(ImageBuffer::decode_pfm(b"PF\n1 1\n-1.0\n\x00\x00").is_err());
        assert!(ImageBuffer::decode_pfm(b"PF\n0 1\n-1.0\n").is_err());
        // Payload longer than declared.
        let mut ok = b"Pf\n1 1\n-1.0\n".to_vec();
        ok.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(ImageBuffer::decode_pfm(&ok).is_ok());
        ok.push(0);
        assert!(ImageBuffer::decode_pfm(&ok).is_err());
    }

    #[test]
    fn pfm_big_endian_and_scale() {
        let mut bytes = b"Pf\n2 1\n2.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        let img = ImageBuffer::decode_pfm(&bytes).unwrap();
        assert_eq!(img.at(0, 0).x, 1.0);
        assert_eq!(img.at(1, 0).x, 3.0);
    }

    #[test]
    fn png_writes_valid_file() {
        let mut img = ImageBuffer::new(4, 4);
        *img.at_mut(1, 1) = vec3(1.0, 0.5, 4.0); // >1 clamps
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        img.write_png(&path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.width(), 4);
        assert_eq!(back.get_pixel(1, 1)[2], 255);
        assert_eq!(back.get_pixel(0, 0)[0], 0);
    }
}
