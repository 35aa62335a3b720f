//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        text.parse()
            .or_else(|_| fmt_err(format!("malformed header: bad {what}")))
    }
}

impl Pnm {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return fmt_err("malformed header: expected P5 or P6 magic"),
        };
        let mut hdr = Header { bytes, pos: 2 };
        let width = hdr.number("width")?;
        let height = hdr.number("height")?;
        let maxval = hdr.number("maxval")?;
        if maxval == 0 || maxval > 65535 {
            return fmt_err(format!("malformed header: maxval {maxval}"));
        }
        if maxval > 255 {
            return fmt_err(format!(
                "unsupported depth: maxval {maxval}, only 8-bit samples are read"
            ));
        }
        if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
            return fmt_err("malformed header: missing separator before raster");
        }
        let data = &bytes[hdr.pos + 1..];
        let n = width * height * channels;
        if width == 0 || height == 0 || data.len() < n {
            return fmt_err(format!(
                "raster holds {} bytes, {width}x{height}x{channels} needed",
                data.len()
            ));
        }
        let scale = |v: u8| {
            if maxval == 255 {
                v
            } else {
                ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8
            }
        };
        Ok(Self {
            width,
            height,
            channels,
            pixels: data[..n].iter().map(|&v| scale(v)).collect(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    /// Planar `[C, H, W]` with samples divided by 255.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.width * self.height;
        let mut data = vec![T::zero(); self.channels * n];
        for (i, px) in self.pixels.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * n + i] = T::lit(v as f64 / 255.0);
            }
        }
        Tensor::from_vec(&[self.channels, self.height, self.width], data).expect("pnm extent")
    }
}

/// RGB image as `[3, H, W]` in `[0, 1]`; gray input is replicated.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = Pnm::read(path)?.to_tensor::<T>();
    if img.shape()[0] == 3 {
        return Ok(img);
    }
    Tensor::concat(&[&img, &img, &img], 0)
}

/// Binary mask `[1, H, W]`: samples above mid-gray are foreground.
pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let p = Pnm::read(path)?;
    if p.channels != 1 {
        return fmt_err("masks must be P5 grayscale");
    }
    let data = p
        .pixels
        .iter()
        .map(|&v| if v > 127 { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(&[1, p.height, p.width], data)
}

/// Writes `values > 0.5` as a P5 image with samples in `{0, 255}`.
pub fn save_mask<T: Scalar>(path: &Path, values: &Tensor<T>) -> Result<()> {
    let s = values.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return crate::error::shape_err("save_mask", format!("expected a single plane, got {s:?}"));
    }
    let half = T::lit(0.5);
    let pixels = values
        .data()
        .iter()
        .map(|&v| if v > half { 255 } else { 0 })
        .collect();
    Pnm {
        width: s[s.len() - 1],
        height: s[s.len() - 2],
        channels: 1,
        pixels,
    }
    .write(path)
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as P6.
pub fn save_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return crate::error::shape_err(
            "save_image",
            format!("expected [3, H, W], got {:?}", img.shape()),
        );
    };
    let n = h * w;
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            let v = img.data()[c * n + i].to_f64().unwrap_or(0.0);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Pnm {
        width: w,
        height: h,
        channels: 3,
        pixels,
    }
    .write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_ppm() {
        let mut bytes = b"P6\n# red\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[255, 0, 0]);
        }
        let t = Pnm::decode(&bytes).unwrap().to_tensor::<f32>();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(&t.data()[..4], &[1.0; 4]);
        assert_eq!(&t.data()[4..], &[0.0; 8]);
    }

    #[test]
    fn rejects_wide_samples_and_garbage() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        let err = Pnm::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("unsupported depth"), "{err}");
        assert!(Pnm::decode(b"P3 1 1 255\n0 0 0").is_err());
        assert!(Pnm::decode(b"P5 2 2 255\n\x00").is_err());
        assert!(Pnm::decode(b"P5 x 2 255\n\x00").is_err());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = Tensor::<f64>::from_f64(&[1, 2, 3], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        save_mask(&path, &m).unwrap();
        assert_eq!(load_mask::<f64>(&path).unwrap(), m);
        let raw = Pnm::read(&path).unwrap();
        assert!(raw.pixels.iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn image_round_trip_is_exact_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        let vals: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = Tensor::from_f64(&[3, 2, 2], &vals).unwrap();
        save_image(&path, &img).unwrap();
        assert_eq!(load_image::<f64>(&path).unwrap(), img);
    }
}
