//! 8-bit single-channel rasters and binary PGM (P5) files.
//!
//! Skeleton maps hold intensities 0..=255. Masks hold 0 (background) or
//! 1 (foreground) in memory and 0/255 on disk.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Format(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Foreground pixel coordinates `(x, y)` of a mask, row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Intensities scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Binary mask from an intensity raster: values >= 128 become 1.
    pub fn binarize(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| u8::from(v >= 128)).collect(),
        }
    }

    /// 0/1 mask scaled to 0/255 for display or PGM storage.
    pub fn mask_to_intensity(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PGM: truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("PGM: expected P5, got {}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("PGM: bad header field `{s}`")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PGM: unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the payload
        let payload = bytes.get(pos + 1..).unwrap_or(&[]);
        if payload.len() != w * h {
            return Err(Error::Format(format!(
                "PGM: expected {} payload bytes, got {}",
                w * h,
                payload.len()
            )));
        }
        Raster::from_vec(w, h, payload.to_vec())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Reads a mask PGM (0 = background, 255 = foreground).
    pub fn read_mask(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::read_pgm(path)?.binarize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let r = Raster::from_vec(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        let bytes = r.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(Raster::from_pgm(&bytes).unwrap(), r);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[4, 5]);
        assert_eq!(Raster::from_pgm(&bytes).unwrap().data, vec![4, 5]);
        assert!(Raster::from_pgm(b"P2\n1 1\n255\n1").is_err());
        assert!(Raster::from_pgm(b"P5\n2 2\n255\n\x01").is_err());
        assert!(Raster::from_pgm(b"P5\n1 1\n65535\n\x00\x01").is_err());
    }

    #[test]
    fn mask_encoding() {
        let r = Raster::from_vec(4, 1, vec![0, 127, 128, 255]).unwrap();
        let m = r.binarize();
        assert_eq!(m.data, vec![0, 0, 1, 1]);
        assert!(m.is_binary());
        assert_eq!(m.mask_to_intensity().data, vec![0, 0, 255, 255]);
        assert_eq!(m.foreground().collect::<Vec<_>>(), vec![(2, 0), (3, 0)]);
    }
}
