//! Binary netpbm images: P6 (8-bit RGB) and P5 (8- or 16-bit gray).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use voxcal_autodiff::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Format {
                what: "rgb image",
                detail: format!("{}x{} needs {} bytes, got {}", width, height, width * height * 3, data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("planar layout")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (w, h, max) = read_header(&mut r, "P6")?;
        if max != 255 {
            return Err(Error::Format {
                what: "ppm",
                detail: format!("unsupported maxval {max}"),
            });
        }
        let mut data = vec![0u8; w * h * 3];
        r.read_exact(&mut data)?;
        Self::new(w, h, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        f.flush()?;
        Ok(())
    }
}

/// Gray image with its declared maxval; samples above 255 are stored big-endian
/// on disk as the format requires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl GrayImage {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (width, height, maxval) = read_header(&mut r, "P5")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format {
                what: "pgm",
                detail: format!("maxval {maxval} out of range"),
            });
        }
        let n = width * height;
        let data = if maxval < 256 {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            buf.into_iter().map(u16::from).collect()
        } else {
            let mut buf = vec![0u8; 2 * n];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval < 256 {
            let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
            f.write_all(&bytes)?;
        } else {
            for v in &self.data {
                f.write_all(&v.to_be_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize, usize)> {
    let mut tokens = Vec::with_capacity(4);
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format {
                what: "netpbm header",
                detail: "unexpected end of file".into(),
            });
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    if tokens.len() > 4 {
        // Pixel data must start right after the single whitespace following maxval.
        return Err(Error::Format {
            what: "netpbm header",
            detail: "trailing tokens after maxval".into(),
        });
    }
    if tokens[0] != magic {
        return Err(Error::Format {
            what: "netpbm header",
            detail: format!("expected {magic}, found {}", tokens[0]),
        });
    }
    let num = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Format {
            what: "netpbm header",
            detail: format!("bad number `{s}`"),
        })
    };
    Ok((num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?))
}
