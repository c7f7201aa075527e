//! Raw depth post-processing: hole filling, food masking, normalization.
//!
//! Raw depth is stored as u16 in tenths of a millimetre, 0 meaning "no reading".

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pnm::{GrayImage, RgbImage};

/// Physical size of one raw depth quantum.
pub const DEPTH_UNIT_MM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawDepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u16>,
    /// Normalization bracket in millimetres.
    pub near_mm: f64,
    pub far_mm: f64,
}

impl RawDepthMap {
    pub fn new(width: usize, height: usize, values: Vec<u16>, near_mm: f64, far_mm: f64) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimensions {
                op: "raw depth",
                left: vec![height, width],
                right: vec![values.len()],
            });
        }
        if !(near_mm < far_mm) {
            return Err(invalid(format!("near {near_mm} mm must be below far {far_mm} mm")));
        }
        Ok(Self {
            width,
            height,
            values,
            near_mm,
            far_mm,
        })
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }

    pub fn read_pgm(path: &Path, near_mm: f64, far_mm: f64) -> Result<Self> {
        let g = GrayImage::read(path)?;
        Self::new(g.width, g.height, g.data, near_mm, far_mm)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        GrayImage {
            width: self.width,
            height: self.height,
            maxval: 65535,
            data: self.values.clone(),
        }
        .write(path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl SegMask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![true; width * height],
        }
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let g = GrayImage::read(path)?;
        Ok(Self {
            width: g.width,
            height: g.height,
            values: g.data.iter().map(|&v| v > 0).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        GrayImage {
            width: self.width,
            height: self.height,
            maxval: 255,
            data: self.values.iter().map(|&v| if v { 255 } else { 0 }).collect(),
        }
        .write(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDepthMap {
    pub width: usize,
    pub height: usize,
    /// Values in [0, 1]; 1 is the plate plane. Meaningless where `valid` is false.
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
    pub near_mm: f64,
    pub far_mm: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    near_mm: f64,
    far_mm: f64,
}

impl NormalizedDepthMap {
    /// Writes little-endian f32 values (NaN marks invalid pixels) plus a JSON
    /// sidecar at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for (v, ok) in self.values.iter().zip(&self.valid) {
            let v = if *ok { *v } else { f32::NAN };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        let sidecar = Sidecar {
            width: self.width,
            height: self.height,
            near_mm: self.near_mm,
            far_mm: self.far_mm,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sc: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let bytes = std::fs::read(path)?;
        if bytes.len() != sc.width * sc.height * 4 {
            return Err(Error::Format {
                what: "normalized depth",
                detail: format!("expected {} bytes, found {}", sc.width * sc.height * 4, bytes.len()),
            });
        }
        let raw: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            width: sc.width,
            height: sc.height,
            valid: raw.iter().map(|v| !v.is_nan()).collect(),
            values: raw.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect(),
            near_mm: sc.near_mm,
            far_mm: sc.far_mm,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Fills missing pixels with the rounded mean of their valid 8-neighbours.
/// All pixels filled in one iteration see only the previous iteration's state.
pub fn inpaint_dilate(raw: &RawDepthMap, max_iters: usize) -> Result<RawDepthMap> {
    let (w, h) = (raw.width, raw.height);
    let mut cur = raw.values.clone();
    if !cur.iter().any(|&v| v != 0) {
        return Err(Error::AllMissing);
    }
    let mut holes: Vec<usize> = (0..cur.len()).filter(|&i| cur[i] == 0).collect();
    let mut iters = 0;
    while !holes.is_empty() {
        if iters == max_iters {
            return Err(Error::HolesRemain {
                count: holes.len(),
                iters,
            });
        }
        let mut fills = Vec::new();
        let mut still = Vec::new();
        for &i in &holes {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let (mut sum, mut n) = (0u64, 0u64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let v = cur[ny as usize * w + nx as usize];
                    if v != 0 {
                        sum += v as u64;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                still.push(i);
            } else {
                // Integer round-half-up of sum / n.
                fills.push((i, ((2 * sum + n) / (2 * n)) as u16));
            }
        }
        for (i, v) in fills {
            cur[i] = v;
        }
        holes = still;
        iters += 1;
    }
    RawDepthMap::new(w, h, cur, raw.near_mm, raw.far_mm)
}

/// Depth restricted to food pixels. The depth values are untouched; the mask
/// travels alongside and decides validity downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDepth {
    pub depth: RawDepthMap,
    pub mask: SegMask,
}

pub fn apply_mask(depth: &RawDepthMap, mask: &SegMask) -> Result<MaskedDepth> {
    if (depth.width, depth.height) != (mask.width, mask.height) {
        return Err(Error::Dimensions {
            op: "apply_mask",
            left: vec![depth.height, depth.width],
            right: vec![mask.height, mask.width],
        });
    }
    if mask.popcount() == 0 {
        return Err(invalid("segmentation mask has no food pixels"));
    }
    Ok(MaskedDepth {
        depth: depth.clone(),
        mask: mask.clone(),
    })
}

pub fn normalize(masked: &MaskedDepth) -> Result<NormalizedDepthMap> {
    let d = &masked.depth;
    if !(d.near_mm < d.far_mm) {
        return Err(invalid(format!("near {} mm must be below far {} mm", d.near_mm, d.far_mm)));
    }
    let range = d.far_mm - d.near_mm;
    let valid: Vec<bool> = d
        .values
        .iter()
        .zip(&masked.mask.values)
        .map(|(&q, &m)| m && q != 0)
        .collect();
    let values = d
        .values
        .iter()
        .zip(&valid)
        .map(|(&q, &ok)| {
            if ok {
                ((q as f64 * DEPTH_UNIT_MM - d.near_mm) / range).clamp(0.0, 1.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(NormalizedDepthMap {
        width: d.width,
        height: d.height,
        values,
        valid,
        near_mm: d.near_mm,
        far_mm: d.far_mm,
    })
}

/// Inverse of [`normalize`] on valid pixels; invalid pixels become missing.
pub fn denormalize(n: &NormalizedDepthMap) -> Result<RawDepthMap> {
    let range = n.far_mm - n.near_mm;
    let values = n
        .values
        .iter()
        .zip(&n.valid)
        .map(|(&v, &ok)| {
            if ok {
                ((n.near_mm + v as f64 * range) / DEPTH_UNIT_MM).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    RawDepthMap::new(n.width, n.height, values, n.near_mm, n.far_mm)
}

/// Color-threshold food mask for images without a reference segmentation:
/// food is saturated and not dark, the plate and table are neutral.
pub fn threshold_mask(rgb: &RgbImage) -> SegMask {
    let values = rgb
        .data
        .chunks_exact(3)
        .map(|px| {
            let max = px.iter().copied().max().unwrap_or(0) as f32 / 255.0;
            let min = px.iter().copied().min().unwrap_or(0) as f32 / 255.0;
            let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
            sat >= 0.3 && max >= 0.18
        })
        .collect();
    SegMask {
        width: rgb.width,
        height: rgb.height,
        values,
    }
}

/// Inpaint, mask and normalize in one go.
pub fn preprocess(raw: &RawDepthMap, mask: &SegMask, max_iters: usize) -> Result<NormalizedDepthMap> {
    let filled = inpaint_dilate(raw, max_iters)?;
    normalize(&apply_mask(&filled, mask)?)
}
