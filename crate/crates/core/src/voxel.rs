//! Column-model voxelization of normalized depth and voxel utilities.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxcal_autodiff::Tensor;

use crate::depth::{preprocess, NormalizedDepthMap, RawDepthMap, SegMask};
use crate::error::{invalid, Error, Result};

/// Binary occupancy grid indexed `(z * H + y) * W + x`; z grows away from the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    occ: Vec<bool>,
    /// Physical volume of one cell; 1.0 means volumes are in voxel units.
    pub cell_volume: f64,
}

impl VoxelGrid {
    pub fn empty(depth: usize, height: usize, width: usize) -> Self {
        Self::from_occupancy(depth, height, width, vec![false; depth * height * width]).expect("sized")
    }

    pub fn from_occupancy(depth: usize, height: usize, width: usize, occ: Vec<bool>) -> Result<Self> {
        if occ.len() != depth * height * width {
            return Err(Error::Dimensions {
                op: "voxel grid",
                left: vec![depth, height, width],
                right: vec![occ.len()],
            });
        }
        Ok(Self {
            depth,
            height,
            width,
            occ,
            cell_volume: 1.0,
        })
    }

    pub fn with_cell_volume(mut self, cell_volume: f64) -> Self {
        self.cell_volume = cell_volume;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.occ[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.occ[i] = v;
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occ
    }

    pub fn count(&self) -> usize {
        self.occ.iter().filter(|&&v| v).count()
    }

    pub fn volume(&self) -> f64 {
        self.cell_volume * self.count() as f64
    }

    /// `[Z, H, W]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.occ.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(&self.dims(), data).expect("grid dims")
    }

    /// Top-view silhouette: a pixel is set if any cell in its column is occupied.
    pub fn footprint(&self) -> Vec<bool> {
        let plane = self.height * self.width;
        let mut out = vec![false; plane];
        for z in 0..self.depth {
            for (o, &v) in out.iter_mut().zip(&self.occ[z * plane..(z + 1) * plane]) {
                *o |= v;
            }
        }
        out
    }

    /// True when every occupied cell has all deeper cells of its column occupied.
    pub fn columns_are_suffixes(&self) -> bool {
        for y in 0..self.height {
            for x in 0..self.width {
                let mut seen = false;
                for z in 0..self.depth {
                    let v = self.get(z, y, x);
                    if seen && !v {
                        return false;
                    }
                    seen |= v;
                }
            }
        }
        true
    }

    /// `.vox.bin`: u32 LE header length, JSON header, LSB-first packed bitset.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&VoxHeader {
            dims: self.dims(),
            cell_volume: self.cell_volume,
        })?;
        let mut bits = vec![0u8; self.occ.len().div_ceil(8)];
        for (i, &v) in self.occ.iter().enumerate() {
            if v {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&bits)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut header)?;
        let h: VoxHeader = serde_json::from_slice(&header)?;
        let n = h.dims.iter().product::<usize>();
        let mut bits = vec![0u8; n.div_ceil(8)];
        f.read_exact(&mut bits)?;
        let occ = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self::from_occupancy(h.dims[0], h.dims[1], h.dims[2], occ)?.with_cell_volume(h.cell_volume))
    }
}

#[derive(Serialize, Deserialize)]
struct VoxHeader {
    dims: [usize; 3],
    cell_volume: f64,
}

/// First occupied slice of a column with normalized depth `d`.
pub fn surface_index(d: f32, z_res: usize) -> usize {
    // f32::round rounds half away from zero.
    (d * (z_res - 1) as f32).round() as usize
}

/// Every valid pixel fills its column from the surface slice to the far plane.
pub fn depth_to_voxel(dbar: &NormalizedDepthMap, z_res: usize) -> Result<VoxelGrid> {
    if z_res < 2 {
        return Err(invalid(format!("z_res must be at least 2, got {z_res}")));
    }
    let (h, w) = (dbar.height, dbar.width);
    let mut grid = VoxelGrid::empty(z_res, h, w);
    for (i, (&d, &ok)) in dbar.values.iter().zip(&dbar.valid).enumerate() {
        if !ok {
            continue;
        }
        if !(0.0..=1.0).contains(&d) {
            return Err(invalid(format!("normalized depth {d} outside [0, 1]")));
        }
        for z in surface_index(d, z_res)..z_res {
            grid.occ[z * h * w + i] = true;
        }
    }
    Ok(grid)
}

/// Depth -> inpaint -> mask -> normalize -> voxelize, with physical cell volume.
pub fn reference_voxel(raw: &RawDepthMap, mask: &SegMask, z_res: usize, cell_volume: f64) -> Result<VoxelGrid> {
    let dbar = preprocess(raw, mask, raw.width + raw.height)?;
    Ok(depth_to_voxel(&dbar, z_res)?.with_cell_volume(cell_volume))
}

/// Intersection over union; two empty grids count as identical.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dimensions {
            op: "voxel_iou",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.occ.iter().zip(&b.occ) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Thresholds probabilities (`[Z, H, W]`, or with a leading unit axis) at `tau`, ties occupied.
pub fn binarize(probs: &Tensor<f32>, tau: f32) -> Result<VoxelGrid> {
    let s = probs.shape();
    let dims = match s {
        [z, h, w] | [1, z, h, w] => [*z, *h, *w],
        _ => return Err(invalid(format!("binarize expects [Z, H, W], got {s:?}"))),
    };
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(format!("threshold {tau} outside (0, 1)")));
    }
    if let Some(bad) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("probability {bad} outside [0, 1]")));
    }
    VoxelGrid::from_occupancy(dims[0], dims[1], dims[2], probs.data().iter().map(|&p| p >= tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: usize, h: usize, v: f32) -> NormalizedDepthMap {
        NormalizedDepthMap {
            width: w,
            height: h,
            values: vec![v; w * h],
            valid: vec![true; w * h],
            near_mm: 0.0,
            far_mm: 1.0,
        }
    }

    #[test]
    fn near_plane_fills_everything() {
        let g = depth_to_voxel(&flat(4, 4, 0.0), 4).unwrap();
        assert_eq!(g.count(), 64);
    }

    #[test]
    fn far_plane_fills_last_slice() {
        let g = depth_to_voxel(&flat(4, 4, 1.0), 4).unwrap();
        assert_eq!(g.count(), 16);
        assert!((0..4).all(|y| (0..4).all(|x| g.get(3, y, x))));
    }

    #[test]
    fn half_rounds_away_from_zero() {
        // 0.5 * 3 = 1.5 -> 2, so slices 2 and 3.
        let g = depth_to_voxel(&flat(1, 1, 0.5), 4).unwrap();
        assert_eq!(g.count(), 2);
        assert!(depth_to_voxel(&flat(1, 1, 0.5), 1).is_err());
    }

    #[test]
    fn invalid_pixels_leave_empty_columns() {
        let mut d = flat(2, 1, 0.0);
        d.valid[1] = false;
        let g = depth_to_voxel(&d, 3).unwrap();
        assert!((0..3).all(|z| g.get(z, 0, 0) && !g.get(z, 0, 1)));
        assert!(g.columns_are_suffixes());
    }

    #[test]
    fn volume_scales_with_cell_volume() {
        let g = depth_to_voxel(&flat(2, 2, 0.0), 2).unwrap().with_cell_volume(0.5);
        assert_eq!(g.volume(), 4.0);
        assert_eq!(VoxelGrid::empty(3, 3, 3).volume(), 0.0);
    }

    #[test]
    fn iou_cases() {
        let mut a = VoxelGrid::empty(1, 5, 10);
        let mut b = VoxelGrid::empty(1, 5, 10);
        for i in 0..40 {
            b.set(0, i / 10, i % 10, true);
            if i < 10 {
                a.set(0, i / 10, i % 10, true);
            }
        }
        assert_eq!(voxel_iou(&a, &b).unwrap(), 0.25);
        assert_eq!(voxel_iou(&b, &b).unwrap(), 1.0);
        let e = VoxelGrid::empty(1, 5, 10);
        assert_eq!(voxel_iou(&e, &e).unwrap(), 1.0);
        let mut c = VoxelGrid::empty(1, 5, 10);
        c.set(0, 4, 9, true);
        assert_eq!(voxel_iou(&a, &c).unwrap(), 0.0);
        assert!(voxel_iou(&a, &VoxelGrid::empty(2, 5, 10)).is_err());
    }

    #[test]
    fn binarize_tie_and_range() {
        let t = Tensor::new(&[1, 2, 2], vec![0.5, 0.49, 1.0, 0.0]).unwrap();
        let g = binarize(&t, 0.5).unwrap();
        assert_eq!(g.occupancy(), &[true, false, true, false]);
        let bad = Tensor::new(&[1, 1, 1], vec![1.5]).unwrap();
        assert!(binarize(&bad, 0.5).is_err());
        assert!(binarize(&t, 1.0).is_err());
    }

    #[test]
    fn vox_bin_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.vox.bin");
        let mut g = VoxelGrid::empty(3, 2, 5).with_cell_volume(0.125);
        g.set(1, 1, 4, true);
        g.set(2, 0, 0, true);
        g.save(&p).unwrap();
        assert_eq!(VoxelGrid::load(&p).unwrap(), g);
    }
}
