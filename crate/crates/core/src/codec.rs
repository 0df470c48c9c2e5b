//! Label-map ↔ latent codec.
//!
//! Encoding turns a label map into a 7-channel latent at reduced spatial
//! resolution: each channel holds the fraction of the corresponding tissue
//! inside every `factor³` block (the block average of the one-hot volume).
//! Channels therefore sum to exactly 1 in every cell.
//!
//! Decoding upsamples each channel trilinearly back to full resolution
//! (half-cell aligned, edge-clamped) and takes the per-voxel argmax, with
//! ties resolved toward the lowest tissue id. A constant map round-trips
//! exactly, as does any map whose labels vary along a single axis (slab
//! stacks): along one axis the home cell's interpolation weight is at least
//! 0.625 and always wins. Full 3-D block patterns are *not* exact — near a
//! block corner up to seven of the eight interpolation corners belong to
//! neighboring cells and can outvote the home label.
//!
//! Measured round-trip quality at the default factor 4: chamber Dice crosses
//! 0.90 once the smallest semi-axis spans about 7 voxels (a little under two
//! latent cells), reaching ≈ 0.95 by 10–12 voxels. Structures much thinner
//! than a block (sub-factor clusters) are erased by pooling + argmax.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Latent, LatentShape};
use crate::tissue::{TissueId, TISSUE_COUNT};

/// Spatial reduction codec with an integer block `factor` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub factor: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Codec { factor: 4 }
    }
}

impl Codec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("codec factor must be at least 1".into()));
        }
        Ok(Codec { factor })
    }

    /// Block-average the one-hot representation of `map` into a latent.
    pub fn encode(&self, map: &LabelMap) -> Result<Latent> {
        if self.factor == 0 {
            return Err(Error::Config("codec factor must be at least 1".into()));
        }
        let f = self.factor;
        let (nx, ny, nz) = map.dims();
        if nx % f != 0 || ny % f != 0 || nz % f != 0 {
            return Err(Error::NotDivisible { dims: (nx, ny, nz), factor: f });
        }
        let dims = (nx / f, ny / f, nz / f);
        let shape =
            LatentShape { channels: TISSUE_COUNT, dims, voxel_size: map.voxel_size() * f as f64 };
        let mut out = Latent::zeros(shape)?;
        let spatial = dims.0 * dims.1 * dims.2;
        let inv = 1.0 / (f * f * f) as f64;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let c = map.get(x, y, z).channel();
                    let cell = (x / f) + dims.0 * ((y / f) + dims.1 * (z / f));
                    out.values_mut()[cell + spatial * c] += inv;
                }
            }
        }
        Ok(out)
    }

    /// Trilinearly upsample every channel and take the per-voxel argmax.
    pub fn decode(&self, latent: &Latent) -> Result<LabelMap> {
        if self.factor == 0 {
            return Err(Error::Config("codec factor must be at least 1".into()));
        }
        let shape = latent.shape();
        if shape.channels != TISSUE_COUNT {
            return Err(Error::WrongChannels(shape.channels));
        }
        let f = self.factor;
        let (cx, cy, cz) = shape.dims;
        let dims = (cx * f, cy * f, cz * f);
        let mut map = LabelMap::new(dims, shape.voxel_size / f as f64)?;

        let taps_x = axis_taps(dims.0, cx, f);
        let taps_y = axis_taps(dims.1, cy, f);
        let taps_z = axis_taps(dims.2, cz, f);
        let spatial = cx * cy * cz;
        let vals = latent.values();

        for z in 0..dims.2 {
            let (z0, z1, tz) = taps_z[z];
            for y in 0..dims.1 {
                let (y0, y1, ty) = taps_y[y];
                for x in 0..dims.0 {
                    let (x0, x1, tx) = taps_x[x];
                    let mut best_c = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for (c, base) in (0..TISSUE_COUNT).map(|c| (c, spatial * c)) {
                        let at = |ix: usize, iy: usize, iz: usize| {
                            vals[base + ix + cx * (iy + cy * iz)]
                        };
                        let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x1, y0, z0) * tx;
                        let c10 = at(x0, y1, z0) * (1.0 - tx) + at(x1, y1, z0) * tx;
                        let c01 = at(x0, y0, z1) * (1.0 - tx) + at(x1, y0, z1) * tx;
                        let c11 = at(x0, y1, z1) * (1.0 - tx) + at(x1, y1, z1) * tx;
                        let c0 = c00 * (1.0 - ty) + c10 * ty;
                        let c1 = c01 * (1.0 - ty) + c11 * ty;
                        let v = c0 * (1.0 - tz) + c1 * tz;
                        if v > best_v {
                            best_v = v;
                            best_c = c;
                        }
                    }
                    map.set(x, y, z, TissueId::from_byte(best_c as u8, 0).expect("channel"));
                }
            }
        }
        Ok(map)
    }
}

/// Per-fine-voxel interpolation taps along one axis: the fine voxel center
/// `v + 0.5` maps to source coordinate `(v + 0.5)/f − 0.5` in cell units;
/// indices are clamped at the edges.
fn axis_taps(fine: usize, coarse: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..fine)
        .map(|v| {
            let u = (v as f64 + 0.5) / f as f64 - 0.5;
            let floor = u.floor();
            let t = u - floor;
            let i0 = (floor.max(0.0) as usize).min(coarse - 1);
            let i1 = (i0 + 1).min(coarse - 1);
            if floor < 0.0 {
                (i0, i1, 0.0)
            } else if floor as usize >= coarse - 1 {
                (i0, i1, if i0 == i1 { 0.0 } else { t })
            } else {
                (i0, i1, t)
            }
        })
        .collect()
}
