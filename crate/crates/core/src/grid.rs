//! Dense 3-D grids: label maps, latent tensors and latent-resolution masks.
//!
//! Memory layout is x-fastest everywhere (`idx = x + nx·(y + ny·(z + nz·c))`
//! with the channel slowest), matching the on-disk payload order, so file IO
//! is a straight byte copy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tissue::{TissueId, TISSUE_COUNT};

// ── label maps ──────────────────────────────────────────────────────────

/// A 3-D voxel grid of tissue labels with isotropic spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: (usize, usize, usize),
    voxel_size: f64,
    voxels: Vec<u8>,
}

impl LabelMap {
    /// All-background map. Errors on zero dims or non-positive spacing.
    pub fn new(dims: (usize, usize, usize), voxel_size: f64) -> Result<Self> {
        check_dims(dims)?;
        check_voxel_size(voxel_size)?;
        Ok(LabelMap { dims, voxel_size, voxels: vec![0; dims.0 * dims.1 * dims.2] })
    }

    /// Adopt a raw voxel buffer (x-fastest). Validates length and that every
    /// byte is a legal tissue id.
    pub fn from_bytes(
        dims: (usize, usize, usize),
        voxel_size: f64,
        voxels: Vec<u8>,
    ) -> Result<Self> {
        check_dims(dims)?;
        check_voxel_size(voxel_size)?;
        let want = dims.0 * dims.1 * dims.2;
        if voxels.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "label buffer has {} bytes, dims {:?} need {}",
                voxels.len(),
                dims,
                want
            )));
        }
        if let Some(index) = voxels.iter().position(|&v| v as usize >= TISSUE_COUNT) {
            return Err(Error::BadLabel { value: voxels[index], index });
        }
        Ok(LabelMap { dims, voxel_size, voxels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Isotropic voxel pitch in millimetres.
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> TissueId {
        let b = self.voxels[self.index(x, y, z)];
        // Safe by construction: every mutation path validates the byte.
        crate::tissue::ALL_TISSUES[b as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, t: TissueId) {
        let i = self.index(x, y, z);
        self.voxels[i] = t.as_byte();
    }

    /// Raw labels, x-fastest. This is exactly the file payload.
    pub fn bytes(&self) -> &[u8] {
        &self.voxels
    }

    /// Volume of one voxel in millilitres (1 ml = 1000 mm³).
    pub fn voxel_volume_ml(&self) -> f64 {
        self.voxel_size.powi(3) / 1000.0
    }

    /// Number of voxels carrying `t`.
    pub fn count(&self, t: TissueId) -> usize {
        let b = t.as_byte();
        self.voxels.iter().filter(|&&v| v == b).count()
    }

    /// Fraction of voxels where `self` and `other` agree. Requires equal dims.
    pub fn agreement(&self, other: &LabelMap) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "label maps {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let same = self
            .voxels
            .iter()
            .zip(&other.voxels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.voxels.len() as f64)
    }

    /// Dice overlap of one tissue between two maps. 1.0 when the tissue is
    /// absent from both.
    pub fn dice(&self, other: &LabelMap, t: TissueId) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "label maps {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let b = t.as_byte();
        let mut inter = 0usize;
        let mut total = 0usize;
        for (a, c) in self.voxels.iter().zip(&other.voxels) {
            let ia = *a == b;
            let ic = *c == b;
            inter += (ia && ic) as usize;
            total += ia as usize + ic as usize;
        }
        if total == 0 {
            Ok(1.0)
        } else {
            Ok(2.0 * inter as f64 / total as f64)
        }
    }
}

fn check_dims(dims: (usize, usize, usize)) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::EmptyDims(dims));
    }
    Ok(())
}

fn check_voxel_size(voxel_size: f64) -> Result<()> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::BadVoxelSize(voxel_size));
    }
    Ok(())
}

// ── latent tensors ──────────────────────────────────────────────────────

/// Shape metadata of a latent tensor: channel count, spatial cell dims, and
/// the voxel pitch of the full-resolution grid the latent stands for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub dims: (usize, usize, usize),
    pub voxel_size: f64,
}

impl LatentShape {
    pub fn cell_count(&self) -> usize {
        self.channels * self.spatial_len()
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }
}

/// A real-valued multi-channel 3-D tensor. Carries a `sigma_tag` recording
/// the noise level it currently holds (0 = clean); the tag is bookkeeping for
/// callers and file headers, not an input to the math.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: LatentShape,
    sigma_tag: f64,
    values: Vec<f64>,
}

impl Latent {
    pub fn zeros(shape: LatentShape) -> Result<Self> {
        check_dims(shape.dims)?;
        check_voxel_size(shape.voxel_size)?;
        if shape.channels == 0 {
            return Err(Error::ShapeMismatch("latent needs at least one channel".into()));
        }
        Ok(Latent { shape, sigma_tag: 0.0, values: vec![0.0; shape.cell_count()] })
    }

    /// Adopt a value buffer (x-fastest, channel slowest). Rejects non-finite
    /// entries — NaN/Inf never enter through a constructor or a file read.
    pub fn from_values(shape: LatentShape, sigma_tag: f64, values: Vec<f64>) -> Result<Self> {
        let mut out = Latent::zeros(shape)?;
        if values.len() != shape.cell_count() {
            return Err(Error::ShapeMismatch(format!(
                "latent buffer has {} cells, shape needs {}",
                values.len(),
                shape.cell_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        out.values = values;
        out.sigma_tag = sigma_tag;
        Ok(out)
    }

    /// `sigma · N(0, I)` over the whole tensor. Always consumes exactly
    /// `cell_count` draws from `rng`, so stream accounting does not depend on
    /// sigma; `sigma = 0` therefore yields an exact zero tensor.
    pub fn noise(shape: LatentShape, sigma: f64, rng: &mut RngStream) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::BadSigma(sigma));
        }
        let mut out = Latent::zeros(shape)?;
        rng.fill_normal(&mut out.values);
        for v in &mut out.values {
            *v *= sigma;
        }
        out.sigma_tag = sigma;
        Ok(out)
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.shape.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.shape.voxel_size
    }

    pub fn cell_count(&self) -> usize {
        self.values.len()
    }

    pub fn spatial_len(&self) -> usize {
        self.shape.spatial_len()
    }

    pub fn sigma_tag(&self) -> f64 {
        self.sigma_tag
    }

    pub fn set_sigma_tag(&mut self, sigma: f64) {
        self.sigma_tag = sigma;
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let (nx, ny, nz) = self.shape.dims;
        debug_assert!(c < self.shape.channels && x < nx && y < ny && z < nz);
        x + nx * (y + ny * (z + nz * c))
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(c, x, y, z);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// True when channel count and spatial dims match (voxel pitch is
    /// metadata and not compared).
    pub fn same_shape(&self, other: &Latent) -> bool {
        self.shape.channels == other.shape.channels && self.shape.dims == other.shape.dims
    }

    pub(crate) fn ensure_same_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{:?} vs {}x{:?}",
                self.shape.channels, self.shape.dims, other.shape.channels, other.shape.dims
            )))
        }
    }

    /// Squared Euclidean distance over all cells.
    pub fn distance_sq(&self, other: &Latent) -> f64 {
        debug_assert!(self.same_shape(other));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }
}

/// One-hot encode a label map into a 7-channel latent-layout tensor (values
/// exactly 0.0/1.0, `sigma_tag` 0).
pub fn onehot(map: &LabelMap) -> Latent {
    let shape = LatentShape {
        channels: TISSUE_COUNT,
        dims: map.dims(),
        voxel_size: map.voxel_size(),
    };
    let mut out = Latent::zeros(shape).expect("label map dims are already validated");
    let spatial = map.len();
    for (i, &b) in map.bytes().iter().enumerate() {
        out.values[i + spatial * b as usize] = 1.0;
    }
    out
}

// ── latent masks ────────────────────────────────────────────────────────

/// A binary mask at latent spatial resolution, broadcast over channels.
/// `true` marks cells to preserve.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    dims: (usize, usize, usize),
    cells: Vec<bool>,
}

impl LatentMask {
    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self> {
        check_dims(dims)?;
        Ok(LatentMask { dims, cells: vec![false; dims.0 * dims.1 * dims.2] })
    }

    pub fn ones(dims: (usize, usize, usize)) -> Result<Self> {
        let mut m = LatentMask::zeros(dims)?;
        m.cells.fill(true);
        Ok(m)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.cells[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.cells[i] = v;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_set(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn any(&self) -> bool {
        self.cells.iter().any(|&c| c)
    }

    pub fn all(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }
}
