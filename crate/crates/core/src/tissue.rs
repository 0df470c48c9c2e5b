//! Tissue labels for the 7-class cardiac label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One voxel label. The numeric values are the on-disk byte encoding and the
/// one-hot channel order, so they are part of the file-format contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum TissueId {
    Background = 0,
    /// Aorta.
    Ao = 1,
    /// Myocardium (left-ventricular wall and septum).
    Myo = 2,
    /// Right ventricle blood pool.
    Rv = 3,
    /// Left ventricle blood pool.
    Lv = 4,
    /// Right atrium blood pool.
    Ra = 5,
    /// Left atrium blood pool.
    La = 6,
}

/// Number of distinct labels (= one-hot channel count).
pub const TISSUE_COUNT: usize = 7;

/// All labels in channel order.
pub const ALL_TISSUES: [TissueId; TISSUE_COUNT] = [
    TissueId::Background,
    TissueId::Ao,
    TissueId::Myo,
    TissueId::Rv,
    TissueId::Lv,
    TissueId::Ra,
    TissueId::La,
];

/// The four blood-pool chambers in the fixed order used by morphology vectors.
pub const CHAMBERS: [TissueId; 4] = [TissueId::Lv, TissueId::Rv, TissueId::La, TissueId::Ra];

impl TissueId {
    /// Decode a voxel byte. `index` is only used for the error message.
    pub fn from_byte(value: u8, index: usize) -> Result<Self> {
        ALL_TISSUES
            .get(value as usize)
            .copied()
            .ok_or(Error::BadLabel { value, index })
    }

    pub fn as_byte(self) -> u8 {
        self as u8
    }

    /// Channel index in one-hot encodings (same as the byte value).
    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueId::Background => "Background",
            TissueId::Ao => "Ao",
            TissueId::Myo => "Myo",
            TissueId::Rv => "RV",
            TissueId::Lv => "LV",
            TissueId::Ra => "RA",
            TissueId::La => "LA",
        }
    }

    /// Parse the short display name (case-insensitive); used by CLI flags.
    pub fn from_name(name: &str) -> Option<Self> {
        ALL_TISSUES
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(name))
    }
}

impl std::fmt::Display for TissueId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
