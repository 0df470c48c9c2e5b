//! On-disk artifact formats: binary volumes, JSON reports, run manifests,
//! and PNG slice renderings.
//!
//! # Volume container
//!
//! Label maps, latents, and heatmaps share one container: a single JSON
//! header line terminated by `\n`, then a raw little-endian payload.
//!
//! ```text
//! {"format":"labelmap","version":1,"dims":[32,32,32],"voxel_size":1.4,"payload_bytes":32768}\n
//! <payload bytes>
//! ```
//!
//! Header fields:
//! - `format`: `"labelmap"`, `"latent"`, or `"heatmap"`.
//! - `version`: container revision; this build reads [`FORMAT_VERSION`].
//! - `dims`: spatial grid `[nx, ny, nz]`.
//! - `voxel_size`: isotropic voxel pitch in mm (for latents: the pitch of
//!   the full-resolution grid the latent stands for).
//! - `channels` (latent only), `sigma_tag` (latent only), `members`
//!   (heatmap only: cohort size the mean was taken over).
//! - `payload_bytes`: exact byte length of the payload that follows.
//!
//! Payload layouts, all x-fastest then y then z, channel slowest:
//! - labelmap: one tissue-id byte per voxel (`nx·ny·nz` bytes);
//! - latent: one little-endian `f64` per value (`channels·nx·ny·nz · 8` bytes);
//! - heatmap: one little-endian `f64` per value (7 channels, one per tissue).
//!
//! Write∘read is a byte-level identity: reading a volume and writing it
//! again reproduces the file exactly. Malformed files fail with distinct
//! errors that carry the path: [`Error::VersionMismatch`], [`Error::Truncated`]
//! (payload shorter than the header promises), [`Error::SizeMismatch`]
//! (longer), [`Error::BadHeader`], [`Error::WrongKind`].
//!
//! # Reports and manifests
//!
//! Reports serialize as pretty-printed JSON ([`write_json`] / [`read_json`])
//! and round-trip semantically rather than byte-exactly. A [`Manifest`] lists
//! every file a run produced together with per-member provenance and the
//! content hash of the experiment config, so a results directory is
//! self-describing and [`Manifest::validate`] can prove it is intact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analytics::{Heatmap, HeatmapDiff};
use crate::cohort::Provenance;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grid::{LabelMap, Latent, LatentShape};
use crate::tissue::TISSUE_COUNT;

/// Container revision this build writes and reads.
pub const FORMAT_VERSION: u32 = 1;

/// `format` field values.
const KIND_LABELMAP: &str = "labelmap";
const KIND_LATENT: &str = "latent";
const KIND_HEATMAP: &str = "heatmap";

// ── volume container ────────────────────────────────────────────────────

/// The JSON header line. Field order is struct order, which keeps the
/// serialized header — and therefore whole files — byte-stable.
#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    format: String,
    version: u32,
    dims: [usize; 3],
    voxel_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_tag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    members: Option<usize>,
    payload_bytes: usize,
}

fn write_volume(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    debug_assert_eq!(header.payload_bytes, payload.len());
    let head = serde_json::to_string(header)
        .map_err(|e| Error::BadJson { path: path.into(), msg: e.to_string() })?;
    let mut bytes = Vec::with_capacity(head.len() + 1 + payload.len());
    bytes.extend_from_slice(head.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read and check the container: header parses, version and kind match, and
/// the payload length agrees with the header's promise.
fn read_volume(path: &Path, expect_kind: &'static str) -> Result<(VolumeHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::BadHeader {
        path: path.into(),
        msg: "no newline-terminated header line".into(),
    })?;
    let header: VolumeHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::BadHeader { path: path.into(), msg: e.to_string() })?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    if header.format != expect_kind {
        return Err(Error::WrongKind {
            path: path.into(),
            expected: expect_kind,
            found: header.format,
        });
    }
    let payload = &bytes[nl + 1..];
    if payload.len() < header.payload_bytes {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header.payload_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > header.payload_bytes {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected: header.payload_bytes,
            found: payload.len(),
        });
    }
    Ok((header, payload.to_vec()))
}

/// The header must promise exactly the payload size the dims imply;
/// anything else is an internally inconsistent header, not a bad payload.
fn check_derived_size(path: &Path, header: &VolumeHeader, want: usize) -> Result<()> {
    if header.payload_bytes != want {
        return Err(Error::BadHeader {
            path: path.into(),
            msg: format!(
                "payload_bytes {} disagrees with the {} bytes the dims imply",
                header.payload_bytes, want
            ),
        });
    }
    Ok(())
}

fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

// ── label maps ──────────────────────────────────────────────────────────

pub fn write_labelmap(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let (nx, ny, nz) = map.dims();
    let header = VolumeHeader {
        format: KIND_LABELMAP.into(),
        version: FORMAT_VERSION,
        dims: [nx, ny, nz],
        voxel_size: map.voxel_size(),
        channels: None,
        sigma_tag: None,
        members: None,
        payload_bytes: map.bytes().len(),
    };
    write_volume(path.as_ref(), &header, map.bytes())
}

pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (header, payload) = read_volume(path, KIND_LABELMAP)?;
    let [nx, ny, nz] = header.dims;
    check_derived_size(path, &header, nx * ny * nz)?;
    LabelMap::from_bytes((nx, ny, nz), header.voxel_size, payload)
}

// ── latents ─────────────────────────────────────────────────────────────

pub fn write_latent(path: impl AsRef<Path>, latent: &Latent) -> Result<()> {
    let (nx, ny, nz) = latent.dims();
    let header = VolumeHeader {
        format: KIND_LATENT.into(),
        version: FORMAT_VERSION,
        dims: [nx, ny, nz],
        voxel_size: latent.voxel_size(),
        channels: Some(latent.channels()),
        sigma_tag: Some(latent.sigma_tag()),
        members: None,
        payload_bytes: latent.values().len() * 8,
    };
    write_volume(path.as_ref(), &header, &f64s_to_le_bytes(latent.values()))
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<Latent> {
    let path = path.as_ref();
    let (header, payload) = read_volume(path, KIND_LATENT)?;
    let channels = header.channels.ok_or_else(|| Error::BadHeader {
        path: path.into(),
        msg: "latent header needs a channels field".into(),
    })?;
    let [nx, ny, nz] = header.dims;
    check_derived_size(path, &header, channels * nx * ny * nz * 8)?;
    let shape = LatentShape { channels, dims: (nx, ny, nz), voxel_size: header.voxel_size };
    Latent::from_values(shape, header.sigma_tag.unwrap_or(0.0), le_bytes_to_f64s(&payload))
}

// ── heatmaps ────────────────────────────────────────────────────────────

pub fn write_heatmap(path: impl AsRef<Path>, heat: &Heatmap) -> Result<()> {
    let (nx, ny, nz) = heat.dims();
    let header = VolumeHeader {
        format: KIND_HEATMAP.into(),
        version: FORMAT_VERSION,
        dims: [nx, ny, nz],
        voxel_size: heat.voxel_size(),
        channels: Some(heat.channels()),
        sigma_tag: None,
        members: Some(heat.members()),
        payload_bytes: heat.values().len() * 8,
    };
    write_volume(path.as_ref(), &header, &f64s_to_le_bytes(heat.values()))
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap> {
    let path = path.as_ref();
    let (header, payload) = read_volume(path, KIND_HEATMAP)?;
    let channels = header.channels.unwrap_or(TISSUE_COUNT);
    if channels != TISSUE_COUNT {
        return Err(Error::BadHeader {
            path: path.into(),
            msg: format!("heatmaps carry {TISSUE_COUNT} channels, header says {channels}"),
        });
    }
    let members = header.members.ok_or_else(|| Error::BadHeader {
        path: path.into(),
        msg: "heatmap header needs a members field".into(),
    })?;
    let [nx, ny, nz] = header.dims;
    check_derived_size(path, &header, TISSUE_COUNT * nx * ny * nz * 8)?;
    Heatmap::from_values((nx, ny, nz), header.voxel_size, members, le_bytes_to_f64s(&payload))
}

// ── JSON reports ────────────────────────────────────────────────────────

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::BadJson { path: path.into(), msg: e.to_string() })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::BadJson { path: path.into(), msg: e.to_string() })
}

// ── manifests ───────────────────────────────────────────────────────────

/// One file a run produced, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the directory holding the manifest.
    pub path: String,
    /// What the file holds: `"labelmap"`, `"latent"`, `"heatmap"`, `"json"`,
    /// `"config"`, or an opaque kind (`"csv"`, `"png"`, `"text"`) that is
    /// checked for existence only.
    pub kind: String,
}

/// Index of a results directory: every file written, per-member provenance,
/// and the content hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub files: Vec<ManifestEntry>,
    pub provenance: Vec<Provenance>,
    /// SHA-256 of the canonical TOML of the experiment config.
    pub config_hash: String,
}

impl Manifest {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Manifest {
            version: FORMAT_VERSION,
            files: Vec::new(),
            provenance: Vec::new(),
            config_hash: config_hash.into(),
        }
    }

    /// Record one produced file.
    pub fn push(&mut self, path: impl Into<String>, kind: impl Into<String>) {
        self.files.push(ManifestEntry { path: path.into(), kind: kind.into() });
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: Manifest = read_json(path)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: m.version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(m)
    }

    /// Prove the directory is intact: every listed file exists and parses
    /// per its kind, and a listed config snapshot hashes to `config_hash`.
    pub fn validate(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for entry in &self.files {
            let full = dir.join(&entry.path);
            if !full.exists() {
                return Err(Error::MissingFile(full));
            }
            match entry.kind.as_str() {
                "labelmap" => {
                    read_labelmap(&full)?;
                }
                "latent" => {
                    read_latent(&full)?;
                }
                "heatmap" => {
                    read_heatmap(&full)?;
                }
                "json" => {
                    read_json::<serde_json::Value>(&full)?;
                }
                "config" => {
                    let cfg = ExperimentConfig::load(&full)?;
                    let found = cfg.hash()?;
                    if found != self.config_hash {
                        return Err(Error::HashMismatch {
                            path: full,
                            found,
                            expected: self.config_hash.clone(),
                        });
                    }
                }
                _ => {} // opaque kinds: existence is the whole check
            }
        }
        Ok(())
    }
}

// ── PNG slice renderings ────────────────────────────────────────────────

/// Display colors per tissue id, in id order.
pub const TISSUE_COLORS: [[u8; 3]; TISSUE_COUNT] = [
    [16, 16, 16],    // background
    [120, 120, 120], // myocardium
    [202, 60, 60],   // LV blood pool
    [66, 96, 200],   // RV blood pool
    [222, 150, 60],  // LA blood pool
    [70, 180, 190],  // RA blood pool
    [235, 235, 235], // aorta
];

fn check_slice(nz: usize, z: usize, what: &str) -> Result<()> {
    if z >= nz {
        return Err(Error::ShapeMismatch(format!(
            "slice z = {z} out of range for a {what} with {nz} planes"
        )));
    }
    Ok(())
}

/// Render one axial slice with the tissue palette. Row 0 is y = 0.
pub fn labelmap_slice_image(map: &LabelMap, z: usize) -> Result<image::RgbImage> {
    let (nx, ny, nz) = map.dims();
    check_slice(nz, z, "label map")?;
    let mut img = image::RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let color = TISSUE_COLORS[map.get(x, y, z) as usize];
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
    Ok(img)
}

/// Render one axial slice of foreground occupancy as 8-bit grayscale.
pub fn heatmap_slice_image(heat: &Heatmap, z: usize) -> Result<image::GrayImage> {
    let (nx, ny, nz) = heat.dims();
    check_slice(nz, z, "heatmap")?;
    let mut img = image::GrayImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let v = heat.foreground(x, y, z).clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    Ok(img)
}

/// Render one axial slice of a signed occupancy difference: white at zero,
/// red positive, blue negative, dark gray where the diff is masked.
pub fn diff_slice_image(diff: &HeatmapDiff, z: usize) -> Result<image::RgbImage> {
    let (nx, ny, nz) = diff.dims();
    check_slice(nz, z, "heatmap diff")?;
    let mut img = image::RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let px = if diff.is_masked(x, y, z) {
                [40, 40, 40]
            } else {
                let v = diff.get(x, y, z).clamp(-1.0, 1.0);
                let k = 255 - (v.abs() * 255.0).round() as u8;
                if v >= 0.0 {
                    [255, k, k]
                } else {
                    [k, k, 255]
                }
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Encode any rendered slice as a PNG file.
pub fn save_png<P, C>(path: impl AsRef<Path>, img: &image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    C: std::ops::Deref<Target = [P::Subpixel]>,
    [P::Subpixel]: image::EncodableLayout,
{
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::ImageEncode { path: path.into(), msg: e.to_string() })
}
