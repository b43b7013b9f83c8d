//! Format dispatch and the native raw format.
//!
//! Raw volumes are a pair of files: `<name>.json` holding geometry and
//! `<name>.f32` holding little-endian float32 voxels in (d, h, w) order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::nifti::{read_nifti, write_nifti};
use super::volume::{Orientation, Volume, VolumeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    /// (d, h, w)
    pub dims: [usize; 3],
    /// mm, (z, y, x)
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: VolumeKind,
    pub dtype: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Orientation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    Raw,
}

impl VolumeFormat {
    pub fn of(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
        if name.ends_with(".nii.gz") {
            Ok(VolumeFormat::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".json") || name.ends_with(".f32") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::Unsupported {
                field: "volume file extension",
                value: path.display().to_string(),
            })
        }
    }
}

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("f32"))
}

pub fn write_raw(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let (json, payload) = raw_paths(path.as_ref());
    let header = RawHeader {
        dims: v.dims(),
        spacing: v.spacing,
        origin: v.origin,
        kind: v.kind,
        dtype: "float32".into(),
        byte_order: "little".into(),
        orientation: v.orientation,
    };
    let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Volume> {
    let (json, payload) = raw_paths(path.as_ref());
    let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let h: RawHeader = serde_json::from_slice(&text)?;
    if h.dtype != "float32" {
        return Err(Error::Unsupported {
            field: "dtype",
            value: h.dtype,
        });
    }
    if h.byte_order != "little" {
        return Err(Error::Unsupported {
            field: "byte_order",
            value: h.byte_order,
        });
    }
    let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let n: usize = h.dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, dims {:?} need {}",
            payload.display(),
            bytes.len(),
            h.dims,
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut v = Volume::new(h.dims, h.spacing, data, h.kind)?;
    v.origin = h.origin;
    v.orientation = h.orientation;
    Ok(v)
}

/// Reads NIfTI (as intensity) or raw (kind from the sidecar).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match VolumeFormat::of(path)? {
        VolumeFormat::Nifti | VolumeFormat::NiftiGz => read_nifti(path),
        VolumeFormat::Raw => read_raw(path),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::of(path)? {
        VolumeFormat::Nifti | VolumeFormat::NiftiGz => write_nifti(path, v),
        VolumeFormat::Raw => write_raw(path, v),
    }
}

/// Reads a volume and reinterprets it as a binary mask (nonzero is foreground).
pub fn read_mask(path: impl AsRef<Path>) -> Result<Volume> {
    let v = read_volume(path)?;
    let data = v.data().iter().map(|&x| (x != 0.0) as u8 as f32).collect();
    v.with_data(data, VolumeKind::BinaryMask)
}
