//! MVOL volume files: a `<name>.mvol.json` sidecar plus a `<name>.mvol.raw`
//! raster of little-endian `f32` values in x-fastest order.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, Modality, Volume3D};
use crate::error::{Error, Result};
use crate::Scalar;

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub offset_mm: [f64; 3],
    pub modality: Modality,
    pub dtype: String,
}

fn base_of(path: &Path) -> Result<PathBuf> {
    let s = path.to_str().ok_or_else(|| Error::InvalidPath(format!("{path:?}")))?;
    if s.is_empty() {
        return Err(Error::InvalidPath("empty path".into()));
    }
    let base = s
        .strip_suffix(".mvol.json")
        .or_else(|| s.strip_suffix(".mvol.raw"))
        .unwrap_or(s);
    if base.is_empty() || base.ends_with('/') {
        return Err(Error::InvalidPath(format!("no file name in {s:?}")));
    }
    Ok(PathBuf::from(base))
}

/// Sidecar path for a volume named by `path` (with or without extension).
pub fn sidecar_path(path: impl AsRef<Path>) -> Result<PathBuf> {
    let mut p = base_of(path.as_ref())?.into_os_string();
    p.push(".mvol.json");
    Ok(p.into())
}

pub fn raster_path(path: impl AsRef<Path>) -> Result<PathBuf> {
    let mut p = base_of(path.as_ref())?.into_os_string();
    p.push(".mvol.raw");
    Ok(p.into())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let json_path = sidecar_path(&path)?;
    let raw_path = raster_path(&path)?;
    let malformed = |reason: String| Error::MalformedSidecar { path: json_path.clone(), reason };

    let text = read(&json_path)?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| malformed(e.to_string()))?;
    if sidecar.dtype != DTYPE {
        return Err(malformed(format!("unsupported dtype {:?}", sidecar.dtype)));
    }
    let grid = Grid::new(sidecar.dims, sidecar.spacing_mm, sidecar.offset_mm)
        .map_err(|e| malformed(e.to_string()))?;

    let bytes = read(&raw_path)?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != grid.len() {
        return Err(Error::RasterSizeMismatch { expected: grid.len(), found: bytes.len() / 4 });
    }
    let mut raster = Vec::with_capacity(grid.len());
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteVoxel(i));
        }
        raster.push(T::lit(v as f64));
    }
    Volume3D::from_raster(&grid, raster, sidecar.modality)
}

/// Writes the sidecar/raster pair. Volumes are stored as `f32`.
pub fn save_volume<T: Scalar>(v: &Volume3D<T>, path: impl AsRef<Path>) -> Result<()> {
    let json_path = sidecar_path(&path)?;
    let raw_path = raster_path(&path)?;
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for (i, x) in v.raster().enumerate() {
        let f = x.to_f32().unwrap_or(f32::NAN);
        if !f.is_finite() {
            return Err(Error::NonFiniteVoxel(i));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    let sidecar = Sidecar {
        dims: v.dims(),
        spacing_mm: v.spacing(),
        offset_mm: v.offset(),
        modality: v.modality(),
        dtype: DTYPE.to_string(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&raw_path, bytes)?;
    fs::write(&json_path, text)?;
    Ok(())
}
