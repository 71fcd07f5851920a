//! Raw on-disk formats for phantom corpora.
//!
//! A volume is stored as a little-endian float32 blob next to a JSON sidecar
//! carrying shape, spacing, and orientation. Masks use the same scheme with a
//! uint8 blob and an extra channel dimension. The sidecar path is the blob
//! path with `.json` appended.
//!
//! ```text
//! sample_000.vol       <- f32le, shape[0]*shape[1]*shape[2] values, row-major
//! sample_000.vol.json  <- {"format":"voladapt-raw-volume","version":1,...}
//! sample_000.seg       <- u8, channels*shape[0]*shape[1]*shape[2] values
//! sample_000.seg.json
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelMask, Orientation, Volume};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const VOLUME_FORMAT: &str = "voladapt-raw-volume";
pub const MASK_FORMAT: &str = "voladapt-raw-mask";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeSidecar {
    format: String,
    version: u32,
    shape: [usize; 3],
    spacing: [f64; 3],
    orientation: Orientation,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskSidecar {
    format: String,
    version: u32,
    channels: usize,
    shape: [usize; 3],
    dtype: String,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    let mut os = blob.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let shape = v.shape();
    let sidecar = VolumeSidecar {
        format: VOLUME_FORMAT.into(),
        version: 1,
        shape,
        spacing: v.spacing,
        orientation: v.orientation,
        dtype: "f32le".into(),
    };
    let mut bytes = Vec::with_capacity(v.data.numel() * 4);
    for &x in v.data.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let sc: VolumeSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sc.format != VOLUME_FORMAT {
        return Err(Error::Format(format!("unexpected sidecar format {:?}", sc.format)));
    }
    if sc.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported volume dtype {:?}", sc.dtype)));
    }
    let bytes = fs::read(path)?;
    let n: usize = sc.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "volume blob {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::new(
        Tensor::from_vec(&sc.shape, data)?,
        sc.spacing,
        sc.orientation,
    )
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    let sidecar = MaskSidecar {
        format: MASK_FORMAT.into(),
        version: 1,
        channels: m.channels(),
        shape: m.grid_shape(),
        dtype: "u8".into(),
    };
    let bytes: Vec<u8> = m.data.data().iter().map(|&v| v as u8).collect();
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let sc: MaskSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sc.format != MASK_FORMAT {
        return Err(Error::Format(format!("unexpected sidecar format {:?}", sc.format)));
    }
    let bytes = fs::read(path)?;
    let n = sc.channels * sc.shape.iter().product::<usize>();
    if bytes.len() != n {
        return Err(Error::Format(format!(
            "mask blob {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n
        )));
    }
    if bytes.iter().any(|&b| b > 1) {
        return Err(Error::Format("mask blob contains values other than 0/1".into()));
    }
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64).collect();
    LabelMask::new(Tensor::from_vec(
        &[sc.channels, sc.shape[0], sc.shape[1], sc.shape[2]],
        data,
    )?)
}
