//! Minimal NIfTI-1 reading and writing for real CT data.
//!
//! Covers the cases this toolkit needs: single-file `.nii` / `.nii.gz`,
//! axis-aligned affines, float32/int16/uint8 storage with scl slope/intercept
//! applied on read, float32 on write. Orientation codes are derived from the
//! sign pattern of the axis-aligned sform; oblique affines are rejected.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{AxisCode, Orientation, Volume};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let f = File::open(path)?;
    if is_gz(path) {
        GzDecoder::new(f).read_to_end(&mut bytes)?;
    } else {
        let mut f = f;
        f.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Load a `.nii` or `.nii.gz` volume.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_all(path)?;
    if bytes.len() < VOX_OFFSET {
        return Err(Error::Format(format!("{}: too small for a NIfTI-1 header", path.display())));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "{}: not little-endian NIfTI-1 (sizeof_hdr = {sizeof_hdr})",
            path.display()
        )));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Format(format!("{}: unsupported NIfTI magic", path.display())));
    }
    let ndim = i16_at(&bytes, 40);
    if !(3..=4).contains(&ndim) || (ndim == 4 && i16_at(&bytes, 48) != 1) {
        return Err(Error::Format(format!("{}: expected a 3D volume, dim[0] = {ndim}", path.display())));
    }
    let shape = [
        i16_at(&bytes, 42) as usize,
        i16_at(&bytes, 44) as usize,
        i16_at(&bytes, 46) as usize,
    ];
    let datatype = i16_at(&bytes, 70);
    let spacing = [
        f32_at(&bytes, 80) as f64,
        f32_at(&bytes, 84) as f64,
        f32_at(&bytes, 88) as f64,
    ];
    let vox_offset = f32_at(&bytes, 108) as usize;
    let scl_slope = f32_at(&bytes, 112) as f64;
    let scl_inter = f32_at(&bytes, 116) as f64;
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope };
    let sform_code = i16_at(&bytes, 254);
    let orientation = if sform_code > 0 {
        orientation_from_sform(&bytes)?
    } else {
        Orientation::RAS
    };

    let n: usize = shape.iter().product();
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported NIfTI datatype {other} (supported: uint8, int16, float32)",
                path.display()
            )))
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(Error::Format(format!("{}: truncated voxel data", path.display())));
    }
    let raw = &bytes[vox_offset..vox_offset + n * elem];
    // NIfTI stores the first axis fastest; transpose into row-major [i,j,k].
    let mut data = vec![0.0f64; n];
    for (fidx, chunk) in raw.chunks_exact(elem).enumerate() {
        let value = match datatype {
            DT_UINT8 => chunk[0] as f64,
            DT_INT16 => i16::from_le_bytes([chunk[0], chunk[1]]) as f64,
            _ => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
        };
        let i = fidx % shape[0];
        let j = (fidx / shape[0]) % shape[1];
        let k = fidx / (shape[0] * shape[1]);
        data[(i * shape[1] + j) * shape[2] + k] = value * slope + scl_inter;
    }
    Volume::new(Tensor::from_vec(&shape, data)?, spacing, orientation)
}

fn orientation_from_sform(bytes: &[u8]) -> Result<Orientation> {
    // srow_x at 280, srow_y at 296, srow_z at 312; each 4 floats.
    let mut rows = [[0.0f64; 3]; 3];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(bytes, 280 + r * 16 + c * 4) as f64;
        }
    }
    // world axis r (x=R+, y=A+, z=S+) per data axis c; require axis alignment
    let mut codes = [AxisCode::R; 3];
    let mut used = [false; 3];
    let pos = [
        [AxisCode::R, AxisCode::L],
        [AxisCode::A, AxisCode::P],
        [AxisCode::S, AxisCode::I],
    ];
    for c in 0..3 {
        let mut best = 0usize;
        for r in 1..3 {
            if rows[r][c].abs() > rows[best][c].abs() {
                best = r;
            }
        }
        for r in 0..3 {
            if r != best && rows[r][c].abs() > 1e-6 * rows[best][c].abs().max(1e-12) {
                return Err(Error::Format("oblique NIfTI affines are not supported".into()));
            }
        }
        if rows[best][c] == 0.0 || used[best] {
            return Err(Error::Format("degenerate NIfTI sform".into()));
        }
        used[best] = true;
        codes[c] = if rows[best][c] > 0.0 { pos[best][0] } else { pos[best][1] };
    }
    let o = Orientation(codes);
    o.validate()?;
    Ok(o)
}

/// Write a volume as float32 NIfTI-1, gzip-compressed when the path ends in `.gz`.
pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    let shape = v.shape();
    for &d in &shape {
        if d > i16::MAX as usize {
            return Err(Error::InvalidShape(format!("dimension {d} exceeds NIfTI-1 i16 limit")));
        }
    }
    let mut hdr = vec![0u8; VOX_OFFSET];
    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
    hdr[42..44].copy_from_slice(&(shape[0] as i16).to_le_bytes());
    hdr[44..46].copy_from_slice(&(shape[1] as i16).to_le_bytes());
    hdr[46..48].copy_from_slice(&(shape[2] as i16).to_le_bytes());
    for off in (48..56).step_by(2) {
        hdr[off..off + 2].copy_from_slice(&1i16.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    hdr[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix
    hdr[76..80].copy_from_slice(&1.0f32.to_le_bytes()); // pixdim[0]
    hdr[80..84].copy_from_slice(&(v.spacing[0] as f32).to_le_bytes());
    hdr[84..88].copy_from_slice(&(v.spacing[1] as f32).to_le_bytes());
    hdr[88..92].copy_from_slice(&(v.spacing[2] as f32).to_le_bytes());
    hdr[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    hdr[254..256].copy_from_slice(&1i16.to_le_bytes()); // sform_code
    // axis-aligned sform from orientation + spacing
    for (c, code) in v.orientation.0.iter().enumerate() {
        let r = code.group();
        let sign = if code.positive() { 1.0 } else { -1.0 };
        let val = (sign * v.spacing[c]) as f32;
        let off = 280 + r * 16 + c * 4;
        hdr[off..off + 4].copy_from_slice(&val.to_le_bytes());
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    // voxel data, first axis fastest
    let mut body = Vec::with_capacity(v.data.numel() * 4);
    for k in 0..shape[2] {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                body.extend_from_slice(&(v.data.at3(i, j, k) as f32).to_le_bytes());
            }
        }
    }

    let f = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(&hdr)?;
        enc.write_all(&body)?;
        enc.finish()?;
    } else {
        let mut f = f;
        f.write_all(&hdr)?;
        f.write_all(&body)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::fs;

    #[test]
    fn nii_round_trip_preserves_values_and_metadata() {
        let dir = std::env::temp_dir().join("voladapt-nifti-test");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(3);
        let data = Tensor::from_fn(&[4, 5, 6], |_| (rng.normal() as f32) as f64);
        let v = Volume::new(data, [1.5, 1.5, 1.5], Orientation::parse("LPS").unwrap()).unwrap();
        for name in ["t.nii", "t.nii.gz"] {
            let path = dir.join(name);
            write_nifti(&path, &v).unwrap();
            let back = read_nifti(&path).unwrap();
            assert!(back.data.bit_eq(&v.data), "{name}");
            assert_eq!(back.orientation, v.orientation);
            for (a, b) in back.spacing.iter().zip(v.spacing.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_non_nifti_bytes() {
        let dir = std::env::temp_dir().join("voladapt-nifti-bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.nii");
        fs::write(&path, vec![0u8; 500]).unwrap();
        assert!(read_nifti(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
