//! Volumetric data model and deterministic preprocessing.
//!
//! A [`Volume`] is a rank-3 intensity grid with voxel spacing and an
//! anatomical orientation code; a [`LabelMask`] is a per-class stack of
//! binary masks on the same grid. Preprocessing covers reorientation,
//! isotropic resampling (trilinear for intensities, nearest-neighbor for
//! masks), intensity windowing, and zero-padded patch extraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Default CT intensity window, in Hounsfield units.
pub const DEFAULT_CLIP_LO: f64 = -175.0;
pub const DEFAULT_CLIP_HI: f64 = 250.0;

/// Anatomical direction of a data axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisCode {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    /// Anatomical axis group: 0 for R/L, 1 for A/P, 2 for S/I.
    pub fn group(self) -> usize {
        match self {
            AxisCode::R | AxisCode::L => 0,
            AxisCode::A | AxisCode::P => 1,
            AxisCode::S | AxisCode::I => 2,
        }
    }

    /// Positive direction within the group (R, A, S are positive).
    pub fn positive(self) -> bool {
        matches!(self, AxisCode::R | AxisCode::A | AxisCode::S)
    }

    pub fn from_char(c: char) -> Result<Self> {
        Ok(match c.to_ascii_uppercase() {
            'R' => AxisCode::R,
            'L' => AxisCode::L,
            'A' => AxisCode::A,
            'P' => AxisCode::P,
            'S' => AxisCode::S,
            'I' => AxisCode::I,
            other => {
                return Err(Error::InvalidOrientation(format!("unknown axis code '{other}'")))
            }
        })
    }

    pub fn to_char(self) -> char {
        match self {
            AxisCode::R => 'R',
            AxisCode::L => 'L',
            AxisCode::A => 'A',
            AxisCode::P => 'P',
            AxisCode::S => 'S',
            AxisCode::I => 'I',
        }
    }
}

/// Orientation code triple, e.g. RAS: data axis 0 runs right, 1 anterior, 2 superior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation(pub [AxisCode; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([AxisCode::R, AxisCode::A, AxisCode::S]);

    /// Parse a three-letter code such as "RAS" or "LPI".
    pub fn parse(code: &str) -> Result<Self> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != 3 {
            return Err(Error::InvalidOrientation(format!(
                "orientation code must have 3 letters, got {code:?}"
            )));
        }
        let axes = [
            AxisCode::from_char(chars[0])?,
            AxisCode::from_char(chars[1])?,
            AxisCode::from_char(chars[2])?,
        ];
        let o = Orientation(axes);
        o.validate()?;
        Ok(o)
    }

    /// Each of the three anatomical axis groups must appear exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for c in self.0 {
            if seen[c.group()] {
                return Err(Error::InvalidOrientation(format!(
                    "orientation {} repeats an anatomical axis",
                    self
                )));
            }
            seen[c.group()] = true;
        }
        Ok(())
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in self.0 {
            write!(f, "{}", c.to_char())?;
        }
        Ok(())
    }
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Orientation::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// 3D scalar intensity grid with spacing (mm) and orientation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Tensor,
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

impl Volume {
    pub fn new(data: Tensor, spacing: [f64; 3], orientation: Orientation) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::InvalidShape(format!(
                "volume data must be rank 3, got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        orientation.validate()?;
        Ok(Volume { data, spacing, orientation })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Per-class binary masks on the grid of a paired [`Volume`]; rank-4 `[c, d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub data: Tensor,
}

impl LabelMask {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::InvalidShape(format!(
                "label mask must be rank 4 [c,d,h,w], got {:?}",
                data.shape()
            )));
        }
        if !data.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::InvalidArgument("label mask values must be 0 or 1".into()));
        }
        Ok(LabelMask { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Single-channel mask view as a fresh rank-4 tensor.
    pub fn channel_mask(&self, c: usize) -> Result<LabelMask> {
        if c >= self.channels() {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {}-channel mask",
                self.channels()
            )));
        }
        let g = self.grid_shape();
        let data = Tensor::from_vec(&[1, g[0], g[1], g[2]], self.data.channel(c).to_vec())?;
        Ok(LabelMask { data })
    }

    /// Foreground voxel count of one channel.
    pub fn foreground_count(&self, c: usize) -> f64 {
        self.data.channel(c).iter().sum()
    }
}

/// Marks which of the global classes are annotated in a sample's source dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationVector(pub Vec<u8>);

impl AnnotationVector {
    pub fn new(w: Vec<u8>) -> Result<Self> {
        if w.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("annotation vector entries must be 0 or 1".into()));
        }
        Ok(AnnotationVector(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn annotated_count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_annotated(&self, class: usize) -> bool {
        self.0.get(class).copied() == Some(1)
    }
}

/// Re-express a volume under different orientation codes. The physical
/// content is unchanged: axes are permuted and flipped so that reorienting
/// back restores the original array bit-exactly.
pub fn reorient(v: &Volume, target: Orientation) -> Result<Volume> {
    target.validate()?;
    let (perm, flip) = reorient_plan(v.orientation, target);
    let data = permute_flip(&v.data, perm, flip);
    let spacing = [v.spacing[perm[0]], v.spacing[perm[1]], v.spacing[perm[2]]];
    Volume::new(data, spacing, target)
}

/// Reorient every channel of a label mask with the same axis plan.
pub fn reorient_mask(m: &LabelMask, current: Orientation, target: Orientation) -> Result<LabelMask> {
    target.validate()?;
    current.validate()?;
    let (perm, flip) = reorient_plan(current, target);
    let g = m.grid_shape();
    let new_g = [g[perm[0]], g[perm[1]], g[perm[2]]];
    let c = m.channels();
    let mut out = Tensor::zeros(&[c, new_g[0], new_g[1], new_g[2]]);
    for ch in 0..c {
        let src = Tensor::from_vec(&[g[0], g[1], g[2]], m.data.channel(ch).to_vec())?;
        let dst = permute_flip(&src, perm, flip);
        out.channel_mut(ch).copy_from_slice(dst.data());
    }
    LabelMask::new(out)
}

/// For each target axis j, `perm[j]` is the source axis covering the same
/// anatomical group and `flip[j]` whether its direction is reversed.
fn reorient_plan(from: Orientation, to: Orientation) -> ([usize; 3], [bool; 3]) {
    let mut perm = [0usize; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let want = to.0[j];
        for i in 0..3 {
            if from.0[i].group() == want.group() {
                perm[j] = i;
                flip[j] = from.0[i].positive() != want.positive();
            }
        }
    }
    (perm, flip)
}

fn permute_flip(t: &Tensor, perm: [usize; 3], flip: [bool; 3]) -> Tensor {
    let s = t.shape();
    let old = [s[0], s[1], s[2]];
    let new = [old[perm[0]], old[perm[1]], old[perm[2]]];
    let mut out = Tensor::zeros(&new);
    for a in 0..new[0] {
        let sa = if flip[0] { old[perm[0]] - 1 - a } else { a };
        for b in 0..new[1] {
            let sb = if flip[1] { old[perm[1]] - 1 - b } else { b };
            for c in 0..new[2] {
                let sc = if flip[2] { old[perm[2]] - 1 - c } else { c };
                let mut src = [0usize; 3];
                src[perm[0]] = sa;
                src[perm[1]] = sb;
                src[perm[2]] = sc;
                out.set3(a, b, c, t.at3(src[0], src[1], src[2]));
            }
        }
    }
    out
}

/// Round half away from zero, floored at 1 voxel.
fn output_dim(dim: usize, spacing: f64, target: f64) -> usize {
    let exact = dim as f64 * spacing / target;
    (exact + 0.5).floor().max(1.0) as usize
}

/// Resample a volume to isotropic `target` spacing with trilinear interpolation.
///
/// Output dimension along each axis is `round(dim * spacing / target)` with a
/// floor of one voxel. Sampling positions are aligned on voxel centers and
/// clamped at the borders.
pub fn resample_isotropic(v: &Volume, target: f64) -> Result<Volume> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be > 0, got {target}")));
    }
    let old = v.shape();
    let new = [
        output_dim(old[0], v.spacing[0], target),
        output_dim(old[1], v.spacing[1], target),
        output_dim(old[2], v.spacing[2], target),
    ];
    let mut out = Tensor::zeros(&new);
    for i in 0..new[0] {
        let p0 = (i as f64 * target / v.spacing[0]).min((old[0] - 1) as f64);
        let (i0, f0) = split_coord(p0, old[0]);
        for j in 0..new[1] {
            let p1 = (j as f64 * target / v.spacing[1]).min((old[1] - 1) as f64);
            let (j0, f1) = split_coord(p1, old[1]);
            for k in 0..new[2] {
                let p2 = (k as f64 * target / v.spacing[2]).min((old[2] - 1) as f64);
                let (k0, f2) = split_coord(p2, old[2]);
                let mut acc = 0.0;
                for (di, wi) in [(0, 1.0 - f0), (1, f0)] {
                    if wi == 0.0 {
                        continue;
                    }
                    for (dj, wj) in [(0, 1.0 - f1), (1, f1)] {
                        if wj == 0.0 {
                            continue;
                        }
                        for (dk, wk) in [(0, 1.0 - f2), (1, f2)] {
                            if wk == 0.0 {
                                continue;
                            }
                            acc += wi * wj * wk * v.data.at3(i0 + di, j0 + dj, k0 + dk);
                        }
                    }
                }
                out.set3(i, j, k, acc);
            }
        }
    }
    Volume::new(out, [target; 3], v.orientation)
}

/// Integer base and fractional part of a sampling coordinate, kept one voxel
/// away from the upper border so `base + 1` stays valid.
fn split_coord(p: f64, dim: usize) -> (usize, f64) {
    let base = p.floor() as usize;
    if base + 1 >= dim {
        // clamp to the last valid cell; fraction folds to the border sample
        if dim == 1 {
            return (0, 0.0);
        }
        return (dim - 2, p - (dim - 2) as f64);
    }
    (base, p - base as f64)
}

/// Resample a label mask to isotropic spacing with nearest-neighbor lookup,
/// preserving the {0,1} value set.
pub fn resample_mask_isotropic(m: &LabelMask, spacing: [f64; 3], target: f64) -> Result<LabelMask> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be > 0, got {target}")));
    }
    let old = m.grid_shape();
    let new = [
        output_dim(old[0], spacing[0], target),
        output_dim(old[1], spacing[1], target),
        output_dim(old[2], spacing[2], target),
    ];
    let c = m.channels();
    let mut out = Tensor::zeros(&[c, new[0], new[1], new[2]]);
    for ch in 0..c {
        let src = m.data.channel(ch);
        let dst = out.channel_mut(ch);
        for i in 0..new[0] {
            let si = nearest_coord(i, target, spacing[0], old[0]);
            for j in 0..new[1] {
                let sj = nearest_coord(j, target, spacing[1], old[1]);
                for k in 0..new[2] {
                    let sk = nearest_coord(k, target, spacing[2], old[2]);
                    dst[(i * new[1] + j) * new[2] + k] = src[(si * old[1] + sj) * old[2] + sk];
                }
            }
        }
    }
    LabelMask::new(out)
}

fn nearest_coord(i: usize, target: f64, spacing: f64, dim: usize) -> usize {
    let p = i as f64 * target / spacing;
    (p + 0.5).floor().max(0.0).min((dim - 1) as f64) as usize
}

/// Clamp intensities to `[lo, hi]` and scale linearly to `[0, 1]`.
pub fn clip_scale_intensity(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("intensity window requires lo < hi, got [{lo}, {hi}]")));
    }
    let range = hi - lo;
    let data = v.data.map(|x| (x.clamp(lo, hi) - lo) / range);
    Volume::new(data, v.spacing, v.orientation)
}

/// Extract a `size`-shaped patch with its corner at `origin`. Regions beyond
/// the volume bounds are zero-filled; spacing and orientation are preserved.
pub fn extract_patch(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Volume {
    let data = extract_patch_tensor(&v.data, origin, size);
    Volume { data, spacing: v.spacing, orientation: v.orientation }
}

/// Patch extraction on a raw rank-3 tensor (shared by mask sampling).
pub fn extract_patch_tensor(t: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let s = t.shape();
    let old = [s[0], s[1], s[2]];
    let mut out = Tensor::zeros(&size);
    let i1 = (origin[0] + size[0]).min(old[0]);
    let j1 = (origin[1] + size[1]).min(old[1]);
    let k1 = (origin[2] + size[2]).min(old[2]);
    for i in origin[0]..i1 {
        for j in origin[1]..j1 {
            if origin[2] >= k1 {
                continue;
            }
            let src_base = (i * old[1] + j) * old[2];
            let dst_base = ((i - origin[0]) * size[1] + (j - origin[1])) * size[2];
            let n = k1 - origin[2];
            out.data_mut()[dst_base..dst_base + n]
                .copy_from_slice(&t.data()[src_base + origin[2]..src_base + origin[2] + n]);
        }
    }
    out
}

/// Patch extraction across all channels of a label mask.
pub fn extract_mask_patch(m: &LabelMask, origin: [usize; 3], size: [usize; 3]) -> LabelMask {
    let c = m.channels();
    let g = m.grid_shape();
    let mut out = Tensor::zeros(&[c, size[0], size[1], size[2]]);
    for ch in 0..c {
        let src = Tensor::from_vec(&[g[0], g[1], g[2]], m.data.channel(ch).to_vec()).unwrap();
        let patch = extract_patch_tensor(&src, origin, size);
        out.channel_mut(ch).copy_from_slice(patch.data());
    }
    LabelMask { data: out }
}
