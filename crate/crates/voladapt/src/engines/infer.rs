//! Sliding-window inference with uniform overlap averaging.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::layers::{Mode, Partition};
use crate::nets::SegModel;
use crate::tensor::Tensor;
use crate::volume::{extract_patch, Volume};

/// Tile origins covering a volume with the requested fractional overlap.
/// The final tile along each axis is clamped so the far edge is covered;
/// volumes smaller than the patch yield a single origin at zero (the patch
/// extraction zero-pads past the boundary).
pub fn tile_origins(vol: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Vec<[usize; 3]>> {
    if !(0.0..=0.75).contains(&overlap) {
        return Err(Error::InvalidArgument(format!(
            "overlap must be in [0, 0.75], got {overlap}"
        )));
    }
    let mut per_axis: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for a in 0..3 {
        let axis = &mut per_axis[a];
        if vol[a] <= patch[a] {
            axis.push(0);
            continue;
        }
        let stride = ((patch[a] as f64) * (1.0 - overlap)).floor().max(1.0) as usize;
        let last = vol[a] - patch[a];
        let mut pos = 0;
        while pos < last {
            axis.push(pos);
            pos += stride;
        }
        axis.push(last);
        axis.dedup();
    }
    let mut out = Vec::new();
    for &i in &per_axis[0] {
        for &j in &per_axis[1] {
            for &k in &per_axis[2] {
                out.push([i, j, k]);
            }
        }
    }
    Ok(out)
}

/// Full-volume probability map assembled from overlapping patch predictions
/// with uniform averaging in overlap zones. Deterministic; runs the model in
/// inference mode.
pub fn sliding_window_predict(
    model: &mut SegModel,
    volume: &Volume,
    patch: [usize; 3],
    overlap: f64,
) -> Result<Tensor> {
    let origins = tile_origins(volume.shape(), patch, overlap)?;
    let mut tiles: Vec<Tensor> = Vec::with_capacity(origins.len());
    for &o in &origins {
        let p = extract_patch(volume, o, patch);
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, &Partition::default());
        let pv = tape.leaf(p.data.insert_channel_axis(), false);
        let probs = model.forward_target_probs(&mut tape, &vars, pv, Mode::Eval)?;
        tiles.push(tape.value(probs).clone());
    }
    let mut tape = Tape::new();
    let tile_vars: Vec<Var> = tiles.into_iter().map(|t| tape.leaf(t, false)).collect();
    let out = tape.stitch(&tile_vars, &origins, volume.shape());
    Ok(tape.value(out).clone())
}

/// Differentiable stitched query probabilities for transductive adaptation:
/// per-tile feature maps (computed once, the backbone being frozen) flow
/// through the head on the caller's tape and are stitched there, so the
/// penalty gradient reaches the head parameters through every tile.
pub fn stitched_probs_on_tape(
    model: &mut SegModel,
    tape: &mut Tape,
    vars: &crate::nets::model::ModelVars,
    tile_features: &[Tensor],
    origins: &[[usize; 3]],
    out_spatial: [usize; 3],
    mode: Mode,
) -> Result<Var> {
    let mut prob_tiles = Vec::with_capacity(tile_features.len());
    for feat in tile_features {
        let f = tape.leaf(feat.clone(), false);
        let p = model.head_probs_from_features(tape, vars, f, mode)?;
        prob_tiles.push(p);
    }
    Ok(tape.stitch(&prob_tiles, origins, out_spatial))
}

/// Backbone features for each tile of a volume, in inference mode.
pub fn query_tile_features(
    model: &mut SegModel,
    volume: &Volume,
    patch: [usize; 3],
    overlap: f64,
) -> Result<(Vec<Tensor>, Vec<[usize; 3]>)> {
    let origins = tile_origins(volume.shape(), patch, overlap)?;
    let mut feats = Vec::with_capacity(origins.len());
    for &o in &origins {
        let p = extract_patch(volume, o, patch);
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, &Partition::default());
        let pv = tape.leaf(p.data.insert_channel_axis(), false);
        let f = model.backbone.forward(&mut tape, &vars.backbone, pv, Mode::Eval)?;
        feats.push(tape.value(f).clone());
    }
    Ok((feats, origins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Arch, Backbone, SegHead, TrainStrategy};
    use crate::rng::Rng;
    use crate::volume::Orientation;

    fn model() -> SegModel {
        let arch = Arch::standard(2, 4, 2);
        SegModel::assemble(
            Backbone::init(arch, 3),
            SegHead::init(arch, 4),
            TrainStrategy::Generalization,
            0,
            5,
        )
        .unwrap()
    }

    fn volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = Rng::new(seed);
        Volume::new(
            Tensor::from_fn(&[shape[0], shape[1], shape[2]], |_| rng.uniform()),
            [1.5; 3],
            Orientation::RAS,
        )
        .unwrap()
    }

    #[test]
    fn origins_cover_and_respect_overlap_bounds() {
        let o = tile_origins([16, 16, 16], [8, 8, 8], 0.5).unwrap();
        assert!(o.contains(&[0, 0, 0]) && o.contains(&[8, 8, 8]));
        assert!(tile_origins([16; 3], [8; 3], 0.9).is_err());
        // volume smaller than patch: single zero origin
        assert_eq!(tile_origins([4, 4, 4], [8, 8, 8], 0.0).unwrap(), vec![[0, 0, 0]]);
    }

    #[test]
    fn single_tile_equals_direct_forward() {
        let mut m = model();
        let v = volume([8, 8, 8], 1);
        let sw = sliding_window_predict(&mut m, &v, [8, 8, 8], 0.0).unwrap();
        let mut tape = Tape::new();
        let (_, vars) = m.bind(&mut tape, &Partition::default());
        let pv = tape.leaf(v.data.clone().insert_channel_axis(), false);
        let direct = m.forward_target_probs(&mut tape, &vars, pv, Mode::Eval).unwrap();
        assert!(sw.max_abs_diff(tape.value(direct)) < 1e-6);
    }

    #[test]
    fn overlapping_tiles_average_within_tile_range() {
        let mut m = model();
        let v = volume([12, 8, 8], 2);
        let sw = sliding_window_predict(&mut m, &v, [8, 8, 8], 0.5).unwrap();
        assert_eq!(sw.shape(), &[1, 12, 8, 8]);
        for &p in sw.data() {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn hand_assembled_average_matches() {
        let mut m = model();
        let v = volume([12, 8, 8], 7);
        let sw = sliding_window_predict(&mut m, &v, [8, 8, 8], 0.5).unwrap();
        // enumerate tiles by hand: origins 0 and 4 along axis 0
        let origins = tile_origins([12, 8, 8], [8, 8, 8], 0.5).unwrap();
        assert_eq!(origins, vec![[0, 0, 0], [4, 0, 0]]);
        let mut tiles = Vec::new();
        for &o in &origins {
            let p = extract_patch(&v, o, [8, 8, 8]);
            let mut tape = Tape::new();
            let (_, vars) = m.bind(&mut tape, &Partition::default());
            let pv = tape.leaf(p.data.insert_channel_axis(), false);
            let probs = m.forward_target_probs(&mut tape, &vars, pv, Mode::Eval).unwrap();
            tiles.push(tape.value(probs).clone());
        }
        for z in 0..12usize {
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    if z < 8 {
                        acc += tiles[0].data()[(z * 8 + y) * 8 + x];
                        n += 1.0;
                    }
                    if z >= 4 {
                        acc += tiles[1].data()[((z - 4) * 8 + y) * 8 + x];
                        n += 1.0;
                    }
                    let want = acc / n;
                    let got = sw.data()[(z * 8 + y) * 8 + x];
                    assert!((got - want).abs() < 1e-6, "voxel ({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn padded_volume_never_errors() {
        let mut m = model();
        let v = volume([4, 4, 4], 3);
        let sw = sliding_window_predict(&mut m, &v, [8, 8, 8], 0.25).unwrap();
        assert_eq!(sw.shape(), &[1, 4, 4, 4]);
    }
}
