//! Patch sampling and training-time augmentation.
//!
//! Sampling is half foreground-centered, half uniform: pure uniform sampling
//! starves small organs at desk scale. Augmentation covers random intensity
//! shifts and right-angle rotations of cubic patches.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Flat indices of foreground voxels across the given mask channels.
pub fn foreground_indices(mask: &Tensor, channels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for &c in channels {
        for (i, &v) in mask.channel(c).iter().enumerate() {
            if v == 1.0 {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Draw a patch origin: with probability 1/2 centered on a random foreground
/// voxel (clamped inside the grid), otherwise uniform over valid origins.
pub fn sample_patch_origin(
    vol_shape: [usize; 3],
    patch: [usize; 3],
    foreground: &[usize],
    rng: &mut Rng,
) -> [usize; 3] {
    let max_origin = |dim: usize, p: usize| dim.saturating_sub(p);
    if !foreground.is_empty() && rng.uniform() < 0.5 {
        let flat = foreground[rng.below(foreground.len())];
        let idx = [
            flat / (vol_shape[1] * vol_shape[2]),
            (flat / vol_shape[2]) % vol_shape[1],
            flat % vol_shape[2],
        ];
        let mut origin = [0usize; 3];
        for a in 0..3 {
            let half = patch[a] / 2;
            let want = idx[a].saturating_sub(half);
            origin[a] = want.min(max_origin(vol_shape[a], patch[a]));
        }
        origin
    } else {
        let mut origin = [0usize; 3];
        for a in 0..3 {
            let hi = max_origin(vol_shape[a], patch[a]);
            origin[a] = if hi == 0 { 0 } else { rng.below(hi + 1) };
        }
        origin
    }
}

/// Rotate a rank-3 tensor by `k` right angles in the (axis_a, axis_b) plane.
/// Patches are cubic so the shape is preserved.
pub fn rot90(t: &Tensor, plane: (usize, usize), k: usize) -> Tensor {
    let s = t.shape();
    let dims = [s[0], s[1], s[2]];
    debug_assert_eq!(dims[plane.0], dims[plane.1], "rot90 needs square plane");
    let mut out = t.clone();
    for _ in 0..(k % 4) {
        let cur = out.clone();
        let n = dims[plane.0];
        let mut next = Tensor::zeros(&dims);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for l in 0..dims[2] {
                    let mut src = [i, j, l];
                    // quarter turn: (a, b) <- (b, n-1-a)
                    let (a, b) = (src[plane.0], src[plane.1]);
                    src[plane.0] = b;
                    src[plane.1] = n - 1 - a;
                    next.set3(i, j, l, cur.at3(src[0], src[1], src[2]));
                }
            }
        }
        out = next;
    }
    out
}

/// Random right-angle rotation parameters.
pub fn random_rot90(rng: &mut Rng) -> ((usize, usize), usize) {
    let planes = [(0, 1), (0, 2), (1, 2)];
    (planes[rng.below(3)], rng.below(4))
}

/// Additive intensity shift in [-magnitude, magnitude].
pub fn intensity_shift(patch: &mut Tensor, magnitude: f64, rng: &mut Rng) {
    let delta = rng.uniform_in(-magnitude, magnitude);
    for v in patch.data_mut() {
        *v += delta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_indices_finds_union() {
        let mut m = Tensor::zeros(&[2, 2, 2, 2]);
        m.channel_mut(0)[1] = 1.0;
        m.channel_mut(1)[1] = 1.0;
        m.channel_mut(1)[5] = 1.0;
        assert_eq!(foreground_indices(&m, &[0, 1]), vec![1, 5]);
        assert_eq!(foreground_indices(&m, &[0]), vec![1]);
    }

    #[test]
    fn origins_always_keep_patch_in_bounds_when_possible() {
        let mut rng = Rng::new(1);
        let fg: Vec<usize> = vec![0, 100, 4095];
        for _ in 0..200 {
            let o = sample_patch_origin([16, 16, 16], [8, 8, 8], &fg, &mut rng);
            for a in 0..3 {
                assert!(o[a] + 8 <= 16, "{o:?}");
            }
        }
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let t = Tensor::from_fn(&[4, 4, 4], |i| i as f64);
        for plane in [(0, 1), (0, 2), (1, 2)] {
            let r = rot90(&t, plane, 4);
            assert!(r.bit_eq(&t), "{plane:?}");
        }
    }

    #[test]
    fn rot90_once_permutes_indices() {
        let t = Tensor::from_fn(&[3, 3, 3], |i| i as f64);
        let r = rot90(&t, (0, 1), 1);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(r.at3(i, j, k), t.at3(j, 2 - i, k));
                }
            }
        }
    }

    #[test]
    fn intensity_shift_is_uniform_offset() {
        let mut rng = Rng::new(5);
        let base = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let mut shifted = base.clone();
        intensity_shift(&mut shifted, 0.1, &mut rng);
        let delta = shifted.data()[0] - base.data()[0];
        assert!(delta.abs() <= 0.1);
        for (a, b) in shifted.data().iter().zip(base.data()) {
            assert!((a - b - delta).abs() < 1e-12);
        }
    }
}
