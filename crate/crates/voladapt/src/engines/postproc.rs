//! Prediction post-processing: fixed-threshold binarization followed by
//! largest-connected-component filtering (26-connectivity).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::LabelMask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Threshold a probability map (rank-3 or single-channel rank-4) at
/// `threshold`, then keep only the largest 26-connected foreground component.
/// Ties go to the component containing the lexicographically smallest voxel.
/// An empty prediction stays empty.
pub fn binarize_and_largest_cc(probs: &Tensor, threshold: f64) -> Result<LabelMask> {
    let spatial: [usize; 3] = match probs.shape() {
        [d, h, w] => [*d, *h, *w],
        [1, d, h, w] => [*d, *h, *w],
        other => {
            return Err(Error::InvalidShape(format!(
                "expected [d,h,w] or [1,d,h,w] probability map, got {other:?}"
            )))
        }
    };
    let [d, h, w] = spatial;
    let n = d * h * w;
    let data = if probs.rank() == 4 { probs.channel(0) } else { probs.data() };
    let binary: Vec<bool> = data.iter().map(|&p| p > threshold).collect();

    // label components by BFS in lexicographic discovery order
    let mut best_size = 0usize;
    let mut best_voxels: Vec<usize> = Vec::new();
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if !binary[start] || visited[start] {
            continue;
        }
        let mut voxels = Vec::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            voxels.push(idx);
            let (z, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dz == 0 && dy == 0 && dx == 0 {
                            continue;
                        }
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let nidx = (nz as usize * h + ny as usize) * w + nx as usize;
                        if binary[nidx] && !visited[nidx] {
                            visited[nidx] = true;
                            queue.push_back(nidx);
                        }
                    }
                }
            }
        }
        // strict inequality keeps the earlier (lexicographically smaller
        // start) component on ties
        if voxels.len() > best_size {
            best_size = voxels.len();
            best_voxels = voxels;
        }
    }
    let mut out = Tensor::zeros(&[1, d, h, w]);
    for idx in best_voxels {
        out.data_mut()[idx] = 1.0;
    }
    LabelMask::new(out)
}
